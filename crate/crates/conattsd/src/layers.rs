//! Parameterized layers: linear projection, GRU cell, layer normalization,
//! dropout, multi-head self-attention, and the post-norm Transformer block.
//!
//! Layer parameter structs hold tape [`NodeId`]s, so one set of stored weights
//! can be bound to a tape once and reused across every forward pass recorded
//! on it. The stored weights themselves live in the model's parameter set.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Scalar, Tape, Tensor};

/// Logit offset standing in for -inf on masked attention positions. Large
/// enough to underflow to exactly zero weight, finite to avoid NaNs.
pub const MASK_LOGIT: f64 = -1e9;

/// Affine map `x · Wᵀ + b` with `weight: [out, in]`, `bias: [out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Gate parameters of one GRU cell.
///
/// `w_*: [hidden, input]` act on the input, `u_*: [hidden, hidden]` on the
/// recurrent state, `b_*: [hidden]` are gate biases.
#[derive(Debug, Clone, Copy)]
pub struct GruCellParams {
    pub w_z: NodeId,
    pub w_r: NodeId,
    pub w_h: NodeId,
    pub u_z: NodeId,
    pub u_r: NodeId,
    pub u_h: NodeId,
    pub b_z: NodeId,
    pub b_r: NodeId,
    pub b_h: NodeId,
}

/// Gain/bias pair of one layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: NodeId,
    pub bias: NodeId,
}

/// One Transformer encoder block: self-attention and MLP sub-layers, each
/// wrapped in a residual connection followed by layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlockParams {
    /// Stacked per-head query/key/value projections, each `[d, d]`.
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: LinearParams,
    pub mlp_in: LinearParams,
    pub mlp_out: LinearParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout configuration. Eval mode is an exact identity.
#[derive(Debug, Clone, Copy)]
pub struct DropoutConfig {
    pub rate: f64,
    pub mode: Mode,
}

impl DropoutConfig {
    pub fn new(rate: f64, mode: Mode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(DropoutConfig { rate, mode })
    }
}

/// `x · Wᵀ + b`. Accepts a single vector `[in]` or a row batch `[n, in]`.
pub fn linear_forward<F: Scalar>(
    tape: &mut Tape<F>,
    p: &LinearParams,
    x: NodeId,
) -> Result<NodeId> {
    match tape.value(x).rank() {
        1 => {
            let wx = tape.matmul(p.weight, x)?;
            tape.add(wx, p.bias)
        }
        2 => {
            let wt = tape.transpose(p.weight)?;
            let xw = tape.matmul(x, wt)?;
            tape.add_row(xw, p.bias)
        }
        r => Err(Error::Shape(format!(
            "linear_forward expects rank 1 or 2 input, got rank {r}"
        ))),
    }
}

/// One GRU step:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell_step<F: Scalar>(
    tape: &mut Tape<F>,
    p: &GruCellParams,
    x: NodeId,
    h_prev: NodeId,
) -> Result<NodeId> {
    let gate = |tape: &mut Tape<F>, w, u, b, h| -> Result<NodeId> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = tape.sigmoid(r_pre)?;

    let rh = tape.mul(r, h_prev)?;
    let cand_pre = gate(tape, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = tape.tanh(cand_pre)?;

    let keep = tape.one_minus(z)?;
    let kept = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, cand)?;
    tape.add(kept, new)
}

/// Layer normalization over the trailing axis (eps 1e-5, biased variance).
pub fn layer_norm<F: Scalar>(
    tape: &mut Tape<F>,
    p: &NormParams,
    x: NodeId,
) -> Result<NodeId> {
    tape.layer_norm(x, p.gain, p.bias)
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1 - rate)`; eval mode returns the
/// input node untouched.
pub fn dropout_apply<F: Scalar, R: Rng>(
    tape: &mut Tape<F>,
    cfg: &DropoutConfig,
    x: NodeId,
    rng: &mut R,
) -> Result<NodeId> {
    if cfg.rate >= 1.0 || cfg.rate < 0.0 {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {}",
            cfg.rate
        )));
    }
    if cfg.mode == Mode::Eval || cfg.rate == 0.0 {
        return Ok(x);
    }
    let keep_scale = F::from_f64(1.0 / (1.0 - cfg.rate));
    let shape = tape.value(x).shape().to_vec();
    let numel = tape.value(x).numel();
    let mask_data: Vec<F> = (0..numel)
        .map(|_| {
            if rng.gen::<f64>() < cfg.rate {
                F::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask_data)?);
    tape.mul(x, mask)
}

/// Additive attention-logit mask: `0` where valid, [`MASK_LOGIT`] where
/// `mask[j]` is true, replicated over `rows` query rows when given.
pub(crate) fn mask_logit_tensor<F: Scalar>(mask: &[bool], rows: Option<usize>) -> Tensor<F> {
    let line: Vec<F> = mask
        .iter()
        .map(|&m| if m { F::from_f64(MASK_LOGIT) } else { F::zero() })
        .collect();
    match rows {
        None => Tensor::from_vec(line),
        Some(r) => {
            let mut data = Vec::with_capacity(r * line.len());
            for _ in 0..r {
                data.extend_from_slice(&line);
            }
            Tensor::new(vec![r, mask.len()], data).expect("mask shape")
        }
    }
}

struct MhsaDetail {
    out: NodeId,
    /// Post-softmax `[n, n]` attention weights per head.
    head_weights: Vec<NodeId>,
}

fn mhsa_detailed<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TransformerBlockParams,
    x: NodeId,
    mask: Option<&[bool]>,
) -> Result<MhsaDetail> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "self-attention expects [n, d] input, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if d % p.heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} is not divisible by {} heads",
            p.heads
        )));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Shape(format!(
                "mask length {} does not match sequence length {n}",
                m.len()
            )));
        }
    }
    let dk = d / p.heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let project = |tape: &mut Tape<F>, w: NodeId| -> Result<NodeId> {
        let wt = tape.transpose(w)?;
        tape.matmul(x, wt)
    };
    let q = project(tape, p.wq)?;
    let k = project(tape, p.wk)?;
    let v = project(tape, p.wv)?;

    let mask_logits = mask
        .filter(|m| m.iter().any(|&b| b))
        .map(|m| tape.constant(mask_logit_tensor::<F>(m, Some(n))));

    let mut heads = Vec::with_capacity(p.heads);
    let mut head_weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice(q, 1, h * dk, dk)?;
        let kh = tape.slice(k, 1, h * dk, dk)?;
        let vh = tape.slice(v, 1, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut logits = tape.scale(scores, scale)?;
        if let Some(ml) = mask_logits {
            logits = tape.add(logits, ml)?;
        }
        let weights = tape.softmax(logits, 1)?;
        head_weights.push(weights);
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat(&heads, 1)?;
    let out = linear_forward(tape, &p.wo, merged)?;
    Ok(MhsaDetail { out, head_weights })
}

/// Scaled dot-product self-attention over `x: [n, d]` with `p.heads` heads.
/// Positions where `mask[j]` is true are excluded as keys for every query.
pub fn multi_head_self_attention<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TransformerBlockParams,
    x: NodeId,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    Ok(mhsa_detailed(tape, p, x, mask)?.out)
}

/// Post-norm Transformer block:
/// `y1 = LayerNorm(x + SelfAttn(x))`, `y2 = LayerNorm(y1 + MLP(y1))`,
/// with `MLP = linear(d → 4d) → relu → linear(4d → d)`.
pub fn transformer_block<F: Scalar>(
    tape: &mut Tape<F>,
    p: &TransformerBlockParams,
    x: NodeId,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let attn = multi_head_self_attention(tape, p, x, mask)?;
    let res1 = tape.add(x, attn)?;
    let y1 = layer_norm(tape, &p.norm1, res1)?;

    let expanded = linear_forward(tape, &p.mlp_in, y1)?;
    let activated = tape.relu(expanded)?;
    let mlp = linear_forward(tape, &p.mlp_out, activated)?;
    let res2 = tape.add(y1, mlp)?;
    layer_norm(tape, &p.norm2, res2)
}
