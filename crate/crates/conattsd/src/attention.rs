//! Inter-modality contrastive attention.
//!
//! Conventional scaled dot-product weights highlight the target-modality
//! positions most aligned with the anchor query; the opponent weights —
//! a softmax over `1 - a_c` — concentrate instead on the least aligned
//! positions. The opponent-weighted sum of target vectors is the contrastive
//! vector, a representation of what the two modalities disagree about.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{row_vector, ContextVectorSequence};
use crate::error::{Error, Result};
use crate::layers::mask_logit_tensor;
use crate::tensor::{NodeId, Scalar, Tape};

/// One of the three input channels carried by every utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn letter(self) -> &'static str {
        match self {
            Modality::Text => "T",
            Modality::Audio => "A",
            Modality::Visual => "V",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T" | "t" | "text" => Ok(Modality::Text),
            "A" | "a" | "audio" => Ok(Modality::Audio),
            "V" | "v" | "visual" | "vision" => Ok(Modality::Visual),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

impl serde::Serialize for Modality {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.letter())
    }
}

impl<'de> serde::Deserialize<'de> for Modality {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A directed pairing `anchor → target`: the anchor modality supplies the
/// query, the target supplies keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DirectedBiModalVariant {
    anchor: Modality,
    target: Modality,
}

impl DirectedBiModalVariant {
    pub fn new(anchor: Modality, target: Modality) -> Result<Self> {
        if anchor == target {
            return Err(Error::Config(format!(
                "a bi-modal variant needs two distinct modalities, got {anchor}->{target}"
            )));
        }
        Ok(DirectedBiModalVariant { anchor, target })
    }

    pub fn anchor(&self) -> Modality {
        self.anchor
    }

    pub fn target(&self) -> Modality {
        self.target
    }
}

impl fmt::Display for DirectedBiModalVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.anchor, self.target)
    }
}

impl FromStr for DirectedBiModalVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.replace('→', "->");
        let mut parts = normalized.split("->");
        let (Some(a), Some(t), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Config(format!(
                "expected a directed variant like T->A, got {s:?}"
            )));
        };
        DirectedBiModalVariant::new(a.parse()?, t.parse()?)
    }
}

impl serde::Serialize for DirectedBiModalVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for DirectedBiModalVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Conventional weights, opponent weights, and the contrastive vector for one
/// query.
pub struct AttentionOutput {
    /// `a_c: [n]`, sums to 1 over unmasked positions.
    pub conventional: NodeId,
    /// `a_o: [n]`, softmax of `1 - a_c`, sums to 1 over unmasked positions.
    pub opponent: NodeId,
    /// `r: [hidden]`, opponent-weighted sum of value rows.
    pub contrastive: NodeId,
}

/// `a_c = softmax(Q·K_jᵀ / √d_k)` over the `n` key positions, with `d_k` the
/// key width. Masked positions are excluded before the softmax.
pub fn conventional_weights<F: Scalar>(
    tape: &mut Tape<F>,
    q: NodeId,
    k: NodeId,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let qs = tape.value(q).shape().to_vec();
    let ks = tape.value(k).shape().to_vec();
    if qs.len() != 1 || ks.len() != 2 || qs[0] != ks[1] {
        return Err(Error::Shape(format!(
            "conventional_weights expects Q [d] and K [n, d], got {qs:?} and {ks:?}"
        )));
    }
    let n = ks[0];
    validate_mask(mask, n)?;
    let d_k = ks[1];
    let scores = tape.matmul(k, q)?;
    let mut logits = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    if let Some(m) = mask.filter(|m| m.iter().any(|&b| b)) {
        let ml = tape.constant(mask_logit_tensor::<F>(m, None));
        logits = tape.add(logits, ml)?;
    }
    tape.softmax(logits, 0)
}

/// `a_o = softmax(1 - a_c)`, with masked positions excluded again before the
/// softmax. Mass concentrates where `a_c` is small.
pub fn opponent_weights<F: Scalar>(
    tape: &mut Tape<F>,
    a_c: NodeId,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let shape = tape.value(a_c).shape().to_vec();
    if shape.len() != 1 {
        return Err(Error::Shape(format!(
            "opponent_weights expects a weight vector, got {shape:?}"
        )));
    }
    validate_mask(mask, shape[0])?;
    let mut flipped = tape.one_minus(a_c)?;
    if let Some(m) = mask.filter(|m| m.iter().any(|&b| b)) {
        let ml = tape.constant(mask_logit_tensor::<F>(m, None));
        flipped = tape.add(flipped, ml)?;
    }
    tape.softmax(flipped, 0)
}

/// `r = a_o · V`: the opponent-weighted sum of value rows.
pub fn contrastive_vector<F: Scalar>(
    tape: &mut Tape<F>,
    a_o: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let ws = tape.value(a_o).shape().to_vec();
    let vs = tape.value(v).shape().to_vec();
    if ws.len() != 1 || vs.len() != 2 || ws[0] != vs[0] {
        return Err(Error::Shape(format!(
            "contrastive_vector expects weights [n] and values [n, d], got {ws:?} and {vs:?}"
        )));
    }
    tape.matmul(a_o, v)
}

/// Full contrastive attention for one query: conventional weights, opponent
/// weights, and the contrastive vector.
pub fn contrastive_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let conventional = conventional_weights(tape, q, k, mask)?;
    let opponent = opponent_weights(tape, conventional, mask)?;
    let contrastive = contrastive_vector(tape, opponent, v)?;
    Ok(AttentionOutput {
        conventional,
        opponent,
        contrastive,
    })
}

/// Contrastive vector `r_i` for a directed variant at utterance `i`: the
/// anchor's row `i` queries the target modality's whole sequence, which
/// serves as both keys and values.
pub fn inter_modality_contrastive<F: Scalar>(
    tape: &mut Tape<F>,
    variant: DirectedBiModalVariant,
    h_anchor: &ContextVectorSequence,
    h_target: &ContextVectorSequence,
    i: usize,
) -> Result<NodeId> {
    if h_anchor.len != h_target.len || h_anchor.mask != h_target.mask {
        return Err(Error::Contract(format!(
            "variant {variant}: anchor and target sequences disagree in length or mask"
        )));
    }
    if i >= h_anchor.len {
        return Err(Error::Contract(format!(
            "utterance index {i} out of range for length {}",
            h_anchor.len
        )));
    }
    let q = row_vector(tape, h_anchor.rows, i, h_anchor.hidden)?;
    let out = contrastive_attention(tape, q, h_target.rows, h_target.rows, Some(&h_target.mask))?;
    Ok(out.contrastive)
}

fn validate_mask(mask: Option<&[bool]>, n: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Shape(format!(
                "mask length {} does not match {n} positions",
                m.len()
            )));
        }
        if m.iter().all(|&b| b) {
            return Err(Error::Contract(
                "every attention position is masked out".into(),
            ));
        }
    }
    Ok(())
}
