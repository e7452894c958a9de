fn main() {
    std::process::exit(42);
}
