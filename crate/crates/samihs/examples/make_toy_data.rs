//! Generate a small synthetic dataset for trying out the CLI:
//!
//! ```text
//! cargo run --example make_toy_data -- /tmp/toy 6 4 16 0
//! ```
//!
//! Arguments: output directory, cases, slices per case, slice side, seed.

use samihs::data::generate_toy_dataset;
use std::path::PathBuf;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir: PathBuf = args.next().unwrap_or_else(|| "toy_data".into()).into();
    let cases: usize = args.next().map(|v| v.parse().expect("cases")).unwrap_or(6);
    let slices: usize = args.next().map(|v| v.parse().expect("slices")).unwrap_or(4);
    let side: usize = args.next().map(|v| v.parse().expect("side")).unwrap_or(16);
    let seed: u64 = args.next().map(|v| v.parse().expect("seed")).unwrap_or(0);
    let manifest = generate_toy_dataset(&dir, cases, slices, side, seed).expect("generate");
    println!("wrote {}", manifest.display());
}
