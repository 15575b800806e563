//! Writes the desk synthetic dataset to a directory (default `synthetic-data`).

use std::path::PathBuf;

use ldca::synthetic::{generate_synthetic, SyntheticSpec};

fn main() -> ldca::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| PathBuf::from("synthetic-data"), PathBuf::from);
    let written = generate_synthetic(&SyntheticSpec::desk(0), &out, true)?;
    println!("wrote {written} images to {}", out.display());
    Ok(())
}
