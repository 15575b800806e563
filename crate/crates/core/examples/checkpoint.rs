//! Saves a model to a checkpoint and reads back its manifest.

use ldca::checkpoint::Checkpoint;
use ldca::model::{Model, ModelConfig};

fn main() -> ldca::Result<()> {
    let dir = std::env::temp_dir().join("ldca-checkpoint-example");
    let path = dir.join("desk.ckpt");
    let ckpt = Checkpoint::new(Model::init(ModelConfig::desk(), 3)?, 0, None);
    ckpt.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let manifest = back.manifest();
    println!(
        "{} bytes, fingerprint {}",
        std::fs::metadata(&path).map_or(0, |m| m.len()),
        manifest.fingerprint
    );
    for entry in manifest.arrays.iter().take(6) {
        println!("  {:40} {:?}", entry.name, entry.shape);
    }
    println!("  ... {} arrays in total", manifest.arrays.len());
    assert_eq!(back, ckpt);
    Ok(())
}
