//! Runs the context augmenter at both profiles and reports every stage's shape.

use ldca::descriptors::DescriptorMap;
use ldca::ldca::{augment, init_ldca, LdcaConfig};
use ldca_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ldca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, cfg, side) in [
        ("desk", LdcaConfig::desk(), 8),
        ("full", LdcaConfig::full(), 21),
    ] {
        let params = init_ldca(&cfg, 1)?;
        let desc = DescriptorMap::new(Tensor::randn(&[64, side, side], 1.0, &mut rng))?;
        let out = augment(&desc, &params, &cfg, false)?;
        println!(
            "{name}: {:?} -> pooled {}x{} -> {} tokens of width {} -> {:?}",
            desc.tensor().shape(),
            cfg.grid,
            cfg.grid,
            cfg.tokens(),
            cfg.latent,
            out.map.tensor().shape()
        );
        let bypass = augment(&desc, &params, &cfg, true)?;
        println!(
            "{name} bypass: augmented = {}, shape {:?}",
            bypass.augmented,
            bypass.map.tensor().shape()
        );
    }
    Ok(())
}
