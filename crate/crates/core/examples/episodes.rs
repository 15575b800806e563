//! Samples 5-way 1-shot and 5-shot episodes from a synthetic test split.

use ldca::episode::{episode_rng, sample_episode, EpisodeSpec};
use ldca::synthetic::{generate_splits, SyntheticSpec};

fn main() -> ldca::Result<()> {
    let splits = generate_splits(&SyntheticSpec::desk(0))?;
    let test = splits
        .iter()
        .find(|s| s.name == "test")
        .expect("test split");
    for spec in [
        EpisodeSpec::one_shot("test", 7),
        EpisodeSpec::five_shot("test", 7),
    ] {
        for i in 0..3 {
            let ep = sample_episode(test, &spec, &mut episode_rng(spec.seed, 0, i))?;
            println!(
                "{}-shot episode {i}: classes {:?}, {} support, {} query, hash {}",
                spec.shots,
                ep.classes,
                ep.support.len(),
                ep.query.len(),
                ep.hash()
            );
        }
    }
    Ok(())
}
