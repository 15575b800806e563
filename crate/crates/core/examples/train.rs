//! Trains the desk model on in-memory synthetic data.
//!
//! `cargo run --release --example train -- [episodes] [bypass]`

use ldca::dataset::Dataset;
use ldca::episode::EpisodeSpec;
use ldca::eval::{evaluate, EvalOptions};
use ldca::model::{Model, ModelConfig};
use ldca::synthetic::{generate_splits, SyntheticSpec};
use ldca::train::{train, Progress, TrainConfig};

fn main() -> ldca::Result<()> {
    let episodes: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let bypass = std::env::args().nth(2).is_some_and(|s| s == "bypass");
    let dataset =
        Dataset::from_splits("synthetic", generate_splits(&SyntheticSpec::desk(0))?, None)?;
    let config = ModelConfig {
        bypass,
        ..ModelConfig::desk()
    };
    let cfg = TrainConfig {
        episodes,
        ..TrainConfig::desk(0)
    };
    let out = train(Model::init(config, 0)?, &cfg, &dataset, |p| match p {
        Progress::Episode(r) if r.episode % 50 == 0 => {
            println!("episode {:5} loss {:.4} lr {:.1e}", r.episode, r.loss, r.lr)
        }
        Progress::Validation(v) => println!(
            "validation after {}: {:.3} ± {:.3}",
            v.episode, v.accuracy, v.ci95
        ),
        _ => {}
    })?;
    let mut opts = EvalOptions::new(EpisodeSpec::one_shot("test", 0));
    opts.episodes = 200;
    let report = evaluate(&out.model, &dataset, &opts)?;
    println!(
        "test accuracy {:.4} ± {:.4} (model after {} episodes)",
        report.mean, report.ci95, out.model_episodes
    );
    Ok(())
}
