//! Evaluates an untrained desk model and sweeps k on the same episodes.

use ldca::dataset::Dataset;
use ldca::episode::EpisodeSpec;
use ldca::eval::{evaluate, spread, sweep_k, EvalOptions};
use ldca::model::{Model, ModelConfig};
use ldca::synthetic::{generate_splits, SyntheticSpec};

fn main() -> ldca::Result<()> {
    let dataset =
        Dataset::from_splits("synthetic", generate_splits(&SyntheticSpec::desk(0))?, None)?;
    let model = Model::init(ModelConfig::desk(), 0)?;
    let mut opts = EvalOptions::new(EpisodeSpec::one_shot("test", 1));
    opts.episodes = 100;
    let report = evaluate(&model, &dataset, &opts)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report.summary()).expect("serializable")
    );
    for bypass in [false, true] {
        let rows = sweep_k(
            &model,
            &dataset,
            &EvalOptions {
                bypass,
                ..opts.clone()
            },
            &[1, 3, 5, 7],
        )?;
        for r in &rows {
            println!(
                "bypass={bypass} k={} accuracy {:.4} ± {:.4}",
                r.k, r.mean, r.ci95
            );
        }
        println!("bypass={bypass} spread {:.4}", spread(&rows));
    }
    Ok(())
}
