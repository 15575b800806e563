//! Finite-difference checks of the primitives and of the whole pipeline on
//! the desk profile.

use ldca_tensor::suite::{primitive_checks, uniform, weighted_sum, Suite};
use ldca_tensor::{GradCheckConfig, Result as TensorResult, Tape, Tensor, TensorError, Var};

use crate::classifier::episode_logits;
use crate::embedder::Mode;
use crate::error::Result;
use crate::ldca::{augment_var, LdcaConfig};
use crate::model::{Model, ModelConfig, ModelVars};

/// Side of the images fed through the composition checks.
pub const CHECK_SIDE: usize = 16;
const PROBES: usize = 48;

fn lift(e: crate::error::LdcaError) -> TensorError {
    match e {
        crate::error::LdcaError::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

/// Which array of the pipeline a check perturbs.
#[derive(Clone, Copy, Debug)]
enum Target {
    Images,
    ConvWeight(usize),
    BnGamma(usize),
    PatchProj,
    Positions,
    AttentionQuery(usize),
    MlpIn(usize),
    ContextProj,
}

fn substitute(vars: &mut ModelVars, target: Target, x: Var) {
    let ldca = vars.ldca.as_mut();
    match (target, ldca) {
        (Target::Images, _) => {}
        (Target::ConvWeight(i), _) => vars.embedder.blocks[i].weight = x,
        (Target::BnGamma(i), _) => vars.embedder.blocks[i].gamma = x,
        (Target::PatchProj, Some(l)) => l.patch_proj = x,
        (Target::Positions, Some(l)) => l.positions = x,
        (Target::AttentionQuery(b), Some(l)) => l.blocks[b].attention.query.weight = x,
        (Target::MlpIn(b), Some(l)) => l.blocks[b].mlp_in.weight = x,
        (Target::ContextProj, Some(l)) => l.context_proj = x,
        (_, None) => {}
    }
}

fn start(model: &Model, target: Target, images: &Tensor) -> Tensor {
    let l = &model.ldca;
    match target {
        Target::Images => images.clone(),
        Target::ConvWeight(i) => model.embedder.blocks[i].weight.clone(),
        Target::BnGamma(i) => model.embedder.blocks[i].gamma.clone(),
        Target::PatchProj => l.patch_proj.clone(),
        Target::Positions => l.positions.clone(),
        Target::AttentionQuery(b) => l.blocks[b].attention.query.weight.clone(),
        Target::MlpIn(b) => l.blocks[b].mlp_in.weight.clone(),
        Target::ContextProj => l.context_proj.clone(),
    }
}

/// A desk-profile model on 16-pixel inputs. Transformer weights are drawn
/// wider than at initialization so the attention and MLP paths carry
/// gradients of comparable size to the residual path.
pub fn check_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        image_side: CHECK_SIDE,
        ldca: LdcaConfig::desk(),
        bypass: false,
    };
    let mut model = Model::init(cfg, seed)?;
    use ldca_tensor::nn::Parameters;
    for (i, (_, t)) in model.ldca.named_tensors_mut().into_iter().enumerate() {
        if t.ndim() == 2 {
            *t = uniform(t.shape(), seed ^ (i as u64 * 7919)).map(|v| v * 0.3);
        }
    }
    Ok(model)
}

/// Embedder → augmenter → classifier → cross-entropy on a 2-way 1-shot
/// episode with one query per class, batch norm in train mode.
pub fn pipeline_loss(
    model: &Model,
    tape: &mut Tape,
    vars: &ModelVars,
    images: Var,
) -> TensorResult<Var> {
    let fwd = model
        .episode_forward(tape, vars, images, 2, 1, &[0, 1], 1, None)
        .map_err(lift)?;
    Ok(fwd.loss)
}

/// Checks for every primitive, then for the embedder, the augmenter, the
/// classifier and the full composition with a model drawn from `seed`.
pub fn full_suite(seed: u64) -> Result<Suite> {
    let mut suite = primitive_checks()?;
    composition_checks(&mut suite, seed)?;
    Ok(suite)
}

pub fn composition_checks(suite: &mut Suite, seed: u64) -> Result<()> {
    let model = check_model(seed)?;
    let probed = GradCheckConfig {
        max_probes: Some(PROBES),
        ..suite.cfg.clone()
    };
    let saved = std::mem::replace(&mut suite.cfg, probed);

    // embedder alone, train-mode batch norm
    let batch = uniform(&[2, 3, CHECK_SIDE, CHECK_SIDE], 101);
    suite.check(
        "embedder/images",
        |t, x| {
            let vars = model.embedder.bind(t, false);
            let (y, _) = model
                .embedder
                .forward(t, &vars, x, Mode::Train)
                .map_err(lift)?;
            weighted_sum(t, y, 102)
        },
        &batch,
    )?;

    // augmenter alone on a 4×4 descriptor map pooled up to the 8×8 grid
    let desc = uniform(&[64, 4, 4], 103);
    let cfg = model.config.ldca;
    suite.check(
        "augment/descriptors",
        |t, x| {
            let vars = model.ldca.bind(t, false);
            let y = augment_var(t, x, Some(&vars), &cfg, false).map_err(lift)?;
            weighted_sum(t, y, 104)
        },
        &desc,
    )?;

    // classifier logits and loss
    let queries = uniform(&[2 * 6, 5], 105);
    let support = uniform(&[3 * 4, 5], 106);
    suite.check(
        "episode_logits/queries",
        |t, q| {
            let s = t.constant(support.clone());
            let logits = episode_logits(t, q, s, 3, 6, 2, None).map_err(lift)?;
            t.cross_entropy(logits, &[2, 0])
        },
        &queries,
    )?;

    let images = uniform(&[4, 3, CHECK_SIDE, CHECK_SIDE], 107);
    let targets = [
        ("pipeline/images", Target::Images),
        ("pipeline/block0.weight", Target::ConvWeight(0)),
        ("pipeline/block3.gamma", Target::BnGamma(3)),
        ("pipeline/patch_proj", Target::PatchProj),
        ("pipeline/positions", Target::Positions),
        ("pipeline/block0.attention.query", Target::AttentionQuery(0)),
        ("pipeline/block1.mlp_in", Target::MlpIn(1)),
        ("pipeline/context_proj", Target::ContextProj),
    ];
    for (name, target) in targets {
        let x0 = start(&model, target, &images);
        suite.check(
            name,
            |t, x| {
                let mut vars = model.bind(t, false, false);
                substitute(&mut vars, target, x);
                let imgs = match target {
                    Target::Images => x,
                    _ => t.constant(images.clone()),
                };
                pipeline_loss(&model, t, &vars, imgs)
            },
            &x0,
        )?;
    }
    suite.cfg = saved;
    Ok(())
}
