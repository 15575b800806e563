use ldca::embedder::{embed_image, init_embedder, stack_images, Mode};
use ldca::LdcaError;
use ldca_tensor::suite::{uniform, weighted_sum};
use ldca_tensor::{grad_check, GradCheckConfig, Tape, Tensor, TensorError};

fn lift(e: LdcaError) -> TensorError {
    TensorError::Usage(e.to_string())
}

#[test]
fn descriptor_grid_is_a_quarter_of_the_side() {
    let params = init_embedder(0);
    for side in [8, 32, 84] {
        let map = embed_image(&Tensor::full(&[3, side, side], 0.1), &params, Mode::Eval).unwrap();
        assert_eq!(map.tensor().shape(), &[64, side / 4, side / 4]);
        assert_eq!(map.count(), (side / 4) * (side / 4));
    }
}

#[test]
fn eval_mode_does_not_depend_on_the_batch() {
    let params = init_embedder(1);
    let a = uniform(&[3, 16, 16], 1);
    let b = uniform(&[3, 16, 16], 2);
    let alone = embed_image(&a, &params, Mode::Eval).unwrap();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(stack_images(&[&b, &a]).unwrap());
    let (y, stats) = params.forward(&mut tape, &vars, x, Mode::Eval).unwrap();
    assert!(stats.is_empty());
    let second = &tape.value(y).data()[64 * 16..];
    assert_eq!(second, alone.tensor().data());
}

#[test]
fn train_mode_returns_one_stat_set_per_block() {
    let mut params = init_embedder(2);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let x = tape.constant(uniform(&[3, 3, 8, 8], 3));
    let (_, stats) = params.forward(&mut tape, &vars, x, Mode::Train).unwrap();
    assert_eq!(stats.len(), 4);
    let before = params.blocks[0].running.mean.clone();
    params.update_running_stats(&stats).unwrap();
    assert_ne!(params.blocks[0].running.mean, before);
    assert!(params.update_running_stats(&stats[..2]).is_err());
}

#[test]
fn rejects_bad_image_shapes() {
    let params = init_embedder(0);
    assert!(embed_image(&Tensor::zeros(&[1, 8, 8]), &params, Mode::Eval).is_err());
    assert!(embed_image(&Tensor::zeros(&[3, 10, 10]), &params, Mode::Eval).is_err());
    assert!(embed_image(&Tensor::zeros(&[3, 8]), &params, Mode::Eval).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let params = init_embedder(4);
    let images = uniform(&[2, 3, 8, 8], 5);
    let cfg = GradCheckConfig {
        max_probes: Some(40),
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        |t, x| {
            let vars = params.bind(t, false);
            let (y, _) = params.forward(t, &vars, x, Mode::Train).map_err(lift)?;
            weighted_sum(t, y, 6)
        },
        &images,
        &cfg,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    let report = grad_check(
        |t, w| {
            let mut vars = params.bind(t, false);
            vars.blocks[2].weight = w;
            let x = t.constant(images.clone());
            let (y, _) = params.forward(t, &vars, x, Mode::Eval).map_err(lift)?;
            weighted_sum(t, y, 7)
        },
        &params.blocks[2].weight,
        &cfg,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
