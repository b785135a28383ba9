use std::collections::BTreeMap;

use matl::autodiff::{grad_check, Tape, Tensor, Var};
use matl::nn::{
    load_checkpoint, param_count, save_checkpoint, Adam, AdamConfig, BnMode, ModelConfig,
    ModelMode, ModelParams,
};
use matl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, cfg.input_channels, cfg.input_size, cfg.input_size], |_| rng.gen())
}

fn tiny() -> ModelConfig {
    ModelConfig {
        input_size: 8,
        input_channels: 2,
        encoder_filters: vec![2, 3],
        embedding_dim: 4,
        classifier_hidden: vec![3, 4, 3, 3],
        num_classes: 3,
        decoder_filters: vec![3, 2],
        seed: 5,
    }
}

#[test]
fn multi_task_output_shapes_and_ranges() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f32>::init(&cfg, ModelMode::MultiTask).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images(4, &cfg, 0));
    let out = params.forward(&mut tape, &bound, ModelMode::MultiTask, x, BnMode::Train).unwrap();
    assert_eq!(tape.value(out.embedding).shape(), [4, 32]);
    let probs = tape.value(out.class_probs.unwrap());
    assert_eq!(probs.shape(), [4, 3]);
    for r in 0..4 {
        assert!((probs.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    let mask = tape.value(out.mask_probs.unwrap());
    assert_eq!(mask.shape(), [4, 64, 64]);
    assert!(mask.data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(tape.value(out.mask_logits.unwrap()).shape(), [4, 64, 64]);
}

#[test]
fn single_task_modes_produce_one_head() {
    let cfg = tiny();
    for (mode, class, mask) in [
        (ModelMode::SingleTaskClassify, true, false),
        (ModelMode::SingleTaskMask, false, true),
    ] {
        let params = ModelParams::<f32>::init(&cfg, mode).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(images(3, &cfg, 1));
        let out = params.forward(&mut tape, &bound, mode, x, BnMode::Train).unwrap();
        assert_eq!(out.class_probs.is_some(), class);
        assert_eq!(out.mask_probs.is_some(), mask);
    }
}

#[test]
fn mode_mismatch_is_a_usage_error() {
    let cfg = tiny();
    let params = ModelParams::<f32>::init(&cfg, ModelMode::SingleTaskClassify).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(images(2, &cfg, 1));
    let r = params.forward(&mut tape, &bound, ModelMode::MultiTask, x, BnMode::Train);
    assert!(matches!(r, Err(Error::Usage(_))));
    assert!(matches!(params.decode(&mut tape, &bound, x, BnMode::Eval), Err(Error::Usage(_))));
}

#[test]
fn same_seed_gives_identical_embeddings() {
    let cfg = ModelConfig::default();
    let run = || {
        let params = ModelParams::<f32>::init(&cfg, ModelMode::MultiTask).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(images(3, &cfg, 2));
        let e = params.embed(&mut tape, &bound, x, BnMode::Train).unwrap();
        tape.value(e).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn shared_parts_initialize_identically_across_modes() {
    let cfg = tiny();
    let mt = ModelParams::<f32>::init(&cfg, ModelMode::MultiTask).unwrap();
    for mode in [ModelMode::SingleTaskClassify, ModelMode::SingleTaskMask] {
        let st = ModelParams::<f32>::init(&cfg, mode).unwrap();
        for (name, t) in &st.tensors {
            assert_eq!(Some(t), mt.tensors.get(name), "{name}");
        }
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig::default();
    // encoder: convs + BN, then 64·4·4 → 32 dense
    let enc = (3 * 8 + 8 * 16 + 16 * 32 + 32 * 64) * 9 + 2 * (8 + 16 + 32 + 64) + 1024 * 32 + 32;
    // classifier: bias-free hidden layers with BN, then 32 → 3
    let cls = 32 * 64 + 64 * 64 + 64 * 32 + 32 * 32 + 2 * (64 + 64 + 32 + 32) + 32 * 3 + 3;
    // decoder: 32 → 64·4·4 dense, four blocks, three skip projections, output conv
    let dec = 32 * 1024 + 1024
        + (64 * 64 + 64 * 32 + 32 * 16 + 16 * 8) * 4
        + 2 * (64 + 32 + 16 + 8)
        + (64 * 32 + 32 * 16 + 16 * 8)
        + 8 * 9
        + 1;
    assert_eq!(param_count(&cfg, ModelMode::SingleTaskClassify).unwrap(), enc + cls);
    assert_eq!(param_count(&cfg, ModelMode::SingleTaskMask).unwrap(), enc + dec);
    assert_eq!(param_count(&cfg, ModelMode::MultiTask).unwrap(), enc + cls + dec);
    let p = ModelParams::<f32>::init(&cfg, ModelMode::MultiTask).unwrap();
    assert_eq!(p.param_count(), enc + cls + dec);
    assert!(p.tensors.values().all(|t| t.all_finite()));
}

#[test]
fn multi_task_runs_the_encoder_once() {
    let cfg = ModelConfig::default();
    let counts = |mode: ModelMode| {
        let params = ModelParams::<f32>::init(&cfg, mode).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(images(2, &cfg, 3));
        params.forward(&mut tape, &bound, mode, x, BnMode::Train).unwrap();
        tape.op_counts()
    };
    let cls = counts(ModelMode::SingleTaskClassify);
    let mask = counts(ModelMode::SingleTaskMask);
    let mt = counts(ModelMode::MultiTask);
    let encoder_convs = cfg.encoder_filters.len();
    assert_eq!(cls["conv2d"], encoder_convs);
    assert_eq!(mt["conv2d"], mask["conv2d"]);
    for op in ["conv2d", "batch_norm", "matmul", "relu"] {
        let shared = cls[op] + mask[op] - mt[op];
        let expected = match op {
            "conv2d" | "batch_norm" | "relu" => encoder_convs,
            _ => 1,
        };
        assert_eq!(shared, expected, "{op}");
    }
}

#[test]
fn classifier_parameters_do_not_touch_the_mask() {
    let cfg = tiny();
    let base = ModelParams::<f32>::init(&cfg, ModelMode::MultiTask).unwrap();
    let mut perturbed = base.clone();
    for (name, t) in perturbed.tensors.iter_mut() {
        if name.starts_with("classifier.") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
    }
    let run = |p: &ModelParams<f32>| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let x = tape.constant(images(3, &cfg, 4));
        let out = p.forward(&mut tape, &bound, ModelMode::MultiTask, x, BnMode::Train).unwrap();
        (tape.value(out.mask_probs.unwrap()).clone(), tape.value(out.class_probs.unwrap()).clone())
    };
    let (m0, c0) = run(&base);
    let (m1, c1) = run(&perturbed);
    assert_eq!(m0, m1);
    assert_ne!(c0, c1);
}

#[test]
fn zero_embedding_gives_a_constant_mask() {
    let cfg = tiny();
    let params = ModelParams::<f32>::init(&cfg, ModelMode::SingleTaskMask).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let z = tape.constant(Tensor::zeros(&[2, cfg.embedding_dim]));
    let logits = params.decode(&mut tape, &bound, z, BnMode::Eval).unwrap();
    let v = tape.value(logits);
    assert_eq!(v.shape(), [2, 8, 8]);
    assert!(v.data().iter().all(|&x| x == v.data()[0] && x.is_finite()));
}

/// Scalar probe `Σ w ⊙ f(x)` with fixed random weights.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> matl::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tape.value(out).shape(), |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

#[test]
fn heads_and_encoder_pass_gradient_checks() {
    let cfg = tiny();
    for seed in 0..3u64 {
        let params = ModelParams::<f64>::init(&ModelConfig { seed, ..cfg.clone() }, ModelMode::MultiTask).unwrap();
        let x: Tensor<f64> = images(3, &cfg, seed + 10).cast();
        let enc = grad_check(
            |t, v| {
                let b = params.bind(t, true);
                let e = params.embed(t, &b, v, BnMode::Train)?;
                probe(t, e, seed)
            },
            &x,
            1e-6,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Tensor::from_fn(&[3, cfg.embedding_dim], |_| rng.gen_range(-1.0..1.0));
        let dec = grad_check(
            |t, v| {
                let b = params.bind(t, true);
                let m = params.decode(t, &b, v, BnMode::Train)?;
                probe(t, m, seed)
            },
            &emb,
            1e-6,
        )
        .unwrap();
        let cls = grad_check(
            |t, v| {
                let b = params.bind(t, true);
                let logits = params.classify(t, &b, v, BnMode::Train)?;
                let probs = t.softmax(logits)?;
                probe(t, probs, seed)
            },
            &emb,
            1e-6,
        )
        .unwrap();
        for (name, err) in [("encoder", enc), ("decoder", dec), ("classifier", cls)] {
            assert!(err < 1e-5, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn parameter_gradients_pass_checks() {
    let cfg = tiny();
    let params = ModelParams::<f64>::init(&cfg, ModelMode::MultiTask).unwrap();
    let x: Tensor<f64> = images(3, &cfg, 7).cast();
    for name in [
        "encoder.conv1.weight",
        "encoder.bn0.gamma",
        "encoder.fc.bias",
        "decoder.fc.weight",
        "decoder.block0.convt.weight",
        "decoder.block1.skip.weight",
        "decoder.out.weight",
        "classifier.fc2.weight",
        "classifier.bn3.beta",
        "classifier.out.weight",
    ] {
        let err = grad_check(
            |t, w| {
                let mut b = params.bind(t, false);
                b.replace(name, w)?;
                let xi = t.constant(x.clone());
                let out = params.forward(t, &b, ModelMode::MultiTask, xi, BnMode::Train)?;
                let l1 = probe(t, out.mask_probs.unwrap(), 1)?;
                let l2 = probe(t, out.class_probs.unwrap(), 2)?;
                t.add(l1, l2)
            },
            &params.tensors[name],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut params = ModelParams::<f64>::init(&tiny(), ModelMode::SingleTaskClassify).unwrap();
    params.tensors = BTreeMap::from([("w".to_string(), Tensor::scalar(2.0))]);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    });
    let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
    adam.step(&mut params, &grads).unwrap();
    let w = params.tensors["w"].item();
    assert!((w - 1.9).abs() < 1e-6, "{w}");

    let before = params.clone();
    adam.step(&mut params, &BTreeMap::from([("w".to_string(), Tensor::scalar(f64::NAN))]))
        .map(|_| panic!("non-finite gradient accepted"))
        .unwrap_or_else(|e| assert!(matches!(e, Error::NonFiniteGradient(ref n) if n == "w")));
    assert_eq!(params, before);
}

#[test]
fn adam_zero_gradient_leaves_parameters_and_runs_repeat() {
    let cfg = tiny();
    let start = ModelParams::<f32>::init(&cfg, ModelMode::MultiTask).unwrap();
    let zeros: BTreeMap<String, Tensor<f32>> = start
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
        .collect();
    let mut p = start.clone();
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut p, &zeros).unwrap();
    assert_eq!(p, start);
    assert_eq!(adam.steps(), 1);

    let trajectory = || {
        let mut p = start.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for step in 0..3 {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, true);
            let x = tape.constant(images(4, &cfg, step));
            let out = p.forward(&mut tape, &bound, ModelMode::MultiTask, x, BnMode::Train).unwrap();
            let loss = tape.softmax_cross_entropy(out.class_logits.unwrap(), &[0, 1, 2, 0]).unwrap();
            let g = tape.backward(loss).unwrap();
            adam.step(&mut p, &bound.gradients(&g)).unwrap();
            p.update_running_stats(&out.batch_stats);
        }
        p
    };
    let a = trajectory();
    assert_eq!(a, trajectory());
    assert_ne!(a, start);
}

#[test]
fn running_statistics_follow_the_momentum_rule() {
    let cfg = tiny();
    let mut p = ModelParams::<f64>::init(&cfg, ModelMode::SingleTaskClassify).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let x = tape.constant(images(4, &cfg, 8).cast());
    let out = p.forward(&mut tape, &bound, ModelMode::SingleTaskClassify, x, BnMode::Train).unwrap();
    let (name, stats) = out.batch_stats[0].clone();
    assert_eq!(name, "encoder.bn0");
    p.update_running_stats(&out.batch_stats);
    let r = &p.running["encoder.bn0"];
    let n = stats.count as f64;
    for c in 0..stats.mean.len() {
        assert!((r.mean[c] - 0.1 * stats.mean[c]).abs() < 1e-15);
        assert!((r.var[c] - (0.9 + 0.1 * stats.var[c] * n / (n - 1.0))).abs() < 1e-12);
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut p = ModelParams::<f32>::init(&ModelConfig::default(), ModelMode::MultiTask).unwrap();
    p.running.get_mut("encoder.bn1").unwrap().mean[3] = 0.123_456_79;
    save_checkpoint(&p, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), p);

    let mut broken = p.clone();
    broken.tensors.remove("decoder.out.bias");
    save_checkpoint(&broken, &path).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Config(_))));

    let mut resized = p.clone();
    resized.config.embedding_dim = 16;
    save_checkpoint(&resized, &path).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Config(_))));
}
