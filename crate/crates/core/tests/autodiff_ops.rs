use matl::autodiff::{grad_check, grad_check_many, ConvSpec, Scalar, Tape, Tensor, Var};
use matl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn identity_kernel_conv() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(x, k, ConvSpec::new(1, 1, 0)).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
}

#[test]
fn sliding_window_conv() {
    // Hand-evaluated: each output is the sum of a 2x2 window.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv2d(x, k, ConvSpec::new(1, 1, 0)).unwrap();
    assert_eq!(tape.value(y).data(), &[12., 16., 24., 28.]);
}

#[test]
fn dilated_conv_output_size() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv2d(x, k, ConvSpec::new(1, 2, 0)).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
}

#[test]
fn conv_rejects_oversized_kernel_and_zero_stride() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    assert!(tape.conv2d(x, k, ConvSpec::new(1, 2, 0)).is_err());
    assert!(tape.conv2d(x, k, ConvSpec::new(0, 1, 0)).is_err());
    assert!(tape.conv2d(x, k, ConvSpec::new(1, 2, 1)).is_ok());
}

#[test]
fn transposed_conv_size_and_zero_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.7));
    let y = tape.conv2d_transpose(x, k, 2, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // (input side, kernel, stride, padding) with (H + 2p - k) divisible by stride
    let cases = [(6, 3, 1, 1), (8, 2, 2, 0), (7, 3, 2, 1), (9, 5, 2, 2), (5, 1, 1, 0)];
    for (side, k, stride, padding) in cases {
        let x = random(&mut rng, &[2, 3, side, side]);
        let w = random(&mut rng, &[4, 3, k, k]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let cx = tape.conv2d(xv, wv, ConvSpec::new(stride, 1, padding)).unwrap();
        let y = random(&mut rng, tape.value(cx).shape());
        let yv = tape.constant(y.clone());
        let ty = tape.conv2d_transpose(yv, wv, stride, padding).unwrap();
        assert_eq!(tape.value(ty).shape(), x.shape());
        let lhs = tape.value(cx).dot(&y);
        let rhs = x.dot(tape.value(ty));
        assert!(
            (lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0),
            "adjoint failed for {side}/{k}/{stride}/{padding}: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = tape.softmax(x).unwrap();
    for &p in tape.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((tape.value(s).sum() - 1.0).abs() < 1e-12);

    let r = tape.constant(t(&[2], &[-2.0, 3.0]));
    let r = tape.relu(r);
    assert_eq!(tape.value(r).data(), &[0.0, 3.0]);

    let p = tape.constant(t(&[1], &[0.5]));
    let bce = tape.binary_cross_entropy(p, &t(&[1], &[1.0])).unwrap();
    assert!((tape.value(bce).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_empty_axis_and_bad_labels() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(t(&[2, 3], &[0.2, 0.3, 0.5, 0.1, 0.1, 0.8]));
    assert!(tape.cross_entropy(p, &[0]).is_err());
    assert!(tape.cross_entropy(p, &[0, 3]).is_err());
    let ce = tape.cross_entropy(p, &[2, 2]).unwrap();
    let expected = -(0.5f64.ln() + 0.8f64.ln()) / 2.0;
    assert!((tape.value(ce).item() - expected).abs() < 1e-12);
}

#[test]
fn softmax_rows_are_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[16, 5], |_| rng.gen_range(-30.0..30.0)));
    let s = tape.softmax(x).unwrap();
    for r in 0..16 {
        let row = tape.value(s).row(r);
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn scalar_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).item(), 6.0);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.param(Tensor::scalar(5.0));
    let z = tape.mul(x, y).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!((g.get(x).item(), g.get(y).item()), (5.0, 2.0));
}

#[test]
fn untouched_params_get_zero_gradient_and_non_scalar_output_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn composite_conv_relu_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x64 = random(&mut rng, &[2, 2, 6, 6]);
    let w64 = random(&mut rng, &[3, 2, 3, 3]);
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let y = tape.conv2d(v[0], v[1], ConvSpec::new(1, 2, 2))?;
        let y = tape.relu(y);
        Ok(tape.sum(y))
    };
    let err = grad_check_many(f, &[x64.clone(), w64.clone()], 1e-4).unwrap();
    assert!(err < 1e-6, "64-bit error {err}");

    // 32-bit analytic gradient against a 64-bit central difference.
    let mut tape = Tape::<f32>::new();
    let x = tape.param(x64.cast());
    let w = tape.param(w64.cast());
    let y = tape.conv2d(x, w, ConvSpec::new(1, 2, 2)).unwrap();
    let y = tape.relu(y);
    let s = tape.sum(y);
    let grads = tape.backward(s).unwrap();
    let gw = grads.get(w);
    let eval = |w: &Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(x64.clone());
        let w = tape.constant(w.clone());
        let y = tape.conv2d(x, w, ConvSpec::new(1, 2, 2)).unwrap();
        let y = tape.relu(y);
        let s = tape.sum(y);
        tape.value(s).item()
    };
    for j in 0..w64.len() {
        let mut plus = w64.clone();
        plus.data_mut()[j] += 1e-4;
        let mut minus = w64.clone();
        minus.data_mut()[j] -= 1e-4;
        let numeric = (eval(&plus) - eval(&minus)) / 2e-4;
        let analytic = gw.data()[j] as f64;
        assert!((analytic - numeric).abs() / analytic.abs().max(1.0) < 1e-3);
    }
}

#[test]
fn grad_check_is_exact_on_linear_functions() {
    let point = t(&[4], &[0.3, -1.2, 2.5, 0.0]);
    let err = grad_check(
        |tape, x| {
            let y = tape.scale(x, 3.5);
            let y = tape.add_scalar(y, 2.0);
            Ok(tape.sum(y))
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_flags_a_corrupted_backward_rule() {
    let point = t(&[3], &[0.5, -0.25, 1.5]);
    let err = grad_check(
        |tape, x| {
            // value x², backward claims 3x instead of 2x
            let value = tape.value(x).map(|v| v * v);
            let sq = tape.custom(
                "bad_square",
                &[x],
                value,
                Box::new(|inputs, dy| vec![inputs[0].zip_map(dy, |v, g| 3.0 * v * g)]),
            );
            Ok(tape.sum(sq))
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    let point = t(&[2], &[1.0, 5e-5]);
    let err = grad_check(
        |tape, x| {
            let v = tape.value(x).clone();
            let value = Tensor::scalar(v.data()[0] + (v.data()[1]).ln());
            Ok(tape.custom(
                "log_second",
                &[x],
                value,
                Box::new(|inputs, _| vec![Tensor::zeros(inputs[0].shape())]),
            ))
        },
        &point,
        1e-4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteEvaluation { coordinate: 1, .. }), "{err}");
}

#[test]
fn batch_norm_inference_is_batch_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = random(&mut rng, &[4, 3, 2, 2]);
    let mean = [0.1, -0.2, 0.3];
    let var = [1.5, 0.5, 2.0];
    let run = |x: Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g = tape.constant(t(&[3], &[1.0, 2.0, 0.5]));
        let b = tape.constant(t(&[3], &[0.0, 0.1, -0.1]));
        let y = tape.batch_norm_eval(xv, g, b, &mean, &var, 1e-5).unwrap();
        tape.value(y).clone()
    };
    let full = run(batch.clone());
    let first = run(Tensor::new(vec![1, 3, 2, 2], batch.data()[..12].to_vec()).unwrap());
    assert_eq!(&full.data()[..12], first.data());
    assert_eq!(run(batch.clone()), full);
}

#[test]
fn batch_norm_train_normalizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[8, 2], |i| rng.gen_range(-3.0..3.0) + i as f64));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    assert_eq!(stats.count, 8);
    for ch in 0..2 {
        let vals: Vec<f64> = (0..8).map(|r| tape.value(y).row(r)[ch]).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

/// Every registered op, 64-bit, several random instances each.
mod gradients {
    use super::*;

    fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> matl::Result<Var>) {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + name.len() as u64);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let err = grad_check_many(&f, &inputs, 1e-5).unwrap();
            assert!(err < 1e-6, "{name} seed {seed}: {err}");
        }
    }

    /// Weighted sum so every output coordinate gets a distinct upstream gradient.
    fn project(tape: &mut Tape<f64>, y: Var) -> matl::Result<Var> {
        let shape = tape.value(y).shape().to_vec();
        let w = tape.constant(Tensor::from_fn(&shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4));
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn add_sub_mul() {
        check("add", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        });
        check("sub", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        });
        check("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y)
        });
    }

    #[test]
    fn scale_bias_matmul() {
        check("scale", &[&[5]], |t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.add_scalar(y, 0.3);
            project(t, y)
        });
        check("bias_add", &[&[2, 3, 2, 2], &[3]], |t, v| {
            let y = t.bias_add(v[0], v[1])?;
            project(t, y)
        });
        check("matmul", &[&[3, 4], &[4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        });
    }

    #[test]
    fn activations() {
        check("relu", &[&[4, 5]], |t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        });
        check("sigmoid", &[&[4, 5]], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        });
        check("softmax", &[&[4, 5]], |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y)
        });
        check("square_sqrt", &[&[6]], |t, v| {
            let y = t.square(v[0]);
            let y = t.add_scalar(y, 0.5);
            let y = t.sqrt(y, 1e-12);
            project(t, y)
        });
    }

    #[test]
    fn reductions_and_indexing() {
        check("mean", &[&[3, 3]], |t, v| {
            let y = t.square(v[0]);
            Ok(t.mean(y))
        });
        check("sum_last_axis", &[&[3, 4]], |t, v| {
            let y = t.sum_last_axis(v[0])?;
            project(t, y)
        });
        check("reshape", &[&[2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            project(t, y)
        });
        check("gather_rows", &[&[4, 3]], |t, v| {
            let y = t.gather_rows(v[0], &[0, 2, 2, 3, 0])?;
            project(t, y)
        });
        check("l2_normalize_rows", &[&[4, 3]], |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            project(t, y)
        });
        check("upsample_nearest", &[&[1, 2, 3, 3]], |t, v| {
            let y = t.upsample_nearest(v[0], 2)?;
            project(t, y)
        });
    }

    #[test]
    fn convolutions() {
        check("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], ConvSpec::new(2, 1, 1))?;
            project(t, y)
        });
        check("conv2d_dilated", &[&[1, 2, 7, 6], &[2, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], ConvSpec::new(1, 2, 2))?;
            project(t, y)
        });
        check("conv2d_transpose", &[&[2, 3, 3, 3], &[3, 2, 2, 2]], |t, v| {
            let y = t.conv2d_transpose(v[0], v[1], 2, 0)?;
            project(t, y)
        });
        check("conv2d_transpose_padded", &[&[1, 2, 4, 4], &[2, 2, 3, 3]], |t, v| {
            let y = t.conv2d_transpose(v[0], v[1], 2, 1)?;
            project(t, y)
        });
    }

    #[test]
    fn batch_norm() {
        check("batch_norm_train_4d", &[&[3, 2, 2, 2], &[2], &[2]], |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        });
        check("batch_norm_train_2d", &[&[5, 3], &[3], &[3]], |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        });
        check("batch_norm_eval", &[&[4, 3], &[3], &[3]], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, 0.2, -0.3], &[1.0, 0.5, 2.0], 1e-5)?;
            project(t, y)
        });
    }

    #[test]
    fn losses() {
        let target = Tensor::from_fn(&[2, 5], |i| (i % 3 == 0) as u8 as f64);
        let tb = target.clone();
        check("binary_cross_entropy", &[&[2, 5]], move |t, v| {
            let p = t.sigmoid(v[0]);
            t.binary_cross_entropy(p, &tb)
        });
        check("bce_with_logits", &[&[2, 5]], move |t, v| t.bce_with_logits(v[0], &target));
        check("cross_entropy", &[&[4, 3]], |t, v| {
            let p = t.softmax(v[0])?;
            t.cross_entropy(p, &[0, 2, 1, 2])
        });
        check("softmax_cross_entropy", &[&[4, 3]], |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
        });
    }
}

#[test]
fn bce_with_logits_equals_bce_of_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&mut rng, &[3, 4]);
    let target = Tensor::from_fn(&[3, 4], |i| (i % 2) as f64);
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(logits);
    let a = tape.bce_with_logits(z, &target).unwrap();
    let p = tape.sigmoid(z);
    let b = tape.binary_cross_entropy(p, &target).unwrap();
    assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
}

#[test]
fn op_counts_track_recorded_nodes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::full(&[2, 2], 1.0));
    let y = tape.relu(x);
    let _ = tape.relu(y);
    assert_eq!(tape.op_count("relu"), 2);
    assert_eq!(tape.op_counts()["leaf"], 1);
    assert!(<f32 as Scalar>::as_f64(tape.value(y).sum()) == 4.0);
}
