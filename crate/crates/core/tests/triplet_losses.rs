use matl::autodiff::{grad_check, Tape, Tensor};
use matl::triplet::{
    box_triplet_loss, class_triplet_loss, matl_loss, mine_triplets, triplet_loss, Distance,
    LossConfig, Mining,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(seed: u64, n: usize, d: usize) -> (Tensor<f64>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0));
    let y_class = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let y_box = (0..n).map(|_| rng.gen_range(0..3)).collect();
    (e, y_class, y_box)
}

fn value_and_grad(
    e: &Tensor<f64>,
    f: impl Fn(&mut Tape<f64>, matl::autodiff::Var) -> matl::Result<matl::autodiff::Var>,
) -> (f64, Tensor<f64>) {
    let mut tape = Tape::new();
    let v = tape.param(e.clone());
    let out = f(&mut tape, v).unwrap();
    let g = tape.backward(out).unwrap();
    (tape.value(out).item(), g.get(v))
}

fn configs() -> Vec<LossConfig> {
    let mut out = Vec::new();
    for distance in [Distance::SquaredEuclidean, Distance::Euclidean] {
        for mining in [Mining::BatchAll, Mining::BatchHard] {
            for normalize_embeddings in [false, true] {
                out.push(LossConfig {
                    margin: 0.7,
                    lambda: 0.25,
                    distance,
                    mining,
                    normalize_embeddings,
                });
            }
        }
    }
    out
}

#[test]
fn matl_reduces_to_components_at_lambda_endpoints() {
    for seed in 0..10 {
        let (e, yc, yb) = batch(seed, 9, 4);
        for cfg in configs() {
            let (cl, cg) = value_and_grad(&e, |t, v| class_triplet_loss(t, v, &yc, &cfg));
            let (bl, bg) = value_and_grad(&e, |t, v| box_triplet_loss(t, v, &yb, &cfg));
            let at0 = cfg.with_lambda(0.0);
            let (m0, g0) = value_and_grad(&e, |t, v| matl_loss(t, v, &yc, &yb, &at0));
            let at1 = cfg.with_lambda(1.0);
            let (m1, g1) = value_and_grad(&e, |t, v| matl_loss(t, v, &yc, &yb, &at1));
            assert!((m0 - cl).abs() <= 1e-12 && (m1 - bl).abs() <= 1e-12);
            for (a, b) in g0.data().iter().zip(cg.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in g1.data().iter().zip(bg.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn matl_is_linear_in_lambda() {
    for seed in 0..10 {
        let (e, yc, yb) = batch(seed + 100, 10, 3);
        let cfg = LossConfig::default();
        let at = |lambda: f64| {
            value_and_grad(&e, |t, v| matl_loss(t, v, &yc, &yb, &cfg.with_lambda(lambda))).0
        };
        let (v0, v1) = (at(0.0), at(1.0));
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            assert!((at(lambda) - ((1.0 - lambda) * v0 + lambda * v1)).abs() < 1e-12);
        }
    }
}

#[test]
fn all_losses_pass_gradient_checks() {
    for seed in 0..10 {
        let (e, yc, yb) = batch(seed + 200, 8, 3);
        for cfg in configs() {
            let class = grad_check(|t, v| class_triplet_loss(t, v, &yc, &cfg), &e, 1e-6).unwrap();
            let boxes = grad_check(|t, v| box_triplet_loss(t, v, &yb, &cfg), &e, 1e-6).unwrap();
            let matl = grad_check(|t, v| matl_loss(t, v, &yc, &yb, &cfg), &e, 1e-6).unwrap();
            let set = mine_triplets(&yc, Mining::BatchAll, None).unwrap();
            let base = grad_check(|t, v| triplet_loss(t, v, &set, &cfg), &e, 1e-6).unwrap();
            for (name, err) in [("class", class), ("box", boxes), ("matl", matl), ("base", base)] {
                assert!(err < 1e-6, "{name} {cfg:?} seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn single_class_batch_has_zero_loss() {
    let (e, _, _) = batch(1, 5, 2);
    let (l, g) = value_and_grad(&e, |t, v| class_triplet_loss(t, v, &[2; 5], &LossConfig::default()));
    assert_eq!(l, 0.0);
    assert!(g.data().iter().all(|&x| x == 0.0));
}

#[test]
fn class_loss_equals_hand_mined_triplets() {
    let e = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.5, 0.2, -0.3]).unwrap();
    let cfg = LossConfig::default();
    let (auto, _) = value_and_grad(&e, |t, v| class_triplet_loss(t, v, &[0, 0, 1], &cfg));
    // d(0,1) = 1.25, d(0,2) = 0.13, d(1,2) = 1.28
    let hand = ((1.25 - 0.13 + 1.0f64).max(0.0) + (1.25 - 1.28 + 1.0f64).max(0.0)) / 2.0;
    assert!((auto - hand).abs() < 1e-12, "{auto} vs {hand}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_alpha_on_collapse(
        n in 3usize..10,
        seed in any::<u64>(),
        margin in 0.0f64..3.0,
    ) {
        let (e, yc, _) = batch(seed, n, 3);
        let cfg = LossConfig { margin, ..LossConfig::default() };
        let (l, _) = value_and_grad(&e, |t, v| class_triplet_loss(t, v, &yc, &cfg));
        prop_assert!(l >= 0.0);

        let collapsed = Tensor::full(&[n, 3], 0.4);
        let (c, _) = value_and_grad(&collapsed, |t, v| class_triplet_loss(t, v, &yc, &cfg));
        let has_triplets = !mine_triplets(&yc, Mining::BatchAll, None).unwrap().is_empty();
        prop_assert_eq!(c, if has_triplets { margin } else { 0.0 });
    }

    #[test]
    fn batch_all_loss_is_permutation_invariant(n in 3usize..10, seed in any::<u64>()) {
        let (e, yc, yb) = batch(seed, n, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pe = Tensor::new(vec![n, 3], perm.iter().flat_map(|&i| e.row(i).to_vec()).collect()).unwrap();
        let pc: Vec<usize> = perm.iter().map(|&i| yc[i]).collect();
        let pb: Vec<usize> = perm.iter().map(|&i| yb[i]).collect();
        let cfg = LossConfig::default();
        let (a, _) = value_and_grad(&e, |t, v| matl_loss(t, v, &yc, &yb, &cfg));
        let (b, _) = value_and_grad(&pe, |t, v| matl_loss(t, v, &pc, &pb, &cfg));
        prop_assert!((a - b).abs() < 1e-12);
    }
}
