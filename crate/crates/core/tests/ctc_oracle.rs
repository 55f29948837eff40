//! CTC loss and gradients against path enumeration and finite differences.

use ndarray::Array2;
use phonex_core::ctc::{
    cross_entropy_teacher_forced, ctc_forward, inter_ctc_loss, joint_loss, log_softmax_rows, self_condition,
    self_condition_backward, LogPosteriorGrid, LossConfig, Objective, TargetSequence, BLANK,
};
use phonex_core::decode::collapse;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_logits(rng: &mut ChaCha8Rng, frames: usize, classes: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((frames, classes), |_| rng.random_range(-scale..scale))
}

/// `-log` of the summed probability of every frame path that collapses to `target`.
fn brute_force_loss(grid: &LogPosteriorGrid, target: &[usize]) -> f64 {
    let (frames, classes) = grid.values().dim();
    let mut total = 0.0f64;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| grid.values()[[t, k]].exp())
                .product::<f64>();
        }
        let mut t = 0;
        while t < frames {
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
        if t == frames {
            break;
        }
    }
    -total.ln()
}

#[test]
fn dp_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut feasible = 0;
    for _ in 0..300 {
        let frames = rng.random_range(1..=6);
        let classes = rng.random_range(2..=5);
        let n = rng.random_range(0..=3);
        let target: Vec<usize> = (0..n).map(|_| rng.random_range(1..classes)).collect();
        let grid = LogPosteriorGrid::from_logits(&random_logits(&mut rng, frames, classes, 3.0)).unwrap();
        let dp = ctc_forward(&grid, &TargetSequence(target.clone())).unwrap().loss;
        let oracle = brute_force_loss(&grid, &target);
        if oracle.is_infinite() {
            assert_eq!(dp, f64::INFINITY, "{target:?} on {frames} frames");
        } else {
            feasible += 1;
            assert!((dp - oracle).abs() < 1e-9, "dp {dp} oracle {oracle}");
        }
    }
    assert!(feasible > 150);
}

#[test]
fn uniform_two_frame_closed_form() {
    // Two frames, classes {blank, a, b}, target [a]: paths aa, a-, -a.
    let grid = LogPosteriorGrid::new(Array2::from_elem((2, 3), (1.0f64 / 3.0).ln())).unwrap();
    let loss = ctc_forward(&grid, &TargetSequence(vec![1])).unwrap().loss;
    assert!((loss - -(3.0f64 / 9.0).ln()).abs() < 1e-12);
}

fn numeric_grad(logits: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-5;
    let mut g = Array2::zeros(logits.raw_dim());
    for idx in ndarray::indices(logits.dim()) {
        let mut p = logits.clone();
        p[idx] += h;
        let plus = f(&p);
        p[idx] -= 2.0 * h;
        g[idx] = (plus - f(&p)) / (2.0 * h);
    }
    g
}

fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{a}\nvs\n{b}");
    }
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let frames = rng.random_range(3..=7);
        let classes = rng.random_range(2..=4);
        let target = TargetSequence(
            (0..rng.random_range(1..=2))
                .map(|_| rng.random_range(1..classes))
                .collect(),
        );
        if target.min_frames() > frames {
            continue;
        }
        let logits = random_logits(&mut rng, frames, classes, 2.0);
        let loss = |l: &Array2<f64>| {
            ctc_forward(&LogPosteriorGrid::from_logits(l).unwrap(), &target)
                .unwrap()
                .loss
        };
        let analytic = ctc_forward(&LogPosteriorGrid::from_logits(&logits).unwrap(), &target)
            .unwrap()
            .grad_logits;
        assert_close(&analytic, &numeric_grad(&logits, loss), 1e-6);
    }
}

#[test]
fn self_condition_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (frames, dim, classes) = (4, 3, 4);
    let hidden = random_logits(&mut rng, frames, dim, 1.0);
    let logits = random_logits(&mut rng, frames, classes, 1.0);
    let weight = random_logits(&mut rng, dim, classes, 1.0);
    let probe = random_logits(&mut rng, frames, dim, 1.0);
    // Scalar objective: <probe, h~>.
    let objective = |h: &Array2<f64>, l: &Array2<f64>, w: &Array2<f64>| {
        (self_condition(h, &LogPosteriorGrid::from_logits(l).unwrap(), w).unwrap() * &probe).sum()
    };
    let grads = self_condition_backward(&probe, &LogPosteriorGrid::from_logits(&logits).unwrap(), &weight).unwrap();
    assert_close(
        &grads.hidden,
        &numeric_grad(&hidden, |h| objective(h, &logits, &weight)),
        1e-7,
    );
    assert_close(
        &grads.logits,
        &numeric_grad(&logits, |l| objective(&hidden, l, &weight)),
        1e-7,
    );
    assert_close(
        &grads.cond_weight,
        &numeric_grad(&weight, |w| objective(&hidden, &logits, w)),
        1e-7,
    );
}

#[test]
fn zero_weight_inter_is_vanilla_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let final_grid = LogPosteriorGrid::from_logits(&random_logits(&mut rng, 6, 4, 2.0)).unwrap();
        let layer = LogPosteriorGrid::from_logits(&random_logits(&mut rng, 6, 4, 2.0)).unwrap();
        let target = TargetSequence(vec![1, 3]);
        let config = LossConfig::with_layers(Objective::Inter, vec![2], 0.0);
        let grids = [(2usize, layer)].into_iter().collect();
        let inter = inter_ctc_loss(&grids, &final_grid, &target, &config).unwrap();
        let vanilla = ctc_forward(&final_grid, &target).unwrap();
        assert_eq!(inter.loss.to_bits(), vanilla.loss.to_bits());
        assert_eq!(inter.final_grad, vanilla.grad_logits);
        assert!(inter.layer_grads[&2].iter().all(|&g| g == 0.0));
    }
}

#[test]
fn joint_loss_endpoints_are_pure_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = LogPosteriorGrid::from_logits(&random_logits(&mut rng, 5, 3, 2.0)).unwrap();
    let ctc = ctc_forward(&grid, &TargetSequence(vec![1, 2])).unwrap();
    let ce = cross_entropy_teacher_forced(&log_softmax_rows(&random_logits(&mut rng, 3, 3, 2.0)), &[1, 2, 0]).unwrap();
    let pure_ctc = joint_loss(&ctc, &ce, 1.0).unwrap();
    assert_eq!(pure_ctc.loss.to_bits(), ctc.loss.to_bits());
    assert_eq!(pure_ctc.ctc_grad_logits, ctc.grad_logits);
    assert!(pure_ctc.ce_grad_logits.iter().all(|&g| g == 0.0));
    let pure_ce = joint_loss(&ctc, &ce, 0.0).unwrap();
    assert_eq!(pure_ce.loss.to_bits(), ce.loss.to_bits());
    assert_eq!(pure_ce.ce_grad_logits, ce.grad_logits);
    assert!(joint_loss(&ctc, &ce, 1.5).is_err());
}

fn grid_strategy() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (1usize..8, 2usize..5).prop_flat_map(|(frames, classes)| {
        (
            proptest::collection::vec(-4.0f64..4.0, frames * classes)
                .prop_map(move |v| Array2::from_shape_vec((frames, classes), v).unwrap()),
            proptest::collection::vec(1..classes, 0..4),
        )
    })
}

proptest! {
    #[test]
    fn gradient_rows_sum_to_zero((logits, target) in grid_strategy()) {
        let grid = LogPosteriorGrid::from_logits(&logits).unwrap();
        let r = ctc_forward(&grid, &TargetSequence(target)).unwrap();
        prop_assert!(r.loss >= -1e-12);
        if let Some(occ) = &r.occupancy {
            for (g, o) in r.grad_logits.rows().into_iter().zip(occ.rows()) {
                prop_assert!(g.sum().abs() < 1e-9);
                prop_assert!((o.sum() - 1.0).abs() < 1e-9);
            }
        } else {
            prop_assert!(r.grad_logits.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn blank_only_target_is_all_blank_path((logits, _) in grid_strategy()) {
        let grid = LogPosteriorGrid::from_logits(&logits).unwrap();
        let loss = ctc_forward(&grid, &TargetSequence(vec![])).unwrap().loss;
        let path: f64 = grid.values().column(BLANK).sum();
        prop_assert!((loss + path).abs() < 1e-9);
    }
}
