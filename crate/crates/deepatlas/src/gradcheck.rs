//! Central finite-difference oracle for verifying analytic gradients.
//!
//! The oracle only ever evaluates the forward path, so it stays independent
//! of the adjoints it checks. `run_suite` exercises every primitive op and
//! loss and backs the `gradcheck` CLI subcommand.

/// Central finite differences of a scalar-valued function at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut pert = x.to_vec();
    for i in 0..x.len() {
        pert[i] = x[i] + h;
        let fp = f(&pert);
        pert[i] = x[i] - h;
        let fm = f(&pert);
        pert[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central finite differences at selected coordinates only; returns
/// (index, derivative) pairs. Useful when the full gradient is too large.
pub fn finite_diff_grad_sampled(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    indices: &[usize],
) -> Vec<(usize, f64)> {
    let mut pert = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            pert[i] = x[i] + h;
            let fp = f(&pert);
            pert[i] = x[i] - h;
            let fm = f(&pert);
            pert[i] = x[i];
            (i, (fp - fm) / (2.0 * h))
        })
        .collect()
}

/// Worst elementwise relative error between analytic and numeric gradients.
/// Magnitudes below the floor are compared absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::imageops::{warp, DisplacementField, Interp};
use crate::losses::{
    bending_energy, ncc_loss, one_hot, registration_objective, segmentation_objective,
    soft_dice_loss, DiceVariant, LossWeights, PairLabeling, SegmentationPair,
};
use crate::tensor::{Reduce, Tensor};

/// Outcome of one named check: the worst relative error over its instances.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub worst_rel_err: f64,
    pub pass: bool,
}

const INSTANCES: usize = 5;

/// Evaluate a scalar graph at `x`; with `want_grad` also return ∂/∂x by
/// reverse mode. `graph` rebuilds the computation from raw data each call so
/// the finite-difference path never touches the adjoints it verifies.
fn run_check<F>(
    name: &'static str,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> (Vec<f64>, F),
) -> CheckResult
where
    F: Fn(&[f64], bool) -> (f64, Option<Vec<f64>>),
{
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ 0x5851_f42d_4c95_7f2d_u64.wrapping_mul(i as u64 + 1),
        );
        let (x0, graph) = make(&mut rng);
        let analytic = graph(&x0, true).1.expect("graph returns gradient");
        let numeric = finite_diff_grad(|x| graph(x, false).0, &x0, FD_STEP);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    CheckResult { name, worst_rel_err: worst, pass: worst < GRAD_TOL }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Finite-difference verification of every primitive op, every loss, and
/// both end-to-end objectives, on `INSTANCES` seeded random instances each.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();

    // elementwise binary ops with broadcasting: x holds both operands
    macro_rules! binary {
        ($name:literal, $op:ident, $lo:expr, $hi:expr) => {
            results.push(run_check($name, seed, |rng| {
                let x0 = uniform(rng, 24 + 4, $lo, $hi);
                (x0, move |x: &[f64], g: bool| {
                    let a = Tensor::from_data(x[..24].to_vec(), &[2, 3, 4], g).unwrap();
                    let b = Tensor::from_data(x[24..].to_vec(), &[4], g).unwrap();
                    let loss = a.$op(&b).unwrap().square().sum_all();
                    finish2(&loss, &a, &b, g)
                })
            }));
        };
    }
    binary!("add", add, -1.0, 1.0);
    binary!("sub", sub, -1.0, 1.0);
    binary!("mul", mul, -1.0, 1.0);
    binary!("div", div, 1.5, 3.0);

    // unary ops
    macro_rules! unary {
        ($name:literal, $lo:expr, $hi:expr, $f:expr) => {
            results.push(run_check($name, seed, |rng| {
                let x0 = uniform(rng, 12, $lo, $hi);
                (x0, move |x: &[f64], g: bool| {
                    let a = Tensor::from_data(x.to_vec(), &[3, 4], g).unwrap();
                    let f: fn(&Tensor) -> Tensor = $f;
                    let loss = f(&a).square().sum_all();
                    finish1(&loss, &a, g)
                })
            }));
        };
    }
    unary!("neg", -1.0, 1.0, |a| a.neg());
    unary!("exp", -1.0, 1.0, |a| a.exp());
    unary!("log", 0.5, 2.5, |a| a.log().unwrap());
    unary!("sqrt", 0.5, 2.5, |a| a.sqrt().unwrap());
    unary!("leaky_relu", -1.0, 1.0, |a| a.leaky_relu(0.01));
    unary!("square", -1.0, 1.0, |a| a.square());
    unary!("add_scalar", -1.0, 1.0, |a| a.add_scalar(0.7));
    unary!("mul_scalar", -1.0, 1.0, |a| a.mul_scalar(-1.3));

    // reductions over a middle axis
    macro_rules! reduction {
        ($name:literal, $which:expr) => {
            results.push(run_check($name, seed, |rng| {
                let x0 = uniform(rng, 24, -1.0, 1.0);
                (x0, move |x: &[f64], g: bool| {
                    let a = Tensor::from_data(x.to_vec(), &[2, 3, 4], g).unwrap();
                    let loss = a
                        .reduce($which, Some(&[1]), false)
                        .unwrap()
                        .square()
                        .sum_all();
                    finish1(&loss, &a, g)
                })
            }));
        };
    }
    reduction!("reduce_sum", Reduce::Sum);
    reduction!("reduce_mean", Reduce::Mean);
    reduction!("reduce_max", Reduce::Max);

    results.push(run_check("softmax", seed, |rng| {
        let x0 = uniform(rng, 24, -2.0, 2.0);
        (x0, move |x: &[f64], g: bool| {
            let a = Tensor::from_data(x.to_vec(), &[2, 3, 4], g).unwrap();
            let weight = Tensor::constant((0..24).map(|i| (i % 7) as f64 * 0.3).collect(), &[2, 3, 4]).unwrap();
            let loss = a.softmax(1).unwrap().mul(&weight).unwrap().sum_all();
            finish1(&loss, &a, g)
        })
    }));

    results.push(run_check("narrow", seed, |rng| {
        let x0 = uniform(rng, 24, -1.0, 1.0);
        (x0, move |x: &[f64], g: bool| {
            let a = Tensor::from_data(x.to_vec(), &[2, 3, 4], g).unwrap();
            let loss = a.narrow(2, 1, 2).unwrap().square().sum_all();
            finish1(&loss, &a, g)
        })
    }));

    results.push(run_check("concat", seed, |rng| {
        let x0 = uniform(rng, 18, -1.0, 1.0);
        (x0, move |x: &[f64], g: bool| {
            let a = Tensor::from_data(x[..6].to_vec(), &[2, 3, 1], g).unwrap();
            let b = Tensor::from_data(x[6..].to_vec(), &[2, 3, 2], g).unwrap();
            let weight = Tensor::constant((0..18).map(|i| 0.2 * (i as f64 - 8.0)).collect(), &[2, 3, 3]).unwrap();
            let loss = Tensor::concat(&[a.clone(), b.clone()], 2)
                .unwrap()
                .mul(&weight)
                .unwrap()
                .square()
                .sum_all();
            finish2(&loss, &a, &b, g)
        })
    }));

    results.push(run_check("reshape", seed, |rng| {
        let x0 = uniform(rng, 24, -1.0, 1.0);
        (x0, move |x: &[f64], g: bool| {
            let a = Tensor::from_data(x.to_vec(), &[2, 3, 4], g).unwrap();
            let weight = Tensor::constant((0..24).map(|i| 0.1 * i as f64).collect(), &[6, 4]).unwrap();
            let loss = a.reshape(&[6, 4]).unwrap().mul(&weight).unwrap().sum_all();
            finish1(&loss, &a, g)
        })
    }));

    results.push(run_check("conv_nd", seed, |rng| {
        let x0 = uniform(rng, 2 * 36 + 3 * 2 * 9, -1.0, 1.0);
        (x0, move |x: &[f64], g: bool| {
            let image = Tensor::from_data(x[..72].to_vec(), &[1, 2, 6, 6], g).unwrap();
            let kernel = Tensor::from_data(x[72..].to_vec(), &[3, 2, 3, 3], g).unwrap();
            let loss = image
                .conv_nd(&kernel, &[1, 1], &[1, 1])
                .unwrap()
                .square()
                .sum_all();
            finish2(&loss, &image, &kernel, g)
        })
    }));

    results.push(run_check("max_pool", seed, |rng| {
        let x0 = uniform(rng, 72, -1.0, 1.0);
        (x0, move |x: &[f64], g: bool| {
            let a = Tensor::from_data(x.to_vec(), &[1, 2, 6, 6], g).unwrap();
            let loss = a.max_pool(&[2, 2], &[2, 2]).unwrap().square().sum_all();
            finish1(&loss, &a, g)
        })
    }));

    results.push(run_check("upsample_nearest", seed, |rng| {
        let x0 = uniform(rng, 18, -1.0, 1.0);
        (x0, move |x: &[f64], g: bool| {
            let a = Tensor::from_data(x.to_vec(), &[1, 2, 3, 3], g).unwrap();
            let weight = Tensor::constant((0..72).map(|i| 0.05 * (i % 11) as f64).collect(), &[1, 2, 6, 6]).unwrap();
            let loss = a.upsample_nearest(2).unwrap().mul(&weight).unwrap().sum_all();
            finish1(&loss, &a, g)
        })
    }));

    // warp, w.r.t. the image and w.r.t. the field (offsets avoid the lattice)
    results.push(run_check("warp_image", seed, |rng| {
        let x0 = uniform(rng, 50, 0.0, 1.0);
        let field = uniform(rng, 50, -0.11, 0.11);
        let field: Vec<f64> = field.iter().map(|v| v + 0.013).collect();
        (x0, move |x: &[f64], g: bool| {
            let image = Tensor::from_data(x.to_vec(), &[1, 2, 5, 5], g).unwrap();
            let f = DisplacementField::new(
                Tensor::constant(field.clone(), &[1, 2, 5, 5]).unwrap(),
            )
            .unwrap();
            let loss = warp(&image, &f, Interp::Linear).unwrap().square().sum_all();
            finish1(&loss, &image, g)
        })
    }));

    results.push(run_check("warp_field", seed, |rng| {
        let x0: Vec<f64> = uniform(rng, 50, -0.11, 0.11)
            .iter()
            .map(|v| v + 0.013)
            .collect();
        let image = uniform(rng, 50, 0.0, 1.0);
        (x0, move |x: &[f64], g: bool| {
            let field = DisplacementField::new(
                Tensor::from_data(x.to_vec(), &[1, 2, 5, 5], g).unwrap(),
            )
            .unwrap();
            let img = Tensor::constant(image.clone(), &[1, 2, 5, 5]).unwrap();
            let loss = warp(&img, &field, Interp::Linear)
                .unwrap()
                .square()
                .sum_all();
            finish1(&loss, field.tensor(), g)
        })
    }));

    // losses (Eqs. 3-5)
    results.push(run_check("ncc_loss", seed, |rng| {
        let x0 = uniform(rng, 32, 0.0, 1.0);
        (x0, move |x: &[f64], g: bool| {
            let a = Tensor::from_data(x[..16].to_vec(), &[1, 1, 4, 4], g).unwrap();
            let b = Tensor::from_data(x[16..].to_vec(), &[1, 1, 4, 4], g).unwrap();
            let loss = ncc_loss(&a, &b).unwrap();
            finish2(&loss, &a, &b, g)
        })
    }));

    for (name, variant) in [
        ("soft_dice_conventional", DiceVariant::Conventional),
        ("soft_dice_as_printed", DiceVariant::AsPrinted),
    ] {
        results.push(run_check(name, seed, move |rng| {
            let x0 = uniform(rng, 48, -2.0, 2.0);
            let labels: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();
            (x0, move |x: &[f64], g: bool| {
                let logits = Tensor::from_data(x.to_vec(), &[1, 3, 4, 4], g).unwrap();
                let target = one_hot(&labels, 3, 1, &[4, 4]).unwrap();
                let loss =
                    soft_dice_loss(&logits.softmax(1).unwrap(), &target, variant).unwrap();
                finish1(&loss, &logits, g)
            })
        }));
    }

    results.push(run_check("bending_energy", seed, |rng| {
        let x0 = uniform(rng, 2 * 36, -0.2, 0.2);
        (x0, move |x: &[f64], g: bool| {
            let leaf = Tensor::from_data(x.to_vec(), &[1, 2, 6, 6], g).unwrap();
            let field = DisplacementField::new(leaf.clone()).unwrap();
            let loss = bending_energy(&field).unwrap();
            finish1(&loss, &leaf, g)
        })
    }));

    // Eq. 1 end to end, w.r.t. the displacement field
    results.push(run_check("registration_objective", seed, |rng| {
        let x0: Vec<f64> = uniform(rng, 2 * 36, -0.08, 0.08)
            .iter()
            .map(|v| v + 0.011)
            .collect();
        let moving = uniform(rng, 36, 0.0, 1.0);
        let target = uniform(rng, 36, 0.0, 1.0);
        let seg_m: Vec<u8> = (0..36).map(|_| rng.gen_range(0..2)).collect();
        let seg_t: Vec<u8> = (0..36).map(|_| rng.gen_range(0..2)).collect();
        (x0, move |x: &[f64], g: bool| {
            let leaf = Tensor::from_data(x.to_vec(), &[1, 2, 6, 6], g).unwrap();
            let field = DisplacementField::new(leaf.clone()).unwrap();
            let m = Tensor::constant(moving.clone(), &[1, 1, 6, 6]).unwrap();
            let t = Tensor::constant(target.clone(), &[1, 1, 6, 6]).unwrap();
            let sm = one_hot(&seg_m, 2, 1, &[6, 6]).unwrap();
            let st = one_hot(&seg_t, 2, 1, &[6, 6]).unwrap();
            let weights = LossWeights::new(10.0, 1.0, 3.0).unwrap();
            let parts = registration_objective(
                &m,
                &t,
                Some(&sm),
                Some(&st),
                &field,
                &weights,
                DiceVariant::Conventional,
            )
            .unwrap();
            finish1(&parts.total, &leaf, g)
        })
    }));

    // L_seg end to end, w.r.t. the segmentation logits, per labeling case
    for (name, moving_labeled, target_labeled) in [
        ("seg_objective_moving_labeled", true, false),
        ("seg_objective_target_labeled", false, true),
        ("seg_objective_both_labeled", true, true),
    ] {
        results.push(run_check(name, seed, move |rng| {
            let x0 = uniform(rng, 2 * 2 * 36, -2.0, 2.0);
            let field: Vec<f64> = uniform(rng, 2 * 36, -0.08, 0.08)
                .iter()
                .map(|v| v + 0.011)
                .collect();
            let lab_m: Vec<u8> = (0..36).map(|_| rng.gen_range(0..2)).collect();
            let lab_t: Vec<u8> = (0..36).map(|_| rng.gen_range(0..2)).collect();
            (x0, move |x: &[f64], g: bool| {
                let logits_m = Tensor::from_data(x[..72].to_vec(), &[1, 2, 6, 6], g).unwrap();
                let logits_t = Tensor::from_data(x[72..].to_vec(), &[1, 2, 6, 6], g).unwrap();
                let pred_m = logits_m.softmax(1).unwrap();
                let pred_t = logits_t.softmax(1).unwrap();
                let manual_m = one_hot(&lab_m, 2, 1, &[6, 6]).unwrap();
                let manual_t = one_hot(&lab_t, 2, 1, &[6, 6]).unwrap();
                let f = DisplacementField::new(
                    Tensor::constant(field.clone(), &[1, 2, 6, 6]).unwrap(),
                )
                .unwrap();
                let pair = SegmentationPair {
                    manual_moving: moving_labeled.then_some(&manual_m),
                    manual_target: target_labeled.then_some(&manual_t),
                    pred_moving: &pred_m,
                    pred_target: &pred_t,
                };
                let labeling = PairLabeling { moving_labeled, target_labeled };
                let weights = LossWeights::new(10.0, 3.0, 3.0).unwrap();
                let parts = segmentation_objective(
                    &pair,
                    &f,
                    &labeling,
                    &weights,
                    DiceVariant::Conventional,
                )
                .unwrap();
                finish2(&parts.total, &logits_m, &logits_t, g)
            })
        }));
    }

    results
}

fn finish1(loss: &Tensor, leaf: &Tensor, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let value = loss.item();
    if !want_grad {
        return (value, None);
    }
    loss.backward().expect("scalar loss");
    (value, Some(leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()])))
}

fn finish2(
    loss: &Tensor,
    a: &Tensor,
    b: &Tensor,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let value = loss.item();
    if !want_grad {
        return (value, None);
    }
    loss.backward().expect("scalar loss");
    let mut grad = a.grad().unwrap_or_else(|| vec![0.0; a.numel()]);
    grad.extend(b.grad().unwrap_or_else(|| vec![0.0; b.numel()]));
    (value, Some(grad))
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let results = run_suite(1234);
        assert!(results.len() >= 25);
        for r in &results {
            assert!(r.pass, "{}: worst rel err {}", r.name, r.worst_rel_err);
        }
    }
}
