use super::*;
use crate::gradcheck::{finite_diff_grad, max_rel_err, FD_STEP, GRAD_TOL};
use crate::imageops::DisplacementField;
use crate::tensor::Tensor;
use proptest::prelude::{prop_assert, proptest};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_data(data.to_vec(), shape, false).unwrap()
}

fn zero_field(spatial: &[usize]) -> DisplacementField {
    let d = spatial.len();
    let mut shape = vec![1, d];
    shape.extend_from_slice(spatial);
    DisplacementField::new(Tensor::zeros(&shape)).unwrap()
}

/// Direct evaluation of 1 - NCC, written independently of the tensor ops.
fn ncc_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma: f64 = a.iter().sum::<f64>() / n;
    let mb: f64 = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    1.0 - num / (va * vb + NCC_EPS).sqrt()
}

#[test]
fn ncc_perfect_correlation_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
    let i = t(&v, &[1, 1, 8, 8]);
    let loss = ncc_loss(&i, &i).unwrap().item();
    assert!(loss.abs() < 1e-8, "ncc(I, I) = {loss}");
}

#[test]
fn ncc_perfect_anticorrelation_is_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
    let w: Vec<f64> = v.iter().map(|&x| 0.7 - x).collect();
    let loss = ncc_loss(&t(&v, &[1, 1, 8, 8]), &t(&w, &[1, 1, 8, 8])).unwrap().item();
    assert!((loss - 2.0).abs() < 1e-8, "ncc(I, c - I) = {loss}");
}

#[test]
fn ncc_matches_direct_formula() {
    let a = [0.0, 1.0, 2.0, 3.0];
    let b = [1.0, 3.0, 2.0, 0.0];
    let loss = ncc_loss(&t(&a, &[1, 1, 2, 2]), &t(&b, &[1, 1, 2, 2])).unwrap().item();
    let want = ncc_oracle(&a, &b);
    assert!((loss - want).abs() < 1e-12, "got {loss}, want {want}");
}

#[test]
fn ncc_batch_is_mean_of_per_image_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..32).map(|_| rng.gen::<f64>()).collect();
    let b: Vec<f64> = (0..32).map(|_| rng.gen::<f64>()).collect();
    let loss = ncc_loss(&t(&a, &[2, 1, 4, 4]), &t(&b, &[2, 1, 4, 4])).unwrap().item();
    let want = 0.5 * (ncc_oracle(&a[..16], &b[..16]) + ncc_oracle(&a[16..], &b[16..]));
    assert!((loss - want).abs() < 1e-12);
}

#[test]
fn dice_identical_one_hot() {
    let labels = [0u8, 1, 2, 1, 0, 2, 1, 1, 0];
    let s = one_hot(&labels, 3, 1, &[3, 3]).unwrap();
    let conv = soft_dice_loss(&s, &s, DiceVariant::Conventional).unwrap().item();
    assert!(conv.abs() < 1e-6, "conventional perfect overlap = {conv}");
    let printed = soft_dice_loss(&s, &s, DiceVariant::AsPrinted).unwrap().item();
    // each hard-label class term is exactly 1/2 up to the smoothing epsilon
    assert!((printed - 0.5).abs() < 1e-6, "as_printed perfect overlap = {printed}");
}

#[test]
fn dice_two_class_fixture() {
    // S class-1 mask [[1,1],[0,0]], S* class-1 mask [[1,0],[0,0]]
    let s = one_hot(&[1, 1, 0, 0], 2, 1, &[2, 2]).unwrap();
    let s_star = one_hot(&[1, 0, 0, 0], 2, 1, &[2, 2]).unwrap();
    let loss = soft_dice_loss(&s, &s_star, DiceVariant::Conventional).unwrap().item();
    let want = 1.0 - 0.5 * (2.0 / 3.0 + 4.0 / 5.0); // = 4/15
    assert!((loss - want).abs() < 1e-5, "got {loss}, want {want}");
}

#[test]
fn dice_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.gen::<f64>()).collect();
    let b: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.gen::<f64>()).collect();
    let sa = t(&a, &[2, 3, 4, 4]);
    let sb = t(&b, &[2, 3, 4, 4]);
    for variant in [DiceVariant::Conventional, DiceVariant::AsPrinted] {
        let ab = soft_dice_loss(&sa, &sb, variant).unwrap().item();
        let ba = soft_dice_loss(&sb, &sa, variant).unwrap().item();
        assert!((ab - ba).abs() < 1e-15);
    }
}

#[test]
fn dice_rejects_class_mismatch() {
    let a = Tensor::zeros(&[1, 2, 4, 4]);
    let b = Tensor::zeros(&[1, 3, 4, 4]);
    assert!(soft_dice_loss(&a, &b, DiceVariant::Conventional).is_err());
}

#[test]
fn bending_energy_of_zero_field_is_zero() {
    let f = zero_field(&[6, 6]);
    assert_eq!(bending_energy(&f).unwrap().item(), 0.0);
}

#[test]
fn bending_energy_of_affine_field_is_zero() {
    let grid = crate::imageops::identity_grid(&[7, 5]);
    let n = 35;
    let mut u = vec![0.0; 2 * n];
    for v in 0..n {
        let (x0, x1) = (grid.data()[v], grid.data()[n + v]);
        u[v] = 0.2 * x0 - 0.1 * x1 + 0.03;
        u[n + v] = -0.25 * x0 + 0.15 * x1 - 0.02;
    }
    let f = DisplacementField::new(t(&u, &[1, 2, 7, 5])).unwrap();
    let e = bending_energy(&f).unwrap().item();
    assert!(e.abs() < 1e-10, "affine bending energy = {e}");
}

#[test]
fn bending_energy_quadratic_fixture_is_four() {
    // u_1 = x_1^2 along an extent-9 axis: |H|_F^2 = 2^2 on every interior voxel
    let grid = crate::imageops::identity_grid(&[3, 9]);
    let n = 27;
    let mut u = vec![0.0; 2 * n];
    for v in 0..n {
        let x1 = grid.data()[n + v];
        u[n + v] = x1 * x1;
    }
    let f = DisplacementField::new(t(&u, &[1, 2, 3, 9])).unwrap();
    let e = bending_energy(&f).unwrap().item();
    assert!((e - 4.0).abs() < 1e-9, "quadratic bending energy = {e}");
}

#[test]
fn bending_energy_requires_extent_three() {
    let f = DisplacementField::new(Tensor::zeros(&[1, 2, 2, 5])).unwrap();
    assert!(bending_energy(&f).is_err());
}

#[test]
fn registration_objective_zero_at_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let i = t(&img, &[1, 1, 6, 6]);
    let s = one_hot(&(0..36).map(|v| (v % 3) as u8).collect::<Vec<_>>(), 3, 1, &[6, 6]).unwrap();
    let f = zero_field(&[6, 6]);
    let parts = registration_objective(
        &i,
        &i,
        Some(&s),
        Some(&s),
        &f,
        &LossWeights::default(),
        DiceVariant::Conventional,
    )
    .unwrap();
    assert!(parts.total.item().abs() < 1e-8, "total = {}", parts.total.item());
    assert!(parts.l_i.unwrap().abs() < 1e-8);
    assert_eq!(parts.l_r.unwrap(), 0.0);
    assert!(parts.l_a.unwrap().abs() < 1e-6);
}

#[test]
fn registration_objective_degenerates_to_ncc() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let b: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let u: Vec<f64> = (0..2 * 36).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let f = DisplacementField::new(t(&u, &[1, 2, 6, 6])).unwrap();
    let weights = LossWeights::new(0.0, 0.0, 3.0).unwrap();
    let parts = registration_objective(
        &t(&a, &[1, 1, 6, 6]),
        &t(&b, &[1, 1, 6, 6]),
        None,
        None,
        &f,
        &weights,
        DiceVariant::Conventional,
    )
    .unwrap();
    let warped = crate::imageops::warp(&t(&a, &[1, 1, 6, 6]), &f, crate::imageops::Interp::Linear).unwrap();
    let want = ncc_loss(&warped, &t(&b, &[1, 1, 6, 6])).unwrap().item();
    assert!((parts.total.item() - want).abs() < 1e-12);
}

#[test]
fn registration_objective_is_sum_of_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let b: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let u: Vec<f64> = (0..2 * 36).map(|_| rng.gen_range(-0.15..0.15)).collect();
    let sm = one_hot(&(0..36).map(|v| (v % 2) as u8).collect::<Vec<_>>(), 2, 1, &[6, 6]).unwrap();
    let st = one_hot(&(0..36).map(|v| ((v / 2) % 2) as u8).collect::<Vec<_>>(), 2, 1, &[6, 6]).unwrap();
    let f = DisplacementField::new(t(&u, &[1, 2, 6, 6])).unwrap();
    let weights = LossWeights::new(100.0, 3.0, 3.0).unwrap();
    let parts = registration_objective(
        &t(&a, &[1, 1, 6, 6]),
        &t(&b, &[1, 1, 6, 6]),
        Some(&sm),
        Some(&st),
        &f,
        &weights,
        DiceVariant::Conventional,
    )
    .unwrap();
    let want = parts.l_i.unwrap() + 100.0 * parts.l_r.unwrap() + 3.0 * parts.l_a.unwrap();
    assert!((parts.total.item() - want).abs() < 1e-10);
}

#[test]
fn registration_objective_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let b: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let u: Vec<f64> = (0..2 * 36).map(|_| rng.gen_range(-0.2..0.2) + 0.013).collect();
    let weights = LossWeights::new(10.0, 3.0, 3.0).unwrap();
    let sm = one_hot(&(0..36).map(|v| (v % 2) as u8).collect::<Vec<_>>(), 2, 1, &[6, 6]).unwrap();
    let st = one_hot(&(0..36).map(|v| ((v / 3) % 2) as u8).collect::<Vec<_>>(), 2, 1, &[6, 6]).unwrap();
    let eval = |ud: &[f64], track: bool| {
        let f = DisplacementField::new(
            Tensor::from_data(ud.to_vec(), &[1, 2, 6, 6], track).unwrap(),
        )
        .unwrap();
        let parts = registration_objective(
            &t(&a, &[1, 1, 6, 6]),
            &t(&b, &[1, 1, 6, 6]),
            Some(&sm),
            Some(&st),
            &f,
            &weights,
            DiceVariant::Conventional,
        )
        .unwrap();
        (parts.total, f)
    };
    let (total, f) = eval(&u, true);
    total.backward().unwrap();
    let analytic = f.tensor().grad().unwrap();
    let numeric = finite_diff_grad(|ud| eval(ud, false).0.item(), &u, FD_STEP);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < GRAD_TOL, "registration objective grad rel err {err}");
}

#[test]
fn segmentation_objective_both_unlabeled_is_zero() {
    let pred = Tensor::full(&[1, 2, 4, 4], 0.5);
    let pair = SegmentationPair {
        manual_moving: None,
        manual_target: None,
        pred_moving: &pred,
        pred_target: &pred,
    };
    let parts = segmentation_objective(
        &pair,
        &zero_field(&[4, 4]),
        &PairLabeling { moving_labeled: false, target_labeled: false },
        &LossWeights::default(),
        DiceVariant::Conventional,
    )
    .unwrap();
    assert_eq!(parts.total.item(), 0.0);
    assert!(parts.l_a.is_none() && parts.l_sp.is_none());
}

#[test]
fn both_labeled_grad_equals_supervised_grad_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sm = one_hot(&(0..16).map(|v| (v % 2) as u8).collect::<Vec<_>>(), 2, 1, &[4, 4]).unwrap();
    let st = one_hot(&(0..16).map(|v| ((v / 4) % 2) as u8).collect::<Vec<_>>(), 2, 1, &[4, 4]).unwrap();
    let u: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let field = DisplacementField::new(t(&u, &[1, 2, 4, 4])).unwrap();
    let labeling = PairLabeling { moving_labeled: true, target_labeled: true };

    let grad_with_lambda = |lambda_a: f64| {
        let leaf = Tensor::from_data(logits.clone(), &[1, 2, 4, 4], true).unwrap();
        let pred = leaf.softmax(1).unwrap();
        let pair = SegmentationPair {
            manual_moving: Some(&sm),
            manual_target: Some(&st),
            pred_moving: &pred,
            pred_target: &pred,
        };
        let weights = LossWeights::new(0.0, lambda_a, 3.0).unwrap();
        let parts =
            segmentation_objective(&pair, &field, &labeling, &weights, DiceVariant::Conventional)
                .unwrap();
        parts.total.backward().unwrap();
        leaf.grad().unwrap()
    };
    let g0 = grad_with_lambda(0.0);
    let g7 = grad_with_lambda(7.0);
    for (a, b) in g0.iter().zip(&g7) {
        assert!((a - b).abs() < 1e-12, "lambda_a leaked into the seg gradient");
    }
}

#[test]
fn target_unlabeled_case_matches_component_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sm = one_hot(&(0..16).map(|v| (v % 2) as u8).collect::<Vec<_>>(), 2, 1, &[4, 4]).unwrap();
    let logits: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pred = t(&logits, &[1, 2, 4, 4]).softmax(1).unwrap();
    let field = zero_field(&[4, 4]);
    let weights = LossWeights::new(0.0, 2.0, 5.0).unwrap();
    let pair = SegmentationPair {
        manual_moving: Some(&sm),
        manual_target: None,
        pred_moving: &pred,
        pred_target: &pred,
    };
    let labeling = PairLabeling { moving_labeled: true, target_labeled: false };
    let parts =
        segmentation_objective(&pair, &field, &labeling, &weights, DiceVariant::Conventional)
            .unwrap();
    // zero field: L_a reduces to Dice(S_m, F_S(I_t)) directly
    let l_a = soft_dice_loss(&sm, &pred, DiceVariant::Conventional).unwrap().item();
    let l_sp = soft_dice_loss(&pred, &sm, DiceVariant::Conventional).unwrap().item();
    let want = 2.0 * l_a + 5.0 * l_sp;
    assert!((parts.total.item() - want).abs() < 1e-12);
}

#[test]
fn segmentation_objective_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sm = one_hot(&(0..16).map(|v| (v % 2) as u8).collect::<Vec<_>>(), 2, 1, &[4, 4]).unwrap();
    let u: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-0.15..0.15) + 0.009).collect();
    let field = DisplacementField::new(t(&u, &[1, 2, 4, 4])).unwrap();
    let logits: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights = LossWeights::new(0.0, 2.0, 3.0).unwrap();
    for labeling in [
        PairLabeling { moving_labeled: true, target_labeled: false },
        PairLabeling { moving_labeled: false, target_labeled: true },
        PairLabeling { moving_labeled: true, target_labeled: true },
    ] {
        let eval = |x: &[f64], track: bool| {
            let leaf = Tensor::from_data(x.to_vec(), &[1, 2, 4, 4], track).unwrap();
            let pred = leaf.softmax(1).unwrap();
            let pair = SegmentationPair {
                manual_moving: Some(&sm),
                manual_target: Some(&sm),
                pred_moving: &pred,
                pred_target: &pred,
            };
            let parts = segmentation_objective(
                &pair,
                &field,
                &labeling,
                &weights,
                DiceVariant::Conventional,
            )
            .unwrap();
            (parts.total, leaf)
        };
        let (total, leaf) = eval(&logits, true);
        total.backward().unwrap();
        let analytic = leaf.grad().unwrap();
        let numeric = finite_diff_grad(|x| eval(x, false).0.item(), &logits, FD_STEP);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < GRAD_TOL, "L_seg grad ({labeling:?}) rel err {err}");
    }
}

#[test]
fn loss_weights_reject_negative() {
    assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
    assert!(LossWeights::new(0.0, f64::NAN, 0.0).is_err());
}

proptest! {
    #[test]
    fn ncc_bounds_and_affine_invariance(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ta = t(&a, &[1, 1, 5, 5]);
        let tb = t(&b, &[1, 1, 5, 5]);
        let loss = ncc_loss(&ta, &tb).unwrap().item();
        prop_assert!(loss >= -1e-8 && loss <= 2.0 + 1e-8);
        // positive affine rescaling of either argument leaves NCC unchanged
        let scale = rng.gen_range(0.1..5.0);
        let shift = rng.gen_range(-3.0..3.0);
        let scaled: Vec<f64> = a.iter().map(|&x| scale * x + shift).collect();
        let rescaled = ncc_loss(&t(&scaled, &[1, 1, 5, 5]), &tb).unwrap().item();
        prop_assert!((loss - rescaled).abs() < 1e-8);
    }

    #[test]
    fn dice_bounds_for_probability_inputs(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits_a: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits_b: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sa = t(&logits_a, &[1, 3, 4, 4]).softmax(1).unwrap();
        let sb = t(&logits_b, &[1, 3, 4, 4]).softmax(1).unwrap();
        let loss = soft_dice_loss(&sa, &sb, DiceVariant::Conventional).unwrap().item();
        prop_assert!(loss >= 0.0 && loss <= 1.0);
    }

    #[test]
    fn bending_energy_nonnegative_and_zero_only_for_affine(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..2 * 25).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let f = DisplacementField::new(t(&u, &[1, 2, 5, 5])).unwrap();
        let e = bending_energy(&f).unwrap().item();
        prop_assert!(e >= 0.0);
        // random fields are almost surely non-affine
        prop_assert!(e > 0.0);
    }
}
