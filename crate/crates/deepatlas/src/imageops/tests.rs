use super::*;
use crate::gradcheck::{finite_diff_grad, max_rel_err, FD_STEP, GRAD_TOL};
use crate::tensor::Tensor;
use proptest::prelude::{prop_assert, proptest};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_data(data.to_vec(), shape, false).unwrap()
}

fn field(data: &[f64], shape: &[usize], track: bool) -> DisplacementField {
    DisplacementField::new(Tensor::from_data(data.to_vec(), shape, track).unwrap()).unwrap()
}

#[test]
fn identity_grid_1d_examples() {
    let g = identity_grid(&[3]);
    assert_eq!(g.data(), &[-1.0, 0.0, 1.0]);
    let g = identity_grid(&[2]);
    assert_eq!(g.data(), &[-1.0, 1.0]);
}

#[test]
fn identity_grid_center_and_endpoints() {
    let g = identity_grid(&[3, 3]);
    assert_eq!(g.shape(), &[2, 3, 3]);
    // center voxel has coordinate (0, 0)
    assert_eq!(g.data()[4], 0.0);
    assert_eq!(g.data()[9 + 4], 0.0);
    // endpoints are exactly +-1
    for extent in [2usize, 5, 17, 64] {
        let g = identity_grid(&[extent]);
        assert_eq!(g.data()[0], -1.0);
        assert_eq!(g.data()[extent - 1], 1.0);
    }
}

#[test]
fn zero_field_warp_is_bit_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img: Vec<f64> = (0..2 * 3 * 5 * 7).map(|_| rng.gen::<f64>()).collect();
    let image = t(&img, &[2, 3, 5, 7]);
    let zero = field(&vec![0.0; 2 * 2 * 5 * 7], &[2, 2, 5, 7], false);
    let warped = warp(&image, &zero, Interp::Linear).unwrap();
    assert_eq!(warped.data(), image.data());
}

#[test]
fn constant_shift_with_border_clamp() {
    // 1-D image [0,1,2] on a degenerate height-1 grid; +1.0 normalized along
    // the extent-3 axis is exactly one voxel, clamped at the border: [1,2,2]
    let image = t(&[0.0, 1.0, 2.0], &[1, 1, 1, 3]);
    let mut u = vec![0.0; 2 * 3];
    u[3..6].iter_mut().for_each(|v| *v = 1.0);
    let f = field(&u, &[1, 2, 1, 3], false);
    let warped = warp(&image, &f, Interp::Linear).unwrap();
    assert_eq!(warped.data(), &[1.0, 2.0, 2.0]);
    let warped = warp(&image, &f, Interp::Nearest).unwrap();
    assert_eq!(warped.data(), &[1.0, 2.0, 2.0]);
}

#[test]
fn warp_field_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img: Vec<f64> = (0..1 * 1 * 6 * 6).map(|_| rng.gen::<f64>()).collect();
    let image = t(&img, &[1, 1, 6, 6]);
    // small, lattice-avoiding displacements keep the stencil differentiable
    let u: Vec<f64> = (0..2 * 36).map(|_| rng.gen_range(-0.23..0.23) + 0.011).collect();
    let loss = |ud: &[f64]| {
        let f = field(ud, &[1, 2, 6, 6], false);
        warp(&image, &f, Interp::Linear).unwrap().square().sum_all().item()
    };
    let leaf = field(&u, &[1, 2, 6, 6], true);
    let scalar = warp(&image, &leaf, Interp::Linear).unwrap().square().sum_all();
    scalar.backward().unwrap();
    let analytic = leaf.tensor().grad().unwrap();
    let numeric = finite_diff_grad(loss, &u, FD_STEP);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < GRAD_TOL, "warp field grad rel err {err}");
}

#[test]
fn warp_image_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
    let u: Vec<f64> = (0..2 * 36).map(|_| rng.gen_range(-0.2..0.2) + 0.007).collect();
    let f = field(&u, &[1, 2, 6, 6], false);
    let leaf = Tensor::from_data(img.clone(), &[1, 1, 6, 6], true).unwrap();
    let scalar = warp(&leaf, &f, Interp::Linear).unwrap().square().sum_all();
    scalar.backward().unwrap();
    let analytic = leaf.grad().unwrap();
    let numeric = finite_diff_grad(
        |v| {
            let image = t(v, &[1, 1, 6, 6]);
            warp(&image, &f, Interp::Linear).unwrap().square().sum_all().item()
        },
        &img,
        FD_STEP,
    );
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < GRAD_TOL, "warp image grad rel err {err}");
}

#[test]
fn warp_3d_zero_field_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen::<f64>()).collect();
    let image = t(&img, &[1, 2, 4, 4, 4]);
    let zero = field(&vec![0.0; 3 * 64], &[1, 3, 4, 4, 4], false);
    let warped = warp(&image, &zero, Interp::Linear).unwrap();
    assert_eq!(warped.data(), image.data());
}

#[test]
fn warp_rejects_rank_mismatch() {
    let image = t(&[0.0; 16], &[1, 1, 4, 4]);
    let f = field(&[0.0; 3 * 8], &[1, 3, 2, 2, 2], false);
    assert!(warp(&image, &f, Interp::Linear).is_err());
}

#[test]
fn warp_locality_of_compact_fields() {
    // displacement confined to one corner leaves the far region untouched
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
    let image = t(&img, &[1, 1, 10, 10]);
    let mut u = vec![0.0; 2 * 100];
    for y in 0..3 {
        for x in 0..3 {
            u[y * 10 + x] = 0.05;
            u[100 + y * 10 + x] = -0.07;
        }
    }
    let f = field(&u, &[1, 2, 10, 10], false);
    let warped = warp(&image, &f, Interp::Linear).unwrap();
    for y in 5..10 {
        for x in 5..10 {
            assert_eq!(warped.data()[y * 10 + x], img[y * 10 + x]);
        }
    }
}

fn affine_field_2d(shape: &[usize; 2], a: [[f64; 2]; 2], b: [f64; 2]) -> Vec<f64> {
    let grid = identity_grid(shape);
    let n = shape[0] * shape[1];
    let mut u = vec![0.0; 2 * n];
    for i in 0..2 {
        for v in 0..n {
            u[i * n + v] =
                a[i][0] * grid.data()[v] + a[i][1] * grid.data()[n + v] + b[i];
        }
    }
    u
}

#[test]
fn hessian_of_affine_field_is_zero() {
    let u = affine_field_2d(&[5, 6], [[0.3, -0.2], [0.1, 0.4]], [0.05, -0.03]);
    let f = field(&u, &[1, 2, 5, 6], false);
    let h = hessian(&f).unwrap();
    assert_eq!(h.shape(), &[1, 2, 2, 2, 3, 4]);
    for &v in h.data() {
        assert!(v.abs() < 1e-12, "affine Hessian entry {v}");
    }
}

#[test]
fn quadratic_second_derivative_is_two() {
    // u_1 = x_1^2 on a 3 x 5 grid; d2u_1/dx_1^2 = 2 exactly on the interior
    let grid = identity_grid(&[3, 5]);
    let n = 15;
    let mut u = vec![0.0; 2 * n];
    for v in 0..n {
        let x1 = grid.data()[n + v];
        u[n + v] = x1 * x1;
    }
    let f = field(&u, &[1, 2, 3, 5], false);
    let h = hessian(&f).unwrap();
    // entry (component 1, p=1, q=1)
    let int_n = 1 * 3;
    let base = (((1 * 2) + 1) * 2 + 1) * int_n;
    for v in 0..int_n {
        assert!((h.data()[base + v] - 2.0).abs() < 1e-10);
    }
}

#[test]
fn constant_field_has_zero_derivatives() {
    let f = field(&vec![0.42; 2 * 20], &[1, 2, 4, 5], false);
    for order in [1u8, 2] {
        let d = spatial_derivatives(&f, order).unwrap();
        assert!(d.data().iter().all(|&v| v.abs() < 1e-13));
    }
}

#[test]
fn derivatives_require_extent_three() {
    let f = field(&[0.0; 2 * 2 * 4], &[1, 2, 2, 4], false);
    assert!(hessian(&f).is_err());
}

#[test]
fn jacobian_determinant_identity_is_one() {
    let f = field(&vec![0.0; 2 * 25], &[1, 2, 5, 5], false);
    let det = jacobian_determinant(&f).unwrap();
    assert_eq!(det.shape(), &[1, 3, 3]);
    for &v in det.data() {
        assert!((v - 1.0).abs() < 1e-13);
    }
}

#[test]
fn jacobian_determinant_of_uniform_scaling() {
    // u = s * id gives phi = (1+s) * id with determinant (1+s)^d
    let s = 0.25;
    let grid = identity_grid(&[5, 5]);
    let u: Vec<f64> = grid.data().iter().map(|&v| s * v).collect();
    let f = field(&u, &[1, 2, 5, 5], false);
    let det = jacobian_determinant(&f).unwrap();
    for &v in det.data() {
        assert!((v - (1.0 + s) * (1.0 + s)).abs() < 1e-10, "det {v}");
    }
}

#[test]
fn jacobian_determinant_positive_for_small_smooth_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // smooth: low-frequency sinusoid with small amplitude
    let n = 8;
    let grid = identity_grid(&[n, n]);
    let mut u = vec![0.0; 2 * n * n];
    let (a0, a1) = (rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05));
    for v in 0..n * n {
        let (x0, x1) = (grid.data()[v], grid.data()[n * n + v]);
        u[v] = a0 * (std::f64::consts::PI * x1).sin();
        u[n * n + v] = a1 * (std::f64::consts::PI * x0).cos();
    }
    let f = field(&u, &[1, 2, n, n], false);
    let det = jacobian_determinant(&f).unwrap();
    // oracle: determinant of the explicit 2x2 stencil Jacobian per voxel
    let jac = jacobian(&f).unwrap();
    let m = det.numel();
    for v in 0..m {
        let j00 = 1.0 + jac.data()[v];
        let j01 = jac.data()[m + v];
        let j10 = jac.data()[2 * m + v];
        let j11 = 1.0 + jac.data()[3 * m + v];
        let want = j00 * j11 - j01 * j10;
        assert!((det.data()[v] - want).abs() < 1e-12);
        assert!(det.data()[v] > 0.0);
    }
}

#[test]
fn deformation_map_is_field_plus_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u: Vec<f64> = (0..2 * 12).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let f = field(&u, &[1, 2, 3, 4], false);
    let phi = f.deformation_map();
    let id = identity_grid(&[3, 4]);
    for v in 0..12 {
        assert_eq!(phi.data()[v], u[v] + id.data()[v]);
        assert_eq!(phi.data()[12 + v], u[12 + v] + id.data()[12 + v]);
    }
}

#[test]
fn displacement_field_validates_channels() {
    assert!(DisplacementField::new(Tensor::zeros(&[1, 3, 4, 4])).is_err());
    assert!(DisplacementField::new(
        Tensor::from_data(vec![f64::NAN; 2 * 16], &[1, 2, 4, 4], false).unwrap()
    )
    .is_err());
}

proptest! {
    #[test]
    fn linear_warp_stays_within_image_range(
        seed in 0u64..1000,
        amp in 0.0f64..1.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f64> = (0..25).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let u: Vec<f64> = (0..2 * 25).map(|_| rng.gen_range(-amp..amp + 1e-9)).collect();
        let image = t(&img, &[1, 1, 5, 5]);
        let f = field(&u, &[1, 2, 5, 5], false);
        let warped = warp(&image, &f, Interp::Linear).unwrap();
        let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in warped.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
