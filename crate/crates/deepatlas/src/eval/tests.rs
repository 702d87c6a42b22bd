use super::*;
use crate::data::EvalImage;
use crate::nets::{RegNetConfig, SegNetConfig};
use proptest::prelude::{prop_assert, proptest};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[test]
fn hard_dice_identical_maps_score_100() {
    let labels = vec![0u8, 1, 2, 1, 0, 2];
    for v in hard_dice(&labels, &labels, 3) {
        assert_eq!(v, 100.0);
    }
}

#[test]
fn hard_dice_disjoint_masks_score_zero() {
    assert_eq!(hard_dice(&[1, 1, 0, 0], &[0, 0, 1, 1], 2), vec![0.0, 0.0]);
}

#[test]
fn hard_dice_matches_direct_count() {
    // pred 3 voxels of class 1, true 5, overlap 2 -> 200*2/8 = 50
    let pred = vec![1, 1, 1, 0, 0, 0, 0, 0];
    let truth = vec![1, 1, 0, 1, 1, 1, 0, 0];
    assert_eq!(hard_dice(&pred, &truth, 2)[1], 50.0);
}

#[test]
fn hard_dice_absent_class_scores_100() {
    assert_eq!(hard_dice(&[0, 0], &[0, 0], 3), vec![100.0, 100.0, 100.0]);
}

proptest! {
    #[test]
    fn hard_dice_is_symmetric_and_order_invariant(
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u8> = (0..40).map(|_| rng.gen_range(0..3)).collect();
        let b: Vec<u8> = (0..40).map(|_| rng.gen_range(0..3)).collect();
        prop_assert!(hard_dice(&a, &b, 3) == hard_dice(&b, &a, 3));
        let mut order: Vec<usize> = (0..40).collect();
        order.shuffle(&mut rng);
        let ap: Vec<u8> = order.iter().map(|&i| a[i]).collect();
        let bp: Vec<u8> = order.iter().map(|&i| b[i]).collect();
        prop_assert!(hard_dice(&a, &b, 3) == hard_dice(&ap, &bp, 3));
    }
}

#[test]
fn argmax_breaks_ties_toward_lowest_class() {
    let probs =
        Tensor::constant(vec![0.4, 0.5, 0.4, 0.2, 0.2, 0.5], &[1, 3, 2]).unwrap();
    // voxel 0: classes 0/1 tie at 0.4 -> 0; voxel 1: class 0 and 2 tie at 0.5 -> 0
    assert_eq!(argmax_labels(&probs), vec![0, 0]);
}

fn eval_images(count: usize, size: usize, k: usize, seed: u64) -> Vec<EvalImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = size * size;
            let intensity =
                Tensor::constant((0..n).map(|_| rng.gen::<f64>()).collect(), &[1, 1, size, size])
                    .unwrap();
            let labels = (0..n).map(|_| rng.gen_range(0..k as u8)).collect();
            EvalImage { id: format!("e{i}"), index: i, intensity, labels }
        })
        .collect()
}

#[test]
fn registration_eval_with_zero_field_equals_unwarped_dice() {
    // fresh RegNet has a zero-initialized head, so every pair gets u = 0
    let net = RegNet::new(RegNetConfig { spatial_rank: 2, depth: 1, width: 2, kernel: 3 }, 1);
    let images = eval_images(3, 8, 3, 5);
    let report = eval_registration(&net, &images, 3, &default_groups(3)).unwrap();
    assert_eq!(report.per_image.len(), 6);
    assert_eq!(report.folding_fraction, Some(0.0));
    for moving in &images {
        for target in &images {
            if moving.index == target.index {
                continue;
            }
            let direct = hard_dice(&moving.labels, &target.labels, 3);
            let row = report
                .per_image
                .iter()
                .find(|p| p.id == format!("{}->{}", moving.id, target.id))
                .unwrap();
            assert_eq!(row.dice, direct);
        }
    }
}

#[test]
fn segmentation_report_aggregates_consistently() {
    let net = SegNet::new(
        SegNetConfig { spatial_rank: 2, depth: 1, width: 2, classes: 3, kernel: 3 },
        2,
    );
    let images = eval_images(4, 8, 3, 9);
    let report = eval_segmentation(&net, &images, &default_groups(3)).unwrap();
    assert_eq!(report.per_image.len(), 4);
    for p in &report.per_image {
        assert!(p.dice.iter().all(|&v| (0.0..=100.0).contains(&v)));
        let mean = p.dice.iter().sum::<f64>() / 3.0;
        assert!((p.mean - mean).abs() < 1e-12);
    }
    // report means re-derivable from the per-image rows
    let mean = report.per_image.iter().map(|p| p.mean).sum::<f64>() / 4.0;
    assert!((report.mean_dice - mean).abs() < 1e-12);
    for c in 0..3 {
        let pc = report.per_image.iter().map(|p| p.dice[c]).sum::<f64>() / 4.0;
        assert!((report.per_class_dice[c] - pc).abs() < 1e-12);
    }
    let fg = (report.per_class_dice[1] + report.per_class_dice[2]) / 2.0;
    assert!((report.group_means["foreground"] - fg).abs() < 1e-12);
}

#[test]
fn report_files_round_trip_the_rows() {
    let net = SegNet::new(
        SegNetConfig { spatial_rank: 2, depth: 1, width: 2, classes: 2, kernel: 3 },
        3,
    );
    let images = eval_images(2, 8, 2, 11);
    let report = eval_segmentation(&net, &images, &default_groups(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &report).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(json["per_image"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("per_image.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "id,dice_class_0,dice_class_1,mean");
    // means in the CSV re-derive the report mean
    let mut total = 0.0;
    for line in &lines[1..] {
        total += line.rsplit(',').next().unwrap().parse::<f64>().unwrap();
    }
    assert!((total / 2.0 - report.mean_dice).abs() < 1e-9);
}

#[test]
fn pgm_render_scales_to_full_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.pgm");
    render_slice(&[0.25, 0.5, 0.5, 0.75], &[2, 2], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut tokens = text.split_whitespace();
    assert_eq!(tokens.next(), Some("P2"));
    assert_eq!(tokens.next(), Some("2"));
    assert_eq!(tokens.next(), Some("2"));
    assert_eq!(tokens.next(), Some("255"));
    let pixels: Vec<u32> = tokens.map(|t| t.parse().unwrap()).collect();
    assert_eq!(pixels, vec![0, 128, 128, 255]);
}

#[test]
fn pgm_render_takes_middle_slice_of_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vol.pgm");
    let mut values = vec![0.0; 3 * 2 * 2];
    values[4..8].copy_from_slice(&[0.0, 1.0, 2.0, 3.0]); // slice z=1
    render_slice(&values, &[3, 2, 2], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let pixels: Vec<u32> = text
        .split_whitespace()
        .skip(4)
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(pixels, vec![0, 85, 170, 255]);
}

#[test]
fn label_render_uses_fixed_levels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lab.pgm");
    render_labels(&[0, 1, 2, 3], 4, &[2, 2], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let pixels: Vec<u32> = text
        .split_whitespace()
        .skip(4)
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(pixels, vec![0, 85, 170, 255]);
}
