use super::*;

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        spatial_shape: vec![16, 16],
        classes: 4,
        count: 6,
        control_grid: 3,
        max_amplitude: 0.1,
        intensity_noise_sd: 0.01,
        bias_field_amplitude: 0.02,
        seed: 7,
    }
}

/// Hard per-class Dice between two label maps, averaged over classes.
fn hard_dice(a: &[u8], b: &[u8], k: usize) -> f64 {
    let mut total = 0.0;
    for class in 0..k as u8 {
        let na = a.iter().filter(|&&l| l == class).count();
        let nb = b.iter().filter(|&&l| l == class).count();
        let inter = a
            .iter()
            .zip(b)
            .filter(|&(&x, &y)| x == class && y == class)
            .count();
        total += if na + nb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (na + nb) as f64
        };
    }
    total / k as f64
}

#[test]
fn zero_amplitude_reproduces_the_template() {
    let spec = SyntheticSpec {
        max_amplitude: 0.0,
        intensity_noise_sd: 0.0,
        bias_field_amplitude: 0.0,
        ..tiny_spec()
    };
    let (tmpl_int, tmpl_lab) = template(&spec);
    let ds = generate_dataset(&spec).unwrap();
    for im in &ds.images {
        assert_eq!(im.intensity, tmpl_int);
        assert_eq!(im.labels, tmpl_lab);
        assert!(im.field.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = tiny_spec();
    let a = generate_dataset(&spec).unwrap();
    let b = generate_dataset(&spec).unwrap();
    for (x, y) in a.images.iter().zip(&b.images) {
        let xb: Vec<u64> = x.intensity.iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.intensity.iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.field, y.field);
    }
}

#[test]
fn labels_cover_exactly_the_template_classes() {
    let spec = tiny_spec();
    let (_, tmpl_lab) = template(&spec);
    let template_classes: std::collections::BTreeSet<u8> =
        tmpl_lab.iter().copied().collect();
    assert_eq!(template_classes.len(), spec.classes);
    let ds = generate_dataset(&spec).unwrap();
    for im in &ds.images {
        let classes: std::collections::BTreeSet<u8> = im.labels.iter().copied().collect();
        assert_eq!(classes, template_classes, "{}", im.id);
    }
}

#[test]
fn intensities_stay_in_unit_range() {
    let ds = generate_dataset(&tiny_spec()).unwrap();
    for im in &ds.images {
        assert!(im.intensity.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn generating_fields_are_fold_free() {
    let spec = tiny_spec();
    let ds = generate_dataset(&spec).unwrap();
    let d = spec.spatial_shape.len();
    let mut shape = vec![1, d];
    shape.extend_from_slice(&spec.spatial_shape);
    for im in &ds.images {
        let field = DisplacementField::new(
            Tensor::constant(im.field.clone(), &shape).unwrap(),
        )
        .unwrap();
        let det = jacobian_determinant(&field).unwrap();
        let min = det.data().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "{}: min det {min}", im.id);
    }
}

#[test]
fn hopeless_fold_spec_errors_after_retries() {
    let spec = SyntheticSpec {
        max_amplitude: 100.0,
        control_grid: 5,
        ..tiny_spec()
    };
    assert!(matches!(generate_dataset(&spec), Err(DataError::Folded(_))));
}

// Frozen regression for the acceptance generator settings: images differ
// from one another but share most of their anatomy.
#[test]
fn pairwise_ground_truth_dice_band() {
    let spec = SyntheticSpec {
        spatial_shape: vec![64, 64],
        classes: 4,
        count: 8,
        control_grid: 4,
        max_amplitude: 0.15,
        intensity_noise_sd: 0.02,
        bias_field_amplitude: 0.05,
        seed: 0,
    };
    let ds = generate_dataset(&spec).unwrap();
    let mut dices = Vec::new();
    for i in 0..ds.images.len() {
        for j in (i + 1)..ds.images.len() {
            dices.push(hard_dice(&ds.images[i].labels, &ds.images[j].labels, 4));
        }
    }
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    assert!(dices.iter().all(|&d| d < 1.0), "images must differ");
    // measured 0.6885 for this seed; frozen with slack
    assert!((0.60..0.80).contains(&mean), "mean pairwise dice {mean}");
}

#[test]
fn split_partitions_and_masks_deterministically() {
    let spec = SyntheticSpec { count: 60, ..tiny_spec() };
    let mut ds = generate_dataset(&spec).unwrap();
    let info = split(&mut ds, 5, 3).unwrap().clone();
    assert_eq!(info.train.len(), 40);
    assert_eq!(info.val.len(), 8);
    assert_eq!(info.test.len(), 12);
    assert_eq!(info.labeled.len(), 5);
    let mut all: Vec<usize> = info
        .train
        .iter()
        .chain(&info.val)
        .chain(&info.test)
        .copied()
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..60).collect::<Vec<_>>());
    assert!(info.labeled.iter().all(|i| info.train.contains(i)));

    let mut ds2 = generate_dataset(&spec).unwrap();
    assert_eq!(&info, split(&mut ds2, 5, 3).unwrap());

    let view = ds.view().unwrap();
    assert_eq!(view.train.iter().filter(|t| t.is_labeled()).count(), 5);
    for t in &view.train {
        assert_eq!(t.manual_labels().is_some(), t.is_labeled());
    }
    // val/test always carry labels for measurement
    assert!(view.val.iter().all(|e| e.labels.len() == 16 * 16));
    assert!(view.test.iter().all(|e| e.labels.len() == 16 * 16));
}

#[test]
fn split_rejects_oversized_label_request() {
    let spec = SyntheticSpec { count: 60, ..tiny_spec() };
    let mut ds = generate_dataset(&spec).unwrap();
    assert!(split(&mut ds, 41, 0).is_err());
}

#[test]
fn label_guard_counts_reads() {
    let guard = LabelGuard::new(vec![1, 2, 3]);
    assert_eq!(guard.read_count(), 0);
    assert_eq!(guard.read(), &[1, 2, 3]);
    let alias = guard.clone();
    alias.read();
    assert_eq!(guard.read_count(), 2);
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let spec = SyntheticSpec { count: 15, ..tiny_spec() };
    let mut ds = generate_dataset(&spec).unwrap();
    split(&mut ds, 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.spec, ds.spec);
    assert_eq!(back.split, ds.split);
    for (a, b) in ds.images.iter().zip(&back.images) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.labels, b.labels);
        let ab: Vec<u64> = a.intensity.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.intensity.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
        let af: Vec<u64> = a.field.iter().map(|v| v.to_bits()).collect();
        let bf: Vec<u64> = b.field.iter().map(|v| v.to_bits()).collect();
        assert_eq!(af, bf);
    }
}

#[test]
fn view_without_split_is_an_error() {
    let ds = generate_dataset(&tiny_spec()).unwrap();
    assert!(matches!(ds.view(), Err(DataError::MissingSplit)));
}
