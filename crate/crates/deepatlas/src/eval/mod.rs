//! Measurement: hard Dice of predicted vs manual segmentations, Dice of
//! warped moving segmentations vs target segmentations, folding diagnostics,
//! and report/visualization emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::data::EvalImage;
use crate::imageops::{jacobian_determinant, warp, Interp};
use crate::nets::{RegNet, SegNet};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Per-class Dice (%) between two hard label maps.
/// A class absent from both maps scores 100 (vacuous success).
pub fn hard_dice(pred: &[u8], truth: &[u8], k: usize) -> Vec<f64> {
    let mut pred_count = vec![0usize; k];
    let mut true_count = vec![0usize; k];
    let mut inter = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_count[p as usize] += 1;
        true_count[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    (0..k)
        .map(|c| {
            let denom = pred_count[c] + true_count[c];
            if denom == 0 {
                100.0
            } else {
                200.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect()
}

/// Hard labels by channel argmax; ties go to the lowest class index.
pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let shape = probs.shape();
    let (batch, k) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    let data = probs.data();
    let mut out = Vec::with_capacity(batch * n);
    for b in 0..batch {
        for v in 0..n {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for c in 0..k {
                let val = data[(b * k + c) * n + v];
                if val > best_val {
                    best_val = val;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct PerImage {
    pub id: String,
    /// Per-class Dice, %.
    pub dice: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// Per-class means across images, %.
    pub per_class_dice: Vec<f64>,
    /// Mean of per-image mean Dice, %.
    pub mean_dice: f64,
    /// Population standard deviation of per-image mean Dice.
    pub std_dice: f64,
    /// Named class-group means (e.g. foreground structures).
    pub group_means: BTreeMap<String, f64>,
    /// Fraction of interior voxels with non-positive Jacobian determinant;
    /// registration evaluations only.
    pub folding_fraction: Option<f64>,
    pub metadata: serde_json::Value,
    pub per_image: Vec<PerImage>,
}

/// Class groups for grouped means; defaults to one "foreground" group of
/// every non-background class.
pub fn default_groups(k: usize) -> Vec<(String, Vec<usize>)> {
    vec![("foreground".to_string(), (1..k).collect())]
}

fn assemble_report(
    per_image: Vec<PerImage>,
    k: usize,
    groups: &[(String, Vec<usize>)],
    folding_fraction: Option<f64>,
    metadata: serde_json::Value,
) -> Result<EvalReport> {
    if per_image.is_empty() {
        return Err(EvalError::Invalid("nothing to evaluate".into()));
    }
    let m = per_image.len() as f64;
    let per_class_dice: Vec<f64> = (0..k)
        .map(|c| per_image.iter().map(|p| p.dice[c]).sum::<f64>() / m)
        .collect();
    let mean_dice = per_image.iter().map(|p| p.mean).sum::<f64>() / m;
    let std_dice = (per_image
        .iter()
        .map(|p| (p.mean - mean_dice).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    let mut group_means = BTreeMap::new();
    for (name, classes) in groups {
        if classes.iter().any(|&c| c >= k) {
            return Err(EvalError::Invalid(format!(
                "group {name} references a class >= {k}"
            )));
        }
        if !classes.is_empty() {
            let mean = classes.iter().map(|&c| per_class_dice[c]).sum::<f64>()
                / classes.len() as f64;
            group_means.insert(name.clone(), mean);
        }
    }
    Ok(EvalReport {
        per_class_dice,
        mean_dice,
        std_dice,
        group_means,
        folding_fraction,
        metadata,
        per_image,
    })
}

pub fn eval_segmentation(
    net: &SegNet,
    images: &[EvalImage],
    groups: &[(String, Vec<usize>)],
) -> Result<EvalReport> {
    let k = net.config.classes;
    let mut per_image = Vec::with_capacity(images.len());
    for image in images {
        let (probs, _) = net.forward(&image.intensity, false)?;
        let dice = hard_dice(&argmax_labels(&probs), &image.labels, k);
        let mean = dice.iter().sum::<f64>() / k as f64;
        per_image.push(PerImage { id: image.id.clone(), dice, mean });
    }
    assemble_report(
        per_image,
        k,
        groups,
        None,
        serde_json::json!({"mode": "seg", "images": images.len()}),
    )
}

/// Warp hard moving labels by the predicted field (nearest interpolation)
/// and score against target labels, over all ordered distinct pairs.
pub fn eval_registration(
    net: &RegNet,
    images: &[EvalImage],
    k: usize,
    groups: &[(String, Vec<usize>)],
) -> Result<EvalReport> {
    let mut per_image = Vec::new();
    let mut folded = 0usize;
    let mut interior_total = 0usize;
    for moving in images {
        for target in images {
            if moving.index == target.index {
                continue;
            }
            let (field, _) = net.forward(&moving.intensity, &target.intensity, false)?;
            let labels_t = Tensor::constant(
                moving.labels.iter().map(|&l| l as f64).collect(),
                moving.intensity.shape(),
            )?;
            let warped = warp(&labels_t, &field, Interp::Nearest)?;
            let warped_labels: Vec<u8> =
                warped.data().iter().map(|&v| v.round() as u8).collect();
            let dice = hard_dice(&warped_labels, &target.labels, k);
            let mean = dice.iter().sum::<f64>() / k as f64;
            per_image.push(PerImage {
                id: format!("{}->{}", moving.id, target.id),
                dice,
                mean,
            });
            let det = jacobian_determinant(&field)?;
            folded += det.data().iter().filter(|&&v| v <= 0.0).count();
            interior_total += det.numel();
        }
    }
    let folding = if interior_total == 0 {
        0.0
    } else {
        folded as f64 / interior_total as f64
    };
    assemble_report(
        per_image,
        k,
        groups,
        Some(folding),
        serde_json::json!({"mode": "reg", "images": images.len()}),
    )
}

/// `report.json` + `per_image.csv` under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join("report.json"))?;
    serde_json::to_writer_pretty(file, report)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("per_image.csv"))?);
    let k = report.per_class_dice.len();
    write!(csv, "id")?;
    for c in 0..k {
        write!(csv, ",dice_class_{c}")?;
    }
    writeln!(csv, ",mean")?;
    for row in &report.per_image {
        write!(csv, "{}", row.id)?;
        for v in &row.dice {
            write!(csv, ",{v}")?;
        }
        writeln!(csv, ",{}", row.mean)?;
    }
    csv.flush()?;
    Ok(())
}

fn middle_slice<'a>(values: &'a [f64], spatial: &[usize]) -> (Vec<f64>, usize, usize) {
    match spatial.len() {
        2 => (values.to_vec(), spatial[0], spatial[1]),
        3 => {
            let (h, w) = (spatial[1], spatial[2]);
            let z = spatial[0] / 2;
            (values[z * h * w..(z + 1) * h * w].to_vec(), h, w)
        }
        _ => panic!("render expects rank 2 or 3"),
    }
}

/// Plain PGM (P2), min-max scaled to 0..255. 3-D tensors render their
/// middle slice along the first axis.
pub fn render_slice(values: &[f64], spatial: &[usize], path: &Path) -> Result<()> {
    let (slice, h, w) = middle_slice(values, spatial);
    let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    write_pgm(path, h, w, slice.iter().map(|&v| ((v - lo) * scale).round() as u32))
}

/// Label maps use fixed per-class gray levels so renders are comparable.
pub fn render_labels(labels: &[u8], k: usize, spatial: &[usize], path: &Path) -> Result<()> {
    let values: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let (slice, h, w) = middle_slice(&values, spatial);
    let step = 255.0 / (k.max(2) - 1) as f64;
    write_pgm(path, h, w, slice.iter().map(|&v| (v * step).round() as u32))
}

fn write_pgm(
    path: &Path,
    h: usize,
    w: usize,
    pixels: impl Iterator<Item = u32>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "P2\n{w} {h}\n255")?;
    let mut col = 0;
    for p in pixels {
        if col > 0 {
            write!(out, " ")?;
        }
        write!(out, "{}", p.min(255))?;
        col += 1;
        if col == w {
            writeln!(out)?;
            col = 0;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
