//! Scalar training objectives: global normalized cross correlation, soft
//! multi-class Dice, bending-energy regularization, the weighted registration
//! objective, and the four-case semi-supervised segmentation objective.

use crate::imageops::{self, DisplacementField, Interp};
use crate::tensor::{Reduce, Result, Tensor, TensorError};

/// K-channel per-voxel class probabilities `[N, K, spatial...]`, e.g. the
/// softmax output of the segmentation network or a one-hot encoded label map.
pub type ProbSegmentation = Tensor;

pub const DICE_EPS: f64 = 1e-6;
pub const NCC_EPS: f64 = 1e-10;

/// Nonnegative weights for the anatomy, regularization and supervised terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub lambda_sp: f64,
}

impl LossWeights {
    pub fn new(lambda_r: f64, lambda_a: f64, lambda_sp: f64) -> Result<LossWeights> {
        for v in [lambda_r, lambda_a, lambda_sp] {
            if !(v >= 0.0) {
                return Err(TensorError::NumericDomain {
                    op: "loss_weights",
                    value: v,
                });
            }
        }
        Ok(LossWeights { lambda_r, lambda_a, lambda_sp })
    }
}

impl Default for LossWeights {
    /// Knee-experiment defaults from approximate hyper-parameter tuning.
    fn default() -> Self {
        LossWeights { lambda_r: 20_000.0, lambda_a: 3.0, lambda_sp: 3.0 }
    }
}

/// Which members of a moving/target pair carry manual segmentations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLabeling {
    pub moving_labeled: bool,
    pub target_labeled: bool,
}

impl PairLabeling {
    pub fn both_unlabeled(&self) -> bool {
        !self.moving_labeled && !self.target_labeled
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceVariant {
    /// Factor-2 numerator; perfect overlap scores 0.
    Conventional,
    /// The printed formula without the factor 2; perfect hard overlap
    /// scores 1/2 per class.
    AsPrinted,
}

fn non_batch_axes(rank: usize) -> Vec<usize> {
    (1..rank).collect()
}

/// 1 - NCC(warped, target), computed globally over all voxels per image and
/// averaged over the batch. Lies in [0, 2] up to the stabilizing epsilon.
/// A near-constant image makes NCC ill-defined; the epsilon keeps it finite
/// and the case is reported on stderr.
pub fn ncc_loss(warped: &Tensor, target: &Tensor) -> Result<Tensor> {
    if warped.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "ncc_loss",
            lhs: warped.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let axes = non_batch_axes(warped.shape().len());
    let a = warped.sub(&warped.reduce(Reduce::Mean, Some(&axes), true)?)?;
    let b = target.sub(&target.reduce(Reduce::Mean, Some(&axes), true)?)?;
    let num = a.mul(&b)?.reduce(Reduce::Sum, Some(&axes), false)?;
    let va = a.square().reduce(Reduce::Sum, Some(&axes), false)?;
    let vb = b.square().reduce(Reduce::Sum, Some(&axes), false)?;
    if va.data().iter().chain(vb.data()).any(|&v| v < 1e-12) {
        eprintln!("warning: ncc_loss on a (near-)constant image; correlation is ill-defined");
    }
    let den = va.mul(&vb)?.add_scalar(NCC_EPS).sqrt()?;
    let ncc = num.div(&den)?;
    Ok(ncc.neg().add_scalar(1.0).mean_all())
}

/// Soft multi-class Dice loss between two probabilistic segmentations
/// `[N, K, spatial...]`: per-class overlap terms over all voxels, averaged
/// over classes and then over the batch.
pub fn soft_dice_loss(
    s: &ProbSegmentation,
    s_star: &ProbSegmentation,
    variant: DiceVariant,
) -> Result<Tensor> {
    if s.shape() != s_star.shape() || s.shape().len() < 3 {
        return Err(TensorError::ShapeMismatch {
            op: "soft_dice_loss",
            lhs: s.shape().to_vec(),
            rhs: s_star.shape().to_vec(),
        });
    }
    let spatial_axes: Vec<usize> = (2..s.shape().len()).collect();
    let inter = s.mul(s_star)?.reduce(Reduce::Sum, Some(&spatial_axes), false)?;
    let sa = s.reduce(Reduce::Sum, Some(&spatial_axes), false)?;
    let sb = s_star.reduce(Reduce::Sum, Some(&spatial_axes), false)?;
    let factor = match variant {
        DiceVariant::Conventional => 2.0,
        DiceVariant::AsPrinted => 1.0,
    };
    let term = inter
        .mul_scalar(factor)
        .add_scalar(DICE_EPS)
        .div(&sa.add(&sb)?.add_scalar(DICE_EPS))?;
    // [N, K] -> mean over classes, then over batch
    Ok(term
        .reduce(Reduce::Mean, Some(&[1]), false)?
        .neg()
        .add_scalar(1.0)
        .mean_all())
}

/// Mean squared Frobenius norm of the displacement components' Hessians over
/// the interior voxels, in normalized [-1, 1] coordinates.
pub fn bending_energy(field: &DisplacementField) -> Result<Tensor> {
    let d = field.spatial_rank();
    let spatial = field.spatial_shape().to_vec();
    let interior: usize = spatial.iter().map(|&e| e - 2).product();
    let mut total: Option<Tensor> = None;
    for comp in 0..d {
        let ui = field.tensor().narrow(1, comp, 1)?;
        for p in 0..d {
            for q in p..d {
                let entry = imageops::hessian_entry(&ui, &spatial, p, q)?;
                // off-diagonal entries appear twice in the Frobenius norm
                let weight = if p == q { 1.0 } else { 2.0 };
                let sq = entry.square().sum_all().mul_scalar(weight);
                total = Some(match total {
                    Some(t) => t.add(&sq)?,
                    None => sq,
                });
            }
        }
    }
    let batch = field.batch();
    Ok(total
        .expect("at least one Hessian entry")
        .mul_scalar(1.0 / (batch as f64 * interior as f64)))
}

/// Component values of an assembled objective, for step reports.
#[derive(Clone, Debug)]
pub struct ObjectiveParts {
    pub total: Tensor,
    pub l_i: Option<f64>,
    pub l_r: Option<f64>,
    pub l_a: Option<f64>,
    pub l_sp: Option<f64>,
}

/// Weakly supervised registration objective:
/// `L_i(I_m ∘ Φ⁻¹, I_t) + λ_r L_r(Φ⁻¹) + λ_a L_a(S_m ∘ Φ⁻¹, S_t)`.
///
/// The anatomy term is included only when both segmentations are supplied
/// (manual, or predicted by the fixed segmentation network and detached).
pub fn registration_objective(
    moving: &Tensor,
    target: &Tensor,
    moving_seg: Option<&ProbSegmentation>,
    target_seg: Option<&ProbSegmentation>,
    field: &DisplacementField,
    weights: &LossWeights,
    variant: DiceVariant,
) -> Result<ObjectiveParts> {
    let warped = imageops::warp(moving, field, Interp::Linear)?;
    let l_i = ncc_loss(&warped, target)?;
    let l_r = bending_energy(field)?;
    let mut total = l_i.add(&l_r.mul_scalar(weights.lambda_r))?;
    let mut l_a_val = None;
    if let (Some(sm), Some(st)) = (moving_seg, target_seg) {
        let warped_seg = imageops::warp(sm, field, Interp::Linear)?;
        let l_a = soft_dice_loss(&warped_seg, st, variant)?;
        l_a_val = Some(l_a.item());
        total = total.add(&l_a.mul_scalar(weights.lambda_a))?;
    }
    Ok(ObjectiveParts {
        l_i: Some(l_i.item()),
        l_r: Some(l_r.item()),
        l_a: l_a_val,
        l_sp: None,
        total,
    })
}

/// Everything the four-case segmentation objective needs for one pair.
///
/// `pred_*` are live segmentation-network outputs (tracked on the tape);
/// `manual_*` are constant one-hot manual maps, present per the labeling.
/// The field is treated as a constant: pass it detached.
pub struct SegmentationPair<'a> {
    pub manual_moving: Option<&'a ProbSegmentation>,
    pub manual_target: Option<&'a ProbSegmentation>,
    pub pred_moving: &'a ProbSegmentation,
    pub pred_target: &'a ProbSegmentation,
}

/// Semi-supervised segmentation objective L_seg with its four cases:
///
/// - target unlabeled: `λ_a L_a(S_m ∘ Φ⁻¹, F_S(I_t)) + λ_sp L_sp(F_S(I_m), S_m)`
/// - moving unlabeled: `λ_a L_a(F_S(I_m) ∘ Φ⁻¹, S_t) + λ_sp L_sp(F_S(I_t), S_t)`
/// - both labeled:     `λ_a L_a(S_m ∘ Φ⁻¹, S_t) + λ_sp L_sp(F_S(I_m), S_m)`,
///   where the anatomy term is built from constants only and therefore does
///   not train the segmentation network
/// - both unlabeled: exactly 0
pub fn segmentation_objective(
    pair: &SegmentationPair<'_>,
    field: &DisplacementField,
    labeling: &PairLabeling,
    weights: &LossWeights,
    variant: DiceVariant,
) -> Result<ObjectiveParts> {
    let (l_a, l_sp) = match (labeling.moving_labeled, labeling.target_labeled) {
        (true, false) => {
            let sm = pair.manual_moving.expect("moving labeled but no manual map");
            let warped = imageops::warp(sm, field, Interp::Linear)?;
            let l_a = soft_dice_loss(&warped, pair.pred_target, variant)?;
            let l_sp = soft_dice_loss(pair.pred_moving, sm, variant)?;
            (Some(l_a), Some(l_sp))
        }
        (false, true) => {
            let st = pair.manual_target.expect("target labeled but no manual map");
            let warped = imageops::warp(pair.pred_moving, field, Interp::Linear)?;
            let l_a = soft_dice_loss(&warped, st, variant)?;
            let l_sp = soft_dice_loss(pair.pred_target, st, variant)?;
            (Some(l_a), Some(l_sp))
        }
        (true, true) => {
            let sm = pair.manual_moving.expect("moving labeled but no manual map");
            let st = pair.manual_target.expect("target labeled but no manual map");
            let warped = imageops::warp(&sm.detach(), field, Interp::Linear)?;
            let l_a = soft_dice_loss(&warped.detach(), &st.detach(), variant)?;
            let l_sp = soft_dice_loss(pair.pred_moving, sm, variant)?;
            (Some(l_a), Some(l_sp))
        }
        (false, false) => (None, None),
    };
    match (l_a, l_sp) {
        (Some(l_a), Some(l_sp)) => {
            let total = l_a
                .mul_scalar(weights.lambda_a)
                .add(&l_sp.mul_scalar(weights.lambda_sp))?;
            Ok(ObjectiveParts {
                l_i: None,
                l_r: None,
                l_a: Some(l_a.item()),
                l_sp: Some(l_sp.item()),
                total,
            })
        }
        _ => Ok(ObjectiveParts {
            l_i: None,
            l_r: None,
            l_a: None,
            l_sp: None,
            total: Tensor::scalar(0.0),
        }),
    }
}

/// One-hot encode hard labels `[N, spatial...]` into `[N, K, spatial...]`.
pub fn one_hot(labels: &[u8], k: usize, batch: usize, spatial: &[usize]) -> Result<Tensor> {
    let n: usize = spatial.iter().product();
    if labels.len() != batch * n {
        return Err(TensorError::ShapeDataMismatch {
            shape: spatial.to_vec(),
            len: labels.len(),
        });
    }
    let mut data = vec![0.0; batch * k * n];
    for b in 0..batch {
        for v in 0..n {
            let class = labels[b * n + v] as usize;
            assert!(class < k, "label {class} out of range for K={k}");
            data[(b * k + class) * n + v] = 1.0;
        }
    }
    let mut shape = vec![batch, k];
    shape.extend_from_slice(spatial);
    Tensor::constant(data, &shape)
}

#[cfg(test)]
mod tests;
