//! Optimizers, pair sampling, and the training protocols: Mono (networks
//! trained separately), Semi-DA (one network frozen), and DA (alternating
//! joint training), including the automated one-shot bootstrap ladder.

use std::io::Write;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EvalImage, SplitView, TrainImage};
use crate::eval::{self, EvalError};
use crate::imageops::{warp, DisplacementField, Interp};
use crate::losses::{
    one_hot, registration_objective, segmentation_objective, DiceVariant, LossWeights,
    PairLabeling, SegmentationPair,
};
use crate::nets::{BoundParams, ParamSet, RegNet, RegNetConfig, SegNet, SegNetConfig};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} ({phase})")]
    NonFinite { step: usize, phase: &'static str },
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("eval error: {0}")]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Registration steps per alternation block (the "20" of the 1:20 ratio).
pub const REG_BLOCK: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    MonoSeg,
    MonoReg,
    SemiDaSeg,
    SemiDaReg,
    Da,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub protocol: Protocol,
    pub weights: LossWeights,
    pub dice_variant: DiceVariant,
    /// Segmentation steps appended to each block of [`REG_BLOCK`]
    /// registration steps during alternation; 1 encodes the 1:20 ratio.
    pub alt_ratio: usize,
    pub epochs: usize,
    /// Update steps per epoch; 0 means "one per training image".
    pub steps_per_epoch: usize,
    /// Pairs (or images) averaged per update step.
    pub batch_size: usize,
    pub lr_seg: f64,
    pub lr_reg: f64,
    /// Multiplied into the learning rates at each epoch in `decay_epochs`.
    pub lr_decay: f64,
    /// 1-based epoch indices.
    pub decay_epochs: Vec<usize>,
    /// Plateau window (in validation evaluations) for the one-shot gate.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Paper-style defaults: 1e-3 for mono training, 5e-4 (reg) / 1e-4 (seg)
    /// for joint training, decay factor 0.2.
    pub fn defaults(protocol: Protocol) -> TrainConfig {
        let (lr_seg, lr_reg) = match protocol {
            Protocol::Da => (1e-4, 5e-4),
            _ => (1e-3, 1e-3),
        };
        TrainConfig {
            protocol,
            weights: LossWeights::default(),
            dice_variant: DiceVariant::Conventional,
            alt_ratio: 1,
            epochs: 10,
            steps_per_epoch: 0,
            batch_size: 1,
            lr_seg,
            lr_reg,
            lr_decay: 0.2,
            decay_epochs: Vec::new(),
            patience: 5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alt_ratio < 1 {
            return Err(TrainError::Config("alt_ratio must be >= 1".into()));
        }
        if self.lr_seg <= 0.0 || self.lr_reg <= 0.0 {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Config("lr_decay must lie in (0, 1]".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Standard Adam, β = (0.9, 0.999), ε = 1e-8.
pub struct Adam {
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Adam {
        let m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam { lr, t: 0, m, v }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..grads.len() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = &mut params.get_mut(i).data;
            for (j, &g) in grads[i].iter().enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Uniform over ordered distinct pairs; segmentation steps reject pairs
/// where neither member carries a manual label.
pub fn sample_pair(
    train: &[TrainImage],
    rng: &mut ChaCha8Rng,
    for_segmentation: bool,
) -> Result<(usize, usize)> {
    if train.len() < 2 {
        return Err(TrainError::Config("need at least 2 training images to pair".into()));
    }
    if for_segmentation && !train.iter().any(|t| t.is_labeled()) {
        return Err(TrainError::Config(
            "segmentation steps need at least one labeled training image".into(),
        ));
    }
    loop {
        let a = rng.gen_range(0..train.len());
        let b = rng.gen_range(0..train.len());
        if a == b {
            continue;
        }
        if for_segmentation && !train[a].is_labeled() && !train[b].is_labeled() {
            continue;
        }
        return Ok((a, b));
    }
}

/// Component losses of one update step.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub l_i: Option<f64>,
    pub l_r: Option<f64>,
    pub l_a: Option<f64>,
    pub l_sp: Option<f64>,
    pub total: f64,
}

fn manual_one_hot(image: &TrainImage, classes: usize) -> Option<Tensor> {
    image.manual_labels().map(|guard| {
        let spatial = &image.intensity.shape()[2..];
        one_hot(guard.read(), classes, 1, spatial).expect("label map matches image")
    })
}

fn sum_grads(params: &ParamSet, bounds: &[BoundParams]) -> Vec<Vec<f64>> {
    let mut acc: Vec<Vec<f64>> =
        params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    for bound in bounds {
        for (slot, grad) in acc.iter_mut().zip(params.grads(bound)) {
            for (s, g) in slot.iter_mut().zip(grad) {
                *s += g;
            }
        }
    }
    acc
}

fn merge_reports(parts: &[StepReport]) -> StepReport {
    let n = parts.len() as f64;
    let avg = |f: fn(&StepReport) -> Option<f64>| {
        let vals: Vec<f64> = parts.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / n)
    };
    StepReport {
        l_i: avg(|p| p.l_i),
        l_r: avg(|p| p.l_r),
        l_a: avg(|p| p.l_a),
        l_sp: avg(|p| p.l_sp),
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
    }
}

/// One Adam update on θ_r. Missing segmentations are estimated by the
/// frozen segmentation network when one is supplied (DA / Semi-DA);
/// otherwise the anatomy loss applies only to fully labeled pairs (Mono).
pub fn train_registration_step(
    reg: &mut RegNet,
    seg: Option<&SegNet>,
    pairs: &[(&TrainImage, &TrainImage)],
    classes: usize,
    weights: &LossWeights,
    variant: DiceVariant,
    opt: &mut Adam,
) -> Result<StepReport> {
    let mut totals = Vec::with_capacity(pairs.len());
    let mut reports = Vec::with_capacity(pairs.len());
    let mut bounds = Vec::with_capacity(pairs.len());
    for &(moving, target) in pairs {
        let (field, bound) = reg.forward(&moving.intensity, &target.intensity, true)?;
        let estimate = |image: &TrainImage| -> Result<Option<Tensor>> {
            match (manual_one_hot(image, classes), seg) {
                (Some(manual), _) => Ok(Some(manual)),
                (None, Some(net)) => {
                    Ok(Some(net.forward(&image.intensity, false)?.0.detach()))
                }
                (None, None) => Ok(None),
            }
        };
        let (seg_m, seg_t) = match (estimate(moving)?, estimate(target)?) {
            (Some(m), Some(t)) => (Some(m), Some(t)),
            _ => (None, None),
        };
        let parts = registration_objective(
            &moving.intensity,
            &target.intensity,
            seg_m.as_ref(),
            seg_t.as_ref(),
            &field,
            weights,
            variant,
        )?;
        reports.push(StepReport {
            l_i: parts.l_i,
            l_r: parts.l_r,
            l_a: parts.l_a,
            l_sp: None,
            total: parts.total.item(),
        });
        totals.push(parts.total);
        bounds.push(bound);
    }
    let mean = mean_total(&totals)?;
    mean.backward()?;
    let grads = sum_grads(&reg.params, &bounds);
    opt.step(&mut reg.params, &grads);
    Ok(merge_reports(&reports))
}

fn mean_total(totals: &[Tensor]) -> Result<Tensor> {
    let mut sum = totals[0].clone();
    for t in &totals[1..] {
        sum = sum.add(t)?;
    }
    Ok(sum.mul_scalar(1.0 / totals.len() as f64))
}

fn zero_field_like(image: &TrainImage) -> DisplacementField {
    let spatial = &image.intensity.shape()[2..];
    let mut shape = vec![1, spatial.len()];
    shape.extend_from_slice(spatial);
    DisplacementField::new(Tensor::zeros(&shape)).expect("zero field is valid")
}

/// One Adam update on θ_s via the four-case objective, with the field from
/// the frozen registration network treated as a constant. Without a
/// registration network (Mono) the field is zero and callers set λ_a = 0,
/// leaving the purely supervised objective λ_sp · L_sp.
pub fn train_segmentation_step(
    seg: &mut SegNet,
    reg: Option<&RegNet>,
    pairs: &[(&TrainImage, &TrainImage)],
    classes: usize,
    weights: &LossWeights,
    variant: DiceVariant,
    opt: &mut Adam,
) -> Result<StepReport> {
    let mut totals = Vec::with_capacity(pairs.len());
    let mut reports = Vec::with_capacity(pairs.len());
    let mut bounds = Vec::with_capacity(2 * pairs.len());
    for &(moving, target) in pairs {
        let field = match reg {
            Some(net) => net
                .forward(&moving.intensity, &target.intensity, false)?
                .0,
            None => zero_field_like(moving),
        };
        let (pred_m, bound_m) = seg.forward(&moving.intensity, true)?;
        let (pred_t, bound_t) = seg.forward(&target.intensity, true)?;
        let manual_m = manual_one_hot(moving, classes);
        let manual_t = manual_one_hot(target, classes);
        let labeling = PairLabeling {
            moving_labeled: manual_m.is_some(),
            target_labeled: manual_t.is_some(),
        };
        let pair = SegmentationPair {
            manual_moving: manual_m.as_ref(),
            manual_target: manual_t.as_ref(),
            pred_moving: &pred_m,
            pred_target: &pred_t,
        };
        let parts = segmentation_objective(&pair, &field, &labeling, weights, variant)?;
        reports.push(StepReport {
            l_i: None,
            l_r: None,
            l_a: parts.l_a,
            l_sp: parts.l_sp,
            total: parts.total.item(),
        });
        totals.push(parts.total);
        bounds.push(bound_m);
        bounds.push(bound_t);
    }
    let mean = mean_total(&totals)?;
    mean.backward()?;
    let grads = sum_grads(&seg.params, &bounds);
    opt.step(&mut seg.params, &grads);
    Ok(merge_reports(&reports))
}

/// One JSON object per line of the metric log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// "reg", "seg", "val_seg", or "val_reg".
    pub phase: String,
    pub l_i: Option<f64>,
    pub l_r: Option<f64>,
    pub l_a: Option<f64>,
    pub l_sp: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

pub struct ProtocolOutcome {
    pub seg: Option<SegNet>,
    pub reg: Option<RegNet>,
    /// Best-on-validation parameter snapshots (same network configs).
    pub best_seg: Option<ParamSet>,
    pub best_reg: Option<ParamSet>,
    pub best_val_dice: Option<f64>,
    pub records: Vec<StepRecord>,
}

pub struct ProtocolArgs<'a> {
    pub config: &'a TrainConfig,
    pub seg_config: SegNetConfig,
    pub reg_config: RegNetConfig,
    pub view: &'a SplitView,
    pub pretrained_seg: Option<SegNet>,
    pub pretrained_reg: Option<RegNet>,
}

struct Runner<'a> {
    config: &'a TrainConfig,
    view: &'a SplitView,
    rng: ChaCha8Rng,
    records: Vec<StepRecord>,
    log: &'a mut dyn Write,
    start: Instant,
    step: usize,
    epoch: usize,
}

impl<'a> Runner<'a> {
    fn record(
        &mut self,
        phase: &str,
        report: StepReport,
        lr: f64,
    ) -> Result<()> {
        let rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            phase: phase.to_string(),
            l_i: report.l_i,
            l_r: report.l_r,
            l_a: report.l_a,
            l_sp: report.l_sp,
            total: report.total,
            lr,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        if !rec.total.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                phase: if phase.starts_with("reg") { "reg" } else { "seg" },
            });
        }
        serde_json::to_writer(&mut *self.log, &rec)
            .map_err(|e| TrainError::Io(e.into()))?;
        writeln!(self.log)?;
        self.records.push(rec);
        Ok(())
    }

    fn steps_per_epoch(&self) -> usize {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch
        } else {
            self.view.train.len()
        }
    }

    fn batch(&mut self, for_segmentation: bool) -> Result<Vec<(usize, usize)>> {
        (0..self.config.batch_size)
            .map(|_| sample_pair(&self.view.train, &mut self.rng, for_segmentation))
            .collect()
    }

    fn maybe_decay(&mut self, opts: &mut [&mut Adam]) {
        if self.config.decay_epochs.contains(&self.epoch) {
            for opt in opts {
                opt.decay(self.config.lr_decay);
            }
        }
    }

    fn val_seg_dice(&mut self, seg: &SegNet) -> Result<f64> {
        let report =
            eval::eval_segmentation(seg, &self.view.val, &eval::default_groups(self.view.classes))?;
        let dice = report.mean_dice;
        let eval_report = StepReport {
            l_i: None,
            l_r: None,
            l_a: None,
            l_sp: None,
            total: dice,
        };
        self.record("val_seg", eval_report, 0.0)?;
        Ok(dice)
    }

    /// Mean warped-label Dice on consecutive validation pairs — a cheap
    /// per-epoch registration score for checkpoint selection.
    fn val_reg_dice(&mut self, reg: &RegNet) -> Result<f64> {
        let images = &self.view.val;
        let k = self.view.classes;
        let mut total = 0.0;
        for i in 0..images.len() {
            let moving = &images[i];
            let target = &images[(i + 1) % images.len()];
            total += pair_reg_dice(reg, moving, target, k)?;
        }
        let dice = total / images.len() as f64;
        let report = StepReport { l_i: None, l_r: None, l_a: None, l_sp: None, total: dice };
        self.record("val_reg", report, 0.0)?;
        Ok(dice)
    }
}

fn pair_reg_dice(
    reg: &RegNet,
    moving: &EvalImage,
    target: &EvalImage,
    k: usize,
) -> Result<f64> {
    let (field, _) = reg.forward(&moving.intensity, &target.intensity, false)?;
    let labels_t = Tensor::constant(
        moving.labels.iter().map(|&l| l as f64).collect(),
        moving.intensity.shape(),
    )?;
    let warped = warp(&labels_t, &field, Interp::Nearest)?;
    let warped_labels: Vec<u8> = warped.data().iter().map(|&v| v.round() as u8).collect();
    let dice = eval::hard_dice(&warped_labels, &target.labels, k);
    Ok(dice.iter().sum::<f64>() / k as f64)
}

struct Best {
    dice: f64,
    params: ParamSet,
}

fn update_best(best: &mut Option<Best>, dice: f64, params: &ParamSet) -> bool {
    let improved = best.as_ref().map_or(true, |b| dice > b.dice);
    if improved {
        *best = Some(Best { dice, params: params.clone() });
    }
    improved
}

pub fn run_protocol(args: ProtocolArgs<'_>, log: &mut dyn Write) -> Result<ProtocolOutcome> {
    let config = args.config;
    config.validate()?;
    let view = args.view;
    if view.val.is_empty() {
        return Err(TrainError::Config("validation split is empty".into()));
    }
    let n_labeled = view.train.iter().filter(|t| t.is_labeled()).count();
    let classes = view.classes;
    let mut runner = Runner {
        config,
        view,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        records: Vec::new(),
        log,
        start: Instant::now(),
        step: 0,
        epoch: 0,
    };

    match config.protocol {
        Protocol::MonoSeg => {
            if n_labeled == 0 {
                return Err(TrainError::Config(
                    "mono_seg needs at least one labeled image".into(),
                ));
            }
            let mut seg = args
                .pretrained_seg
                .unwrap_or_else(|| SegNet::new(args.seg_config, config.seed));
            // purely supervised: zero field, anatomy term off
            let weights = LossWeights::new(0.0, 0.0, config.weights.lambda_sp)
                .expect("nonnegative weights");
            let mut opt = Adam::new(&seg.params, config.lr_seg);
            let mut best = None;
            for _ in 0..config.epochs {
                runner.epoch += 1;
                runner.maybe_decay(&mut [&mut opt]);
                for _ in 0..runner.steps_per_epoch() {
                    runner.step += 1;
                    let idx = runner.batch(true)?;
                    let pairs: Vec<_> = idx
                        .iter()
                        .map(|&(a, b)| (&view.train[a], &view.train[b]))
                        .collect();
                    let report = train_segmentation_step(
                        &mut seg,
                        None,
                        &pairs,
                        classes,
                        &weights,
                        config.dice_variant,
                        &mut opt,
                    )?;
                    let lr = opt.lr();
                    runner.record("seg", report, lr)?;
                }
                let dice = runner.val_seg_dice(&seg)?;
                update_best(&mut best, dice, &seg.params);
            }
            finish(runner, Some(seg), None, best, None)
        }
        Protocol::MonoReg => {
            let mut reg = args
                .pretrained_reg
                .unwrap_or_else(|| RegNet::new(args.reg_config, config.seed.wrapping_add(1)));
            let mut opt = Adam::new(&reg.params, config.lr_reg);
            let mut best = None;
            for _ in 0..config.epochs {
                runner.epoch += 1;
                runner.maybe_decay(&mut [&mut opt]);
                for _ in 0..runner.steps_per_epoch() {
                    runner.step += 1;
                    let idx = runner.batch(false)?;
                    let pairs: Vec<_> = idx
                        .iter()
                        .map(|&(a, b)| (&view.train[a], &view.train[b]))
                        .collect();
                    let report = train_registration_step(
                        &mut reg,
                        None,
                        &pairs,
                        classes,
                        &config.weights,
                        config.dice_variant,
                        &mut opt,
                    )?;
                    let lr = opt.lr();
                    runner.record("reg", report, lr)?;
                }
                let dice = runner.val_reg_dice(&reg)?;
                update_best(&mut best, dice, &reg.params);
            }
            finish(runner, None, Some(reg), None, best)
        }
        Protocol::SemiDaSeg => {
            let frozen_reg = args.pretrained_reg.ok_or_else(|| {
                TrainError::Config("semi_da_seg needs a pretrained registration network".into())
            })?;
            let mut seg = args
                .pretrained_seg
                .unwrap_or_else(|| SegNet::new(args.seg_config, config.seed));
            let mut opt = Adam::new(&seg.params, config.lr_seg);
            let mut best = None;
            for _ in 0..config.epochs {
                runner.epoch += 1;
                runner.maybe_decay(&mut [&mut opt]);
                seg_epoch(&mut runner, &mut seg, Some(&frozen_reg), classes, &mut opt)?;
                let dice = runner.val_seg_dice(&seg)?;
                update_best(&mut best, dice, &seg.params);
            }
            finish(runner, Some(seg), Some(frozen_reg), best, None)
        }
        Protocol::SemiDaReg => {
            let frozen_seg = args.pretrained_seg.ok_or_else(|| {
                TrainError::Config("semi_da_reg needs a pretrained segmentation network".into())
            })?;
            let mut reg = args
                .pretrained_reg
                .unwrap_or_else(|| RegNet::new(args.reg_config, config.seed.wrapping_add(1)));
            let mut opt = Adam::new(&reg.params, config.lr_reg);
            let mut best = None;
            for _ in 0..config.epochs {
                runner.epoch += 1;
                runner.maybe_decay(&mut [&mut opt]);
                reg_epoch(&mut runner, &mut reg, Some(&frozen_seg), classes, &mut opt)?;
                let dice = runner.val_reg_dice(&reg)?;
                update_best(&mut best, dice, &reg.params);
            }
            finish(runner, Some(frozen_seg), Some(reg), None, best)
        }
        Protocol::Da => {
            if n_labeled == 0 {
                return Err(TrainError::Config("da needs at least one labeled image".into()));
            }
            let one_shot = n_labeled == 1;
            if !one_shot && (args.pretrained_seg.is_none() || args.pretrained_reg.is_none()) {
                return Err(TrainError::Config(
                    "da needs both pretrained networks when more than one image is labeled"
                        .into(),
                ));
            }

            let (mut seg, mut reg) = if one_shot {
                // ladder stage 1: unsupervised registration pretraining
                // (no pair has two manual labels, so L_a never applies)
                let had_pretrained_reg = args.pretrained_reg.is_some();
                let mut reg = args.pretrained_reg.unwrap_or_else(|| {
                    RegNet::new(args.reg_config, config.seed.wrapping_add(1))
                });
                if !had_pretrained_reg {
                    let mut opt = Adam::new(&reg.params, config.lr_reg);
                    for _ in 0..config.epochs {
                        runner.epoch += 1;
                        runner.maybe_decay(&mut [&mut opt]);
                        reg_epoch(&mut runner, &mut reg, None, classes, &mut opt)?;
                        runner.val_reg_dice(&reg)?;
                    }
                }
                // ladder stage 2: segmentation from scratch against the
                // fixed registration network, until validation Dice plateaus
                let mut seg = SegNet::new(args.seg_config, config.seed);
                let mut opt = Adam::new(&seg.params, config.lr_seg);
                let mut best: Option<Best> = None;
                let mut since_improvement = 0usize;
                let cap = config.epochs.max(config.patience * 2);
                for _ in 0..cap {
                    runner.epoch += 1;
                    seg_epoch(&mut runner, &mut seg, Some(&reg), classes, &mut opt)?;
                    let dice = runner.val_seg_dice(&seg)?;
                    if update_best(&mut best, dice, &seg.params) {
                        since_improvement = 0;
                    } else {
                        since_improvement += 1;
                        if since_improvement >= config.patience {
                            break;
                        }
                    }
                }
                if let Some(b) = best {
                    seg.params = b.params;
                }
                (seg, reg)
            } else {
                (args.pretrained_seg.unwrap(), args.pretrained_reg.unwrap())
            };

            // alternation: REG_BLOCK registration steps, then alt_ratio
            // segmentation steps
            let mut opt_seg = Adam::new(&seg.params, config.lr_seg);
            let mut opt_reg = Adam::new(&reg.params, config.lr_reg);
            let mut best_seg = None;
            let mut best_reg = None;
            // Score the handoff networks first: alternation fine-tuning may
            // never beat an already-converged start, and validation selection
            // should then return the start unchanged.
            update_best(&mut best_seg, runner.val_seg_dice(&seg)?, &seg.params);
            update_best(&mut best_reg, runner.val_reg_dice(&reg)?, &reg.params);
            let mut in_block = 0usize; // update index within the current block
            let block = REG_BLOCK + config.alt_ratio;
            let alternation_start = runner.epoch;
            for _ in 0..config.epochs {
                runner.epoch += 1;
                let rel = runner.epoch - alternation_start;
                if config.decay_epochs.contains(&rel) {
                    opt_seg.decay(config.lr_decay);
                    opt_reg.decay(config.lr_decay);
                }
                for _ in 0..runner.steps_per_epoch() {
                    runner.step += 1;
                    let is_seg = in_block >= REG_BLOCK;
                    in_block = (in_block + 1) % block;
                    if is_seg {
                        let idx = runner.batch(true)?;
                        let pairs: Vec<_> = idx
                            .iter()
                            .map(|&(a, b)| (&view.train[a], &view.train[b]))
                            .collect();
                        let report = train_segmentation_step(
                            &mut seg,
                            Some(&reg),
                            &pairs,
                            classes,
                            &config.weights,
                            config.dice_variant,
                            &mut opt_seg,
                        )?;
                        let lr = opt_seg.lr();
                        runner.record("seg", report, lr)?;
                    } else {
                        let idx = runner.batch(false)?;
                        let pairs: Vec<_> = idx
                            .iter()
                            .map(|&(a, b)| (&view.train[a], &view.train[b]))
                            .collect();
                        let report = train_registration_step(
                            &mut reg,
                            Some(&seg),
                            &pairs,
                            classes,
                            &config.weights,
                            config.dice_variant,
                            &mut opt_reg,
                        )?;
                        let lr = opt_reg.lr();
                        runner.record("reg", report, lr)?;
                    }
                }
                let seg_dice = runner.val_seg_dice(&seg)?;
                update_best(&mut best_seg, seg_dice, &seg.params);
                let reg_dice = runner.val_reg_dice(&reg)?;
                update_best(&mut best_reg, reg_dice, &reg.params);
            }
            finish(runner, Some(seg), Some(reg), best_seg, best_reg)
        }
    }
}

fn seg_epoch(
    runner: &mut Runner<'_>,
    seg: &mut SegNet,
    reg: Option<&RegNet>,
    classes: usize,
    opt: &mut Adam,
) -> Result<()> {
    for _ in 0..runner.steps_per_epoch() {
        runner.step += 1;
        let idx = runner.batch(true)?;
        let pairs: Vec<_> = idx
            .iter()
            .map(|&(a, b)| (&runner.view.train[a], &runner.view.train[b]))
            .collect();
        let report = train_segmentation_step(
            seg,
            reg,
            &pairs,
            classes,
            &runner.config.weights,
            runner.config.dice_variant,
            opt,
        )?;
        let lr = opt.lr();
        runner.record("seg", report, lr)?;
    }
    Ok(())
}

fn reg_epoch(
    runner: &mut Runner<'_>,
    reg: &mut RegNet,
    seg: Option<&SegNet>,
    classes: usize,
    opt: &mut Adam,
) -> Result<()> {
    for _ in 0..runner.steps_per_epoch() {
        runner.step += 1;
        let idx = runner.batch(false)?;
        let pairs: Vec<_> = idx
            .iter()
            .map(|&(a, b)| (&runner.view.train[a], &runner.view.train[b]))
            .collect();
        let report = train_registration_step(
            reg,
            seg,
            &pairs,
            classes,
            &runner.config.weights,
            runner.config.dice_variant,
            opt,
        )?;
        let lr = opt.lr();
        runner.record("reg", report, lr)?;
    }
    Ok(())
}

fn finish(
    runner: Runner<'_>,
    seg: Option<SegNet>,
    reg: Option<RegNet>,
    best_seg: Option<Best>,
    best_reg: Option<Best>,
) -> Result<ProtocolOutcome> {
    let best_val_dice = best_seg
        .as_ref()
        .map(|b| b.dice)
        .or_else(|| best_reg.as_ref().map(|b| b.dice));
    Ok(ProtocolOutcome {
        seg,
        reg,
        best_seg: best_seg.map(|b| b.params),
        best_reg: best_reg.map(|b| b.params),
        best_val_dice,
        records: runner.records,
    })
}
