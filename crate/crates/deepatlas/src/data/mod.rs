//! Synthetic labeled-atlas data: a fixed template of nested structures,
//! deformed by random smooth fold-free fields, plus persistence and
//! labeled/unlabeled split management.

use std::cell::Cell;
use std::path::Path;
use std::rc::Rc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imageops::{jacobian_determinant, warp, DisplacementField, Interp};
use crate::io::{self, IoError, NpyArray};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("deformation kept folding after {0} retries")]
    Folded(usize),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("dataset has no recorded split")]
    MissingSplit,
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub spatial_shape: Vec<usize>,
    /// Class count K including background.
    pub classes: usize,
    /// Dataset size M.
    pub count: usize,
    /// Control points per axis of the deformation grid.
    pub control_grid: usize,
    /// Max control-point displacement, in normalized coordinates.
    pub max_amplitude: f64,
    pub intensity_noise_sd: f64,
    pub bias_field_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            spatial_shape: vec![64, 64],
            classes: 4,
            count: 60,
            control_grid: 4,
            max_amplitude: 0.15,
            intensity_noise_sd: 0.02,
            bias_field_amplitude: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let d = self.spatial_shape.len();
        if !(d == 2 || d == 3) || self.spatial_shape.iter().any(|&e| e < 3) {
            return Err(DataError::Spec(format!(
                "spatial shape must be rank 2 or 3 with extents >= 3, got {:?}",
                self.spatial_shape
            )));
        }
        if self.classes < 2 {
            return Err(DataError::Spec("need at least 2 classes".into()));
        }
        if self.count < 2 {
            return Err(DataError::Spec("need at least 2 images".into()));
        }
        if self.control_grid < 2 {
            return Err(DataError::Spec("control grid needs >= 2 points per axis".into()));
        }
        if self.max_amplitude < 0.0
            || self.intensity_noise_sd < 0.0
            || self.bias_field_amplitude < 0.0
        {
            return Err(DataError::Spec("amplitudes must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One generated image with its ground truth, as raw C-order buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetImage {
    pub id: String,
    /// `[spatial...]`, values in [0,1].
    pub intensity: Vec<f64>,
    /// `[spatial...]`, values in 0..K-1.
    pub labels: Vec<u8>,
    /// Generating displacement `[d, spatial...]`, normalized coordinates.
    pub field: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub seed: u64,
    pub n_labeled: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Train indices whose labels stay visible to training.
    pub labeled: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub images: Vec<DatasetImage>,
    pub split: Option<SplitInfo>,
}

/// Intensity template plus hard labels: K nested ellipsoidal bands.
pub fn template(spec: &SyntheticSpec) -> (Vec<f64>, Vec<u8>) {
    let spatial = &spec.spatial_shape;
    let k = spec.classes;
    let n: usize = spatial.iter().product();
    let scales = [0.85, 0.7, 0.8]; // per-axis ellipse half-axis factors
    let mut intensity = vec![0.0; n];
    let mut labels = vec![0u8; n];
    let mut idx = vec![0usize; spatial.len()];
    for v in 0..n {
        let mut r2 = 0.0;
        for (ax, &e) in spatial.iter().enumerate() {
            let c = if e > 1 {
                2.0 * idx[ax] as f64 / (e - 1) as f64 - 1.0
            } else {
                0.0
            };
            let s = c / scales[ax % scales.len()];
            r2 += s * s;
        }
        let r = r2.sqrt();
        let mut class = 0usize;
        for j in 1..k {
            let radius = 0.8 * (k - j) as f64 / (k - 1) as f64;
            if r < radius {
                class = j;
            }
        }
        labels[v] = class as u8;
        let band = 0.15 + 0.75 * class as f64 / (k - 1) as f64;
        intensity[v] = (band + 0.08 * (1.0 - r).max(0.0)).clamp(0.0, 1.0);
        for ax in (0..spatial.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < spatial[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (intensity, labels)
}

/// Multilinear upsampling of a per-axis control grid to full resolution.
fn upsample_grid(values: &[f64], grid: usize, spatial: &[usize]) -> Vec<f64> {
    let d = spatial.len();
    let n: usize = spatial.iter().product();
    let gstride: Vec<usize> = (0..d)
        .map(|ax| grid.pow((d - 1 - ax) as u32))
        .collect();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; d];
    for v in 0..n {
        let mut lo = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for ax in 0..d {
            let e = spatial[ax];
            let t = if e > 1 {
                idx[ax] as f64 / (e - 1) as f64 * (grid - 1) as f64
            } else {
                0.0
            };
            let l = (t.floor() as usize).min(grid - 2);
            lo[ax] = l;
            frac[ax] = t - l as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = 0usize;
            for ax in 0..d {
                let hi = (corner >> ax) & 1 == 1;
                w *= if hi { frac[ax] } else { 1.0 - frac[ax] };
                off += (lo[ax] + hi as usize) * gstride[ax];
            }
            acc += w * values[off];
        }
        out[v] = acc;
        for ax in (0..d).rev() {
            idx[ax] += 1;
            if idx[ax] < spatial[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Smooth random displacement `[d, spatial...]` from a control grid; `None`
/// if the resulting map folds (nonpositive Jacobian determinant somewhere).
fn try_field(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    amplitude: f64,
) -> Result<Option<Vec<f64>>> {
    let d = spec.spatial_shape.len();
    let g = spec.control_grid.pow(d as u32);
    let n: usize = spec.spatial_shape.iter().product();
    let mut field = Vec::with_capacity(d * n);
    for _ in 0..d {
        let control: Vec<f64> = (0..g)
            .map(|_| rng.gen_range(-1.0..1.0) * amplitude)
            .collect();
        field.extend(upsample_grid(&control, spec.control_grid, &spec.spatial_shape));
    }
    if amplitude == 0.0 {
        return Ok(Some(field));
    }
    let mut shape = vec![1, d];
    shape.extend_from_slice(&spec.spatial_shape);
    let tensor = Tensor::constant(field.clone(), &shape)?;
    let det = jacobian_determinant(&DisplacementField::new(tensor)?)?;
    let ok = det.data().iter().all(|&v| v > 0.0);
    Ok(if ok { Some(field) } else { None })
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (index as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15),
    )
}

const FOLD_RETRIES: usize = 10;

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.spatial_shape.len();
    let n: usize = spec.spatial_shape.iter().product();
    let (tmpl_int, tmpl_lab) = template(spec);
    let mut img_shape = vec![1, 1];
    img_shape.extend_from_slice(&spec.spatial_shape);
    let tmpl_int_t = Tensor::constant(tmpl_int.clone(), &img_shape)?;
    let tmpl_lab_t =
        Tensor::constant(tmpl_lab.iter().map(|&l| l as f64).collect(), &img_shape)?;
    let mut field_shape = vec![1, d];
    field_shape.extend_from_slice(&spec.spatial_shape);

    let mut images = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = image_rng(spec.seed, i);
        let mut amplitude = spec.max_amplitude;
        let mut field = None;
        for _ in 0..FOLD_RETRIES {
            if let Some(f) = try_field(&mut rng, spec, amplitude)? {
                field = Some(f);
                break;
            }
            amplitude *= 0.8;
        }
        let field = field.ok_or(DataError::Folded(FOLD_RETRIES))?;

        let df =
            DisplacementField::new(Tensor::constant(field.clone(), &field_shape)?)?;
        let warped = warp(&tmpl_int_t, &df, Interp::Linear)?;
        let labels: Vec<u8> = warp(&tmpl_lab_t, &df, Interp::Nearest)?
            .data()
            .iter()
            .map(|&v| v.round() as u8)
            .collect();

        let mut intensity = warped.data().to_vec();
        if spec.bias_field_amplitude > 0.0 {
            let control: Vec<f64> = (0..(1usize << d))
                .map(|_| rng.gen_range(-1.0..1.0) * spec.bias_field_amplitude)
                .collect();
            let bias = upsample_grid(&control, 2, &spec.spatial_shape);
            for (v, b) in intensity.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        if spec.intensity_noise_sd > 0.0 {
            let normal = Normal::new(0.0, spec.intensity_noise_sd).unwrap();
            for v in intensity.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        for v in intensity.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        debug_assert_eq!(intensity.len(), n);

        images.push(DatasetImage {
            id: format!("img{i:03}"),
            intensity,
            labels,
            field,
        });
    }
    Ok(Dataset { spec: spec.clone(), images, split: None })
}

/// Deterministic train/val/test partition with label masking: `n_labeled`
/// training images keep their labels visible, the rest are hidden from
/// training (but stay available to evaluation).
pub fn split(dataset: &mut Dataset, n_labeled: usize, seed: u64) -> Result<&SplitInfo> {
    let m = dataset.images.len();
    let n_test = m / 5;
    let n_val = 2 * m / 15;
    let n_train = m - n_val - n_test;
    if n_test == 0 || n_val == 0 || n_train < 2 {
        return Err(DataError::Split(format!(
            "dataset of {m} images is too small to split"
        )));
    }
    if n_labeled > n_train {
        return Err(DataError::Split(format!(
            "n_labeled = {n_labeled} exceeds the {n_train} training images"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let train: Vec<usize> = order[..n_train].to_vec();
    let val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let test: Vec<usize> = order[n_train + n_val..].to_vec();
    let mut pool = train.clone();
    pool.shuffle(&mut rng);
    let mut labeled: Vec<usize> = pool[..n_labeled].to_vec();
    labeled.sort_unstable();
    dataset.split = Some(SplitInfo { seed, n_labeled, train, val, test, labeled });
    Ok(dataset.split.as_ref().unwrap())
}

/// Hard label map guarded by a read counter, so tests can prove that masked
/// labels were never consulted.
#[derive(Clone)]
pub struct LabelGuard {
    data: Rc<Vec<u8>>,
    reads: Rc<Cell<usize>>,
}

impl LabelGuard {
    fn new(data: Vec<u8>) -> LabelGuard {
        LabelGuard { data: Rc::new(data), reads: Rc::new(Cell::new(0)) }
    }

    pub fn read(&self) -> &[u8] {
        self.reads.set(self.reads.get() + 1);
        &self.data
    }

    pub fn read_count(&self) -> usize {
        self.reads.get()
    }
}

pub struct TrainImage {
    pub id: String,
    /// Index into the parent dataset.
    pub index: usize,
    /// `[1, 1, spatial...]`, network-ready.
    pub intensity: Tensor,
    labels: LabelGuard,
    labeled: bool,
}

impl TrainImage {
    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    /// Manual labels, or `None` when masked by the split.
    pub fn manual_labels(&self) -> Option<&LabelGuard> {
        self.labeled.then_some(&self.labels)
    }

    pub fn label_reads(&self) -> usize {
        self.labels.read_count()
    }
}

pub struct EvalImage {
    pub id: String,
    pub index: usize,
    pub intensity: Tensor,
    pub labels: Vec<u8>,
}

pub struct SplitView {
    pub train: Vec<TrainImage>,
    pub val: Vec<EvalImage>,
    pub test: Vec<EvalImage>,
    pub classes: usize,
    pub spatial: Vec<usize>,
}

impl Dataset {
    /// Network-ready tensors for a split dataset.
    pub fn view(&self) -> Result<SplitView> {
        let info = self.split.as_ref().ok_or(DataError::MissingSplit)?;
        let mut shape = vec![1, 1];
        shape.extend_from_slice(&self.spec.spatial_shape);
        let tensor = |i: usize| {
            Tensor::constant(self.images[i].intensity.clone(), &shape)
                .map_err(DataError::from)
        };
        let eval = |i: usize| -> Result<EvalImage> {
            Ok(EvalImage {
                id: self.images[i].id.clone(),
                index: i,
                intensity: tensor(i)?,
                labels: self.images[i].labels.clone(),
            })
        };
        let mut train = Vec::with_capacity(info.train.len());
        for &i in &info.train {
            train.push(TrainImage {
                id: self.images[i].id.clone(),
                index: i,
                intensity: tensor(i)?,
                labels: LabelGuard::new(self.images[i].labels.clone()),
                labeled: info.labeled.contains(&i),
            });
        }
        Ok(SplitView {
            train,
            val: info.val.iter().map(|&i| eval(i)).collect::<Result<_>>()?,
            test: info.test.iter().map(|&i| eval(i)).collect::<Result<_>>()?,
            classes: self.spec.classes,
            spatial: self.spec.spatial_shape.clone(),
        })
    }

    /// Fully labeled images of one partition, for measurement. Unlike the
    /// training view, this never masks labels.
    pub fn eval_images(&self, which: &str) -> Result<Vec<EvalImage>> {
        let info = self.split.as_ref().ok_or(DataError::MissingSplit)?;
        let indices = match which {
            "train" => &info.train,
            "val" => &info.val,
            "test" => &info.test,
            other => {
                return Err(DataError::Split(format!(
                    "unknown split {other:?}; expected train, val or test"
                )))
            }
        };
        let mut shape = vec![1, 1];
        shape.extend_from_slice(&self.spec.spatial_shape);
        indices
            .iter()
            .map(|&i| {
                Ok(EvalImage {
                    id: self.images[i].id.clone(),
                    index: i,
                    intensity: Tensor::constant(self.images[i].intensity.clone(), &shape)?,
                    labels: self.images[i].labels.clone(),
                })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SyntheticSpec,
    ids: Vec<String>,
    split: Option<SplitInfo>,
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for sub in ["images", "labels", "fields"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(IoError::from)?;
    }
    let manifest = Manifest {
        spec: dataset.spec.clone(),
        ids: dataset.images.iter().map(|im| im.id.clone()).collect(),
        split: dataset.split.clone(),
    };
    let file = std::fs::File::create(dir.join("manifest.json")).map_err(IoError::from)?;
    serde_json::to_writer_pretty(file, &manifest).map_err(IoError::from)?;

    let spatial = dataset.spec.spatial_shape.clone();
    let d = spatial.len();
    let mut field_shape = vec![d];
    field_shape.extend_from_slice(&spatial);
    for im in &dataset.images {
        io::save_npy(
            &dir.join("images").join(format!("{}.npy", im.id)),
            &NpyArray::F64 { shape: spatial.clone(), data: im.intensity.clone() },
        )?;
        io::save_npy(
            &dir.join("labels").join(format!("{}.npy", im.id)),
            &NpyArray::U8 { shape: spatial.clone(), data: im.labels.clone() },
        )?;
        io::save_npy(
            &dir.join("fields").join(format!("{}.npy", im.id)),
            &NpyArray::F64 { shape: field_shape.clone(), data: im.field.clone() },
        )?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(dir.join("manifest.json")).map_err(IoError::from)?;
    let manifest: Manifest = serde_json::from_reader(file).map_err(IoError::from)?;
    let spatial = manifest.spec.spatial_shape.clone();
    let n: usize = spatial.iter().product();
    let d = spatial.len();
    let mut images = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let (ishape, intensity) =
            io::load_npy(&dir.join("images").join(format!("{id}.npy")))?
                .as_f64()
                .map(|(s, v)| (s.to_vec(), v.to_vec()))?;
        let (lshape, labels) = io::load_npy(&dir.join("labels").join(format!("{id}.npy")))?
            .as_u8()
            .map(|(s, v)| (s.to_vec(), v.to_vec()))?;
        let (fshape, field) = io::load_npy(&dir.join("fields").join(format!("{id}.npy")))?
            .as_f64()
            .map(|(s, v)| (s.to_vec(), v.to_vec()))?;
        if ishape != spatial || lshape != spatial || fshape[0] != d || field.len() != d * n
        {
            return Err(DataError::Malformed(format!(
                "tensor shapes for {id} disagree with the manifest"
            )));
        }
        images.push(DatasetImage {
            id: id.clone(),
            intensity,
            labels,
            field,
        });
    }
    Ok(Dataset { spec: manifest.spec, images, split: manifest.split })
}

#[cfg(test)]
mod tests;
