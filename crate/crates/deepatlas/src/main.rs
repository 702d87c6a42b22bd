//! Command-line entry point: data generation, training protocols,
//! inference, evaluation, and the finite-difference self-check suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use deepatlas::data::{self, DataError, SyntheticSpec};
use deepatlas::eval::{self, EvalError};
use deepatlas::gradcheck;
use deepatlas::imageops::{warp, Interp};
use deepatlas::io::{self, IoError, NpyArray};
use deepatlas::losses::{DiceVariant, LossWeights};
use deepatlas::nets::{RegNet, RegNetConfig, SegNet, SegNetConfig};
use deepatlas::tensor::{Tensor, TensorError};
use deepatlas::trainer::{self, Protocol, ProtocolArgs, TrainConfig, TrainError};

const CONFIG_HELP: &str = "\
RUN CONFIG (JSON file for `train`; unknown keys are rejected):

  data:
    spec            inline synthetic dataset spec (see `gen-data`), or
    path            directory of a previously generated dataset
    n_labeled       training images that keep manual labels (required)
    split_seed      split shuffling seed              [default: 0]
  model:
    spatial_rank    d, 2 or 3                         [default: 2]
    depth           down-sampling levels L            [default: 3]
    width           base channel width W              [default: 16]
    classes         segmentation classes K            [default: 4]
    kernel          hidden conv kernel extent         [default: 3]
  loss:
    lambda_r        bending-energy weight             [default: 20000]
    lambda_a        anatomy-overlap weight            [default: 3]
    lambda_sp       supervised-segmentation weight    [default: 3]
    dice_variant    conventional | as_printed         [default: conventional]
  train:
    protocol        mono_seg | mono_reg | semi_da_seg | semi_da_reg | da
    epochs          epoch budget                      [default: 10]
    steps_per_epoch update steps per epoch; 0 = one per training image
    batch_size      pairs averaged per update         [default: 1]
    lr_seg          segmentation learning rate        [default: 1e-3; 1e-4 for da]
    lr_reg          registration learning rate        [default: 1e-3; 5e-4 for da]
    lr_decay        decay factor                      [default: 0.2]
    decay_epochs    1-based epochs at which to decay  [default: none]
    alt_ratio       seg steps per 20 reg steps        [default: 1, the 1:20 ratio]
    patience        one-shot plateau window           [default: 5]
    seed            run seed                          [default: 0]
    pretrained_seg  checkpoint path (semi_da_reg / da)
    pretrained_reg  checkpoint path (semi_da_seg / da)
  output:
    dir             output directory (required)

Environment: DEEPATLAS_THREADS caps worker threads [default: 1].
Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.";

#[derive(Parser)]
#[command(name = "deepatlas", version, about, after_long_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Seg,
    Reg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a JSON spec and write it to a directory
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a training protocol described by a JSON run config
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Segment one image (NPY in, hard-label NPY out)
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a moving image to a target image
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_warped: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference self-check over every op, loss and objective
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Format(msg) => CliError::Config(msg),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => io.into(),
            DataError::Tensor(t) => CliError::Numeric(t.to_string()),
            DataError::Folded(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(msg) => CliError::Config(msg),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(t) => CliError::Numeric(t.to_string()),
            TrainError::Eval(ev) => ev.into(),
            TrainError::Io(io) => CliError::Io(io.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Invalid(msg) => CliError::Config(msg),
            EvalError::Io(io) => CliError::Io(io.to_string()),
            EvalError::Json(j) => CliError::Io(j.to_string()),
            EvalError::Tensor(t) => CliError::Numeric(t.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

// -------- run config --------

fn default_split_seed() -> u64 {
    0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    #[serde(default)]
    spec: Option<SyntheticSpec>,
    #[serde(default)]
    path: Option<PathBuf>,
    n_labeled: usize,
    #[serde(default = "default_split_seed")]
    split_seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    spatial_rank: usize,
    depth: usize,
    width: usize,
    classes: usize,
    kernel: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = SegNetConfig::default();
        ModelSection {
            spatial_rank: d.spatial_rank,
            depth: d.depth,
            width: d.width,
            classes: d.classes,
            kernel: d.kernel,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LossSection {
    lambda_r: f64,
    lambda_a: f64,
    lambda_sp: f64,
    dice_variant: DiceVariant,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda_r: w.lambda_r,
            lambda_a: w.lambda_a,
            lambda_sp: w.lambda_sp,
            dice_variant: DiceVariant::Conventional,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    protocol: Protocol,
    #[serde(default)]
    epochs: Option<usize>,
    #[serde(default)]
    steps_per_epoch: Option<usize>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    lr_seg: Option<f64>,
    #[serde(default)]
    lr_reg: Option<f64>,
    #[serde(default)]
    lr_decay: Option<f64>,
    #[serde(default)]
    decay_epochs: Option<Vec<usize>>,
    #[serde(default)]
    alt_ratio: Option<usize>,
    #[serde(default)]
    patience: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    pretrained_seg: Option<PathBuf>,
    #[serde(default)]
    pretrained_reg: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: DataSection,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    loss: LossSection,
    train: TrainSection,
    output: OutputSection,
}

impl RunConfig {
    fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let mut cfg = TrainConfig::defaults(t.protocol);
        cfg.weights = LossWeights::new(
            self.loss.lambda_r,
            self.loss.lambda_a,
            self.loss.lambda_sp,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        cfg.dice_variant = self.loss.dice_variant;
        if let Some(v) = t.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = t.steps_per_epoch {
            cfg.steps_per_epoch = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = t.lr_seg {
            cfg.lr_seg = v;
        }
        if let Some(v) = t.lr_reg {
            cfg.lr_reg = v;
        }
        if let Some(v) = t.lr_decay {
            cfg.lr_decay = v;
        }
        if let Some(v) = &t.decay_epochs {
            cfg.decay_epochs = v.clone();
        }
        if let Some(v) = t.alt_ratio {
            cfg.alt_ratio = v;
        }
        if let Some(v) = t.patience {
            cfg.patience = v;
        }
        if let Some(v) = t.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}

// -------- checkpoints --------

fn save_seg_checkpoint(path: &Path, net_config: SegNetConfig, params: &deepatlas::nets::ParamSet) -> Result<()> {
    let manifest = serde_json::json!({"kind": "seg", "config": net_config});
    io::save_checkpoint(path, &manifest, params)?;
    Ok(())
}

fn save_reg_checkpoint(path: &Path, net_config: RegNetConfig, params: &deepatlas::nets::ParamSet) -> Result<()> {
    let manifest = serde_json::json!({"kind": "reg", "config": net_config});
    io::save_checkpoint(path, &manifest, params)?;
    Ok(())
}

fn load_seg(path: &Path) -> Result<SegNet> {
    let ckpt = io::load_checkpoint(path)?;
    if ckpt.manifest["kind"] != "seg" {
        return Err(CliError::Config(format!(
            "{} is not a segmentation checkpoint",
            path.display()
        )));
    }
    let config: SegNetConfig = serde_json::from_value(ckpt.manifest["config"].clone())?;
    let expected = SegNet::new(config, 0);
    check_shapes(&expected.params, &ckpt.params, path)?;
    Ok(SegNet { config, params: ckpt.params })
}

fn load_reg(path: &Path) -> Result<RegNet> {
    let ckpt = io::load_checkpoint(path)?;
    if ckpt.manifest["kind"] != "reg" {
        return Err(CliError::Config(format!(
            "{} is not a registration checkpoint",
            path.display()
        )));
    }
    let config: RegNetConfig = serde_json::from_value(ckpt.manifest["config"].clone())?;
    let expected = RegNet::new(config, 0);
    check_shapes(&expected.params, &ckpt.params, path)?;
    Ok(RegNet { config, params: ckpt.params })
}

fn check_shapes(
    expected: &deepatlas::nets::ParamSet,
    actual: &deepatlas::nets::ParamSet,
    path: &Path,
) -> Result<()> {
    let ok = expected.len() == actual.len()
        && expected
            .iter()
            .zip(actual.iter())
            .all(|(e, a)| e.name == a.name && e.shape == a.shape);
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{}: parameter tensors do not match the declared architecture",
            path.display()
        )))
    }
}

// -------- image plumbing --------

/// Accept `[spatial...]` or `[1, 1, spatial...]`, return `[1, 1, spatial...]`.
fn load_image(path: &Path, rank: usize) -> Result<Tensor> {
    let array = io::load_npy(path)?;
    let (shape, data) = array.as_f64()?;
    let spatial: Vec<usize> = if shape.len() == rank {
        shape.to_vec()
    } else if shape.len() == rank + 2 && shape[0] == 1 && shape[1] == 1 {
        shape[2..].to_vec()
    } else {
        return Err(CliError::Config(format!(
            "{}: expected a rank-{rank} image, got shape {shape:?}",
            path.display()
        )));
    };
    let mut full = vec![1, 1];
    full.extend_from_slice(&spatial);
    Ok(Tensor::constant(data.to_vec(), &full)?)
}

// -------- commands --------

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    let dataset = data::generate_dataset(&spec)?;
    data::save_dataset(out, &dataset)?;
    let labeled: usize = dataset.images.len(); // all carry ground truth
    println!(
        "wrote {} images (K={}, shape {:?}, {} ground-truth label maps) to {}",
        dataset.images.len(),
        spec.classes,
        spec.spatial_shape,
        labeled,
        out.display()
    );
    Ok(())
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config_path)?;
    let run: RunConfig = serde_json::from_str(&text)?;
    let out = &run.output.dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), &text)?;

    let mut dataset = match (&run.data.spec, &run.data.path) {
        (Some(spec), None) => data::generate_dataset(spec)?,
        (None, Some(path)) => data::load_dataset(path)?,
        _ => {
            return Err(CliError::Config(
                "data section needs exactly one of `spec` or `path`".into(),
            ))
        }
    };
    if dataset.spec.classes != run.model.classes {
        return Err(CliError::Config(format!(
            "model.classes = {} but the dataset has K = {}",
            run.model.classes, dataset.spec.classes
        )));
    }
    if dataset.spec.spatial_shape.len() != run.model.spatial_rank {
        return Err(CliError::Config(format!(
            "model.spatial_rank = {} but the dataset is rank {}",
            run.model.spatial_rank,
            dataset.spec.spatial_shape.len()
        )));
    }
    data::split(&mut dataset, run.data.n_labeled, run.data.split_seed)?;
    // record the split so `eval` sees the same partitions
    match &run.data.path {
        Some(path) => data::save_dataset(path, &dataset)?,
        None => data::save_dataset(&out.join("dataset"), &dataset)?,
    }
    let view = dataset.view()?;

    let seg_config = SegNetConfig {
        spatial_rank: run.model.spatial_rank,
        depth: run.model.depth,
        width: run.model.width,
        classes: run.model.classes,
        kernel: run.model.kernel,
    };
    let reg_config = RegNetConfig {
        spatial_rank: run.model.spatial_rank,
        depth: run.model.depth,
        width: run.model.width,
        kernel: run.model.kernel,
    };
    let pretrained_seg = run
        .train
        .pretrained_seg
        .as_deref()
        .map(load_seg)
        .transpose()?;
    let pretrained_reg = run
        .train
        .pretrained_reg
        .as_deref()
        .map(load_reg)
        .transpose()?;
    let config = run.train_config()?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
    let outcome = trainer::run_protocol(
        ProtocolArgs {
            config: &config,
            seg_config,
            reg_config,
            view: &view,
            pretrained_seg,
            pretrained_reg,
        },
        &mut log,
    )?;
    drop(log);

    if let Some(seg) = &outcome.seg {
        save_seg_checkpoint(&out.join("seg_final.ckpt"), seg.config, &seg.params)?;
        let report =
            eval::eval_segmentation(seg, &view.val, &eval::default_groups(view.classes))?;
        eval::write_report(&out.join("val_seg"), &report)?;
        println!("val seg dice: {:.2}% (sd {:.2})", report.mean_dice, report.std_dice);
    }
    if let Some(params) = &outcome.best_seg {
        let config = outcome.seg.as_ref().expect("best implies final").config;
        save_seg_checkpoint(&out.join("seg_best.ckpt"), config, params)?;
    }
    if let Some(reg) = &outcome.reg {
        save_reg_checkpoint(&out.join("reg_final.ckpt"), reg.config, &reg.params)?;
        let report =
            eval::eval_registration(reg, &view.val, view.classes, &eval::default_groups(view.classes))?;
        eval::write_report(&out.join("val_reg"), &report)?;
        println!(
            "val reg dice: {:.2}% (folding {:.4})",
            report.mean_dice,
            report.folding_fraction.unwrap_or(0.0)
        );
    }
    if let Some(params) = &outcome.best_reg {
        let config = outcome.reg.as_ref().expect("best implies final").config;
        save_reg_checkpoint(&out.join("reg_best.ckpt"), config, params)?;
    }
    println!("{} steps logged to {}", outcome.records.len(), out.join("metrics.jsonl").display());
    Ok(())
}

fn cmd_segment(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let net = load_seg(checkpoint)?;
    let input = load_image(image, net.config.spatial_rank)?;
    let (probs, _) = net.forward(&input, false)?;
    let labels = eval::argmax_labels(&probs);
    let spatial = input.shape()[2..].to_vec();
    io::save_npy(out, &NpyArray::U8 { shape: spatial, data: labels })?;
    Ok(())
}

fn cmd_register(
    checkpoint: &Path,
    moving: &Path,
    target: &Path,
    out_field: &Path,
    out_warped: Option<&Path>,
) -> Result<()> {
    let net = load_reg(checkpoint)?;
    let moving_t = load_image(moving, net.config.spatial_rank)?;
    let target_t = load_image(target, net.config.spatial_rank)?;
    let (field, _) = net.forward(&moving_t, &target_t, false)?;
    let spatial = moving_t.shape()[2..].to_vec();
    let mut field_shape = vec![spatial.len()];
    field_shape.extend_from_slice(&spatial);
    io::save_npy(
        out_field,
        &NpyArray::F64 {
            shape: field_shape,
            data: field.tensor().data().to_vec(),
        },
    )?;
    if let Some(path) = out_warped {
        let warped = warp(&moving_t, &field, Interp::Linear)?;
        io::save_npy(
            path,
            &NpyArray::F64 { shape: spatial, data: warped.data().to_vec() },
        )?;
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    split: &str,
    mode: EvalMode,
    out: &Path,
) -> Result<()> {
    let dataset = data::load_dataset(data_dir)?;
    let images = dataset.eval_images(split)?;
    let k = dataset.spec.classes;
    let groups = eval::default_groups(k);
    let report = match mode {
        EvalMode::Seg => {
            let net = load_seg(checkpoint)?;
            if net.config.classes != k {
                return Err(CliError::Config(format!(
                    "checkpoint has {} classes but the dataset has {k}",
                    net.config.classes
                )));
            }
            eval::eval_segmentation(&net, &images, &groups)?
        }
        EvalMode::Reg => {
            let net = load_reg(checkpoint)?;
            eval::eval_registration(&net, &images, k, &groups)?
        }
    };
    eval::write_report(out, &report)?;
    // a quick visual: first image of the split, plus its labels
    if let Some(first) = images.first() {
        let spatial = &first.intensity.shape()[2..];
        eval::render_slice(first.intensity.data(), spatial, &out.join("example_image.pgm"))?;
        eval::render_labels(&first.labels, k, spatial, &out.join("example_labels.pgm"))?;
    }
    println!(
        "{split} mean dice {:.2}% (sd {:.2}); report in {}",
        report.mean_dice,
        report.std_dice,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let results = gradcheck::run_suite(seed);
    let mut ok = true;
    for r in &results {
        println!(
            "{:<28} worst rel err {:>12.3e}  {}",
            r.name,
            r.worst_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        );
        ok &= r.pass;
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Numeric("gradient check failed".into()))
    }
}

fn thread_cap() -> Result<usize> {
    match std::env::var("DEEPATLAS_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                CliError::Config(format!("DEEPATLAS_THREADS must be a positive integer, got {v:?}"))
            }),
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<()> {
    // execution is sequential; the cap is validated for forward compatibility
    let _threads = thread_cap()?;
    match &cli.cmd {
        Cmd::GenData { spec, out } => cmd_gen_data(spec, out),
        Cmd::Train { config } => cmd_train(config),
        Cmd::Segment { checkpoint, image, out } => cmd_segment(checkpoint, image, out),
        Cmd::Register { checkpoint, moving, target, out_field, out_warped } => {
            cmd_register(checkpoint, moving, target, out_field, out_warped.as_deref())
        }
        Cmd::Eval { checkpoint, data, split, mode, out } => {
            cmd_eval(checkpoint, data, split, *mode, out)
        }
        Cmd::Gradcheck { seed } => cmd_gradcheck(*seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
