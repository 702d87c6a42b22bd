//! The two function approximators: a segmentation network F_S(I; θ_s) and a
//! registration network F_R(I_m, I_t; θ_r), as light encoder-decoder designs
//! with skip connections.
//!
//! The segmentation encoder downsamples with max-pooling, the registration
//! encoder with stride-2 convolutions; both use LeakyReLU activations, a
//! nearest-upsampling decoder with skip concatenation and a final 1x1
//! convolution. The registration head is zero-initialized so a fresh network
//! predicts u = 0 (identity warp).

mod params;

pub use params::{BoundParams, Param, ParamSet};

use crate::imageops::DisplacementField;
use crate::tensor::{Result, Tensor, TensorError};
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetConfig {
    /// Spatial rank d (2 or 3).
    pub spatial_rank: usize,
    /// Number of down-sampling levels L.
    pub depth: usize,
    /// Base channel width W; level i uses W * 2^i channels.
    pub width: usize,
    /// Segmentation class count K.
    pub classes: usize,
    /// Spatial kernel extent of the hidden convolutions.
    pub kernel: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { spatial_rank: 2, depth: 3, width: 16, classes: 4, kernel: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegNetConfig {
    pub spatial_rank: usize,
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        RegNetConfig { spatial_rank: 2, depth: 3, width: 16, kernel: 3 }
    }
}

fn check_divisible(spatial: &[usize], depth: usize, op: &'static str) -> Result<()> {
    let factor = 1usize << depth;
    if spatial.iter().any(|&e| e % factor != 0 || e == 0) {
        return Err(TensorError::InvalidShape {
            op,
            shape: spatial.to_vec(),
            reason: format!("spatial extents must be divisible by 2^{depth}"),
        });
    }
    Ok(())
}

/// conv + bias with "same" padding at stride 1, or halving at stride 2.
fn conv_layer(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    rank: usize,
    kernel: usize,
) -> Result<Tensor> {
    let pad = if kernel == 1 { 0 } else { (kernel - 1) / 2 };
    let y = x.conv_nd(&weight, &vec![stride; rank], &vec![pad; rank])?;
    let mut bshape = vec![1, bias.numel()];
    bshape.extend(std::iter::repeat(1).take(rank));
    y.add(&bias.reshape(&bshape)?)
}

struct ConvDef {
    name: String,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    zero_init: bool,
}

fn conv_params(defs: &[ConvDef], rank: usize, seed: u64) -> ParamSet {
    let mut set = ParamSet::new();
    for def in defs {
        let mut wshape = vec![def.c_out, def.c_in];
        wshape.extend(std::iter::repeat(def.kernel).take(rank));
        let fan_in = def.c_in * def.kernel.pow(rank as u32);
        set.add_conv(&def.name, &wshape, fan_in, def.zero_init, seed);
    }
    set
}

/// Forward walker: consumes conv definitions in declaration order.
struct LayerCursor<'a> {
    bound: &'a BoundParams,
    rank: usize,
    next: usize,
}

impl<'a> LayerCursor<'a> {
    fn conv(&mut self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let (w, b) = self.bound.pair(self.next);
        self.next += 1;
        let kernel = w.shape()[2];
        let y = conv_layer(x, w, b, stride, self.rank, kernel)?;
        Ok(y.leaky_relu(LEAKY_SLOPE))
    }

    fn conv_linear(&mut self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let (w, b) = self.bound.pair(self.next);
        self.next += 1;
        let kernel = w.shape()[2];
        conv_layer(x, w, b, stride, self.rank, kernel)
    }
}

#[derive(Clone)]
pub struct SegNet {
    pub config: SegNetConfig,
    pub params: ParamSet,
}

impl SegNet {
    pub fn new(config: SegNetConfig, seed: u64) -> SegNet {
        let mut defs = Vec::new();
        let k = config.kernel;
        let mut c_in = 1;
        for level in 0..=config.depth {
            let w = config.width << level;
            defs.push(ConvDef {
                name: format!("enc{level}.conv1"),
                c_in,
                c_out: w,
                kernel: k,
                zero_init: false,
            });
            defs.push(ConvDef {
                name: format!("enc{level}.conv2"),
                c_in: w,
                c_out: w,
                kernel: k,
                zero_init: false,
            });
            c_in = w;
        }
        for level in (0..config.depth).rev() {
            let w = config.width << level;
            let up = config.width << (level + 1);
            defs.push(ConvDef {
                name: format!("dec{level}.conv1"),
                c_in: up + w,
                c_out: w,
                kernel: k,
                zero_init: false,
            });
            defs.push(ConvDef {
                name: format!("dec{level}.conv2"),
                c_in: w,
                c_out: w,
                kernel: k,
                zero_init: false,
            });
        }
        defs.push(ConvDef {
            name: "head".into(),
            c_in: config.width,
            c_out: config.classes,
            kernel: 1,
            zero_init: false,
        });
        SegNet { config, params: conv_params(&defs, config.spatial_rank, seed) }
    }

    /// Probabilistic segmentation `[N, K, spatial...]`; also returns the
    /// bound parameter leaves for gradient collection.
    pub fn forward(&self, image: &Tensor, track: bool) -> Result<(Tensor, BoundParams)> {
        let rank = self.config.spatial_rank;
        if image.shape().len() != rank + 2 || image.shape()[1] != 1 {
            return Err(TensorError::InvalidShape {
                op: "seg_forward",
                shape: image.shape().to_vec(),
                reason: format!("expected [N, 1, spatial...] with rank {rank}"),
            });
        }
        check_divisible(&image.shape()[2..], self.config.depth, "seg_forward")?;
        let bound = self.params.bind(track);
        let mut cur = LayerCursor { bound: &bound, rank, next: 0 };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = image.clone();
        for level in 0..=self.config.depth {
            x = cur.conv(&x, 1)?;
            x = cur.conv(&x, 1)?;
            if level < self.config.depth {
                skips.push(x.clone());
                x = x.max_pool(&vec![2; rank], &vec![2; rank])?;
            }
        }
        for level in (0..self.config.depth).rev() {
            x = x.upsample_nearest(2)?;
            x = Tensor::concat(&[x, skips[level].clone()], 1)?;
            x = cur.conv(&x, 1)?;
            x = cur.conv(&x, 1)?;
        }
        let logits = cur.conv_linear(&x, 1)?;
        let probs = logits.softmax(1)?;
        Ok((probs, bound))
    }

    pub fn describe(&self) -> NetSummary {
        NetSummary {
            parameter_count: self.params.total_len(),
            tensors: self.params.shapes(),
        }
    }
}

#[derive(Clone)]
pub struct RegNet {
    pub config: RegNetConfig,
    pub params: ParamSet,
}

impl RegNet {
    pub fn new(config: RegNetConfig, seed: u64) -> RegNet {
        let mut defs = Vec::new();
        let k = config.kernel;
        defs.push(ConvDef {
            name: "stem.conv1".into(),
            c_in: 2,
            c_out: config.width,
            kernel: k,
            zero_init: false,
        });
        defs.push(ConvDef {
            name: "stem.conv2".into(),
            c_in: config.width,
            c_out: config.width,
            kernel: k,
            zero_init: false,
        });
        for level in 1..=config.depth {
            let w = config.width << level;
            let prev = config.width << (level - 1);
            defs.push(ConvDef {
                name: format!("down{level}.conv1"),
                c_in: prev,
                c_out: w,
                kernel: k,
                zero_init: false,
            });
            defs.push(ConvDef {
                name: format!("down{level}.conv2"),
                c_in: w,
                c_out: w,
                kernel: k,
                zero_init: false,
            });
        }
        for level in (0..config.depth).rev() {
            let w = config.width << level;
            let up = config.width << (level + 1);
            defs.push(ConvDef {
                name: format!("up{level}.conv1"),
                c_in: up + w,
                c_out: w,
                kernel: k,
                zero_init: false,
            });
            defs.push(ConvDef {
                name: format!("up{level}.conv2"),
                c_in: w,
                c_out: w,
                kernel: k,
                zero_init: false,
            });
        }
        defs.push(ConvDef {
            name: "head".into(),
            c_in: config.width,
            c_out: config.spatial_rank,
            kernel: 1,
            zero_init: true,
        });
        RegNet { config, params: conv_params(&defs, config.spatial_rank, seed) }
    }

    /// Displacement field `[N, d, spatial...]` in normalized coordinates.
    pub fn forward(
        &self,
        moving: &Tensor,
        target: &Tensor,
        track: bool,
    ) -> Result<(DisplacementField, BoundParams)> {
        if moving.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "reg_forward",
                lhs: moving.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let rank = self.config.spatial_rank;
        if moving.shape().len() != rank + 2 || moving.shape()[1] != 1 {
            return Err(TensorError::InvalidShape {
                op: "reg_forward",
                shape: moving.shape().to_vec(),
                reason: format!("expected [N, 1, spatial...] with rank {rank}"),
            });
        }
        check_divisible(&moving.shape()[2..], self.config.depth, "reg_forward")?;
        let bound = self.params.bind(track);
        let mut cur = LayerCursor { bound: &bound, rank, next: 0 };

        let mut x = Tensor::concat(&[moving.clone(), target.clone()], 1)?;
        x = cur.conv(&x, 1)?;
        x = cur.conv(&x, 1)?;
        let mut skips = vec![x.clone()];
        for level in 1..=self.config.depth {
            x = cur.conv(&x, 2)?;
            x = cur.conv(&x, 1)?;
            if level < self.config.depth {
                skips.push(x.clone());
            }
        }
        for level in (0..self.config.depth).rev() {
            x = x.upsample_nearest(2)?;
            x = Tensor::concat(&[x, skips[level].clone()], 1)?;
            x = cur.conv(&x, 1)?;
            x = cur.conv(&x, 1)?;
        }
        let u = cur.conv_linear(&x, 1)?;
        Ok((DisplacementField::new(u)?, bound))
    }

    pub fn describe(&self) -> NetSummary {
        NetSummary {
            parameter_count: self.params.total_len(),
            tensors: self.params.shapes(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NetSummary {
    pub parameter_count: usize,
    pub tensors: Vec<(String, Vec<usize>)>,
}
