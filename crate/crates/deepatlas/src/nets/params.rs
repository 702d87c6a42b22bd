//! Named parameter storage and per-step tape binding.

use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One named weight tensor, stored as raw data between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of parameters. Convolution layers contribute a
/// `<name>.weight` / `<name>.bias` pair at consecutive indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { params: Vec::new() }
    }

    /// Fan-in-scaled uniform init (or zeros for `zero_init` heads), seeded
    /// per tensor name so construction order does not matter.
    pub fn add_conv(
        &mut self,
        name: &str,
        weight_shape: &[usize],
        fan_in: usize,
        zero_init: bool,
        seed: u64,
    ) {
        let n: usize = weight_shape.iter().product();
        let c_out = weight_shape[0];
        let (weight, bias) = if zero_init {
            (vec![0.0; n], vec![0.0; c_out])
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            // Conservative fan-in scaling: the softmax head and the small
            // widths used here train faster from sub-He magnitudes.
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            let bias = (0..c_out).map(|_| rng.gen_range(-bound..bound)).collect();
            (weight, bias)
        };
        self.params.push(Param {
            name: format!("{name}.weight"),
            shape: weight_shape.to_vec(),
            data: weight,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            shape: vec![c_out],
            data: bias,
        });
    }

    pub fn push(&mut self, param: Param) {
        self.params.push(param);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Materialize fresh tape leaves for one training step.
    pub fn bind(&self, track: bool) -> BoundParams {
        let leaves = self
            .params
            .iter()
            .map(|p| Tensor::from_data(p.data.clone(), &p.shape, track).unwrap())
            .collect();
        BoundParams { leaves }
    }

    /// Apply `f` to every (param, gradient) pair after a backward pass.
    pub fn apply_grads(&mut self, bound: &BoundParams, mut f: impl FnMut(&mut Param, &[f64])) {
        for (param, leaf) in self.params.iter_mut().zip(&bound.leaves) {
            if let Some(grad) = leaf.grad() {
                f(param, &grad);
            }
        }
    }

    /// Gradients aligned with parameter order; zeros for untouched leaves.
    pub fn grads(&self, bound: &BoundParams) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&bound.leaves)
            .map(|(p, leaf)| leaf.grad().unwrap_or_else(|| vec![0.0; p.data.len()]))
            .collect()
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across runs
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Tape leaves for one forward/backward pass, aligned with the ParamSet.
pub struct BoundParams {
    leaves: Vec<Tensor>,
}

impl BoundParams {
    /// Weight/bias pair of the `i`-th convolution layer.
    pub fn pair(&self, conv_index: usize) -> (&Tensor, &Tensor) {
        (&self.leaves[2 * conv_index], &self.leaves[2 * conv_index + 1])
    }

    pub fn leaf(&self, index: usize) -> &Tensor {
        &self.leaves[index]
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
