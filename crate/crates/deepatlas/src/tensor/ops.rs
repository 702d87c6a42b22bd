//! Elementwise arithmetic, reductions, softmax and shape manipulation.

use super::{numel_of, strides_of, Result, Tensor, TensorError};

/// Broadcast result shape: right-aligned, each pair of extents equal or 1.
/// Rank promotion happens only by padding leading axes of the shorter shape.
fn broadcast_shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let a = if i < rank - lhs.len() { 1 } else { lhs[i - (rank - lhs.len())] };
        let b = if i < rank - rhs.len() { 1 } else { rhs[i - (rank - rhs.len())] };
        out[i] = if a == b {
            a
        } else if a == 1 {
            b
        } else if b == 1 {
            a
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        };
    }
    Ok(out)
}

/// For each linear index of `out_shape`, the linear index into `in_shape`
/// (right-aligned, singleton axes pinned at 0).
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides_of(in_shape);
    // effective stride per out axis
    let mut eff = vec![0usize; rank];
    for i in pad..rank {
        if in_shape[i - pad] != 1 {
            eff[i] = in_strides[i - pad];
        }
    }
    let n = numel_of(out_shape);
    let mut offsets = vec![0usize; n];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for slot in offsets.iter_mut() {
        *slot = off;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Fold a full-shape gradient back onto a (possibly broadcast) parent shape.
fn reduce_to_shape(grad: &[f64], offsets: &[usize], parent_numel: usize) -> Vec<f64> {
    let mut out = vec![0.0; parent_numel];
    for (g, &o) in grad.iter().zip(offsets) {
        out[o] += g;
    }
    out
}

fn binary_op(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    // partials (df/da, df/db) at (a, b)
    df: fn(f64, f64) -> (f64, f64),
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let oa = broadcast_offsets(&out_shape, a.shape());
    let ob = broadcast_offsets(&out_shape, b.shape());
    let ad = a.data();
    let bd = b.data();
    let data: Vec<f64> = oa
        .iter()
        .zip(&ob)
        .map(|(&ia, &ib)| f(ad[ia], bd[ib]))
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |grad_out| {
            let ad = pa.data();
            let bd = pb.data();
            let mut ga = vec![0.0; grad_out.len()];
            let mut gb = vec![0.0; grad_out.len()];
            for i in 0..grad_out.len() {
                let (da, db) = df(ad[oa[i]], bd[ob[i]]);
                ga[i] = grad_out[i] * da;
                gb[i] = grad_out[i] * db;
            }
            vec![
                Some(reduce_to_shape(&ga, &oa, na)),
                Some(reduce_to_shape(&gb, &ob, nb)),
            ]
        }),
    ))
}

fn unary_op(
    a: &Tensor,
    f: impl Fn(f64) -> f64,
    // derivative as a function of (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let pa = a.clone();
    let out = data.clone();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |grad_out| {
            let ad = pa.data();
            let g: Vec<f64> = grad_out
                .iter()
                .enumerate()
                .map(|(i, g)| g * df(ad[i], out[i]))
                .collect();
            vec![Some(g)]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("add", self, other, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("sub", self, other, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_op("mul", self, other, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary_op(
            "div",
            self,
            other,
            |a, b| a / b,
            |a, b| (1.0 / b, -a / (b * b)),
        )
    }

    pub fn neg(&self) -> Tensor {
        unary_op(self, |x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary_op(self, f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::NumericDomain {
                op: "log",
                value: bad,
            });
        }
        Ok(unary_op(self, f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|&&x| x < 0.0) {
            return Err(TensorError::NumericDomain {
                op: "sqrt",
                value: bad,
            });
        }
        Ok(unary_op(self, f64::sqrt, |_, y| 0.5 / y))
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        unary_op(
            self,
            move |x| if x >= 0.0 { x } else { alpha * x },
            move |x, _| if x >= 0.0 { 1.0 } else { alpha },
        )
    }

    pub fn square(&self) -> Tensor {
        unary_op(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary_op(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary_op(self, move |x| x * c, move |_, _| c)
    }

    /// Reduction over `axes` (None = all axes). `keep_dims` keeps reduced
    /// extents as 1. Max ties resolve to the lowest linear index.
    pub fn reduce(&self, op: Reduce, axes: Option<&[usize]>, keep_dims: bool) -> Result<Tensor> {
        let rank = self.shape().len();
        let axes: Vec<usize> = match axes {
            None => (0..rank).collect(),
            Some(a) => {
                if a.is_empty() {
                    return Err(TensorError::EmptyReduction);
                }
                let mut v = a.to_vec();
                v.sort_unstable();
                v.dedup();
                for &ax in &v {
                    if ax >= rank {
                        return Err(TensorError::InvalidAxis {
                            op: "reduce",
                            axis: ax,
                            rank,
                        });
                    }
                }
                v
            }
        };
        let reduced: Vec<bool> = (0..rank).map(|i| axes.contains(&i)).collect();
        let out_shape: Vec<usize> = if keep_dims {
            self.shape()
                .iter()
                .enumerate()
                .map(|(i, &e)| if reduced[i] { 1 } else { e })
                .collect()
        } else {
            self.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !reduced[*i])
                .map(|(_, &e)| e)
                .collect()
        };
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        if self.numel() == 0 || count == 0 {
            return Err(TensorError::EmptyReduction);
        }

        // input linear index -> output linear index
        let out_strides = strides_of(&out_shape);
        let in_numel = self.numel();
        let mut map = vec![0usize; in_numel];
        {
            let mut idx = vec![0usize; rank];
            for (i, m) in map.iter_mut().enumerate() {
                if i > 0 {
                    for ax in (0..rank).rev() {
                        idx[ax] += 1;
                        if idx[ax] < self.shape()[ax] {
                            break;
                        }
                        idx[ax] = 0;
                    }
                }
                let mut off = 0usize;
                let mut oax = 0usize;
                for ax in 0..rank {
                    if reduced[ax] {
                        if keep_dims {
                            oax += 1;
                        }
                        continue;
                    }
                    off += idx[ax] * out_strides[oax];
                    oax += 1;
                }
                *m = off;
            }
        }

        let out_numel = numel_of(&out_shape);
        let data = self.data();
        let parent = self.clone();
        match op {
            Reduce::Sum | Reduce::Mean => {
                let scale = if op == Reduce::Mean {
                    1.0 / count as f64
                } else {
                    1.0
                };
                let mut out = vec![0.0; out_numel];
                for (i, &m) in map.iter().enumerate() {
                    out[m] += data[i];
                }
                for v in out.iter_mut() {
                    *v *= scale;
                }
                let bmap = map.clone();
                Ok(Tensor::from_op(
                    out,
                    out_shape,
                    vec![parent],
                    Box::new(move |grad_out| {
                        vec![Some(bmap.iter().map(|&m| grad_out[m] * scale).collect())]
                    }),
                ))
            }
            Reduce::Max => {
                let mut out = vec![f64::NEG_INFINITY; out_numel];
                let mut arg = vec![usize::MAX; out_numel];
                for (i, &m) in map.iter().enumerate() {
                    if data[i] > out[m] || arg[m] == usize::MAX {
                        out[m] = data[i];
                        arg[m] = i;
                    }
                }
                Ok(Tensor::from_op(
                    out,
                    out_shape,
                    vec![parent],
                    Box::new(move |grad_out| {
                        let mut g = vec![0.0; in_numel];
                        for (o, &a) in arg.iter().enumerate() {
                            g[a] += grad_out[o];
                        }
                        vec![Some(g)]
                    }),
                ))
            }
        }
    }

    pub fn sum_all(&self) -> Tensor {
        self.reduce(Reduce::Sum, None, false).unwrap()
    }

    pub fn mean_all(&self) -> Tensor {
        self.reduce(Reduce::Mean, None, false).unwrap()
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let extent = self.shape()[axis];
        let strides = strides_of(self.shape());
        let step = strides[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let data = self.data();
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * step + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..extent {
                    m = m.max(data[base + k * step]);
                }
                let mut z = 0.0;
                for k in 0..extent {
                    let e = (data[base + k * step] - m).exp();
                    out[base + k * step] = e;
                    z += e;
                }
                for k in 0..extent {
                    out[base + k * step] /= z;
                }
            }
        }
        let saved = out.clone();
        let numel = self.numel();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |grad_out| {
                let mut g = vec![0.0; numel];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * step + i;
                        let mut dot = 0.0;
                        for k in 0..extent {
                            let p = base + k * step;
                            dot += grad_out[p] * saved[p];
                        }
                        for k in 0..extent {
                            let p = base + k * step;
                            g[p] = saved[p] * (grad_out[p] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Contiguous slice of `len` elements starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank,
            });
        }
        if start + len > self.shape()[axis] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape: self.shape().to_vec(),
                reason: format!("slice {start}..{} on axis {axis}", start + len),
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let extent = self.shape()[axis];
        let data = self.data();
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let in_numel = self.numel();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |grad_out| {
                let mut g = vec![0.0; in_numel];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * extent + start) * inner;
                    g[dst..dst + len * inner].copy_from_slice(&grad_out[src..src + len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = 0;
        for p in parts {
            if p.shape().len() != rank
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != parts[0].shape()[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut off = 0usize;
        for (p, &len) in parts.iter().zip(&lens) {
            let data = p.data();
            for o in 0..outer {
                let dst = (o * total + off) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
            }
            off += len;
        }
        let part_numels: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Ok(Tensor::from_op(
            out,
            out_shape,
            parts.to_vec(),
            Box::new(move |grad_out| {
                let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(lens.len());
                let mut off = 0usize;
                for (k, &len) in lens.iter().enumerate() {
                    let mut g = vec![0.0; part_numels[k]];
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        let dst = o * len * inner;
                        g[dst..dst + len * inner]
                            .copy_from_slice(&grad_out[src..src + len * inner]);
                    }
                    grads.push(Some(g));
                    off += len;
                }
                grads
            }),
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel_of(new_shape) != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                reason: format!("element count differs from {:?}", self.shape()),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            Box::new(move |grad_out| vec![Some(grad_out.to_vec())]),
        ))
    }
}
