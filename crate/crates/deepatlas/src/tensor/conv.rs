//! Convolution, max pooling and nearest-neighbor upsampling for 2-D and 3-D
//! spatial tensors, layout `[N, C, spatial...]`.
//!
//! Convolution uses cross-correlation semantics via im2col plus a small
//! hand-rolled matmul. Pooling ties resolve to the lowest linear index so
//! gradients are deterministic.

use super::{numel_of, Result, Tensor, TensorError};

/// c[m,n] += a[m,k] * b[k,n]
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

struct ConvGeom {
    c_in: usize,
    in_spatial: Vec<usize>,
    out_spatial: Vec<usize>,
    kernel_spatial: Vec<usize>,
    stride: Vec<usize>,
    pad: Vec<usize>,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * numel_of(&self.kernel_spatial)
    }
    fn out_n(&self) -> usize {
        numel_of(&self.out_spatial)
    }
    fn in_n(&self) -> usize {
        numel_of(&self.in_spatial)
    }
}

/// Expand one batch item `[C_in, spatial...]` into a `[patch, out_n]` matrix.
fn im2col(input: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let rank = g.in_spatial.len();
    let out_n = g.out_n();
    let k_n = numel_of(&g.kernel_spatial);
    let in_strides = super::strides_of(&g.in_spatial);
    let mut out_idx = vec![0usize; rank];
    for o in 0..out_n {
        let mut k_idx = vec![0usize; rank];
        for kf in 0..k_n {
            // input coordinate per axis; out of range samples are zero
            let mut off = 0usize;
            let mut inside = true;
            for ax in 0..rank {
                let coord = out_idx[ax] * g.stride[ax] + k_idx[ax];
                if coord < g.pad[ax] || coord - g.pad[ax] >= g.in_spatial[ax] {
                    inside = false;
                    break;
                }
                off += (coord - g.pad[ax]) * in_strides[ax];
            }
            if inside {
                let in_sz = g.in_n();
                for c in 0..g.c_in {
                    col[(c * k_n + kf) * out_n + o] = input[c * in_sz + off];
                }
            } else {
                for c in 0..g.c_in {
                    col[(c * k_n + kf) * out_n + o] = 0.0;
                }
            }
            for ax in (0..rank).rev() {
                k_idx[ax] += 1;
                if k_idx[ax] < g.kernel_spatial[ax] {
                    break;
                }
                k_idx[ax] = 0;
            }
        }
        for ax in (0..rank).rev() {
            out_idx[ax] += 1;
            if out_idx[ax] < g.out_spatial[ax] {
                break;
            }
            out_idx[ax] = 0;
        }
    }
}

/// Transpose of im2col: scatter a `[patch, out_n]` matrix back onto the input.
fn col2im(col: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    let rank = g.in_spatial.len();
    let out_n = g.out_n();
    let k_n = numel_of(&g.kernel_spatial);
    let in_strides = super::strides_of(&g.in_spatial);
    let in_sz = g.in_n();
    let mut out_idx = vec![0usize; rank];
    for o in 0..out_n {
        let mut k_idx = vec![0usize; rank];
        for kf in 0..k_n {
            let mut off = 0usize;
            let mut inside = true;
            for ax in 0..rank {
                let coord = out_idx[ax] * g.stride[ax] + k_idx[ax];
                if coord < g.pad[ax] || coord - g.pad[ax] >= g.in_spatial[ax] {
                    inside = false;
                    break;
                }
                off += (coord - g.pad[ax]) * in_strides[ax];
            }
            if inside {
                for c in 0..g.c_in {
                    input_grad[c * in_sz + off] += col[(c * k_n + kf) * out_n + o];
                }
            }
            for ax in (0..rank).rev() {
                k_idx[ax] += 1;
                if k_idx[ax] < g.kernel_spatial[ax] {
                    break;
                }
                k_idx[ax] = 0;
            }
        }
        for ax in (0..rank).rev() {
            out_idx[ax] += 1;
            if out_idx[ax] < g.out_spatial[ax] {
                break;
            }
            out_idx[ax] = 0;
        }
    }
}

impl Tensor {
    /// N-dimensional convolution (cross-correlation).
    ///
    /// `self`: `[N, C_in, spatial...]`, `kernel`: `[C_out, C_in, k...]`,
    /// spatial rank 2 or 3. Output extent per axis is
    /// `(in + 2*pad - k) / stride + 1` (floor).
    pub fn conv_nd(&self, kernel: &Tensor, stride: &[usize], pad: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len().saturating_sub(2);
        if !(rank == 2 || rank == 3) || kernel.shape().len() != rank + 2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_nd",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if kernel.shape()[1] != self.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_nd",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if stride.len() != rank || pad.len() != rank || stride.iter().any(|&s| s == 0) {
            return Err(TensorError::InvalidShape {
                op: "conv_nd",
                shape: self.shape().to_vec(),
                reason: format!("stride {stride:?} / pad {pad:?} must have length {rank}"),
            });
        }
        let batch = self.shape()[0];
        let c_in = self.shape()[1];
        let c_out = kernel.shape()[0];
        let in_spatial = self.shape()[2..].to_vec();
        let kernel_spatial = kernel.shape()[2..].to_vec();
        let mut out_spatial = vec![0usize; rank];
        for ax in 0..rank {
            let padded = in_spatial[ax] + 2 * pad[ax];
            if padded < kernel_spatial[ax] {
                return Err(TensorError::InvalidShape {
                    op: "conv_nd",
                    shape: self.shape().to_vec(),
                    reason: format!("kernel {kernel_spatial:?} larger than padded input"),
                });
            }
            out_spatial[ax] = (padded - kernel_spatial[ax]) / stride[ax] + 1;
        }
        let g = ConvGeom {
            c_in,
            in_spatial,
            out_spatial: out_spatial.clone(),
            kernel_spatial,
            stride: stride.to_vec(),
            pad: pad.to_vec(),
        };
        let patch = g.patch();
        let out_n = g.out_n();
        let in_sz = c_in * g.in_n();
        let out_sz = c_out * out_n;

        let mut out = vec![0.0; batch * out_sz];
        let mut col = vec![0.0; patch * out_n];
        for n in 0..batch {
            im2col(&self.data()[n * in_sz..(n + 1) * in_sz], &g, &mut col);
            matmul(
                kernel.data(),
                &col,
                c_out,
                patch,
                out_n,
                &mut out[n * out_sz..(n + 1) * out_sz],
            );
        }

        let mut out_shape = vec![batch, c_out];
        out_shape.extend_from_slice(&out_spatial);
        let input = self.clone();
        let kernel_t = kernel.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), kernel.clone()],
            Box::new(move |grad_out| {
                let mut g_in = vec![0.0; input.numel()];
                let mut g_kernel = vec![0.0; kernel_t.numel()];
                let mut col = vec![0.0; patch * out_n];
                let mut g_col = vec![0.0; patch * out_n];
                for n in 0..batch {
                    let go = &grad_out[n * out_sz..(n + 1) * out_sz];
                    im2col(&input.data()[n * in_sz..(n + 1) * in_sz], &g, &mut col);
                    matmul_a_bt(go, &col, c_out, out_n, patch, &mut g_kernel);
                    g_col.iter_mut().for_each(|v| *v = 0.0);
                    matmul_at_b(kernel_t.data(), go, c_out, patch, out_n, &mut g_col);
                    col2im(&g_col, &g, &mut g_in[n * in_sz..(n + 1) * in_sz]);
                }
                vec![Some(g_in), Some(g_kernel)]
            }),
        ))
    }

    /// Max pooling over `window` with `stride` (per spatial axis).
    pub fn max_pool(&self, window: &[usize], stride: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len().saturating_sub(2);
        if !(rank == 2 || rank == 3) || window.len() != rank || stride.len() != rank {
            return Err(TensorError::InvalidShape {
                op: "max_pool",
                shape: self.shape().to_vec(),
                reason: format!("window {window:?} / stride {stride:?} for rank {rank}"),
            });
        }
        let in_spatial = &self.shape()[2..];
        let mut out_spatial = vec![0usize; rank];
        for ax in 0..rank {
            if window[ax] == 0 || stride[ax] == 0 || window[ax] > in_spatial[ax] {
                return Err(TensorError::InvalidShape {
                    op: "max_pool",
                    shape: self.shape().to_vec(),
                    reason: format!("window {window:?} larger than input"),
                });
            }
            out_spatial[ax] = (in_spatial[ax] - window[ax]) / stride[ax] + 1;
        }
        let channels = self.shape()[0] * self.shape()[1];
        let in_strides = super::strides_of(in_spatial);
        let in_sz: usize = in_spatial.iter().product();
        let out_n: usize = out_spatial.iter().product();
        let data = self.data();

        let mut out = vec![0.0; channels * out_n];
        let mut arg = vec![0usize; channels * out_n];
        let k_n: usize = window.iter().product();
        for ch in 0..channels {
            let base = ch * in_sz;
            let mut out_idx = vec![0usize; rank];
            for o in 0..out_n {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                let mut k_idx = vec![0usize; rank];
                for _ in 0..k_n {
                    let mut off = 0usize;
                    for ax in 0..rank {
                        off += (out_idx[ax] * stride[ax] + k_idx[ax]) * in_strides[ax];
                    }
                    // window visited in increasing linear order, strict
                    // comparison keeps the lowest index on ties
                    if data[base + off] > best {
                        best = data[base + off];
                        best_at = base + off;
                    }
                    for ax in (0..rank).rev() {
                        k_idx[ax] += 1;
                        if k_idx[ax] < window[ax] {
                            break;
                        }
                        k_idx[ax] = 0;
                    }
                }
                out[ch * out_n + o] = best;
                arg[ch * out_n + o] = best_at;
                for ax in (0..rank).rev() {
                    out_idx[ax] += 1;
                    if out_idx[ax] < out_spatial[ax] {
                        break;
                    }
                    out_idx[ax] = 0;
                }
            }
        }
        let mut out_shape = self.shape()[..2].to_vec();
        out_shape.extend_from_slice(&out_spatial);
        let in_numel = self.numel();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |grad_out| {
                let mut g = vec![0.0; in_numel];
                for (o, &a) in arg.iter().enumerate() {
                    g[a] += grad_out[o];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Nearest-neighbor upsampling by an integer factor on every spatial axis.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let rank = self.shape().len().saturating_sub(2);
        if !(rank == 1 || rank == 2 || rank == 3) || factor == 0 {
            return Err(TensorError::InvalidShape {
                op: "upsample_nearest",
                shape: self.shape().to_vec(),
                reason: format!("factor {factor}, spatial rank {rank}"),
            });
        }
        let in_spatial = &self.shape()[2..];
        let out_spatial: Vec<usize> = in_spatial.iter().map(|&e| e * factor).collect();
        let channels = self.shape()[0] * self.shape()[1];
        let in_sz: usize = in_spatial.iter().product();
        let out_n: usize = out_spatial.iter().product();
        let in_strides = super::strides_of(in_spatial);
        let data = self.data();

        // out linear index -> in linear index within one channel plane
        let mut map = vec![0usize; out_n];
        let mut idx = vec![0usize; rank];
        for (o, m) in map.iter_mut().enumerate() {
            if o > 0 {
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if idx[ax] < out_spatial[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            let mut off = 0usize;
            for ax in 0..rank {
                off += (idx[ax] / factor) * in_strides[ax];
            }
            *m = off;
        }

        let mut out = vec![0.0; channels * out_n];
        for ch in 0..channels {
            let src = &data[ch * in_sz..(ch + 1) * in_sz];
            let dst = &mut out[ch * out_n..(ch + 1) * out_n];
            for (o, &m) in map.iter().enumerate() {
                dst[o] = src[m];
            }
        }
        let mut out_shape = self.shape()[..2].to_vec();
        out_shape.extend_from_slice(&out_spatial);
        let in_numel = self.numel();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |grad_out| {
                // gradient is the block sum over each upsampled cell
                let mut g = vec![0.0; in_numel];
                for ch in 0..channels {
                    let src = &grad_out[ch * out_n..(ch + 1) * out_n];
                    let dst = &mut g[ch * in_sz..(ch + 1) * in_sz];
                    for (o, &m) in map.iter().enumerate() {
                        dst[m] += src[o];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}
