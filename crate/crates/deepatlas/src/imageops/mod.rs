//! Differentiable spatial operations: normalized-coordinate grid sampling
//! (warping), identity grids, finite-difference derivative stencils and the
//! Jacobian-determinant folding diagnostic.
//!
//! Coordinates are normalized so every image axis spans [-1, 1]; a voxel grid
//! of extent E has spacing 2/(E-1) in normalized units (extent 1 maps to 0).
//! Out-of-range sample positions clamp to the border.

use crate::tensor::{Result, Tensor, TensorError};

/// Per-voxel displacement in normalized coordinates, `[N, d, spatial...]`
/// with `d` equal to the spatial rank. The deformation map is u + id.
#[derive(Clone, Debug)]
pub struct DisplacementField(Tensor);

impl DisplacementField {
    pub fn new(u: Tensor) -> Result<DisplacementField> {
        let shape = u.shape();
        let rank = shape.len().saturating_sub(2);
        if !(rank == 2 || rank == 3) || shape[1] != rank {
            return Err(TensorError::InvalidShape {
                op: "DisplacementField",
                shape: shape.to_vec(),
                reason: format!("expected [N, {rank}, spatial...] with d = spatial rank"),
            });
        }
        if u.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NumericDomain {
                op: "DisplacementField",
                value: f64::NAN,
            });
        }
        Ok(DisplacementField(u))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn spatial_rank(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.0.shape()[2..]
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    /// Absolute sample coordinates of the deformation map, u + id.
    pub fn deformation_map(&self) -> Tensor {
        let id = identity_grid(self.spatial_shape());
        let mut shape = vec![1];
        shape.extend_from_slice(id.shape());
        let id = id.reshape(&shape).unwrap();
        self.0.add(&id).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

/// Identity grid `[d, spatial...]`: coordinate along axis i varies linearly
/// from -1 to +1 across its extent (0 for extent 1). Endpoints are exact.
pub fn identity_grid(spatial_shape: &[usize]) -> Tensor {
    let d = spatial_shape.len();
    let n: usize = spatial_shape.iter().product();
    let mut data = vec![0.0; d * n];
    let mut idx = vec![0usize; d];
    for v in 0..n {
        if v > 0 {
            for ax in (0..d).rev() {
                idx[ax] += 1;
                if idx[ax] < spatial_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        for ax in 0..d {
            let e = spatial_shape[ax];
            data[ax * n + v] = if e <= 1 {
                0.0
            } else if idx[ax] == e - 1 {
                1.0
            } else {
                -1.0 + 2.0 * idx[ax] as f64 / (e - 1) as f64
            };
        }
    }
    let mut shape = vec![d];
    shape.extend_from_slice(spatial_shape);
    Tensor::constant(data, &shape).unwrap()
}

/// Resample `image` at the deformed positions id + u.
///
/// Linear mode is differentiable w.r.t. both image and field; nearest mode is
/// evaluation-only. A zero field reproduces the image bit-exactly in linear
/// mode: sampling positions are formed directly in voxel units as
/// `voxel_index + u * (E-1)/2`.
pub fn warp(image: &Tensor, field: &DisplacementField, interp: Interp) -> Result<Tensor> {
    let rank = field.spatial_rank();
    if image.shape().len() != rank + 2
        || image.shape()[0] != field.batch()
        || image.shape()[2..] != *field.spatial_shape()
    {
        return Err(TensorError::ShapeMismatch {
            op: "warp",
            lhs: image.shape().to_vec(),
            rhs: field.tensor().shape().to_vec(),
        });
    }
    let batch = image.shape()[0];
    let channels = image.shape()[1];
    let spatial = field.spatial_shape().to_vec();
    let n: usize = spatial.iter().product();
    let img = image.data();
    let u = field.tensor().data();
    let strides = crate::tensor::strides_of(&spatial);

    // Per sample point and axis: lower corner, interpolation weight, and the
    // d(voxel coordinate)/d(normalized displacement) factor (0 when clamped).
    let corners = 1usize << rank;
    let mut out = vec![0.0; batch * channels * n];

    let sample_point = |b: usize, v: usize, idx: &[usize]| -> ([usize; 3], [f64; 3], [f64; 3]) {
        let mut lo = [0usize; 3];
        let mut w = [0.0f64; 3];
        let mut dv = [0.0f64; 3];
        for ax in 0..rank {
            let e = spatial[ax];
            if e == 1 {
                continue;
            }
            let half = (e - 1) as f64 / 2.0;
            let pos = idx[ax] as f64 + u[(b * rank + ax) * n + v] * half;
            let clamped = pos.clamp(0.0, (e - 1) as f64);
            let f = (clamped.floor() as usize).min(e - 2);
            lo[ax] = f;
            w[ax] = clamped - f as f64;
            dv[ax] = if pos > 0.0 && pos < (e - 1) as f64 { half } else { 0.0 };
        }
        (lo, w, dv)
    };

    let mut idx = vec![0usize; rank];
    for b in 0..batch {
        idx.iter_mut().for_each(|i| *i = 0);
        for v in 0..n {
            if v > 0 {
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    if idx[ax] < spatial[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            let (lo, w, _) = sample_point(b, v, &idx);
            match interp {
                Interp::Linear => {
                    for c in 0..channels {
                        let plane = &img[(b * channels + c) * n..(b * channels + c + 1) * n];
                        let mut acc = 0.0;
                        for corner in 0..corners {
                            let mut off = 0usize;
                            let mut weight = 1.0;
                            for ax in 0..rank {
                                let hi = (corner >> ax) & 1 == 1;
                                off += (lo[ax] + hi as usize).min(spatial[ax] - 1)
                                    * strides[ax];
                                weight *= if hi { w[ax] } else { 1.0 - w[ax] };
                            }
                            acc += weight * plane[off];
                        }
                        out[(b * channels + c) * n + v] = acc;
                    }
                }
                Interp::Nearest => {
                    let mut off = 0usize;
                    for ax in 0..rank {
                        off += (lo[ax] + (w[ax] >= 0.5) as usize) * strides[ax];
                    }
                    for c in 0..channels {
                        out[(b * channels + c) * n + v] = img[(b * channels + c) * n + off];
                    }
                }
            }
        }
    }

    let out_shape = image.shape().to_vec();
    match interp {
        Interp::Nearest => Ok(Tensor::from_op(
            out,
            out_shape,
            vec![image.clone(), field.tensor().clone()],
            Box::new(|_| vec![None, None]),
        )),
        Interp::Linear => {
            let image_p = image.clone();
            let field_p = field.tensor().clone();
            Ok(Tensor::from_op(
                out,
                out_shape,
                vec![image.clone(), field.tensor().clone()],
                Box::new(move |grad_out| {
                    let img = image_p.data();
                    let u = field_p.data();
                    let mut g_img = vec![0.0; image_p.numel()];
                    let mut g_u = vec![0.0; field_p.numel()];
                    let mut idx = vec![0usize; rank];
                    for b in 0..batch {
                        idx.iter_mut().for_each(|i| *i = 0);
                        for v in 0..n {
                            if v > 0 {
                                for ax in (0..rank).rev() {
                                    idx[ax] += 1;
                                    if idx[ax] < spatial[ax] {
                                        break;
                                    }
                                    idx[ax] = 0;
                                }
                            }
                            // recompute the stencil, as in the forward pass
                            let mut lo = [0usize; 3];
                            let mut w = [0.0f64; 3];
                            let mut dv = [0.0f64; 3];
                            for ax in 0..rank {
                                let e = spatial[ax];
                                if e == 1 {
                                    continue;
                                }
                                let half = (e - 1) as f64 / 2.0;
                                let pos = idx[ax] as f64 + u[(b * rank + ax) * n + v] * half;
                                let clamped = pos.clamp(0.0, (e - 1) as f64);
                                let f = (clamped.floor() as usize).min(e - 2);
                                lo[ax] = f;
                                w[ax] = clamped - f as f64;
                                dv[ax] =
                                    if pos > 0.0 && pos < (e - 1) as f64 { half } else { 0.0 };
                            }
                            for c in 0..channels {
                                let go = grad_out[(b * channels + c) * n + v];
                                if go == 0.0 {
                                    continue;
                                }
                                let plane_base = (b * channels + c) * n;
                                for corner in 0..corners {
                                    let mut off = 0usize;
                                    let mut weight = 1.0;
                                    for ax in 0..rank {
                                        let hi = (corner >> ax) & 1 == 1;
                                        off += (lo[ax] + hi as usize).min(spatial[ax] - 1)
                                            * strides[ax];
                                        weight *= if hi { w[ax] } else { 1.0 - w[ax] };
                                    }
                                    g_img[plane_base + off] += go * weight;
                                    // field gradient: product rule over axes
                                    let val = img[plane_base + off];
                                    for gax in 0..rank {
                                        if dv[gax] == 0.0 {
                                            continue;
                                        }
                                        let mut dw = 1.0;
                                        for ax in 0..rank {
                                            let hi = (corner >> ax) & 1 == 1;
                                            if ax == gax {
                                                dw *= if hi { 1.0 } else { -1.0 };
                                            } else {
                                                dw *= if hi { w[ax] } else { 1.0 - w[ax] };
                                            }
                                        }
                                        g_u[(b * rank + gax) * n + v] +=
                                            go * val * dw * dv[gax];
                                    }
                                }
                            }
                        }
                    }
                    vec![Some(g_img), Some(g_u)]
                }),
            ))
        }
    }
}

/// Normalized-coordinate grid spacing along a spatial axis.
fn spacing(extent: usize) -> f64 {
    2.0 / (extent as f64 - 1.0)
}

/// Central first difference along spatial axis `ax` (0-based within the
/// spatial extents); the differentiated axis shrinks to its interior.
fn central_diff(t: &Tensor, ax: usize, extent: usize, h: f64) -> Result<Tensor> {
    let axis = ax + 2; // skip batch and channel axes
    let plus = t.narrow(axis, 2, extent - 2)?;
    let minus = t.narrow(axis, 0, extent - 2)?;
    Ok(plus.sub(&minus)?.mul_scalar(1.0 / (2.0 * h)))
}

/// Compact second difference along spatial axis `ax`.
fn second_diff(t: &Tensor, ax: usize, extent: usize, h: f64) -> Result<Tensor> {
    let axis = ax + 2;
    let plus = t.narrow(axis, 2, extent - 2)?;
    let mid = t.narrow(axis, 1, extent - 2)?;
    let minus = t.narrow(axis, 0, extent - 2)?;
    Ok(plus
        .add(&minus)?
        .sub(&mid.mul_scalar(2.0))?
        .mul_scalar(1.0 / (h * h)))
}

/// Crop every spatial axis in `skip == false` positions to its interior.
fn crop_interior(t: &Tensor, full_spatial: &[usize], skip: &[bool]) -> Result<Tensor> {
    let mut out = t.clone();
    for (ax, (&e, &s)) in full_spatial.iter().zip(skip).enumerate() {
        if s {
            continue;
        }
        out = out.narrow(ax + 2, 1, e - 2)?;
    }
    Ok(out)
}

fn require_interior(field: &DisplacementField, op: &'static str) -> Result<()> {
    if field.spatial_shape().iter().any(|&e| e < 3) {
        return Err(TensorError::InvalidShape {
            op,
            shape: field.tensor().shape().to_vec(),
            reason: "every spatial extent must be >= 3".into(),
        });
    }
    Ok(())
}

/// All Hessian entries of every displacement component on the common interior:
/// `[N, d, d, d, interior...]` indexed (component, p, q). Mixed partials use
/// the symmetric 4-point stencil; diagonal entries the compact 3-point one.
pub fn hessian(field: &DisplacementField) -> Result<Tensor> {
    require_interior(field, "hessian")?;
    let d = field.spatial_rank();
    let spatial = field.spatial_shape().to_vec();
    let batch = field.batch();
    let interior: Vec<usize> = spatial.iter().map(|&e| e - 2).collect();
    let mut parts = Vec::with_capacity(d * d * d);
    for comp in 0..d {
        let ui = field.tensor().narrow(1, comp, 1)?;
        for p in 0..d {
            for q in 0..d {
                parts.push(hessian_entry(&ui, &spatial, p, q)?);
            }
        }
    }
    let stacked = Tensor::concat(&parts, 1)?;
    let mut shape = vec![batch, d, d, d];
    shape.extend_from_slice(&interior);
    stacked.reshape(&shape)
}

/// One Hessian entry (p, q) of a single-channel field `[N, 1, spatial...]`,
/// cropped to the common interior.
pub(crate) fn hessian_entry(
    ui: &Tensor,
    spatial: &[usize],
    p: usize,
    q: usize,
) -> Result<Tensor> {
    let d = spatial.len();
    let mut skip = vec![false; d];
    let entry = if p == q {
        skip[p] = true;
        second_diff(ui, p, spatial[p], spacing(spatial[p]))?
    } else {
        skip[p] = true;
        skip[q] = true;
        let first = central_diff(ui, p, spatial[p], spacing(spatial[p]))?;
        central_diff(&first, q, spatial[q], spacing(spatial[q]))?
    };
    crop_interior(&entry, spatial, &skip)
}

/// First spatial derivatives of every component on the interior:
/// `[N, d, d, interior...]` indexed (component, axis).
pub fn jacobian(field: &DisplacementField) -> Result<Tensor> {
    require_interior(field, "jacobian")?;
    let d = field.spatial_rank();
    let spatial = field.spatial_shape().to_vec();
    let interior: Vec<usize> = spatial.iter().map(|&e| e - 2).collect();
    let mut parts = Vec::with_capacity(d * d);
    for comp in 0..d {
        let ui = field.tensor().narrow(1, comp, 1)?;
        for ax in 0..d {
            let mut skip = vec![false; d];
            skip[ax] = true;
            let diff = central_diff(&ui, ax, spatial[ax], spacing(spatial[ax]))?;
            parts.push(crop_interior(&diff, &spatial, &skip)?);
        }
    }
    let stacked = Tensor::concat(&parts, 1)?;
    let mut shape = vec![field.batch(), d, d];
    shape.extend_from_slice(&interior);
    stacked.reshape(&shape)
}

/// Spatial derivatives of the field: order 1 gives `[N, d, d, interior...]`,
/// order 2 gives all Hessian entries `[N, d, d, d, interior...]`.
pub fn spatial_derivatives(field: &DisplacementField, order: u8) -> Result<Tensor> {
    match order {
        1 => jacobian(field),
        2 => hessian(field),
        _ => Err(TensorError::InvalidShape {
            op: "spatial_derivatives",
            shape: field.tensor().shape().to_vec(),
            reason: format!("order must be 1 or 2, got {order}"),
        }),
    }
}

/// det(∇Φ⁻¹) per interior voxel, `[N, interior...]`. Untracked diagnostic.
pub fn jacobian_determinant(field: &DisplacementField) -> Result<Tensor> {
    let jac = jacobian(field)?.detach();
    let d = field.spatial_rank();
    let batch = field.batch();
    let n: usize = jac.shape()[3..].iter().product();
    let data = jac.data();
    let mut out = vec![0.0; batch * n];
    let at = |b: usize, i: usize, j: usize, v: usize| {
        // d(phi_i)/dx_j = delta_ij + du_i/dx_j
        let delta = if i == j { 1.0 } else { 0.0 };
        delta + data[((b * d + i) * d + j) * n + v]
    };
    for b in 0..batch {
        for v in 0..n {
            out[b * n + v] = match d {
                2 => at(b, 0, 0, v) * at(b, 1, 1, v) - at(b, 0, 1, v) * at(b, 1, 0, v),
                3 => {
                    at(b, 0, 0, v)
                        * (at(b, 1, 1, v) * at(b, 2, 2, v) - at(b, 1, 2, v) * at(b, 2, 1, v))
                        - at(b, 0, 1, v)
                            * (at(b, 1, 0, v) * at(b, 2, 2, v) - at(b, 1, 2, v) * at(b, 2, 0, v))
                        + at(b, 0, 2, v)
                            * (at(b, 1, 0, v) * at(b, 2, 1, v) - at(b, 1, 1, v) * at(b, 2, 0, v))
                }
                _ => unreachable!(),
            };
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(&jac.shape()[3..]);
    Tensor::constant(out, &shape)
}

#[cfg(test)]
mod tests;
