//! Physical-grid resampling and intensity preprocessing.
//!
//! All resampling is defined on voxel-center coordinates with the
//! volume origin at the corner of voxel (0, 0, 0): voxel i of an axis
//! with spacing s has its center at (i + 0.5) * s. Output extents are
//! chosen per axis as round(n * s / t) so the field of view is
//! preserved as closely as the new spacing allows.

use super::{Axis, Volume3D};
use crate::error::{Error, Result};

fn target_extents(v: &Volume3D, target: [f64; 3]) -> Result<[usize; 3]> {
    if target.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::Config(format!("target spacing must be positive, got {target:?}")));
    }
    let src = v.extents();
    let sp = v.spacing();
    let mut out = [0usize; 3];
    for a in 0..3 {
        if src[a] == 1 {
            return Err(Error::Data(format!(
                "resample: axis {a} is degenerate (single voxel); interpolation undefined"
            )));
        }
        let n = (src[a] as f64 * sp[a] / target[a]).round() as usize;
        if n == 0 {
            return Err(Error::Config(format!(
                "target spacing {} leaves axis {a} empty",
                target[a]
            )));
        }
        out[a] = n;
    }
    Ok(out)
}

/// Source-index coordinate of output voxel center i: both centers at
/// (i + 0.5) * spacing, so u = ((i + 0.5) * t) / s - 0.5, clamped to
/// the valid index range (clamp-to-edge extrapolation).
#[inline]
fn source_coord(i: usize, t: f64, s: f64, n: usize) -> f64 {
    (((i as f64 + 0.5) * t) / s - 0.5).clamp(0.0, (n - 1) as f64)
}

/// Trilinear resampling onto a new spacing. Intended for images; masks
/// should use [`resample_nearest`] to stay binary.
pub fn resample_linear(v: &Volume3D, target: [f64; 3]) -> Result<Volume3D> {
    let out_ext = target_extents(v, target)?;
    let [nx, ny, nz] = v.extents();
    let sp = v.spacing();
    let mut out = Volume3D::zeros(out_ext, target)?;

    // Precompute per-axis floor index and fraction.
    let prep = |n_out: usize, t: f64, s: f64, n_src: usize| -> (Vec<usize>, Vec<f64>) {
        let mut idx = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let u = source_coord(i, t, s, n_src);
            let i0 = (u.floor() as usize).min(n_src - 2);
            idx.push(i0);
            frac.push(u - i0 as f64);
        }
        (idx, frac)
    };
    let (xi, xf) = prep(out_ext[0], target[0], sp[0], nx);
    let (yi, yf) = prep(out_ext[1], target[1], sp[1], ny);
    let (zi, zf) = prep(out_ext[2], target[2], sp[2], nz);

    let data = v.data();
    let stride_x = ny * nz;
    let stride_y = nz;
    let mut o = 0usize;
    for x in 0..out_ext[0] {
        let (x0, fx) = (xi[x], xf[x]);
        for y in 0..out_ext[1] {
            let (y0, fy) = (yi[y], yf[y]);
            let base00 = x0 * stride_x + y0 * stride_y;
            let base01 = base00 + stride_y;
            let base10 = base00 + stride_x;
            let base11 = base10 + stride_y;
            for z in 0..out_ext[2] {
                let (z0, fz) = (zi[z], zf[z]);
                let c000 = data[base00 + z0] as f64;
                let c001 = data[base00 + z0 + 1] as f64;
                let c010 = data[base01 + z0] as f64;
                let c011 = data[base01 + z0 + 1] as f64;
                let c100 = data[base10 + z0] as f64;
                let c101 = data[base10 + z0 + 1] as f64;
                let c110 = data[base11 + z0] as f64;
                let c111 = data[base11 + z0 + 1] as f64;
                let c00 = c000 + (c001 - c000) * fz;
                let c01 = c010 + (c011 - c010) * fz;
                let c10 = c100 + (c101 - c100) * fz;
                let c11 = c110 + (c111 - c110) * fz;
                let c0 = c00 + (c01 - c00) * fy;
                let c1 = c10 + (c11 - c10) * fy;
                out.data_mut()[o] = (c0 + (c1 - c0) * fx) as f32;
                o += 1;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resampling; exact for binary masks.
pub fn resample_nearest(v: &Volume3D, target: [f64; 3]) -> Result<Volume3D> {
    let out_ext = target_extents(v, target)?;
    let [nx, ny, nz] = v.extents();
    let sp = v.spacing();
    let mut out = Volume3D::zeros(out_ext, target)?;
    let nearest = |n_out: usize, t: f64, s: f64, n_src: usize| -> Vec<usize> {
        (0..n_out).map(|i| source_coord(i, t, s, n_src).round() as usize).collect()
    };
    let xi = nearest(out_ext[0], target[0], sp[0], nx);
    let yi = nearest(out_ext[1], target[1], sp[1], ny);
    let zi = nearest(out_ext[2], target[2], sp[2], nz);
    let mut o = 0usize;
    for x in &xi {
        for y in &yi {
            let base = (x * ny + y) * nz;
            for z in &zi {
                out.data_mut()[o] = v.data()[base + z];
                o += 1;
            }
        }
    }
    Ok(out)
}

/// Per-volume min-max normalization to [0, 1]. A constant volume
/// normalizes to all zeros (with a warning) rather than failing.
pub fn normalize_minmax(v: &Volume3D) -> Result<Volume3D> {
    v.validate_finite("normalize input")?;
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for val in v.data() {
        min = min.min(*val);
        max = max.max(*val);
    }
    if max == min {
        log::warn!("normalize_minmax: constant volume (value {min}); output is all zeros");
        return Volume3D::zeros(v.extents(), v.spacing());
    }
    let inv = 1.0 / (max - min) as f64;
    let data = v.data().iter().map(|x| (((x - min) as f64) * inv) as f32).collect();
    Volume3D::new(v.extents(), v.spacing(), data)
}

/// Center crop of the two in-plane axes (every axis except
/// `thick_axis`) down to `target`; the thick axis is kept whole.
pub fn crop_center_in_plane(v: &Volume3D, target: usize, thick_axis: Axis) -> Result<Volume3D> {
    if target == 0 {
        return Err(Error::Config("crop target must be positive".into()));
    }
    let src = v.extents();
    let mut out_ext = [0usize; 3];
    let mut offset = [0usize; 3];
    for a in 0..3 {
        if a == thick_axis.index() {
            out_ext[a] = src[a];
            offset[a] = 0;
        } else {
            if target > src[a] {
                return Err(Error::Shape(format!(
                    "crop target {target} exceeds axis {a} extent {}",
                    src[a]
                )));
            }
            out_ext[a] = target;
            offset[a] = (src[a] - target) / 2;
        }
    }
    let mut out = Volume3D::zeros(out_ext, v.spacing())?;
    let mut o = 0usize;
    for x in 0..out_ext[0] {
        for y in 0..out_ext[1] {
            for z in 0..out_ext[2] {
                out.data_mut()[o] = v.at(x + offset[0], y + offset[1], z + offset[2]);
                o += 1;
            }
        }
    }
    Ok(out)
}

/// Standard image preprocessing: min-max normalize, then center-crop
/// the in-plane axes to `target` (normalization first, so bright voxels
/// in the cropped-away margin still influence the scaling).
pub fn normalize_and_crop(v: &Volume3D, target: usize, thick_axis: Axis) -> Result<Volume3D> {
    let normalized = normalize_minmax(v)?;
    crop_center_in_plane(&normalized, target, thick_axis)
}
