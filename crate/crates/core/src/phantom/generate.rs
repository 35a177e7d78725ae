//! Analytic phantom rendering.
//!
//! The gland is a superellipsoid whose direction-dependent radius is
//! perturbed by a low-frequency spherical sinusoid, so every patient
//! has a smooth but individual shape. The surface test is purely
//! analytic: a point is inside iff its distance from the center does
//! not exceed the perturbed radius along its direction. Masks are
//! therefore rasterized exactly on any grid without resampling.

use super::{PatientViews, PhantomSpec, Volume3D};
use crate::error::Result;
use crate::rng::{stream, tags};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Per-patient shape and appearance parameters, drawn deterministically
/// from the patient seed.
struct GlandShape {
    center: [f64; 3],
    semi_axes: [f64; 3],
    exponent: f64,
    amp: f64,
    freq_polar: f64,
    freq_azimuth: f64,
    phase: f64,
    texture_period: [f64; 3],
    texture_phase: [f64; 3],
}

impl GlandShape {
    fn sample(spec: &PhantomSpec, patient_seed: u64) -> Self {
        let mut rng = stream(patient_seed, tags::PHANTOM_PATIENT);
        let half_fov = 0.5 * spec.fine_extent as f64 * spec.fine_spacing;
        let (lo, hi) = spec.semi_axes_mm;
        let jitter = spec.center_jitter_mm;
        let center = [
            half_fov + rng.gen_range(-jitter..=jitter),
            half_fov + rng.gen_range(-jitter..=jitter),
            half_fov + rng.gen_range(-jitter..=jitter),
        ];
        let semi_axes = [
            rng.gen_range(lo..=hi),
            rng.gen_range(lo..=hi),
            rng.gen_range(lo..=hi),
        ];
        let amp = rng.gen_range(0.0..=spec.perturb_amp_mm);
        let freq_polar = rng.gen_range(spec.perturb_freq.0..=spec.perturb_freq.1) as f64;
        let freq_azimuth = rng.gen_range(spec.perturb_freq.0..=spec.perturb_freq.1) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (tp_lo, tp_hi) = spec.texture_period_mm;
        let texture_period = [
            rng.gen_range(tp_lo..=tp_hi),
            rng.gen_range(tp_lo..=tp_hi),
            rng.gen_range(tp_lo..=tp_hi),
        ];
        let texture_phase = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        Self {
            center,
            semi_axes,
            exponent: spec.shape_exponent,
            amp,
            freq_polar,
            freq_azimuth,
            phase,
            texture_period,
            texture_phase,
        }
    }

    /// Gland radius along direction `u` (unit vector): superellipsoid
    /// radius plus the sinusoidal perturbation. The perturbation is
    /// multiplied by sin(polar angle) so it vanishes at the poles,
    /// where the azimuth is undefined.
    fn radius(&self, u: [f64; 3]) -> f64 {
        let e = self.exponent;
        let base = if e == 2.0 {
            let s = (u[0] / self.semi_axes[0]).powi(2)
                + (u[1] / self.semi_axes[1]).powi(2)
                + (u[2] / self.semi_axes[2]).powi(2);
            1.0 / s.sqrt()
        } else {
            let s = (u[0].abs() / self.semi_axes[0]).powf(e)
                + (u[1].abs() / self.semi_axes[1]).powf(e)
                + (u[2].abs() / self.semi_axes[2]).powf(e);
            s.powf(-1.0 / e)
        };
        let polar = u[2].clamp(-1.0, 1.0).acos();
        let azimuth = u[1].atan2(u[0]);
        let wobble = (self.freq_polar * polar).sin()
            * (self.freq_azimuth * azimuth + self.phase).sin()
            * polar.sin();
        base + self.amp * wobble
    }

    /// Signed position relative to the surface: negative inside.
    /// Measured radially in mm.
    fn surface_offset(&self, p: [f64; 3]) -> f64 {
        let v = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let rho = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if rho < 1e-9 {
            // At the exact center; deep inside for any positive radius.
            return -self.semi_axes[0].min(self.semi_axes[1]).min(self.semi_axes[2]);
        }
        let u = [v[0] / rho, v[1] / rho, v[2] / rho];
        rho - self.radius(u)
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        self.surface_offset(p) <= 0.0
    }

    fn texture(&self, p: [f64; 3]) -> f64 {
        let mut t = 1.0;
        for a in 0..3 {
            t *= (std::f64::consts::TAU * p[a] / self.texture_period[a] + self.texture_phase[a])
                .sin();
        }
        t
    }
}

/// Separable Gaussian blur in-place on the fine grid; sigma in mm.
fn gaussian_blur(v: &mut Volume3D, sigma_mm: f64) {
    if sigma_mm <= 0.0 {
        return;
    }
    let [nx, ny, nz] = v.extents();
    let spacing = v.spacing();
    for axis in 0..3 {
        let sigma_vox = sigma_mm / spacing[axis];
        let radius = (3.0 * sigma_vox).ceil() as isize;
        if radius == 0 {
            continue;
        }
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

        let n = [nx, ny, nz][axis];
        let stride = match axis {
            0 => ny * nz,
            1 => nz,
            _ => 1,
        };
        let out_of = |i: [usize; 3]| (i[0] * ny + i[1]) * nz + i[2];
        let mut line = vec![0f64; n];
        // Iterate over all lines along `axis`.
        let (outer_a, outer_b) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for oa in 0..outer_a {
            for ob in 0..outer_b {
                let base = match axis {
                    0 => out_of([0, oa, ob]),
                    1 => out_of([oa, 0, ob]),
                    _ => out_of([oa, ob, 0]),
                };
                for (i, l) in line.iter_mut().enumerate() {
                    *l = v.data()[base + i * stride] as f64;
                }
                for i in 0..n {
                    let mut acc = 0f64;
                    for (j, k) in kernel.iter().enumerate() {
                        // Clamp-to-edge boundary handling.
                        let src = (i as isize + j as isize - radius).clamp(0, n as isize - 1);
                        acc += line[src as usize] * k;
                    }
                    v.data_mut()[base + i * stride] = acc as f32;
                }
            }
        }
    }
}

/// Render the fine-grid intensity image and analytic mask for one
/// patient. Exposed separately so consistency tests can compare
/// view-grid volumes against the generation grid.
pub fn render_fine(spec: &PhantomSpec, patient_seed: u64) -> Result<(Volume3D, Volume3D)> {
    spec.validate()?;
    let shape = GlandShape::sample(spec, patient_seed);
    let n = spec.fine_extent;
    let s = spec.fine_spacing;
    let mut image = Volume3D::zeros([n, n, n], [s, s, s])?;
    let mut mask = Volume3D::zeros([n, n, n], [s, s, s])?;

    let mut noise_rng = stream(patient_seed, tags::PHANTOM_NOISE);
    let noise = Normal::new(0.0f64, spec.noise_sigma as f64).map_err(|e| {
        crate::error::Error::Config(format!("invalid noise sigma {}: {e}", spec.noise_sigma))
    })?;

    let mut idx = 0usize;
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let p = image.voxel_center(x, y, z);
                let off = shape.surface_offset(p);
                let base = if off <= -spec.rim_width_mm {
                    spec.intensity_interior as f64
                        + spec.texture_amp as f64 * shape.texture(p)
                } else if off <= 0.0 {
                    spec.intensity_rim as f64
                } else {
                    spec.intensity_background as f64
                };
                // Draw exactly one noise sample per voxel regardless of
                // region, keeping the stream layout stable.
                let value = base + noise.sample(&mut noise_rng);
                image.data_mut()[idx] = value as f32;
                if off <= 0.0 {
                    mask.data_mut()[idx] = 1.0;
                }
                idx += 1;
            }
        }
    }
    gaussian_blur(&mut image, spec.blur_sigma_mm);
    image.validate_finite("fine phantom image")?;
    Ok((image, mask))
}

/// Rasterize the analytic gland mask at the voxel centers of an
/// arbitrary grid.
fn rasterize_mask(shape: &GlandShape, extents: [usize; 3], spacing: [f64; 3]) -> Result<Volume3D> {
    let mut mask = Volume3D::zeros(extents, spacing)?;
    let mut idx = 0usize;
    for x in 0..extents[0] {
        for y in 0..extents[1] {
            for z in 0..extents[2] {
                if shape.inside(mask.voxel_center(x, y, z)) {
                    mask.data_mut()[idx] = 1.0;
                }
                idx += 1;
            }
        }
    }
    Ok(mask)
}

/// Extents of the view grid covering the same field of view as the
/// fine grid at the given spacing.
fn view_extents(spec: &PhantomSpec, spacing: [f64; 3]) -> [usize; 3] {
    let fov = spec.fine_extent as f64 * spec.fine_spacing;
    [
        (fov / spacing[0]).round() as usize,
        (fov / spacing[1]).round() as usize,
        (fov / spacing[2]).round() as usize,
    ]
}

/// Generate one patient: render the fine phantom, resample the image
/// trilinearly to the three anisotropic view grids, rasterize the
/// ground-truth mask analytically on the axial grid, and keep the
/// fine-grid oracle mask. Deterministic from (spec, patient_seed).
pub fn generate_phantom(
    spec: &PhantomSpec,
    patient_id: &str,
    patient_seed: u64,
) -> Result<PatientViews> {
    let (fine_image, oracle_mask) = render_fine(spec, patient_seed)?;
    let shape = GlandShape::sample(spec, patient_seed);

    let axial = super::resample_linear(&fine_image, spec.axial_spacing)?;
    let sagittal = super::resample_linear(&fine_image, spec.sagittal_spacing)?;
    let coronal = super::resample_linear(&fine_image, spec.coronal_spacing)?;
    let axial_mask = rasterize_mask(&shape, view_extents(spec, spec.axial_spacing), spec.axial_spacing)?;

    let views = PatientViews {
        patient_id: patient_id.to_string(),
        axial,
        sagittal,
        coronal,
        axial_mask,
        oracle_mask: Some(oracle_mask),
    };
    views.validate()?;
    Ok(views)
}
