//! Synthetic multi-view phantom data: generation, resampling,
//! preprocessing, slice-triplet pairing, splits, and dataset I/O.
//!
//! A phantom patient is a perturbed-ellipsoid "gland" rendered on a
//! fine isotropic grid and then resampled to three anisotropic view
//! grids whose thick axis rotates per view (axial: thick z, sagittal:
//! thick x, coronal: thick y). All three views of one patient cover
//! exactly the same physical field of view, and the axial ground-truth
//! mask is rasterized analytically so it is binary by construction.

mod generate;
mod io;
mod resample;
mod split;
mod triplets;

pub use generate::{generate_phantom, render_fine};
pub use io::{load_dataset, load_volume, save_dataset, save_volume, DatasetMeta};
pub use resample::{
    crop_center_in_plane, normalize_and_crop, normalize_minmax, resample_linear, resample_nearest,
};
pub use split::{kfold, split_patients};
pub use triplets::{make_triplets, preprocess_views, slice_at, PreprocessedPatient};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Anatomical axis of a volume. Also identifies the thick
/// (low-resolution) axis of each view: z for axial stacks, x for
/// sagittal, y for coronal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// The three acquisition orientations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Axial,
    Sagittal,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];

    /// The low-resolution (slice-stacking) axis of this view.
    pub fn thick_axis(self) -> Axis {
        match self {
            View::Axial => Axis::Z,
            View::Sagittal => Axis::X,
            View::Coronal => Axis::Y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        }
    }
}

/// A dense scalar volume with physical voxel spacing in millimetres.
///
/// Data is row-major with x slowest and z fastest:
/// `flat = (x * ny + y) * nz + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if extents.iter().any(|e| *e == 0) {
            return Err(Error::Shape(format!("volume extents must be positive, got {extents:?}")));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "voxel spacing must be finite and positive, got {spacing:?}"
            )));
        }
        let expect = extents[0] * extents[1] * extents[2];
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "volume data length {} does not match extents {extents:?} ({expect})",
                data.len()
            )));
        }
        Ok(Self { extents, spacing, data })
    }

    pub fn zeros(extents: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = extents[0] * extents[1] * extents[2];
        Self::new(extents, spacing, vec![0.0; n])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn flat(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.extents[1] + y) * self.extents[2] + z
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.flat(x, y, z)]
    }

    /// Physical field of view per axis in mm (extent x spacing).
    pub fn fov(&self) -> [f64; 3] {
        [
            self.extents[0] as f64 * self.spacing[0],
            self.extents[1] as f64 * self.spacing[1],
            self.extents[2] as f64 * self.spacing[2],
        ]
    }

    /// Physical center of voxel (x, y, z) in mm, with the volume origin
    /// at the corner of voxel (0, 0, 0).
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            (x as f64 + 0.5) * self.spacing[0],
            (y as f64 + 0.5) * self.spacing[1],
            (z as f64 + 0.5) * self.spacing[2],
        ]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what}: non-finite voxel at flat index {idx}"
            )));
        }
        Ok(())
    }
}

/// A single 2D slice extracted from a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2d {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Slice2d {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "slice data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }
}

/// All volumes belonging to one synthetic patient. The three view
/// images are resampled (but not yet normalized or cropped) so that
/// their physical fields of view agree exactly; the axial mask lives on
/// the axial grid, and the oracle mask on the fine generation grid.
/// The generator always emits all three views, but a dataset on disk
/// may legitimately lack the sagittal and/or coronal volumes (axial-only
/// acquisitions), so those two are optional here.
#[derive(Debug, Clone)]
pub struct PatientViews {
    pub patient_id: String,
    pub axial: Volume3D,
    pub sagittal: Option<Volume3D>,
    pub coronal: Option<Volume3D>,
    pub axial_mask: Volume3D,
    pub oracle_mask: Option<Volume3D>,
}

impl PatientViews {
    pub fn view(&self, view: View) -> Option<&Volume3D> {
        match view {
            View::Axial => Some(&self.axial),
            View::Sagittal => self.sagittal.as_ref(),
            View::Coronal => self.coronal.as_ref(),
        }
    }

    pub fn has_view(&self, view: View) -> bool {
        self.view(view).is_some()
    }

    /// Check the cross-view consistency contract: matching fields of
    /// view (to floating-point tolerance) for every present view, a
    /// binary axial mask on the axial grid, and finite image data.
    pub fn validate(&self) -> Result<()> {
        let fov = self.axial.fov();
        for view in [View::Sagittal, View::Coronal] {
            let Some(v) = self.view(view) else { continue };
            let other = v.fov();
            for a in 0..3 {
                if (other[a] - fov[a]).abs() > 1e-6 {
                    return Err(Error::Data(format!(
                        "patient {}: {} field of view {other:?} differs from axial {fov:?}",
                        self.patient_id,
                        view.name()
                    )));
                }
            }
        }
        if self.axial_mask.extents() != self.axial.extents() {
            return Err(Error::Data(format!(
                "patient {}: mask extents {:?} differ from axial extents {:?}",
                self.patient_id,
                self.axial_mask.extents(),
                self.axial.extents()
            )));
        }
        if !self.axial_mask.is_binary() {
            return Err(Error::Data(format!("patient {}: axial mask is not binary", self.patient_id)));
        }
        self.axial
            .validate_finite(&format!("patient {} axial image", self.patient_id))?;
        for view in [View::Sagittal, View::Coronal] {
            if let Some(v) = self.view(view) {
                v.validate_finite(&format!("patient {} {} image", self.patient_id, view.name()))?;
            }
        }
        Ok(())
    }
}

/// A position-matched triple of view slices plus the axial ground
/// truth, the unit of training. Sagittal and coronal slices are absent
/// when the source dataset lacks those views.
#[derive(Debug, Clone)]
pub struct SliceTriplet {
    pub patient_id: String,
    /// Fractional position along each view's thick axis, in [0, 1].
    pub position: f64,
    pub axial: Slice2d,
    pub sagittal: Option<Slice2d>,
    pub coronal: Option<Slice2d>,
    pub axial_mask: Slice2d,
}

impl SliceTriplet {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.axial.h, self.axial.w);
        if h % 64 != 0 || w % 64 != 0 || h == 0 || w == 0 {
            return Err(Error::Contract(format!(
                "slice extents must be positive multiples of 64, got {h}x{w}"
            )));
        }
        let named = [
            ("sagittal", self.sagittal.as_ref()),
            ("coronal", self.coronal.as_ref()),
            ("axial_mask", Some(&self.axial_mask)),
        ];
        for (name, s) in named.into_iter().filter_map(|(n, s)| s.map(|s| (n, s))) {
            if s.h != h || s.w != w {
                return Err(Error::Contract(format!(
                    "{name} slice is {}x{}, expected {h}x{w}",
                    s.h, s.w
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.position) {
            return Err(Error::Contract(format!(
                "fractional position must be in [0, 1], got {}",
                self.position
            )));
        }
        Ok(())
    }
}

/// Everything needed to synthesize one patient cohort
/// deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Isotropic spacing of the fine generation grid (mm).
    pub fine_spacing: f64,
    /// Extent of the cubic fine grid (voxels per axis).
    pub fine_extent: usize,
    /// Gland semi-axis range (mm), sampled per patient and axis.
    pub semi_axes_mm: (f64, f64),
    /// Superellipsoid exponent (2 = ellipsoid).
    pub shape_exponent: f64,
    /// Maximum amplitude of the sinusoidal surface perturbation (mm).
    pub perturb_amp_mm: f64,
    /// Integer angular frequency range of the perturbation.
    pub perturb_freq: (u32, u32),
    /// Maximum |center jitter| from the grid center, per axis (mm).
    pub center_jitter_mm: f64,
    /// Interior, rim and background base intensities.
    pub intensity_interior: f32,
    pub intensity_rim: f32,
    pub intensity_background: f32,
    /// Rim thickness inside the gland boundary (mm).
    pub rim_width_mm: f64,
    /// Amplitude of the smooth interior texture.
    pub texture_amp: f32,
    /// Texture wavelength range (mm).
    pub texture_period_mm: (f64, f64),
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f32,
    /// Gaussian blur applied after noise (mm).
    pub blur_sigma_mm: f64,
    /// Per-view voxel spacings (mm).
    pub axial_spacing: [f64; 3],
    pub sagittal_spacing: [f64; 3],
    pub coronal_spacing: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            fine_spacing: 1.0,
            fine_extent: 66,
            semi_axes_mm: (16.0, 24.0),
            shape_exponent: 2.0,
            perturb_amp_mm: 2.0,
            perturb_freq: (2, 4),
            center_jitter_mm: 2.5,
            intensity_interior: 0.75,
            intensity_rim: 0.35,
            intensity_background: 0.18,
            rim_width_mm: 1.5,
            texture_amp: 0.08,
            texture_period_mm: (9.0, 16.0),
            noise_sigma: 0.05,
            blur_sigma_mm: 2.0,
            axial_spacing: [1.0, 1.0, 6.0],
            sagittal_spacing: [6.0, 1.0, 1.0],
            coronal_spacing: [1.0, 6.0, 1.0],
        }
    }
}

impl PhantomSpec {
    pub fn spacing_for(&self, view: View) -> [f64; 3] {
        match view {
            View::Axial => self.axial_spacing,
            View::Sagittal => self.sagittal_spacing,
            View::Coronal => self.coronal_spacing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fine_spacing > 0.0) {
            return Err(Error::Config("fine_spacing must be > 0".into()));
        }
        if self.fine_extent < 16 {
            return Err(Error::Config(format!(
                "fine_extent must be at least 16, got {}",
                self.fine_extent
            )));
        }
        let (lo, hi) = self.semi_axes_mm;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "semi-axis range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        if self.perturb_amp_mm < 0.0 || self.perturb_amp_mm >= lo {
            return Err(Error::Config(format!(
                "perturbation amplitude {} must be in [0, smallest semi-axis {lo})",
                self.perturb_amp_mm
            )));
        }
        if self.shape_exponent < 1.0 {
            return Err(Error::Config(format!(
                "shape exponent must be >= 1, got {}",
                self.shape_exponent
            )));
        }
        if self.perturb_freq.0 == 0 || self.perturb_freq.1 < self.perturb_freq.0 {
            return Err(Error::Config(format!(
                "perturbation frequency range must satisfy 1 <= lo <= hi, got {:?}",
                self.perturb_freq
            )));
        }
        if self.center_jitter_mm < 0.0 {
            return Err(Error::Config("center jitter must be >= 0".into()));
        }
        // The gland surface (with jitter and perturbation) must stay
        // strictly inside the fine field of view.
        let half_fov = 0.5 * self.fine_extent as f64 * self.fine_spacing;
        if hi + self.perturb_amp_mm + self.center_jitter_mm >= half_fov {
            return Err(Error::Config(format!(
                "gland does not fit: semi-axis {hi} + perturbation {} + jitter {} reaches \
                 half field of view {half_fov}",
                self.perturb_amp_mm, self.center_jitter_mm
            )));
        }
        if self.rim_width_mm < 0.0 {
            return Err(Error::Config("rim width must be >= 0".into()));
        }
        if self.texture_period_mm.0 <= 0.0 || self.texture_period_mm.1 < self.texture_period_mm.0 {
            return Err(Error::Config(format!(
                "texture period range must satisfy 0 < lo <= hi, got {:?}",
                self.texture_period_mm
            )));
        }
        if self.noise_sigma < 0.0 || self.texture_amp < 0.0 {
            return Err(Error::Config("noise and texture amplitudes must be >= 0".into()));
        }
        if self.blur_sigma_mm < 0.0 {
            return Err(Error::Config("blur sigma must be >= 0".into()));
        }
        for (name, s) in [
            ("axial", self.axial_spacing),
            ("sagittal", self.sagittal_spacing),
            ("coronal", self.coronal_spacing),
        ] {
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!("{name} spacing must be positive, got {s:?}")));
            }
        }
        Ok(())
    }
}
