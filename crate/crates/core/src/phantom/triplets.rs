//! Position-matched slice extraction across views.
//!
//! Views have different slice counts along their thick axes, so slices
//! are matched by fractional position: position p in [0, 1] selects
//! index round(p * (n - 1)) along each view's own thick axis, with
//! round-half-away-from-zero. The in-plane image axes are ordered so
//! that every extracted slice of a preprocessed patient is H x W with
//! the same extent.

use super::{
    crop_center_in_plane, normalize_and_crop, Axis, PatientViews, Slice2d, SliceTriplet, View,
    Volume3D,
};
use crate::error::{Error, Result};

/// A patient whose views have been normalized and center-cropped to a
/// common in-plane extent, ready for slicing. Sagittal and coronal are
/// carried through only when the source patient has them.
#[derive(Debug, Clone)]
pub struct PreprocessedPatient {
    pub patient_id: String,
    pub axial: Volume3D,
    pub sagittal: Option<Volume3D>,
    pub coronal: Option<Volume3D>,
    pub axial_mask: Volume3D,
}

impl PreprocessedPatient {
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

    /// Number of slices along the thick axis of a present view.
    pub fn slice_count(&self, view: View) -> Option<usize> {
        self.view(view).map(|v| v.extents()[view.thick_axis().index()])
    }
}

/// Normalize and crop the present view images to `target` in-plane
/// voxels, and crop (without normalizing) the binary axial mask.
pub fn preprocess_views(p: &PatientViews, target: usize) -> Result<PreprocessedPatient> {
    p.validate()?;
    let axial = normalize_and_crop(&p.axial, target, View::Axial.thick_axis())?;
    let sagittal = p
        .sagittal
        .as_ref()
        .map(|v| normalize_and_crop(v, target, View::Sagittal.thick_axis()))
        .transpose()?;
    let coronal = p
        .coronal
        .as_ref()
        .map(|v| normalize_and_crop(v, target, View::Coronal.thick_axis()))
        .transpose()?;
    let axial_mask = crop_center_in_plane(&p.axial_mask, target, View::Axial.thick_axis())?;
    debug_assert!(axial_mask.is_binary());
    Ok(PreprocessedPatient {
        patient_id: p.patient_id.clone(),
        axial,
        sagittal,
        coronal,
        axial_mask,
    })
}

/// Extract the 2D slice perpendicular to `axis` at index `idx`.
/// Orientation convention (rows x columns): z-slices are (y, x),
/// x-slices are (z, y), y-slices are (z, x).
pub fn slice_at(v: &Volume3D, axis: Axis, idx: usize) -> Result<Slice2d> {
    let [nx, ny, nz] = v.extents();
    let bound = v.extents()[axis.index()];
    if idx >= bound {
        return Err(Error::Shape(format!(
            "slice index {idx} out of bounds for axis extent {bound}"
        )));
    }
    match axis {
        Axis::Z => {
            let mut data = Vec::with_capacity(ny * nx);
            for y in 0..ny {
                for x in 0..nx {
                    data.push(v.at(x, y, idx));
                }
            }
            Slice2d::new(ny, nx, data)
        }
        Axis::X => {
            let mut data = Vec::with_capacity(nz * ny);
            for z in 0..nz {
                for y in 0..ny {
                    data.push(v.at(idx, y, z));
                }
            }
            Slice2d::new(nz, ny, data)
        }
        Axis::Y => {
            let mut data = Vec::with_capacity(nz * nx);
            for z in 0..nz {
                for x in 0..nx {
                    data.push(v.at(x, idx, z));
                }
            }
            Slice2d::new(nz, nx, data)
        }
    }
}

/// Slice index selected by fractional position p in [0, 1] on a stack
/// of n slices: round(p * (n - 1)), rounding half away from zero.
pub fn slice_index_for_position(p: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("fractional position must be in [0, 1], got {p}")));
    }
    if n == 0 {
        return Err(Error::Contract("cannot index an empty slice stack".into()));
    }
    Ok((p * (n - 1) as f64).round() as usize)
}

/// Build one slice triplet per fractional position. Every triplet
/// carries the axial ground-truth slice at the matched axial index;
/// sagittal/coronal slices are extracted only from present views.
pub fn make_triplets(p: &PreprocessedPatient, positions: &[f64]) -> Result<Vec<SliceTriplet>> {
    let mut out = Vec::with_capacity(positions.len());
    for &pos in positions {
        let ax_n = p.slice_count(View::Axial).expect("axial view is mandatory");
        let ax_idx = slice_index_for_position(pos, ax_n)?;
        let sagittal = match &p.sagittal {
            Some(v) => {
                let idx = slice_index_for_position(pos, p.slice_count(View::Sagittal).unwrap())?;
                Some(slice_at(v, Axis::X, idx)?)
            }
            None => None,
        };
        let coronal = match &p.coronal {
            Some(v) => {
                let idx = slice_index_for_position(pos, p.slice_count(View::Coronal).unwrap())?;
                Some(slice_at(v, Axis::Y, idx)?)
            }
            None => None,
        };
        let triplet = SliceTriplet {
            patient_id: p.patient_id.clone(),
            position: pos,
            axial: slice_at(&p.axial, Axis::Z, ax_idx)?,
            sagittal,
            coronal,
            axial_mask: slice_at(&p.axial_mask, Axis::Z, ax_idx)?,
        };
        triplet.validate()?;
        out.push(triplet);
    }
    Ok(out)
}
