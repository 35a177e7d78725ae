//! Volumetric segmentation quality: overlap and surface metrics,
//! regional breakdown, cohort statistics, and report serialization.

pub mod overlap;
pub mod regions;
pub mod report;
pub mod stats;
pub mod surface;

pub use overlap::{dsc, rvd, volume_mm3};
pub use regions::{crop_slices, region_split, Region, RegionSplit};
pub use report::{
    compare_reports, ComparisonEntry, Metric, MetricReport, MetricRow, MetricSummary,
    RegionSummary, ReportSummary, SIGNIFICANCE_LEVEL,
};
pub use stats::{bootstrap_mean, mann_whitney_u, mean, sample_sd, welch_t, BootstrapSummary};
pub use surface::{
    abd, boundary_voxels, hd95, percentile_sorted, surface_distances, SurfaceDistances,
};

use crate::error::{Error, Result};
use crate::phantom::{Axis, Volume3D};

/// Masks must live on the same grid for any pairwise metric.
pub fn check_same_grid(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(Error::Shape(format!(
            "mask extents differ: {:?} vs {:?}",
            a.extents(),
            b.extents()
        )));
    }
    if a.spacing() != b.spacing() {
        return Err(Error::Shape(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    Ok(())
}

/// Evaluate one patient in all four regions. `slice_axis` is the axis
/// the slice stack runs along (the thick axis of the axial view).
///
/// Regional metrics are computed on the cropped sub-volumes, so
/// restriction commutes with the metric by construction. Surface and
/// volume metrics that are undefined for a region (an empty mask)
/// become missing values and a warning, not errors.
pub fn evaluate_patient(
    patient_id: &str,
    pred: &Volume3D,
    reference: &Volume3D,
    slice_axis: Axis,
) -> Result<Vec<MetricRow>> {
    check_same_grid(pred, reference)?;
    if !pred.is_binary() || !reference.is_binary() {
        return Err(Error::Data(format!(
            "{patient_id}: metrics need binary masks (values 0 or 1)"
        )));
    }
    let n = pred.extents()[slice_axis.index()];
    let split = region_split(n)?;

    let mut rows = Vec::with_capacity(Region::ALL.len());
    for region in Region::ALL {
        let range = split.range(region, n);
        let (p, r) = if region == Region::WholeGland {
            (pred.clone(), reference.clone())
        } else {
            (
                crop_slices(pred, slice_axis, range.clone())?,
                crop_slices(reference, slice_axis, range)?,
            )
        };

        let dsc = dsc(&p, &r)?;
        let (hd95_mm, abd_mm) = match surface_distances(&p, &r) {
            Ok(d) => (Some(d.hd95()?), Some(d.abd())),
            Err(Error::Undefined(why)) => {
                log::warn!("{patient_id} {region}: surface metrics undefined: {why}");
                (None, None)
            }
            Err(e) => return Err(e),
        };
        let rvd = match rvd(&p, &r) {
            Ok(v) => Some(v),
            Err(Error::Undefined(why)) => {
                log::warn!("{patient_id} {region}: volume metric undefined: {why}");
                None
            }
            Err(e) => return Err(e),
        };
        rows.push(MetricRow {
            patient_id: patient_id.to_string(),
            region,
            dsc,
            hd95_mm,
            abd_mm,
            rvd,
        });
    }
    Ok(rows)
}
