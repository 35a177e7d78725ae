//! Surface-distance metrics between binary masks.
//!
//! A mask voxel is a *boundary* voxel when at least one of its six
//! face-neighbors lies outside the mask or off the end of the grid, so
//! a mask touching the volume border exposes a surface there too.
//! Distances are Euclidean between boundary-voxel centers in physical
//! millimeters, computed exactly by comparing all pairs; cohorts are
//! small enough that nothing smarter is warranted.

use super::check_same_grid;
use crate::error::{Error, Result};
use crate::phantom::Volume3D;

/// The two directed nearest-distance multisets between mask surfaces,
/// in mm. `pred_to_ref[i]` is the distance from the i-th predicted
/// boundary voxel (raster order) to the closest reference boundary
/// voxel, and vice versa.
#[derive(Debug, Clone)]
pub struct SurfaceDistances {
    pub pred_to_ref: Vec<f64>,
    pub ref_to_pred: Vec<f64>,
}

/// Grid coordinates of the mask's boundary voxels, in raster order.
pub fn boundary_voxels(mask: &Volume3D) -> Vec<[usize; 3]> {
    let [ex, ey, ez] = mask.extents();
    let mut out = Vec::new();
    for x in 0..ex {
        for y in 0..ey {
            for z in 0..ez {
                if mask.at(x, y, z) == 0.0 {
                    continue;
                }
                let exposed = x == 0
                    || x + 1 == ex
                    || y == 0
                    || y + 1 == ey
                    || z == 0
                    || z + 1 == ez
                    || mask.at(x - 1, y, z) == 0.0
                    || mask.at(x + 1, y, z) == 0.0
                    || mask.at(x, y - 1, z) == 0.0
                    || mask.at(x, y + 1, z) == 0.0
                    || mask.at(x, y, z - 1) == 0.0
                    || mask.at(x, y, z + 1) == 0.0;
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn centers_mm(vol: &Volume3D, voxels: &[[usize; 3]]) -> Vec<[f64; 3]> {
    voxels.iter().map(|&[x, y, z]| vol.voxel_center(x, y, z)).collect()
}

/// For each point in `from`, the distance to the nearest point in `to`.
fn directed_min_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            let min_sq = to
                .iter()
                .map(|b| {
                    let dx = a[0] - b[0];
                    let dy = a[1] - b[1];
                    let dz = a[2] - b[2];
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min);
            min_sq.sqrt()
        })
        .collect()
}

/// Directed surface-distance multisets between two nonempty masks on
/// the same grid.
pub fn surface_distances(pred: &Volume3D, reference: &Volume3D) -> Result<SurfaceDistances> {
    check_same_grid(pred, reference)?;
    let pb = boundary_voxels(pred);
    let rb = boundary_voxels(reference);
    if pb.is_empty() || rb.is_empty() {
        let which = if pb.is_empty() { "predicted" } else { "reference" };
        return Err(Error::Undefined(format!(
            "surface distance needs nonempty masks; {which} mask is empty"
        )));
    }
    let pc = centers_mm(pred, &pb);
    let rc = centers_mm(reference, &rb);
    Ok(SurfaceDistances {
        pred_to_ref: directed_min_distances(&pc, &rc),
        ref_to_pred: directed_min_distances(&rc, &pc),
    })
}

/// Percentile with linear interpolation at fractional rank q*(n-1),
/// over an ascending-sorted slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Stats("percentile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Stats(format!("percentile q must be in [0, 1], got {q}")));
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

impl SurfaceDistances {
    /// 95th-percentile Hausdorff distance: the larger of the two
    /// directed 95th percentiles (linear interpolation).
    pub fn hd95(&self) -> Result<f64> {
        let p = |d: &[f64]| -> Result<f64> {
            let mut s = d.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
            percentile_sorted(&s, 0.95)
        };
        Ok(p(&self.pred_to_ref)?.max(p(&self.ref_to_pred)?))
    }

    /// Average boundary distance: the mean over both directed multisets
    /// pooled together. Each multiset is summed separately and the two
    /// partial sums added, so swapping the masks permutes operands of a
    /// single commutative addition and the result is exactly symmetric.
    pub fn abd(&self) -> f64 {
        let n = self.pred_to_ref.len() + self.ref_to_pred.len();
        let sum = self.pred_to_ref.iter().sum::<f64>() + self.ref_to_pred.iter().sum::<f64>();
        sum / n as f64
    }
}

/// 95th-percentile Hausdorff distance in mm between two nonempty masks.
pub fn hd95(pred: &Volume3D, reference: &Volume3D) -> Result<f64> {
    surface_distances(pred, reference)?.hd95()
}

/// Average boundary distance in mm between two nonempty masks.
pub fn abd(pred: &Volume3D, reference: &Volume3D) -> Result<f64> {
    Ok(surface_distances(pred, reference)?.abd())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mask(extents: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> Volume3D {
        let mut v = Volume3D::zeros(extents, spacing).unwrap();
        for &[x, y, z] in on {
            let idx = v.flat(x, y, z);
            v.data_mut()[idx] = 1.0;
        }
        v
    }

    #[test]
    fn fully_filled_volume_is_all_boundary_because_of_the_border() {
        let v = mask([2, 2, 2], [1.0, 1.0, 1.0], &[]);
        let mut v = v;
        v.data_mut().fill(1.0);
        assert_eq!(boundary_voxels(&v).len(), 8);
    }

    #[test]
    fn interior_voxel_of_a_3x3x3_cube_is_not_boundary() {
        let all: Vec<[usize; 3]> = (0..3)
            .flat_map(|x| (0..3).flat_map(move |y| (0..3).map(move |z| [x, y, z])))
            .collect();
        let v = mask([3, 3, 3], [1.0, 1.0, 1.0], &all);
        let b = boundary_voxels(&v);
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&[1, 1, 1]));
    }

    #[test]
    fn identical_masks_give_all_zero_distances() {
        let v = mask([4, 4, 4], [0.5, 0.5, 3.0], &[[1, 1, 1], [1, 2, 1], [2, 1, 2]]);
        let d = surface_distances(&v, &v).unwrap();
        assert!(d.pred_to_ref.iter().all(|&x| x == 0.0));
        assert!(d.ref_to_pred.iter().all(|&x| x == 0.0));
        assert_eq!(d.hd95().unwrap(), 0.0);
        assert_eq!(d.abd(), 0.0);
    }

    #[test]
    fn single_voxels_offset_by_one_thick_slice_are_3mm_apart() {
        let a = mask([3, 3, 3], [1.0, 1.0, 3.0], &[[1, 1, 0]]);
        let b = mask([3, 3, 3], [1.0, 1.0, 3.0], &[[1, 1, 1]]);
        let d = surface_distances(&a, &b).unwrap();
        assert_eq!(d.pred_to_ref, vec![3.0]);
        assert_eq!(d.ref_to_pred, vec![3.0]);
        assert_eq!(d.hd95().unwrap(), 3.0);
        assert_eq!(d.abd(), 3.0);
    }

    #[test]
    fn cube_against_its_in_plane_dilation_has_directed_max_half_mm() {
        // 3x3x3 cube of 0.5 mm in-plane voxels, dilated by one voxel in
        // the +x direction only: the added face sits 0.5 mm from the
        // original surface, and every original boundary voxel already
        // touches the dilated surface.
        let spacing = [0.5, 0.5, 3.0];
        let cube: Vec<[usize; 3]> = (1..4)
            .flat_map(|x| (1..4).flat_map(move |y| (1..4).map(move |z| [x, y, z])))
            .collect();
        let mut dilated = cube.clone();
        dilated.extend((1..4).map(|y| [4, y, 1]));
        dilated.extend((1..4).map(|y| [4, y, 2]));
        dilated.extend((1..4).map(|y| [4, y, 3]));
        let a = mask([6, 5, 5], spacing, &cube);
        let b = mask([6, 5, 5], spacing, &dilated);
        let d = surface_distances(&b, &a).unwrap();
        // Dilated box 4x3x3: 36 voxels minus 2 interior; cube: 27 minus 1.
        assert_eq!(d.pred_to_ref.len(), 34);
        assert_eq!(d.ref_to_pred.len(), 26);
        let max_b_to_a = d.pred_to_ref.iter().cloned().fold(0.0, f64::max);
        let max_a_to_b = d.ref_to_pred.iter().cloned().fold(0.0, f64::max);
        assert_abs_diff_eq!(max_b_to_a, 0.5, epsilon = 1e-12);
        // The face voxel the dilation absorbed is interior afterwards,
        // so its nearest surviving surface is also half a voxel away.
        assert_abs_diff_eq!(max_a_to_b, 0.5, epsilon = 1e-12);
        // Nine added-face voxels one direction, one absorbed voxel the
        // other; everything else coincides.
        assert_eq!(d.pred_to_ref.iter().filter(|&&x| x == 0.0).count(), 25);
        assert_eq!(d.ref_to_pred.iter().filter(|&&x| x == 0.0).count(), 25);
    }

    #[test]
    fn percentile_of_a_hundred_values_with_one_outlier_is_zero() {
        // rank = 0.95 * 99 = 94.05 lies between two zeros, so the lone
        // outlier at the top does not register.
        let mut d = vec![0.0; 99];
        d.push(10.0);
        assert_eq!(percentile_sorted(&d, 0.95).unwrap(), 0.0);
    }

    #[test]
    fn percentile_interpolates_linearly_between_ranks() {
        let d = [0.0, 1.0, 2.0, 3.0];
        // rank 0.5 * 3 = 1.5 -> midway between 1 and 2.
        assert_abs_diff_eq!(percentile_sorted(&d, 0.5).unwrap(), 1.5, epsilon = 1e-12);
        assert_eq!(percentile_sorted(&d, 0.0).unwrap(), 0.0);
        assert_eq!(percentile_sorted(&d, 1.0).unwrap(), 3.0);
        assert_eq!(percentile_sorted(&[7.0], 0.95).unwrap(), 7.0);
    }

    #[test]
    fn abd_is_symmetric_under_swapping_the_masks() {
        let a = mask([4, 4, 2], [1.0, 1.0, 1.0], &[[0, 0, 0], [1, 1, 1], [2, 3, 0]]);
        let b = mask([4, 4, 2], [1.0, 1.0, 1.0], &[[3, 3, 1], [2, 2, 0]]);
        assert_eq!(abd(&a, &b).unwrap(), abd(&b, &a).unwrap());
        assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
    }

    #[test]
    fn empty_mask_is_an_undefined_metric_error() {
        let a = mask([3, 3, 3], [1.0, 1.0, 1.0], &[[1, 1, 1]]);
        let empty = mask([3, 3, 3], [1.0, 1.0, 1.0], &[]);
        let err = surface_distances(&a, &empty).unwrap_err();
        assert!(matches!(err, Error::Undefined(_)), "{err}");
        assert!(err.to_string().contains("reference"));
        let err = surface_distances(&empty, &a).unwrap_err();
        assert!(err.to_string().contains("predicted"));
    }

    #[test]
    fn mismatched_grids_are_shape_errors() {
        let a = mask([3, 3, 3], [1.0, 1.0, 1.0], &[[1, 1, 1]]);
        let b = mask([3, 3, 4], [1.0, 1.0, 1.0], &[[1, 1, 1]]);
        assert!(matches!(surface_distances(&a, &b), Err(Error::Shape(_))));
        let c = mask([3, 3, 3], [1.0, 1.0, 2.0], &[[1, 1, 1]]);
        assert!(matches!(surface_distances(&a, &c), Err(Error::Shape(_))));
    }
}
