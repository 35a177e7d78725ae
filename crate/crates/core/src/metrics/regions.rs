//! Regional analysis along the axial slice axis.
//!
//! The gland is reported whole (WG) and in three axial thirds: apex
//! (inferior, the first slices), mid-gland, and base (superior, the
//! last slices). Apex and base each get floor(n/3) slices and the
//! mid-gland absorbs the remainder, so the three ranges always
//! partition the stack.

use crate::error::{Error, Result};
use crate::phantom::{Axis, Volume3D};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Reporting region for per-patient metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "WG")]
    WholeGland,
    #[serde(rename = "apex")]
    Apex,
    #[serde(rename = "mid")]
    Mid,
    #[serde(rename = "base")]
    Base,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::WholeGland, Region::Apex, Region::Mid, Region::Base];

    pub fn name(self) -> &'static str {
        match self {
            Region::WholeGland => "WG",
            Region::Apex => "apex",
            Region::Mid => "mid",
            Region::Base => "base",
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Slice ranges of the three axial thirds; they partition [0, n).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSplit {
    pub apex: Range<usize>,
    pub mid: Range<usize>,
    pub base: Range<usize>,
}

impl RegionSplit {
    pub fn range(&self, region: Region, n_slices: usize) -> Range<usize> {
        match region {
            Region::WholeGland => 0..n_slices,
            Region::Apex => self.apex.clone(),
            Region::Mid => self.mid.clone(),
            Region::Base => self.base.clone(),
        }
    }
}

/// Split n axial slices into apex / mid / base thirds.
pub fn region_split(n_slices: usize) -> Result<RegionSplit> {
    if n_slices < 3 {
        return Err(Error::Data(format!(
            "regional analysis needs at least 3 slices, got {n_slices}"
        )));
    }
    let third = n_slices / 3;
    Ok(RegionSplit {
        apex: 0..third,
        mid: third..n_slices - third,
        base: n_slices - third..n_slices,
    })
}

/// Copy a contiguous slab of slices perpendicular to `axis`, keeping
/// the spacing (so physical distances survive the crop).
pub fn crop_slices(vol: &Volume3D, axis: Axis, range: Range<usize>) -> Result<Volume3D> {
    let [ex, ey, ez] = vol.extents();
    let n = vol.extents()[axis.index()];
    if range.start >= range.end || range.end > n {
        return Err(Error::Shape(format!(
            "slice range {range:?} invalid for {n} slices along {axis:?}"
        )));
    }
    let (keep, mut extents) = (range.clone(), vol.extents());
    extents[axis.index()] = keep.len();
    let mut out = Volume3D::zeros(extents, vol.spacing())?;
    let [ox, oy, oz] = match axis {
        Axis::X => [keep.start, 0, 0],
        Axis::Y => [0, keep.start, 0],
        Axis::Z => [0, 0, keep.start],
    };
    let [nx, ny, nz] = out.extents();
    debug_assert!(ox + nx <= ex && oy + ny <= ey && oz + nz <= ez);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = vol.at(x + ox, y + oy, z + oz);
                let idx = out.flat(x, y, z);
                out.data_mut()[idx] = v;
            }
        }
    }
    Ok(out)
}
