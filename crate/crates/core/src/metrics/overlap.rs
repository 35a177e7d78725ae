//! Volume-overlap metrics between binary masks.

use super::check_same_grid;
use crate::error::{Error, Result};
use crate::phantom::Volume3D;

fn count_foreground(v: &Volume3D) -> usize {
    v.data().iter().filter(|&&x| x == 1.0).count()
}

/// Physical volume of a binary mask in mm^3.
pub fn volume_mm3(mask: &Volume3D) -> f64 {
    let s = mask.spacing();
    count_foreground(mask) as f64 * s[0] * s[1] * s[2]
}

/// Dice score coefficient in percent: 100 * 2|A∩B| / (|A| + |B|).
/// Two empty masks agree perfectly (100); one empty mask scores 0.
pub fn dsc(pred: &Volume3D, reference: &Volume3D) -> Result<f64> {
    check_same_grid(pred, reference)?;
    let a = count_foreground(pred);
    let b = count_foreground(reference);
    if a + b == 0 {
        return Ok(100.0);
    }
    let inter = pred
        .data()
        .iter()
        .zip(reference.data())
        .filter(|(p, r)| **p == 1.0 && **r == 1.0)
        .count();
    Ok(100.0 * 2.0 * inter as f64 / (a + b) as f64)
}

/// Relative volume difference in percent: 100 * |V_pred - V_ref| / V_ref.
/// Undefined when the reference is empty.
pub fn rvd(pred: &Volume3D, reference: &Volume3D) -> Result<f64> {
    check_same_grid(pred, reference)?;
    let v_ref = volume_mm3(reference);
    if v_ref == 0.0 {
        return Err(Error::Undefined(
            "relative volume difference needs a nonempty reference mask".into(),
        ));
    }
    Ok(100.0 * (volume_mm3(pred) - v_ref).abs() / v_ref)
}
