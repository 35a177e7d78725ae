//! Patient-level dataset partitioning.
//!
//! Splits operate on patient identifiers only — every volume of a
//! patient follows its id — so no patient can leak across sets. Ids
//! are sorted before shuffling, making the result a function of the
//! id *set* and the seed, not of input order.

use crate::error::{Error, Result};
use crate::rng::{stream, tags};
use rand::seq::SliceRandom;

fn shuffled(ids: &[String], seed: u64, tag: u64) -> Result<Vec<String>> {
    if ids.is_empty() {
        return Err(Error::Config("no patient ids to split".into()));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Config("duplicate patient ids in split input".into()));
    }
    let mut rng = stream(seed, tag);
    sorted.shuffle(&mut rng);
    Ok(sorted)
}

/// Deterministic train/test split by patient. `ratio` is the train
/// fraction; the train size is round(ratio * n), clamped so both sides
/// are nonempty.
pub fn split_patients(ids: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if ids.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 patients to split, got {}",
            ids.len()
        )));
    }
    let mut order = shuffled(ids, seed, tags::DATA_SPLIT)?;
    let n = order.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let test = order.split_off(n_train);
    Ok((order, test))
}

/// Deterministic k-fold partition by patient. Folds differ in size by
/// at most one patient and are pairwise disjoint with complete union.
pub fn kfold(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} patients",
            ids.len()
        )));
    }
    let order = shuffled(ids, seed, tags::KFOLD)?;
    let n = order.len();
    let mut folds = Vec::with_capacity(k);
    let mut start = 0usize;
    for f in 0..k {
        // Distribute the remainder one patient at a time.
        let size = n / k + usize::from(f < n % k);
        folds.push(order[start..start + size].to_vec());
        start += size;
    }
    debug_assert_eq!(start, n);
    Ok(folds)
}
