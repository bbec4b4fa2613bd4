//! Clustering agreement scores.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scene::GroundTruthMasks;
use crate::slot::MaskStack;

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Returns 1 when both labelings are trivially identical (a single cluster
/// each, or all singletons), where the usual formula is 0/0.
pub fn adjusted_rand_index(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("labelings"));
    }
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *joint.entry((t, p)).or_default() += 1;
        *rows.entry(t).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&n| pairs(n)).sum();
    let a: f64 = rows.values().map(|&n| pairs(n)).sum();
    let b: f64 = cols.values().map(|&n| pairs(n)).sum();
    let expected = a * b / pairs(truth.len() as u64);
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// ARI restricted to items where `keep` is true.
pub fn masked_ari(truth: &[usize], pred: &[usize], keep: &[bool]) -> Result<f64> {
    if keep.len() != truth.len() {
        return Err(Error::LengthMismatch(keep.len(), truth.len()));
    }
    let (t, p): (Vec<usize>, Vec<usize>) =
        truth.iter().zip(pred).zip(keep).filter(|(_, &k)| k).map(|((&t, &p), _)| (t, p)).unzip();
    adjusted_rand_index(&t, &p)
}

/// ARI between the per-pixel argmax slot and the ground-truth entity over
/// pixels that do not belong to the background.
pub fn foreground_ari(masks: &MaskStack, truth: &GroundTruthMasks) -> Result<f64> {
    if (masks.height, masks.width) != (truth.height, truth.width) {
        return Err(Error::Resolution { expected: (truth.height, truth.width), got: (masks.height, masks.width) });
    }
    let t: Vec<usize> = truth.labels.iter().map(|&l| l as usize).collect();
    masked_ari(&t, &masks.argmax(), &truth.foreground())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_up_to_relabeling_is_one() {
        let t = [0, 0, 1, 1, 2, 2];
        let p = [5, 5, 3, 3, 9, 9];
        assert!((adjusted_rand_index(&t, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn known_value() {
        // Reference value from the standard pair-counting formula.
        let t = [0, 0, 0, 1, 1, 1];
        let p = [0, 0, 1, 1, 2, 2];
        let ari = adjusted_rand_index(&t, &p).unwrap();
        assert!((ari - 0.24242424242424243).abs() < 1e-12, "{ari}");
    }

    #[test]
    fn mask_filters_items() {
        let t = [0, 0, 1, 1, 7];
        let p = [1, 1, 0, 0, 1];
        let keep = [true, true, true, true, false];
        assert_eq!(masked_ari(&t, &p, &keep).unwrap(), 1.0);
        assert!(adjusted_rand_index(&t, &p).unwrap() < 1.0);
    }
}
