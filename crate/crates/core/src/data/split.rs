use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};

/// Stratified, seed-deterministic split of sample indices into
/// `(train, val)`. Each class contributes `count · val_fraction` samples to
/// the validation side, rounded so that per-class counts stay within one of
/// proportional and the total is `round(n · val_fraction)`.
pub fn make_splits(labels: &[usize], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(arg_err(format!("validation fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }

    // Largest-remainder allocation of the validation quota.
    let target = (labels.len() as f64 * val_fraction).round() as usize;
    let mut quota: Vec<(usize, f64)> = by_class
        .values()
        .map(|idx| {
            let exact = idx.len() as f64 * val_fraction;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quota.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].1.total_cmp(&quota[a].1).then(a.cmp(&b)));
    for &c in order.iter().take(target.saturating_sub(assigned)) {
        quota[c].0 += 1;
    }

    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (idx, (n_val, _)) in by_class.into_values().zip(quota) {
        let mut idx = idx;
        idx.shuffle(&mut rng);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    Ok((train, val))
}
