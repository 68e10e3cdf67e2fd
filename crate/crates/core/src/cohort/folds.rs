use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CohortError;

/// Seeded k-fold partition of `0..n`. Fold sizes differ by at most one.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, CohortError> {
    split_folds_stratified(&vec![0; n], k, seed)
}

/// Seeded k-fold partition of `0..strata.len()` that spreads every stratum
/// evenly over the folds. Each stratum is shuffled independently, the strata
/// are concatenated in ascending label order, and indices are dealt to folds
/// round-robin, so fold sizes still differ by at most one.
pub fn split_folds_stratified(strata: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, CohortError> {
    let n = strata.len();
    if k < 2 {
        return Err(CohortError::Folds(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(CohortError::Folds(format!("{k} folds requested for {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = strata.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let mut order = Vec::with_capacity(n);
    for label in labels {
        let mut members: Vec<usize> = (0..n).filter(|&i| strata[i] == label).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
