//! Stratified, seeded fine-tune/test partitioning.
//!
//! The fixed test set takes 75 % of the records, apportioned over classes by largest
//! remainder. The rest forms a pool that is ordered so that every prefix tracks the global
//! class proportions; a fine-tune budget is a prefix of that order, so smaller budgets are
//! subsets of larger ones.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{SampleRecord, NUM_CLASSES};
use crate::error::{Error, Result};

pub const TEST_FRACTION: f64 = 0.75;
pub const MAX_FINETUNE_PERCENT: u32 = 25;

/// Splits `total` over classes in proportion to `counts` (largest remainder, ties to the
/// lower class).
fn apportion(total: usize, counts: &[usize]) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let quotas: Vec<f64> = counts.iter().map(|&c| total as f64 * c as f64 / n as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..counts.len()).collect();
    rest.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &c in rest.iter().take(short) {
        out[c] += 1;
    }
    out
}

/// `(test, pool)` indices into `labels`; `pool` is in fine-tune selection order.
pub fn partition(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<usize>> = (0..NUM_CLASSES)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let n = labels.len();
    let take = apportion(test_size(n), &counts);
    let mut test = Vec::with_capacity(test_size(n));
    let mut queues = Vec::with_capacity(NUM_CLASSES);
    for (m, &t) in members.iter().zip(&take) {
        test.extend_from_slice(&m[..t]);
        queues.push(m[t..].to_vec());
    }
    test.sort_unstable();

    let mut picked = [0usize; NUM_CLASSES];
    let mut pool = Vec::with_capacity(n - test.len());
    for j in 1..=n - test.len() {
        let c = (0..NUM_CLASSES)
            .filter(|&c| picked[c] < queues[c].len())
            .max_by(|&a, &b| {
                let da = j as f64 * counts[a] as f64 / n as f64 - picked[a] as f64;
                let db = j as f64 * counts[b] as f64 / n as f64 - picked[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("pool is not exhausted");
        pool.push(queues[c][picked[c]]);
        picked[c] += 1;
    }
    (test, pool)
}

pub fn test_size(n: usize) -> usize {
    (TEST_FRACTION * n as f64).round() as usize
}

pub fn finetune_size(n: usize, percent: u32) -> usize {
    (percent as f64 * n as f64 / 100.0).round() as usize
}

/// `(finetune, test)` indices into `labels` for a budget of `percent` of the whole set.
pub fn split_indices(labels: &[usize], percent: u32, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if percent == 0 || percent > MAX_FINETUNE_PERCENT {
        return Err(Error::InvalidArgument(format!(
            "fine-tune percent {percent} must be in 1..={MAX_FINETUNE_PERCENT}; larger budgets would overlap the fixed test set"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let (test, mut pool) = partition(labels, seed);
    pool.truncate(finetune_size(labels.len(), percent));
    Ok((pool, test))
}

/// `(finetune, test)` records for a budget of `percent` of the whole dataset.
pub fn split_finetune(records: &[SampleRecord], percent: u32, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let (finetune, test) = split_indices(&labels, percent, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&finetune), pick(&test)))
}
