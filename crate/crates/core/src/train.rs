//! Mini-batch scheduling and per-epoch metric traces shared by the training stages.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    /// Held-out metric tracked by the stage, when it has one.
    pub metric: Option<f64>,
}

impl EpochRecord {
    pub fn log(stage: &str, epoch: usize, loss: f64, metric: Option<f64>) -> Self {
        match metric {
            Some(m) => log::info!("{stage} epoch {epoch}: loss {loss:.5} metric {m:.4}"),
            None => log::info!("{stage} epoch {epoch}: loss {loss:.5}"),
        }
        Self { stage: stage.to_string(), epoch, loss, metric }
    }
}

/// Cosine-annealed rate for `epoch` of `epochs`, falling from `base` to `base / 10`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let t = epoch as f64 / epochs.max(1) as f64;
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Shuffled index chunks covering `0..n`.
pub fn shuffled_batches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Shuffled batches in which no two members share a key.
///
/// Items whose key already sits in the batch being filled wait for a later
/// batch, so contrastive losses never see duplicate positives as negatives.
pub fn distinct_batches(keys: &[usize], size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut pending: VecDeque<usize> = rng.permutation(keys.len()).into();
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(size);
        let mut seen = HashSet::new();
        let mut rest = VecDeque::new();
        while let Some(i) = pending.pop_front() {
            if batch.len() < size.max(1) && seen.insert(keys[i]) {
                batch.push(i);
            } else {
                rest.push_back(i);
            }
        }
        pending = rest;
        out.push(batch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffled_batches_cover_every_index_once() {
        let mut rng = Rng::new(3);
        let mut all: Vec<usize> = shuffled_batches(10, 4, &mut rng).concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn distinct_batches_have_unique_keys() {
        let keys: Vec<usize> = (0..200).map(|i| i % 30).collect();
        let batches = distinct_batches(&keys, 16, &mut Rng::new(9));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for b in &batches {
            let ks: HashSet<_> = b.iter().map(|&i| keys[i]).collect();
            assert_eq!(ks.len(), b.len());
            assert!(b.len() <= 16);
        }
    }

    #[test]
    fn cosine_lr_starts_at_base_and_decreases() {
        assert!((cosine_lr(1e-2, 0, 30) - 1e-2).abs() < 1e-15);
        let rates: Vec<f64> = (0..=30).map(|e| cosine_lr(1e-2, e, 30)).collect();
        assert!(rates.windows(2).all(|w| w[1] < w[0]));
        assert!((rates[30] - 1e-3).abs() < 1e-15);
    }
}
