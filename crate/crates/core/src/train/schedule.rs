use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::miner::MinedPair;
use crate::{Error, Result};

/// Cosine annealing: `lr0 * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule needs total > 0"));
    }
    if t > total {
        return Err(Error::invalid(format!("epoch {t} beyond schedule length {total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + phase.cos()))
}

/// Which dataset a training step draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepDomain {
    #[serde(rename = "S")]
    Source,
    #[serde(rename = "T")]
    Target,
}

impl fmt::Display for StepDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepDomain::Source => "S",
            StepDomain::Target => "T",
        })
    }
}

/// One scheduled step and the batch it uses within its own stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledStep {
    pub domain: StepDomain,
    pub batch: usize,
}

/// Interleaves `S,T,S,T,...` for one source epoch; the target stream cycles.
pub fn make_alternating_schedule(num_source: usize, num_target: usize) -> Result<Vec<ScheduledStep>> {
    if num_source == 0 || num_target == 0 {
        return Err(Error::invalid("alternating schedule needs at least one batch per domain"));
    }
    Ok((0..num_source)
        .flat_map(|s| {
            [
                ScheduledStep {
                    domain: StepDomain::Source,
                    batch: s,
                },
                ScheduledStep {
                    domain: StepDomain::Target,
                    batch: s % num_target,
                },
            ]
        })
        .collect())
}

/// Deterministic RNG for a given (seed, stage, epoch, stream).
pub fn epoch_rng(seed: u64, stage: u8, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 56) ^ ((epoch as u64) << 8) ^ stream);
    rng
}

/// Shuffled index batches over `0..n`; a trailing batch smaller than
/// `min_last` is dropped.
pub fn shuffled_batches(n: usize, batch_size: usize, min_last: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_last.min(batch_size))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Batches of whole pairs as image indices: even positions are queries, odd
/// positions their matches.
pub fn pair_batches(pairs: &[MinedPair], images_per_batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no mined pairs to train on"));
    }
    if images_per_batch < 2 || images_per_batch % 2 != 0 {
        return Err(Error::invalid(format!("pair batch size must be even, got {images_per_batch}")));
    }
    // pairs feed batch normalization in the generator, so a lone trailing pair is dropped
    let min_pairs = 2.min(pairs.len());
    Ok(shuffled_batches(pairs.len(), images_per_batch / 2, min_pairs, rng)
        .into_iter()
        .map(|batch| {
            batch
                .into_iter()
                .flat_map(|p| [pairs[p].query_index, pairs[p].match_index])
                .collect()
        })
        .collect())
}
