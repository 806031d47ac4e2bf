//! Synthetic cascade generation.
//!
//! A seeded branching process: each node draws an offspring count from a
//! truncated discrete power law (thinned to hit a target branching mean),
//! and each child joins after an exponential inter-arrival time. Events are
//! consumed in time order, so join times are monotone along every path and
//! the size cap keeps the earliest joiners. The resulting corpora show the
//! heavy-tailed popularity and short-interval-dominant gap distributions
//! typical of real repost data.

use crate::cascade::{Cascade, RepostRecord};
use crate::error::{Error, Result};
use crate::seeds;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_cascades: usize,
    /// Target mean offspring count per node; < 1 guarantees almost-sure
    /// extinction (the size cap enforces termination regardless).
    pub branching_mean: f64,
    /// Rate of the exponential inter-arrival between a parent and each child.
    pub decay_rate: f64,
    /// Exponent of the offspring power law, > 1.
    pub alpha: f64,
    /// Hard cap on nodes per cascade.
    pub max_size: usize,
    /// Generation horizon: no joins after this time.
    pub t_end: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_cascades: 2000,
            branching_mean: 0.9,
            decay_rate: 1.0,
            alpha: 2.5,
            max_size: 100,
            t_end: 20.0,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cascades == 0 {
            return Err(Error::Config("n_cascades must be positive".into()));
        }
        if !(self.branching_mean >= 0.0) {
            return Err(Error::Config("branching_mean must be >= 0".into()));
        }
        if !(self.decay_rate > 0.0) {
            return Err(Error::Config("decay_rate must be positive".into()));
        }
        if !(self.alpha > 1.0) {
            return Err(Error::Config("alpha must exceed 1".into()));
        }
        if self.max_size < 1 {
            return Err(Error::Config("max_size must be >= 1".into()));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::Config("t_end must be positive".into()));
        }
        Ok(())
    }
}

/// Unnormalized weights (k+1)^-alpha for k in [0, xmax].
fn powerlaw_weights(alpha: f64, xmax: usize) -> Vec<f64> {
    (0..=xmax).map(|k| ((k + 1) as f64).powf(-alpha)).collect()
}

/// Mean of the truncated power law P(k) proportional to (k+1)^-alpha on
/// [0, xmax].
pub fn powerlaw_mean(alpha: f64, xmax: usize) -> f64 {
    let w = powerlaw_weights(alpha, xmax);
    let z: f64 = w.iter().sum();
    w.iter().enumerate().map(|(k, wi)| k as f64 * wi).sum::<f64>() / z
}

/// Draw k in [0, xmax] with P(k) proportional to (k+1)^-alpha.
pub fn sample_powerlaw<R: RngCore>(alpha: f64, xmax: usize, rng: &mut R) -> usize {
    let w = powerlaw_weights(alpha, xmax);
    sample_from_weights(&w, rng)
}

fn sample_from_weights<R: RngCore>(weights: &[f64], rng: &mut R) -> usize {
    let z: f64 = weights.iter().sum();
    let u = seeds::uniform01(rng) * z;
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Generate the configured corpus. Node ids are globally unique
/// (`c<i>n<j>`), cascade ids are `c<i>`, and each cascade draws from its own
/// seed substream, so generation is order-independent and bitwise
/// reproducible.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Cascade>> {
    cfg.validate()?;
    let weights = powerlaw_weights(cfg.alpha, cfg.max_size);
    let mean = powerlaw_mean(cfg.alpha, cfg.max_size);
    // Thinning probability that brings the offspring mean to branching_mean.
    let keep_p = if mean > 0.0 { (cfg.branching_mean / mean).min(1.0) } else { 0.0 };
    (0..cfg.n_cascades).map(|i| generate_one(cfg, &weights, keep_p, i)).collect()
}

fn generate_one(
    cfg: &GenConfig,
    weights: &[f64],
    keep_p: f64,
    index: usize,
) -> Result<Cascade> {
    let mut rng = seeds::substream(cfg.seed, &format!("gen.cascade.{index}"));
    let publish_time = 24.0 * seeds::uniform01(&mut rng);

    let id = format!("c{index}");
    let root = format!("c{index}n0");
    let mut records =
        vec![RepostRecord { parent: None, child: root.clone(), join_time: 0.0 }];

    // Min-heap of pending births keyed by (time bits, insertion seq); join
    // times are non-negative finite, so the IEEE bit order is the numeric
    // order and ties resolve deterministically.
    let mut pending: BinaryHeap<std::cmp::Reverse<(u64, u64, usize)>> = BinaryHeap::new();
    let mut seq: u64 = 0;
    let schedule = |rng: &mut rand_chacha::ChaCha20Rng,
                        pending: &mut BinaryHeap<std::cmp::Reverse<(u64, u64, usize)>>,
                        seq: &mut u64,
                        parent_idx: usize,
                        parent_time: f64| {
        let raw = sample_from_weights(weights, rng);
        for _ in 0..raw {
            let kept = seeds::uniform01(rng) < keep_p;
            let dt = seeds::exponential(rng, cfg.decay_rate);
            if !kept {
                continue;
            }
            let t = parent_time + dt;
            if t <= cfg.t_end {
                pending.push(std::cmp::Reverse((t.to_bits(), *seq, parent_idx)));
                *seq += 1;
            }
        }
    };

    schedule(&mut rng, &mut pending, &mut seq, 0, 0.0);
    while records.len() < cfg.max_size {
        let Some(std::cmp::Reverse((t_bits, _, parent_idx))) = pending.pop() else { break };
        let t = f64::from_bits(t_bits);
        let child = format!("c{index}n{}", records.len());
        records.push(RepostRecord {
            parent: Some(records[parent_idx].child.clone()),
            child,
            join_time: t,
        });
        let child_idx = records.len() - 1;
        schedule(&mut rng, &mut pending, &mut seq, child_idx, t);
    }

    // Event-queue order is time order, and children are appended after
    // their parents, so records are already sorted and monotone.
    Ok(Cascade { id, root, publish_time, records })
}
