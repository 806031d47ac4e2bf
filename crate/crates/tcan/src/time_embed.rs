//! Learnable time embedding.
//!
//! Maps a join timestamp to a vector with three kinds of channels:
//! periodic `cos(omega * t + phase)` (several learnable frequencies),
//! linear `w_l * t + b_l`, and non-linear scaling `w_s * sqrt(t)`. The
//! embedding has `d_p + 2` dimensions in full mode and `d_p + 1` when the
//! sqrt channel is ablated.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::views::CascadeViews;
use rand::RngCore;

/// Data statistics that set the initial scales of the embedding weights so
/// every channel starts O(1) regardless of the dataset's time units.
#[derive(Debug, Clone, Copy)]
pub struct TimeStats {
    /// Observation cutoff (or a stand-in: the largest observed join time).
    pub t_obs: f64,
    /// Smallest positive gap between consecutive join times.
    pub min_gap: f64,
    /// Largest gap between consecutive join times.
    pub max_gap: f64,
}

impl TimeStats {
    pub fn from_views(views: &[CascadeViews], t_obs: Option<f64>) -> Self {
        let mut min_gap = f64::INFINITY;
        let mut max_gap: f64 = 0.0;
        let mut max_time: f64 = 0.0;
        for v in views {
            let times = v.times();
            for w in times.windows(2) {
                let gap = w[1] - w[0];
                if gap > 0.0 {
                    min_gap = min_gap.min(gap);
                    max_gap = max_gap.max(gap);
                }
            }
            if let Some(&last) = times.last() {
                max_time = max_time.max(last);
            }
        }
        let t_obs = t_obs.unwrap_or(max_time).max(f64::MIN_POSITIVE);
        if !min_gap.is_finite() || max_gap == 0.0 {
            min_gap = t_obs;
            max_gap = t_obs;
        }
        TimeStats { t_obs, min_gap, max_gap }
    }
}

#[derive(Debug, Clone)]
pub struct TimeEmbedParams {
    pub omega: ParamId,
    pub phase: ParamId,
    pub w_l: ParamId,
    pub b_l: ParamId,
    /// Absent when the sqrt channel is ablated.
    pub w_s: Option<ParamId>,
    /// Number of periodic channels.
    pub d_p: usize,
}

impl TimeEmbedParams {
    /// Output dimensionality.
    pub fn dim(&self) -> usize {
        self.d_p + 1 + usize::from(self.w_s.is_some())
    }

    /// Register parameters. Frequencies are drawn log-uniformly over a
    /// period range spanning the observed gap scales, clamped to the
    /// observation-window scale: periods far below the window alias into
    /// per-node noise that gradient steps cannot recover from, and large
    /// corpora always contain near-zero minimum gaps. The linear and sqrt
    /// weights start at 1/t_obs and 1/sqrt(t_obs) so every channel is O(1)
    /// regardless of time units.
    pub fn init<R: RngCore>(
        store: &mut ParamStore,
        d_p: usize,
        with_sqrt: bool,
        stats: &TimeStats,
        rng: &mut R,
    ) -> Result<Self> {
        if d_p < 1 {
            return Err(Error::Config("time embedding needs at least one periodic channel".into()));
        }
        let tau = std::f64::consts::TAU;
        let t_ref = stats.t_obs.max(f64::MIN_POSITIVE);
        let period_lo = stats.min_gap.max(t_ref / 32.0);
        let period_hi = stats.max_gap.max(4.0 * t_ref).max(2.0 * period_lo);
        let lo = (tau / period_hi).ln();
        let hi = (tau / period_lo).ln().max(lo);
        let omegas: Vec<f64> = (0..d_p)
            .map(|_| (lo + (hi - lo) * crate::seeds::uniform01(rng)).exp())
            .collect();
        let omega = store.add("te.omega", Tensor::row_vec(&omegas))?;
        let phase = store.add("te.phase", Tensor::zeros(1, d_p))?;
        let w_l = store.add("te.w_l", Tensor::scalar(1.0 / stats.t_obs))?;
        let b_l = store.add("te.b_l", Tensor::scalar(0.0))?;
        let w_s = if with_sqrt {
            Some(store.add("te.w_s", Tensor::scalar(1.0 / stats.t_obs.sqrt()))?)
        } else {
            None
        };
        Ok(TimeEmbedParams { omega, phase, w_l, b_l, w_s, d_p })
    }

    /// Embed one timestamp without a tape (used for inspection and tests;
    /// matches `embed_sequence` row-for-row).
    pub fn embed_time(&self, store: &ParamStore, t: f64) -> Result<Vec<f64>> {
        if t < 0.0 || !t.is_finite() {
            return Err(Error::Validation(format!("time {t} must be finite and >= 0")));
        }
        let omega = store.value(self.omega);
        let phase = store.value(self.phase);
        let mut out = Vec::with_capacity(self.dim());
        for c in 0..self.d_p {
            out.push((omega.get(0, c) * t + phase.get(0, c)).cos());
        }
        out.push(store.value(self.w_l).get(0, 0) * t + store.value(self.b_l).get(0, 0));
        if let Some(w_s) = self.w_s {
            out.push(store.value(w_s).get(0, 0) * t.sqrt());
        }
        Ok(out)
    }

    /// Embed a non-empty time sequence on the tape: [n] -> [n, dim].
    pub fn embed_sequence(&self, tape: &mut Tape, store: &ParamStore, times: &[f64]) -> Result<Var> {
        if times.is_empty() {
            return Err(Error::Validation("embed_sequence: empty time sequence".into()));
        }
        if times.iter().any(|&t| t < 0.0 || !t.is_finite()) {
            return Err(Error::Validation("embed_sequence: times must be finite and >= 0".into()));
        }
        let t_col = tape.constant(Tensor::column(times))?;
        let omega = tape.param(store, self.omega)?;
        let phase = tape.param(store, self.phase)?;
        let scaled = tape.matmul(t_col, omega)?;
        let shifted = tape.add_row(scaled, phase)?;
        let periodic = tape.cos(shifted)?;

        let w_l = tape.param(store, self.w_l)?;
        let b_l = tape.param(store, self.b_l)?;
        let lin = tape.matmul(t_col, w_l)?;
        let linear = tape.add_row(lin, b_l)?;

        let mut parts = vec![periodic, linear];
        if let Some(w_s) = self.w_s {
            let sqrt_col =
                tape.constant(Tensor::column(&times.iter().map(|t| t.sqrt()).collect::<Vec<_>>()))?;
            let w_s = tape.param(store, w_s)?;
            parts.push(tape.matmul(sqrt_col, w_s)?);
        }
        tape.concat_cols(&parts)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.omega, self.phase, self.w_l, self.b_l];
        if let Some(w_s) = self.w_s {
            ids.push(w_s);
        }
        ids
    }
}

/// Column-wise concatenation of node features with their time embedding.
pub fn fuse(tape: &mut Tape, node_features: Var, time_embedding: Var) -> Result<Var> {
    tape.concat_cols(&[node_features, time_embedding])
}
