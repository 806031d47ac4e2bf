//! Shared fixtures for the benchmark suite: deterministic synthetic
//! cascades of a requested observed size, plus a ready-to-run model.

use tcan::model::{ModelConfig, TcanModel, Vocab};
use tcan::synth::{generate, GenConfig};
use tcan::time_embed::TimeStats;
use tcan::views::{build_views, CascadeViews};

/// Generate a cascade whose observed size is exactly `n` by growing a
/// supercritical corpus and truncating the first large-enough cascade.
pub fn cascade_of_size(n: usize, seed: u64) -> CascadeViews {
    let cfg = GenConfig {
        n_cascades: 200,
        branching_mean: 0.95,
        max_size: n,
        t_end: 1e9,
        seed,
        ..GenConfig::default()
    };
    let cascades = generate(&cfg).expect("generation");
    let big = cascades.into_iter().find(|c| c.size() == n).unwrap_or_else(|| {
        panic!("no cascade of size {n}; raise the corpus size")
    });
    build_views(&big, 1e9, 1e9).expect("views")
}

/// Default-size model over the given views' vocabulary.
pub fn model_for(views: &[CascadeViews], seed: u64) -> TcanModel {
    let cfg = ModelConfig { seed, ..ModelConfig::default() };
    let vocab = Vocab::from_views(views.iter());
    let stats = TimeStats::from_views(views, None);
    TcanModel::init(cfg, vocab, &stats, 1.0).expect("model init")
}
