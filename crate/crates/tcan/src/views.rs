//! Observation-window views of cascades, dataset filtering and splitting.
//!
//! A view restricts a cascade to the prefix joined by some observation
//! cutoff `t_obs` and pairs it with the regression label: how many more
//! nodes join in `(t_obs, t_end]`.

use crate::cascade::Cascade;
use crate::error::{Error, Result};
use crate::seeds;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};

/// Observed diffusion structure. Dense indices follow sequence order
/// (join time ascending, ties by node id).
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeGraph {
    /// Dense index -> node id.
    pub nodes: Vec<String>,
    /// Node id -> dense index.
    pub node_index: HashMap<String, usize>,
    /// Row-major n*n; entry (a, b) is true iff the directed edge a -> b
    /// was observed. A tree: exactly n-1 true entries.
    adjacency: Vec<bool>,
}

impl CascadeGraph {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from * self.nodes.len() + to]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count()
    }

    /// Parent dense index per node (None for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let n = self.n();
        let mut out = vec![None; n];
        for a in 0..n {
            for b in 0..n {
                if self.has_edge(a, b) {
                    out[b] = Some(a);
                }
            }
        }
        out
    }
}

/// Observed nodes in join order with their join times.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSequence {
    /// Dense indices ordered by join time; with the index convention used
    /// here this is simply 0..n.
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
}

impl CascadeSequence {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Everything the model sees for one cascade: observed graph, observed
/// sequence, and the incremental-popularity label.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeViews {
    pub id: String,
    pub graph: CascadeGraph,
    pub sequence: CascadeSequence,
    pub observed_size: usize,
    /// Number of nodes joining in `(t_obs, t_end]`.
    pub label: u64,
}

impl CascadeViews {
    /// Join times of the observed nodes, in sequence order.
    pub fn times(&self) -> &[f64] {
        &self.sequence.times
    }
}

/// Restrict `c` to the window `[0, t_obs]` and count the label over
/// `(t_obs, t_end]`. Requires `0 < t_obs <= t_end`.
pub fn build_views(c: &Cascade, t_obs: f64, t_end: f64) -> Result<CascadeViews> {
    if !(t_obs > 0.0) || !t_obs.is_finite() {
        return Err(Error::Validation(format!("t_obs {t_obs} must be positive and finite")));
    }
    if t_end < t_obs {
        return Err(Error::Validation(format!("t_end {t_end} must be >= t_obs {t_obs}")));
    }
    // Records are sorted by (time, id), so the observed prefix is contiguous
    // and already in sequence order.
    let observed: Vec<_> = c.records.iter().filter(|r| r.join_time <= t_obs).collect();
    if observed.is_empty() {
        return Err(Error::Validation(format!("cascade `{}`: empty observation window", c.id)));
    }
    if observed[0].parent.is_some() && !observed.iter().any(|r| r.parent.is_none()) {
        return Err(Error::Validation(format!("cascade `{}`: root outside window", c.id)));
    }
    let n = observed.len();
    let mut nodes = Vec::with_capacity(n);
    let mut node_index = HashMap::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for (i, r) in observed.iter().enumerate() {
        nodes.push(r.child.clone());
        node_index.insert(r.child.clone(), i);
        times.push(r.join_time);
    }
    let mut adjacency = vec![false; n * n];
    for r in &observed {
        if let Some(p) = &r.parent {
            let a = node_index[p.as_str()];
            let b = node_index[r.child.as_str()];
            adjacency[a * n + b] = true;
        }
    }
    let label = c.records.iter().filter(|r| r.join_time > t_obs && r.join_time <= t_end).count();
    Ok(CascadeViews {
        id: c.id.clone(),
        graph: CascadeGraph { nodes, node_index, adjacency },
        sequence: CascadeSequence { nodes: (0..n).collect(), times },
        observed_size: n,
        label: label as u64,
    })
}

/// Keep views with at least `min_obs` observed nodes, preserving order.
pub fn filter_dataset(views: Vec<CascadeViews>, min_obs: usize) -> Vec<CascadeViews> {
    views.into_iter().filter(|v| v.observed_size >= min_obs).collect()
}

/// Train/validation/test partition of a filtered view set.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<CascadeViews>,
    pub val: Vec<CascadeViews>,
    pub test: Vec<CascadeViews>,
    pub split_seed: u64,
    pub ratios: [f64; 3],
}

/// Deterministic shuffle (Fisher-Yates on a seeded stream) followed by a
/// contiguous partition with rounded boundaries.
pub fn split_dataset(
    mut views: Vec<CascadeViews>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split ratios sum to {total}, expected 1")));
    }
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Validation("split ratios must be non-negative".into()));
    }
    let n = views.len();
    if n < 3 {
        return Err(Error::Validation(format!("need at least 3 views to split, got {n}")));
    }
    let mut rng = seeds::substream(seed, "split.shuffle");
    for i in (1..n).rev() {
        let j = seeds::uniform_index(&mut rng, i + 1);
        views.swap(i, j);
    }
    let b1 = (ratios[0] * n as f64).round() as usize;
    let b2 = ((ratios[0] + ratios[1]) * n as f64).round() as usize;
    let b1 = b1.min(n);
    let b2 = b2.clamp(b1, n);
    let test = views.split_off(b2);
    let val = views.split_off(b1);
    Ok(DatasetSplit { train: views, val, test, split_seed: seed, ratios })
}

// ---------------------------------------------------------------------------
// Serialized form (JSON lines, one view per line)
// ---------------------------------------------------------------------------

/// Flat serializable view: `parent[i]` is the dense index of node i's parent
/// (None for the root), which reconstructs the adjacency exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewRecord {
    pub id: String,
    pub nodes: Vec<String>,
    pub parent: Vec<Option<usize>>,
    pub times: Vec<f64>,
    pub observed_size: usize,
    pub label: u64,
}

impl From<&CascadeViews> for ViewRecord {
    fn from(v: &CascadeViews) -> Self {
        ViewRecord {
            id: v.id.clone(),
            nodes: v.graph.nodes.clone(),
            parent: v.graph.parents(),
            times: v.sequence.times.clone(),
            observed_size: v.observed_size,
            label: v.label,
        }
    }
}

impl TryFrom<ViewRecord> for CascadeViews {
    type Error = Error;

    fn try_from(r: ViewRecord) -> Result<Self> {
        let n = r.nodes.len();
        if r.parent.len() != n || r.times.len() != n || r.observed_size != n || n == 0 {
            return Err(Error::Validation(format!("view record `{}` is inconsistent", r.id)));
        }
        let mut adjacency = vec![false; n * n];
        for (b, p) in r.parent.iter().enumerate() {
            if let Some(a) = p {
                if *a >= n {
                    return Err(Error::Validation(format!(
                        "view record `{}`: parent index {a} out of range",
                        r.id
                    )));
                }
                adjacency[a * n + b] = true;
            }
        }
        let node_index: HashMap<String, usize> =
            r.nodes.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(CascadeViews {
            id: r.id,
            graph: CascadeGraph { nodes: r.nodes, node_index, adjacency },
            sequence: CascadeSequence { nodes: (0..n).collect(), times: r.times },
            observed_size: n,
            label: r.label,
        })
    }
}

pub fn write_views_jsonl<W: Write>(mut w: W, views: &[CascadeViews]) -> Result<()> {
    for v in views {
        serde_json::to_writer(&mut w, &ViewRecord::from(v))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_views_jsonl<R: BufRead>(r: R) -> Result<Vec<CascadeViews>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ViewRecord = serde_json::from_str(&line)?;
        out.push(CascadeViews::try_from(rec)?);
    }
    Ok(out)
}

/// Side metadata written next to the split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMeta {
    pub t_obs: f64,
    pub t_end: f64,
    pub min_obs: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub counts: [usize; 3],
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::parse_cascade_line;

    fn chain() -> Cascade {
        parse_cascade_line("42\tA\t0\t3\tA:0 A/B:120 A/B/C:300", 1).unwrap()
    }

    #[test]
    fn window_restricts_graph_and_counts_label() {
        let v = build_views(&chain(), 200.0, 400.0).unwrap();
        assert_eq!(v.graph.nodes, vec!["A".to_string(), "B".to_string()]);
        assert_eq!(v.observed_size, 2);
        assert_eq!(v.label, 1);
        assert!(v.graph.has_edge(0, 1));
        assert_eq!(v.graph.edge_count(), 1);
        assert_eq!(v.times(), &[0.0, 120.0]);
    }

    #[test]
    fn empty_prediction_interval_gives_zero_label() {
        let v = build_views(&chain(), 400.0, 400.0).unwrap();
        assert_eq!(v.observed_size, 3);
        assert_eq!(v.label, 0);
    }

    #[test]
    fn tight_window_keeps_root_only() {
        let v = build_views(&chain(), 50.0, 400.0).unwrap();
        assert_eq!(v.graph.nodes, vec!["A".to_string()]);
        assert_eq!(v.graph.edge_count(), 0);
        assert_eq!(v.label, 2);
    }

    #[test]
    fn invalid_windows_rejected() {
        assert!(build_views(&chain(), 0.0, 10.0).is_err());
        assert!(build_views(&chain(), 10.0, 5.0).is_err());
        assert!(build_views(&chain(), -1.0, 5.0).is_err());
    }

    #[test]
    fn window_monotonicity() {
        let c = chain();
        let mut prev_size = 0;
        let mut prev_label = u64::MAX;
        for t_obs in [1.0, 119.0, 120.0, 299.0, 300.0, 500.0] {
            let v = build_views(&c, t_obs, 600.0).unwrap();
            assert!(v.observed_size >= prev_size);
            assert!(v.label <= prev_label);
            assert_eq!(v.observed_size as u64 + v.label, 3);
            prev_size = v.observed_size;
            prev_label = v.label;
        }
    }

    #[test]
    fn filter_keeps_order_and_threshold() {
        let c = chain();
        let views: Vec<_> = [50.0, 200.0, 400.0]
            .iter()
            .map(|&t| build_views(&c, t, 400.0).unwrap())
            .collect();
        let kept = filter_dataset(views.clone(), 2);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].observed_size, 2);
        let all = filter_dataset(views.clone(), 1);
        assert_eq!(all.len(), 3);
        let none = filter_dataset(views, 10);
        assert!(none.is_empty());
    }

    fn dummy_views(n: usize) -> Vec<CascadeViews> {
        let c = chain();
        (0..n)
            .map(|i| {
                let mut v = build_views(&c, 200.0, 400.0).unwrap();
                v.id = format!("v{i}");
                v
            })
            .collect()
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let s = split_dataset(dummy_views(1000), [0.7, 0.15, 0.15], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 150, 150));
        let s = split_dataset(dummy_views(10), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let a = split_dataset(dummy_views(100), [0.7, 0.15, 0.15], 9).unwrap();
        let b = split_dataset(dummy_views(100), [0.7, 0.15, 0.15], 9).unwrap();
        let ids = |vs: &[CascadeViews]| vs.iter().map(|v| v.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.val), ids(&b.val));
        assert_eq!(ids(&a.test), ids(&b.test));
        let mut all: Vec<String> = ids(&a.train);
        all.extend(ids(&a.val));
        all.extend(ids(&a.test));
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split_dataset(dummy_views(2), [0.7, 0.15, 0.15], 1).is_err());
        assert!(split_dataset(dummy_views(10), [0.5, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn views_jsonl_round_trip() {
        let views = dummy_views(3);
        let mut buf = Vec::new();
        write_views_jsonl(&mut buf, &views).unwrap();
        let back = read_views_jsonl(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(views, back);
        // Byte-stable serialization.
        let mut buf2 = Vec::new();
        write_views_jsonl(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }
}
