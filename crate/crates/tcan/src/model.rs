//! The full prediction model: feature lookup, time-embedding fusion, graph
//! and sequence encoders, and the MLP head.
//!
//! The head outputs the predicted log-popularity `o = log2(y_hat + 1)`
//! directly; training minimizes squared error in that log space and
//! predictions map back through `y_hat = 2^o - 1`, clamped at 0.

use crate::error::{Error, Result};
use crate::graph_attention::{AttentionTrace, GraphEncoderParams, MaskMode, ResidualMode};
use crate::metrics::log2p1;
use crate::params::{NamedTensor, ParamId, ParamStore};
use crate::seeds;
use crate::seq_encoder::{AttnPoolParams, BiLstmParams};
use crate::tape::{RunMode, Tape, Var};
use crate::tensor::Tensor;
use crate::time_embed::{TimeEmbedParams, TimeStats};
use crate::views::CascadeViews;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};

/// Model variants: the full architecture and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No time embedding; node features enter the encoders unchanged.
    Nt,
    /// Periodic + linear time channels only (no sqrt channel).
    Pl,
    /// Graph encoder only; the sequence half of the head input is zero.
    G,
    /// Sequence encoder only; the graph half of the head input is zero.
    S,
    /// Sequence readout uses the last bidirectional hidden state instead of
    /// attention pooling.
    Rnn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Node feature dimension.
    pub d: usize,
    /// Time embedding dimension (periodic channels plus linear and, in full
    /// mode, sqrt).
    pub d_t: usize,
    pub cgat_layers: usize,
    pub heads: usize,
    pub csat_layers: usize,
    pub d_h: usize,
    /// Hidden and output widths of the prediction head.
    pub mlp_dims: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub mask_mode: MaskMode,
    pub residual_mode: ResidualMode,
    /// Divide all timestamps by t_obs before embedding.
    pub normalize_times: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            d_t: 32,
            cgat_layers: 3,
            heads: 4,
            csat_layers: 2,
            d_h: 64,
            mlp_dims: vec![64, 64, 1],
            lr: 1e-3,
            weight_decay: 5e-4,
            dropout: 0.1,
            batch_size: 32,
            patience: 10,
            max_epochs: 100,
            seed: 7,
            variant: Variant::Full,
            mask_mode: MaskMode::ParentToChild,
            residual_mode: ResidualMode::SingleSkip,
            normalize_times: false,
        }
    }
}

impl ModelConfig {
    /// Time embedding width for this variant (0 when disabled).
    pub fn te_dim(&self) -> usize {
        match self.variant {
            Variant::Nt => 0,
            _ => self.d_t,
        }
    }

    /// Number of periodic channels.
    pub fn periodic_channels(&self) -> usize {
        match self.variant {
            Variant::Nt => 0,
            Variant::Pl => self.d_t.saturating_sub(1),
            _ => self.d_t.saturating_sub(2),
        }
    }

    /// Width of the encoder input (node features plus time embedding) and
    /// of every graph-encoder layer.
    pub fn width(&self) -> usize {
        self.d + self.te_dim()
    }

    /// Width of the head input: graph vector plus sequence vector.
    pub fn head_input(&self) -> usize {
        self.width() + self.d_h
    }

    pub fn uses_te(&self) -> bool {
        self.variant != Variant::Nt
    }

    pub fn uses_graph(&self) -> bool {
        self.variant != Variant::S
    }

    pub fn uses_seq(&self) -> bool {
        self.variant != Variant::G
    }

    pub fn uses_attn_pool(&self) -> bool {
        self.uses_seq() && self.variant != Variant::Rnn
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d < 1 {
            return err("d must be >= 1".into());
        }
        if self.uses_te() && self.periodic_channels() < 1 {
            return err(format!("d_t {} leaves no periodic channels", self.d_t));
        }
        if self.heads < 1 || self.width() % self.heads != 0 {
            return err(format!("heads {} must divide width {}", self.heads, self.width()));
        }
        if self.cgat_layers < 1 || self.csat_layers < 1 {
            return err("encoder stacks need at least one layer".into());
        }
        if self.d_h % 2 != 0 || self.d_h == 0 {
            return err(format!("d_h {} must be positive and even", self.d_h));
        }
        if self.mlp_dims.last() != Some(&1) {
            return err("mlp_dims must end in 1".into());
        }
        if self.mlp_dims.is_empty() {
            return err("mlp_dims must not be empty".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return err("lr must be positive, weight_decay >= 0".into());
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return err("batch_size and max_epochs must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Node-id vocabulary; fixed at training time, first-seen order.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_views<'a>(views: impl Iterator<Item = &'a CascadeViews>) -> Self {
        let mut v = Vocab::default();
        for view in views {
            for id in &view.graph.nodes {
                v.insert(id);
            }
        }
        v
    }

    pub fn from_ids(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { ids, index }
    }

    fn insert(&mut self, id: &str) {
        if !self.index.contains_key(id) {
            self.index.insert(id.to_string(), self.ids.len());
            self.ids.push(id.to_string());
        }
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Everything produced by one forward pass.
pub struct ForwardOutput {
    /// Predicted log-popularity, a 1x1 tape node.
    pub output: Var,
    /// Per-layer, per-head attention scores (traced passes only).
    pub trace: Option<AttentionTrace>,
    /// Input to the final head layer (traced passes only); the cascade
    /// representation used for inspection dumps.
    pub representation: Option<Vec<f64>>,
}

pub struct TcanModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub t_obs: f64,
    features: ParamId,
    te: Option<TimeEmbedParams>,
    graph: Option<GraphEncoderParams>,
    seq: Option<BiLstmParams>,
    pool: Option<AttnPoolParams>,
    mlp: Vec<(ParamId, ParamId)>,
}

impl TcanModel {
    /// Build a freshly initialized model. Each module draws from its own
    /// seed substream, so variants share initial values wherever shapes
    /// agree. `mean_log_label` seeds the head's output bias, starting the
    /// model at the constant log-mean predictor.
    pub fn init(
        cfg: ModelConfig,
        vocab: Vocab,
        stats: &TimeStats,
        mean_log_label: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        if vocab.is_empty() {
            return Err(Error::Validation("empty vocabulary".into()));
        }
        let mut store = ParamStore::new();

        let mut rng = seeds::substream(cfg.seed, "init.features");
        let features =
            store.add("features.table", Tensor::randn(vocab.len(), cfg.d, 1.0, &mut rng))?;

        let te = if cfg.uses_te() {
            let mut rng = seeds::substream(cfg.seed, "init.te");
            Some(TimeEmbedParams::init(
                &mut store,
                cfg.periodic_channels(),
                cfg.variant != Variant::Pl,
                stats,
                &mut rng,
            )?)
        } else {
            None
        };

        let graph = if cfg.uses_graph() {
            let mut rng = seeds::substream(cfg.seed, "init.cgat");
            Some(GraphEncoderParams::init(
                &mut store,
                cfg.cgat_layers,
                cfg.width(),
                cfg.heads,
                cfg.mask_mode,
                cfg.residual_mode,
                &mut rng,
            )?)
        } else {
            None
        };

        let (seq, pool) = if cfg.uses_seq() {
            let mut rng = seeds::substream(cfg.seed, "init.csat");
            let seq =
                BiLstmParams::init(&mut store, cfg.csat_layers, cfg.width(), cfg.d_h, &mut rng)?;
            let pool = if cfg.uses_attn_pool() {
                Some(AttnPoolParams::init(&mut store, cfg.d_h, &mut rng)?)
            } else {
                None
            };
            (Some(seq), pool)
        } else {
            (None, None)
        };

        let mut rng = seeds::substream(cfg.seed, "init.mlp");
        let mut mlp = Vec::with_capacity(cfg.mlp_dims.len());
        let mut in_dim = cfg.head_input();
        for (i, &out_dim) in cfg.mlp_dims.iter().enumerate() {
            // The head input is a sum over up to max_size node rows, so the
            // first layer starts smaller than Xavier to avoid saturating.
            let std = if i == 0 {
                1.0 / in_dim as f64
            } else {
                (2.0 / (in_dim + out_dim) as f64).sqrt()
            };
            let w = store.add(format!("mlp.layer{i}.w"), Tensor::randn(in_dim, out_dim, std, &mut rng))?;
            let bias_init = if i + 1 == cfg.mlp_dims.len() {
                Tensor::filled(1, out_dim, mean_log_label)
            } else {
                Tensor::zeros(1, out_dim)
            };
            let b = store.add(format!("mlp.layer{i}.b"), bias_init)?;
            mlp.push((w, b));
            in_dim = out_dim;
        }

        Ok(TcanModel { cfg, vocab, store, t_obs: stats.t_obs, features, te, graph, seq, pool, mlp })
    }

    /// Dense feature-table row indices for the view's nodes.
    fn node_indices(&self, views: &CascadeViews) -> Result<Vec<usize>> {
        views
            .graph
            .nodes
            .iter()
            .map(|id| {
                self.vocab.get(id).ok_or_else(|| {
                    Error::Validation(format!("node id `{id}` not in the model vocabulary"))
                })
            })
            .collect()
    }

    /// One forward pass on the given tape. Deterministic in eval mode; in
    /// train mode dropout draws from `rng`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        views: &CascadeViews,
        mode: RunMode,
        rng: &mut ChaCha20Rng,
        traced: bool,
    ) -> Result<ForwardOutput> {
        // Work around the borrow of self.store alongside &self.
        let store = &self.store;
        self.forward_with_store(store, tape, views, mode, rng, traced)
    }

    /// Forward pass reading parameter values from an external store with
    /// this model's layout (gradient checking perturbs such a clone).
    pub fn forward_with_store(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        views: &CascadeViews,
        mode: RunMode,
        rng: &mut ChaCha20Rng,
        traced: bool,
    ) -> Result<ForwardOutput> {
        let n = views.observed_size;
        if n == 0 {
            return Err(Error::Validation("forward: empty view".into()));
        }
        let indices = self.node_indices(views)?;
        let x = tape.gather_rows(store, self.features, &indices)?;

        let fused = if let Some(te) = &self.te {
            let times: Vec<f64> = if self.cfg.normalize_times {
                views.times().iter().map(|t| t / self.t_obs).collect()
            } else {
                views.times().to_vec()
            };
            let h_t = te.embed_sequence(tape, store, &times)?;
            crate::time_embed::fuse(tape, x, h_t)?
        } else {
            x
        };

        let (h_g, trace) = if let Some(graph) = &self.graph {
            graph.encode(tape, store, fused, views.graph.adjacency(), n, mode, rng, traced)?
        } else {
            (tape.constant(Tensor::zeros(1, self.cfg.width()))?, None)
        };

        let h_s = if let Some(seq) = &self.seq {
            let (steps, last) = seq.forward(tape, store, fused)?;
            match &self.pool {
                Some(pool) => pool.forward(tape, store, steps)?,
                None => last,
            }
        } else {
            tape.constant(Tensor::zeros(1, self.cfg.d_h))?
        };

        let mut h = tape.concat_cols(&[h_g, h_s])?;
        let mut representation = None;
        for (i, (w, b)) in self.mlp.iter().enumerate() {
            let w = tape.param(store, *w)?;
            let b = tape.param(store, *b)?;
            let lin = tape.matmul(h, w)?;
            let lin = tape.add_row(lin, b)?;
            if i + 1 == self.mlp.len() {
                h = lin;
            } else {
                let act = tape.tanh(lin)?;
                h = tape.dropout(act, mode, rng)?;
                if traced && i + 2 == self.mlp.len() {
                    representation = Some(tape.value(h).data().to_vec());
                }
            }
        }
        Ok(ForwardOutput { output: h, trace, representation })
    }

    /// Map a head output (log space) to a popularity prediction.
    pub fn output_to_prediction(o: f64) -> f64 {
        (o.min(60.0).exp2() - 1.0).max(0.0)
    }

    /// Eval-mode prediction of the incremental popularity.
    pub fn predict(&self, views: &CascadeViews) -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = seeds::substream(0, "eval");
        let out = self.forward_tape(&mut tape, views, RunMode::eval(), &mut rng, false)?;
        Ok(Self::output_to_prediction(tape.value(out.output).get(0, 0)))
    }

    /// Traced eval-mode pass: prediction, attention trace, representation.
    pub fn explain(&self, views: &CascadeViews) -> Result<(f64, AttentionTrace, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut rng = seeds::substream(0, "eval");
        let out = self.forward_tape(&mut tape, views, RunMode::eval(), &mut rng, true)?;
        let pred = Self::output_to_prediction(tape.value(out.output).get(0, 0));
        Ok((
            pred,
            out.trace.unwrap_or(AttentionTrace { layers: Vec::new() }),
            out.representation.unwrap_or_default(),
        ))
    }

    /// Squared error between the head output and the target's log value;
    /// the per-sample training loss.
    pub fn squared_log_error(&self, tape: &mut Tape, output: Var, label: u64) -> Result<Var> {
        let diff = tape.add_scalar(output, -log2p1(label as f64))?;
        tape.mul(diff, diff)
    }

    pub fn adam_hyper(&self) -> crate::optim::AdamHyper {
        crate::optim::AdamHyper {
            lr: self.cfg.lr,
            weight_decay: self.cfg.weight_decay,
            ..crate::optim::AdamHyper::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    t_obs: f64,
    vocab: Vec<String>,
    params: Vec<NamedTensor>,
}

impl TcanModel {
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            t_obs: self.t_obs,
            vocab: self.vocab.ids().to_vec(),
            params: self.store.to_named_tensors(),
        };
        serde_json::to_writer(w, &ckpt)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(r)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let stats = TimeStats { t_obs: ckpt.t_obs, min_gap: ckpt.t_obs, max_gap: ckpt.t_obs };
        let mut model = TcanModel::init(ckpt.config, Vocab::from_ids(ckpt.vocab), &stats, 0.0)?;
        model.store.load_named_tensors(ckpt.params)?;
        Ok(model)
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(f))
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(f))
    }

    /// Zero the head's first-layer rows fed by one half of the concatenated
    /// input (test hook for the ablation-equivalence identity).
    pub fn zero_head_half(&mut self, graph_half: bool) {
        let (w, _) = self.mlp[0];
        let width = self.cfg.width();
        let range = if graph_half { 0..width } else { width..width + self.cfg.d_h };
        let t = &mut self.store.get_mut(w).value;
        for r in range {
            t.row_mut(r).fill(0.0);
        }
    }
}
