//! Cascade graph attention encoder.
//!
//! A stack of adjacency-masked multi-head self-attention layers. Row i may
//! attend to row j only where the mask allows it (by default: j is i's
//! parent, or j == i via an added self-loop), so information flows along
//! observed diffusion edges and the receptive field grows one hop per
//! layer. Each layer applies a feed-forward block to the attention output
//! and layer-normalizes the sum with the layer input; the readout is a
//! column-wise sum over nodes, making the graph vector invariant to node
//! permutations.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{RunMode, Tape, Var};
use crate::tensor::Tensor;
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Which edges a node may attend to, besides itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Row i attends to j iff edge j -> i exists (parent to child flow).
    #[default]
    ParentToChild,
    /// Row i attends to j iff either direction of the edge exists.
    Symmetric,
}

/// How the residual connection is wired inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// One skip: output = LN(FFN(attn(x)) + x).
    #[default]
    SingleSkip,
    /// Two skips: h = x + attn(x); output = LN(h + FFN(h)).
    DoubleSkip,
}

#[derive(Debug, Clone)]
struct HeadParams {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct GraphLayerParams {
    heads: Vec<HeadParams>,
    w_o: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Per-layer, per-head attention score matrices captured during a traced
/// forward pass. Rows sum to 1 over unmasked entries.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// layers[l][h] is the n*n score matrix of head h in layer l.
    pub layers: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct GraphEncoderParams {
    pub layers: Vec<GraphLayerParams>,
    pub width: usize,
    pub n_heads: usize,
    pub mask_mode: MaskMode,
    pub residual_mode: ResidualMode,
}

/// Attention mask over n nodes: row i may attend to j iff (per mode) the
/// edge exists, or i == j (self-loops keep every softmax row non-empty).
pub fn build_mask(adjacency: &[bool], n: usize, mode: MaskMode) -> Vec<bool> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let allowed = match mode {
                MaskMode::ParentToChild => adjacency[j * n + i],
                MaskMode::Symmetric => adjacency[j * n + i] || adjacency[i * n + j],
            };
            mask[i * n + j] = allowed || i == j;
        }
    }
    mask
}

fn xavier<R: RngCore>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::randn(rows, cols, std, rng)
}

impl GraphEncoderParams {
    /// Register all layer parameters. `width` must be divisible by
    /// `n_heads`; the feed-forward inner width is 2x the model width.
    pub fn init<R: RngCore>(
        store: &mut ParamStore,
        n_layers: usize,
        width: usize,
        n_heads: usize,
        mask_mode: MaskMode,
        residual_mode: ResidualMode,
        rng: &mut R,
    ) -> Result<Self> {
        if n_layers < 1 {
            return Err(Error::Config("graph encoder needs at least one layer".into()));
        }
        if n_heads < 1 || width % n_heads != 0 {
            return Err(Error::Config(format!(
                "head count {n_heads} must divide encoder width {width}"
            )));
        }
        let d_head = width / n_heads;
        let f_inner = 2 * width;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                heads.push(HeadParams {
                    w_q: store.add(format!("cgat.layer{l}.head{h}.w_q"), xavier(width, d_head, rng))?,
                    w_k: store.add(format!("cgat.layer{l}.head{h}.w_k"), xavier(width, d_head, rng))?,
                    w_v: store.add(format!("cgat.layer{l}.head{h}.w_v"), xavier(width, d_head, rng))?,
                });
            }
            layers.push(GraphLayerParams {
                heads,
                w_o: store.add(format!("cgat.layer{l}.w_o"), xavier(width, width, rng))?,
                ffn_w1: store.add(format!("cgat.layer{l}.ffn.w1"), xavier(width, f_inner, rng))?,
                ffn_b1: store.add(format!("cgat.layer{l}.ffn.b1"), Tensor::zeros(1, f_inner))?,
                ffn_w2: store.add(format!("cgat.layer{l}.ffn.w2"), xavier(f_inner, width, rng))?,
                ffn_b2: store.add(format!("cgat.layer{l}.ffn.b2"), Tensor::zeros(1, width))?,
                ln_gain: store.add(format!("cgat.layer{l}.ln.gain"), Tensor::filled(1, width, 1.0))?,
                ln_bias: store.add(format!("cgat.layer{l}.ln.bias"), Tensor::zeros(1, width))?,
            });
        }
        Ok(GraphEncoderParams { layers, width, n_heads, mask_mode, residual_mode })
    }

    /// Masked multi-head attention: per head, scores are the scaled dot
    /// product of queries and keys softmaxed over the mask; head outputs are
    /// concatenated and projected. Returns the projected output and each
    /// head's score matrix.
    pub fn attend<R: RngCore>(
        &self,
        layer: &GraphLayerParams,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        mode: RunMode,
        rng: &mut R,
    ) -> Result<(Var, Vec<Tensor>)> {
        let scale = 1.0 / (self.width as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(layer.heads.len());
        let mut scores = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let w_q = tape.param(store, head.w_q)?;
            let w_k = tape.param(store, head.w_k)?;
            let w_v = tape.param(store, head.w_v)?;
            let q = tape.matmul(x, w_q)?;
            let k = tape.matmul(x, w_k)?;
            let v = tape.matmul(x, w_v)?;
            let k_t = tape.transpose(k)?;
            let logits_raw = tape.matmul(q, k_t)?;
            let logits = tape.scale(logits_raw, scale)?;
            let alpha = tape.masked_softmax(logits, mask)?;
            scores.push(tape.value(alpha).clone());
            let alpha = tape.dropout(alpha, mode, rng)?;
            head_outputs.push(tape.matmul(alpha, v)?);
        }
        let concat = tape.concat_cols(&head_outputs)?;
        let w_o = tape.param(store, layer.w_o)?;
        let projected = tape.matmul(concat, w_o)?;
        Ok((projected, scores))
    }

    fn ffn<R: RngCore>(
        &self,
        layer: &GraphLayerParams,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: RunMode,
        rng: &mut R,
    ) -> Result<Var> {
        let w1 = tape.param(store, layer.ffn_w1)?;
        let b1 = tape.param(store, layer.ffn_b1)?;
        let w2 = tape.param(store, layer.ffn_w2)?;
        let b2 = tape.param(store, layer.ffn_b2)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h)?;
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        tape.dropout(h, mode, rng)
    }

    /// One encoder layer; output shape equals input shape.
    pub fn layer_forward<R: RngCore>(
        &self,
        index: usize,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        mode: RunMode,
        rng: &mut R,
    ) -> Result<(Var, Vec<Tensor>)> {
        let layer = &self.layers[index];
        let (attn, scores) = self.attend(layer, tape, store, x, mask, mode, rng)?;
        let gain = tape.param(store, layer.ln_gain)?;
        let bias = tape.param(store, layer.ln_bias)?;
        let out = match self.residual_mode {
            ResidualMode::SingleSkip => {
                let f = self.ffn(layer, tape, store, attn, mode, rng)?;
                let sum = tape.add(f, x)?;
                tape.layernorm(sum, gain, bias)?
            }
            ResidualMode::DoubleSkip => {
                let h = tape.add(x, attn)?;
                let f = self.ffn(layer, tape, store, h, mode, rng)?;
                let sum = tape.add(h, f)?;
                tape.layernorm(sum, gain, bias)?
            }
        };
        Ok((out, scores))
    }

    /// Run the full stack and sum-pool the last layer's rows into the graph
    /// vector [1, width]. Captures the per-head score matrices when
    /// `capture_trace` is set.
    pub fn encode<R: RngCore>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        adjacency: &[bool],
        n: usize,
        mode: RunMode,
        rng: &mut R,
        capture_trace: bool,
    ) -> Result<(Var, Option<AttentionTrace>)> {
        let mask = build_mask(adjacency, n, self.mask_mode);
        let mut h = x;
        let mut trace = capture_trace.then(|| AttentionTrace { layers: Vec::new() });
        for l in 0..self.layers.len() {
            let (next, scores) = self.layer_forward(l, tape, store, h, &mask, mode, rng)?;
            h = next;
            if let Some(t) = trace.as_mut() {
                t.layers.push(scores);
            }
        }
        let pooled = tape.sum_rows(h)?;
        Ok((pooled, trace))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            for h in &l.heads {
                ids.extend([h.w_q, h.w_k, h.w_v]);
            }
            ids.extend([l.w_o, l.ffn_w1, l.ffn_b1, l.ffn_w2, l.ffn_b2, l.ln_gain, l.ln_bias]);
        }
        ids
    }
}
