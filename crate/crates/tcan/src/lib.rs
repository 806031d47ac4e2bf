//! Cascade popularity prediction.
//!
//! End-to-end implementation of a temporal cascade attention network:
//! cascade parsing and windowing, a synthetic branching-process generator,
//! a dense-tensor reverse-mode autodiff engine with Adam, a learnable time
//! embedding, an adjacency-masked multi-head graph attention encoder, a
//! bidirectional LSTM sequence encoder with attention pooling, squared
//! log-error training with early stopping, and a hand-crafted-feature ridge
//! baseline.

pub mod baseline;
pub mod cascade;
pub mod error;
pub mod gradcheck;
pub mod graph_attention;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod seeds;
pub mod seq_encoder;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod time_embed;
pub mod train;
pub mod views;

pub use cascade::{Cascade, RepostRecord};
pub use error::{Error, Result};
pub use graph_attention::{AttentionTrace, GraphEncoderParams, MaskMode, ResidualMode};
pub use metrics::EvalReport;
pub use model::{ModelConfig, TcanModel, Variant, Vocab};
pub use optim::AdamHyper;
pub use params::{ParamId, ParamStore, Parameter};
pub use synth::GenConfig;
pub use tape::{RunMode, Tape, Var};
pub use tensor::Tensor;
pub use time_embed::{TimeEmbedParams, TimeStats};
pub use train::{evaluate, train, History, TrainOptions};
pub use views::{CascadeGraph, CascadeSequence, CascadeViews, DatasetSplit};
