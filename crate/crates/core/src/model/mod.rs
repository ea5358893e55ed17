//! Encoder-decoder assembled from interchangeable basic sub-layers.
//!
//! Encoder block: basic sub-layer, then feed-forward. Decoder block with
//! cross-attention: feed-forward, unidirectional basic sub-layer, attention
//! over the encoder output. Every sub-layer sits inside a residual
//! connection with layer norm (post-norm by default). The output layer is a
//! ReLU feed-forward `d → d_ffn → vocab`.
//!
//! Sequences are processed one at a time at their true length, so padding
//! never reaches attention, memory taps or the loss.

mod batch;
mod checkpoint;
mod config;
mod forward;
mod params;
mod vocab;

pub use batch::{teacher_forcing, SequenceBatch, TokenBatch};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, SublayerKind};
pub use forward::{positional_encoding, AttentionRecord, Dropout, Net, Site};
pub use params::{build_model, count_parameters, param_specs, Init, ParamSpec, ParamStore};
pub use vocab::{Vocabulary, BOS, EOS, FIRST_TOKEN, PAD, UNK};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        params.check_layout(&cfg)?;
        Ok(Model { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = build_model(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    /// Encoder output `[T × d_model]` for one feature sequence, no dropout.
    pub fn encode(&self, feats: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut net = Net::bind(&mut tape, &self.cfg, &self.params);
        let z = net.encode(&mut tape, feats, &mut Dropout::off())?;
        Ok(tape.value(z).clone())
    }

    /// Decoder logits `[T' × vocab]` for a fixed encoder output.
    pub fn decode_logits(&self, z: &Tensor, inputs: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut net = Net::bind(&mut tape, &self.cfg, &self.params);
        let zv = tape.leaf(z.clone());
        let out = net.decode(&mut tape, zv, inputs, &mut Dropout::off())?;
        Ok(tape.value(out).clone())
    }

    /// Full forward pass with every attention map recorded.
    pub fn forward_recorded(&self, feats: &Tensor, inputs: &[usize]) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let mut net = Net::bind(&mut tape, &self.cfg, &self.params).recording();
        let mut drop = Dropout::off();
        let z = net.encode(&mut tape, feats, &mut drop)?;
        let out = net.decode(&mut tape, z, inputs, &mut drop)?;
        Ok((tape.value(out).clone(), net.records(&tape)))
    }
}

/// Encoder over a padded batch; padding rows of the result are zero.
pub fn encoder_forward(feats: &SequenceBatch, params: &ParamStore, cfg: &ModelConfig) -> Result<SequenceBatch> {
    cfg.validate()?;
    if feats.width() != cfg.input_dim {
        return Err(Error::shape(
            "encoder_forward",
            feats.data().shape(),
            &[feats.batch_size(), feats.max_len(), cfg.input_dim],
        ));
    }
    let model = Model {
        cfg: cfg.clone(),
        params: params.clone(),
    };
    let seqs = (0..feats.batch_size())
        .map(|b| model.encode(&feats.sequence(b)?))
        .collect::<Result<Vec<_>>>()?;
    let padded = SequenceBatch::from_sequences(&seqs)?;
    // keep the input's time extent even when every sequence is shorter
    let (b, t, d) = (feats.batch_size(), feats.max_len(), cfg.d_basic);
    let mut data = vec![0.0; b * t * d];
    for i in 0..b {
        let s = padded.sequence(i)?;
        data[i * t * d..i * t * d + s.numel()].copy_from_slice(s.data());
    }
    SequenceBatch::new(Tensor::new(vec![b, t, d], data)?, feats.lengths().to_vec())
}

/// Decoder over a padded batch of shifted targets; returns
/// `[B × T' × vocab]` logits with zero rows at padding positions.
pub fn decoder_forward(
    z: &SequenceBatch,
    targets_shifted: &TokenBatch,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if z.batch_size() != targets_shifted.batch_size() {
        return Err(Error::shape(
            "decoder_forward",
            z.data().shape(),
            &[targets_shifted.batch_size(), targets_shifted.max_len()],
        ));
    }
    let model = Model {
        cfg: cfg.clone(),
        params: params.clone(),
    };
    let (b, t, v) = (z.batch_size(), targets_shifted.max_len(), cfg.vocab_size);
    let mut data = vec![0.0; b * t * v];
    for i in 0..b {
        let logits = model.decode_logits(&z.sequence(i)?, targets_shifted.sequence(i))?;
        data[i * t * v..i * t * v + logits.numel()].copy_from_slice(logits.data());
    }
    Tensor::new(vec![b, t, v], data)
}
