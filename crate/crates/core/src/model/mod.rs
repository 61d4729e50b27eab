//! Token-level intent taggers: a BiLSTM encoder-decoder with attention
//! fusion and a Transformer encoder-decoder with a masked autoregressive
//! decoder, plus JSON checkpointing.

pub mod bilstm;
mod checkpoint;
pub mod layers;
pub mod params;
pub mod transformer;

pub use bilstm::BiLstmTagger;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use transformer::TransformerTagger;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::corpus::Label;

use params::{BoundParams, ParamSet};

pub const NUM_CLASSES: usize = Label::COUNT;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io error: {0}")]
    Io(String),
}

/// BiLSTM tagger hyperparameters. `hidden_dim` is the total across both
/// directions.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BiLstmConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub attn_layers: usize,
    pub dropout: f64,
    pub proj_dim: usize,
    pub fusion_dim: usize,
    /// When set, the decoder sees only the last `n` input columns (the text
    /// embedding slice) instead of the full fused vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_concat_dim: Option<usize>,
}

impl BiLstmConfig {
    pub fn new(input_dim: usize) -> Self {
        BiLstmConfig {
            input_dim,
            hidden_dim: 512,
            num_layers: 1,
            num_heads: 4,
            attn_layers: 1,
            dropout: 0.45,
            proj_dim: 256,
            fusion_dim: 128,
            decoder_concat_dim: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.proj_dim == 0
        {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim {} must be even to split across directions",
                self.hidden_dim
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        if let Some(n) = self.decoder_concat_dim {
            if n == 0 || n > self.input_dim {
                return Err(ModelError::Config(format!(
                    "decoder_concat_dim {n} must be in 1..={}",
                    self.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// Transformer tagger hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransformerConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl TransformerConfig {
    pub fn new(input_dim: usize) -> Self {
        TransformerConfig {
            input_dim,
            model_dim: 448,
            num_layers: 3,
            num_heads: 8,
            ffn_dim: 4 * 448,
            dropout: 0.25,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.model_dim == 0 || self.num_layers == 0 || self.ffn_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.model_dim % 2 != 0 {
            return Err(ModelError::Config(format!(
                "model_dim {} must be even for positional encodings",
                self.model_dim
            )));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "num_heads {} must divide model_dim {}",
                self.num_heads, self.model_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} must be in [0, 1)",
                self.dropout
            )));
        }
        if self.max_len == 0 {
            return Err(ModelError::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Length of the valid prefix of a right-padded mask. Masks must be a block
/// of `true` followed by `false`.
pub fn prefix_len(mask: &[bool]) -> Result<usize, ModelError> {
    let n = mask.iter().take_while(|&&m| m).count();
    if n == 0 {
        return Err(ModelError::Config("mask has no valid positions".into()));
    }
    if mask[n..].iter().any(|&m| m) {
        return Err(ModelError::Config(
            "mask must be a true-prefix (right padding only)".into(),
        ));
    }
    Ok(n)
}

/// Copy the first `rows` rows of a T×d matrix.
fn trim_rows(x: &Tensor, rows: usize) -> Result<Tensor, ModelError> {
    if !x.is_matrix() || rows > x.rows() {
        return Err(ModelError::Config(format!(
            "cannot take {rows} rows from shape {:?}",
            x.shape()
        )));
    }
    let c = x.cols();
    Ok(Tensor::new(vec![rows, c], x.data()[..rows * c].to_vec())?)
}

/// Append zero rows so the logit matrix covers padded positions too.
fn pad_logit_rows(trimmed: &Tensor, total_rows: usize) -> Tensor {
    let c = trimmed.cols();
    let mut data = trimmed.data().to_vec();
    data.resize(total_rows * c, 0.0);
    Tensor::new(vec![total_rows, c], data).expect("valid shape")
}

/// Either tagger behind one training/eval interface.
#[derive(Debug)]
pub enum Tagger {
    BiLstm(BiLstmTagger),
    Transformer(TransformerTagger),
}

impl Tagger {
    pub fn arch(&self) -> &'static str {
        match self {
            Tagger::BiLstm(_) => "bilstm",
            Tagger::Transformer(_) => "transformer",
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Tagger::BiLstm(m) => &m.params,
            Tagger::Transformer(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Tagger::BiLstm(m) => &mut m.params,
            Tagger::Transformer(m) => &mut m.params,
        }
    }

    /// Build the tape for one sample and return the logits over the valid
    /// prefix (rows = prefix length). Targets drive teacher forcing for the
    /// Transformer and are ignored by the BiLSTM.
    pub fn forward_sample(
        &self,
        x: &Tensor,
        targets: &[usize],
        mask: &[bool],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tape, BoundParams, Var), ModelError> {
        match self {
            Tagger::BiLstm(m) => m.forward(x, mask, training, rng),
            Tagger::Transformer(m) => m.forward_teacher_forced(x, targets, mask, training, rng),
        }
    }

    /// Eval-mode logits padded with zero rows to the full mask length.
    /// Transformer logits are teacher-forced against `targets`.
    pub fn logits(
        &self,
        x: &Tensor,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Tensor, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tape, _, logits) = self.forward_sample(x, targets, mask, false, &mut rng)?;
        Ok(pad_logit_rows(tape.value(logits), mask.len()))
    }

    /// Predicted labels over the valid prefix: argmax for the BiLSTM, greedy
    /// autoregressive decoding for the Transformer.
    pub fn predict(&self, x: &Tensor, mask: &[bool]) -> Result<Vec<Label>, ModelError> {
        match self {
            Tagger::BiLstm(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (tape, _, logits) = m.forward(x, mask, false, &mut rng)?;
                Ok(argmax_rows(tape.value(logits)))
            }
            Tagger::Transformer(m) => m.greedy_decode(x, mask),
        }
    }
}

use rand::SeedableRng;

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<Label> {
    let c = logits.cols();
    (0..logits.rows())
        .map(|r| {
            let row = &logits.data()[r * c..(r + 1) * c];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            Label::from_index(best).expect("3-class logits")
        })
        .collect()
}
