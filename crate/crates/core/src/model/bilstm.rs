//! BiLSTM encoder-decoder tagger: attention fusion over the fused input,
//! projection, BiLSTM encoder, multi-head self-attention gating, then a
//! BiLSTM decoder over the gated states concatenated with the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

use super::layers::{AttentionFusion, BiLstmLayer, Linear, MultiHeadAttention};
use super::params::{BoundParams, ParamSet};
use super::{prefix_len, trim_rows, BiLstmConfig, ModelError, NUM_CLASSES};

#[derive(Debug)]
pub struct BiLstmTagger {
    pub config: BiLstmConfig,
    pub params: ParamSet,
    pub seed: u64,
    fusion: AttentionFusion,
    proj: Linear,
    encoder: Vec<BiLstmLayer>,
    attention: Vec<MultiHeadAttention>,
    decoder: Vec<BiLstmLayer>,
    fc: Linear,
}

impl BiLstmTagger {
    pub fn new(config: BiLstmConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.input_dim;
        let h = config.hidden_dim;
        let fusion = AttentionFusion::init(&mut params, "fusion", d, config.fusion_dim, &mut rng);
        let proj = Linear::init(&mut params, "proj", d, config.proj_dim, &mut rng);
        let encoder = (0..config.num_layers)
            .map(|l| {
                let d_in = if l == 0 { config.proj_dim } else { h };
                BiLstmLayer::init(&mut params, &format!("enc.{l}"), d_in, h, &mut rng)
            })
            .collect();
        let attention = (0..config.attn_layers)
            .map(|l| {
                MultiHeadAttention::init(&mut params, &format!("attn.{l}"), h, config.num_heads, &mut rng)
            })
            .collect();
        let concat_dim = config.decoder_concat_dim.unwrap_or(d);
        let decoder = (0..config.num_layers)
            .map(|l| {
                let d_in = if l == 0 { h + concat_dim } else { h };
                BiLstmLayer::init(&mut params, &format!("dec.{l}"), d_in, h, &mut rng)
            })
            .collect();
        let fc = Linear::init(&mut params, "fc", h, NUM_CLASSES, &mut rng);
        Ok(BiLstmTagger {
            config,
            params,
            seed,
            fusion,
            proj,
            encoder,
            attention,
            decoder,
            fc,
        })
    }

    /// Forward one sample. The padded tail of `x` is dropped before the tape
    /// is built, so logits cover exactly the valid prefix.
    pub fn forward(
        &self,
        x: &Tensor,
        mask: &[bool],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tape, BoundParams, Var), ModelError> {
        if !x.is_matrix() || x.cols() != self.config.input_dim {
            return Err(ModelError::Config(format!(
                "input shape {:?}, expected [T, {}]",
                x.shape(),
                self.config.input_dim
            )));
        }
        if mask.len() != x.rows() {
            return Err(ModelError::Config(format!(
                "mask length {} vs {} rows",
                mask.len(),
                x.rows()
            )));
        }
        let n = prefix_len(mask)?;
        let trimmed = trim_rows(x, n)?;
        let p = self.config.dropout;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(trimmed);

        let fused = self.fusion.forward(&mut tape, &bound, xv)?;
        let proj = self.proj.forward(&mut tape, &bound, fused)?;
        let proj = tape.relu(proj);
        let mut h = tape.dropout(proj, p, training, rng)?;
        for layer in &self.encoder {
            let out = layer.forward(&mut tape, &bound, h)?;
            h = tape.dropout(out, p, training, rng)?;
        }
        let mut o = h;
        for attn in &self.attention {
            let out = attn.forward(&mut tape, &bound, o, o, false)?;
            o = tape.dropout(out, p, training, rng)?;
        }
        let gated = tape.mul(o, h)?;
        let residual = match self.config.decoder_concat_dim {
            Some(k) => tape.slice_cols(xv, self.config.input_dim - k, k)?,
            None => xv,
        };
        let mut z = tape.concat_cols(&[gated, residual])?;
        for layer in &self.decoder {
            let out = layer.forward(&mut tape, &bound, z)?;
            z = tape.dropout(out, p, training, rng)?;
        }
        let logits = self.fc.forward(&mut tape, &bound, z)?;
        Ok((tape, bound, logits))
    }

    /// Analytic parameter count from the declared shapes.
    pub fn expected_param_count(config: &BiLstmConfig) -> usize {
        let d = config.input_dim;
        let h = config.hidden_dim;
        let half = h / 2;
        let lstm = |d_in: usize| 2 * (d_in * 4 * half + half * 4 * half + 4 * half);
        let mut total = d * config.fusion_dim + config.fusion_dim + config.fusion_dim; // fusion
        total += d * config.proj_dim + config.proj_dim; // projection
        for l in 0..config.num_layers {
            total += lstm(if l == 0 { config.proj_dim } else { h });
        }
        total += config.attn_layers * 4 * (h * h + h);
        let concat = config.decoder_concat_dim.unwrap_or(d);
        for l in 0..config.num_layers {
            total += lstm(if l == 0 { h + concat } else { h });
        }
        total += h * NUM_CLASSES + NUM_CLASSES; // classifier
        total
    }
}
