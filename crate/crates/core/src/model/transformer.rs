//! Transformer encoder-decoder tagger: projected inputs with fixed
//! positional encodings, pre-norm encoder stack, an encoder-output/input
//! bridge, and an SOS-shifted causal decoder over a 4-symbol label
//! embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Label, SOS_INDEX};

use super::layers::{positional_encoding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use super::params::{BoundParams, ParamId, ParamSet};
use super::{argmax_rows, prefix_len, trim_rows, ModelError, TransformerConfig, NUM_CLASSES};

#[derive(Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug)]
pub struct TransformerTagger {
    pub config: TransformerConfig,
    pub params: ParamSet,
    pub seed: u64,
    in_proj: Linear,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    bridge: Linear,
    label_embed: ParamId,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    fc: Linear,
}

impl TransformerTagger {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let dm = config.model_dim;
        let in_proj = Linear::init(&mut params, "in_proj", config.input_dim, dm, &mut rng);
        let enc_layers = (0..config.num_layers)
            .map(|l| EncoderLayer {
                ln1: LayerNorm::init(&mut params, &format!("enc.{l}.ln1"), dm),
                attn: MultiHeadAttention::init(
                    &mut params,
                    &format!("enc.{l}.attn"),
                    dm,
                    config.num_heads,
                    &mut rng,
                ),
                ln2: LayerNorm::init(&mut params, &format!("enc.{l}.ln2"), dm),
                ffn: FeedForward::init(&mut params, &format!("enc.{l}.ffn"), dm, config.ffn_dim, &mut rng),
            })
            .collect();
        let enc_norm = LayerNorm::init(&mut params, "enc.norm", dm);
        let bridge = Linear::init(&mut params, "bridge", 2 * dm, dm, &mut rng);
        let label_embed = params.add_normal("label_embed", vec![SOS_INDEX + 1, dm], 0.02, &mut rng);
        let dec_layers = (0..config.num_layers)
            .map(|l| DecoderLayer {
                ln1: LayerNorm::init(&mut params, &format!("dec.{l}.ln1"), dm),
                self_attn: MultiHeadAttention::init(
                    &mut params,
                    &format!("dec.{l}.self"),
                    dm,
                    config.num_heads,
                    &mut rng,
                ),
                ln2: LayerNorm::init(&mut params, &format!("dec.{l}.ln2"), dm),
                cross_attn: MultiHeadAttention::init(
                    &mut params,
                    &format!("dec.{l}.cross"),
                    dm,
                    config.num_heads,
                    &mut rng,
                ),
                ln3: LayerNorm::init(&mut params, &format!("dec.{l}.ln3"), dm),
                ffn: FeedForward::init(&mut params, &format!("dec.{l}.ffn"), dm, config.ffn_dim, &mut rng),
            })
            .collect();
        let dec_norm = LayerNorm::init(&mut params, "dec.norm", dm);
        let fc = Linear::init(&mut params, "fc", dm, NUM_CLASSES, &mut rng);
        Ok(TransformerTagger {
            config,
            params,
            seed,
            in_proj,
            enc_layers,
            enc_norm,
            bridge,
            label_embed,
            dec_layers,
            dec_norm,
            fc,
        })
    }

    fn check_input(&self, x: &Tensor, mask: &[bool]) -> Result<usize, ModelError> {
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
        if n > self.config.max_len {
            return Err(ModelError::Config(format!(
                "sequence length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(n)
    }

    /// Encoder plus bridge: returns the memory M' the decoder attends over.
    fn encode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        xv: Var,
        n: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, ModelError> {
        let p = self.config.dropout;
        let projx = self.in_proj.forward(tape, bound, xv)?;
        let pe = tape.constant(positional_encoding(n, self.config.model_dim)?);
        let with_pe = tape.add(projx, pe)?;
        let mut h = tape.dropout(with_pe, p, training, rng)?;
        for layer in &self.enc_layers {
            let normed = layer.ln1.forward(tape, bound, h)?;
            let attn = layer.attn.forward(tape, bound, normed, normed, false)?;
            let attn = tape.dropout(attn, p, training, rng)?;
            h = tape.add(h, attn)?;
            let normed = layer.ln2.forward(tape, bound, h)?;
            let ff = layer.ffn.forward(tape, bound, normed)?;
            let ff = tape.dropout(ff, p, training, rng)?;
            h = tape.add(h, ff)?;
        }
        let memory = self.enc_norm.forward(tape, bound, h)?;
        let cat = tape.concat_cols(&[memory, projx])?;
        self.bridge.forward(tape, bound, cat)
    }

    /// Decoder over `inputs` (label indices, SOS-shifted) attending to
    /// `memory`; returns per-position 3-class logits.
    fn decode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        memory: Var,
        inputs: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, ModelError> {
        let p = self.config.dropout;
        let emb = tape.select_rows(bound.var(self.label_embed), inputs)?;
        let pe = tape.constant(positional_encoding(inputs.len(), self.config.model_dim)?);
        let with_pe = tape.add(emb, pe)?;
        let mut h = tape.dropout(with_pe, p, training, rng)?;
        for layer in &self.dec_layers {
            let normed = layer.ln1.forward(tape, bound, h)?;
            let attn = layer.self_attn.forward(tape, bound, normed, normed, true)?;
            let attn = tape.dropout(attn, p, training, rng)?;
            h = tape.add(h, attn)?;
            let normed = layer.ln2.forward(tape, bound, h)?;
            let cross = layer.cross_attn.forward(tape, bound, normed, memory, false)?;
            let cross = tape.dropout(cross, p, training, rng)?;
            h = tape.add(h, cross)?;
            let normed = layer.ln3.forward(tape, bound, h)?;
            let ff = layer.ffn.forward(tape, bound, normed)?;
            let ff = tape.dropout(ff, p, training, rng)?;
            h = tape.add(h, ff)?;
        }
        let out = self.dec_norm.forward(tape, bound, h)?;
        self.fc.forward(tape, bound, out)
    }

    /// Teacher-forced forward: the decoder consumes [SOS, y₁..y_{T−1}].
    pub fn forward_teacher_forced(
        &self,
        x: &Tensor,
        targets: &[usize],
        mask: &[bool],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tape, BoundParams, Var), ModelError> {
        let n = self.check_input(x, mask)?;
        if targets.len() < n {
            return Err(ModelError::Config(format!(
                "{} targets for {n} valid positions",
                targets.len()
            )));
        }
        let mut inputs = Vec::with_capacity(n);
        inputs.push(SOS_INDEX);
        inputs.extend_from_slice(&targets[..n - 1]);
        if inputs.iter().skip(1).any(|&t| t >= NUM_CLASSES) {
            return Err(ModelError::Config("target index out of range".into()));
        }
        let trimmed = trim_rows(x, n)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(trimmed);
        let memory = self.encode(&mut tape, &bound, xv, n, training, rng)?;
        let logits = self.decode(&mut tape, &bound, memory, &inputs, training, rng)?;
        Ok((tape, bound, logits))
    }

    /// Left-to-right decoding: start from SOS, at each step argmax the
    /// 3-class distribution and feed the prediction back.
    pub fn greedy_decode(&self, x: &Tensor, mask: &[bool]) -> Result<Vec<Label>, ModelError> {
        let n = self.check_input(x, mask)?;
        let trimmed = trim_rows(x, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(trimmed);
        let memory = self.encode(&mut tape, &bound, xv, n, false, &mut rng)?;
        let mut inputs = vec![SOS_INDEX];
        let mut labels = Vec::with_capacity(n);
        for t in 0..n {
            let logits = self.decode(&mut tape, &bound, memory, &inputs, false, &mut rng)?;
            let rows = argmax_rows(tape.value(logits));
            let label = rows[t];
            labels.push(label);
            inputs.push(label.index());
        }
        Ok(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            input_dim: 6,
            model_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 12,
            dropout: 0.1,
            max_len: 16,
        }
    }

    fn input(t: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..t * d).map(|i| ((i * 11 + 2) % 19) as f64 / 9.0 - 1.0).collect();
        Tensor::new(vec![t, d], data).unwrap()
    }

    #[test]
    fn shape_and_determinism() {
        let model = TransformerTagger::new(tiny(), 5).unwrap();
        let x = input(4, 6);
        let targets = [0, 1, 2, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tape, _, y) = model
            .forward_teacher_forced(&x, &targets, &[true; 4], false, &mut rng)
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 3]);
        let a = tape.value(y).data().to_vec();
        let (tape2, _, y2) = model
            .forward_teacher_forced(&x, &targets, &[true; 4], false, &mut rng)
            .unwrap();
        assert_eq!(a, tape2.value(y2).data());
    }

    #[test]
    fn decoder_is_causal_in_targets() {
        let model = TransformerTagger::new(tiny(), 5).unwrap();
        let x = input(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = {
            let (tape, _, y) = model
                .forward_teacher_forced(&x, &[0, 1, 2, 0, 1], &[true; 5], false, &mut rng)
                .unwrap();
            tape.value(y).data().to_vec()
        };
        // Perturb targets from position 2 on: logits at positions ≤ 2 must
        // be bit-identical (position t sees targets < t only).
        let (tape, _, y) = model
            .forward_teacher_forced(&x, &[0, 1, 0, 2, 2], &[true; 5], false, &mut rng)
            .unwrap();
        assert_eq!(&base[..9], &tape.value(y).data()[..9]);
    }

    #[test]
    fn padding_invariance() {
        let model = TransformerTagger::new(tiny(), 5).unwrap();
        let x = input(3, 6);
        let targets = [2, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tape, _, y) = model
            .forward_teacher_forced(&x, &targets, &[true; 3], false, &mut rng)
            .unwrap();
        let base = tape.value(y).data().to_vec();
        let mut data = x.data().to_vec();
        data.extend(vec![7.0; 2 * 6]);
        let padded = Tensor::new(vec![5, 6], data).unwrap();
        let (tape, _, y) = model
            .forward_teacher_forced(&padded, &[2, 0, 1, 0, 0], &[true, true, true, false, false], false, &mut rng)
            .unwrap();
        assert_eq!(base, tape.value(y).data());
    }

    #[test]
    fn greedy_decode_contract() {
        let model = TransformerTagger::new(tiny(), 9).unwrap();
        let x = input(6, 6);
        let labels = model.greedy_decode(&x, &[true; 6]).unwrap();
        assert_eq!(labels.len(), 6);
        assert_eq!(labels, model.greedy_decode(&x, &[true; 6]).unwrap());
    }

    #[test]
    fn rejects_overlong_and_bad_targets() {
        let mut config = tiny();
        config.max_len = 3;
        let model = TransformerTagger::new(config, 0).unwrap();
        let x = input(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(model
            .forward_teacher_forced(&x, &[0; 4], &[true; 4], false, &mut rng)
            .is_err());
        let model = TransformerTagger::new(tiny(), 0).unwrap();
        assert!(model
            .forward_teacher_forced(&x, &[0, 5, 0, 0], &[true; 4], false, &mut rng)
            .is_err());
        assert!(model
            .forward_teacher_forced(&x, &[0], &[true; 4], false, &mut rng)
            .is_err());
    }
}
