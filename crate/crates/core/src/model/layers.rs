use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

use super::params::{BoundParams, ParamId, ParamSet};
use super::ModelError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map x·W + b with W: in×out, b: 1×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add_uniform(&format!("{name}.w"), vec![d_in, d_out], d_in, rng);
        let b = params.add_const(&format!("{name}.b"), vec![1, d_out], 0.0);
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var, ModelError> {
        let xw = tape.matmul(x, bound.var(self.w))?;
        Ok(tape.add(xw, bound.var(self.b))?)
    }
}

/// One LSTM direction: gates ordered i,f,g,o in the fused weight columns;
/// forget-gate bias initialized to 1.
#[derive(Clone, Debug)]
pub struct LstmDir {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    hidden: usize,
}

impl LstmDir {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_ih = params.add_uniform(&format!("{name}.w_ih"), vec![d_in, 4 * hidden], d_in, rng);
        let w_hh = params.add_uniform(&format!("{name}.w_hh"), vec![hidden, 4 * hidden], hidden, rng);
        let mut bias = Tensor::zeros(vec![1, 4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = params.add(&format!("{name}.b"), bias);
        LstmDir {
            w_ih,
            w_hh,
            b,
            hidden,
        }
    }

    /// One step: standard gates, c' = f⊙c + i⊙g, h' = o⊙tanh(c').
    pub fn cell(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), ModelError> {
        let hd = self.hidden;
        let xi = tape.matmul(x, bound.var(self.w_ih))?;
        let hh = tape.matmul(h, bound.var(self.w_hh))?;
        let s = tape.add(xi, hh)?;
        let gates = tape.add(s, bound.var(self.b))?;
        let i_g = tape.slice_cols(gates, 0, hd)?;
        let f_g = tape.slice_cols(gates, hd, hd)?;
        let g_g = tape.slice_cols(gates, 2 * hd, hd)?;
        let o_g = tape.slice_cols(gates, 3 * hd, hd)?;
        let i = tape.sigmoid(i_g);
        let f = tape.sigmoid(f_g);
        let g = tape.tanh(g_g);
        let o = tape.sigmoid(o_g);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Run over a T×d sequence, optionally right-to-left; hidden states are
    /// returned in input time order as a T×hidden matrix.
    pub fn scan(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        reverse: bool,
    ) -> Result<Var, ModelError> {
        let t_len = tape.value(x).rows();
        let mut h = tape.constant(Tensor::zeros(vec![1, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(vec![1, self.hidden]));
        let mut rows = vec![None; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let xt = tape.row(x, t)?;
            let (h2, c2) = self.cell(tape, bound, xt, h, c)?;
            h = h2;
            c = c2;
            rows[t] = Some(h);
        }
        let rows: Vec<Var> = rows.into_iter().map(|r| r.expect("all steps visited")).collect();
        Ok(tape.concat_rows(&rows)?)
    }
}

/// Forward and backward LSTM over the same input, outputs concatenated.
#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub fwd: LstmDir,
    pub bwd: LstmDir,
}

impl BiLstmLayer {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        hidden_total: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let half = hidden_total / 2;
        BiLstmLayer {
            fwd: LstmDir::init(params, &format!("{name}.fwd"), d_in, half, rng),
            bwd: LstmDir::init(params, &format!("{name}.bwd"), d_in, half, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var, ModelError> {
        let hf = self.fwd.scan(tape, bound, x, false)?;
        let hb = self.bwd.scan(tape, bound, x, true)?;
        Ok(tape.concat_cols(&[hf, hb])?)
    }
}

/// Word-importance weighting: score_t = vᵀ·tanh(W·x_t + b), α = softmax over
/// words, output_t = α_t · x_t.
#[derive(Clone, Debug)]
pub struct AttentionFusion {
    pub proj: Linear,
    pub v: ParamId,
}

impl AttentionFusion {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_att: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let proj = Linear::init(params, &format!("{name}.proj"), d_in, d_att, rng);
        let v = params.add_uniform(&format!("{name}.v"), vec![d_att, 1], d_att, rng);
        AttentionFusion { proj, v }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var, ModelError> {
        let t_len = tape.value(x).rows();
        let hidden = self.proj.forward(tape, bound, x)?;
        let act = tape.tanh(hidden);
        let scores = tape.matmul(act, bound.var(self.v))?; // T×1
        let scores_row = tape.transpose(scores)?; // 1×T
        let alpha_row = tape.softmax_masked(scores_row, &vec![true; t_len])?;
        let alpha = tape.transpose(alpha_row)?; // T×1, column-broadcasts below
        Ok(tape.mul(x, alpha)?)
    }
}

/// Scaled dot-product multi-head attention with output projection. The
/// optional causal mask forbids attending past the query position.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MultiHeadAttention {
            wq: Linear::init(params, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::init(params, &format!("{name}.k"), dim, dim, rng),
            wv: Linear::init(params, &format!("{name}.v"), dim, dim, rng),
            wo: Linear::init(params, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> Result<Var, ModelError> {
        let t_q = tape.value(q_in).rows();
        let t_k = tape.value(kv_in).rows();
        let dk = self.dim / self.heads;
        let q = self.wq.forward(tape, bound, q_in)?;
        let k = self.wk.forward(tape, bound, kv_in)?;
        let v = self.wv.forward(tape, bound, kv_in)?;
        let mask: Vec<bool> = (0..t_q * t_k)
            .map(|i| !causal || i % t_k <= i / t_k)
            .collect();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scaled = tape.scale(raw, 1.0 / (dk as f64).sqrt());
            let attn = tape.softmax_masked_grid(scaled, &mask)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        self.wo.forward(tape, bound, cat)
    }
}

/// Two-layer position-wise feed-forward block with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            l1: Linear::init(params, &format!("{name}.l1"), dim, ffn_dim, rng),
            l2: Linear::init(params, &format!("{name}.l2"), ffn_dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var, ModelError> {
        let h = self.l1.forward(tape, bound, x)?;
        let a = tape.relu(h);
        self.l2.forward(tape, bound, a)
    }
}

/// Learnable layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add_const(&format!("{name}.gain"), vec![1, dim], 1.0),
            bias: params.add_const(&format!("{name}.bias"), vec![1, dim], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var, ModelError> {
        Ok(tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias), LAYER_NORM_EPS)?)
    }
}

/// Fixed sinusoidal positional encodings: PE[t,2i]=sin(t/10000^(2i/d)),
/// PE[t,2i+1]=cos(same).
pub fn positional_encoding(t_len: usize, model_dim: usize) -> Result<Tensor, ModelError> {
    if model_dim % 2 != 0 {
        return Err(ModelError::Config(format!(
            "positional encoding needs an even dimension, got {model_dim}"
        )));
    }
    let mut data = vec![0.0; t_len * model_dim];
    for t in 0..t_len {
        for i in 0..model_dim / 2 {
            let rate = 10000f64.powf(2.0 * i as f64 / model_dim as f64);
            data[t * model_dim + 2 * i] = (t as f64 / rate).sin();
            data[t * model_dim + 2 * i + 1] = (t as f64 / rate).cos();
        }
    }
    Ok(Tensor::new(vec![t_len, model_dim], data)?)
}
