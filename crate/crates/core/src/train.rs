//! Masked cross-entropy training: Adam with weight decay, gradient
//! clipping, plateau LR scheduling, early stopping, Table-style evaluation
//! metrics, and seeded hyperparameter search.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::corpus::{featurize, CorpusError, Label, UtteranceSample};
use crate::embed::EmbeddingSource;
use crate::model::params::ParamSet;
use crate::model::{
    BiLstmConfig, BiLstmTagger, ModelError, Tagger, TransformerConfig, TransformerTagger,
};
use crate::speech::{FeatureMode, Normalizer};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("search failed: {0}")]
    Search(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io error: {0}")]
    Io(String),
}

/// Plateau scheduler settings: reduce lr by `factor` after `patience`
/// epochs without the monitored metric improving by more than `min_delta`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 5,
            min_delta: 1e-4,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// false = coupled (L2 added to the gradient), true = decoupled decay.
    #[serde(default)]
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub patience_early_stop: usize,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn bilstm_default(seed: u64) -> Self {
        TrainConfig {
            lr: 4.2e-3,
            weight_decay: 5.44e-5,
            decoupled_weight_decay: false,
            batch_size: 16,
            max_epochs: 200,
            clip_norm: 1.0,
            patience_early_stop: 20,
            scheduler: SchedulerConfig::default(),
            seed,
        }
    }

    pub fn transformer_default(seed: u64) -> Self {
        TrainConfig {
            lr: 2.22e-4,
            weight_decay: 2.25e-6,
            ..TrainConfig::bilstm_default(seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0 < self.scheduler.factor && self.scheduler.factor < 1.0) {
            return Err(TrainError::Config(format!(
                "scheduler factor {} must be in (0, 1)",
                self.scheduler.factor
            )));
        }
        if self.scheduler.patience == 0 || self.patience_early_stop == 0 {
            return Err(TrainError::Config("patience must be ≥ 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.clip_norm <= 0.0 {
            return Err(TrainError::Config(format!(
                "clip_norm {} must be > 0",
                self.clip_norm
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Mean masked cross-entropy over a batch of per-sample logit matrices.
/// Log-sum-exp stabilized; padded (masked-off) rows contribute nothing.
pub fn cross_entropy_masked(
    logits: &[Tensor],
    targets: &[Vec<usize>],
    masks: &[Vec<bool>],
) -> Result<f64, TrainError> {
    if logits.len() != targets.len() || logits.len() != masks.len() {
        return Err(TrainError::Config(format!(
            "batch size disagreement: {} logits, {} targets, {} masks",
            logits.len(),
            targets.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((l, t), m) in logits.iter().zip(targets).zip(masks) {
        if !l.is_matrix() || l.rows() != t.len() || l.rows() != m.len() {
            return Err(TrainError::Config(format!(
                "sample shapes disagree: logits {:?}, {} targets, {} mask",
                l.shape(),
                t.len(),
                m.len()
            )));
        }
        let c = l.cols();
        for (r, (&tgt, &valid)) in t.iter().zip(m).enumerate() {
            if !valid {
                continue;
            }
            if tgt >= c {
                return Err(TrainError::Config(format!("target {tgt} out of {c} classes")));
            }
            let xs = &l.data()[r * c..(r + 1) * c];
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - xs[tgt];
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::Autodiff(AutodiffError::DegenerateMask));
    }
    Ok(total / count as f64)
}

/// First/second-moment Adam state, one slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update from the gradients accumulated in `params`. Coupled
/// decay adds wd·θ to the gradient; decoupled subtracts lr·wd·θ directly.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<(), TrainError> {
    for p in params.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Divergence(format!(
                "non-finite gradient in '{}'",
                p.name
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
            let mut g = p.grad[j];
            if !decoupled {
                g += weight_decay * *theta;
            }
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if decoupled {
                *theta -= lr * weight_decay * *theta;
            }
        }
        if !p.value.all_finite() {
            return Err(TrainError::Divergence(format!(
                "non-finite parameter in '{}' after update",
                p.name
            )));
        }
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.grad_global_norm();
    if norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}

/// Reduce-on-plateau over a higher-is-better metric.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: f64,
    stall: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: SchedulerConfig) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::NEG_INFINITY,
            stall: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's validation metric; returns the lr to use next.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric > self.best + self.config.min_delta {
            self.best = metric;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.stall = 0;
            }
        }
        self.lr
    }
}

/// Per-class one-vs-rest counts and derived rates.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Indexed by `Label::index()`: O, GOAL, DETAIL.
    pub per_class: [ClassMetrics; Label::COUNT],
    pub token_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Selection objective: macro-F1 over GOAL and DETAIL only.
    pub macro_f1_goal_detail: f64,
    /// confusion[gold][pred] token counts.
    pub confusion: [[usize; Label::COUNT]; Label::COUNT],
}

/// Metrics from aligned gold/predicted label streams (valid tokens only).
pub fn metrics_from_pairs(gold: &[Label], pred: &[Label]) -> Result<MetricsReport, TrainError> {
    if gold.len() != pred.len() || gold.is_empty() {
        return Err(TrainError::Config(format!(
            "need equal non-empty label streams, got {} vs {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut confusion = [[0usize; Label::COUNT]; Label::COUNT];
    for (g, p) in gold.iter().zip(pred) {
        confusion[g.index()][p.index()] += 1;
    }
    let total = gold.len();
    let mut per_class = [ClassMetrics::default(); Label::COUNT];
    for c in 0..Label::COUNT {
        let tp = confusion[c][c];
        let fn_ = confusion[c].iter().sum::<usize>() - tp;
        let fp = (0..Label::COUNT).map(|g| confusion[g][c]).sum::<usize>() - tp;
        let tn = total - tp - fn_ - fp;
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class[c] = ClassMetrics {
            accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1,
            support: tp + fn_,
        };
    }
    let correct: usize = (0..Label::COUNT).map(|c| confusion[c][c]).sum();
    let mean = |f: fn(&ClassMetrics) -> f64, set: &[usize]| {
        set.iter().map(|&c| f(&per_class[c])).sum::<f64>() / set.len() as f64
    };
    let all = [0, 1, 2];
    let gd = [Label::GOAL.index(), Label::DETAIL.index()];
    Ok(MetricsReport {
        per_class,
        token_accuracy: correct as f64 / total as f64,
        macro_precision: mean(|m| m.precision, &all),
        macro_recall: mean(|m| m.recall, &all),
        macro_f1: mean(|m| m.f1, &all),
        macro_f1_goal_detail: mean(|m| m.f1, &gd),
        confusion,
    })
}

/// Featurized samples ready for the taggers: per-sample input matrix plus
/// gold label indices.
pub struct Dataset {
    pub items: Vec<(Tensor, Vec<usize>)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.items.iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn prepare(
    samples: &[UtteranceSample],
    mode: FeatureMode,
    source: &EmbeddingSource,
    normalizer: Option<&Normalizer>,
) -> Result<Dataset, TrainError> {
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let rows = featurize(s, mode, source, normalizer)?;
        let x = Tensor::from_rows(&rows)?;
        let targets: Vec<usize> = s.labels.iter().map(|l| l.index()).collect();
        items.push((x, targets));
    }
    Ok(Dataset { items })
}

/// Run the tagger over a dataset and score predictions against gold labels.
pub fn evaluate(tagger: &Tagger, data: &Dataset) -> Result<MetricsReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut gold = Vec::with_capacity(data.token_count());
    let mut pred = Vec::with_capacity(data.token_count());
    for (x, targets) in &data.items {
        let mask = vec![true; targets.len()];
        let labels = tagger.predict(x, &mask)?;
        for (&t, p) in targets.iter().zip(labels) {
            gold.push(Label::from_index(t).expect("valid label index"));
            pred.push(p);
        }
    }
    metrics_from_pairs(&gold, &pred)
}

/// Eval-mode mean cross-entropy of a tagger over a dataset.
pub fn dataset_loss(tagger: &Tagger, data: &Dataset) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (x, targets) in &data.items {
        let mask = vec![true; targets.len()];
        let (tape, _, logits) = tagger.forward_sample(x, targets, &mask, false, &mut rng)?;
        let ce = tape_ce_value(&tape, logits, targets)?;
        total += ce;
        tokens += targets.len();
    }
    Ok(total / tokens as f64)
}

fn tape_ce_value(
    tape: &crate::autodiff::Tape,
    logits: crate::autodiff::Var,
    targets: &[usize],
) -> Result<f64, TrainError> {
    let l = tape.value(logits);
    Ok(cross_entropy_masked(
        std::slice::from_ref(&l.clone()),
        &[targets.to_vec()],
        &[vec![true; targets.len()]],
    )? * targets.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Train in place; on return the tagger carries the parameters of the best
/// validation-macro-F1 epoch (GOAL/DETAIL objective).
pub fn train(
    tagger: &mut Tagger,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("train and val splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(tagger.params());
    let mut scheduler = PlateauScheduler::new(config.lr, config.scheduler.clone());
    let mut history = Vec::new();
    let mut best_params: Option<ParamSet> = None;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut es_best = f64::NEG_INFINITY;
    let mut es_stall = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch_tokens: usize = chunk.iter().map(|&i| train_set.items[i].1.len()).sum();
            tagger.params_mut().zero_grad();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (x, targets) = &train_set.items[i];
                let mask = vec![true; targets.len()];
                let (mut tape, bound, logits) =
                    tagger.forward_sample(x, targets, &mask, true, &mut rng)?;
                let ce = tape.masked_ce_sum(logits, targets, &mask)?;
                let value = tape.value(ce).item()?;
                if !value.is_finite() {
                    return Err(TrainError::Divergence(format!(
                        "non-finite loss at epoch {epoch}"
                    )));
                }
                batch_loss += value;
                tape.backward_scaled(ce, 1.0 / batch_tokens as f64)?;
                tagger.params_mut().accumulate_from_tape(&tape, &bound, 1.0);
            }
            clip_gradients(tagger.params_mut(), config.clip_norm);
            adam_step(
                tagger.params_mut(),
                &mut adam,
                scheduler.lr(),
                config.weight_decay,
                config.decoupled_weight_decay,
            )
            .map_err(|e| match e {
                TrainError::Divergence(msg) => {
                    TrainError::Divergence(format!("epoch {epoch}: {msg}"))
                }
                other => other,
            })?;
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
        }
        let train_loss = epoch_loss / epoch_tokens as f64;
        let val_loss = dataset_loss(tagger, val_set)?;
        let val_f1 = evaluate(tagger, val_set)?.macro_f1_goal_detail;
        let lr_used = scheduler.lr();
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_macro_f1: val_f1,
            lr: lr_used,
        });
        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best_epoch = epoch;
            best_params = Some(tagger.params().clone());
        }
        if val_f1 > es_best + config.scheduler.min_delta {
            es_best = val_f1;
            es_stall = 0;
        } else {
            es_stall += 1;
        }
        scheduler.step(val_f1);
        if es_stall >= config.patience_early_stop {
            break;
        }
    }
    if let Some(best) = best_params {
        *tagger.params_mut() = best;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_f1: best_f1,
    })
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.to_string()))?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_macro_f1", "lr"])
        .map_err(|e| TrainError::Io(e.to_string()))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.train_loss),
            format!("{:.6}", r.val_loss),
            format!("{:.6}", r.val_macro_f1),
            format!("{:e}", r.lr),
        ])
        .map_err(|e| TrainError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::Io(e.to_string()))
}

/// One sampled or explicitly supplied hyperparameter combination.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrialPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub attn_layers: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub index: usize,
    pub point: TrialPoint,
    pub val_f1: Option<f64>,
    pub error: Option<String>,
}

/// Sampling ranges for random search. Log-uniform for lr and weight decay,
/// uniform for dropout, uniform choice for the discrete axes.
#[derive(Clone, Debug)]
pub struct SearchSpace {
    pub lr: (f64, f64),
    pub weight_decay: (f64, f64),
    pub hidden_dims: Vec<usize>,
    pub num_layers: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub attn_layers: Vec<usize>,
    pub dropout: (f64, f64),
    pub budget: usize,
}

impl SearchSpace {
    pub fn standard(budget: usize) -> Self {
        SearchSpace {
            lr: (1e-5, 1e-2),
            weight_decay: (1e-7, 1e-3),
            hidden_dims: vec![128, 256, 384, 512],
            num_layers: vec![1, 2, 3, 4],
            num_heads: vec![1, 2, 4, 8],
            attn_layers: vec![1, 2, 4, 8],
            dropout: (0.1, 0.5),
            budget,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.budget == 0 {
            return Err(TrainError::Config("search budget must be ≥ 1".into()));
        }
        if self.hidden_dims.is_empty()
            || self.num_layers.is_empty()
            || self.num_heads.is_empty()
            || self.attn_layers.is_empty()
        {
            return Err(TrainError::Config("search axes must be non-empty".into()));
        }
        if self.lr.0 <= 0.0 || self.lr.1 < self.lr.0 {
            return Err(TrainError::Config("lr range must be positive and ordered".into()));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> TrialPoint {
        let log_uniform = |range: (f64, f64), rng: &mut ChaCha8Rng| {
            let (lo, hi) = (range.0.ln(), range.1.ln());
            (lo + rng.gen::<f64>() * (hi - lo)).exp()
        };
        let pick = |v: &[usize], rng: &mut ChaCha8Rng| v[rng.gen_range(0..v.len())];
        let hidden_dim = pick(&self.hidden_dims, rng);
        // Heads must divide the (even) dim; resample from the divisors.
        let heads: Vec<usize> = self
            .num_heads
            .iter()
            .copied()
            .filter(|h| hidden_dim % h == 0)
            .collect();
        let num_heads = if heads.is_empty() { 1 } else { pick(&heads, rng) };
        TrialPoint {
            lr: log_uniform(self.lr, rng),
            weight_decay: log_uniform(self.weight_decay, rng),
            hidden_dim,
            num_layers: pick(&self.num_layers, rng),
            num_heads,
            attn_layers: pick(&self.attn_layers, rng),
            dropout: self.dropout.0 + rng.gen::<f64>() * (self.dropout.1 - self.dropout.0),
        }
    }
}

fn build_tagger(arch: &str, input_dim: usize, point: &TrialPoint, seed: u64) -> Result<Tagger, TrainError> {
    match arch {
        "bilstm" => {
            let config = BiLstmConfig {
                hidden_dim: point.hidden_dim,
                num_layers: point.num_layers,
                num_heads: point.num_heads,
                attn_layers: point.attn_layers,
                dropout: point.dropout,
                ..BiLstmConfig::new(input_dim)
            };
            Ok(Tagger::BiLstm(BiLstmTagger::new(config, seed)?))
        }
        "transformer" => {
            let config = TransformerConfig {
                model_dim: point.hidden_dim,
                num_layers: point.num_layers,
                num_heads: point.num_heads,
                ffn_dim: 4 * point.hidden_dim,
                dropout: point.dropout,
                ..TransformerConfig::new(input_dim)
            };
            Ok(Tagger::Transformer(TransformerTagger::new(config, seed)?))
        }
        other => Err(TrainError::Config(format!(
            "unknown architecture '{other}' (expected bilstm|transformer)"
        ))),
    }
}

/// Seeded random search, with explicitly supplied points (e.g. the paper
/// defaults) evaluated first and counted against the budget's total.
pub fn hyperparameter_search(
    arch: &str,
    space: &SearchSpace,
    explicit: &[TrialPoint],
    train_set: &Dataset,
    val_set: &Dataset,
    base: &TrainConfig,
) -> Result<(TrialPoint, Vec<TrialResult>), TrainError> {
    space.validate()?;
    let input_dim = train_set
        .items
        .first()
        .ok_or_else(|| TrainError::Config("empty training set".into()))?
        .0
        .cols();
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let mut points: Vec<TrialPoint> = explicit.to_vec();
    while points.len() < explicit.len() + space.budget {
        points.push(space.sample(&mut rng));
    }
    let mut results = Vec::with_capacity(points.len());
    let mut best: Option<(f64, TrialPoint)> = None;
    for (index, point) in points.into_iter().enumerate() {
        let config = TrainConfig {
            lr: point.lr,
            weight_decay: point.weight_decay,
            ..base.clone()
        };
        let outcome = build_tagger(arch, input_dim, &point, base.seed)
            .and_then(|mut tagger| train(&mut tagger, train_set, val_set, &config));
        match outcome {
            Ok(out) => {
                if best.as_ref().map(|(f, _)| out.best_val_f1 > *f).unwrap_or(true) {
                    best = Some((out.best_val_f1, point.clone()));
                }
                results.push(TrialResult {
                    index,
                    point,
                    val_f1: Some(out.best_val_f1),
                    error: None,
                });
            }
            Err(e) => results.push(TrialResult {
                index,
                point,
                val_f1: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((_, point)) => Ok((point, results)),
        None => Err(TrainError::Search("all trials failed".into())),
    }
}

pub fn write_trials_csv(trials: &[TrialResult], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.to_string()))?;
    w.write_record([
        "trial", "lr", "weight_decay", "hidden_dim", "num_layers", "num_heads", "attn_layers",
        "dropout", "val_macro_f1", "error",
    ])
    .map_err(|e| TrainError::Io(e.to_string()))?;
    for t in trials {
        w.write_record([
            t.index.to_string(),
            format!("{:e}", t.point.lr),
            format!("{:e}", t.point.weight_decay),
            t.point.hidden_dim.to_string(),
            t.point.num_layers.to_string(),
            t.point.num_heads.to_string(),
            t.point.attn_layers.to_string(),
            format!("{:.3}", t.point.dropout),
            t.val_f1.map(|f| format!("{f:.6}")).unwrap_or_default(),
            t.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| TrainError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::Io(e.to_string()))
}

/// One (model, feature-mode) cell of the results table.
pub struct ReportEntry {
    pub model: String,
    pub mode: String,
    pub report: MetricsReport,
}

/// Results table: rows = model × {Goal, Detail, Overall}, columns =
/// feature-mode × {Acc, Prec, Rec, F1}, percentages to two decimals.
/// Returns (aligned text, CSV).
pub fn report_table(entries: &[ReportEntry]) -> Result<(String, String), TrainError> {
    if entries.is_empty() {
        return Err(TrainError::Config("no reports to tabulate".into()));
    }
    let mut models = Vec::new();
    let mut modes = Vec::new();
    for e in entries {
        if !models.contains(&e.model) {
            models.push(e.model.clone());
        }
        if !modes.contains(&e.mode) {
            modes.push(e.mode.clone());
        }
    }
    let find = |model: &str, mode: &str| {
        entries
            .iter()
            .find(|e| e.model == model && e.mode == mode)
            .map(|e| &e.report)
    };
    let row_values = |r: &MetricsReport, class: &str| -> [f64; 4] {
        match class {
            "Goal" => {
                let m = r.per_class[Label::GOAL.index()];
                [m.accuracy, m.precision, m.recall, m.f1]
            }
            "Detail" => {
                let m = r.per_class[Label::DETAIL.index()];
                [m.accuracy, m.precision, m.recall, m.f1]
            }
            _ => [r.token_accuracy, r.macro_precision, r.macro_recall, r.macro_f1],
        }
    };

    let mut text = String::new();
    let mut csv_out = String::from("model,class");
    for mode in &modes {
        for col in ["acc", "prec", "rec", "f1"] {
            csv_out.push_str(&format!(",{mode}_{col}"));
        }
    }
    csv_out.push('\n');

    text.push_str(&format!("{:<14}{:<9}", "Model", "Class"));
    for mode in &modes {
        text.push_str(&format!("| {:<27}", mode));
    }
    text.push('\n');
    text.push_str(&format!("{:<14}{:<9}", "", ""));
    for _ in &modes {
        text.push_str(&format!("| {:<6}{:<7}{:<7}{:<7}", "Acc", "Prec", "Rec", "F1"));
    }
    text.push('\n');
    for model in &models {
        for class in ["Goal", "Detail", "Overall"] {
            text.push_str(&format!("{:<14}{:<9}", model, class));
            csv_out.push_str(&format!("{model},{class}"));
            for mode in &modes {
                match find(model, mode) {
                    Some(r) => {
                        let vals = row_values(r, class);
                        text.push_str("| ");
                        for v in vals {
                            text.push_str(&format!("{:<6.2} ", v * 100.0));
                        }
                        for v in vals {
                            csv_out.push_str(&format!(",{:.2}", v * 100.0));
                        }
                    }
                    None => {
                        text.push_str(&format!("| {:<27}", "-"));
                        csv_out.push_str(",,,,");
                    }
                }
            }
            text.push('\n');
            csv_out.push('\n');
        }
    }
    Ok((text, csv_out))
}
