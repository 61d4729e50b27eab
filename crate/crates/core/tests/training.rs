//! End-to-end training properties: overfit oracle, metric oracle against a
//! brute-force implementation, and run-to-run determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prosotag::corpus::{fit_normalizer, generate_corpus, Label, RenderMode};
use prosotag::embed::EmbeddingSource;
use prosotag::model::{BiLstmConfig, BiLstmTagger, Tagger, TransformerConfig, TransformerTagger};
use prosotag::speech::FeatureMode;
use prosotag::train::{
    evaluate, metrics_from_pairs, prepare, train, Dataset, SchedulerConfig, TrainConfig,
};

fn tiny_dataset() -> Dataset {
    let samples = generate_corpus(4, 1, 7, &RenderMode::Features).unwrap();
    assert_eq!(samples.len(), 8);
    let source = EmbeddingSource::pseudo(8, 7);
    let normalizer = fit_normalizer(&samples, FeatureMode::Prosody, &source).unwrap();
    prepare(&samples, FeatureMode::Prosody, &source, Some(&normalizer)).unwrap()
}

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        weight_decay: 0.0,
        batch_size: 8,
        max_epochs: 300,
        patience_early_stop: 300,
        // Keep the lr alive for the whole overfit run.
        scheduler: SchedulerConfig {
            factor: 0.5,
            patience: 50,
            min_delta: 1e-4,
            min_lr: 1e-3,
        },
        ..TrainConfig::bilstm_default(seed)
    }
}

fn input_dim(data: &Dataset) -> usize {
    data.items[0].0.cols()
}

#[test]
fn bilstm_overfits_eight_samples() {
    let data = tiny_dataset();
    let config = BiLstmConfig {
        hidden_dim: 32,
        num_heads: 2,
        dropout: 0.0,
        proj_dim: 16,
        fusion_dim: 8,
        ..BiLstmConfig::new(input_dim(&data))
    };
    let mut tagger = Tagger::BiLstm(BiLstmTagger::new(config, 1).unwrap());
    let outcome = train(&mut tagger, &data, &data, &overfit_config(1)).unwrap();
    let report = evaluate(&tagger, &data).unwrap();
    assert_eq!(
        report.token_accuracy, 1.0,
        "token accuracy {} after {} epochs (best val F1 {})",
        report.token_accuracy,
        outcome.history.len(),
        outcome.best_val_f1
    );
}

#[test]
fn transformer_overfits_eight_samples() {
    let data = tiny_dataset();
    let config = TransformerConfig {
        model_dim: 32,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 64,
        dropout: 0.0,
        ..TransformerConfig::new(input_dim(&data))
    };
    let mut tagger = Tagger::Transformer(TransformerTagger::new(config, 1).unwrap());
    let config = TrainConfig {
        lr: 2e-3,
        ..overfit_config(1)
    };
    let outcome = train(&mut tagger, &data, &data, &config).unwrap();
    let report = evaluate(&tagger, &data).unwrap();
    assert_eq!(
        report.token_accuracy, 1.0,
        "token accuracy {} after {} epochs (best val F1 {})",
        report.token_accuracy,
        outcome.history.len(),
        outcome.best_val_f1
    );
}

/// Independent confusion-count implementation for the metric oracle.
fn brute_force(gold: &[Label], pred: &[Label]) -> ([[usize; 3]; 3], [f64; 12], f64) {
    let mut confusion = [[0usize; 3]; 3];
    for (g, p) in gold.iter().zip(pred) {
        confusion[g.index()][p.index()] += 1;
    }
    let total = gold.len() as f64;
    let mut per_class = [0.0f64; 12]; // acc, prec, rec, f1 per class
    for c in 0..3 {
        let tp = confusion[c][c] as f64;
        let gold_c = (0..3).map(|p| confusion[c][p]).sum::<usize>() as f64;
        let pred_c = (0..3).map(|g| confusion[g][c]).sum::<usize>() as f64;
        let tn = total - gold_c - pred_c + tp;
        let prec = if pred_c == 0.0 { 0.0 } else { tp / pred_c };
        let rec = if gold_c == 0.0 { 0.0 } else { tp / gold_c };
        let f1 = if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        };
        per_class[4 * c] = (tp + tn) / total;
        per_class[4 * c + 1] = prec;
        per_class[4 * c + 2] = rec;
        per_class[4 * c + 3] = f1;
    }
    let correct = (0..3).map(|c| confusion[c][c]).sum::<usize>() as f64;
    (confusion, per_class, correct / total)
}

#[test]
fn metrics_match_brute_force_on_random_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let draw = |rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| Label::from_index(rng.gen_range(0..3)).unwrap())
                .collect::<Vec<_>>()
        };
        let gold = draw(&mut rng);
        let pred = draw(&mut rng);
        let report = metrics_from_pairs(&gold, &pred).unwrap();
        let (confusion, per_class, token_acc) = brute_force(&gold, &pred);
        assert_eq!(report.confusion, confusion);
        assert_eq!(report.token_accuracy, token_acc);
        for c in 0..3 {
            let m = report.per_class[c];
            assert_eq!(m.accuracy, per_class[4 * c]);
            assert_eq!(m.precision, per_class[4 * c + 1]);
            assert_eq!(m.recall, per_class[4 * c + 2]);
            assert_eq!(m.f1, per_class[4 * c + 3]);
        }
        let macro_f1 = (per_class[3] + per_class[7] + per_class[11]) / 3.0;
        assert_eq!(report.macro_f1, macro_f1);
        assert_eq!(report.macro_f1_goal_detail, (per_class[7] + per_class[11]) / 2.0);
    }
}

#[test]
fn same_seed_reproduces_history_exactly() {
    let data = tiny_dataset();
    let run = || {
        let config = BiLstmConfig {
            hidden_dim: 16,
            num_heads: 2,
            dropout: 0.3,
            proj_dim: 8,
            fusion_dim: 4,
            ..BiLstmConfig::new(input_dim(&data))
        };
        let mut tagger = Tagger::BiLstm(BiLstmTagger::new(config, 3).unwrap());
        let config = TrainConfig {
            max_epochs: 8,
            ..overfit_config(3)
        };
        let outcome = train(&mut tagger, &data, &data, &config).unwrap();
        let params: Vec<f64> = tagger
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        (outcome.history, params)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1.len(), h2.len());
    for (a, b) in h1.iter().zip(&h2) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        assert_eq!(a.val_macro_f1.to_bits(), b.val_macro_f1.to_bits());
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }
    assert_eq!(p1.len(), p2.len());
    for (a, b) in p1.iter().zip(&p2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
