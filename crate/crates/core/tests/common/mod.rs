//! Shared finite-difference helpers for the gradient suites.

// Each test binary uses its own subset of these helpers.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prosotag::autodiff::{Tape, Tensor, Var};
use prosotag::model::{BiLstmConfig, BiLstmTagger, Tagger, TransformerConfig, TransformerTagger};

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let denom = analytic.abs().max(numeric.abs()).max(1.0);
    let rel = (analytic - numeric).abs() / denom;
    assert!(
        rel < TOL,
        "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})"
    );
}

pub fn pseudo(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let k = (i as u64)
                .wrapping_mul(6364136223846793005)
                .wrapping_add(salt.wrapping_mul(1442695040888963407));
            ((k >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
        .collect()
}

pub fn tensor(shape: Vec<usize>, salt: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, pseudo(n, salt)).unwrap()
}

/// Check d(loss)/d(inputs) for a scalar-valued graph against central
/// differences on every input entry.
pub fn check_op<F>(inputs: &[Tensor], build: F, what: &str)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let loss_of = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.value(loss).len(), 1, "{what}: loss must be scalar");
    tape.backward(loss).unwrap();

    for (ti, input) in inputs.iter().enumerate() {
        let grad = tape
            .grad(vars[ti])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= H;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * H);
            assert_close(grad[j], numeric, &format!("{what} input {ti} entry {j}"));
        }
    }
}

/// Reduce an arbitrary tensor to a scalar through a fixed weighting so all
/// output entries influence the loss.
pub fn weigh(tape: &mut Tape, out: Var, salt: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(tensor(shape, salt));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// FD-check every tape op.
pub fn check_all_ops() {
    check_op(
        &[tensor(vec![3, 4], 1), tensor(vec![4, 2], 2)],
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weigh(t, y, 9)
        },
        "matmul",
    );
    for (name, shape_b) in [
        ("same", vec![3, 4]),
        ("row", vec![1, 4]),
        ("col", vec![3, 1]),
    ] {
        check_op(
            &[tensor(vec![3, 4], 3), tensor(shape_b.clone(), 4)],
            |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                weigh(t, y, 10)
            },
            &format!("add {name}"),
        );
        check_op(
            &[tensor(vec![3, 4], 5), tensor(shape_b, 6)],
            |t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                weigh(t, y, 11)
            },
            &format!("mul {name}"),
        );
    }

    let x = tensor(vec![2, 5], 7);
    check_op(&[x.clone()], |t, v| {
        let y = t.tanh(v[0]);
        weigh(t, y, 12)
    }, "tanh");
    check_op(&[x.clone()], |t, v| {
        let y = t.sigmoid(v[0]);
        weigh(t, y, 13)
    }, "sigmoid");
    // Keep entries away from the relu kink, where FD is ill-defined.
    let mut shifted = x.clone();
    for d in shifted.data_mut() {
        *d += if *d >= 0.0 { 0.05 } else { -0.05 };
    }
    check_op(&[shifted], |t, v| {
        let y = t.relu(v[0]);
        weigh(t, y, 14)
    }, "relu");
    check_op(&[x], |t, v| {
        let y = t.scale(v[0], -1.7);
        weigh(t, y, 15)
    }, "scale");

    check_op(
        &[tensor(vec![3, 2], 16), tensor(vec![3, 4], 17)],
        |t, v| {
            let y = t.concat_cols(&[v[0], v[1]]).unwrap();
            weigh(t, y, 18)
        },
        "concat_cols",
    );
    check_op(
        &[tensor(vec![2, 3], 19), tensor(vec![4, 3], 20)],
        |t, v| {
            let y = t.concat_rows(&[v[0], v[1]]).unwrap();
            weigh(t, y, 21)
        },
        "concat_rows",
    );
    check_op(
        &[tensor(vec![4, 3], 22)],
        |t, v| {
            let y = t.row(v[0], 2).unwrap();
            weigh(t, y, 23)
        },
        "row",
    );
    check_op(
        &[tensor(vec![3, 5], 24)],
        |t, v| {
            let y = t.slice_cols(v[0], 1, 3).unwrap();
            weigh(t, y, 25)
        },
        "slice_cols",
    );
    check_op(
        &[tensor(vec![3, 4], 26)],
        |t, v| {
            let y = t.transpose(v[0]).unwrap();
            weigh(t, y, 27)
        },
        "transpose",
    );

    let mask = [true, true, false, true];
    check_op(
        &[tensor(vec![3, 4], 28)],
        |t, v| {
            let y = t.softmax_masked(v[0], &mask).unwrap();
            weigh(t, y, 29)
        },
        "softmax_masked",
    );
    let grid: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
    check_op(
        &[tensor(vec![3, 3], 30)],
        |t, v| {
            let y = t.softmax_masked_grid(v[0], &grid).unwrap();
            weigh(t, y, 31)
        },
        "softmax_masked_grid",
    );

    // Same RNG seed on every rebuild keeps the dropout mask fixed, so the
    // FD probe differentiates through a deterministic graph.
    check_op(
        &[tensor(vec![4, 5], 32)],
        |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let y = t.dropout(v[0], 0.4, true, &mut rng).unwrap();
            weigh(t, y, 33)
        },
        "dropout",
    );
    check_op(
        &[tensor(vec![4, 3], 34)],
        |t, v| {
            let y = t.select_rows(v[0], &[2, 0, 2, 3]).unwrap();
            weigh(t, y, 35)
        },
        "select_rows",
    );
    check_op(
        &[tensor(vec![3, 4], 36), tensor(vec![1, 4], 37), tensor(vec![1, 4], 38)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weigh(t, y, 39)
        },
        "layer_norm",
    );

    let targets = [0, 2, 1, 2];
    let mask = [true, false, true, true];
    check_op(
        &[tensor(vec![4, 3], 40)],
        |t, v| t.masked_ce_sum(v[0], &targets, &mask).unwrap(),
        "masked_ce_sum",
    );
    check_op(&[tensor(vec![3, 3], 41)], |t, v| t.sum(v[0]), "sum");
}

/// FD-check d(ce)/d(param) on a strided subset of each parameter tensor.
pub fn check_model(mut tagger: Tagger, x: Tensor, targets: Vec<usize>, what: &str) {
    let mask = vec![true; targets.len()];
    let loss_of = |tagger: &Tagger| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut tape, _, logits) = tagger
            .forward_sample(&x, &targets, &mask, false, &mut rng)
            .unwrap();
        let ce = tape.masked_ce_sum(logits, &targets, &mask).unwrap();
        tape.value(ce).item().unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut tape, bound, logits) = tagger
        .forward_sample(&x, &targets, &mask, false, &mut rng)
        .unwrap();
    let ce = tape.masked_ce_sum(logits, &targets, &mask).unwrap();
    tape.backward(ce).unwrap();
    tagger.params_mut().zero_grad();
    tagger.params_mut().accumulate_from_tape(&tape, &bound, 1.0);

    let count = tagger.params().len();
    for pi in 0..count {
        let (name, len, grads) = {
            let p = tagger.params().iter().nth(pi).unwrap();
            (p.name.clone(), p.value.len(), p.grad.clone())
        };
        // First, last, and two interior entries of each tensor.
        let mut probe = vec![0, len - 1, len / 3, (2 * len) / 3];
        probe.sort_unstable();
        probe.dedup();
        for j in probe {
            fn perturb(tagger: &mut Tagger, pi: usize, j: usize, delta: f64) {
                let p = tagger.params_mut().iter_mut().nth(pi).unwrap();
                p.value.data_mut()[j] += delta;
            }
            perturb(&mut tagger, pi, j, H);
            let up = loss_of(&tagger);
            perturb(&mut tagger, pi, j, -2.0 * H);
            let down = loss_of(&tagger);
            perturb(&mut tagger, pi, j, H);
            let numeric = (up - down) / (2.0 * H);
            assert_close(grads[j], numeric, &format!("{what} {name}[{j}]"));
        }
    }
}

pub fn tiny_bilstm(seed: u64) -> Tagger {
    let config = BiLstmConfig {
        input_dim: 5,
        hidden_dim: 6,
        num_layers: 1,
        num_heads: 2,
        attn_layers: 1,
        dropout: 0.0,
        proj_dim: 4,
        fusion_dim: 3,
        decoder_concat_dim: None,
    };
    Tagger::BiLstm(BiLstmTagger::new(config, seed).unwrap())
}

pub fn tiny_transformer(seed: u64) -> Tagger {
    let config = TransformerConfig {
        input_dim: 5,
        model_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 12,
        dropout: 0.0,
        max_len: 16,
    };
    Tagger::Transformer(TransformerTagger::new(config, seed).unwrap())
}

/// FD-check both full taggers on short sequences.
pub fn check_both_models() {
    check_model(tiny_bilstm(5), tensor(vec![4, 5], 50), vec![0, 1, 2, 1], "bilstm");
    check_model(
        tiny_transformer(5),
        tensor(vec![4, 5], 51),
        vec![2, 0, 1, 2],
        "transformer",
    );
}
