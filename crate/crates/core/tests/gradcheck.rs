//! Central finite-difference checks for every tape op and both taggers.

mod common;

use common::{check_model, check_op, tensor, tiny_bilstm, tiny_transformer, weigh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matmul_grad() {
    check_op(
        &[tensor(vec![3, 4], 1), tensor(vec![4, 2], 2)],
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weigh(t, y, 9)
        },
        "matmul",
    );
}

#[test]
fn add_and_mul_broadcast_grads() {
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
}

#[test]
fn unary_grads() {
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
}

#[test]
fn concat_and_slice_grads() {
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
}

#[test]
fn softmax_grads() {
    let mask = [true, true, false, true];
    check_op(
        &[tensor(vec![3, 4], 28)],
        |t, v| {
            let y = t.softmax_masked(v[0], &mask).unwrap();
            weigh(t, y, 29)
        },
        "softmax_masked",
    );
    // Causal grid over a 3x3 score matrix.
    let grid: Vec<bool> = (0..9).map(|i| i % 3 <= i / 3).collect();
    check_op(
        &[tensor(vec![3, 3], 30)],
        |t, v| {
            let y = t.softmax_masked_grid(v[0], &grid).unwrap();
            weigh(t, y, 31)
        },
        "softmax_masked_grid",
    );
}

#[test]
fn dropout_grad() {
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
}

#[test]
fn select_rows_grad() {
    check_op(
        &[tensor(vec![4, 3], 34)],
        |t, v| {
            let y = t.select_rows(v[0], &[2, 0, 2, 3]).unwrap();
            weigh(t, y, 35)
        },
        "select_rows",
    );
}

#[test]
fn layer_norm_grad() {
    check_op(
        &[tensor(vec![3, 4], 36), tensor(vec![1, 4], 37), tensor(vec![1, 4], 38)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weigh(t, y, 39)
        },
        "layer_norm",
    );
}

#[test]
fn masked_ce_and_sum_grads() {
    let targets = [0, 2, 1, 2];
    let mask = [true, false, true, true];
    check_op(
        &[tensor(vec![4, 3], 40)],
        |t, v| t.masked_ce_sum(v[0], &targets, &mask).unwrap(),
        "masked_ce_sum",
    );
    check_op(&[tensor(vec![3, 3], 41)], |t, v| t.sum(v[0]), "sum");
}

#[test]
fn bilstm_model_grad() {
    check_model(tiny_bilstm(5), tensor(vec![4, 5], 50), vec![0, 1, 2, 1], "bilstm");
}

#[test]
fn transformer_model_grad() {
    check_model(
        tiny_transformer(5),
        tensor(vec![4, 5], 51),
        vec![2, 0, 1, 2],
        "transformer",
    );
}
