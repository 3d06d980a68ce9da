//! Negated scaled dot-product attention shared by both decoders.
//!
//! Scores are `-q·k / sqrt(d)`, so the softmax favours the tokens that are
//! *least* similar to the query.

use crate::autograd::Var;
use crate::session::Session;
use crate::tensor::{dot, softmax, Matrix};

/// Attention weights and output of one query against a set of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    pub weights: Vec<f64>,
    pub output: Vec<f64>,
}

/// Plain evaluation of `softmax(-q·Kᵀ/sqrt(d) + mask)·V` for one query.
///
/// `keys` and `values` hold one token per row. `mask` is added to the logits
/// when given.
pub fn negated_attention(query: &[f64], keys: &Matrix, values: &Matrix, mask: Option<&[f64]>) -> AttentionResult {
    let scale = (query.len() as f64).sqrt();
    let mut logits: Vec<f64> = (0..keys.rows())
        .map(|k| -dot(query, keys.row(k)) / scale)
        .collect();
    if let Some(m) = mask {
        for (l, m) in logits.iter_mut().zip(m) {
            *l += m;
        }
    }
    let weights = softmax(&logits);
    let mut output = vec![0.0; values.cols()];
    for (k, w) in weights.iter().enumerate() {
        for (o, v) in output.iter_mut().zip(values.row(k)) {
            *o += w * v;
        }
    }
    AttentionResult { weights, output }
}

/// Graph version over stacked time steps.
///
/// `query` is `rows × d`; each key/value is a `rows × d` token stream. Returns
/// the `rows × d` output and the `rows × tokens` weights.
pub fn negated_attention_rows(
    s: &mut Session,
    query: Var,
    keys: &[Var],
    values: &[Var],
    mask: Option<Var>,
) -> (Var, Var) {
    let d = s.graph.value(query).cols();
    let scale = -1.0 / (d as f64).sqrt();
    let scores: Vec<Var> = keys
        .iter()
        .map(|&k| {
            let raw = s.graph.row_dot(query, k);
            s.graph.scale(raw, scale)
        })
        .collect();
    let mut logits = s.graph.concat_cols(&scores);
    if let Some(m) = mask {
        logits = s.graph.add(logits, m);
    }
    let weights = s.graph.softmax_rows(logits);
    let parts: Vec<Var> = values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let w = s.graph.slice_cols(weights, k, 1);
            s.graph.mul_col(v, w)
        })
        .collect();
    (s.graph.sum(&parts), weights)
}
