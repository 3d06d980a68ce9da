//! Cross-modal feature decoder with a straight-through routing mask.

use rand_chacha::ChaCha8Rng;

use crate::attention::negated_attention_rows;
use crate::autograd::Var;
use crate::branch::linear;
use crate::params::{init_linear, ParamStore};
use crate::session::Session;
use crate::tensor::Matrix;

pub fn init_cmfd(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for proj in ["q", "k", "v"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), d, d);
    }
}

/// `M = M̄ + (ā − stopgrad(ā))`.
///
/// The bracket is evaluated first so the forward value equals `M̄` bit for
/// bit, while `∂M/∂ā` is the identity.
pub fn straight_through_mask(s: &mut Session, hard_mask: Matrix, relaxed: Var) -> Var {
    assert_eq!(hard_mask.shape(), s.graph.value(relaxed).shape(), "mask length mismatch");
    let frozen = s.graph.detach(relaxed);
    let zero = s.graph.sub(relaxed, frozen);
    let hard = s.graph.constant(hard_mask);
    s.graph.add(hard, zero)
}

pub struct CmfdOutput {
    /// `rows × d`, the four query-row outputs summed.
    pub features: Var,
    /// `rows × K` attention of the mixed-feature query row.
    pub weights: Var,
    /// `rows × K` attention for every query row (mixed, rgb, flow, audio).
    pub all_weights: [Var; 4],
}

/// Queries are the mixed feature and the three stage-`i` modality features;
/// keys and values are the `K` cross-modal features; `mask` is `rows × K`.
pub fn decode_cross_modal(
    s: &mut Session,
    prefix: &str,
    mixed: Var,
    modalities: [Var; 3],
    cross: &[Var],
    mask: Var,
) -> CmfdOutput {
    assert_eq!(s.graph.value(mask).cols(), cross.len(), "mask length mismatch");
    let keys: Vec<Var> = cross.iter().map(|&c| linear(s, &format!("{prefix}.k"), c)).collect();
    let values: Vec<Var> = cross.iter().map(|&c| linear(s, &format!("{prefix}.v"), c)).collect();
    let queries = [mixed, modalities[0], modalities[1], modalities[2]];
    let mut outputs = Vec::with_capacity(4);
    let mut weights = Vec::with_capacity(4);
    for x in queries {
        let q = linear(s, &format!("{prefix}.q"), x);
        let (out, w) = negated_attention_rows(s, q, &keys, &values, Some(mask));
        outputs.push(out);
        weights.push(w);
    }
    CmfdOutput {
        features: s.graph.sum(&outputs),
        weights: weights[0],
        all_weights: [weights[0], weights[1], weights[2], weights[3]],
    }
}
