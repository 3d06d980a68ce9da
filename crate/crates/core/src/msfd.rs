//! Modality-specific feature decoder.
//!
//! At every time step the mixed feature queries the three modality features,
//! stacked as three attention tokens, through negated attention. The decoder
//! therefore pulls in the modality information the mixed branch has not yet
//! absorbed.

use rand_chacha::ChaCha8Rng;

use crate::attention::negated_attention_rows;
use crate::autograd::Var;
use crate::branch::linear;
use crate::params::{init_linear, ParamStore};
use crate::session::Session;

pub struct MsfdOutput {
    /// `rows × d`
    pub features: Var,
    /// `rows × 3` attention over (rgb, flow, audio).
    pub weights: Var,
}

pub fn init_msfd(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for proj in ["q", "k", "v"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), d, d);
    }
}

/// Decodes one stage: `mixed` and each of `modalities` are `rows × d`.
pub fn decode_modality_specific(s: &mut Session, prefix: &str, mixed: Var, modalities: [Var; 3]) -> MsfdOutput {
    let q = linear(s, &format!("{prefix}.q"), mixed);
    let keys: Vec<Var> = modalities
        .iter()
        .map(|&m| linear(s, &format!("{prefix}.k"), m))
        .collect();
    let values: Vec<Var> = modalities
        .iter()
        .map(|&m| linear(s, &format!("{prefix}.v"), m))
        .collect();
    let (features, weights) = negated_attention_rows(s, q, &keys, &values, None);
    MsfdOutput { features, weights }
}
