//! Adaptive fusion module: `K` ranked FusionNets and a PolicyNet whose
//! per-time-step decision `a` enables the `a` most general FusionNets.
//!
//! Decisions are drawn with the Gumbel-Max trick. The forward pass uses the
//! hard decision; gradients reach the PolicyNet through the Gumbel-softmax
//! relaxation `ā` via the straight-through mask built in [`crate::cmfd`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::branch::{conv_block, init_conv_block, linear};
use crate::cmfd::straight_through_mask;
use crate::config::{FusionVariant, ModelConfig};
use crate::params::{init_linear, ParamStore};
use crate::session::{Routing, RoutingRecord, Session};
use crate::tensor::{pooled_len, softmax, Matrix};

/// Stabilizer inside `log P`.
pub const LOG_EPS: f64 = 1e-12;

/// One sampled routing decision over `K` FusionNets.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    /// 1-based number of enabled FusionNets (ranked) or the enabled index.
    pub hard: usize,
    pub relaxed: Vec<f64>,
    pub probs: Vec<f64>,
    pub noise: Vec<f64>,
}

pub fn init_afm(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d;
    for m in ["rgb", "flow", "audio"] {
        init_linear(store, rng, &format!("{prefix}.transform.{m}"), d, d);
    }
    for k in 1..=cfg.k {
        let p = format!("{prefix}.fusion{k}");
        init_linear(store, rng, &format!("{p}.att1"), 3 * d, d);
        init_linear(store, rng, &format!("{p}.att2"), d, 3);
        init_conv_block(store, rng, &format!("{p}.block"), cfg);
    }
    if cfg.has_policy() {
        init_linear(store, rng, &format!("{prefix}.policy.l1"), 3 * d, d);
        init_linear(store, rng, &format!("{prefix}.policy.l2"), d, cfg.k);
        store.insert(format!("{prefix}.tau"), Matrix::scalar(cfg.tau_init));
    }
}

/// Independent affine + rectifier map per modality.
pub fn transform_modalities(s: &mut Session, prefix: &str, modalities: [Var; 3]) -> [Var; 3] {
    let names = ["rgb", "flow", "audio"];
    [0, 1, 2].map(|i| {
        let h = linear(s, &format!("{prefix}.transform.{}", names[i]), modalities[i]);
        s.graph.relu(h)
    })
}

pub struct FusionNetOutput {
    /// Cross-modal feature at the next stage's length.
    pub features: Var,
    /// `rows × 3` modality weights before the convolution block.
    pub alpha: Var,
}

/// FusionNet `k` (1-based) on transformed stage-`i-1` features of length `seq`.
pub fn fusionnet_forward(
    s: &mut Session,
    prefix: &str,
    k: usize,
    transformed: [Var; 3],
    seq: usize,
    cfg: &ModelConfig,
) -> FusionNetOutput {
    assert!((1..=cfg.k).contains(&k), "FusionNet index {k} outside 1..={}", cfg.k);
    let p = format!("{prefix}.fusion{k}");
    let cat = s.graph.concat_cols(&transformed);
    let h = linear(s, &format!("{p}.att1"), cat);
    let h = s.graph.relu(h);
    let logits = linear(s, &format!("{p}.att2"), h);
    let alpha = s.graph.softmax_rows(logits);
    let parts: Vec<Var> = (0..3)
        .map(|m| {
            let w = s.graph.slice_cols(alpha, m, 1);
            s.graph.mul_col(transformed[m], w)
        })
        .collect();
    let mixed = s.graph.sum(&parts);
    let refined = conv_block(s, &format!("{p}.block"), mixed, seq, cfg);
    FusionNetOutput {
        features: s.graph.avg_pool(refined, seq),
        alpha,
    }
}

/// Decision probabilities from raw stage-`i-1` features pooled to the next
/// stage's length: `rows_i × K`.
pub fn policy_probabilities(s: &mut Session, prefix: &str, modalities: [Var; 3], seq: usize) -> Var {
    let pooled = modalities.map(|m| s.graph.avg_pool(m, seq));
    let cat = s.graph.concat_cols(&pooled);
    let h = linear(s, &format!("{prefix}.policy.l1"), cat);
    let h = s.graph.relu(h);
    let logits = linear(s, &format!("{prefix}.policy.l2"), h);
    s.graph.softmax_rows(logits)
}

/// Standard Gumbel draws `-ln(-ln U)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// 1-based index of the largest entry (first on ties).
pub fn argmax1(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best + 1
}

/// Gumbel-Max decision for one probability vector, plus its relaxation at
/// temperature `tau`.
pub fn sample_decision<R: Rng + ?Sized>(probs: &[f64], rng: &mut R, tau: f64) -> Decision {
    assert!(tau > 0.0, "temperature must be positive");
    let noise = gumbel_noise(rng, probs.len());
    decision_from_noise(probs, noise, tau)
}

pub fn decision_from_noise(probs: &[f64], noise: Vec<f64>, tau: f64) -> Decision {
    let perturbed: Vec<f64> = probs
        .iter()
        .zip(&noise)
        .map(|(p, g)| (p + LOG_EPS).ln() + g)
        .collect();
    let hard = argmax1(&perturbed);
    let relaxed = softmax(&perturbed.iter().map(|z| z / tau).collect::<Vec<_>>());
    Decision {
        hard,
        relaxed,
        probs: probs.to_vec(),
        noise,
    }
}

/// `0` for the first `hard` entries and `xi` after them.
pub fn ranked_mask(hard: usize, k: usize, xi: f64) -> Vec<f64> {
    assert!((1..=k).contains(&hard), "decision {hard} outside 1..={k}");
    (1..=k).map(|j| if j <= hard { 0.0 } else { xi }).collect()
}

/// `0` only at the chosen entry.
pub fn one_hot_mask(hard: usize, k: usize, xi: f64) -> Vec<f64> {
    assert!((1..=k).contains(&hard), "decision {hard} outside 1..={k}");
    (1..=k).map(|j| if j == hard { 0.0 } else { xi }).collect()
}

pub struct AfmOutput {
    /// `K` cross-modal features, each `rows_i × d`.
    pub cross: Vec<Var>,
    /// Straight-through mask, `rows_i × K`.
    pub mask: Var,
    /// 1-based hard decisions per row (all `K` under free routing).
    pub hard: Vec<usize>,
    pub probs: Option<Var>,
    pub relaxed: Option<Var>,
    pub alphas: Vec<Var>,
}

/// Runs all FusionNets and the routing for one stage.
///
/// `modalities` are stage-`i-1` features with sequence length `seq`.
pub fn afm_forward(s: &mut Session, prefix: &str, modalities: [Var; 3], seq: usize, cfg: &ModelConfig) -> AfmOutput {
    let transformed = transform_modalities(s, prefix, modalities);
    let mut cross = Vec::with_capacity(cfg.k);
    let mut alphas = Vec::with_capacity(cfg.k);
    for k in 1..=cfg.k {
        let out = fusionnet_forward(s, prefix, k, transformed, seq, cfg);
        cross.push(out.features);
        alphas.push(out.alpha);
    }
    let rows = s.graph.value(cross[0]).rows();
    debug_assert_eq!(rows % pooled_len(seq), 0);

    if cfg.fusion_variant == FusionVariant::Free {
        let mask = s.graph.constant(Matrix::zeros(rows, cfg.k));
        return AfmOutput {
            cross,
            mask,
            hard: vec![cfg.k; rows],
            probs: None,
            relaxed: None,
            alphas,
        };
    }

    let probs = policy_probabilities(s, prefix, modalities, seq);
    let p = s.graph.value(probs).clone();
    let record = match s.routing().clone() {
        Routing::Sample => {
            let rng = s.rng();
            let noise_rows: Vec<Vec<f64>> = (0..rows).map(|_| gumbel_noise(rng, cfg.k)).collect();
            let noise = Matrix::from_rows(&noise_rows).expect("noise shape");
            let hard = (0..rows)
                .map(|r| {
                    let z: Vec<f64> = p.row(r).iter().zip(noise.row(r)).map(|(a, g)| (a + LOG_EPS).ln() + g).collect();
                    argmax1(&z)
                })
                .collect();
            RoutingRecord { noise, hard }
        }
        Routing::Greedy => RoutingRecord {
            noise: Matrix::zeros(rows, cfg.k),
            hard: (0..rows).map(|r| argmax1(p.row(r))).collect(),
        },
        Routing::Replay(_) => s.next_replay(),
    };
    s.log_routing(record.clone());

    let log_p = s.graph.log_eps(probs, LOG_EPS);
    let noise = s.graph.constant(record.noise.clone());
    let perturbed = s.graph.add(log_p, noise);
    let tau = s.param(&format!("{prefix}.tau"));
    let scaled = s.graph.div_scalar(perturbed, tau);
    let relaxed = s.graph.softmax_rows(scaled);

    let mask_rows: Vec<Vec<f64>> = record
        .hard
        .iter()
        .map(|&a| match cfg.fusion_variant {
            FusionVariant::Unranked => one_hot_mask(a, cfg.k, cfg.xi),
            _ => ranked_mask(a, cfg.k, cfg.xi),
        })
        .collect();
    let hard_mask = Matrix::from_rows(&mask_rows).expect("mask shape");
    let mask = straight_through_mask(s, hard_mask, relaxed);
    AfmOutput {
        cross,
        mask,
        hard: record.hard,
        probs: Some(probs),
        relaxed: Some(relaxed),
        alphas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureDims;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cfg(k: usize) -> ModelConfig {
        ModelConfig {
            d: 4,
            k,
            ..ModelConfig::tiny(FeatureDims { rgb: 2, flow: 2, audio: 2 })
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ranked_mask_examples() {
        let xi = -1e9;
        assert_eq!(ranked_mask(3, 6, xi), vec![0.0, 0.0, 0.0, xi, xi, xi]);
        assert_eq!(ranked_mask(6, 6, xi), vec![0.0; 6]);
        assert_eq!(ranked_mask(1, 4, xi), vec![0.0, xi, xi, xi]);
    }

    #[test]
    #[should_panic]
    fn ranked_mask_rejects_zero() {
        ranked_mask(0, 3, -1e9);
    }

    #[test]
    fn degenerate_distribution_always_picks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert_eq!(sample_decision(&[1.0, 0.0, 0.0], &mut rng, 1.0).hard, 1);
        }
    }

    #[test]
    fn low_temperature_relaxation_is_nearly_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = sample_decision(&[0.05, 0.05, 0.9], &mut rng, 0.01);
        let max = d.relaxed.iter().cloned().fold(0.0, f64::max);
        assert!(max >= 0.99);
        assert_eq!(argmax1(&d.relaxed), d.hard);
    }

    #[test]
    fn zero_policy_weights_give_uniform_probabilities() {
        let c = cfg(5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        init_afm(&mut store, &mut rng, "a", &c);
        for n in ["a.policy.l2.w", "a.policy.l2.b"] {
            let z = store.expect(n).map(|_| 0.0);
            store.insert(n, z);
        }
        let mut s = Session::eval(&store);
        let mods = [0; 3].map(|_| s.graph.constant(random(&mut rng, 6, 4)));
        let p = policy_probabilities(&mut s, "a", mods, 6);
        let v = s.graph.value(p);
        assert_eq!(v.shape(), (3, 5));
        assert!(v.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn transform_examples() {
        let c = cfg(1);
        let mut store = ParamStore::new();
        for m in ["rgb", "flow", "audio"] {
            store.insert(format!("a.transform.{m}.w"), Matrix::zeros(4, 4));
            store.insert(format!("a.transform.{m}.b"), Matrix::row_vector(&[-1.0, 0.5, 2.0, 0.0]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = Session::eval(&store);
        let mods = [0; 3].map(|_| s.graph.constant(random(&mut rng, 2, 4)));
        for t in transform_modalities(&mut s, "a", mods) {
            assert_eq!(s.graph.value(t).row(1), &[0.0, 0.5, 2.0, 0.0]);
        }
        for m in ["rgb", "flow", "audio"] {
            store.insert(format!("a.transform.{m}.w"), Matrix::identity(4));
            store.insert(format!("a.transform.{m}.b"), Matrix::zeros(1, 4));
        }
        let input = random(&mut rng, 3, 4).map(f64::abs);
        let mut s = Session::eval(&store);
        let mods = [0; 3].map(|_| s.graph.constant(input.clone()));
        for t in transform_modalities(&mut s, "a", mods) {
            assert_eq!(s.graph.value(t), &input);
        }
        let _ = c;
    }

    #[test]
    fn fusionnet_convexity_and_lengths() {
        let c = cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        init_afm(&mut store, &mut rng, "a", &c);
        let same = random(&mut rng, 7, 4);
        let mut s = Session::eval(&store);
        let t = [0; 3].map(|_| s.graph.constant(same.clone()));
        let out = fusionnet_forward(&mut s, "a", 1, t, 7, &c);
        assert_eq!(s.graph.value(out.features).rows(), 4);
        for r in 0..7 {
            let sum: f64 = s.graph.value(out.alpha).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // equal inputs: the weighted sum is the input itself, so the output
        // equals conv/pool of that input alone
        let x = s.graph.constant(same);
        let direct = conv_block(&mut s, "a.fusion1.block", x, 7, &c);
        let direct = s.graph.avg_pool(direct, 7);
        assert!(s.graph.value(out.features).max_abs_diff(s.graph.value(direct)) < 1e-12);
    }

    #[test]
    fn saturated_attention_selects_video_stream() {
        let c = cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        init_afm(&mut store, &mut rng, "a", &c);
        store.insert("a.fusion1.att2.w", Matrix::zeros(4, 3));
        store.insert("a.fusion1.att2.b", Matrix::row_vector(&[800.0, 0.0, 0.0]));
        let mut s = Session::eval(&store);
        let t = [0; 3].map(|_| s.graph.constant(random(&mut rng, 6, 4)));
        let out = fusionnet_forward(&mut s, "a", 1, t, 6, &c);
        let direct = conv_block(&mut s, "a.fusion1.block", t[0], 6, &c);
        let direct = s.graph.avg_pool(direct, 6);
        assert!(s.graph.value(out.features).max_abs_diff(s.graph.value(direct)) < 1e-12);
    }

    #[test]
    fn single_expert_always_enabled() {
        let c = cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        init_afm(&mut store, &mut rng, "a", &c);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let mut s = Session::train(&store, &mut r2);
        let mods = [0; 3].map(|_| s.graph.constant(random(&mut rng, 8, 4)));
        let out = afm_forward(&mut s, "a", mods, 8, &c);
        assert!(out.hard.iter().all(|&a| a == 1));
        assert!(s.graph.value(out.mask).data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sampling_reproducible_under_seed() {
        let c = cfg(4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        init_afm(&mut store, &mut rng, "a", &c);
        let inputs: Vec<Matrix> = (0..3).map(|_| random(&mut rng, 10, 4)).collect();
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut s = Session::train(&store, &mut r);
            let mods = [0, 1, 2].map(|i| s.graph.constant(inputs[i].clone()));
            afm_forward(&mut s, "a", mods, 10, &c).hard
        };
        assert_eq!(run(3), run(3));
        assert_eq!(run(3).len(), 5);
    }

    proptest! {
        #[test]
        fn mask_enabled_set_grows((k, a, b) in (2usize..12).prop_flat_map(|k| (Just(k), 1..k))
            .prop_flat_map(|(k, a)| (Just(k), Just(a), (a + 1)..=k))) {
            let ma = ranked_mask(a, k, -1e9);
            let mb = ranked_mask(b, k, -1e9);
            let ea = ma.iter().filter(|&&x| x == 0.0).count();
            let eb = mb.iter().filter(|&&x| x == 0.0).count();
            prop_assert!(eb > ea);
            for j in 0..k {
                if ma[j] == 0.0 { prop_assert_eq!(mb[j], 0.0); }
            }
        }

        #[test]
        fn relaxation_is_probability_vector(p in prop::collection::vec(0.0f64..1.0, 2..8), tau in 0.05f64..100.0, seed in any::<u64>()) {
            let total: f64 = p.iter().sum();
            prop_assume!(total > 1e-6);
            let probs: Vec<f64> = p.iter().map(|x| x / total).collect();
            let d = sample_decision(&probs, &mut ChaCha8Rng::seed_from_u64(seed), tau);
            let sum: f64 = d.relaxed.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(d.relaxed.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((1..=probs.len()).contains(&d.hard));
        }

        #[test]
        fn relaxation_converges_to_hard_decision(seed in any::<u64>()) {
            let probs = [0.2, 0.3, 0.5];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = gumbel_noise(&mut rng, 3);
            let cold = decision_from_noise(&probs, noise.clone(), 1e-4);
            let z: Vec<f64> = probs.iter().zip(&noise).map(|(p, g)| p.ln() + g).collect();
            let mut sorted = z.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-2);
            prop_assert!(cold.relaxed[cold.hard - 1] > 1.0 - 1e-9);
        }
    }
}
