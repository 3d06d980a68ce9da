//! Central finite-difference checks of the analytic gradients.
//!
//! Sampled routing is recorded on a base pass and replayed on every
//! perturbed pass: the Gumbel noise and hard decisions stay fixed, and the
//! stop-gradient term of the straight-through mask keeps its base value.
//! Dropout is off and normalization uses batch statistics.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::afm::{afm_forward, init_afm};
use crate::autograd::{Graph, Var};
use crate::branch::{branch_forward, init_branch};
use crate::cmfd::{decode_cross_modal, init_cmfd};
use crate::config::ModelConfig;
use crate::data::{Batch, FeatureBundle, FeatureDims, Modality};
use crate::error::PamfnError;
use crate::msfd::{decode_modality_specific, init_msfd};
use crate::network::{pamfn_forward, Model};
use crate::params::ParamStore;
use crate::session::{Routing, Session};
use crate::tensor::Matrix;
use crate::training::{mse_loss_var, PHASE2_FROZEN};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute differences below this pass regardless of relative error.
    pub abs_floor: f64,
    pub seed: u64,
    /// Test fixture: perturbs the analytic gradient of this parameter so the
    /// check must fail.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            seed: 17,
            corrupt: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Branch,
    Msfd,
    Afm,
    Cmfd,
    Network,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Branch, Suite::Msfd, Suite::Afm, Suite::Cmfd, Suite::Network];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Branch => "branch",
            Suite::Msfd => "msfd",
            Suite::Afm => "afm",
            Suite::Cmfd => "cmfd",
            Suite::Network => "network",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = PamfnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| PamfnError::Validation(format!("unknown gradcheck module `{s}`")))
    }
}

/// Outcome for one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub suite: Suite,
    pub name: String,
    pub scalars: usize,
    pub max_abs_err: f64,
    /// Largest relative error among entries that failed the absolute floor.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn extend(&mut self, other: GradcheckReport) {
        self.checks.extend(other.checks);
    }
}

type LossFn<'a> = dyn Fn(&mut Session) -> Var + 'a;

/// Checks every non-frozen parameter `loss` touches.
pub fn check_gradients(
    suite: Suite,
    store: &ParamStore,
    frozen: &[&str],
    loss: &LossFn,
    opts: &GradcheckOptions,
) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let (grads, routing, detached) = {
        let mut s = Session::train(store, &mut rng).with_dropout(false).with_frozen(frozen);
        let l = loss(&mut s);
        let g = s.graph.backward(l);
        let grads = s.param_grads(&g);
        let detached = s.graph.detach_log().to_vec();
        (grads, s.routing_log().to_vec(), detached)
    };
    let evaluate = |store: &ParamStore| {
        let graph = Graph::with_detach_replay(detached.clone());
        let mut s = Session::deterministic_train(store, Routing::Replay(routing.clone()), graph).with_frozen(frozen);
        let l = loss(&mut s);
        s.graph.scalar(l)
    };

    let mut work = store.clone();
    let mut checks = Vec::with_capacity(grads.len());
    for (name, mut analytic) in grads {
        if opts.corrupt.as_deref() == Some(name.as_str()) {
            let bump = 0.01 * analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-3;
            analytic.data_mut()[0] += bump;
        }
        let mut check = ParamCheck {
            suite,
            name: name.clone(),
            scalars: analytic.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_index: 0,
            passed: true,
        };
        for j in 0..analytic.len() {
            let orig = work.expect(&name).data()[j];
            work.get_mut(&name).unwrap().data_mut()[j] = orig + opts.step;
            let up = evaluate(&work);
            work.get_mut(&name).unwrap().data_mut()[j] = orig - opts.step;
            let down = evaluate(&work);
            work.get_mut(&name).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let ok = abs <= opts.rel_tol * scale || abs <= opts.abs_floor;
            if abs > check.max_abs_err {
                check.max_abs_err = abs;
                check.worst_index = j;
            }
            if abs > opts.abs_floor {
                check.max_rel_err = check.max_rel_err.max(abs / scale);
            }
            if !ok {
                check.passed = false;
            }
        }
        if !check.passed {
            log::warn!(
                "gradcheck {suite}: `{}` max abs err {:.3e}, rel err {:.3e} at entry {}",
                check.name,
                check.max_abs_err,
                check.max_rel_err,
                check.worst_index
            );
        }
        checks.push(check);
    }
    GradcheckReport { checks }
}

/// Dimensions of the gradient-check configuration.
pub fn suite_config() -> ModelConfig {
    ModelConfig::tiny(FeatureDims { rgb: 5, flow: 4, audio: 3 })
}

pub const SUITE_SEQ: usize = 6;
pub const SUITE_BATCH: usize = 2;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn suite_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Batch {
    let bundles: Vec<FeatureBundle> = (0..SUITE_BATCH)
        .map(|i| {
            FeatureBundle::new(
                format!("g{i}"),
                random(rng, SUITE_SEQ, cfg.dims.rgb),
                random(rng, SUITE_SEQ, cfg.dims.flow),
                random(rng, SUITE_SEQ, cfg.dims.audio),
                rng.gen_range(0.1..0.9),
            )
            .expect("valid bundle")
        })
        .collect();
    Batch::from_bundles(&bundles).expect("equal lengths")
}

/// Moves normalization affine parameters off their `γ = 1, β = 0`
/// initialization. At that point rows that are constant in time (the mixed
/// branch starts from zeros) normalize to exactly `β = 0` and sit on the
/// rectifier's kink, where finite differences are meaningless.
fn generic_norms(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".gamma") || n.ends_with(".beta"))
        .map(str::to_string)
        .collect();
    for n in names {
        let (r, c) = store.expect(&n).shape();
        let mut m = random(rng, r, c).scale(0.5);
        if n.ends_with(".gamma") {
            m = m.map(|v| v + 1.0);
        }
        store.insert(n, m);
    }
}

/// `Σ probe ∘ x`, a loss with a dense, generic upstream gradient.
fn probe_loss(s: &mut Session, x: Var, probe: &Matrix) -> Var {
    let p = s.graph.constant(probe.clone());
    let y = s.graph.mul(x, p);
    let n = probe.len() as f64;
    let m = s.graph.mean_all(y);
    s.graph.scale(m, n)
}

/// Runs one suite at the tiny configuration.
pub fn run_suite(suite: Suite, opts: &GradcheckOptions) -> GradcheckReport {
    let cfg = suite_config();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d = cfg.d;
    let rows = SUITE_BATCH * SUITE_SEQ;
    match suite {
        Suite::Branch => {
            let mut report = GradcheckReport::default();
            let batch = suite_batch(&mut rng, &cfg);
            let mut store = ParamStore::new();
            for m in Modality::ALL {
                init_branch(&mut store, &mut rng, m.name(), cfg.dims.get(m), &cfg);
            }
            generic_norms(&mut store, &mut rng);
            for m in Modality::ALL {
                let frozen: Vec<String> = Modality::ALL.iter().filter(|o| **o != m).map(|o| format!("{}.", o.name())).collect();
                let frozen: Vec<&str> = frozen.iter().map(String::as_str).collect();
                let loss = |s: &mut Session| {
                    let raw = s.graph.constant(batch.features(m).clone());
                    let score = branch_forward(s, m.name(), raw, batch.seq_len, &cfg).score;
                    mse_loss_var(s, score, &batch.labels)
                };
                report.extend(check_gradients(suite, &store, &frozen, &loss, opts));
            }
            report
        }
        Suite::Msfd => {
            let mut store = ParamStore::new();
            init_msfd(&mut store, &mut rng, "msfd1", d);
            let mixed = random(&mut rng, rows, d);
            let mods: Vec<Matrix> = (0..3).map(|_| random(&mut rng, rows, d)).collect();
            let probe = random(&mut rng, rows, d);
            let loss = |s: &mut Session| {
                let x = s.graph.constant(mixed.clone());
                let m = [0, 1, 2].map(|i| s.graph.constant(mods[i].clone()));
                let out = decode_modality_specific(s, "msfd1", x, m).features;
                probe_loss(s, out, &probe)
            };
            check_gradients(suite, &store, &[], &loss, opts)
        }
        Suite::Afm => {
            let mut store = ParamStore::new();
            init_afm(&mut store, &mut rng, "afm1", &cfg);
            generic_norms(&mut store, &mut rng);
            // a tau near 1 keeps the relaxed decision far from uniform
            store.insert("afm1.tau", Matrix::scalar(0.7));
            let mods: Vec<Matrix> = (0..3).map(|_| random(&mut rng, rows, d)).collect();
            let out_rows = SUITE_BATCH * SUITE_SEQ.div_ceil(2);
            let probes: Vec<Matrix> = (0..cfg.k).map(|_| random(&mut rng, out_rows, d)).collect();
            let logits = random(&mut rng, out_rows, cfg.k);
            let w_probe = random(&mut rng, out_rows, cfg.k);
            let loss = |s: &mut Session| {
                let m = [0, 1, 2].map(|i| s.graph.constant(mods[i].clone()));
                let out = afm_forward(s, "afm1", m, SUITE_SEQ, &cfg);
                let mut terms: Vec<Var> = out.cross.iter().zip(&probes).map(|(&c, p)| probe_loss(s, c, p)).collect();
                // the mask enters through a softmax, as in the decoder
                let l = s.graph.constant(logits.clone());
                let z = s.graph.add(l, out.mask);
                let w = s.graph.softmax_rows(z);
                terms.push(probe_loss(s, w, &w_probe));
                s.graph.sum(&terms)
            };
            check_gradients(suite, &store, &[], &loss, opts)
        }
        Suite::Cmfd => {
            let mut store = ParamStore::new();
            init_cmfd(&mut store, &mut rng, "cmfd1", d);
            let mixed = random(&mut rng, rows, d);
            let mods: Vec<Matrix> = (0..3).map(|_| random(&mut rng, rows, d)).collect();
            let cross: Vec<Matrix> = (0..cfg.k).map(|_| random(&mut rng, rows, d)).collect();
            let mask = Matrix::from_rows(
                &(0..rows)
                    .map(|r| crate::afm::ranked_mask(1 + r % cfg.k, cfg.k, cfg.xi))
                    .collect::<Vec<_>>(),
            )
            .expect("mask");
            let probe = random(&mut rng, rows, d);
            let loss = |s: &mut Session| {
                let x = s.graph.constant(mixed.clone());
                let m = [0, 1, 2].map(|i| s.graph.constant(mods[i].clone()));
                let c: Vec<Var> = cross.iter().map(|v| s.graph.constant(v.clone())).collect();
                let mk = s.graph.constant(mask.clone());
                let out = decode_cross_modal(s, "cmfd1", x, m, &c, mk).features;
                probe_loss(s, out, &probe)
            };
            check_gradients(suite, &store, &[], &loss, opts)
        }
        Suite::Network => {
            let model = Model::init(cfg.clone(), opts.seed).expect("suite configuration is valid");
            let mut store = model.params;
            for name in store.names().filter(|n| n.ends_with(".tau")).map(str::to_string).collect::<Vec<_>>() {
                store.insert(name, Matrix::scalar(0.7));
            }
            generic_norms(&mut store, &mut rng);
            let batch = suite_batch(&mut rng, &cfg);
            let loss = |s: &mut Session| {
                let score = pamfn_forward(s, &cfg, &batch).score;
                mse_loss_var(s, score, &batch.labels)
            };
            check_gradients(suite, &store, &PHASE2_FROZEN, &loss, opts)
        }
    }
}

/// Every suite in order.
pub fn run_all(opts: &GradcheckOptions) -> GradcheckReport {
    let mut report = GradcheckReport::default();
    for suite in Suite::ALL {
        report.extend(run_suite(suite, opts));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn msfd_suite_passes() {
        let r = run_suite(Suite::Msfd, &GradcheckOptions::default());
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
        assert_eq!(r.checks.len(), 6);
    }

    #[test]
    fn corruption_names_the_parameter() {
        let opts = GradcheckOptions {
            corrupt: Some("cmfd1.k.w".into()),
            ..Default::default()
        };
        let r = run_suite(Suite::Cmfd, &opts);
        let failed: Vec<&str> = r.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["cmfd1.k.w"]);
    }
}
