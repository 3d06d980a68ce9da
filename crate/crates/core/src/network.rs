//! Full model assembly: three modality branches, the progressively
//! aggregating mixed branch with its decoders and fusion module, and the
//! late-fusion baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::afm::{afm_forward, init_afm, AfmOutput};
use crate::autograd::Var;
use crate::branch::{
    branch_forward, conv_stage, embed, init_branch, init_head, init_stages_and_head, linear, regression_head,
    run_stages, StageVars,
};
use crate::cmfd::{decode_cross_modal, init_cmfd};
use crate::config::{BaselineStrategy, ModelConfig};
use crate::data::{Batch, Modality};
use crate::error::{PamfnError, Result};
use crate::msfd::{decode_modality_specific, init_msfd};
use crate::params::{init_linear, ParamStore};
use crate::session::Session;
use crate::tensor::Matrix;

/// Parameter prefix of the late-fusion baseline layers.
pub const LATE_PREFIX: &str = "late";
pub const MIXED_PREFIX: &str = "mixed";

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Random initialization. Branches are drawn first, so models built from
    /// the same seed share branch weights whatever the variant.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for m in Modality::ALL {
            init_branch(&mut params, &mut rng, m.name(), config.dims.get(m), &config);
        }
        match config.baseline {
            Some(strategy) => init_baseline(&mut params, &mut rng, strategy, &config),
            None => init_mixed(&mut params, &mut rng, &config),
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they match `config`'s layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        params.check_layout(&reference.params)?;
        Ok(Self { config, params })
    }

    /// Eval-mode prediction for each video of `batches` (one video each).
    pub fn predict(&self, batch: &Batch) -> Vec<f64> {
        let mut s = Session::eval(&self.params);
        let score = model_forward(&mut s, &self.config, batch);
        s.graph.value(score).data().to_vec()
    }

    /// Eval-mode prediction of one modality branch's own head.
    pub fn predict_branch(&self, modality: Modality, batch: &Batch) -> Vec<f64> {
        let mut s = Session::eval(&self.params);
        let raw = s.graph.constant(batch.features(modality).clone());
        let out = branch_forward(&mut s, modality.name(), raw, batch.seq_len, &self.config);
        s.graph.value(out.score).data().to_vec()
    }
}

fn init_mixed(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    init_stages_and_head(store, rng, MIXED_PREFIX, cfg);
    let dv = cfg.decoder_variant;
    for i in cfg.fusion_stages.iter().copied() {
        if dv.uses_msfd_attention() {
            init_msfd(store, rng, &format!("msfd{i}"), cfg.d);
        }
        if dv.uses_msfd_weighted() {
            store.insert(format!("msfd{i}.logits"), Matrix::zeros(1, 3));
        }
        if dv.uses_afm() {
            init_afm(store, rng, &format!("afm{i}"), cfg);
        }
        if dv.uses_cmfd_attention() {
            init_cmfd(store, rng, &format!("cmfd{i}"), cfg.d);
        }
        if dv.uses_cmfd_weighted() {
            store.insert(format!("cmfd{i}.logits"), Matrix::zeros(1, cfg.k));
        }
    }
}

fn init_baseline(store: &mut ParamStore, rng: &mut ChaCha8Rng, strategy: BaselineStrategy, cfg: &ModelConfig) {
    let d = cfg.d;
    match strategy {
        BaselineStrategy::Avg => {}
        BaselineStrategy::Cat => init_linear(store, rng, &format!("{LATE_PREFIX}.reduce"), 3 * d, d),
        BaselineStrategy::Weighted => store.insert(format!("{LATE_PREFIX}.logits"), Matrix::zeros(1, 3)),
        BaselineStrategy::Attention => init_linear(store, rng, &format!("{LATE_PREFIX}.att"), 3 * d, 3),
    }
    init_head(store, rng, &format!("{LATE_PREFIX}.head"), d);
}

/// Per-stage record of one forward pass.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub stage: usize,
    pub len: usize,
    /// Mixed feature `f^m_i`.
    pub mixed: Matrix,
    /// Mixed conv-stage output `h_i`.
    pub conv: Matrix,
    pub msfd: Option<Matrix>,
    pub cmfd: Option<Matrix>,
    /// 1-based per-row decisions (rows are time steps, videos stacked).
    pub decisions: Option<Vec<usize>>,
    pub probs: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
    pub score: Vec<f64>,
}

pub struct ForwardOutput {
    /// `B × 1` predicted normalized scores.
    pub score: Var,
    pub trace: ForwardTrace,
    /// Fusion-module outputs of every fusing stage, in stage order.
    pub fusion: Vec<(usize, AfmOutput)>,
}

/// Modality features `f^v_i, f^f_i, f^a_i` at every stage.
fn modality_stages(s: &mut Session, cfg: &ModelConfig, batch: &Batch) -> [StageVars; 3] {
    Modality::ALL.map(|m| {
        let raw = s.graph.constant(batch.features(m).clone());
        let x0 = embed(s, m.name(), raw);
        run_stages(s, m.name(), x0, batch.seq_len, cfg)
    })
}

/// Softmax-weighted sum of `parts` with per-row logits (`rows × parts`).
fn weighted_sum(s: &mut Session, logits: Var, parts: &[Var]) -> Var {
    let w = s.graph.softmax_rows(logits);
    let terms: Vec<Var> = parts
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let wj = s.graph.slice_cols(w, j, 1);
            s.graph.mul_col(p, wj)
        })
        .collect();
    s.graph.sum(&terms)
}

/// Broadcasts a `1 × n` logit row to `rows × n`.
fn broadcast_logits(s: &mut Session, name: &str, rows: usize) -> Var {
    let logits = s.param(name);
    let n = s.graph.value(logits).cols();
    let zeros = s.graph.constant(Matrix::zeros(rows, n));
    s.graph.add_row(zeros, logits)
}

/// The full model on a stacked batch.
pub fn pamfn_forward(s: &mut Session, cfg: &ModelConfig, batch: &Batch) -> ForwardOutput {
    assert!(cfg.baseline.is_none(), "pamfn_forward called on a baseline configuration");
    let branches = modality_stages(s, cfg, batch);
    let dv = cfg.decoder_variant;
    let rows0 = batch.size() * batch.seq_len;
    let mut f = s.graph.constant(Matrix::zeros(rows0, cfg.d));
    let mut seq = batch.seq_len;
    let mut stages = Vec::with_capacity(cfg.n_stages);
    let mut fusion = Vec::new();
    for i in 1..=cfg.n_stages {
        let (h, t_i) = conv_stage(s, &format!("{MIXED_PREFIX}.stage{i}"), f, seq, cfg);
        let mods_i = [0, 1, 2].map(|m| branches[m].features[i]);
        let mut terms = vec![h];
        let mut trace = StageTrace {
            stage: i,
            len: t_i,
            mixed: Matrix::zeros(0, 0),
            conv: s.graph.value(h).clone(),
            msfd: None,
            cmfd: None,
            decisions: None,
            probs: None,
        };
        if cfg.fuses_at(i) {
            if dv.uses_msfd_attention() {
                let ms = decode_modality_specific(s, &format!("msfd{i}"), h, mods_i).features;
                terms.push(ms);
            } else if dv.uses_msfd_weighted() {
                let rows = s.graph.value(h).rows();
                let logits = broadcast_logits(s, &format!("msfd{i}.logits"), rows);
                terms.push(weighted_sum(s, logits, &mods_i));
            }
            if dv.uses_afm() {
                let prev = [0, 1, 2].map(|m| branches[m].features[i - 1]);
                let afm = afm_forward(s, &format!("afm{i}"), prev, seq, cfg);
                let cm = if dv.uses_cmfd_attention() {
                    decode_cross_modal(s, &format!("cmfd{i}"), h, mods_i, &afm.cross, afm.mask).features
                } else {
                    let rows = s.graph.value(h).rows();
                    let logits = broadcast_logits(s, &format!("cmfd{i}.logits"), rows);
                    let masked = s.graph.add(logits, afm.mask);
                    weighted_sum(s, masked, &afm.cross)
                };
                terms.push(cm);
                trace.decisions = Some(afm.hard.clone());
                trace.probs = afm.probs.map(|p| s.graph.value(p).clone());
                fusion.push((i, afm));
            }
            if terms.len() > 1 && dv.has_msfd_term() {
                trace.msfd = Some(s.graph.value(terms[1]).clone());
            }
            if dv.uses_afm() {
                trace.cmfd = Some(s.graph.value(*terms.last().unwrap()).clone());
            }
        }
        f = if terms.len() == 1 { h } else { s.graph.sum(&terms) };
        trace.mixed = s.graph.value(f).clone();
        stages.push(trace);
        seq = t_i;
    }
    let score = regression_head(s, &format!("{MIXED_PREFIX}.head"), f, seq, cfg);
    let trace = ForwardTrace {
        stages,
        score: s.graph.value(score).data().to_vec(),
    };
    ForwardOutput { score, trace, fusion }
}

/// Late fusion of the three stage-`N` modality features.
pub fn late_fusion(s: &mut Session, strategy: BaselineStrategy, feats: [Var; 3]) -> Var {
    match strategy {
        BaselineStrategy::Avg => {
            let sum = s.graph.sum(&feats);
            s.graph.scale(sum, 1.0 / 3.0)
        }
        BaselineStrategy::Cat => {
            let cat = s.graph.concat_cols(&feats);
            linear(s, &format!("{LATE_PREFIX}.reduce"), cat)
        }
        BaselineStrategy::Weighted => {
            let rows = s.graph.value(feats[0]).rows();
            let logits = broadcast_logits(s, &format!("{LATE_PREFIX}.logits"), rows);
            weighted_sum(s, logits, &feats)
        }
        BaselineStrategy::Attention => {
            let cat = s.graph.concat_cols(&feats);
            let logits = linear(s, &format!("{LATE_PREFIX}.att"), cat);
            weighted_sum(s, logits, &feats)
        }
    }
}

pub fn baseline_forward(s: &mut Session, cfg: &ModelConfig, batch: &Batch) -> Var {
    let strategy = cfg.baseline.expect("baseline_forward needs a baseline strategy");
    let branches = modality_stages(s, cfg, batch);
    let n = cfg.n_stages;
    let seq = branches[0].lens[n];
    let fused = late_fusion(s, strategy, [0, 1, 2].map(|m| branches[m].features[n]));
    regression_head(s, &format!("{LATE_PREFIX}.head"), fused, seq, cfg)
}

/// Score of whichever model `cfg` describes.
pub fn model_forward(s: &mut Session, cfg: &ModelConfig, batch: &Batch) -> Var {
    if cfg.baseline.is_some() {
        baseline_forward(s, cfg, batch)
    } else {
        pamfn_forward(s, cfg, batch).score
    }
}

/// Checks that a batch is compatible with the configuration.
pub fn check_batch(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    for m in Modality::ALL {
        let found = batch.features(m).cols();
        let expected = cfg.dims.get(m);
        if found != expected {
            return Err(PamfnError::DimensionMismatch {
                modality: m.name().to_string(),
                expected,
                found,
            });
        }
    }
    if batch.seq_len == 0 {
        return Err(PamfnError::Shape("empty sequence".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderVariant, FusionVariant};
    use crate::data::{FeatureBundle, FeatureDims};
    use rand::Rng;

    fn dims() -> FeatureDims {
        FeatureDims { rgb: 5, flow: 4, audio: 3 }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn batch(seed: u64, b: usize, t: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims();
        let bundles: Vec<FeatureBundle> = (0..b)
            .map(|i| {
                FeatureBundle::new(
                    format!("v{i}"),
                    random(&mut rng, t, d.rgb),
                    random(&mut rng, t, d.flow),
                    random(&mut rng, t, d.audio),
                    rng.gen(),
                )
                .unwrap()
            })
            .collect();
        Batch::from_bundles(&bundles).unwrap()
    }

    fn eval(model: &Model, b: &Batch) -> (Vec<f64>, ForwardTrace) {
        let mut s = Session::eval(&model.params);
        let out = pamfn_forward(&mut s, &model.config, b);
        (s.graph.value(out.score).data().to_vec(), out.trace)
    }

    #[test]
    fn eval_is_deterministic() {
        let model = Model::init(ModelConfig::tiny(dims()), 1).unwrap();
        let b = batch(2, 2, 6);
        assert_eq!(eval(&model, &b).0, eval(&model, &b).0);
    }

    #[test]
    fn no_decoders_gives_input_independent_score() {
        let cfg = ModelConfig {
            fusion_stages: vec![],
            ..ModelConfig::tiny(dims())
        };
        let model = Model::init(cfg, 3).unwrap();
        let a = eval(&model, &batch(4, 1, 6)).0;
        let b = eval(&model, &batch(5, 1, 9)).0;
        assert_eq!(a, b);
    }

    #[test]
    fn shape_audit_over_lengths() {
        let model = Model::init(ModelConfig::tiny(dims()), 6).unwrap();
        for t in (4..=200).step_by(7).chain([199, 200]) {
            let b = batch(t as u64, 2, t);
            let (score, trace) = eval(&model, &b);
            assert_eq!(score.len(), 2);
            let mut len = t;
            for st in &trace.stages {
                len = len.div_ceil(2);
                assert_eq!(st.len, len);
                for m in [Some(&st.mixed), Some(&st.conv), st.msfd.as_ref(), st.cmfd.as_ref()].into_iter().flatten() {
                    assert_eq!(m.shape(), (2 * len, 8), "T={t} stage {}", st.stage);
                }
            }
        }
    }

    #[test]
    fn ranked_single_expert_equals_free_single_expert() {
        let base = ModelConfig { k: 1, ..ModelConfig::tiny(dims()) };
        let ranked = Model::init(base.clone(), 8).unwrap();
        let free_cfg = ModelConfig {
            fusion_variant: FusionVariant::Free,
            ..base
        };
        let mut free_params = ParamStore::new();
        let reference = Model::init(free_cfg.clone(), 0).unwrap();
        for name in reference.params.names() {
            free_params.insert(name, ranked.params.expect(name).clone());
        }
        for (name, v) in reference.params.buffers() {
            free_params.insert_buffer(name, ranked.params.buffer(name).cloned().unwrap_or_else(|| v.clone()));
        }
        let free = Model::from_params(free_cfg, free_params).unwrap();
        let b = batch(9, 2, 11);
        assert_eq!(eval(&ranked, &b).0, eval(&free, &b).0);
        // also under sampled routing
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut s = Session::train(&ranked.params, &mut r1).with_dropout(false);
        let a = pamfn_forward(&mut s, &ranked.config, &b).score;
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let mut s2 = Session::train(&free.params, &mut r2).with_dropout(false);
        let c = pamfn_forward(&mut s2, &free.config, &b).score;
        assert_eq!(s.graph.value(a), s2.graph.value(c));
    }

    #[test]
    fn variant_masks() {
        let b = batch(10, 1, 12);
        let free = Model::init(
            ModelConfig {
                k: 4,
                fusion_variant: FusionVariant::Free,
                ..ModelConfig::tiny(dims())
            },
            1,
        )
        .unwrap();
        let mut s = Session::eval(&free.params);
        let out = pamfn_forward(&mut s, &free.config, &b);
        for (_, afm) in &out.fusion {
            assert!(s.graph.value(afm.mask).data().iter().all(|&m| m == 0.0));
        }
        let unranked = Model::init(
            ModelConfig {
                k: 4,
                fusion_variant: FusionVariant::Unranked,
                ..ModelConfig::tiny(dims())
            },
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Session::train(&unranked.params, &mut rng);
        let out = pamfn_forward(&mut s, &unranked.config, &b);
        for (_, afm) in &out.fusion {
            let m = s.graph.value(afm.mask);
            for r in 0..m.rows() {
                assert_eq!(m.row(r).iter().filter(|&&x| x == 0.0).count(), 1);
            }
        }
    }

    #[test]
    fn first_stage_only_leaves_later_stages_plain() {
        let cfg = ModelConfig {
            n_stages: 3,
            fusion_stages: vec![1],
            ..ModelConfig::tiny(dims())
        };
        let model = Model::init(cfg, 2).unwrap();
        assert!(model.params.contains("afm1.tau"));
        assert!(!model.params.names().any(|n| n.starts_with("afm2") || n.starts_with("msfd3")));
        let (_, trace) = eval(&model, &batch(1, 1, 16));
        assert!(trace.stages[0].cmfd.is_some());
        for st in &trace.stages[1..] {
            assert!(st.msfd.is_none() && st.cmfd.is_none());
            assert_eq!(st.mixed, st.conv);
        }
    }

    #[test]
    fn weighted_replacements_run() {
        for dv in [
            DecoderVariant::NoMsfd,
            DecoderVariant::NoCmfd,
            DecoderVariant::WeightedForMsfd,
            DecoderVariant::WeightedForCmfd,
            DecoderVariant::WeightedForBoth,
        ] {
            let cfg = ModelConfig {
                decoder_variant: dv,
                ..ModelConfig::tiny(dims())
            };
            let model = Model::init(cfg, 4).unwrap();
            let (score, trace) = eval(&model, &batch(2, 2, 8));
            assert!(score.iter().all(|x| (0.0..=1.0).contains(x)), "{dv}");
            assert_eq!(trace.stages[0].msfd.is_some(), dv.has_msfd_term());
            assert_eq!(trace.stages[0].cmfd.is_some(), dv.uses_afm());
        }
    }

    #[test]
    fn weighted_msfd_with_equal_logits_is_modality_mean() {
        let cfg = ModelConfig {
            decoder_variant: DecoderVariant::WeightedForMsfd,
            ..ModelConfig::tiny(dims())
        };
        let model = Model::init(cfg, 5).unwrap();
        let mut s = Session::eval(&model.params);
        let xs = [0; 3].map(|_| s.graph.constant(Matrix::from_rows(&[vec![3.0, -1.0], vec![0.5, 2.0]]).unwrap()));
        let logits = broadcast_logits(&mut s, "msfd1.logits", 2);
        let w = weighted_sum(&mut s, logits, &xs);
        assert!(s.graph.value(w).max_abs_diff(s.graph.value(xs[0])) < 1e-15);
    }

    fn baseline_model(strategy: BaselineStrategy) -> Model {
        Model::init(
            ModelConfig {
                baseline: Some(strategy),
                ..ModelConfig::tiny(dims())
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn baselines_agree_on_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let same = random(&mut rng, 5, 8);
        let fuse = |strategy, store: &ParamStore| {
            let mut s = Session::eval(store);
            let f = [0; 3].map(|_| s.graph.constant(same.clone()));
            let out = late_fusion(&mut s, strategy, f);
            s.graph.value(out).clone()
        };
        for st in [BaselineStrategy::Avg, BaselineStrategy::Weighted, BaselineStrategy::Attention] {
            let model = baseline_model(st);
            assert!(fuse(st, &model.params).max_abs_diff(&same) < 1e-12, "{st}");
        }
    }

    #[test]
    fn cat_with_averaging_reduction_equals_avg() {
        let mut model = baseline_model(BaselineStrategy::Cat);
        let d = 8;
        let mut w = Matrix::zeros(3 * d, d);
        for blk in 0..3 {
            for j in 0..d {
                w.set(blk * d + j, j, 1.0 / 3.0);
            }
        }
        model.params.insert("late.reduce.w", w);
        model.params.insert("late.reduce.b", Matrix::zeros(1, d));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<Matrix> = (0..3).map(|_| random(&mut rng, 4, d)).collect();
        let mut s = Session::eval(&model.params);
        let f = [0, 1, 2].map(|i| s.graph.constant(feats[i].clone()));
        let cat = late_fusion(&mut s, BaselineStrategy::Cat, f);
        let avg = late_fusion(&mut s, BaselineStrategy::Avg, f);
        assert!(s.graph.value(cat).max_abs_diff(s.graph.value(avg)) < 1e-12);
    }

    #[test]
    fn baseline_models_predict_in_unit_interval() {
        let b = batch(3, 2, 10);
        for st in [BaselineStrategy::Avg, BaselineStrategy::Cat, BaselineStrategy::Weighted, BaselineStrategy::Attention] {
            let model = baseline_model(st);
            assert!(!model.params.names().any(|n| n.starts_with("mixed")));
            let p = model.predict(&b);
            assert_eq!(p.len(), 2);
            assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn from_params_rejects_mismatched_width() {
        let model = Model::init(ModelConfig::tiny(dims()), 1).unwrap();
        let wider = ModelConfig { d: 9, ..ModelConfig::tiny(dims()) };
        assert!(Model::from_params(wider, model.params).is_err());
    }

    #[test]
    fn check_batch_reports_modality() {
        let cfg = ModelConfig::tiny(FeatureDims { rgb: 6, flow: 4, audio: 3 });
        match check_batch(&cfg, &batch(1, 1, 6)) {
            Err(PamfnError::DimensionMismatch { modality, .. }) => assert_eq!(modality, "rgb"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
