//! Modality-specific branch: embedding, `N` residual convolution stages, and
//! a regression head. The convolution stage is reused by the mixed branch and
//! by every FusionNet.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::params::{init_linear, ParamStore};
use crate::session::Session;
use crate::tensor::{pooled_len, Matrix};

/// Per-stage features of one branch, stage 0 being the embedding.
#[derive(Clone, Debug)]
pub struct StageVars {
    pub features: Vec<Var>,
    /// Sequence length at each stage.
    pub lens: Vec<usize>,
}

impl StageVars {
    pub fn at(&self, stage: usize) -> (Var, usize) {
        (self.features[stage], self.lens[stage])
    }
}

pub struct BranchOutput {
    pub stages: StageVars,
    /// `B × 1` predicted normalized scores.
    pub score: Var,
}

/// Sequence lengths `T_0..T_N` for an input of length `t`.
pub fn stage_lengths(t: usize, n_stages: usize) -> Vec<usize> {
    let mut lens = vec![t];
    for _ in 0..n_stages {
        lens.push(pooled_len(*lens.last().unwrap()));
    }
    lens
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Matrix::filled(1, d, 1.0));
    store.insert(format!("{prefix}.beta"), Matrix::zeros(1, d));
    store.insert_buffer(format!("{prefix}.running_mean"), Matrix::zeros(1, d));
    store.insert_buffer(format!("{prefix}.running_var"), Matrix::filled(1, d, 1.0));
}

/// Two kernel-3 convolutions, each with normalization.
pub fn init_conv_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d;
    for i in 1..=2 {
        init_linear(store, rng, &format!("{prefix}.conv{i}"), 3 * d, d);
        if cfg.batch_norm {
            init_norm(store, &format!("{prefix}.norm{i}"), d);
        }
    }
}

pub fn init_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    init_linear(store, rng, prefix, d, 1);
}

/// Registers the parameters of a branch reading `input_dim`-wide features.
pub fn init_branch(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input_dim: usize, cfg: &ModelConfig) {
    init_linear(store, rng, &format!("{prefix}.embed"), input_dim, cfg.d);
    init_stages_and_head(store, rng, prefix, cfg);
}

/// Stages and head without an embedding (the mixed branch starts from zeros).
pub fn init_stages_and_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    for i in 1..=cfg.n_stages {
        init_conv_block(store, rng, &format!("{prefix}.stage{i}"), cfg);
    }
    init_head(store, rng, &format!("{prefix}.head"), cfg.d);
}

/// `x·W + b` row by row.
pub fn linear(s: &mut Session, prefix: &str, x: Var) -> Var {
    let w = s.param(&format!("{prefix}.w"));
    let b = s.param(&format!("{prefix}.b"));
    let xw = s.graph.matmul(x, w);
    s.graph.add_row(xw, b)
}

/// Per-time-step affine projection to width `d`.
pub fn embed(s: &mut Session, prefix: &str, raw: Var) -> Var {
    linear(s, &format!("{prefix}.embed"), raw)
}

fn normalize(s: &mut Session, prefix: &str, x: Var, cfg: &ModelConfig) -> Var {
    if !cfg.batch_norm {
        return x;
    }
    let gamma = s.param(&format!("{prefix}.gamma"));
    let beta = s.param(&format!("{prefix}.beta"));
    if s.batch_stats(prefix) {
        let (y, stats) = s.graph.batch_norm(x, gamma, beta, cfg.bn_eps);
        s.record_batch_stats(prefix, stats.mean, stats.var);
        y
    } else {
        let mean = s.buffer(&format!("{prefix}.running_mean")).scale(-1.0);
        let inv_std = s
            .buffer(&format!("{prefix}.running_var"))
            .map(|v| 1.0 / (v + cfg.bn_eps).sqrt());
        let mean = s.graph.constant(mean);
        let inv_std = s.graph.constant(inv_std);
        let centered = s.graph.add_row(x, mean);
        let scale = s.graph.mul(gamma, inv_std);
        let scaled = s.graph.mul_row(centered, scale);
        s.graph.add_row(scaled, beta)
    }
}

/// Residual block without pooling: `relu(n2(c2(relu(n1(c1 x))))) + x`.
pub fn conv_block(s: &mut Session, prefix: &str, x: Var, seq: usize, cfg: &ModelConfig) -> Var {
    let mut h = x;
    for i in 1..=2 {
        let w = s.param(&format!("{prefix}.conv{i}.w"));
        let b = s.param(&format!("{prefix}.conv{i}.b"));
        h = s.graph.conv1d(h, w, b, seq);
        h = normalize(s, &format!("{prefix}.norm{i}"), h, cfg);
        h = s.graph.relu(h);
    }
    s.graph.add(h, x)
}

/// Residual block followed by kernel-2 stride-2 average pooling.
pub fn conv_stage(s: &mut Session, prefix: &str, x: Var, seq: usize, cfg: &ModelConfig) -> (Var, usize) {
    let h = conv_block(s, prefix, x, seq, cfg);
    (s.graph.avg_pool(h, seq), pooled_len(seq))
}

/// Temporal mean, dropout in training, linear to a scalar, sigmoid.
pub fn regression_head(s: &mut Session, prefix: &str, x: Var, seq: usize, cfg: &ModelConfig) -> Var {
    let mut pooled = s.graph.seq_mean(x, seq);
    if s.dropout_active() && cfg.dropout > 0.0 {
        let (r, c) = s.graph.value(pooled).shape();
        let mask = s.dropout_mask(r, c, cfg.dropout);
        let mask = s.graph.constant(mask);
        pooled = s.graph.mul(pooled, mask);
    }
    let logit = linear(s, prefix, pooled);
    s.graph.sigmoid(logit)
}

/// Runs `N` stages from already-embedded (or zero) features.
pub fn run_stages(s: &mut Session, prefix: &str, x0: Var, seq: usize, cfg: &ModelConfig) -> StageVars {
    let mut features = vec![x0];
    let mut lens = vec![seq];
    for i in 1..=cfg.n_stages {
        let (x, t) = conv_stage(s, &format!("{prefix}.stage{i}"), *features.last().unwrap(), *lens.last().unwrap(), cfg);
        features.push(x);
        lens.push(t);
    }
    StageVars { features, lens }
}

/// Full modality branch on a stacked batch of raw features.
pub fn branch_forward(s: &mut Session, prefix: &str, raw: Var, seq: usize, cfg: &ModelConfig) -> BranchOutput {
    let x0 = embed(s, prefix, raw);
    let stages = run_stages(s, prefix, x0, seq, cfg);
    let (last, t_last) = stages.at(cfg.n_stages);
    let score = regression_head(s, &format!("{prefix}.head"), last, t_last, cfg);
    BranchOutput { stages, score }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureDims;
    use crate::tensor::sigmoid;
    use rand::{Rng, SeedableRng};

    fn cfg(d: usize, n: usize) -> ModelConfig {
        ModelConfig {
            d,
            n_stages: n,
            ..ModelConfig::tiny(FeatureDims { rgb: 3, flow: 3, audio: 3 })
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn embed_shapes_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = cfg(256, 3);
        let mut store = ParamStore::new();
        init_linear(&mut store, &mut rng, "rgb.embed", 768, 256);
        let mut s = Session::eval(&store);
        let x = s.graph.constant(random(&mut rng, 70, 768));
        let y = embed(&mut s, "rgb", x);
        assert_eq!(s.graph.value(y).shape(), (70, 256));
        let _ = c;

        // zero input gives bias rows
        let z = s.graph.constant(Matrix::zeros(5, 768));
        let y = embed(&mut s, "rgb", z);
        let v = s.graph.value(y);
        for r in 0..5 {
            assert_eq!(v.row(r), store.expect("rgb.embed.b").data());
        }

        let mut store = ParamStore::new();
        store.insert("a.embed.w", Matrix::identity(4));
        store.insert("a.embed.b", Matrix::zeros(1, 4));
        let mut s = Session::eval(&store);
        let input = random(&mut rng, 6, 4);
        let x = s.graph.constant(input.clone());
        let y = embed(&mut s, "a", x);
        assert_eq!(s.graph.value(y), &input);
    }

    #[test]
    fn conv_stage_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(4, 1);
        let mut store = ParamStore::new();
        init_conv_block(&mut store, &mut rng, "b", &c);
        for (t, expect) in [(8, 4), (7, 4), (1, 1)] {
            let mut s = Session::eval(&store);
            let x = s.graph.constant(random(&mut rng, t, 4));
            let (y, len) = conv_stage(&mut s, "b", x, t, &c);
            assert_eq!(len, expect);
            assert_eq!(s.graph.value(y).shape(), (expect, 4));
        }
        assert_eq!(stage_lengths(70, 3), vec![70, 35, 18, 9]);
    }

    #[test]
    fn zero_weights_without_norm_is_pure_skip() {
        let c = ModelConfig {
            batch_norm: false,
            ..cfg(3, 1)
        };
        let mut store = ParamStore::new();
        for i in 1..=2 {
            store.insert(format!("b.conv{i}.w"), Matrix::zeros(9, 3));
            store.insert(format!("b.conv{i}.b"), Matrix::zeros(1, 3));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random(&mut rng, 7, 3);
        let mut s = Session::eval(&store);
        let x = s.graph.constant(input.clone());
        let (y, _) = conv_stage(&mut s, "b", x, 7, &c);
        let pooled = s.graph.avg_pool(x, 7);
        assert_eq!(s.graph.value(y), s.graph.value(pooled));
    }

    #[test]
    fn constant_input_stays_constant() {
        // Direct evaluation: every row of the output must equal the first.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(5, 1);
        let mut store = ParamStore::new();
        init_conv_block(&mut store, &mut rng, "b", &c);
        let row: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Matrix::from_rows(&vec![row; 9]).unwrap();
        for train in [false, true] {
            let mut r2 = ChaCha8Rng::seed_from_u64(0);
            let mut s = if train {
                Session::train(&store, &mut r2)
            } else {
                Session::eval(&store)
            };
            let x = s.graph.constant(input.clone());
            let (y, _) = conv_stage(&mut s, "b", x, 9, &c);
            let v = s.graph.value(y);
            for r in 1..v.rows() {
                for j in 0..5 {
                    assert!((v.get(r, j) - v.get(0, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn head_examples() {
        let c = ModelConfig {
            dropout: 0.0,
            ..cfg(2, 1)
        };
        let mut store = ParamStore::new();
        store.insert("h.w", Matrix::zeros(2, 1));
        store.insert("h.b", Matrix::zeros(1, 1));
        let mut s = Session::eval(&store);
        let x = s.graph.constant(Matrix::filled(3, 2, 4.0));
        let y = regression_head(&mut s, "h", x, 3, &c);
        assert_eq!(s.graph.scalar(y), 0.5);

        store.insert("h.b", Matrix::scalar(60.0));
        let mut s = Session::eval(&store);
        let x = s.graph.constant(Matrix::filled(3, 2, 4.0));
        let y = regression_head(&mut s, "h", x, 3, &c);
        assert!(s.graph.scalar(y) > 1.0 - 1e-12);

        // d=2, T=1: sigmoid(0.1·0.5 + (-0.2)·1.5 + 0.05) = sigmoid(-0.2)
        store.insert("h.w", Matrix::from_vec(2, 1, vec![0.1, -0.2]).unwrap());
        store.insert("h.b", Matrix::scalar(0.05));
        let mut s = Session::eval(&store);
        let x = s.graph.constant(Matrix::row_vector(&[0.5, 1.5]));
        let y = regression_head(&mut s, "h", x, 1, &c);
        let expected = 1.0 / (1.0 + (0.2f64).exp());
        assert!((s.graph.scalar(y) - expected).abs() < 1e-15);
        assert!((expected - sigmoid(-0.2)).abs() < 1e-15);
    }

    #[test]
    fn branch_stage_lengths_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(4, 3);
        let mut store = ParamStore::new();
        init_branch(&mut store, &mut rng, "rgb", 3, &c);
        let input = random(&mut rng, 70, 3);
        let run = || {
            let mut s = Session::eval(&store);
            let x = s.graph.constant(input.clone());
            let out = branch_forward(&mut s, "rgb", x, 70, &c);
            let lens = out.stages.lens.clone();
            (lens, s.graph.scalar(out.score))
        };
        let (lens, a) = run();
        let (_, b) = run();
        assert_eq!(lens, vec![70, 35, 18, 9]);
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0 && a < 1.0);
    }
}
