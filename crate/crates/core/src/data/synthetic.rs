//! Desk-scale stand-in for a real AQA dataset.
//!
//! Each video has a latent quality `q ~ U(0, 1)` and `raw_score = q·C`. Every
//! modality observes its own noisy view of `q`: a per-video offset drawn with
//! standard deviation `view_noise` is added before projection, so no single
//! modality recovers the score exactly while the three views together do
//! better. The audio view is scaled by `cross_modal_weight`, and flow and
//! audio share a per-video rhythm signal `r_t`.
//!
//! ```text
//! rgb_t   = A_v·[q + z_v,     u_t] + ε
//! flow_t  = A_f·[q + z_f,     r_t] + ε
//! audio_t = A_a·[w·q + z_a,   r_t] + ε
//! ```

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    normalize_score, write_container, FeatureBundle, FeatureDims, Manifest, Split, VideoEntry,
};
use crate::error::{PamfnError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub n_videos: usize,
    /// Videos assigned to the test split (the last `n_test` generated).
    pub n_test: usize,
    /// Inclusive range of sequence lengths.
    pub t_range: [usize; 2],
    pub dims: FeatureDims,
    pub cross_modal_weight: f64,
    pub noise_scale: f64,
    #[serde(default = "default_view_noise")]
    pub view_noise: f64,
    #[serde(default = "default_ceiling")]
    pub score_ceiling: f64,
    pub seed: u64,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_view_noise() -> f64 {
    0.15
}

fn default_ceiling() -> f64 {
    25.0
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: default_name(),
            n_videos: 24,
            n_test: 8,
            t_range: [24, 40],
            dims: FeatureDims {
                rgb: 32,
                flow: 48,
                audio: 32,
            },
            cross_modal_weight: 0.8,
            noise_scale: 0.5,
            view_noise: default_view_noise(),
            score_ceiling: default_ceiling(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PamfnError::Validation(msg));
        if self.t_range[0] < 4 || self.t_range[0] > self.t_range[1] {
            return bad(format!("t_range {:?} must satisfy 4 <= min <= max", self.t_range));
        }
        self.dims.validate()?;
        if !(0.0..=1.0).contains(&self.cross_modal_weight) {
            return bad(format!("cross_modal_weight {} is outside [0, 1]", self.cross_modal_weight));
        }
        if !(self.noise_scale > 0.0) {
            return bad(format!("noise_scale must be positive, got {}", self.noise_scale));
        }
        if !(self.view_noise >= 0.0) {
            return bad(format!("view_noise must be non-negative, got {}", self.view_noise));
        }
        if self.n_test > self.n_videos {
            return bad(format!("n_test {} exceeds n_videos {}", self.n_test, self.n_videos));
        }
        if !(self.score_ceiling > 0.0) {
            return bad("score_ceiling must be positive".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn projection(rng: &mut ChaCha8Rng, dim: usize) -> Matrix {
    let data = (0..2 * dim).map(|_| gaussian(rng)).collect();
    Matrix::from_vec(2, dim, data).unwrap()
}

/// Builds the manifest and the in-memory bundles. Feature values are rounded
/// to `f32` so that they equal what a written container reads back.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Manifest, Vec<FeatureBundle>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proj_v = projection(&mut rng, spec.dims.rgb);
    let proj_f = projection(&mut rng, spec.dims.flow);
    let proj_a = projection(&mut rng, spec.dims.audio);
    let width = (spec.n_videos.max(1) - 1).to_string().len().max(3);

    let mut entries = Vec::with_capacity(spec.n_videos);
    let mut bundles = Vec::with_capacity(spec.n_videos);
    for i in 0..spec.n_videos {
        let id = format!("v{i:0width$}");
        let q: f64 = rng.gen();
        let t = rng.gen_range(spec.t_range[0]..=spec.t_range[1]);
        let freq = rng.gen_range(0.05..0.25);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let views = [
            q + spec.view_noise * gaussian(&mut rng),
            q + spec.view_noise * gaussian(&mut rng),
            spec.cross_modal_weight * q + spec.view_noise * gaussian(&mut rng),
        ];

        let mut emit = |proj: &Matrix, view: f64, second: &dyn Fn(usize, &mut ChaCha8Rng) -> f64| {
            let dim = proj.cols();
            let mut m = Matrix::zeros(t, dim);
            for step in 0..t {
                let s = second(step, &mut rng);
                for c in 0..dim {
                    let v = proj.get(0, c) * view + proj.get(1, c) * s + spec.noise_scale * gaussian(&mut rng);
                    m.set(step, c, v as f32 as f64);
                }
            }
            m
        };
        let rhythm = |step: usize, _: &mut ChaCha8Rng| (std::f64::consts::TAU * freq * step as f64 + phase).sin();
        let rgb = emit(&proj_v, views[0], &|_, r| gaussian(r));
        let flow = emit(&proj_f, views[1], &rhythm);
        let audio = emit(&proj_a, views[2], &rhythm);

        let raw_score = q * spec.score_ceiling;
        let split = if i + spec.n_test >= spec.n_videos {
            Split::Test
        } else {
            Split::Train
        };
        let label = normalize_score(raw_score, spec.score_ceiling)?;
        bundles.push(FeatureBundle::new(id.clone(), rgb, flow, audio, label)?);
        entries.push(VideoEntry {
            path: format!("features/{id}.pamf"),
            id,
            raw_score,
            split,
        });
    }
    let manifest = Manifest::new(spec.name.clone(), spec.score_ceiling, spec.dims, entries);
    manifest.validate()?;
    Ok((manifest, bundles))
}

/// Writes `manifest.toml`, `labels.csv` and `features/*.pamf` under `out_dir`.
pub fn write_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    let (mut manifest, bundles) = generate_synthetic(spec)?;
    let features = out_dir.join("features");
    std::fs::create_dir_all(&features).map_err(|e| PamfnError::io(&features, e))?;
    for b in &bundles {
        write_container(&features.join(format!("{}.pamf", b.id)), &b.rgb, &b.flow, &b.audio)?;
    }
    manifest.save(&out_dir.join("manifest.toml"))?;
    manifest.write_labels_csv(&out_dir.join("labels.csv"))?;
    manifest.set_root(out_dir);
    Ok(manifest)
}
