//! Feature ingestion: manifests, per-video feature containers, label
//! normalization, training windows, and the synthetic dataset generator.

mod container;
mod manifest;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use container::{read_container, write_container, CONTAINER_MAGIC};
pub use manifest::{Dataset, Manifest, Split, VideoEntry};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticSpec};

use crate::error::{PamfnError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Flow,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Audio => "audio",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = PamfnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "flow" => Ok(Modality::Flow),
            "audio" => Ok(Modality::Audio),
            other => Err(PamfnError::Validation(format!(
                "unknown modality `{other}` (expected rgb, flow or audio)"
            ))),
        }
    }
}

/// Raw per-segment feature widths of the three backbones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub rgb: usize,
    pub flow: usize,
    pub audio: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            rgb: 768,
            flow: 1024,
            audio: 768,
        }
    }
}

impl FeatureDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Flow => self.flow,
            Modality::Audio => self.audio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb == 0 || self.flow == 0 || self.audio == 0 {
            return Err(PamfnError::Validation(
                "feature dims must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Time-aligned segment features of one video with its normalized label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub id: String,
    pub rgb: Matrix,
    pub flow: Matrix,
    pub audio: Matrix,
    pub label: f64,
    /// Number of real (non-padding) segments.
    pub valid_len: usize,
}

impl FeatureBundle {
    /// Checks alignment, finiteness and the label range.
    pub fn new(id: impl Into<String>, rgb: Matrix, flow: Matrix, audio: Matrix, label: f64) -> Result<Self> {
        let valid_len = rgb.rows();
        let bundle = Self {
            id: id.into(),
            rgb,
            flow,
            audio,
            label,
            valid_len,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn len(&self) -> usize {
        self.rgb.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
            Modality::Audio => &self.audio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (r, f, a) = (self.rgb.rows(), self.flow.rows(), self.audio.rows());
        if r != f || r != a {
            return Err(PamfnError::Alignment {
                rgb: r,
                flow: f,
                audio: a,
            });
        }
        if r == 0 {
            return Err(PamfnError::Validation(format!("video `{}` has no segments", self.id)));
        }
        if self.valid_len > r {
            return Err(PamfnError::Validation(format!(
                "valid_len {} exceeds sequence length {r}",
                self.valid_len
            )));
        }
        for m in Modality::ALL {
            if !self.features(m).is_finite() {
                return Err(PamfnError::NonFinite(format!("{m} features of `{}`", self.id)));
            }
        }
        if !(0.0..=1.0).contains(&self.label) {
            return Err(PamfnError::Validation(format!(
                "label {} of `{}` is outside [0, 1]",
                self.label, self.id
            )));
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: &FeatureDims) -> Result<()> {
        for m in Modality::ALL {
            let found = self.features(m).cols();
            if found != dims.get(m) {
                return Err(PamfnError::DimensionMismatch {
                    modality: m.name().into(),
                    expected: dims.get(m),
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Maps a raw judge score into `[0, 1]` by the dataset's score ceiling.
pub fn normalize_score(raw: f64, ceiling: f64) -> Result<f64> {
    if !(ceiling > 0.0 && ceiling.is_finite()) {
        return Err(PamfnError::Validation(format!(
            "score ceiling must be positive, got {ceiling}"
        )));
    }
    if !(0.0..=ceiling).contains(&raw) {
        return Err(PamfnError::Validation(format!(
            "raw score {raw} is outside [0, {ceiling}]"
        )));
    }
    Ok(raw / ceiling)
}

/// Draws `window` consecutive segments at a uniform offset, or zero-pads a
/// shorter video up to `window` rows.
pub fn sample_window<R: Rng + ?Sized>(bundle: &FeatureBundle, window: usize, rng: &mut R) -> FeatureBundle {
    assert!(window >= 1, "window must be at least one segment");
    let t = bundle.len();
    if t >= window {
        let start = rng.gen_range(0..=t - window);
        FeatureBundle {
            id: bundle.id.clone(),
            rgb: bundle.rgb.slice_rows(start, window),
            flow: bundle.flow.slice_rows(start, window),
            audio: bundle.audio.slice_rows(start, window),
            label: bundle.label,
            valid_len: window,
        }
    } else {
        let pad = |m: &Matrix| {
            let mut out = Matrix::zeros(window, m.cols());
            out.data_mut()[..m.len()].copy_from_slice(m.data());
            out
        };
        FeatureBundle {
            id: bundle.id.clone(),
            rgb: pad(&bundle.rgb),
            flow: pad(&bundle.flow),
            audio: pad(&bundle.audio),
            label: bundle.label,
            valid_len: t,
        }
    }
}

/// Equal-length sequences stacked along rows, ready for a forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Matrix,
    pub flow: Matrix,
    pub audio: Matrix,
    pub seq_len: usize,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn from_bundles(bundles: &[FeatureBundle]) -> Result<Self> {
        let first = bundles
            .first()
            .ok_or_else(|| PamfnError::Validation("empty batch".into()))?;
        let seq_len = first.len();
        if let Some(b) = bundles.iter().find(|b| b.len() != seq_len) {
            return Err(PamfnError::Shape(format!(
                "batch mixes sequence lengths {seq_len} and {} (`{}`)",
                b.len(),
                b.id
            )));
        }
        let stack = |m: Modality| Matrix::stack_rows(&bundles.iter().map(|b| b.features(m)).collect::<Vec<_>>());
        Ok(Self {
            rgb: stack(Modality::Rgb)?,
            flow: stack(Modality::Flow)?,
            audio: stack(Modality::Audio)?,
            seq_len,
            labels: bundles.iter().map(|b| b.label).collect(),
        })
    }

    pub fn single(bundle: &FeatureBundle) -> Self {
        Self {
            rgb: bundle.rgb.clone(),
            flow: bundle.flow.clone(),
            audio: bundle.audio.clone(),
            seq_len: bundle.len(),
            labels: vec![bundle.label],
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
            Modality::Audio => &self.audio,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_bundle(t: usize) -> FeatureBundle {
        let ramp = |c: usize| {
            Matrix::from_vec(t, c, (0..t * c).map(|i| i as f64 + 1.0).collect()).unwrap()
        };
        FeatureBundle::new("v", ramp(2), ramp(3), ramp(2), 0.4).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_score(0.0, 25.0).unwrap(), 0.0);
        assert_eq!(normalize_score(25.0, 25.0).unwrap(), 1.0);
        assert!((normalize_score(17.3, 25.0).unwrap() - 0.692).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_out_of_range() {
        assert!(normalize_score(-0.1, 25.0).is_err());
        assert!(normalize_score(25.1, 25.0).is_err());
        assert!(normalize_score(1.0, 0.0).is_err());
        assert!(normalize_score(1.0, -3.0).is_err());
    }

    #[test]
    fn window_longer_video() {
        let b = ramp_bundle(130);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sample_window(&b, 70, &mut rng);
        assert_eq!(w.len(), 70);
        assert_eq!(w.valid_len, 70);
        // consecutive rows of the original
        let start = (w.rgb.get(0, 0) as usize - 1) / 2;
        assert_eq!(w.rgb, b.rgb.slice_rows(start, 70));
        assert_eq!(w.audio, b.audio.slice_rows(start, 70));
    }

    #[test]
    fn window_pads_short_video() {
        let b = ramp_bundle(40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sample_window(&b, 70, &mut rng);
        assert_eq!(w.len(), 70);
        assert_eq!(w.valid_len, 40);
        assert_eq!(w.flow.slice_rows(0, 40), b.flow);
        assert!(w.flow.slice_rows(40, 30).data().iter().all(|&x| x == 0.0));
        assert!(w.rgb.slice_rows(40, 30).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn window_exact_fit_is_identity() {
        let b = ramp_bundle(70);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_window(&b, 70, &mut rng), b);
    }

    #[test]
    fn bundle_rejects_misaligned_and_nan() {
        let m = |t| Matrix::zeros(t, 2);
        assert!(matches!(
            FeatureBundle::new("x", m(70), m(70), m(69), 0.5),
            Err(PamfnError::Alignment { .. })
        ));
        let mut bad = m(4);
        bad.set(2, 1, f64::NAN);
        assert!(matches!(
            FeatureBundle::new("x", m(4), bad, m(4), 0.5),
            Err(PamfnError::NonFinite(_))
        ));
        assert!(FeatureBundle::new("x", m(4), m(4), m(4), 1.5).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_monotone(a in 0.0f64..25.0, b in 0.0f64..25.0) {
            prop_assume!(a < b);
            prop_assert!(normalize_score(a, 25.0).unwrap() < normalize_score(b, 25.0).unwrap());
        }

        #[test]
        fn window_deterministic_under_seed(t in 1usize..90, w in 1usize..80, seed in any::<u64>()) {
            let b = ramp_bundle(t);
            let x = sample_window(&b, w, &mut ChaCha8Rng::seed_from_u64(seed));
            let y = sample_window(&b, w, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&x, &y);
            prop_assert_eq!(x.len(), w);
            prop_assert_eq!(x.valid_len, t.min(w));
        }
    }
}
