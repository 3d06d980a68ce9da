//! Rank correlation, Fisher-z averaging and evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, FeatureBundle, Modality};
use crate::error::{PamfnError, Result};
use crate::network::{check_batch, Model};

/// Correlations at exactly ±1 are pulled this far inside the interval before
/// Fisher averaging in reports.
pub const FISHER_CLAMP: f64 = 1e-7;

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(PamfnError::Validation(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(PamfnError::UndefinedCorrelation(format!(
            "need at least two pairs, got {}",
            x.len()
        )));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(PamfnError::NonFinite("correlation input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| PamfnError::UndefinedCorrelation("a series is constant".into()))
}

/// `tanh(mean(atanh ρ_i))`.
pub fn fisher_z_average(rhos: &[f64]) -> Result<f64> {
    if rhos.is_empty() {
        return Err(PamfnError::Validation("no correlations to average".into()));
    }
    if let Some(r) = rhos.iter().find(|r| !(r.abs() < 1.0)) {
        return Err(PamfnError::Validation(format!(
            "correlation {r} has no Fisher z-value (|ρ| must be < 1)"
        )));
    }
    let z = rhos.iter().map(|r| r.atanh()).sum::<f64>() / rhos.len() as f64;
    Ok(z.tanh())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub rho: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskResult>,
    pub fisher_avg: f64,
}

impl EvalReport {
    /// Averages per-task correlations, clamping perfect ones with a warning.
    pub fn assemble(per_task: Vec<TaskResult>) -> Result<Self> {
        let limit = 1.0 - FISHER_CLAMP;
        let rhos: Vec<f64> = per_task
            .iter()
            .map(|t| {
                if t.rho.abs() > limit {
                    log::warn!("task `{}` has ρ = {}; clamped to ±{limit} for averaging", t.task, t.rho);
                }
                t.rho.clamp(-limit, limit)
            })
            .collect();
        let fisher_avg = fisher_z_average(&rhos)?;
        Ok(Self { per_task, fisher_avg })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PamfnError::Validation(format!("report serialization: {e}")))
    }

    /// Rows of `task,n,rho,fisher_avg`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| PamfnError::Validation(format!("report serialization: {e}"));
        w.write_record(["task", "n", "rho", "fisher_avg"]).map_err(err)?;
        for t in &self.per_task {
            w.write_record([t.task.clone(), t.n.to_string(), t.rho.to_string(), self.fisher_avg.to_string()])
                .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| PamfnError::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, toml_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(toml_path, self.to_toml()?).map_err(|e| PamfnError::io(toml_path, e))?;
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| PamfnError::io(csv_path, e))
    }
}

/// Which score a prediction reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    Model,
    Branch(Modality),
}

/// Eval-mode predictions over whole videos (every segment, one video at a
/// time).
pub fn predict(model: &Model, videos: &[FeatureBundle], scorer: Scorer) -> Result<Vec<f64>> {
    videos
        .iter()
        .map(|v| {
            let batch = Batch::single(v);
            check_batch(&model.config, &batch)?;
            let out = match scorer {
                Scorer::Model => model.predict(&batch),
                Scorer::Branch(m) => model.predict_branch(m, &batch),
            };
            let p = out[0];
            if p.is_finite() {
                Ok(p)
            } else {
                Err(PamfnError::NonFinite(format!("prediction for `{}`", v.id)))
            }
        })
        .collect()
}

/// Spearman correlation of predictions against labels on one split.
pub fn evaluate_task(model: &Model, task: &str, videos: &[FeatureBundle], scorer: Scorer) -> Result<TaskResult> {
    if videos.is_empty() {
        return Err(PamfnError::Validation(format!("task `{task}` has no videos to evaluate")));
    }
    let preds = predict(model, videos, scorer)?;
    let labels: Vec<f64> = videos.iter().map(|v| v.label).collect();
    Ok(TaskResult {
        task: task.to_string(),
        rho: spearman(&preds, &labels)?,
        n: videos.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 5.0, 4.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(spearman(&[1.0], &[2.0]), Err(PamfnError::UndefinedCorrelation(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[3.0, 3.0]), Err(PamfnError::UndefinedCorrelation(_))));
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn fisher_examples() {
        assert!((fisher_z_average(&[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-12);
        assert!(fisher_z_average(&[1.0, 0.3]).is_err());
        assert!(fisher_z_average(&[]).is_err());
    }

    #[test]
    fn report_clamps_perfect_correlation() {
        let r = EvalReport::assemble(vec![
            TaskResult { task: "a".into(), rho: 1.0, n: 4 },
            TaskResult { task: "b".into(), rho: 0.5, n: 4 },
        ])
        .unwrap();
        assert!(r.fisher_avg.is_finite() && r.fisher_avg < 1.0);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("task,n,rho,fisher_avg\na,4,1,"));
        let back: EvalReport = toml::from_str(&r.to_toml().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn self_correlation_is_one(x in prop::collection::hash_set(-1000i32..1000, 2..30)) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            prop_assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        }

        #[test]
        fn fisher_of_constant_list(c in -0.999f64..0.999, n in 1usize..10) {
            prop_assert!((fisher_z_average(&vec![c; n]).unwrap() - c).abs() < 1e-12);
        }
    }
}
