//! Named parameter tensors and their initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PamfnError, Result};
use crate::tensor::Matrix;

/// Trainable parameters plus non-trainable buffers (normalization running
/// statistics), both keyed by dotted path names such as `rgb.stage1.conv1.w`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    buffers: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Matrix) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Matrix {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not initialized"))
    }

    pub fn buffer(&self, name: &str) -> Option<&Matrix> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.buffers.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Copies every parameter and buffer under `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut copied = 0;
        for (k, v) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), v.clone());
            copied += 1;
        }
        for (k, v) in other.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.buffers.insert(k.clone(), v.clone());
        }
        copied
    }

    /// Verifies that `self` holds exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &ParamStore) -> Result<()> {
        for (name, m) in &reference.params {
            match self.params.get(name) {
                None => {
                    return Err(PamfnError::Config(format!("parameter `{name}` is missing")));
                }
                Some(found) if found.shape() != m.shape() => {
                    return Err(PamfnError::Config(format!(
                        "parameter `{name}` has shape {:?}, the configuration expects {:?}",
                        found.shape(),
                        m.shape()
                    )));
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(PamfnError::Config(format!(
                "parameter `{extra}` is not part of the configured model"
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Matrix::is_finite)
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization for a `fan_in × fan_out` weight.
pub fn init_weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("init shape")
}

pub fn init_bias(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::row_vector(
        &(0..fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect::<Vec<_>>(),
    )
}

/// Registers `{prefix}.w` (`fan_in × fan_out`) and `{prefix}.b` (`1 × fan_out`).
pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), init_weight(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.b"), init_bias(rng, fan_in, fan_out));
}
