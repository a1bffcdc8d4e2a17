//! Named parameter sets, their on-disk checkpoint container, and Adam.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Ordered named weights. Values are shared so tapes can bind them without
/// copying.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Matrix>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, value: Matrix) -> usize {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn push_shared(&mut self, name: &str, value: Arc<Matrix>) -> usize {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Gaussian init scaled by `gain / sqrt(rows)`.
    pub fn push_init(&mut self, name: &str, rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> usize {
        let std = gain / (rows as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.push(name, m)
    }

    pub fn push_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.push(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Arc<Matrix> {
        &self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Arc<Matrix>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn set(&mut self, idx: usize, value: Matrix) {
        assert_eq!(self.values[idx].shape(), value.shape(), "parameter shape changed");
        self.values[idx] = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Matrix>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.iter() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn to_map(&self) -> BTreeMap<String, Matrix> {
        self.iter().map(|(n, m)| (n.to_string(), (**m).clone())).collect()
    }

    /// Rebuilds a set in the order given by `names`, checking shapes against
    /// `template`.
    fn from_map(map: &BTreeMap<String, Matrix>, template: &ParamSet) -> std::result::Result<Self, String> {
        let mut out = ParamSet::new();
        for (name, expected) in template.iter() {
            let m = map.get(name).ok_or_else(|| format!("missing parameter {name}"))?;
            if m.shape() != expected.shape() {
                return Err(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    expected.shape()
                ));
            }
            out.push(name, m.clone());
        }
        if map.len() != template.len() {
            return Err("checkpoint has unexpected extra parameters".into());
        }
        Ok(out)
    }
}

pub const CHECKPOINT_FORMAT: &str = "vlminv-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing checkpoint: kind tag, model config, seed, weights and
/// free-form metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: C,
    pub params: BTreeMap<String, Matrix>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn new(kind: &str, seed: u64, config: C, params: &ParamSet, meta: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            seed,
            config,
            params: params.to_map(),
            meta,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        crate::io::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ckpt: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("unsupported format {} v{}", ckpt.format, ckpt.version),
            });
        }
        if ckpt.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected a {kind} checkpoint, found {}", ckpt.kind),
            });
        }
        Ok(ckpt)
    }

    pub fn param_set(&self, template: &ParamSet, path: &Path) -> Result<ParamSet> {
        ParamSet::from_map(&self.params, template).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = |p: &Arc<Matrix>| Matrix::zeros(p.rows(), p.cols());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.values.iter().map(zeros).collect(),
            v: params.values.iter().map(zeros).collect(),
        }
    }

    /// Applies one update. `grads[i]` pairs with parameter `i`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let mut p = (*params.values[i]).clone();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (&gk, pk)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *pk -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            params.values[i] = Arc::new(p);
        }
    }
}
