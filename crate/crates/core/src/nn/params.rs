use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tape::{Mat, Tape, Var};
use crate::error::{M2dError, Result};

/// Named parameter matrices in a fixed insertion order. Vectors are stored
/// as `1 × n` matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: IndexMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn as_map(&self) -> &IndexMap<String, Mat> {
        &self.params
    }

    pub fn into_map(self) -> IndexMap<String, Mat> {
        self.params
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Mat {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Parameters whose name starts with `prefix`, keeping full names.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Errors unless `other` has the same names and shapes, in the same order.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(M2dError::Consistency(format!(
                "parameter count differs: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, am), (b, bm)) in self.params.iter().zip(other.params.iter()) {
            if a != b || am.dim() != bm.dim() {
                return Err(M2dError::Consistency(format!(
                    "parameter `{a}` {:?} does not match `{b}` {:?}",
                    am.dim(),
                    bm.dim()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, m) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter names mapped to their nodes on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Normal samples with the given std, redrawn until within two std.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("valid std");
    Mat::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

pub const INIT_STD: f64 = 0.02;

/// Adds `{prefix}weight` (`fan_in × fan_out`) and `{prefix}bias`.
pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert(format!("{prefix}weight"), trunc_normal(rng, fan_in, fan_out, INIT_STD));
    store.insert(format!("{prefix}bias"), Mat::zeros((1, fan_out)));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}weight"), Mat::ones((1, dim)));
    store.insert(format!("{prefix}bias"), Mat::zeros((1, dim)));
}

/// Whether weight decay applies: matrices only, never biases, norms or tokens.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !name.contains("norm")
}
