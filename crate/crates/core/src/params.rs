//! Named, deterministically initialized trainable parameters.
//!
//! Every parameter draws its initial values from a ChaCha8 stream seeded by
//! `(store seed, parameter name)`, so initialization does not depend on the
//! order in which layers are constructed and two stores built with the same
//! seed and names hold bit-identical values.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    /// Fixed-frequency sine/cosine table over a 3D grid, shape `(N, dim)`.
    SinCos3d { grid: [usize; 3] },
}

/// Row `i` encodes the grid cell `(z, y, x)` in row-major order. Each axis
/// gets `dim / 3` channels (rounded down to even) of sin/cos pairs at
/// geometric frequencies; leftover channels are zero.
pub fn sincos_3d(grid: [usize; 3], dim: usize) -> Vec<f64> {
    let per_axis = (dim / 3) & !1;
    let freqs = per_axis / 2;
    let n: usize = grid.iter().product();
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        let coords = [i / (grid[1] * grid[2]), (i / grid[2]) % grid[1], i % grid[2]];
        for (a, &c) in coords.iter().enumerate() {
            for f in 0..freqs {
                let omega = 1.0 / 100f64.powf(f as f64 / freqs.max(1) as f64);
                let base = i * dim + a * per_axis + 2 * f;
                out[base] = (c as f64 * omega).sin();
                out[base + 1] = (c as f64 * omega).cos();
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Returns the tensor registered under `name`, creating it on first use.
    /// Requesting an existing name with a different shape is an error.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                let normal = Normal::new(0.0, std)
                    .map_err(|e| Error::Parameter(format!("bad init std {std}: {e}")))?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::SinCos3d { grid } => {
                let rows: usize = grid.iter().product();
                if shape.len() != 2 || shape[0] != rows {
                    return Err(Error::Config(format!(
                        "sin/cos table for grid {grid:?} needs shape ({rows}, dim), got {shape:?}"
                    )));
                }
                sincos_3d(grid, shape[1])
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn name_set(&self) -> BTreeSet<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables whose names start with any of `prefixes`.
    pub fn vars_matching(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// `(name, var)` pairs whose names start with any of `prefixes`.
    pub fn named_vars(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Flat f64 copies of every parameter, for freeze and determinism checks.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
                Ok((k.clone(), flat))
            })
            .collect()
    }

    /// Named tensors as stored (shared storage with the live parameters).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter of this store from `values`. Every name in
    /// the store must be present; extra names are ignored.
    pub fn load_from(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.vars.keys() {
            if !values.contains_key(name) {
                return Err(Error::Compatibility(format!("missing parameter {name}")));
            }
        }
        for (name, var) in &self.vars {
            let value = &values[name];
            if var.dims() != value.dims() {
                return Err(Error::Compatibility(format!(
                    "parameter {name}: stored shape {:?}, model expects {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
        }
        for (name, value) in values {
            if self.vars.contains_key(name) {
                self.set(name, value)?;
            }
        }
        Ok(())
    }

    /// Copies values of identically named parameters from `other`.
    pub fn copy_matching(&self, other: &ParamStore, rename: impl Fn(&str) -> String) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &other.vars {
            let target = rename(name);
            if self.vars.contains_key(&target) {
                self.set(&target, var.as_tensor())?;
                n += 1;
            }
        }
        Ok(n)
    }
}
