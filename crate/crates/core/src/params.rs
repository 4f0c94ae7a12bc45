//! Named parameter store and initialization helpers.
//!
//! Parameters live in a flat name -> tensor map (sorted iteration order, which
//! is also the checkpoint order). Model modules address their parameters by
//! namespace: `blueprint_encoder.*`, `prompt_encoder.*`, `unet.*`,
//! `autoencoder.*`.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{Rng, Tape, Var};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate parameter {name}");
        self.map.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.map
    }

    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { map }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Register every parameter on a tape and return the name -> Var map.
    pub fn register(&self, tape: &mut Tape<T>) -> VarMap {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.map {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        VarMap { vars }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Name -> tape variable lookup for one forward pass.
pub struct VarMap {
    vars: BTreeMap<String, Var>,
}

impl VarMap {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter variable {name}")))
    }

    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        VarMap { vars }
    }
}

/// He-normal initialization for a conv weight [cout, cin, kh, kw].
pub fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) {
    let fan_in = (cin * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let w = Tensor::from_fn(&[cout, cin, kh, kw], |_| T::from_f64(rng.normal() * std));
    store.insert(format!("{name}.weight"), w);
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

/// Zero-initialized conv; the control-branch trick that keeps a new pathway
/// silent until training moves it.
pub fn init_conv_zero<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) {
    store.insert(
        format!("{name}.weight"),
        Tensor::zeros(&[cout, cin, kh, kw]),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

/// Transposed-conv weight [cin, cout, kh, kw].
pub fn init_conv_transpose<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) {
    let fan_in = (cin * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let w = Tensor::from_fn(&[cin, cout, kh, kw], |_| T::from_f64(rng.normal() * std));
    store.insert(format!("{name}.weight"), w);
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

/// Linear weight stored [d_in, d_out] (row-vector convention: y = x W + b).
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) {
    let std = (2.0 / d_in as f64).sqrt();
    let w = Tensor::from_fn(&[d_in, d_out], |_| T::from_f64(rng.normal() * std));
    store.insert(format!("{name}.weight"), w);
    store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
}

pub fn init_linear_zero<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    d_in: usize,
    d_out: usize,
) {
    store.insert(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
}

/// Norm scale/shift pair: gamma = 1, beta = 0.
pub fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
}

/// y = x W + b on the tape for x [n, d_in].
pub fn linear_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = vars.get(&format!("{name}.weight"))?;
    let b = vars.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_broadcast(y, b)
}

pub fn conv_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = vars.get(&format!("{name}.weight"))?;
    let b = vars.get(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

pub fn conv_transpose_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = vars.get(&format!("{name}.weight"))?;
    let b = vars.get(&format!("{name}.bias"))?;
    tape.conv_transpose2d(x, w, Some(b), stride, pad)
}

pub fn group_norm_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    name: &str,
    x: Var,
    groups: usize,
) -> Result<Var> {
    let g = vars.get(&format!("{name}.gamma"))?;
    let b = vars.get(&format!("{name}.beta"))?;
    tape.group_norm(x, g, b, groups)
}

pub fn layer_norm_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    name: &str,
    x: Var,
) -> Result<Var> {
    let g = vars.get(&format!("{name}.gamma"))?;
    let b = vars.get(&format!("{name}.beta"))?;
    tape.layer_norm(x, g, b)
}
