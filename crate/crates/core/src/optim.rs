//! Named parameter sets, first-order optimizers, and the checkpoint format.
//!
//! Parameters are keyed by name in a sorted map so that every iteration order
//! (binding, updates, serialization) is deterministic. Checkpoints are a
//! single JSON document with lexicographically sorted keys, so two runs that
//! agree produce byte-identical, diffable files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// All learnable tensors of a model, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    frozen: BTreeSet<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), Param { value, grad: None });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::State(format!("unknown parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::State(format!("unknown parameter '{}'", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// A frozen parameter binds as a constant: no gradient, no update.
    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(name.to_string());
        } else {
            self.frozen.remove(name);
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Record every parameter as a tape leaf for one forward/backward pass.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            let requires = !self.frozen.contains(name);
            vars.insert(name.clone(), tape.leaf(p.value.clone(), requires));
        }
        BoundParams { vars }
    }

    /// Bind every parameter as a constant (inference pass).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            vars.insert(name.clone(), tape.constant(p.value.clone()));
        }
        BoundParams { vars }
    }

    /// Pull gradients off the tape into each non-frozen parameter.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundParams<'_>) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            if self.frozen.contains(name) {
                p.grad = None;
                continue;
            }
            let var = bound.vars.get(name).ok_or_else(|| {
                Error::State(format!("parameter '{}' was not bound", name))
            })?;
            p.grad = tape.grad(*var);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Total squared distance to another set with identical names/shapes.
    pub fn l2_distance(&self, other: &ParamSet) -> f64 {
        let mut s = 0.0;
        for (name, p) in &self.params {
            if let Some(q) = other.params.get(name) {
                for (a, b) in p.value.data().iter().zip(q.value.data()) {
                    s += (a - b) * (a - b);
                }
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc {
            kind: "param-checkpoint".to_string(),
            version: 1,
            params: self
                .params
                .iter()
                .map(|(name, p)| {
                    (
                        name.clone(),
                        ParamRecord {
                            shape: p.value.shape().to_vec(),
                            data: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::State(format!("checkpoint serialization: {}", e)))?;
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: CheckpointDoc = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: 0, msg: format!("checkpoint: {}", e) })?;
        if doc.kind != "param-checkpoint" {
            return Err(Error::Schema(format!("unexpected checkpoint kind '{}'", doc.kind)));
        }
        let mut set = ParamSet::new();
        for (name, rec) in doc.params {
            set.insert(&name, Tensor::new(rec.shape, rec.data)?);
        }
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    kind: String,
    version: u32,
    // BTreeMap keeps keys lexicographically sorted in the output.
    params: BTreeMap<String, ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Tape leaves for one step, keyed by parameter name.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("unbound parameter '{}'", name)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD or Adam with optional L2 weight decay folded into the gradient.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptKind,
    lr: f64,
    weight_decay: f64,
    step_count: u64,
    slots: BTreeMap<String, AdamSlot>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        Optimizer { kind, lr, weight_decay: 0.0, step_count: 0, slots: BTreeMap::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every non-frozen parameter.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let frozen = params.frozen.clone();
        for (name, p) in params.params.iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::State(format!("parameter '{}' has no gradient", name))
            })?;
            if grad.shape() != p.value.shape() {
                return Err(Error::State(format!(
                    "gradient shape {:?} does not match parameter '{}' {:?}",
                    grad.shape(),
                    name,
                    p.value.shape()
                )));
            }
            match self.kind {
                OptKind::Sgd => {
                    let wd = self.weight_decay;
                    let lr = self.lr;
                    let value = p.value.data_mut();
                    for (v, g) in value.iter_mut().zip(grad.data()) {
                        *v -= lr * (g + wd * *v);
                    }
                }
                OptKind::Adam => {
                    let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                        m: vec![0.0; grad.numel()],
                        v: vec![0.0; grad.numel()],
                    });
                    if slot.m.len() != grad.numel() {
                        return Err(Error::State(format!(
                            "optimizer moment size {} does not match parameter '{}' ({})",
                            slot.m.len(),
                            name,
                            grad.numel()
                        )));
                    }
                    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                    let wd = self.weight_decay;
                    let lr = self.lr;
                    let value = p.value.data_mut();
                    for i in 0..grad.numel() {
                        let g = grad.data()[i] + wd * value[i];
                        slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
                        slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = slot.m[i] / bc1;
                        let v_hat = slot.v[i] / bc2;
                        value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::from_vec(vec![v]));
        p
    }

    #[test]
    fn sgd_step_is_p_minus_lr_g() {
        let mut params = single_param(1.0);
        params.params.get_mut("p").unwrap().grad = Some(Tensor::from_vec(vec![2.0]));
        let mut opt = Optimizer::new(OptKind::Sgd, 0.1);
        opt.step(&mut params).unwrap();
        assert!((params.get("p").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With g=1 everywhere, bias correction makes |update| = lr exactly
        // up to the epsilon term.
        let mut params = single_param(0.0);
        params.params.get_mut("p").unwrap().grad = Some(Tensor::from_vec(vec![1.0]));
        let mut opt = Optimizer::new(OptKind::Adam, 0.05);
        opt.step(&mut params).unwrap();
        let upd = params.get("p").unwrap().data()[0].abs();
        assert!((upd - 0.05).abs() < 1e-6, "got {}", upd);
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut params = single_param(1.0);
        let mut opt = Optimizer::new(OptKind::Sgd, 0.1);
        assert!(matches!(opt.step(&mut params), Err(Error::State(_))));
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = (p-3)^2, gradient 2(p-3); with lr=0.1 the error contracts by
        // 0.8 per step, so 50 steps from p=0 land within 0.8^50 * 3 < 1e-3.
        let mut params = single_param(0.0);
        let mut opt = Optimizer::new(OptKind::Sgd, 0.1);
        for _ in 0..50 {
            let p = params.get("p").unwrap().data()[0];
            params.params.get_mut("p").unwrap().grad = Some(Tensor::from_vec(vec![2.0 * (p - 3.0)]));
            opt.step(&mut params).unwrap();
        }
        let p = params.get("p").unwrap().data()[0];
        assert!((p - 3.0).abs() < 1e-3, "p = {}", p);
        // closed-form check: p_k = 3 - 3*0.8^k
        let expect = 3.0 - 3.0 * 0.8f64.powi(50);
        assert!((p - expect).abs() < 1e-12);
    }

    #[test]
    fn frozen_param_skipped_by_optimizer() {
        let mut params = single_param(1.0);
        params.set_frozen("p", true);
        let mut opt = Optimizer::new(OptKind::Sgd, 0.1);
        opt.step(&mut params).unwrap();
        assert_eq!(params.get("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_and_sorted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut params = ParamSet::new();
        params.insert("zeta", Tensor::from_vec(vec![0.1, -0.25]));
        params.insert("alpha", Tensor::new(vec![2, 1], vec![1.5, 2.5]).unwrap());
        params.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let alpha_pos = text.find("\"alpha\"").unwrap();
        let zeta_pos = text.find("\"zeta\"").unwrap();
        assert!(alpha_pos < zeta_pos, "keys not sorted");
        let loaded = ParamSet::load(&path).unwrap();
        assert_eq!(loaded.get("zeta").unwrap(), params.get("zeta").unwrap());
        assert_eq!(loaded.get("alpha").unwrap(), params.get("alpha").unwrap());
    }
}
