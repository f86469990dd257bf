//! Self/cross mixing strategies.
//!
//! Each ablation mode is a [`GateMixer`] registered under its CLI name; a
//! model resolves its mixer from the configured name at construction.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::{Arc, OnceLock};

use crate::attention::kernels::{sigmoid, HeadLayout};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};

/// Per-head gate logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub lambdas: Vec<f64>,
    pub frozen: bool,
}

impl GateState {
    pub fn new(heads: usize, init: f64) -> Self {
        Self {
            lambdas: vec![init; heads],
            frozen: false,
        }
    }

    /// Gate pinned at `λ = 0`, which weights both branches equally.
    pub fn frozen(heads: usize) -> Self {
        Self {
            lambdas: vec![0.0; heads],
            frozen: true,
        }
    }

    /// `(self weight, cross weight) = (1 − σ(λ_h), σ(λ_h))`.
    pub fn weights(&self, head: usize) -> (f64, f64) {
        let s = sigmoid(self.lambdas[head]);
        (1.0 - s, s)
    }
}

/// Strategy combining the self- and cross-attention branches of each head.
pub trait GateMixer: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn uses_self(&self) -> bool {
        true
    }

    fn uses_cross(&self) -> bool {
        true
    }

    /// Whether `λ` receives gradients under this strategy.
    fn lambda_trainable(&self) -> bool {
        false
    }

    /// Cross-branch weight for a head given its gate logit.
    fn cross_weight(&self, lambda: f64) -> f64;

    /// Mixes branch tensors on the tape. Branches this strategy does not use
    /// may be passed as `None`.
    fn mix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        self_branch: Option<Var>,
        cross_branch: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var>
    where
        Self: Sized;
}

/// Object-safe façade over [`GateMixer::mix`] for the two scalar types.
pub trait DynGateMixer: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn uses_self(&self) -> bool;
    fn uses_cross(&self) -> bool;
    fn lambda_trainable(&self) -> bool;
    fn cross_weight(&self, lambda: f64) -> f64;
    fn mix_f32(
        &self,
        tape: &mut Tape<f32>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var>;
    fn mix_f64(
        &self,
        tape: &mut Tape<f64>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var>;
}

impl<M: GateMixer> DynGateMixer for M {
    fn name(&self) -> &'static str {
        GateMixer::name(self)
    }
    fn uses_self(&self) -> bool {
        GateMixer::uses_self(self)
    }
    fn uses_cross(&self) -> bool {
        GateMixer::uses_cross(self)
    }
    fn lambda_trainable(&self) -> bool {
        GateMixer::lambda_trainable(self)
    }
    fn cross_weight(&self, lambda: f64) -> f64 {
        GateMixer::cross_weight(self, lambda)
    }
    fn mix_f32(
        &self,
        tape: &mut Tape<f32>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var> {
        self.mix(tape, s, c, lambda, layout)
    }
    fn mix_f64(
        &self,
        tape: &mut Tape<f64>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var> {
        self.mix(tape, s, c, lambda, layout)
    }
}

/// Dispatches [`DynGateMixer`] on the tape's scalar type.
pub trait MixOnTape: Scalar {
    fn mix(
        mixer: &dyn DynGateMixer,
        tape: &mut Tape<Self>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var>;
}

impl MixOnTape for f32 {
    fn mix(
        mixer: &dyn DynGateMixer,
        tape: &mut Tape<f32>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var> {
        mixer.mix_f32(tape, s, c, lambda, layout)
    }
}

impl MixOnTape for f64 {
    fn mix(
        mixer: &dyn DynGateMixer,
        tape: &mut Tape<f64>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var> {
        mixer.mix_f64(tape, s, c, lambda, layout)
    }
}

fn branch(v: Option<Var>, which: &str, mode: &str) -> Result<Var> {
    v.ok_or_else(|| Error::arg(format!("{mode} gate requires the {which} branch")))
}

/// Learnable `λ_h` squashed through a sigmoid.
#[derive(Debug, Default)]
pub struct LearnedGate;

impl GateMixer for LearnedGate {
    fn name(&self) -> &'static str {
        "full"
    }

    fn lambda_trainable(&self) -> bool {
        true
    }

    fn cross_weight(&self, lambda: f64) -> f64 {
        sigmoid(lambda)
    }

    fn mix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var> {
        let (s, c) = (branch(s, "self", "full")?, branch(c, "cross", "full")?);
        tape.gate_mix(s, c, lambda, layout)
    }
}

/// Constant cross weight, shared by the frozen and single-branch ablations.
#[derive(Debug)]
pub struct FixedGate {
    name: &'static str,
    weight: f64,
}

impl FixedGate {
    /// `λ` frozen at zero: equal attention to both branches.
    pub fn frozen() -> Self {
        Self {
            name: "frozen-gate",
            weight: 0.5,
        }
    }

    pub fn self_only() -> Self {
        Self {
            name: "self-only",
            weight: 0.0,
        }
    }

    pub fn cross_only() -> Self {
        Self {
            name: "cross-only",
            weight: 1.0,
        }
    }
}

impl GateMixer for FixedGate {
    fn name(&self) -> &'static str {
        self.name
    }

    fn uses_self(&self) -> bool {
        self.weight < 1.0
    }

    fn uses_cross(&self) -> bool {
        self.weight > 0.0
    }

    fn cross_weight(&self, _lambda: f64) -> f64 {
        self.weight
    }

    fn mix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        s: Option<Var>,
        c: Option<Var>,
        lambda: Var,
        layout: HeadLayout,
    ) -> Result<Var> {
        if self.weight == 0.0 {
            return branch(s, "self", self.name);
        }
        if self.weight == 1.0 {
            return branch(c, "cross", self.name);
        }
        let (s, c) = (branch(s, "self", self.name)?, branch(c, "cross", self.name)?);
        let heads = tape.value(lambda).len();
        tape.fixed_mix(s, c, &vec![self.weight; heads], layout)
    }
}

/// Name → mixer table.
#[derive(Debug, Default, Clone)]
pub struct GateRegistry {
    entries: BTreeMap<String, Arc<dyn DynGateMixer>>,
}

impl GateRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding the four ablation modes.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(LearnedGate));
        r.register(Arc::new(FixedGate::frozen()));
        r.register(Arc::new(FixedGate::self_only()));
        r.register(Arc::new(FixedGate::cross_only()));
        r
    }

    pub fn register(&mut self, mixer: Arc<dyn DynGateMixer>) {
        self.entries.insert(mixer.name().to_string(), mixer);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn DynGateMixer>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownName {
            kind: "ablation mode",
            name: name.to_string(),
            expected: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// Process-wide registry of the built-in modes.
pub fn builtin_gates() -> &'static GateRegistry {
    static REGISTRY: OnceLock<GateRegistry> = OnceLock::new();
    REGISTRY.get_or_init(GateRegistry::with_builtins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_resolves_builtins() {
        let r = builtin_gates();
        assert_eq!(r.names(), vec!["cross-only", "frozen-gate", "full", "self-only"]);
        assert!(r.get("full").unwrap().lambda_trainable());
        assert_eq!(r.get("frozen-gate").unwrap().cross_weight(3.0), 0.5);
        assert!(!r.get("self-only").unwrap().uses_cross());
        assert!(!r.get("cross-only").unwrap().uses_self());
        assert!(matches!(r.get("half"), Err(Error::UnknownName { .. })));
    }

    #[test]
    fn gate_weights_are_convex() {
        let g = GateState::new(1, 1.0);
        let (a, b) = g.weights(0);
        assert!((a - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((b - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(a + b, 1.0);
        let f = GateState::frozen(2);
        assert_eq!(f.weights(1), (0.5, 0.5));
    }
}
