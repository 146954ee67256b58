//! Forward- and reverse-mode differentiation over field primitives.
//!
//! A differentiable function is written once against the [`Backend`] trait
//! and can then be evaluated plainly ([`Eval`]), with tangents ([`JvpBackend`])
//! or on a [`Tape`] for reverse sweeps. Every backend computes primal values
//! with the same kernels, so differentiated runs reproduce plain runs bitwise.
//!
//! Inputs are named leaves ([`Leaves`]); a [`DiffSelector`] picks the leaves
//! that are differentiated, everything else is frozen.

mod dual;
mod eval;
pub(crate) mod kernels;
mod registry;
mod tape;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::grid::{Field, GridError, Metrics, Staggering};

pub use dual::{Dual, DualField, JvpBackend};
pub use eval::Eval;
pub use registry::{
    sqrt_reg, sqrt_reg_derivative, sqrt_reg_entry, BackwardRule, CustomGradientEntry,
    ForwardRule, GradientRegistry, RegistryHandle, UnaryPrimitive, DEFAULT_EPS_REG, EXP, SQRT,
    SQUARE,
};
pub use tape::{Tape, Var, DEFAULT_TAPE_BUDGET};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("unregistered primitive: {0}")]
    UnregisteredPrimitive(String),
    #[error("custom gradient for {0} is already registered")]
    DuplicateRegistration(String),
    #[error("{primitive} called outside its domain with {value}")]
    Domain { primitive: String, value: f64 },
    #[error("tape memory exhausted at step {step:?}: {bytes} bytes recorded, budget {budget}")]
    TapeExhausted {
        step: Option<usize>,
        bytes: usize,
        budget: usize,
    },
    #[error("missing leaf {0}")]
    MissingLeaf(String),
    #[error("leaf {name} has the wrong kind: expected {expected}")]
    LeafKind { name: String, expected: &'static str },
    #[error("tangent or cotangent for {0} does not match its primal")]
    TangentMismatch(String),
    #[error("expected {expected} outputs, got {found}")]
    OutputCount { expected: usize, found: usize },
    #[error("loss must be a single scalar output")]
    NonScalarLoss,
    #[error("non-finite values in {name} at step {step:?}")]
    NonFinite { name: String, step: Option<usize> },
    #[error("linear combination needs at least one term")]
    EmptyLinComb,
}

/// A primal value: scalar or field.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Field(Field),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(s) => Some(*s),
            Value::Field(_) => None,
        }
    }

    pub fn as_field(&self) -> Option<&Field> {
        match self {
            Value::Field(f) => Some(f),
            Value::Scalar(_) => None,
        }
    }

    /// Number of real entries.
    pub fn dim(&self) -> usize {
        match self {
            Value::Scalar(_) => 1,
            Value::Field(f) => f.len(),
        }
    }

    pub fn zeros_like(&self) -> Value {
        match self {
            Value::Scalar(_) => Value::Scalar(0.0),
            Value::Field(f) => Value::Field(f.map(|_| 0.0)),
        }
    }

    pub fn same_shape(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Scalar(_), Value::Scalar(_)) => true,
            (Value::Field(a), Value::Field(b)) => a.check_compatible(b).is_ok(),
            _ => false,
        }
    }

    pub fn bit_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => a.to_bits() == b.to_bits(),
            (Value::Field(a), Value::Field(b)) => a.bit_eq(b),
            _ => false,
        }
    }

    /// Inner product of two values of the same shape.
    pub fn dot(&self, other: &Value) -> Result<f64, AdError> {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => Ok(a * b),
            (Value::Field(a), Value::Field(b)) => Ok(a.dot(b)?),
            _ => Err(AdError::TangentMismatch("value".into())),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        match self {
            Value::Scalar(s) => out.push(*s),
            Value::Field(f) => out.extend_from_slice(f.data()),
        }
    }
}

/// Named inputs of a differentiable function, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Leaves {
    map: BTreeMap<String, Value>,
}

impl Leaves {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_scalar(mut self, name: &str, v: f64) -> Self {
        self.insert(name, Value::Scalar(v));
        self
    }

    pub fn with_field(mut self, name: &str, f: Field) -> Self {
        self.insert(name, Value::Field(f));
        self
    }

    pub fn insert(&mut self, name: &str, v: Value) {
        self.map.insert(name.to_string(), v);
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.map.get(name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64, AdError> {
        match self.map.get(name) {
            Some(Value::Scalar(s)) => Ok(*s),
            Some(_) => Err(AdError::LeafKind {
                name: name.into(),
                expected: "scalar",
            }),
            None => Err(AdError::MissingLeaf(name.into())),
        }
    }

    pub fn field(&self, name: &str) -> Result<&Field, AdError> {
        match self.map.get(name) {
            Some(Value::Field(f)) => Ok(f),
            Some(_) => Err(AdError::LeafKind {
                name: name.into(),
                expected: "field",
            }),
            None => Err(AdError::MissingLeaf(name.into())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.map.iter()
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

    pub fn bit_eq(&self, other: &Leaves) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Concatenation of the values of `names`, in the given order.
    pub fn flatten(&self, names: &[String]) -> Result<Vec<f64>, AdError> {
        let mut out = Vec::new();
        for n in names {
            self.map
                .get(n)
                .ok_or_else(|| AdError::MissingLeaf(n.clone()))?
                .flatten_into(&mut out);
        }
        Ok(out)
    }

    /// Inverse of [`Leaves::flatten`]: copies `flat` into leaves shaped like `self`.
    pub fn unflatten(&self, names: &[String], flat: &[f64]) -> Result<Leaves, AdError> {
        let mut out = Leaves::new();
        let mut pos = 0;
        for n in names {
            let v = self.map.get(n).ok_or_else(|| AdError::MissingLeaf(n.clone()))?;
            let d = v.dim();
            let chunk = flat
                .get(pos..pos + d)
                .ok_or_else(|| AdError::TangentMismatch(n.clone()))?;
            let nv = match v {
                Value::Scalar(_) => Value::Scalar(chunk[0]),
                Value::Field(f) => {
                    Value::Field(Field::from_vec(f.nx(), f.ny(), f.staggering(), chunk.to_vec())?)
                }
            };
            out.insert(n, nv);
            pos += d;
        }
        if pos != flat.len() {
            return Err(AdError::TangentMismatch("flat vector".into()));
        }
        Ok(out)
    }
}

/// The set of leaves that are differentiated; all others are frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiffSelector {
    names: BTreeSet<String>,
}

impl DiffSelector {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn only<S: AsRef<str>>(names: &[S]) -> Self {
        DiffSelector {
            names: names.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    pub fn all(leaves: &Leaves) -> Self {
        DiffSelector {
            names: leaves.names().cloned().collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// Selected names in canonical (sorted) order.
    pub fn names(&self) -> Vec<String> {
        self.names.iter().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn check_against(&self, leaves: &Leaves) -> Result<(), AdError> {
        for n in &self.names {
            if leaves.get(n).is_none() {
                return Err(AdError::MissingLeaf(n.clone()));
            }
        }
        Ok(())
    }
}

/// Coefficient of a term in [`Backend::lincomb`]: a constant, or a constant
/// times a scalar handle.
#[derive(Debug, Clone)]
pub enum Coef<S> {
    Const(f64),
    Scaled(f64, S),
}

/// Backend-specific handle to a scalar or field value.
pub enum Handle<B: Backend + ?Sized> {
    Scalar(B::S),
    Field(B::F),
}

impl<B: Backend + ?Sized> Clone for Handle<B> {
    fn clone(&self) -> Self {
        match self {
            Handle::Scalar(s) => Handle::Scalar(s.clone()),
            Handle::Field(f) => Handle::Field(f.clone()),
        }
    }
}

impl<B: Backend + ?Sized> Handle<B> {
    pub fn primal(&self, b: &B) -> Value {
        match self {
            Handle::Scalar(s) => Value::Scalar(b.scalar_value(s)),
            Handle::Field(f) => Value::Field(b.value(f).clone()),
        }
    }
}

/// Leaf handles handed to a [`DiffFn`].
pub struct Inputs<B: Backend + ?Sized> {
    map: BTreeMap<String, Handle<B>>,
}

impl<B: Backend + ?Sized> Inputs<B> {
    pub fn scalar(&self, name: &str) -> Result<B::S, AdError> {
        match self.map.get(name) {
            Some(Handle::Scalar(s)) => Ok(s.clone()),
            Some(_) => Err(AdError::LeafKind {
                name: name.into(),
                expected: "scalar",
            }),
            None => Err(AdError::MissingLeaf(name.into())),
        }
    }

    pub fn field(&self, name: &str) -> Result<B::F, AdError> {
        match self.map.get(name) {
            Some(Handle::Field(f)) => Ok(f.clone()),
            Some(_) => Err(AdError::LeafKind {
                name: name.into(),
                expected: "field",
            }),
            None => Err(AdError::MissingLeaf(name.into())),
        }
    }
}

/// The primitive set a differentiable function may use.
pub trait Backend {
    type S: Clone;
    type F: Clone;

    fn constant(&mut self, f: Field) -> Result<Self::F, AdError>;
    fn constant_scalar(&mut self, v: f64) -> Result<Self::S, AdError>;
    fn value<'a>(&'a self, f: &'a Self::F) -> &'a Field;
    fn scalar_value(&self, s: &Self::S) -> f64;

    /// `sum_k coef_k * f_k`; all terms share shape and staggering.
    fn lincomb(&mut self, terms: &[(Coef<Self::S>, &Self::F)]) -> Result<Self::F, AdError>;
    /// Elementwise product.
    fn mul(&mut self, a: &Self::F, b: &Self::F) -> Result<Self::F, AdError>;
    fn laplacian(&mut self, f: &Self::F, m: &Metrics) -> Result<Self::F, AdError>;
    fn ddx(&mut self, f: &Self::F, m: &Metrics) -> Result<Self::F, AdError>;
    fn ddy(&mut self, f: &Self::F, m: &Metrics) -> Result<Self::F, AdError>;
    fn interp(&mut self, f: &Self::F, to: Staggering, m: &Metrics) -> Result<Self::F, AdError>;
    /// First-order upwind flux of a center tracer through u- or v-faces.
    fn upwind_flux(
        &mut self,
        vel: &Self::F,
        tracer: &Self::F,
        m: &Metrics,
    ) -> Result<Self::F, AdError>;
    fn unary(&mut self, p: &UnaryPrimitive, f: &Self::F) -> Result<Self::F, AdError>;
    /// Meridional running sum from the southern edge, times `weight`.
    fn cumsum_y(&mut self, f: &Self::F, weight: f64, to: Staggering) -> Result<Self::F, AdError>;
    fn sum(&mut self, f: &Self::F) -> Result<Self::S, AdError>;

    fn s_add(&mut self, a: &Self::S, b: &Self::S) -> Result<Self::S, AdError>;
    fn s_mul(&mut self, a: &Self::S, b: &Self::S) -> Result<Self::S, AdError>;
    fn s_scale(&mut self, c: f64, a: &Self::S) -> Result<Self::S, AdError>;
    fn s_unary(&mut self, p: &UnaryPrimitive, a: &Self::S) -> Result<Self::S, AdError>;

    /// Marks the start of model step `step`; used in resource errors.
    fn begin_step(&mut self, _step: usize) {}

    fn add(&mut self, a: &Self::F, b: &Self::F) -> Result<Self::F, AdError> {
        self.lincomb(&[(Coef::Const(1.0), a), (Coef::Const(1.0), b)])
    }

    fn sub(&mut self, a: &Self::F, b: &Self::F) -> Result<Self::F, AdError> {
        self.lincomb(&[(Coef::Const(1.0), a), (Coef::Const(-1.0), b)])
    }

    fn scale(&mut self, s: &Self::S, f: &Self::F) -> Result<Self::F, AdError> {
        self.lincomb(&[(Coef::Scaled(1.0, s.clone()), f)])
    }

    fn scale_const(&mut self, c: f64, f: &Self::F) -> Result<Self::F, AdError> {
        self.lincomb(&[(Coef::Const(c), f)])
    }

    fn s_sub(&mut self, a: &Self::S, b: &Self::S) -> Result<Self::S, AdError> {
        let nb = self.s_scale(-1.0, b)?;
        self.s_add(a, &nb)
    }
}

/// A pure function of named leaves, generic over the evaluation backend.
pub trait DiffFn {
    fn eval<B: Backend>(&self, b: &mut B, x: &Inputs<B>) -> Result<Vec<Handle<B>>, AdError>;
}

fn check_finite_field(f: &Field, name: &str) -> Result<(), AdError> {
    if f.all_finite() {
        Ok(())
    } else {
        Err(AdError::NonFinite {
            name: name.to_string(),
            step: None,
        })
    }
}

fn outputs_to_values<B: Backend>(b: &B, outs: &[Handle<B>]) -> Vec<Value> {
    outs.iter().map(|h| h.primal(b)).collect()
}

/// Plain evaluation.
pub fn eval<F: DiffFn>(f: &F, x: &Leaves) -> Result<Vec<Value>, AdError> {
    let mut b = Eval;
    let mut map = BTreeMap::new();
    for (name, v) in x.iter() {
        let h = match v {
            Value::Scalar(s) => Handle::Scalar(*s),
            Value::Field(fl) => Handle::Field(fl.clone()),
        };
        map.insert(name.clone(), h);
    }
    let outs = f.eval(&mut b, &Inputs { map })?;
    Ok(outputs_to_values(&b, &outs))
}

/// Forward mode: returns `(f(x), J k)`. Leaves missing from `k` are frozen.
pub fn jvp<F: DiffFn>(
    f: &F,
    x: &Leaves,
    k: &Leaves,
    registry: &GradientRegistry,
) -> Result<(Vec<Value>, Vec<Value>), AdError> {
    for (name, t) in k.iter() {
        let v = x.get(name).ok_or_else(|| AdError::MissingLeaf(name.clone()))?;
        if !v.same_shape(t) {
            return Err(AdError::TangentMismatch(name.clone()));
        }
    }
    let mut b = JvpBackend::new(registry);
    let mut map = BTreeMap::new();
    for (name, v) in x.iter() {
        let h = match (v, k.get(name)) {
            (Value::Scalar(s), t) => Handle::Scalar(Dual::new(*s, t.and_then(Value::as_scalar).unwrap_or(0.0))),
            (Value::Field(fl), t) => Handle::Field(DualField::new(fl.clone(), t.and_then(|t| t.as_field().cloned()))),
        };
        map.insert(name.clone(), h);
    }
    let outs = f.eval(&mut b, &Inputs { map })?;
    let mut primals = Vec::with_capacity(outs.len());
    let mut tangents = Vec::with_capacity(outs.len());
    for h in outs {
        match h {
            Handle::Scalar(d) => {
                primals.push(Value::Scalar(d.primal));
                tangents.push(Value::Scalar(d.tangent));
            }
            Handle::Field(d) => {
                let t = d.tangent_or_zero();
                primals.push(Value::Field(d.primal));
                tangents.push(Value::Field(t));
            }
        }
    }
    Ok((primals, tangents))
}

/// Records `f` on a fresh tape with the selected leaves as variables.
pub fn record<'r, F: DiffFn>(
    f: &F,
    x: &Leaves,
    sel: &DiffSelector,
    registry: &'r GradientRegistry,
    budget: usize,
) -> Result<(Tape<'r>, BTreeMap<String, Var>, Vec<Handle<Tape<'r>>>), AdError> {
    sel.check_against(x)?;
    let mut tape = Tape::with_budget(registry, budget);
    let mut map = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for (name, v) in x.iter() {
        let var = tape.leaf(name, v.clone(), sel.contains(name))?;
        if sel.contains(name) {
            vars.insert(name.clone(), var);
        }
        let h = match v {
            Value::Scalar(_) => Handle::Scalar(var),
            Value::Field(_) => Handle::Field(var),
        };
        map.insert(name.clone(), h);
    }
    let outs = f.eval(&mut tape, &Inputs { map })?;
    Ok((tape, vars, outs))
}

/// Reverse mode with the default tape budget: returns `(f(x), v^T J)` with
/// gradients for the selected leaves only.
pub fn vjp<F: DiffFn>(
    f: &F,
    x: &Leaves,
    sel: &DiffSelector,
    v: &[Value],
    registry: &GradientRegistry,
) -> Result<(Vec<Value>, Leaves), AdError> {
    vjp_with_budget(f, x, sel, v, registry, DEFAULT_TAPE_BUDGET)
}

pub fn vjp_with_budget<F: DiffFn>(
    f: &F,
    x: &Leaves,
    sel: &DiffSelector,
    v: &[Value],
    registry: &GradientRegistry,
    budget: usize,
) -> Result<(Vec<Value>, Leaves), AdError> {
    let (tape, vars, outs) = record(f, x, sel, registry, budget)?;
    if outs.len() != v.len() {
        return Err(AdError::OutputCount {
            expected: outs.len(),
            found: v.len(),
        });
    }
    let primals = outputs_to_values(&tape, &outs);
    let mut seeds = Vec::with_capacity(outs.len());
    for (k, (h, cot)) in outs.iter().zip(v).enumerate() {
        if !primals[k].same_shape(cot) {
            return Err(AdError::TangentMismatch(format!("output {k}")));
        }
        let var = match h {
            Handle::Scalar(s) => *s,
            Handle::Field(f) => *f,
        };
        seeds.push((var, cot.clone()));
    }
    let adj = tape.backward(&seeds)?;
    let mut grads = Leaves::new();
    for (name, var) in vars {
        let g = match adj.get(var) {
            Some(g) => g,
            None => x.get(&name).expect("selected leaf exists").zeros_like(),
        };
        grads.insert(&name, g);
    }
    Ok((primals, grads))
}

/// Gradient of a scalar loss over the selected leaves, plus the loss.
pub fn grad<F: DiffFn>(
    f: &F,
    x: &Leaves,
    sel: &DiffSelector,
    registry: &GradientRegistry,
) -> Result<(f64, Leaves), AdError> {
    grad_with_budget(f, x, sel, registry, DEFAULT_TAPE_BUDGET)
}

pub fn grad_with_budget<F: DiffFn>(
    f: &F,
    x: &Leaves,
    sel: &DiffSelector,
    registry: &GradientRegistry,
    budget: usize,
) -> Result<(f64, Leaves), AdError> {
    let (tape, vars, outs) = record(f, x, sel, registry, budget)?;
    let [Handle::Scalar(out)] = outs.as_slice() else {
        return Err(AdError::NonScalarLoss);
    };
    let loss = tape.scalar_value(out);
    if !loss.is_finite() {
        return Err(AdError::NonFinite {
            name: "loss".into(),
            step: None,
        });
    }
    let adj = tape.backward(&[(*out, Value::Scalar(1.0))])?;
    let mut grads = Leaves::new();
    for (name, var) in vars {
        let g = match adj.get(var) {
            Some(g) => g,
            None => x.get(&name).expect("selected leaf exists").zeros_like(),
        };
        grads.insert(&name, g);
    }
    Ok((loss, grads))
}

/// Rejects non-finite primal fields, naming the offending one.
pub fn ensure_finite<B: Backend>(b: &B, f: &B::F, name: &str) -> Result<(), AdError> {
    check_finite_field(b.value(f), name)
}
