//! Reverse mode: a linear record of field primitives and their primal values.

use std::sync::Arc;

use crate::grid::{self, Field, Metrics, Staggering};

use super::eval::check_domain;
use super::{kernels, AdError, Backend, Coef, CustomGradientEntry, GradientRegistry, UnaryPrimitive, Value};

/// Default cap on recorded primal bytes (2 GiB).
pub const DEFAULT_TAPE_BUDGET: usize = 2 << 30;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf(String),
    Const,
    /// Field inputs are the node inputs; scalar coefficients reference nodes.
    LinComb(Vec<(f64, Option<Var>)>),
    Mul,
    Laplacian(Metrics),
    Ddx(Metrics),
    Ddy(Metrics),
    Interp { from: Staggering, to: Staggering, m: Metrics },
    Upwind(Metrics),
    Unary(UnaryPrimitive, Arc<CustomGradientEntry>),
    CumsumY { weight: f64, from: Staggering, to: Staggering },
    Sum,
    SAdd,
    SMul,
    SScale(f64),
    SUnary(UnaryPrimitive, Arc<CustomGradientEntry>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const => "const",
            Op::LinComb(_) => "lincomb",
            Op::Mul => "mul",
            Op::Laplacian(_) => "laplacian",
            Op::Ddx(_) => "ddx",
            Op::Ddy(_) => "ddy",
            Op::Interp { .. } => "interp",
            Op::Upwind(_) => "upwind_flux",
            Op::Unary(p, _) => p.id,
            Op::CumsumY { .. } => "cumsum_y",
            Op::Sum => "sum",
            Op::SAdd => "s_add",
            Op::SMul => "s_mul",
            Op::SScale(_) => "s_scale",
            Op::SUnary(p, _) => p.id,
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Value,
    active: bool,
}

/// Cotangents produced by [`Tape::backward`].
pub struct Adjoints {
    values: Vec<Option<Value>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<Value> {
        self.values.get(v.0).cloned().flatten()
    }
}

/// Single-owner record of one evaluation. Nodes are stored in execution
/// order, so inputs always precede their consumers.
pub struct Tape<'r> {
    registry: &'r GradientRegistry,
    nodes: Vec<Node>,
    bytes: usize,
    budget: usize,
    step: Option<usize>,
}

fn value_bytes(v: &Value) -> usize {
    std::mem::size_of::<Node>()
        + match v {
            Value::Scalar(_) => 0,
            Value::Field(f) => f.len() * std::mem::size_of::<f64>(),
        }
}

fn accumulate(slot: &mut Option<Value>, add: Value) -> Result<(), AdError> {
    match slot {
        None => *slot = Some(add),
        Some(Value::Scalar(s)) => match add {
            Value::Scalar(a) => *s += a,
            Value::Field(_) => return Err(AdError::TangentMismatch("adjoint".into())),
        },
        Some(Value::Field(f)) => match add {
            Value::Field(a) => f.axpy(1.0, &a)?,
            Value::Scalar(_) => return Err(AdError::TangentMismatch("adjoint".into())),
        },
    }
    Ok(())
}

impl<'r> Tape<'r> {
    pub fn new(registry: &'r GradientRegistry) -> Self {
        Self::with_budget(registry, DEFAULT_TAPE_BUDGET)
    }

    pub fn with_budget(registry: &'r GradientRegistry, budget: usize) -> Self {
        Tape {
            registry,
            nodes: Vec::new(),
            bytes: 0,
            budget,
            step: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes of primal values held by the tape.
    pub fn bytes(&self) -> usize {
        self.bytes
    }

    /// Names of the recorded primitives, in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Number of nodes that carry derivatives.
    pub fn active_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.active).count()
    }

    /// Name of a leaf node; `None` for computed nodes.
    pub fn leaf_name(&self, v: Var) -> Option<&str> {
        match &self.nodes[v.0].op {
            Op::Leaf(name) => Some(name),
            _ => None,
        }
    }

    pub fn value_of(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Value, active: bool) -> Result<Var, AdError> {
        let b = value_bytes(&value);
        if self.bytes + b > self.budget {
            return Err(AdError::TapeExhausted {
                step: self.step,
                bytes: self.bytes + b,
                budget: self.budget,
            });
        }
        self.bytes += b;
        self.nodes.push(Node {
            op,
            inputs,
            value,
            active,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_active(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].active)
    }

    fn record(&mut self, op: Op, inputs: Vec<Var>, value: Value) -> Result<Var, AdError> {
        let active = self.any_active(&inputs);
        self.push(op, inputs, value, active)
    }

    pub fn leaf(&mut self, name: &str, value: Value, active: bool) -> Result<Var, AdError> {
        self.push(Op::Leaf(name.to_string()), Vec::new(), value, active)
    }

    fn field(&self, v: Var) -> &Field {
        match &self.nodes[v.0].value {
            Value::Field(f) => f,
            Value::Scalar(_) => panic!("tape node {} holds a scalar where a field is expected", v.0),
        }
    }

    fn scalar(&self, v: Var) -> f64 {
        match &self.nodes[v.0].value {
            Value::Scalar(s) => *s,
            Value::Field(_) => panic!("tape node {} holds a field where a scalar is expected", v.0),
        }
    }

    fn compute(&self, op: &Op, inputs: &[Var]) -> Result<Value, AdError> {
        Ok(match op {
            Op::Leaf(_) | Op::Const => unreachable!("leaves are not recomputed"),
            Op::LinComb(coefs) => {
                let terms: Vec<(f64, &Field)> = coefs
                    .iter()
                    .zip(inputs)
                    .map(|((c, s), f)| (s.map_or(*c, |s| c * self.scalar(s)), self.field(*f)))
                    .collect();
                Value::Field(kernels::lincomb(&terms)?)
            }
            Op::Mul => Value::Field(kernels::mul(self.field(inputs[0]), self.field(inputs[1]))?),
            Op::Laplacian(m) => Value::Field(grid::laplacian_m(self.field(inputs[0]), m)?),
            Op::Ddx(m) => Value::Field(grid::ddx_m(self.field(inputs[0]), m)?),
            Op::Ddy(m) => Value::Field(grid::ddy_m(self.field(inputs[0]), m)?),
            Op::Interp { to, m, .. } => Value::Field(grid::interp_m(self.field(inputs[0]), *to, m)?),
            Op::Upwind(m) => Value::Field(kernels::upwind_flux(
                self.field(inputs[0]),
                self.field(inputs[1]),
                m,
            )?),
            Op::Unary(p, _) => {
                let x = self.field(inputs[0]);
                check_domain(p, x.data())?;
                Value::Field(x.map(p.primal))
            }
            Op::CumsumY { weight, to, .. } => {
                Value::Field(kernels::cumsum_y(self.field(inputs[0]), *weight, *to))
            }
            Op::Sum => Value::Scalar(self.field(inputs[0]).sum()),
            Op::SAdd => Value::Scalar(self.scalar(inputs[0]) + self.scalar(inputs[1])),
            Op::SMul => Value::Scalar(self.scalar(inputs[0]) * self.scalar(inputs[1])),
            Op::SScale(c) => Value::Scalar(c * self.scalar(inputs[0])),
            Op::SUnary(p, _) => {
                let x = self.scalar(inputs[0]);
                check_domain(p, &[x])?;
                Value::Scalar((p.primal)(x))
            }
        })
    }

    fn apply(&mut self, op: Op, inputs: Vec<Var>) -> Result<Var, AdError> {
        let value = self.compute(&op, &inputs)?;
        self.record(op, inputs, value)
    }

    /// Recomputes every non-leaf node from the recorded inputs.
    pub fn replay(&self) -> Result<Vec<Value>, AdError> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf(_) | Op::Const => Ok(n.value.clone()),
                _ => self.compute(&n.op, &n.inputs),
            })
            .collect()
    }

    /// Reverse sweep from `seeds` (node, cotangent). Each node is visited at
    /// most once, in reverse recording order; inactive nodes are skipped.
    pub fn backward(&self, seeds: &[(Var, Value)]) -> Result<Adjoints, AdError> {
        let mut adj: Vec<Option<Value>> = vec![None; self.nodes.len()];
        for (v, c) in seeds {
            if !self.nodes[v.0].value.same_shape(c) {
                return Err(AdError::TangentMismatch(format!("seed for node {}", v.0)));
            }
            accumulate(&mut adj[v.0], c.clone())?;
        }
        for k in (0..self.nodes.len()).rev() {
            let node = &self.nodes[k];
            if !node.active {
                continue;
            }
            if matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let Some(cot) = adj[k].take() else { continue };
            for (input, contrib) in self.pullback(node, &cot)? {
                if self.nodes[input.0].active {
                    accumulate(&mut adj[input.0], contrib)?;
                }
            }
        }
        Ok(Adjoints { values: adj })
    }

    fn pullback(&self, node: &Node, cot: &Value) -> Result<Vec<(Var, Value)>, AdError> {
        let inp = &node.inputs;
        let active = |v: Var| self.nodes[v.0].active;
        let cotf = || match cot {
            Value::Field(f) => f,
            Value::Scalar(_) => unreachable!("field node with scalar cotangent"),
        };
        let cots = || match cot {
            Value::Scalar(s) => *s,
            Value::Field(_) => unreachable!("scalar node with field cotangent"),
        };
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf(_) | Op::Const => {}
            Op::LinComb(coefs) => {
                let c = cotf();
                for ((coef, s), f) in coefs.iter().zip(inp) {
                    let cval = s.map_or(*coef, |s| coef * self.scalar(s));
                    if active(*f) {
                        out.push((*f, Value::Field(c.map(|x| cval * x))));
                    }
                    if let Some(s) = s {
                        if active(*s) {
                            out.push((*s, Value::Scalar(coef * c.dot(self.field(*f))?)));
                        }
                    }
                }
            }
            Op::Mul => {
                let c = cotf();
                let (a, b) = (inp[0], inp[1]);
                if active(a) {
                    out.push((a, Value::Field(kernels::mul(c, self.field(b))?)));
                }
                if active(b) {
                    out.push((b, Value::Field(kernels::mul(c, self.field(a))?)));
                }
            }
            Op::Laplacian(m) => out.push((inp[0], Value::Field(grid::laplacian_m(cotf(), m)?))),
            Op::Ddx(m) => out.push((inp[0], Value::Field(grid::ddx_adjoint(cotf(), m)?))),
            Op::Ddy(m) => out.push((inp[0], Value::Field(grid::ddy_adjoint(cotf(), m)?))),
            Op::Interp { from, m, .. } => {
                out.push((inp[0], Value::Field(grid::interp_adjoint(cotf(), *from, m)?)))
            }
            Op::Upwind(m) => {
                let (vbar, tbar) =
                    kernels::upwind_flux_adjoint(self.field(inp[0]), self.field(inp[1]), cotf(), m);
                if active(inp[0]) {
                    out.push((inp[0], Value::Field(vbar)));
                }
                if active(inp[1]) {
                    out.push((inp[1], Value::Field(tbar)));
                }
            }
            Op::Unary(_, rule) => {
                let x = self.field(inp[0]);
                out.push((inp[0], Value::Field(x.zip_map(cotf(), |x, c| (rule.backward)(x, c))?)));
            }
            Op::CumsumY { weight, from, .. } => {
                out.push((inp[0], Value::Field(kernels::cumsum_y_adjoint(cotf(), *weight, *from))))
            }
            Op::Sum => {
                let c = cots();
                out.push((inp[0], Value::Field(self.field(inp[0]).map(|_| c))));
            }
            Op::SAdd => {
                let c = cots();
                out.push((inp[0], Value::Scalar(c)));
                out.push((inp[1], Value::Scalar(c)));
            }
            Op::SMul => {
                let c = cots();
                out.push((inp[0], Value::Scalar(c * self.scalar(inp[1]))));
                out.push((inp[1], Value::Scalar(c * self.scalar(inp[0]))));
            }
            Op::SScale(k) => out.push((inp[0], Value::Scalar(k * cots()))),
            Op::SUnary(_, rule) => {
                out.push((inp[0], Value::Scalar((rule.backward)(self.scalar(inp[0]), cots()))))
            }
        }
        Ok(out)
    }
}

impl Backend for Tape<'_> {
    type S = Var;
    type F = Var;

    fn constant(&mut self, f: Field) -> Result<Var, AdError> {
        self.push(Op::Const, Vec::new(), Value::Field(f), false)
    }

    fn constant_scalar(&mut self, v: f64) -> Result<Var, AdError> {
        self.push(Op::Const, Vec::new(), Value::Scalar(v), false)
    }

    fn value<'a>(&'a self, f: &'a Var) -> &'a Field {
        self.field(*f)
    }

    fn scalar_value(&self, s: &Var) -> f64 {
        self.scalar(*s)
    }

    fn lincomb(&mut self, terms: &[(Coef<Var>, &Var)]) -> Result<Var, AdError> {
        let mut coefs = Vec::with_capacity(terms.len());
        let mut inputs = Vec::with_capacity(terms.len());
        let mut scalar_inputs = Vec::new();
        for (c, f) in terms {
            match c {
                Coef::Const(c) => coefs.push((*c, None)),
                Coef::Scaled(c, s) => {
                    coefs.push((*c, Some(*s)));
                    scalar_inputs.push(*s);
                }
            }
            inputs.push(**f);
        }
        let op = Op::LinComb(coefs);
        let value = self.compute(&op, &inputs)?;
        let active = self.any_active(&inputs) || self.any_active(&scalar_inputs);
        self.push(op, inputs, value, active)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, AdError> {
        self.apply(Op::Mul, vec![*a, *b])
    }

    fn laplacian(&mut self, f: &Var, m: &Metrics) -> Result<Var, AdError> {
        self.apply(Op::Laplacian(*m), vec![*f])
    }

    fn ddx(&mut self, f: &Var, m: &Metrics) -> Result<Var, AdError> {
        self.apply(Op::Ddx(*m), vec![*f])
    }

    fn ddy(&mut self, f: &Var, m: &Metrics) -> Result<Var, AdError> {
        self.apply(Op::Ddy(*m), vec![*f])
    }

    fn interp(&mut self, f: &Var, to: Staggering, m: &Metrics) -> Result<Var, AdError> {
        let from = self.field(*f).staggering();
        self.apply(Op::Interp { from, to, m: *m }, vec![*f])
    }

    fn upwind_flux(&mut self, vel: &Var, tracer: &Var, m: &Metrics) -> Result<Var, AdError> {
        self.apply(Op::Upwind(*m), vec![*vel, *tracer])
    }

    fn unary(&mut self, p: &UnaryPrimitive, f: &Var) -> Result<Var, AdError> {
        let rule = Arc::new(self.registry.lookup(p.id)?.clone());
        self.apply(Op::Unary(*p, rule), vec![*f])
    }

    fn cumsum_y(&mut self, f: &Var, weight: f64, to: Staggering) -> Result<Var, AdError> {
        let from = self.field(*f).staggering();
        self.apply(Op::CumsumY { weight, from, to }, vec![*f])
    }

    fn sum(&mut self, f: &Var) -> Result<Var, AdError> {
        self.apply(Op::Sum, vec![*f])
    }

    fn s_add(&mut self, a: &Var, b: &Var) -> Result<Var, AdError> {
        self.apply(Op::SAdd, vec![*a, *b])
    }

    fn s_mul(&mut self, a: &Var, b: &Var) -> Result<Var, AdError> {
        self.apply(Op::SMul, vec![*a, *b])
    }

    fn s_scale(&mut self, c: f64, a: &Var) -> Result<Var, AdError> {
        self.apply(Op::SScale(c), vec![*a])
    }

    fn s_unary(&mut self, p: &UnaryPrimitive, a: &Var) -> Result<Var, AdError> {
        let rule = Arc::new(self.registry.lookup(p.id)?.clone());
        self.apply(Op::SUnary(*p, rule), vec![*a])
    }

    fn begin_step(&mut self, step: usize) {
        self.step = Some(step);
    }
}
