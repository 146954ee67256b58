//! Forward mode: value/tangent pairs for scalars and fields.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::grid::{self, Field, Metrics, Staggering};

use super::eval::check_domain;
use super::{kernels, AdError, Backend, Coef, GradientRegistry, UnaryPrimitive};

/// A real number paired with its directional derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub primal: f64,
    pub tangent: f64,
}

impl Dual {
    pub fn new(primal: f64, tangent: f64) -> Self {
        Dual { primal, tangent }
    }

    pub fn constant(primal: f64) -> Self {
        Dual::new(primal, 0.0)
    }

    pub fn variable(primal: f64) -> Self {
        Dual::new(primal, 1.0)
    }

    pub fn exp(self) -> Self {
        let e = self.primal.exp();
        Dual::new(e, e * self.tangent)
    }

    pub fn ln(self) -> Self {
        Dual::new(self.primal.ln(), self.tangent / self.primal)
    }

    pub fn powi(self, n: i32) -> Self {
        Dual::new(
            self.primal.powi(n),
            n as f64 * self.primal.powi(n - 1) * self.tangent,
        )
    }

    /// Exact square root with the regularised derivative `1 / (2 sqrt(max(x, eps)))`.
    pub fn sqrt_reg(self, eps: f64) -> Result<Self, AdError> {
        let p = super::sqrt_reg(self.primal)?;
        Ok(Dual::new(p, super::sqrt_reg_derivative(self.primal, eps) * self.tangent))
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.primal + o.primal, self.tangent + o.tangent)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.primal - o.primal, self.tangent - o.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(
            self.primal * o.primal,
            self.tangent * o.primal + self.primal * o.tangent,
        )
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(
            self.primal / o.primal,
            (self.tangent * o.primal - self.primal * o.tangent) / (o.primal * o.primal),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.primal, -self.tangent)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, c: f64) -> Dual {
        Dual::new(self.primal * c, self.tangent * c)
    }
}

/// A field with an optional tangent; `None` means identically zero, which
/// lets frozen inputs skip tangent work entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct DualField {
    pub primal: Field,
    pub tangent: Option<Field>,
}

impl DualField {
    pub fn new(primal: Field, tangent: Option<Field>) -> Self {
        DualField { primal, tangent }
    }

    pub fn constant(primal: Field) -> Self {
        DualField {
            primal,
            tangent: None,
        }
    }

    pub fn tangent_or_zero(&self) -> Field {
        match &self.tangent {
            Some(t) => t.clone(),
            None => self.primal.map(|_| 0.0),
        }
    }
}

/// Tangent-propagating backend.
pub struct JvpBackend<'r> {
    registry: &'r GradientRegistry,
}

impl<'r> JvpBackend<'r> {
    pub fn new(registry: &'r GradientRegistry) -> Self {
        JvpBackend { registry }
    }

    fn linear(
        f: &DualField,
        op: impl Fn(&Field) -> Result<Field, grid::GridError>,
    ) -> Result<DualField, AdError> {
        let primal = op(&f.primal)?;
        let tangent = f.tangent.as_ref().map(&op).transpose()?;
        Ok(DualField { primal, tangent })
    }
}

impl Backend for JvpBackend<'_> {
    type S = Dual;
    type F = DualField;

    fn constant(&mut self, f: Field) -> Result<DualField, AdError> {
        Ok(DualField::constant(f))
    }

    fn constant_scalar(&mut self, v: f64) -> Result<Dual, AdError> {
        Ok(Dual::constant(v))
    }

    fn value<'a>(&'a self, f: &'a DualField) -> &'a Field {
        &f.primal
    }

    fn scalar_value(&self, s: &Dual) -> f64 {
        s.primal
    }

    fn lincomb(&mut self, terms: &[(Coef<Dual>, &DualField)]) -> Result<DualField, AdError> {
        let resolved: Vec<(f64, &Field)> = terms
            .iter()
            .map(|(c, f)| {
                let c = match c {
                    Coef::Const(c) => *c,
                    Coef::Scaled(c, s) => c * s.primal,
                };
                (c, &f.primal)
            })
            .collect();
        let primal = kernels::lincomb(&resolved)?;
        let mut tangent: Option<Field> = None;
        let mut acc = |c: f64, f: &Field| -> Result<(), AdError> {
            match tangent.as_mut() {
                Some(t) => t.axpy(c, f)?,
                None => tangent = Some(f.map(|x| c * x)),
            }
            Ok(())
        };
        for ((c, f), (cp, _)) in terms.iter().zip(&resolved) {
            if let Some(ft) = &f.tangent {
                acc(*cp, ft)?;
            }
            if let Coef::Scaled(c, s) = c {
                if s.tangent != 0.0 {
                    acc(c * s.tangent, &f.primal)?;
                }
            }
        }
        Ok(DualField { primal, tangent })
    }

    fn mul(&mut self, a: &DualField, b: &DualField) -> Result<DualField, AdError> {
        let primal = kernels::mul(&a.primal, &b.primal)?;
        let tangent = match (&a.tangent, &b.tangent) {
            (None, None) => None,
            (Some(at), None) => Some(kernels::mul(at, &b.primal)?),
            (None, Some(bt)) => Some(kernels::mul(&a.primal, bt)?),
            (Some(at), Some(bt)) => {
                let mut t = kernels::mul(at, &b.primal)?;
                for ((x, &a), &b) in t.data_mut().iter_mut().zip(a.primal.data()).zip(bt.data()) {
                    *x += a * b;
                }
                Some(t)
            }
        };
        Ok(DualField { primal, tangent })
    }

    fn laplacian(&mut self, f: &DualField, m: &Metrics) -> Result<DualField, AdError> {
        Self::linear(f, |x| grid::laplacian_m(x, m))
    }

    fn ddx(&mut self, f: &DualField, m: &Metrics) -> Result<DualField, AdError> {
        Self::linear(f, |x| grid::ddx_m(x, m))
    }

    fn ddy(&mut self, f: &DualField, m: &Metrics) -> Result<DualField, AdError> {
        Self::linear(f, |x| grid::ddy_m(x, m))
    }

    fn interp(&mut self, f: &DualField, to: Staggering, m: &Metrics) -> Result<DualField, AdError> {
        Self::linear(f, |x| grid::interp_m(x, to, m))
    }

    fn upwind_flux(
        &mut self,
        vel: &DualField,
        tracer: &DualField,
        m: &Metrics,
    ) -> Result<DualField, AdError> {
        let primal = kernels::upwind_flux(&vel.primal, &tracer.primal, m)?;
        let tangent = if vel.tangent.is_none() && tracer.tangent.is_none() {
            None
        } else {
            Some(kernels::upwind_flux_tangent(
                &vel.primal,
                &tracer.primal,
                vel.tangent.as_ref(),
                tracer.tangent.as_ref(),
                m,
            )?)
        };
        Ok(DualField { primal, tangent })
    }

    fn unary(&mut self, p: &UnaryPrimitive, f: &DualField) -> Result<DualField, AdError> {
        let rule = self.registry.lookup(p.id)?;
        check_domain(p, f.primal.data())?;
        let primal = f.primal.map(p.primal);
        let tangent = match &f.tangent {
            Some(t) => Some(f.primal.zip_map(t, |x, dx| (rule.forward)(x, dx))?),
            None => None,
        };
        Ok(DualField { primal, tangent })
    }

    fn cumsum_y(&mut self, f: &DualField, weight: f64, to: Staggering) -> Result<DualField, AdError> {
        Ok(DualField {
            primal: kernels::cumsum_y(&f.primal, weight, to),
            tangent: f.tangent.as_ref().map(|t| kernels::cumsum_y(t, weight, to)),
        })
    }

    fn sum(&mut self, f: &DualField) -> Result<Dual, AdError> {
        Ok(Dual::new(
            f.primal.sum(),
            f.tangent.as_ref().map_or(0.0, Field::sum),
        ))
    }

    fn s_add(&mut self, a: &Dual, b: &Dual) -> Result<Dual, AdError> {
        Ok(*a + *b)
    }

    fn s_mul(&mut self, a: &Dual, b: &Dual) -> Result<Dual, AdError> {
        Ok(*a * *b)
    }

    fn s_scale(&mut self, c: f64, a: &Dual) -> Result<Dual, AdError> {
        Ok(Dual::new(c * a.primal, c * a.tangent))
    }

    fn s_unary(&mut self, p: &UnaryPrimitive, a: &Dual) -> Result<Dual, AdError> {
        let rule = self.registry.lookup(p.id)?;
        check_domain(p, &[a.primal])?;
        Ok(Dual::new((p.primal)(a.primal), (rule.forward)(a.primal, a.tangent)))
    }
}
