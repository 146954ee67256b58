use crate::grid::{self, Field, Metrics, Staggering};

use super::{kernels, AdError, Backend, Coef, UnaryPrimitive};

/// Undifferentiated evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eval;

pub(crate) fn check_domain(p: &UnaryPrimitive, data: &[f64]) -> Result<(), AdError> {
    if let Some(&bad) = data.iter().find(|&&x| !(p.in_domain)(x)) {
        return Err(AdError::Domain {
            primitive: p.id.to_string(),
            value: bad,
        });
    }
    Ok(())
}

impl Backend for Eval {
    type S = f64;
    type F = Field;

    fn constant(&mut self, f: Field) -> Result<Field, AdError> {
        Ok(f)
    }

    fn constant_scalar(&mut self, v: f64) -> Result<f64, AdError> {
        Ok(v)
    }

    fn value<'a>(&'a self, f: &'a Field) -> &'a Field {
        f
    }

    fn scalar_value(&self, s: &f64) -> f64 {
        *s
    }

    fn lincomb(&mut self, terms: &[(Coef<f64>, &Field)]) -> Result<Field, AdError> {
        let resolved: Vec<(f64, &Field)> = terms
            .iter()
            .map(|(c, f)| {
                let c = match c {
                    Coef::Const(c) => *c,
                    Coef::Scaled(c, s) => c * s,
                };
                (c, *f)
            })
            .collect();
        kernels::lincomb(&resolved)
    }

    fn mul(&mut self, a: &Field, b: &Field) -> Result<Field, AdError> {
        kernels::mul(a, b)
    }

    fn laplacian(&mut self, f: &Field, m: &Metrics) -> Result<Field, AdError> {
        Ok(grid::laplacian_m(f, m)?)
    }

    fn ddx(&mut self, f: &Field, m: &Metrics) -> Result<Field, AdError> {
        Ok(grid::ddx_m(f, m)?)
    }

    fn ddy(&mut self, f: &Field, m: &Metrics) -> Result<Field, AdError> {
        Ok(grid::ddy_m(f, m)?)
    }

    fn interp(&mut self, f: &Field, to: Staggering, m: &Metrics) -> Result<Field, AdError> {
        Ok(grid::interp_m(f, to, m)?)
    }

    fn upwind_flux(&mut self, vel: &Field, tracer: &Field, m: &Metrics) -> Result<Field, AdError> {
        kernels::upwind_flux(vel, tracer, m)
    }

    fn unary(&mut self, p: &UnaryPrimitive, f: &Field) -> Result<Field, AdError> {
        check_domain(p, f.data())?;
        Ok(f.map(p.primal))
    }

    fn cumsum_y(&mut self, f: &Field, weight: f64, to: Staggering) -> Result<Field, AdError> {
        Ok(kernels::cumsum_y(f, weight, to))
    }

    fn sum(&mut self, f: &Field) -> Result<f64, AdError> {
        Ok(f.sum())
    }

    fn s_add(&mut self, a: &f64, b: &f64) -> Result<f64, AdError> {
        Ok(a + b)
    }

    fn s_mul(&mut self, a: &f64, b: &f64) -> Result<f64, AdError> {
        Ok(a * b)
    }

    fn s_scale(&mut self, c: f64, a: &f64) -> Result<f64, AdError> {
        Ok(c * a)
    }

    fn s_unary(&mut self, p: &UnaryPrimitive, a: &f64) -> Result<f64, AdError> {
        check_domain(p, &[*a])?;
        Ok((p.primal)(*a))
    }
}
