//! Primal kernels shared by every backend, plus the transposes the tape needs.
//!
//! All three backends call exactly these functions for their primal values,
//! which is what makes differentiated runs bitwise identical to plain ones.

use crate::grid::{Field, GridError, Metrics, Staggering, WallKind};

use super::AdError;

pub(crate) fn lincomb(terms: &[(f64, &Field)]) -> Result<Field, AdError> {
    let (c0, f0) = terms.first().ok_or(AdError::EmptyLinComb)?;
    let mut out = f0.map(|x| c0 * x);
    for (c, f) in &terms[1..] {
        out.axpy(*c, f)?;
    }
    Ok(out)
}

pub(crate) fn mul(a: &Field, b: &Field) -> Result<Field, AdError> {
    Ok(a.zip_map(b, |x, y| x * y)?)
}

fn check_upwind(vel: &Field, tracer: &Field, m: &Metrics) -> Result<(), AdError> {
    vel.check_shape(m.nx, m.ny)?;
    tracer.check_shape(m.nx, m.ny)?;
    if tracer.staggering() != Staggering::Center {
        return Err(GridError::StaggeringMismatch {
            left: Staggering::Center,
            right: tracer.staggering(),
        }
        .into());
    }
    match vel.staggering() {
        Staggering::UFace | Staggering::VFace => Ok(()),
        other => Err(GridError::UnsupportedStaggering {
            op: "upwind_flux",
            from: other,
            to: other,
        }
        .into()),
    }
}

/// Flat index of the upwind tracer cell for face `(i, j)`, or `None` for a wall face.
#[inline]
fn upwind_cell(vel: &Field, i: usize, j: usize, m: &Metrics) -> Option<usize> {
    let w = vel.get(i, j);
    match vel.staggering() {
        Staggering::UFace => {
            let ii = if w >= 0.0 { i } else { (i + 1) % m.nx };
            Some(j * m.nx + ii)
        }
        _ => {
            if m.walls != WallKind::Periodic && j == m.ny - 1 {
                return None;
            }
            let jj = if w >= 0.0 { j } else { (j + 1) % m.ny };
            Some(jj * m.nx + i)
        }
    }
}

/// First-order upwind flux `vel * tracer_upwind` on the velocity's faces.
/// At `vel == 0` the branch `vel >= 0` is taken.
pub(crate) fn upwind_flux(vel: &Field, tracer: &Field, m: &Metrics) -> Result<Field, AdError> {
    check_upwind(vel, tracer, m)?;
    let mut out = Field::zeros_shape(m.nx, m.ny, vel.staggering());
    let t = tracer.data();
    for j in 0..m.ny {
        for i in 0..m.nx {
            if let Some(k) = upwind_cell(vel, i, j, m) {
                out.set(i, j, vel.get(i, j) * t[k]);
            }
        }
    }
    Ok(out)
}

/// Tangent of [`upwind_flux`] with the branch fixed by the primal velocity.
pub(crate) fn upwind_flux_tangent(
    vel: &Field,
    tracer: &Field,
    vel_t: Option<&Field>,
    tracer_t: Option<&Field>,
    m: &Metrics,
) -> Result<Field, AdError> {
    let mut out = Field::zeros_shape(m.nx, m.ny, vel.staggering());
    let t = tracer.data();
    for j in 0..m.ny {
        for i in 0..m.nx {
            if let Some(k) = upwind_cell(vel, i, j, m) {
                let mut d = 0.0;
                if let Some(vt) = vel_t {
                    d += vt.get(i, j) * t[k];
                }
                if let Some(tt) = tracer_t {
                    d += vel.get(i, j) * tt.data()[k];
                }
                out.set(i, j, d);
            }
        }
    }
    Ok(out)
}

/// Cotangents of [`upwind_flux`] with respect to (velocity, tracer).
pub(crate) fn upwind_flux_adjoint(
    vel: &Field,
    tracer: &Field,
    cot: &Field,
    m: &Metrics,
) -> (Field, Field) {
    let mut vbar = Field::zeros_shape(m.nx, m.ny, vel.staggering());
    let mut tbar = Field::zeros_shape(m.nx, m.ny, Staggering::Center);
    let t = tracer.data();
    for j in 0..m.ny {
        for i in 0..m.nx {
            if let Some(k) = upwind_cell(vel, i, j, m) {
                let c = cot.get(i, j);
                vbar.set(i, j, c * t[k]);
                tbar.data_mut()[k] += c * vel.get(i, j);
            }
        }
    }
    (vbar, tbar)
}

/// `out(i, j) = weight * sum_{j' <= j} f(i, j')`, retagged as `to`.
pub(crate) fn cumsum_y(f: &Field, weight: f64, to: Staggering) -> Field {
    let (nx, ny) = f.shape();
    let mut out = Field::zeros_shape(nx, ny, to);
    for i in 0..nx {
        let mut acc = 0.0;
        for j in 0..ny {
            acc += weight * f.get(i, j);
            out.set(i, j, acc);
        }
    }
    out
}

/// Transpose of [`cumsum_y`]: reverse cumulative sum.
pub(crate) fn cumsum_y_adjoint(cot: &Field, weight: f64, from: Staggering) -> Field {
    let (nx, ny) = cot.shape();
    let mut out = Field::zeros_shape(nx, ny, from);
    for i in 0..nx {
        let mut acc = 0.0;
        for j in (0..ny).rev() {
            acc += cot.get(i, j);
            out.set(i, j, weight * acc);
        }
    }
    out
}
