//! Channel geometry, C-grid fields and the discrete operators of the core.
//!
//! Layout (Arakawa C-grid), cell `(i, j)` with `i` zonal and `j` meridional:
//! - `Center`: `x = (i + 1/2) dx`, `y = (j + 1/2) dy` (eta, T)
//! - `UFace`:  east face, `x = (i + 1) dx`, `y = (j + 1/2) dy` (u)
//! - `VFace`:  north face, `x = (i + 1/2) dx`, `y = (j + 1) dy` (v)
//! - `Corner`: north-east corner, `x = (i + 1) dx`, `y = (j + 1) dy`
//!
//! The zonal direction is periodic. With walls, the row `j = ny - 1` of a
//! v-face or corner field lies on the northern wall and the southern wall row
//! is implicit; both are structural zeros that every operator ignores on input
//! and writes as zero on output.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("staggering mismatch: {left:?} vs {right:?}")]
    StaggeringMismatch { left: Staggering, right: Staggering },
    #[error("unsupported staggering for {op}: {from:?} -> {to:?}")]
    UnsupportedStaggering {
        op: &'static str,
        from: Staggering,
        to: Staggering,
    },
}

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Staggering {
    Center,
    UFace,
    VFace,
    Corner,
}

impl Staggering {
    /// True when the position sits on zonal cell faces.
    pub fn x_face(self) -> bool {
        matches!(self, Staggering::UFace | Staggering::Corner)
    }

    /// True when the position sits on meridional cell faces.
    pub fn y_face(self) -> bool {
        matches!(self, Staggering::VFace | Staggering::Corner)
    }

    fn from_flags(x_face: bool, y_face: bool) -> Self {
        match (x_face, y_face) {
            (false, false) => Staggering::Center,
            (true, false) => Staggering::UFace,
            (false, true) => Staggering::VFace,
            (true, true) => Staggering::Corner,
        }
    }

    pub fn toggle_x(self) -> Self {
        Self::from_flags(!self.x_face(), self.y_face())
    }

    pub fn toggle_y(self) -> Self {
        Self::from_flags(self.x_face(), !self.y_face())
    }

    pub fn name(self) -> &'static str {
        match self {
            Staggering::Center => "center",
            Staggering::UFace => "u-face",
            Staggering::VFace => "v-face",
            Staggering::Corner => "corner",
        }
    }
}

/// Meridional boundary treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallKind {
    /// Solid walls, zero normal flow, zero normal derivative of tangential flow.
    FreeSlip,
    /// Solid walls, zero normal flow, tangential flow vanishes at the wall.
    NoSlip,
    /// Doubly periodic domain (used for operator tests).
    Periodic,
}

impl WallKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "free-slip" => Some(WallKind::FreeSlip),
            "no-slip" => Some(WallKind::NoSlip),
            "periodic" => Some(WallKind::Periodic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WallKind::FreeSlip => "free-slip",
            WallKind::NoSlip => "no-slip",
            WallKind::Periodic => "periodic",
        }
    }
}

/// The minimal geometry an operator needs. Cheap to copy into tape nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub walls: WallKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub lx: f64,
    pub ly: f64,
    /// Coriolis parameter at the southern wall (1/s).
    pub f0: f64,
    /// Meridional Coriolis gradient (1/(m s)).
    pub beta: f64,
    /// Resting depth (m).
    pub depth: f64,
    /// Row-major ocean flags, `true` for ocean.
    pub mask: Vec<bool>,
    pub walls: WallKind,
}

/// Smallest grid the operator stencils support.
pub const MIN_CELLS: usize = 4;

/// Builds an all-ocean channel with free-slip walls.
pub fn make_channel_grid(
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    depth: f64,
    f0: f64,
    beta: f64,
) -> Result<GridSpec> {
    if nx < MIN_CELLS || ny < MIN_CELLS {
        return Err(GridError::InvalidGrid(format!(
            "grid {nx}x{ny} is smaller than the {MIN_CELLS}x{MIN_CELLS} stencil minimum"
        )));
    }
    for (name, v) in [("Lx", lx), ("Ly", ly), ("H", depth)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(GridError::InvalidGrid(format!("{name} must be positive, got {v}")));
        }
    }
    if !f0.is_finite() || !beta.is_finite() {
        return Err(GridError::InvalidGrid("Coriolis parameters must be finite".into()));
    }
    Ok(GridSpec {
        nx,
        ny,
        dx: lx / nx as f64,
        dy: ly / ny as f64,
        lx,
        ly,
        f0,
        beta,
        depth,
        mask: vec![true; nx * ny],
        walls: WallKind::FreeSlip,
    })
}

impl GridSpec {
    pub fn with_walls(mut self, walls: WallKind) -> Self {
        self.walls = walls;
        self
    }

    /// Replaces the land mask. The ocean must be non-empty and 4-connected
    /// (zonally periodic), so land only ever carves out closed regions.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.nx * self.ny {
            return Err(GridError::InvalidGrid(format!(
                "mask has {} entries, grid has {}",
                mask.len(),
                self.nx * self.ny
            )));
        }
        let n_ocean = mask.iter().filter(|&&m| m).count();
        let Some(start) = mask.iter().position(|&m| m) else {
            return Err(GridError::InvalidGrid("mask has no ocean cells".into()));
        };
        let mut seen = vec![false; mask.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0;
        while let Some(k) = stack.pop() {
            reached += 1;
            let (i, j) = (k % self.nx, k / self.nx);
            let mut nbrs = vec![
                j * self.nx + (i + 1) % self.nx,
                j * self.nx + (i + self.nx - 1) % self.nx,
            ];
            if j + 1 < self.ny {
                nbrs.push((j + 1) * self.nx + i);
            }
            if j > 0 {
                nbrs.push((j - 1) * self.nx + i);
            }
            for n in nbrs {
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        if reached != n_ocean {
            return Err(GridError::InvalidGrid(
                "ocean cells are not connected; land must form closed regions".into(),
            ));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            nx: self.nx,
            ny: self.ny,
            dx: self.dx,
            dy: self.dy,
            walls: self.walls,
        }
    }

    pub fn is_all_ocean(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn x_of(&self, stag: Staggering, i: usize) -> f64 {
        if stag.x_face() {
            (i + 1) as f64 * self.dx
        } else {
            (i as f64 + 0.5) * self.dx
        }
    }

    pub fn y_of(&self, stag: Staggering, j: usize) -> f64 {
        if stag.y_face() {
            (j + 1) as f64 * self.dy
        } else {
            (j as f64 + 0.5) * self.dy
        }
    }

    /// Coriolis parameter `f0 + beta * y` sampled at `stag` positions.
    pub fn coriolis(&self, stag: Staggering) -> Field {
        Field::from_fn(self, stag, |_, j| self.f0 + self.beta * self.y_of(stag, j))
    }

    /// 1.0 where a point of the given staggering is wet, 0.0 otherwise.
    /// Faces are wet when both adjacent cells are ocean; wall rows are dry.
    pub fn wet_mask(&self, stag: Staggering) -> Field {
        let (nx, ny) = (self.nx, self.ny);
        let ocean = |i: usize, j: usize| self.mask[j * nx + i % nx];
        let walls = self.walls != WallKind::Periodic;
        Field::from_fn(self, stag, |i, j| {
            let ip = (i + 1) % nx;
            let jp = if j + 1 < ny { Some(j + 1) } else if walls { None } else { Some(0) };
            let wet = match stag {
                Staggering::Center => ocean(i, j),
                Staggering::UFace => ocean(i, j) && ocean(ip, j),
                Staggering::VFace => jp.is_some_and(|jp| ocean(i, j) && ocean(i, jp)),
                Staggering::Corner => jp.is_some_and(|jp| {
                    ocean(i, j) && ocean(ip, j) && ocean(i, jp) && ocean(ip, jp)
                }),
            };
            if wet {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// A 2-D array of reals tagged with its C-grid position. Row-major, `j` major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    nx: usize,
    ny: usize,
    stag: Staggering,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(g: &GridSpec, stag: Staggering) -> Self {
        Self::zeros_shape(g.nx, g.ny, stag)
    }

    pub fn zeros_shape(nx: usize, ny: usize, stag: Staggering) -> Self {
        Field {
            nx,
            ny,
            stag,
            data: vec![0.0; nx * ny],
        }
    }

    pub fn constant(g: &GridSpec, stag: Staggering, c: f64) -> Self {
        Field {
            nx: g.nx,
            ny: g.ny,
            stag,
            data: vec![c; g.nx * g.ny],
        }
    }

    pub fn from_fn(g: &GridSpec, stag: Staggering, f: impl Fn(usize, usize) -> f64) -> Self {
        Self::from_fn_shape(g.nx, g.ny, stag, f)
    }

    pub fn from_fn_shape(
        nx: usize,
        ny: usize,
        stag: Staggering,
        f: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                data.push(f(i, j));
            }
        }
        Field { nx, ny, stag, data }
    }

    pub fn from_vec(nx: usize, ny: usize, stag: Staggering, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny {
            return Err(GridError::ShapeMismatch {
                expected: (nx, ny),
                found: (data.len(), 1),
            });
        }
        Ok(Field { nx, ny, stag, data })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn staggering(&self) -> Staggering {
        self.stag
    }

    pub fn with_staggering(mut self, stag: Staggering) -> Self {
        self.stag = stag;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nx + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.nx + i] = v;
    }

    pub fn check_grid(&self, g: &GridSpec) -> Result<()> {
        self.check_shape(g.nx, g.ny)
    }

    pub fn check_shape(&self, nx: usize, ny: usize) -> Result<()> {
        if (self.nx, self.ny) != (nx, ny) {
            return Err(GridError::ShapeMismatch {
                expected: (nx, ny),
                found: (self.nx, self.ny),
            });
        }
        Ok(())
    }

    /// Shape and staggering must both agree.
    pub fn check_compatible(&self, other: &Field) -> Result<()> {
        other.check_shape(self.nx, self.ny)?;
        if self.stag != other.stag {
            return Err(GridError::StaggeringMismatch {
                left: self.stag,
                right: other.stag,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            nx: self.nx,
            ny: self.ny,
            stag: self.stag,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_compatible(other)?;
        Ok(Field {
            nx: self.nx,
            ny: self.ny,
            stag: self.stag,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Field) -> Result<()> {
        self.check_compatible(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm2_sq(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Bitwise equality of values, shape and staggering (`-0.0 != 0.0`, NaN payloads compared).
    pub fn bit_eq(&self, other: &Field) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.stag == other.stag
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Zonal shift by `s` cells: `out(i) = self(i - s)`.
    pub fn roll_x(&self, s: usize) -> Field {
        let nx = self.nx;
        Field::from_fn_shape(nx, self.ny, self.stag, |i, j| {
            self.get((i + nx - s % nx) % nx, j)
        })
    }
}

#[inline]
fn wrap_prev(i: usize, n: usize) -> usize {
    if i == 0 {
        n - 1
    } else {
        i - 1
    }
}

#[inline]
fn wrap_next(i: usize, n: usize) -> usize {
    if i + 1 == n {
        0
    } else {
        i + 1
    }
}

/// Value of a y-face field at row `j`, honouring the structural wall zeros.
/// `j` is given as `jj = j + 1` so that `jj == 0` denotes the southern wall.
#[inline]
fn yface_at(f: &Field, i: usize, jj: usize, walls: bool) -> f64 {
    let ny = f.ny;
    if walls {
        if jj == 0 || jj == ny {
            0.0
        } else {
            f.get(i, jj - 1)
        }
    } else {
        f.get(i, (jj + ny - 1) % ny)
    }
}

fn check_metrics(f: &Field, m: &Metrics) -> Result<()> {
    f.check_shape(m.nx, m.ny)
}

/// Five-point Laplacian. Zonal wrap; meridional treatment per staggering:
/// cell rows use a mirrored ghost (no-flux), or an odd ghost for u under
/// no-slip; face rows treat wall values as zero. Symmetric as a matrix.
pub fn laplacian_m(f: &Field, m: &Metrics) -> Result<Field> {
    check_metrics(f, m)?;
    let (nx, ny) = (m.nx, m.ny);
    let (idx2, idy2) = (1.0 / (m.dx * m.dx), 1.0 / (m.dy * m.dy));
    let walls = m.walls != WallKind::Periodic;
    let mut out = Field::zeros_shape(nx, ny, f.stag);
    let yface = f.stag.y_face();
    let ghost_sign = if f.stag == Staggering::UFace && m.walls == WallKind::NoSlip {
        -1.0
    } else {
        1.0
    };
    for j in 0..ny {
        if walls && yface && j == ny - 1 {
            continue;
        }
        for i in 0..nx {
            let c = f.get(i, j);
            let lap_x = (f.get(wrap_next(i, nx), j) + f.get(wrap_prev(i, nx), j) - 2.0 * c) * idx2;
            let (n, s) = if !walls {
                (f.get(i, wrap_next(j, ny)), f.get(i, wrap_prev(j, ny)))
            } else if yface {
                (
                    yface_at(f, i, j + 2, true),
                    yface_at(f, i, j, true),
                )
            } else {
                let n = if j + 1 < ny { f.get(i, j + 1) } else { ghost_sign * c };
                let s = if j > 0 { f.get(i, j - 1) } else { ghost_sign * c };
                (n, s)
            };
            let lap_y = (n + s - 2.0 * c) * idy2;
            out.set(i, j, lap_x + lap_y);
        }
    }
    Ok(out)
}

/// Zonal two-point difference; toggles the x-position of the staggering.
pub fn ddx_m(f: &Field, m: &Metrics) -> Result<Field> {
    check_metrics(f, m)?;
    let (nx, ny) = (m.nx, m.ny);
    let idx = 1.0 / m.dx;
    let mut out = Field::zeros_shape(nx, ny, f.stag.toggle_x());
    let forward = !f.stag.x_face();
    let wall_row = m.walls != WallKind::Periodic && f.stag.y_face();
    for j in 0..ny {
        if wall_row && j == ny - 1 {
            continue;
        }
        for i in 0..nx {
            let v = if forward {
                f.get(wrap_next(i, nx), j) - f.get(i, j)
            } else {
                f.get(i, j) - f.get(wrap_prev(i, nx), j)
            };
            out.set(i, j, v * idx);
        }
    }
    Ok(out)
}

/// Meridional two-point difference; toggles the y-position of the staggering.
/// Wall faces carry zero flux.
pub fn ddy_m(f: &Field, m: &Metrics) -> Result<Field> {
    check_metrics(f, m)?;
    let (nx, ny) = (m.nx, m.ny);
    let idy = 1.0 / m.dy;
    let walls = m.walls != WallKind::Periodic;
    let mut out = Field::zeros_shape(nx, ny, f.stag.toggle_y());
    if !f.stag.y_face() {
        // cell rows -> face rows
        for j in 0..ny {
            if walls && j == ny - 1 {
                continue;
            }
            let jn = wrap_next(j, ny);
            for i in 0..nx {
                out.set(i, j, (f.get(i, jn) - f.get(i, j)) * idy);
            }
        }
    } else {
        for j in 0..ny {
            for i in 0..nx {
                let n = yface_at(f, i, j + 1, walls);
                let s = yface_at(f, i, j, walls);
                out.set(i, j, (n - s) * idy);
            }
        }
    }
    Ok(out)
}

/// Two-point average to an adjacent staggering (one of x or y toggled).
pub fn interp_m(f: &Field, to: Staggering, m: &Metrics) -> Result<Field> {
    check_metrics(f, m)?;
    let from = f.stag;
    let (nx, ny) = (m.nx, m.ny);
    let walls = m.walls != WallKind::Periodic;
    let mut out = Field::zeros_shape(nx, ny, to);
    if to == from.toggle_x() {
        let forward = !from.x_face();
        let wall_row = walls && from.y_face();
        for j in 0..ny {
            if wall_row && j == ny - 1 {
                continue;
            }
            for i in 0..nx {
                let other = if forward {
                    f.get(wrap_next(i, nx), j)
                } else {
                    f.get(wrap_prev(i, nx), j)
                };
                out.set(i, j, 0.5 * (f.get(i, j) + other));
            }
        }
    } else if to == from.toggle_y() {
        if !from.y_face() {
            for j in 0..ny {
                if walls && j == ny - 1 {
                    continue;
                }
                let jn = wrap_next(j, ny);
                for i in 0..nx {
                    out.set(i, j, 0.5 * (f.get(i, j) + f.get(i, jn)));
                }
            }
        } else {
            for j in 0..ny {
                for i in 0..nx {
                    let n = yface_at(f, i, j + 1, walls);
                    let s = yface_at(f, i, j, walls);
                    out.set(i, j, 0.5 * (n + s));
                }
            }
        }
    } else {
        return Err(GridError::UnsupportedStaggering {
            op: "interp",
            from,
            to,
        });
    }
    Ok(out)
}

/// Transpose of [`ddx_m`] applied to a cotangent living at the output staggering.
pub(crate) fn ddx_adjoint(cot: &Field, m: &Metrics) -> Result<Field> {
    let mut out = ddx_m(cot, m)?;
    for v in out.data_mut() {
        *v = -*v;
    }
    Ok(out)
}

/// Transpose of [`ddy_m`]. Wall rows of the cotangent are structural zeros.
pub(crate) fn ddy_adjoint(cot: &Field, m: &Metrics) -> Result<Field> {
    let mut out = ddy_m(cot, m)?;
    for v in out.data_mut() {
        *v = -*v;
    }
    Ok(out)
}

/// Transpose of [`interp_m`] from `from` to the staggering of `cot`.
pub(crate) fn interp_adjoint(cot: &Field, from: Staggering, m: &Metrics) -> Result<Field> {
    interp_m(cot, from, m)
}

pub fn laplacian(f: &Field, g: &GridSpec) -> Result<Field> {
    laplacian_m(f, &g.metrics())
}

pub fn ddx(f: &Field, g: &GridSpec) -> Result<Field> {
    ddx_m(f, &g.metrics())
}

pub fn ddy(f: &Field, g: &GridSpec) -> Result<Field> {
    ddy_m(f, &g.metrics())
}

pub fn interp(f: &Field, to: Staggering, g: &GridSpec) -> Result<Field> {
    interp_m(f, to, &g.metrics())
}

/// `ddx(u) + ddy(v)` at cell centers.
pub fn divergence(u: &Field, v: &Field, g: &GridSpec) -> Result<Field> {
    if u.staggering() != Staggering::UFace {
        return Err(GridError::StaggeringMismatch {
            left: Staggering::UFace,
            right: u.staggering(),
        });
    }
    if v.staggering() != Staggering::VFace {
        return Err(GridError::StaggeringMismatch {
            left: Staggering::VFace,
            right: v.staggering(),
        });
    }
    let dudx = ddx(u, g)?;
    let dvdy = ddy(v, g)?;
    dudx.zip_map(&dvdy, |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn periodic(nx: usize, ny: usize) -> GridSpec {
        make_channel_grid(nx, ny, nx as f64, ny as f64, 1.0, 0.0, 0.0)
            .unwrap()
            .with_walls(WallKind::Periodic)
    }

    fn random_field(g: &GridSpec, stag: Staggering, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Field::from_fn(g, stag, |_, _| 0.0);
        for v in f.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        // wall rows of face fields are structurally zero
        if g.walls != WallKind::Periodic && stag.y_face() {
            for i in 0..g.nx {
                f.set(i, g.ny - 1, 0.0);
            }
        }
        f
    }

    #[test]
    fn channel_grid_spacing() {
        let g = make_channel_grid(64, 64, 1e6, 1e6, 500.0, 1e-4, 2e-11).unwrap();
        assert_eq!(g.dx, 15625.0);
        assert_eq!(g.dy, 15625.0);
        assert!(g.is_all_ocean());
        let g = make_channel_grid(4, 4, 4e5, 4e5, 100.0, 0.0, 0.0).unwrap();
        assert_eq!(g.dx, 1e5);
    }

    #[test]
    fn channel_grid_rejects_bad_input() {
        assert!(make_channel_grid(3, 8, 1e6, 1e6, 500.0, 1e-4, 2e-11).is_err());
        assert!(make_channel_grid(8, 3, 1e6, 1e6, 500.0, 1e-4, 2e-11).is_err());
        assert!(make_channel_grid(8, 8, -1.0, 1e6, 500.0, 0.0, 0.0).is_err());
        assert!(make_channel_grid(8, 8, 1e6, 1e6, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn mask_must_be_connected() {
        let g = make_channel_grid(6, 6, 6.0, 6.0, 1.0, 0.0, 0.0).unwrap();
        let mut mask = vec![true; 36];
        // a land island in the middle is fine
        mask[2 * 6 + 2] = false;
        mask[2 * 6 + 3] = false;
        assert!(g.clone().with_mask(mask.clone()).is_ok());
        // a full land row splits the channel into two basins
        for i in 0..6 {
            mask[3 * 6 + i] = false;
        }
        assert!(g.clone().with_mask(mask).is_err());
        assert!(g.clone().with_mask(vec![false; 36]).is_err());
        assert!(g.with_mask(vec![true; 5]).is_err());
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let g = make_channel_grid(8, 6, 8e5, 6e5, 100.0, 0.0, 0.0).unwrap();
        for stag in [Staggering::Center, Staggering::UFace] {
            let f = Field::constant(&g, stag, 3.7);
            assert!(laplacian(&f, &g).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn laplacian_spike() {
        let g = periodic(8, 8);
        let mut f = Field::zeros(&g, Staggering::Center);
        f.set(3, 4, 1.0);
        let l = laplacian(&f, &g).unwrap();
        assert_eq!(l.get(3, 4), -4.0);
        for (i, j) in [(2, 4), (4, 4), (3, 3), (3, 5)] {
            assert_eq!(l.get(i, j), 1.0);
        }
        assert_eq!(l.data().iter().filter(|&&v| v != 0.0).count(), 5);
        // same result with walls, the spike is interior
        let gw = make_channel_grid(8, 8, 8.0, 8.0, 1.0, 0.0, 0.0).unwrap();
        assert!(laplacian(&f, &gw).unwrap().bit_eq(&l));
    }

    #[test]
    fn laplacian_sine_eigenfunction() {
        let g = make_channel_grid(64, 64, 1e6, 1e6, 500.0, 1e-4, 2e-11).unwrap();
        let k = 2.0 * std::f64::consts::PI / g.lx;
        let f = Field::from_fn(&g, Staggering::Center, |i, _| (k * g.x_of(Staggering::Center, i)).sin());
        let l = laplacian(&f, &g).unwrap();
        let discrete = -(2.0 / (g.dx * g.dx)) * (1.0 - (k * g.dx).cos());
        let mut max_disc: f64 = 0.0;
        let mut max_cont: f64 = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                max_disc = max_disc.max((l.get(i, j) - discrete * f.get(i, j)).abs());
                max_cont = max_cont.max((l.get(i, j) + k * k * f.get(i, j)).abs());
            }
        }
        assert!(max_disc < 1e-22, "discrete eigenvalue error {max_disc}");
        // O(dx^2) against the continuum: relative error (k dx)^2 / 12
        let bound = k * k * (k * g.dx).powi(2) / 12.0 * 1.01;
        assert!(max_cont <= bound, "{max_cont} > {bound}");
    }

    #[test]
    fn derivatives_of_constants_and_ramps() {
        let g = make_channel_grid(10, 8, 10.0, 8.0, 1.0, 0.0, 0.0).unwrap();
        let c = Field::constant(&g, Staggering::Center, 2.5);
        assert!(ddx(&c, &g).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(ddy(&c, &g).unwrap().data().iter().all(|&v| v == 0.0));
        let a = 0.3;
        let ramp = Field::from_fn(&g, Staggering::Center, |i, _| a * g.x_of(Staggering::Center, i));
        let d = ddx(&ramp, &g).unwrap();
        assert_eq!(d.staggering(), Staggering::UFace);
        for j in 0..g.ny {
            for i in 0..g.nx - 1 {
                assert!((d.get(i, j) - a).abs() < 1e-14);
            }
        }
        let yramp = Field::from_fn(&g, Staggering::Center, |_, j| a * g.y_of(Staggering::Center, j));
        let d = ddy(&yramp, &g).unwrap();
        assert_eq!(d.staggering(), Staggering::VFace);
        for j in 0..g.ny - 1 {
            for i in 0..g.nx {
                assert!((d.get(i, j) - a).abs() < 1e-14);
            }
        }
        // wall faces carry nothing
        for i in 0..g.nx {
            assert_eq!(d.get(i, g.ny - 1), 0.0);
        }
    }

    #[test]
    fn ddx_ddy_commute_on_periodic_grid() {
        let g = periodic(9, 7);
        let f = random_field(&g, Staggering::Center, 3);
        let xy = ddy(&ddx(&f, &g).unwrap(), &g).unwrap();
        let yx = ddx(&ddy(&f, &g).unwrap(), &g).unwrap();
        assert_eq!(xy.staggering(), Staggering::Corner);
        for (a, b) in xy.data().iter().zip(yx.data()) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn divergence_of_uniform_flow_is_zero() {
        let g = make_channel_grid(8, 8, 8e5, 8e5, 100.0, 0.0, 0.0).unwrap();
        let u = Field::constant(&g, Staggering::UFace, 0.7);
        let v = Field::zeros(&g, Staggering::VFace);
        assert!(divergence(&u, &v, &g).unwrap().data().iter().all(|&d| d == 0.0));
        // uniform v on a doubly periodic grid
        let gp = periodic(8, 8);
        let u = Field::constant(&gp, Staggering::UFace, 0.7);
        let v = Field::constant(&gp, Staggering::VFace, -0.2);
        assert!(divergence(&u, &v, &gp).unwrap().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn divergence_of_ramp() {
        let g = make_channel_grid(12, 6, 12.0, 6.0, 1.0, 0.0, 0.0).unwrap();
        let u = Field::from_fn(&g, Staggering::UFace, |i, _| 0.25 * g.x_of(Staggering::UFace, i));
        let v = Field::zeros(&g, Staggering::VFace);
        let d = divergence(&u, &v, &g).unwrap();
        for j in 0..g.ny {
            for i in 1..g.nx {
                assert!((d.get(i, j) - 0.25).abs() < 1e-14);
            }
        }
    }

    /// Velocities built from a corner streamfunction that is constant on each wall.
    fn solenoidal(g: &GridSpec, seed: u64) -> (Field, Field) {
        let mut q = random_field(g, Staggering::Corner, seed);
        for i in 0..g.nx {
            q.set(i, g.ny - 1, 0.0);
        }
        // u = -dq/dy, v = dq/dx with q = 0 on both walls
        let mut u = ddy_m(&q, &g.metrics()).unwrap();
        for x in u.data_mut() {
            *x = -*x;
        }
        let v = ddx_m(&q, &g.metrics()).unwrap();
        (u, v)
    }

    #[test]
    fn divergence_of_streamfunction_flow_vanishes() {
        let g = make_channel_grid(16, 12, 1.6e6, 1.2e6, 500.0, 1e-4, 0.0).unwrap();
        for seed in 0..5 {
            let (u, v) = solenoidal(&g, seed);
            assert_eq!(u.staggering(), Staggering::UFace);
            assert_eq!(v.staggering(), Staggering::VFace);
            let d = divergence(&u, &v, &g).unwrap();
            let scale = u.max_abs() / g.dx;
            assert!(d.max_abs() <= 1e-14 * scale, "{}", d.max_abs());
        }
    }

    #[test]
    fn divergence_rejects_wrong_staggering() {
        let g = periodic(6, 6);
        let c = Field::zeros(&g, Staggering::Center);
        let v = Field::zeros(&g, Staggering::VFace);
        assert!(matches!(
            divergence(&c, &v, &g),
            Err(GridError::StaggeringMismatch { .. })
        ));
    }

    #[test]
    fn interp_constants_and_alternation() {
        let g = make_channel_grid(8, 6, 8.0, 6.0, 1.0, 0.0, 0.0).unwrap();
        let c = Field::constant(&g, Staggering::Center, 1.25);
        let u = interp(&c, Staggering::UFace, &g).unwrap();
        assert!(u.data().iter().all(|&x| x == 1.25));
        let back = interp(&u, Staggering::Center, &g).unwrap();
        assert!(back.data().iter().all(|&x| x == 1.25));
        let alt = Field::from_fn(&g, Staggering::Center, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        assert!(interp(&alt, Staggering::UFace, &g).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(
            interp(&c, Staggering::Center, &g),
            Err(GridError::UnsupportedStaggering { .. })
        ));
        assert!(matches!(
            interp(&c, Staggering::Corner, &g),
            Err(GridError::UnsupportedStaggering { .. })
        ));
    }

    #[test]
    fn interp_round_trip_is_a_smoother() {
        let g = periodic(10, 6);
        let f = random_field(&g, Staggering::Center, 11);
        let rt = interp(&interp(&f, Staggering::UFace, &g).unwrap(), Staggering::Center, &g).unwrap();
        // direct two-step average: (f(i-1) + 2 f(i) + f(i+1)) / 4
        let mut differs = false;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let im = (i + g.nx - 1) % g.nx;
                let ip = (i + 1) % g.nx;
                let direct = 0.5 * (0.5 * (f.get(im, j) + f.get(i, j)) + 0.5 * (f.get(i, j) + f.get(ip, j)));
                assert!((rt.get(i, j) - direct).abs() < 1e-15);
                differs |= rt.get(i, j) != f.get(i, j);
            }
        }
        assert!(differs);
    }

    /// `<A x, y> == <x, A^T y>` for every operator and staggering.
    #[test]
    fn adjoint_kernels_pass_dot_product_test() {
        for walls in [WallKind::FreeSlip, WallKind::NoSlip, WallKind::Periodic] {
            let g = make_channel_grid(7, 6, 7e5, 6e5, 100.0, 0.0, 0.0).unwrap().with_walls(walls);
            let m = g.metrics();
            for (k, stag) in [Staggering::Center, Staggering::UFace, Staggering::VFace, Staggering::Corner]
                .into_iter()
                .enumerate()
            {
                let x = random_field(&g, stag, 100 + k as u64);
                let check = |ax: Field, y: Field, aty: Field| {
                    let lhs = ax.dot(&y).unwrap();
                    let rhs = x.dot(&aty).unwrap();
                    assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{walls:?} {stag:?}: {lhs} vs {rhs}");
                };
                let y = random_field(&g, stag.toggle_x(), 200 + k as u64);
                check(ddx_m(&x, &m).unwrap(), y.clone(), ddx_adjoint(&y, &m).unwrap());
                check(interp_m(&x, stag.toggle_x(), &m).unwrap(), y.clone(), interp_adjoint(&y, stag, &m).unwrap());
                let y = random_field(&g, stag.toggle_y(), 300 + k as u64);
                check(ddy_m(&x, &m).unwrap(), y.clone(), ddy_adjoint(&y, &m).unwrap());
                check(interp_m(&x, stag.toggle_y(), &m).unwrap(), y.clone(), interp_adjoint(&y, stag, &m).unwrap());
                let y = random_field(&g, stag, 400 + k as u64);
                check(laplacian_m(&x, &m).unwrap(), y.clone(), laplacian_m(&y, &m).unwrap());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn operators_are_zonally_equivariant(seed in 0u64..1000, shift in 1usize..12) {
            let g = make_channel_grid(12, 6, 12.0, 6.0, 1.0, 1e-4, 0.0).unwrap();
            let f = random_field(&g, Staggering::Center, seed);
            let u = random_field(&g, Staggering::UFace, seed + 1);
            let fs = f.roll_x(shift);
            let us = u.roll_x(shift);
            prop_assert!(laplacian(&fs, &g).unwrap().bit_eq(&laplacian(&f, &g).unwrap().roll_x(shift)));
            prop_assert!(ddx(&fs, &g).unwrap().bit_eq(&ddx(&f, &g).unwrap().roll_x(shift)));
            prop_assert!(ddy(&fs, &g).unwrap().bit_eq(&ddy(&f, &g).unwrap().roll_x(shift)));
            prop_assert!(interp(&us, Staggering::Center, &g).unwrap()
                .bit_eq(&interp(&u, Staggering::Center, &g).unwrap().roll_x(shift)));
            // a full wrap is the identity
            prop_assert!(f.roll_x(g.nx).bit_eq(&f));
        }

        #[test]
        fn operators_are_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = make_channel_grid(9, 7, 9e3, 7e3, 10.0, 0.0, 0.0).unwrap();
            let f = random_field(&g, Staggering::Center, seed);
            let h = random_field(&g, Staggering::Center, seed + 7);
            let comb = f.zip_map(&h, |x, y| a * x + b * y).unwrap();
            type Op = fn(&Field, &GridSpec) -> Result<Field>;
            let ops: [Op; 3] = [laplacian, ddx, ddy];
            for op in ops {
                let lhs = op(&comb, &g).unwrap();
                let rhs = op(&f, &g).unwrap().zip_map(&op(&h, &g).unwrap(), |x, y| a * x + b * y).unwrap();
                let scale = lhs.max_abs().max(1e-300);
                for (x, y) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((x - y).abs() <= 1e-12 * scale);
                }
            }
        }

        #[test]
        fn divergence_sums_to_zero_with_walls(seed in 0u64..1000) {
            let g = make_channel_grid(10, 8, 1e6, 8e5, 100.0, 0.0, 0.0).unwrap();
            let u = random_field(&g, Staggering::UFace, seed);
            let v = random_field(&g, Staggering::VFace, seed + 3);
            let d = divergence(&u, &v, &g).unwrap();
            let total: f64 = d.sum();
            let scale: f64 = d.data().iter().map(|x| x.abs()).sum();
            prop_assert!(total.abs() <= 1e-12 * scale);
        }
    }
}
