//! Worldsheet discretization: a bounded window in τ times the periodic
//! σ-circle, with the derivative and quadrature kernels every other module
//! is built on.
//!
//! σ is differentiated spectrally (exact for trigonometric polynomials of
//! degree below `n_sigma / 2`), τ with fourth-order finite differences that
//! switch to one-sided stencils on the two outermost rows at each end.

use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use crate::field::Field;

pub const MIN_N_SIGMA: usize = 8;
pub const MIN_N_TAU: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("n_sigma = {0} must be even and at least {MIN_N_SIGMA}")]
    BadSigmaCount(usize),
    #[error("n_tau = {0} must be at least {MIN_N_TAU}")]
    BadTauCount(usize),
    #[error("tau window [{0}, {1}] is empty or not finite")]
    BadWindow(f64, f64),
    #[error("tau index {index} out of range for n_tau = {n_tau}")]
    TauIndexOutOfRange { index: usize, n_tau: usize },
    #[error("mask has {active} active points out of {total}; at least half are required")]
    MaskTooSparse { active: usize, total: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask shape {got:?} does not match grid shape {expected:?}")]
    MaskShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("field is not a scalar (has {0} index slots)")]
    NotScalar(usize),
    #[error("field lives on a different grid")]
    GridMismatch,
}

/// Periodic-σ × bounded-τ grid. σ has period 2π and starts at 0.
#[derive(Debug)]
pub struct Grid {
    n_tau: usize,
    n_sigma: usize,
    tau_min: f64,
    tau_max: f64,
    h_tau: f64,
    h_sigma: f64,
    /// First column of the circulant spectral differentiation matrix.
    spectral_kernel: Vec<f64>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.n_tau == other.n_tau
            && self.n_sigma == other.n_sigma
            && self.tau_min == other.tau_min
            && self.tau_max == other.tau_max
    }
}

impl Grid {
    pub fn new(
        n_tau: usize,
        n_sigma: usize,
        tau_min: f64,
        tau_max: f64,
    ) -> Result<Arc<Self>, GridError> {
        if n_sigma < MIN_N_SIGMA || n_sigma % 2 != 0 {
            return Err(GridError::BadSigmaCount(n_sigma));
        }
        if n_tau < MIN_N_TAU {
            return Err(GridError::BadTauCount(n_tau));
        }
        if !(tau_min.is_finite() && tau_max.is_finite() && tau_max > tau_min) {
            return Err(GridError::BadWindow(tau_min, tau_max));
        }
        let h_sigma = 2.0 * PI / n_sigma as f64;
        // Even-N periodic sinc differentiation: D[j][k] = c[(j - k) mod N]
        // with c[m] = ½ (-1)^m cot(m h / 2). The Nyquist mode is differentiated
        // to zero.
        let spectral_kernel = (0..n_sigma)
            .map(|m| {
                if m == 0 {
                    0.0
                } else {
                    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                    0.5 * sign / (0.5 * m as f64 * h_sigma).tan()
                }
            })
            .collect();
        Ok(Arc::new(Self {
            n_tau,
            n_sigma,
            tau_min,
            tau_max,
            h_tau: (tau_max - tau_min) / (n_tau - 1) as f64,
            h_sigma,
            spectral_kernel,
        }))
    }

    pub fn n_tau(&self) -> usize {
        self.n_tau
    }

    pub fn n_sigma(&self) -> usize {
        self.n_sigma
    }

    pub fn n_points(&self) -> usize {
        self.n_tau * self.n_sigma
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_max
    }

    pub fn h_tau(&self) -> f64 {
        self.h_tau
    }

    pub fn h_sigma(&self) -> f64 {
        self.h_sigma
    }

    pub fn tau(&self, i: usize) -> f64 {
        if i + 1 == self.n_tau {
            self.tau_max
        } else {
            self.tau_min + i as f64 * self.h_tau
        }
    }

    pub fn sigma(&self, j: usize) -> f64 {
        j as f64 * self.h_sigma
    }

    /// Flat point index of `(tau_index, sigma_index)`; σ wraps.
    #[inline]
    pub fn point(&self, i: usize, j: usize) -> usize {
        i * self.n_sigma + j % self.n_sigma
    }

    #[inline]
    pub fn coords(&self, p: usize) -> (usize, usize) {
        (p / self.n_sigma, p % self.n_sigma)
    }

    /// Spectral derivative along σ of one component stored point-major.
    pub(crate) fn d_sigma_raw(&self, src: &[f64], dst: &mut [f64]) {
        let ns = self.n_sigma;
        let c = &self.spectral_kernel;
        for (row_in, row_out) in src.chunks_exact(ns).zip(dst.chunks_exact_mut(ns)) {
            for (j, out) in row_out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, v) in row_in.iter().enumerate() {
                    acc += c[(j + ns - k) % ns] * v;
                }
                *out = acc;
            }
        }
    }

    /// Fourth-order finite difference along τ of one component.
    pub(crate) fn d_tau_raw(&self, src: &[f64], dst: &mut [f64]) {
        let (nt, ns) = (self.n_tau, self.n_sigma);
        let inv = 1.0 / (12.0 * self.h_tau);
        let at = |i: usize, j: usize| src[i * ns + j];
        for j in 0..ns {
            dst[j] = (-25.0 * at(0, j) + 48.0 * at(1, j) - 36.0 * at(2, j) + 16.0 * at(3, j)
                - 3.0 * at(4, j))
                * inv;
            dst[ns + j] = (-3.0 * at(0, j) - 10.0 * at(1, j) + 18.0 * at(2, j) - 6.0 * at(3, j)
                + at(4, j))
                * inv;
            for i in 2..nt - 2 {
                dst[i * ns + j] =
                    (at(i - 2, j) - 8.0 * at(i - 1, j) + 8.0 * at(i + 1, j) - at(i + 2, j)) * inv;
            }
            let l = nt - 1;
            dst[(l - 1) * ns + j] = (3.0 * at(l, j) + 10.0 * at(l - 1, j) - 18.0 * at(l - 2, j)
                + 6.0 * at(l - 3, j)
                - at(l - 4, j))
                * inv;
            dst[l * ns + j] = (25.0 * at(l, j) - 48.0 * at(l - 1, j) + 36.0 * at(l - 2, j)
                - 16.0 * at(l - 3, j)
                + 3.0 * at(l - 4, j))
                * inv;
        }
    }

    /// Trapezoid weights in τ (without the σ spacing).
    pub fn tau_weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.n_tau {
            0.5 * self.h_tau
        } else {
            self.h_tau
        }
    }

    /// Evaluate the σ trigonometric interpolant of one grid row at an
    /// arbitrary σ. The Nyquist mode is split symmetrically.
    pub fn interpolate_row(&self, row: &[f64], sigma: f64) -> f64 {
        let n = self.n_sigma;
        let half = n / 2;
        let mut acc = 0.0;
        for k in 0..=half {
            let (mut a, mut b) = (0.0, 0.0);
            for (j, v) in row.iter().enumerate() {
                let arg = k as f64 * self.sigma(j);
                a += v * arg.cos();
                b += v * arg.sin();
            }
            let (ck, sk) = ((k as f64 * sigma).cos(), (k as f64 * sigma).sin());
            let term = if k == 0 || k == half {
                a * ck / n as f64
            } else {
                2.0 * (a * ck + b * sk) / n as f64
            };
            acc += term;
        }
        acc
    }
}

/// Spectral derivative along σ, applied to every component.
pub fn d_sigma(f: &Field) -> Field {
    let grid = f.grid().clone();
    let np = grid.n_points();
    let mut out = Field::zeros(&grid, f.slots().to_vec());
    for (src, dst) in f
        .data()
        .chunks_exact(np)
        .zip(out.data_mut().chunks_exact_mut(np))
    {
        grid.d_sigma_raw(src, dst);
    }
    out
}

/// Fourth-order finite-difference derivative along τ, applied to every
/// component.
pub fn d_tau(f: &Field) -> Field {
    let grid = f.grid().clone();
    let np = grid.n_points();
    let mut out = Field::zeros(&grid, f.slots().to_vec());
    for (src, dst) in f
        .data()
        .chunks_exact(np)
        .zip(out.data_mut().chunks_exact_mut(np))
    {
        grid.d_tau_raw(src, dst);
    }
    out
}

/// Partial derivative along worldsheet coordinate `a` (0 = τ, 1 = σ).
pub fn partial(f: &Field, a: usize) -> Field {
    match a {
        0 => d_tau(f),
        1 => d_sigma(f),
        _ => panic!("worldsheet coordinate index {a} out of range"),
    }
}

/// Periodic trapezoid quadrature of a scalar over the σ-circle at one τ row.
pub fn integrate_sigma_slice(f: &Field, tau_index: usize) -> Result<f64, GridError> {
    if !f.is_scalar() {
        return Err(GridError::NotScalar(f.slots().len()));
    }
    let grid = f.grid();
    if tau_index >= grid.n_tau() {
        return Err(GridError::TauIndexOutOfRange {
            index: tau_index,
            n_tau: grid.n_tau(),
        });
    }
    let ns = grid.n_sigma();
    let row = &f.data()[tau_index * ns..(tau_index + 1) * ns];
    Ok(row.iter().sum::<f64>() * grid.h_sigma())
}

/// Trapezoid-in-τ × spectral-in-σ quadrature over the active points.
pub fn integrate_patch(f: &Field, mask: &Mask) -> Result<f64, GridError> {
    if !f.is_scalar() {
        return Err(GridError::NotScalar(f.slots().len()));
    }
    let grid = f.grid();
    mask.check_grid(grid)?;
    if mask.active_count() == 0 {
        return Err(GridError::EmptyMask);
    }
    let ns = grid.n_sigma();
    let mut total = 0.0;
    for i in 0..grid.n_tau() {
        let mut row = 0.0;
        for j in 0..ns {
            let p = i * ns + j;
            if mask.is_active(p) {
                row += f.data()[p];
            }
        }
        total += grid.tau_weight(i) * row;
    }
    Ok(total * grid.h_sigma())
}

/// Active-point mask. `true` marks points that take part in norms and
/// integrals; derivative stencils still read every point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    n_tau: usize,
    n_sigma: usize,
    active: Vec<bool>,
}

impl Mask {
    pub fn full(grid: &Grid) -> Self {
        Self {
            n_tau: grid.n_tau(),
            n_sigma: grid.n_sigma(),
            active: vec![true; grid.n_points()],
        }
    }

    /// Build a mask and enforce the half-active rule.
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self, GridError> {
        let mut active = Vec::with_capacity(grid.n_points());
        for i in 0..grid.n_tau() {
            for j in 0..grid.n_sigma() {
                active.push(f(i, j));
            }
        }
        let mask = Self {
            n_tau: grid.n_tau(),
            n_sigma: grid.n_sigma(),
            active,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let total = self.active.len();
        let active = self.active_count();
        if active == 0 {
            return Err(GridError::EmptyMask);
        }
        if 2 * active < total {
            return Err(GridError::MaskTooSparse { active, total });
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_tau, self.n_sigma)
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<(), GridError> {
        if self.shape() != (grid.n_tau(), grid.n_sigma()) {
            return Err(GridError::MaskShape {
                got: self.shape(),
                expected: (grid.n_tau(), grid.n_sigma()),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn is_active(&self, p: usize) -> bool {
        self.active[p]
    }

    pub fn is_active_at(&self, i: usize, j: usize) -> bool {
        self.active[i * self.n_sigma + j % self.n_sigma]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn row_active(&self, i: usize) -> bool {
        self.active[i * self.n_sigma..(i + 1) * self.n_sigma]
            .iter()
            .all(|a| *a)
    }

    /// Deactivate the rectangle `[i0, i1] × [j0, j1]` (σ indices wrap).
    pub fn exclude_rect(&mut self, i0: usize, i1: usize, j0: isize, j1: isize) {
        let ns = self.n_sigma as isize;
        for i in i0..=i1.min(self.n_tau - 1) {
            for j in j0..=j1 {
                let jj = j.rem_euclid(ns) as usize;
                self.active[i * self.n_sigma + jj] = false;
            }
        }
    }

    /// Deactivate the first and last `rows` τ rows.
    pub fn without_tau_edges(&self, rows: usize) -> Self {
        let mut out = self.clone();
        for i in 0..self.n_tau {
            if i < rows || i + rows >= self.n_tau {
                for j in 0..self.n_sigma {
                    out.active[i * self.n_sigma + j] = false;
                }
            }
        }
        out
    }

    pub fn intersect(&self, other: &Mask) -> Self {
        Self {
            n_tau: self.n_tau,
            n_sigma: self.n_sigma,
            active: self
                .active
                .iter()
                .zip(&other.active)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    /// Every inactive point of `self` is inactive in `other`.
    pub fn covered_by(&self, other: &Mask) -> bool {
        self.active
            .iter()
            .zip(&other.active)
            .all(|(a, b)| *a || !*b)
    }

    pub fn iter_active(&self) -> impl Iterator<Item = usize> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(p, a)| a.then_some(p))
    }
}
