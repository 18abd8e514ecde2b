//! Exact closed-string worldsheets in conformal gauge and the Jacobi fields
//! generated by their symmetries and moduli.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::background::minkowski;
use crate::field::{contract, Field, Slot};
use crate::geometry::{Embedding, GeometryBundle, GeometryError};
use crate::grid::{Grid, Mask};

/// Rows where R·|cos τ| falls below this are declared collapsed.
const COLLAPSE_RADIUS: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolutionError {
    #[error("parameter {name} = {value} must be positive and finite")]
    BadParameter { name: &'static str, value: f64 },
    #[error("unknown solution '{0}'")]
    UnknownSolution(String),
    #[error("solution '{solution}' has no family '{family}'")]
    UnknownFamily { solution: String, family: String },
    #[error("spacetime dimension {got} is below the solution's native dimension {native}")]
    DimensionTooSmall { got: usize, native: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolutionSpec {
    PulsatingCircularString {
        #[serde(rename = "R")]
        radius: f64,
    },
    RotatingFoldedString {
        #[serde(rename = "A")]
        amplitude: f64,
    },
}

/// A one-parameter family of embeddings through the solution. Its
/// derivative ∂X/∂λ projects onto the normals as a Jacobi field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    /// Constant spacetime translation c^μ.
    Translation { c: Vec<f64> },
    /// Lorentz boost along spatial axis `axis` (1-based coordinate index).
    Boost { axis: usize },
    /// Spatial rotation in the plane of coordinates `(a, b)`.
    Rotation { a: usize, b: usize },
    /// Derivative with respect to the solution's continuous parameter.
    Modulus,
    /// Rigid shift of σ; purely tangential.
    SigmaShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    spec: SolutionSpec,
}

pub fn pulsating_circular_string(radius: f64) -> Result<ExactSolution, SolutionError> {
    ExactSolution::new(SolutionSpec::PulsatingCircularString { radius })
}

pub fn rotating_folded_string(amplitude: f64) -> Result<ExactSolution, SolutionError> {
    ExactSolution::new(SolutionSpec::RotatingFoldedString { amplitude })
}

/// Names and parameters of every available solution.
pub fn catalogue() -> Vec<(&'static str, &'static str, &'static str)> {
    vec![
        (
            "pulsating_circular_string",
            "R",
            "X = (Rτ, R cos τ cos σ, R cos τ sin σ); collapses where cos τ = 0",
        ),
        (
            "rotating_folded_string",
            "A",
            "X = (Aτ, A cos σ cos τ, A cos σ sin τ); folds at σ = 0, π",
        ),
    ]
}

impl ExactSolution {
    pub fn new(spec: SolutionSpec) -> Result<Self, SolutionError> {
        let (name, value) = match spec {
            SolutionSpec::PulsatingCircularString { radius } => ("R", radius),
            SolutionSpec::RotatingFoldedString { amplitude } => ("A", amplitude),
        };
        if !(value.is_finite() && value > 0.0) {
            return Err(SolutionError::BadParameter { name, value });
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> SolutionSpec {
        self.spec
    }

    pub fn name(&self) -> &'static str {
        match self.spec {
            SolutionSpec::PulsatingCircularString { .. } => "pulsating_circular_string",
            SolutionSpec::RotatingFoldedString { .. } => "rotating_folded_string",
        }
    }

    fn parameter(&self) -> f64 {
        match self.spec {
            SolutionSpec::PulsatingCircularString { radius } => radius,
            SolutionSpec::RotatingFoldedString { amplitude } => amplitude,
        }
    }

    /// Dimension of the spacetime the solution natively lives in.
    pub fn native_dim(&self) -> usize {
        3
    }

    /// X^μ(τ, σ) padded with zeros to dimension `dim`.
    pub fn position(&self, tau: f64, sigma: f64, dim: usize) -> Vec<f64> {
        let p = self.parameter();
        let mut x = match self.spec {
            SolutionSpec::PulsatingCircularString { .. } => vec![
                p * tau,
                p * tau.cos() * sigma.cos(),
                p * tau.cos() * sigma.sin(),
            ],
            SolutionSpec::RotatingFoldedString { .. } => vec![
                p * tau,
                p * sigma.cos() * tau.cos(),
                p * sigma.cos() * tau.sin(),
            ],
        };
        x.resize(dim, 0.0);
        x
    }

    /// ∂X/∂λ for a family, evaluated at (τ, σ).
    pub fn family_vector(
        &self,
        family: &Family,
        tau: f64,
        sigma: f64,
        dim: usize,
    ) -> Result<Vec<f64>, SolutionError> {
        let unknown = || SolutionError::UnknownFamily {
            solution: self.name().into(),
            family: format!("{family:?}"),
        };
        let x = self.position(tau, sigma, dim);
        let mut v = vec![0.0; dim];
        match family {
            Family::Translation { c } => {
                if c.len() != dim {
                    return Err(unknown());
                }
                v.copy_from_slice(c);
            }
            Family::Boost { axis } => {
                if *axis == 0 || *axis >= dim {
                    return Err(unknown());
                }
                v[0] = x[*axis];
                v[*axis] = x[0];
            }
            Family::Rotation { a, b } => {
                if *a == 0 || *b == 0 || *a >= dim || *b >= dim || a == b {
                    return Err(unknown());
                }
                v[*a] = -x[*b];
                v[*b] = x[*a];
            }
            Family::Modulus => {
                let p = self.parameter();
                for (vi, xi) in v.iter_mut().zip(&x) {
                    *vi = xi / p;
                }
            }
            Family::SigmaShift => {
                let p = self.parameter();
                let d = match self.spec {
                    SolutionSpec::PulsatingCircularString { .. } => {
                        [0.0, -p * tau.cos() * sigma.sin(), p * tau.cos() * sigma.cos()]
                    }
                    SolutionSpec::RotatingFoldedString { .. } => {
                        [0.0, -p * sigma.sin() * tau.cos(), -p * sigma.sin() * tau.sin()]
                    }
                };
                v[..3].copy_from_slice(&d);
            }
        }
        Ok(v)
    }

    /// Points known in advance to be degenerate on this grid.
    pub fn declared_mask(&self, grid: &Grid) -> Result<Mask, SolutionError> {
        let p = self.parameter();
        let hs = grid.h_sigma();
        let mut mask = Mask::full(grid);
        match self.spec {
            SolutionSpec::PulsatingCircularString { .. } => {
                for i in 0..grid.n_tau() {
                    if p * grid.tau(i).cos().abs() < COLLAPSE_RADIUS {
                        let ns = grid.n_sigma() as isize;
                        mask.exclude_rect(i.saturating_sub(1), i + 1, 0, ns - 1);
                    }
                }
            }
            SolutionSpec::RotatingFoldedString { .. } => {
                for j in 0..grid.n_sigma() {
                    if grid.sigma(j).sin().abs() < 0.5 * hs {
                        mask.exclude_rect(0, grid.n_tau() - 1, j as isize - 1, j as isize + 1);
                    }
                }
            }
        }
        mask.validate().map_err(GeometryError::from)?;
        Ok(mask)
    }

    /// Sample the solution on a grid in Minkowski space of dimension `dim`.
    pub fn embed(&self, grid: &Arc<Grid>, dim: usize) -> Result<Embedding, SolutionError> {
        if dim < self.native_dim() {
            return Err(SolutionError::DimensionTooSmall {
                got: dim,
                native: self.native_dim(),
            });
        }
        let bg = minkowski(dim).map_err(GeometryError::from)?;
        let emb = Embedding::from_fn(bg, grid, |t, s| self.position(t, s, dim))?;
        Ok(emb.with_mask(self.declared_mask(grid)?)?)
    }

    /// Sample the solution after the worldsheet reparametrization
    /// σ → σ + ε f(σ).
    pub fn embed_reparametrized(
        &self,
        grid: &Arc<Grid>,
        dim: usize,
        eps: f64,
        f: &dyn Fn(f64) -> f64,
    ) -> Result<Embedding, SolutionError> {
        let base = self.embed(grid, dim)?;
        let emb = Embedding::from_fn(base.background().clone(), grid, |t, s| {
            self.position(t, s + eps * f(s), dim)
        })?;
        Ok(emb.with_mask(self.declared_mask(grid)?)?)
    }

    /// Jacobi field of a family on a geometry built from this solution,
    /// possibly reparametrized by σ → σ + ε f(σ).
    pub fn jacobi_reparametrized(
        &self,
        geo: &GeometryBundle,
        family: &Family,
        eps: f64,
        f: &dyn Fn(f64) -> f64,
    ) -> Result<Field, SolutionError> {
        let grid = geo.grid().clone();
        let dim = geo.background().dim();
        let np = grid.n_points();
        let mut xi = Field::zeros(&grid, vec![Slot::Spacetime(dim)]);
        for i in 0..grid.n_tau() {
            let t = grid.tau(i);
            for j in 0..grid.n_sigma() {
                let s = grid.sigma(j);
                let v = self.family_vector(family, t, s + eps * f(s), dim)?;
                let p = grid.point(i, j);
                for (mu, val) in v.iter().enumerate() {
                    xi.data_mut()[mu * np + p] = *val;
                }
            }
        }
        let mut phi = contract("i", &[(&geo.n_lower, "iu"), (&xi, "u")]);
        phi.zero_where(|p| !geo.mask.is_active(p));
        Ok(phi)
    }
}

/// φ^i = n^i_μ ∂X^μ/∂λ for a family through the solution.
pub fn jacobi_from_family(
    sol: &ExactSolution,
    geo: &GeometryBundle,
    family: &Family,
) -> Result<Field, SolutionError> {
    sol.jacobi_reparametrized(geo, family, 0.0, &|_| 0.0)
}

/// Conformal-gauge constraints (Ẋ·X′, Ẋ² + X′²) evaluated analytically at
/// (τ, σ) with centered differences of the closed form.
pub fn conformal_constraints(sol: &ExactSolution, tau: f64, sigma: f64) -> (f64, f64) {
    let h = 1e-4;
    let dim = sol.native_dim();
    let d = |dt: f64, ds: f64| {
        let p = sol.position(tau + dt, sigma + ds, dim);
        let m = sol.position(tau - dt, sigma - ds, dim);
        p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>()
    };
    let (xt, xs) = (d(h, 0.0), d(0.0, h));
    let dot = |a: &[f64], b: &[f64]| -a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    (dot(&xt, &xs), dot(&xt, &xt) + dot(&xs, &xs))
}

/// The wave operator (−∂_τ² + ∂_σ²)X^μ of the closed form, by second
/// differences.
pub fn wave_residual(sol: &ExactSolution, tau: f64, sigma: f64) -> f64 {
    let h = 1e-3;
    let dim = sol.native_dim();
    let tp = sol.position(tau + h, sigma, dim);
    let tm = sol.position(tau - h, sigma, dim);
    let sp = sol.position(tau, sigma + h, dim);
    let sm = sol.position(tau, sigma - h, dim);
    (0..dim)
        .map(|mu| ((sp[mu] + sm[mu] - tp[mu] - tm[mu]) / (h * h)).abs())
        .fold(0.0, f64::max)
}
