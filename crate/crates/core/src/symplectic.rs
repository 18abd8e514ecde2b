//! Bilinear symplectic current, its conservation, and the two-form ω on a
//! constant-τ slice.
//!
//! Grassmann-valued one-forms are represented by ordered pairs of ordinary
//! normal fields; every two-form is evaluated on the pair and then
//! antisymmetrized.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deformation::{deform_embedding, DeformationError, DeformationField, ORACLE_EPS_RANGE};
use crate::dynamics::{
    abs_sum, symplectic_potential_string, ActionParams, DynamicsError, LinearOperator,
};
use crate::field::{contract, Field, Slot};
use crate::geometry::{build_geometry, divergence, tilde_cov, tilde_grad, GeometryBundle, GeometryError};
use crate::grid::{integrate_sigma_slice, Grid, GridError};
use crate::solutions::{ExactSolution, Family, SolutionError};

/// Largest relative gap tolerated between the simplified current and the
/// sum of its pieces.
pub const SIMPLIFICATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymplecticError {
    #[error("slice τ-index {tau_index} is out of range for {n_tau} rows")]
    SliceOutOfRange { tau_index: usize, n_tau: usize },
    #[error("slice τ-index {tau_index} lies in the masked region")]
    MaskedSlice { tau_index: usize },
    #[error("circle map is not invertible on the grid: min (1 + ε f') = {min_slope:.3e}")]
    NonInvertible { min_slope: f64 },
    #[error("circle map amplitude {0} exceeds 1e-2")]
    MapTooLarge(f64),
    #[error("finite-difference step {0} is outside [{lo}, {hi}]", lo = ORACLE_EPS_RANGE.0, hi = ORACLE_EPS_RANGE.1)]
    Step(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Deformation(#[from] DeformationError),
    #[error(transparent)]
    Solution(#[from] SolutionError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn check_pair(geo: &GeometryBundle, phi1: &Field, phi2: &Field) -> Result<(), SymplecticError> {
    geo.check_normal(phi1)?;
    geo.check_normal(phi2)?;
    Ok(())
}

/// Shared derivative data for current evaluations.
struct Parts {
    k: Field,
    ku: Field,
    /// ∇_b K_cd^j, slots [b c d j].
    dk: Field,
    d1: Field,
    d2: Field,
}

impl Parts {
    fn new(geo: &GeometryBundle, phi1: &Field, phi2: &Field) -> Result<Self, SymplecticError> {
        Ok(Self {
            k: geo.k.clone(),
            ku: geo.k_upper(),
            dk: tilde_cov(geo, &geo.k)?,
            d1: tilde_grad(geo, phi1)?,
            d2: tilde_grad(geo, phi2)?,
        })
    }
}

fn finish(geo: &GeometryBundle, f: Field) -> Field {
    let mut f = f.retag(vec![Slot::Upper]);
    f.zero_where(|q| !geo.mask.is_active(q));
    f
}

/// The six current pieces j₁..j₆, each a worldsheet vector j^a.
pub fn current_pieces(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
) -> Result<[Field; 6], SymplecticError> {
    check_pair(geo, phi1, phi2)?;
    let (s, b) = (p.tension, p.gb_coupling);
    let gi = &geo.gamma_inv;
    let Parts { k, ku, dk, d1, d2 } = Parts::new(geo, phi1, phi2)?;

    let j1 = contract("a", &[(gi, "ab"), (&d1, "bi"), (phi2, "i")])
        .sub(&contract("a", &[(phi1, "i"), (gi, "ab"), (&d2, "bi")]))
        .scale(s);

    let j2 = contract("a", &[(&ku, "bci"), (&dk, "bcdj"), (gi, "ad"), (phi1, "i"), (phi2, "j")])
        .scale(4.0 * b);

    let j3 = contract("a", &[(&ku, "abi"), (&dk, "cbdj"), (gi, "cd"), (phi1, "i"), (phi2, "j")])
        .scale(4.0 * b);

    let dk_up = contract("bcai", &[(&dk, "befi"), (gi, "ce"), (gi, "af")]); // ∇_b K^{ca i}
    let j4 = contract("a", &[(&ku, "cbi"), (&k, "cdj"), (gi, "ad"), (phi1, "i"), (&d2, "bj")])
        .sub(&contract("a", &[(&dk_up, "bcai"), (&k, "cgj"), (gi, "gb"), (phi1, "i"), (phi2, "j")]))
        .sub(&contract("a", &[(&ku, "cai"), (&dk, "bcdj"), (gi, "bd"), (phi1, "i"), (phi2, "j")]))
        .sub(&contract("a", &[(&ku, "cai"), (&k, "cgj"), (gi, "gb"), (&d1, "bi"), (phi2, "j")]))
        .scale(4.0 * b);

    let j5 = contract("a", &[(&ku, "cdi"), (gi, "ab"), (&dk, "bcdj"), (phi1, "i"), (phi2, "j")])
        .scale(-4.0 * b);

    let kk = contract("ij", &[(&ku, "cdi"), (&k, "cdj")]);
    let grad_up_k = contract("acdi", &[(gi, "ab"), (gi, "ce"), (gi, "df"), (&dk, "befi")]); // ∇^a K^{cd i}
    let j6 = contract("a", &[(&kk, "ij"), (phi1, "i"), (gi, "ab"), (&d2, "bj")])
        .scale(-2.0)
        .add(&contract("a", &[(&grad_up_k, "acdi"), (&k, "cdj"), (phi1, "i"), (phi2, "j")]).scale(2.0))
        .add(&contract("a", &[(&ku, "cdi"), (gi, "ab"), (&dk, "bcdj"), (phi1, "i"), (phi2, "j")]).scale(2.0))
        .add(&contract("a", &[(&kk, "ij"), (gi, "ab"), (&d1, "bi"), (phi2, "j")]).scale(2.0))
        .scale(b);

    Ok([j1, j2, j3, j4, j5, j6].map(|f| finish(geo, f)))
}

/// The simplified current j^a(φ₁, φ₂), evaluated directly.
fn simplified_current(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
) -> Result<Field, SymplecticError> {
    let (s, b) = (p.tension, p.gb_coupling);
    let gi = &geo.gamma_inv;
    let Parts { k, ku, dk, d1, d2 } = Parts::new(geo, phi1, phi2)?;
    let w = contract("ij", &[(phi1, "i"), (phi2, "j")]); // φ₁_i φ₂_j
    let d2w = contract("bij", &[(phi1, "i"), (&d2, "bj")]); // φ₁_i ∇_b φ₂_j
    let d1w = contract("bij", &[(&d1, "bi"), (phi2, "j")]); // ∇_b φ₁_i φ₂_j
    let kk = contract("ij", &[(&ku, "cdi"), (&k, "cdj")]);

    // Covector-valued pieces, raised once at the end.
    let mut low = contract("b", &[(&d1w, "bii")])
        .sub(&contract("b", &[(&d2w, "bii")]))
        .scale(s);
    // −4β K^{cdi} ∇_a K_cd^j + 2β ∇_a K^{cdi} K_cd^j + 2β K^{cdi} ∇_a K_cd^j
    let kdk = contract("aij", &[(&ku, "cdi"), (&dk, "acdj")]);
    let dkk = contract("aij", &[(&dk, "aefi"), (gi, "ec"), (gi, "fd"), (&k, "cdj")]);
    let grads = kdk.scale(-2.0).add(&dkk.scale(2.0));
    low = low.add(&contract("a", &[(&grads, "aij"), (&w, "ij")]).scale(b));
    // −2β KK φ₁∇φ₂ + 2β KK ∇φ₁ φ₂
    low = low.add(
        &contract("a", &[(&kk, "ij"), (&d1w, "aij")])
            .sub(&contract("a", &[(&kk, "ij"), (&d2w, "aij")]))
            .scale(2.0 * b),
    );
    let mut up = contract("a", &[(gi, "ab"), (&low, "b")]);

    // Terms with the free index on a K factor.
    let t1 = contract("a", &[(&ku, "bci"), (&dk, "bcdj"), (gi, "ad"), (&w, "ij")]);
    let t2 = contract("a", &[(&ku, "cbi"), (&k, "cdj"), (gi, "ad"), (&d2w, "bij")]);
    let dk_up = contract("bcai", &[(&dk, "befi"), (gi, "ce"), (gi, "af")]);
    let t3 = contract("a", &[(&dk_up, "bcai"), (&k, "cgj"), (gi, "gb"), (&w, "ij")]);
    let t4 = contract("a", &[(&ku, "cai"), (&k, "cgj"), (gi, "gb"), (&d1w, "bij")]);
    up = up.add(&t1.add(&t2).sub(&t3).sub(&t4).scale(4.0 * b));
    Ok(finish(geo, up))
}

/// j^a(φ₁, φ₂) with the cross-check against the sum of its pieces.
#[derive(Debug, Clone)]
pub struct BilinearCurrent {
    pub j: Field,
    /// max |j − Σ pieces| / max(|j|, tiny).
    pub simplification_gap: f64,
}

pub fn bilinear_current(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
) -> Result<BilinearCurrent, SymplecticError> {
    check_pair(geo, phi1, phi2)?;
    let j = simplified_current(geo, phi1, phi2, p)?;
    let pieces = current_pieces(geo, phi1, phi2, p)?;
    let mut sum = pieces[0].clone();
    for piece in &pieces[1..] {
        sum = sum.add(piece);
    }
    let norm = pieces.iter().map(|f| f.max_abs()).fold(j.max_abs(), f64::max);
    let simplification_gap = j.max_abs_diff(&sum) / norm.max(f64::MIN_POSITIVE);
    Ok(BilinearCurrent {
        j,
        simplification_gap,
    })
}

/// ½[j(φ₁, φ₂) − j(φ₂, φ₁)].
pub fn antisymmetric_current(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
) -> Result<Field, SymplecticError> {
    let a = simplified_current(geo, phi1, phi2, p)?;
    let b = simplified_current(geo, phi2, phi1, p)?;
    Ok(a.sub(&b).scale(0.5))
}

/// Pointwise Green identity φ₁·Pφ₂ − Pφ₁·φ₂ − ∇_a j^a, with a scale for
/// relative comparisons.
#[derive(Debug, Clone)]
pub struct SelfAdjointness {
    pub residual: Field,
    /// max over active points of |φ₁| Σ|P terms φ₂| + |φ₂| Σ|P terms φ₁|.
    pub scale: f64,
}

pub fn self_adjointness_residual(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
) -> Result<SelfAdjointness, SymplecticError> {
    check_pair(geo, phi1, phi2)?;
    let op = LinearOperator::on_shell(geo, p)?;
    let p1 = op.apply(phi1)?;
    let p2 = op.apply(phi2)?;
    let j = simplified_current(geo, phi1, phi2, p)?;
    let mut residual = contract("", &[(phi1, "i"), (&p2, "i")])
        .sub(&contract("", &[(&p1, "i"), (phi2, "i")]))
        .sub(&divergence(geo, &j));
    residual.zero_where(|q| !geo.mask.is_active(q));
    let scale = abs_sum(phi1)
        .mul_scalar(&op.magnitude(phi2)?)
        .add(&abs_sum(phi2).mul_scalar(&op.magnitude(phi1)?));
    Ok(SelfAdjointness {
        residual,
        scale: geo.max_active(&scale),
    })
}

/// ∇_a j^a(φ₁, φ₂).
pub fn conservation_residual(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
) -> Result<Field, SymplecticError> {
    check_pair(geo, phi1, phi2)?;
    Ok(divergence(geo, &simplified_current(geo, phi1, phi2, p)?))
}

/// Two-form value on one constant-τ slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymplecticForm {
    pub value: f64,
    /// ∫√−γ j^τ(φ₁, φ₂) dσ before antisymmetrization.
    pub forward: f64,
    /// ∫√−γ j^τ(φ₂, φ₁) dσ.
    pub backward: f64,
    pub tau_index: usize,
}

fn check_slice(geo: &GeometryBundle, tau_index: usize) -> Result<(), SymplecticError> {
    let n_tau = geo.grid().n_tau();
    if tau_index >= n_tau {
        return Err(SymplecticError::SliceOutOfRange { tau_index, n_tau });
    }
    let ns = geo.grid().n_sigma();
    if (0..ns).any(|j| !geo.mask.is_active_at(tau_index, j)) {
        return Err(SymplecticError::MaskedSlice { tau_index });
    }
    Ok(())
}

fn slice_flux(geo: &GeometryBundle, j: &Field, tau_index: usize) -> Result<f64, SymplecticError> {
    let flux = j.component(&[0]).mul_scalar(&geo.vol);
    Ok(integrate_sigma_slice(&flux, tau_index)?)
}

/// ω = ½[∫√−γ j^τ(φ₁, φ₂) dσ − ∫√−γ j^τ(φ₂, φ₁) dσ] on the slice `tau_index`.
pub fn symplectic_form(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
    tau_index: usize,
) -> Result<SymplecticForm, SymplecticError> {
    check_pair(geo, phi1, phi2)?;
    check_slice(geo, tau_index)?;
    let forward = slice_flux(geo, &simplified_current(geo, phi1, phi2, p)?, tau_index)?;
    let backward = slice_flux(geo, &simplified_current(geo, phi2, phi1, p)?, tau_index)?;
    Ok(SymplecticForm {
        value: 0.5 * (forward - backward),
        forward,
        backward,
        tau_index,
    })
}

/// ω on every fully active slice, as (τ-index, ω).
pub fn omega_profile(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
) -> Result<Vec<(usize, f64)>, SymplecticError> {
    check_pair(geo, phi1, phi2)?;
    let j = antisymmetric_current(geo, phi1, phi2, p)?;
    let ns = geo.grid().n_sigma();
    (0..geo.grid().n_tau())
        .filter(|&i| (0..ns).all(|s| geo.mask.is_active_at(i, s)))
        .map(|i| Ok((i, slice_flux(geo, &j, i)?)))
        .collect()
}

/// Normal and tangential components of a fixed spacetime vector field on a
/// geometry.
fn decompose(geo: &GeometryBundle, v: &Field) -> DeformationField {
    let normal = contract("i", &[(&geo.n_lower, "iu"), (v, "u")]).retag(vec![Slot::Normal(geo.codim())]);
    let tangent = contract("a", &[(&geo.gamma_inv, "ab"), (&geo.e, "bu"), (&geo.metric, "uv"), (v, "v")])
        .retag(vec![Slot::Upper]);
    DeformationField::new(normal, tangent)
}

/// Exterior derivative of the potential, realized by central differences:
/// A(1,2) = [Ψ(X + εn φ₂; δX₁) − Ψ(X − εn φ₂; δX₁)] / 2ε with δX₁ = n φ₁
/// held fixed as a spacetime vector and re-split on each displaced
/// worldsheet. Returns A(1,2) − A(2,1).
pub fn potential_variation_current(
    geo: &GeometryBundle,
    phi1: &Field,
    phi2: &Field,
    p: &ActionParams,
    eps: f64,
) -> Result<Field, SymplecticError> {
    check_pair(geo, phi1, phi2)?;
    if !(ORACLE_EPS_RANGE.0..=ORACLE_EPS_RANGE.1).contains(&eps) {
        return Err(SymplecticError::Step(eps));
    }
    let one_way = |a: &Field, b: &Field| -> Result<Field, SymplecticError> {
        let va = contract("u", &[(&geo.n, "iu"), (a, "i")]);
        let db = DeformationField::normal(b.clone());
        let mut out: Option<Field> = None;
        for sign in [1.0, -1.0] {
            let moved = build_geometry(&deform_embedding(geo, &db, sign * eps)?)?;
            let psi = symplectic_potential_string(&moved, &decompose(&moved, &va), p)?;
            out = Some(match out {
                None => psi,
                Some(prev) => prev.sub(&psi),
            });
        }
        Ok(out.expect("two sides").scale(0.5 / eps))
    };
    let mut out = one_way(phi1, phi2)?.sub(&one_way(phi2, phi1)?);
    out.zero_where(|q| !geo.mask.is_active(q));
    Ok(out)
}

/// A circle map σ → σ + ε f(σ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CircleMap {
    Identity,
    /// Rigid rotation by `c`.
    Shift { c: f64 },
    /// f(σ) = sin(mσ + phase).
    Fourier { eps: f64, mode: u32, phase: f64 },
}

impl CircleMap {
    /// (ε, f) with the map reading σ → σ + ε f(σ).
    fn parts(&self) -> (f64, Box<dyn Fn(f64) -> f64>) {
        match *self {
            CircleMap::Identity => (0.0, Box::new(|_| 0.0)),
            CircleMap::Shift { c } => (1.0, Box::new(move |_| c)),
            CircleMap::Fourier { eps, mode, phase } => {
                let m = f64::from(mode);
                (eps, Box::new(move |s| (m * s + phase).sin()))
            }
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<(), SymplecticError> {
        if let CircleMap::Fourier { eps, mode, .. } = *self {
            if eps.abs() > 1e-2 || !eps.is_finite() {
                return Err(SymplecticError::MapTooLarge(eps));
            }
            let m = f64::from(mode);
            let min_slope = (0..grid.n_sigma())
                .map(|j| 1.0 + eps * m * (m * grid.sigma(j)).cos())
                .fold(f64::INFINITY, f64::min)
                .min(1.0 - eps.abs() * m);
            if min_slope <= 0.0 {
                return Err(SymplecticError::NonInvertible { min_slope });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaugeCheck {
    pub omega: f64,
    pub omega_mapped: f64,
    pub relative_change: f64,
}

/// Recompute ω for a pair of family Jacobi fields after reparametrizing the
/// worldsheet by a circle map, and compare on the same slice.
#[allow(clippy::too_many_arguments)]
pub fn gauge_invariance_check(
    sol: &ExactSolution,
    grid: &Arc<Grid>,
    dim: usize,
    fam1: &Family,
    fam2: &Family,
    p: &ActionParams,
    map: &CircleMap,
    tau_index: usize,
) -> Result<GaugeCheck, SymplecticError> {
    map.validate(grid)?;
    let (eps, f) = map.parts();
    let omega_on = |eps: f64| -> Result<f64, SymplecticError> {
        let geo = build_geometry(&sol.embed_reparametrized(grid, dim, eps, &*f)?)?;
        let a = sol.jacobi_reparametrized(&geo, fam1, eps, &*f)?;
        let b = sol.jacobi_reparametrized(&geo, fam2, eps, &*f)?;
        Ok(symplectic_form(&geo, &a, &b, p, tau_index)?.value)
    };
    let omega = omega_on(0.0)?;
    let omega_mapped = omega_on(eps)?;
    Ok(GaugeCheck {
        omega,
        omega_mapped,
        relative_change: (omega_mapped - omega).abs() / omega.abs().max(f64::MIN_POSITIVE),
    })
}

/// ω evaluated on every pair of a set of fields, with its singular values.
#[derive(Debug, Clone, Serialize)]
pub struct RankProbe {
    pub matrix: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
}

/// Diagnostic: the Gram matrix of ω on a small basis of fields.
pub fn rank_probe(
    geo: &GeometryBundle,
    fields: &[Field],
    p: &ActionParams,
    tau_index: usize,
) -> Result<RankProbe, SymplecticError> {
    let n = fields.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let w = symplectic_form(geo, &fields[a], &fields[b], p, tau_index)?.value;
            m[(a, b)] = w;
            m[(b, a)] = -w;
        }
    }
    let mut singular_values: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    singular_values.sort_by(|x, y| y.total_cmp(x));
    let matrix = (0..n).map(|a| (0..n).map(|b| m[(a, b)]).collect()).collect();
    Ok(RankProbe {
        matrix,
        singular_values,
    })
}
