//! The deformation operator: first variations of the worldsheet geometry
//! under δX = e_a φ^a + n_i φ^i, together with a brute-force central
//! difference oracle that rebuilds the geometry of displaced embeddings.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{contract, Field, Slot};
use crate::geometry::{build_geometry, tilde_cov, Embedding, GeometryBundle, GeometryError};
use crate::grid::Grid;

pub const MAX_DEFORM_EPS: f64 = 1e-2;
pub const ORACLE_EPS_RANGE: (f64, f64) = (1e-6, 1e-3);
pub const DEFAULT_ORACLE_EPS: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeformationError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("deformation amplitude {0} exceeds the perturbative bound {MAX_DEFORM_EPS}")]
    EpsilonTooLarge(f64),
    #[error("oracle step {0} is outside [{lo}, {hi}]", lo = ORACLE_EPS_RANGE.0, hi = ORACLE_EPS_RANGE.1)]
    OracleStep(f64),
    #[error("deformation field slots {normal:?} / {tangent:?} do not fit the geometry")]
    Shape { normal: Vec<Slot>, tangent: Vec<Slot> },
}

/// Normal components φ^i and tangential components φ^a of a variation.
#[derive(Debug, Clone)]
pub struct DeformationField {
    pub phi_normal: Field,
    pub phi_tangent: Field,
}

impl DeformationField {
    pub fn new(phi_normal: Field, phi_tangent: Field) -> Self {
        Self {
            phi_normal,
            phi_tangent,
        }
    }

    pub fn normal(phi: Field) -> Self {
        let grid = phi.grid().clone();
        Self::new(phi, Field::zeros(&grid, vec![Slot::Upper]))
    }

    pub fn tangent(codim: usize, phi: Field) -> Self {
        let grid = phi.grid().clone();
        Self::new(Field::zeros(&grid, vec![Slot::Normal(codim)]), phi)
    }

    pub fn scale(&self, a: f64) -> Self {
        Self::new(self.phi_normal.scale(a), self.phi_tangent.scale(a))
    }

    fn check(&self, geo: &GeometryBundle) -> Result<(), DeformationError> {
        if self.phi_normal.slots() != [Slot::Normal(geo.codim())]
            || self.phi_tangent.slots() != [Slot::Upper]
            || **self.phi_normal.grid() != **geo.grid()
        {
            return Err(DeformationError::Shape {
                normal: self.phi_normal.slots().to_vec(),
                tangent: self.phi_tangent.slots().to_vec(),
            });
        }
        Ok(())
    }

    /// δX^μ = e_a^μ φ^a + n_i^μ φ^i on the given geometry.
    pub fn displacement(&self, geo: &GeometryBundle) -> Result<Field, DeformationError> {
        self.check(geo)?;
        Ok(contract("u", &[(&geo.e, "au"), (&self.phi_tangent, "a")])
            .add(&contract("u", &[(&geo.n, "iu"), (&self.phi_normal, "i")])))
    }
}

/// Smooth random scalar: σ modes up to `kmax` with amplitude ∝ (1+k)^−2,
/// each modulated by a cubic in normalized τ. The sup norm is at most 1 and
/// the continuous field does not depend on `n_tau`.
pub fn random_scalar(grid: &Arc<Grid>, kmax: usize, rng: &mut ChaCha8Rng) -> Field {
    let mut coeffs = Vec::with_capacity((kmax + 1) * 2 * 4);
    for k in 0..=kmax {
        let amp = 1.0 / ((1 + k) as f64).powi(2);
        for _ in 0..2 * 4 {
            coeffs.push(amp * rng.gen_range(-1.0..1.0));
        }
    }
    let bound: f64 = coeffs.iter().map(|c| c.abs()).sum();
    let (t0, t1) = (grid.tau_min(), grid.tau_max());
    Field::scalar_from_fn(grid, |t, s| {
        let u = 2.0 * (t - t0) / (t1 - t0) - 1.0;
        let pw = [1.0, u, u * u, u * u * u];
        let mut v = 0.0;
        for k in 0..=kmax {
            let (c, sn) = ((k as f64 * s).cos(), (k as f64 * s).sin());
            let base = k * 8;
            for m in 0..4 {
                v += coeffs[base + m] * pw[m] * c + coeffs[base + 4 + m] * pw[m] * sn;
            }
        }
        v / bound
    })
}

/// Random smooth normal field with `codim` components, deterministic in
/// `seed`.
pub fn random_normal_field(geo: &GeometryBundle, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = geo.grid();
    let kmax = grid.n_sigma() / 4;
    let parts: Vec<Field> = (0..geo.codim())
        .map(|_| random_scalar(grid, kmax, &mut rng))
        .collect();
    Field::stack(Slot::Normal(geo.codim()), &parts)
}

/// Random smooth deformation with both normal and tangential parts.
pub fn random_deformation(geo: &GeometryBundle, seed: u64) -> DeformationField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = geo.grid();
    let kmax = grid.n_sigma() / 4;
    let normal: Vec<Field> = (0..geo.codim())
        .map(|_| random_scalar(grid, kmax, &mut rng))
        .collect();
    let tangent: Vec<Field> = (0..2)
        .map(|_| random_scalar(grid, kmax, &mut rng))
        .collect();
    DeformationField::new(
        Field::stack(Slot::Normal(geo.codim()), &normal),
        Field::stack(Slot::Upper, &tangent),
    )
}

/// X → X + ε(e_a φ^a + n_i φ^i) with frames from `geo`.
pub fn deform_embedding(
    geo: &GeometryBundle,
    d: &DeformationField,
    eps: f64,
) -> Result<Embedding, DeformationError> {
    if eps.abs() > MAX_DEFORM_EPS {
        return Err(DeformationError::EpsilonTooLarge(eps));
    }
    displace(geo, d, eps)
}

fn displace(geo: &GeometryBundle, d: &DeformationField, eps: f64) -> Result<Embedding, DeformationError> {
    let dx = d.displacement(geo)?;
    if eps == 0.0 {
        return Ok(geo.embedding.clone());
    }
    let mut x = geo.embedding.x().clone();
    x.axpy(eps, &dx);
    Ok(geo.embedding.with_x(x)?)
}

/// φ_a = γ_ab φ^b.
fn lower_tangent(geo: &GeometryBundle, d: &DeformationField) -> Field {
    contract("a", &[(&geo.gamma, "ab"), (&d.phi_tangent, "b")])
}

/// K_ab^j φ_j.
fn k_phi(geo: &GeometryBundle, d: &DeformationField) -> Field {
    contract("ab", &[(&geo.k, "abj"), (&d.phi_normal, "j")])
}

/// Variations of the metric: (**D**γ_ab, **D**γ^ab).
pub fn vary_metric(
    geo: &GeometryBundle,
    d: &DeformationField,
) -> Result<(Field, Field), DeformationError> {
    d.check(geo)?;
    let kphi = k_phi(geo, d);
    let grad = tilde_cov(geo, &lower_tangent(geo, d))?;
    let lower = kphi
        .scale(2.0)
        .add(&grad)
        .add(&grad.swap_slots(0, 1));
    let grad_up = contract("ab", &[(&geo.gamma_inv, "ac"), (&geo.gamma_inv, "bd"), (&grad, "cd")]);
    let kphi_up = contract("ab", &[(&geo.gamma_inv, "ac"), (&geo.gamma_inv, "bd"), (&kphi, "cd")]);
    let upper = kphi_up
        .scale(-2.0)
        .sub(&grad_up)
        .sub(&grad_up.swap_slots(0, 1));
    Ok((lower, upper))
}

/// **D**√−γ = √−γ [∇_a φ^a + K^i φ_i].
pub fn vary_volume(geo: &GeometryBundle, d: &DeformationField) -> Result<Field, DeformationError> {
    d.check(geo)?;
    let div = contract("", &[(&tilde_cov(geo, &d.phi_tangent)?, "aa")]);
    let kphi = contract("", &[(&geo.k_mean, "i"), (&d.phi_normal, "i")]);
    Ok(div.add(&kphi).mul_scalar(&geo.vol))
}

/// **D**Γ^a_gf, slots `[Upper a, Lower g, Lower f]`.
///
/// The curvature terms read R^e_{fdg} with the derivative pair last and
/// reversed relative to [`GeometryBundle::riem`], i.e. as R^e_{fgd} in the
/// convention used there.
pub fn vary_connection(geo: &GeometryBundle, d: &DeformationField) -> Result<Field, DeformationError> {
    d.check(geo)?;
    let s = k_phi(geo, d);
    let ds = tilde_cov(geo, &s)?; // [c, a, b] = ∇_c S_ab
    let normal_part = contract("agf", &[(&geo.gamma_inv, "ad"), (&ds, "fgd")])
        .add(&contract("agf", &[(&geo.gamma_inv, "ad"), (&ds, "gfd")]))
        .sub(&contract("agf", &[(&geo.gamma_inv, "ad"), (&ds, "dgf")]));

    let phi_low = lower_tangent(geo, d);
    let dd = tilde_cov(geo, &tilde_cov(geo, &phi_low)?)?; // [g, f, d] = ∇_g ∇_f φ_d
    let sym = contract("gfd", &[(&dd, "gfd")]).add(&contract("gfd", &[(&dd, "fgd")]));
    let r1 = contract("fdg", &[(&geo.riem, "efgd"), (&phi_low, "e")]);
    let r2 = contract("gdf", &[(&geo.riem, "egfd"), (&phi_low, "e")]);
    let bracket = sym
        .sub(&contract("gfd", &[(&r1, "fdg")]))
        .sub(&contract("gfd", &[(&r2, "gdf")]));
    let tangent_part = contract("agf", &[(&geo.gamma_inv, "ad"), (&bracket, "gfd")]).scale(0.5);
    Ok(normal_part.add(&tangent_part))
}

/// (**D**R_ab, **D**R) assembled from the connection variation.
pub fn vary_ricci_scalar(
    geo: &GeometryBundle,
    d: &DeformationField,
) -> Result<(Field, Field), DeformationError> {
    let dconn = vary_connection(geo, d)?;
    let nab = tilde_cov(geo, &dconn)?; // [c, a, b, d] = ∇_c DΓ^a_bd
    let d_ricci = contract("ab", &[(&nab, "ccab")]).sub(&contract("ab", &[(&nab, "bcac")]));
    let (_, d_ginv) = vary_metric(geo, d)?;
    let d_scalar = contract("", &[(&d_ginv, "ab"), (&geo.ricci, "ab")])
        .add(&contract("", &[(&geo.gamma_inv, "ab"), (&d_ricci, "ab")]));
    Ok((d_ricci, d_scalar))
}

/// Quantities the oracle can difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Metric,
    InverseMetric,
    Volume,
    Connection,
    Ricci,
    ScalarCurvature,
}

impl Quantity {
    pub const ALL: [Quantity; 6] = [
        Quantity::Metric,
        Quantity::InverseMetric,
        Quantity::Volume,
        Quantity::Connection,
        Quantity::Ricci,
        Quantity::ScalarCurvature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Metric => "metric",
            Quantity::InverseMetric => "inverse_metric",
            Quantity::Volume => "volume",
            Quantity::Connection => "connection",
            Quantity::Ricci => "ricci",
            Quantity::ScalarCurvature => "scalar_curvature",
        }
    }

    fn extract(self, geo: &GeometryBundle) -> Field {
        match self {
            Quantity::Metric => geo.gamma.clone(),
            Quantity::InverseMetric => geo.gamma_inv.clone(),
            Quantity::Volume => geo.vol.clone(),
            Quantity::Connection => geo.conn.clone(),
            Quantity::Ricci => geo.ricci.clone(),
            Quantity::ScalarCurvature => geo.scalar.clone(),
        }
    }
}

/// The analytic variation of a quantity.
pub fn analytic_variation(
    geo: &GeometryBundle,
    d: &DeformationField,
    q: Quantity,
) -> Result<Field, DeformationError> {
    Ok(match q {
        Quantity::Metric => vary_metric(geo, d)?.0,
        Quantity::InverseMetric => vary_metric(geo, d)?.1,
        Quantity::Volume => vary_volume(geo, d)?,
        Quantity::Connection => vary_connection(geo, d)?,
        Quantity::Ricci => vary_ricci_scalar(geo, d)?.0,
        Quantity::ScalarCurvature => vary_ricci_scalar(geo, d)?.1,
    })
}

/// Central difference (Q[X+εδX] − Q[X−εδX]) / 2ε, rebuilding the geometry
/// of both displaced embeddings from scratch.
pub fn fd_oracle(
    geo: &GeometryBundle,
    d: &DeformationField,
    q: Quantity,
    eps: f64,
) -> Result<Field, DeformationError> {
    if !(ORACLE_EPS_RANGE.0..=ORACLE_EPS_RANGE.1).contains(&eps) {
        return Err(DeformationError::OracleStep(eps));
    }
    let plus = build_geometry(&displace(geo, d, eps)?)?;
    let minus = build_geometry(&displace(geo, d, -eps)?)?;
    let mut out = q.extract(&plus).sub(&q.extract(&minus)).scale(0.5 / eps);
    out.zero_where(|p| !geo.mask.is_active(p));
    Ok(out)
}
