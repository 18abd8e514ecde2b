//! Action, equations of motion, symplectic potential and the linearized
//! operator of the area + Gauss–Bonnet string.
//!
//! The linearized operator is coded twice. [`linearized_terms`] evaluates
//! every term of the general p-brane expression by direct contraction of
//! geometric fields. [`LinearOperator`] precomputes, per geometry, the
//! coefficient fields multiplying φ, ˜∇φ, ˜∇˜∇φ and ˜Δφ in each string-case
//! term and applies them to arbitrary fields. The two agree term by term to
//! roundoff, which is what makes the D = 2 reduction a real test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::background::{riemann_contract, riemann_frame, BackgroundError};
use crate::deformation::{
    deform_embedding, vary_connection, DeformationError, DeformationField, ORACLE_EPS_RANGE,
};
use crate::field::{contract, Field, Slot};
use crate::geometry::{
    build_geometry, tilde_cov, tilde_grad, tilde_laplacian, tilde_box, GeometryBundle,
    GeometryError,
};
use crate::grid::{integrate_patch, GridError, Mask};

/// Largest |K^i| at which a geometry counts as on-shell.
pub const ON_SHELL_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid action parameters: {0}")]
    Params(String),
    #[error("geometry is off-shell: max |K^i| = {residual:.3e} exceeds {threshold:.1e}")]
    OffShell { residual: f64, threshold: f64 },
    #[error("finite-difference step {0} is outside [{lo}, {hi}]", lo = ORACLE_EPS_RANGE.0, hi = ORACLE_EPS_RANGE.1)]
    Step(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Deformation(#[from] DeformationError),
    #[error(transparent)]
    Background(#[from] BackgroundError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Tension σ, Gauss–Bonnet coupling β and worldsheet dimension D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionParams {
    pub tension: f64,
    pub gb_coupling: f64,
    #[serde(default = "two")]
    pub worldsheet_dim: usize,
}

fn two() -> usize {
    2
}

impl ActionParams {
    pub fn new(tension: f64, gb_coupling: f64, worldsheet_dim: usize) -> Result<Self, DynamicsError> {
        let p = Self {
            tension,
            gb_coupling,
            worldsheet_dim,
        };
        p.validate()?;
        Ok(p)
    }

    /// String parameters (D = 2).
    pub fn string(tension: f64, gb_coupling: f64) -> Result<Self, DynamicsError> {
        Self::new(tension, gb_coupling, 2)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !self.tension.is_finite() || !self.gb_coupling.is_finite() {
            return Err(DynamicsError::Params("couplings must be finite".into()));
        }
        if self.tension < 0.0 {
            return Err(DynamicsError::Params(format!("tension {} is negative", self.tension)));
        }
        if self.tension == 0.0 && self.gb_coupling == 0.0 {
            return Err(DynamicsError::Params("tension and coupling both vanish".into()));
        }
        if self.worldsheet_dim != 2 {
            return Err(DynamicsError::Params(format!(
                "only two-dimensional worldsheets are supported, got D = {}",
                self.worldsheet_dim
            )));
        }
        Ok(())
    }

    pub fn with_coupling(&self, beta: f64) -> Self {
        Self {
            gb_coupling: beta,
            ..*self
        }
    }
}

/// S = −σ ∫√−γ + β ∫√−γ R over the active patch.
pub fn action_value(geo: &GeometryBundle, p: &ActionParams, mask: &Mask) -> Result<f64, DynamicsError> {
    let density = geo
        .scalar
        .map(|r| -p.tension + p.gb_coupling * r)
        .mul_scalar(&geo.vol);
    Ok(integrate_patch(&density, &mask.intersect(&geo.mask))?)
}

/// σ K^i + 2β G_ab K^{ab i}, zero at inactive points.
pub fn eom_residual(geo: &GeometryBundle, p: &ActionParams) -> Field {
    let gk = contract("i", &[(&geo.einstein, "ab"), (&geo.k_upper(), "abi")]);
    let mut out = geo.k_mean.scale(p.tension);
    out.axpy(2.0 * p.gb_coupling, &gk);
    out.zero_where(|q| !geo.mask.is_active(q));
    out
}

/// Largest mean curvature over active points.
pub fn mean_curvature_residual(geo: &GeometryBundle) -> f64 {
    geo.max_active(&geo.k_mean)
}

pub fn require_on_shell(geo: &GeometryBundle) -> Result<(), DynamicsError> {
    let residual = mean_curvature_residual(geo);
    if residual > ON_SHELL_THRESHOLD {
        return Err(DynamicsError::OffShell {
            residual,
            threshold: ON_SHELL_THRESHOLD,
        });
    }
    Ok(())
}

/// Ψ^a = √−γ [−σφ^a − 2βG^{ab}φ_b + βγ^{cd}**D**Γ^a_cd − βγ^{ab}**D**Γ^c_cb].
pub fn symplectic_potential(
    geo: &GeometryBundle,
    d: &DeformationField,
    p: &ActionParams,
) -> Result<Field, DynamicsError> {
    potential(geo, d, p, true)
}

/// The potential with the Einstein-tensor term dropped, as appropriate for
/// a two-dimensional worldsheet.
pub fn symplectic_potential_string(
    geo: &GeometryBundle,
    d: &DeformationField,
    p: &ActionParams,
) -> Result<Field, DynamicsError> {
    potential(geo, d, p, false)
}

fn potential(
    geo: &GeometryBundle,
    d: &DeformationField,
    p: &ActionParams,
    with_einstein: bool,
) -> Result<Field, DynamicsError> {
    let dconn = vary_connection(geo, d)?;
    let mut out = d.phi_tangent.scale(-p.tension);
    if with_einstein {
        let g_up = raise2(geo, &geo.einstein);
        let ge = contract("a", &[(&g_up, "ab"), (&geo.gamma, "bc"), (&d.phi_tangent, "c")]);
        out.axpy(-2.0 * p.gb_coupling, &ge);
    }
    let trace = contract("a", &[(&geo.gamma_inv, "cd"), (&dconn, "acd")]);
    let contracted = contract("a", &[(&geo.gamma_inv, "ab"), (&dconn, "ccb")]);
    out.axpy(p.gb_coupling, &trace);
    out.axpy(-p.gb_coupling, &contracted);
    let mut out = out.mul_scalar(&geo.vol).retag(vec![Slot::Upper]);
    out.zero_where(|q| !geo.mask.is_active(q));
    Ok(out)
}

fn raise2(geo: &GeometryBundle, t: &Field) -> Field {
    contract("ab", &[(&geo.gamma_inv, "ac"), (&geo.gamma_inv, "bd"), (t, "cd")])
        .retag(vec![Slot::Upper, Slot::Upper])
}

/// A named contribution to a linearized operator.
#[derive(Debug, Clone)]
pub struct Term {
    pub name: &'static str,
    pub value: Field,
}

/// Labels of the β-proportional string terms, in printed order. The first
/// eight (and the curvature term) survive on-shell.
pub const BETA_TERMS: [&str; 18] = [
    "K.ddK.phi",
    "K.dK.dphi[c]",
    "K.dK.dphi[b]",
    "K.K.ddphi",
    "K.lapK.phi",
    "K.dK.dphi[^c]",
    "K.K.lapphi",
    "K.ddH.phi",
    "K.dH.dphi",
    "K.H.ddphi",
    "K.K.R.phi",
    "Ric.K.phi.H",
    "H.lapH.phi",
    "H.dH.dphi",
    "H.H.lapphi",
    "H.ddK.phi",
    "H.dK.dphi",
    "H.K.ddphi",
];

/// Indices into [`BETA_TERMS`] that make up the on-shell operator P.
pub const ON_SHELL_TERMS: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 10];

/// Labels of the Einstein-tensor blocks of the general expression.
pub const EINSTEIN_TERMS: [&str; 4] = ["G.ddphi", "G.K.K.phi", "G.Riem.phi", "K.K.G.phi"];

/// Every term of the general linearization, grouped.
#[derive(Debug, Clone)]
pub struct LinearizedTerms {
    /// σ[−˜Δ − K_ab K^ab + background curvature]φ.
    pub tension: Field,
    pub einstein: Vec<Term>,
    pub beta: Vec<Term>,
}

impl LinearizedTerms {
    pub fn total(&self) -> Field {
        let mut out = self.tension.clone();
        for t in self.einstein.iter().chain(&self.beta) {
            out = out.add(&t.value);
        }
        out
    }

    /// Total without the Einstein-tensor blocks.
    pub fn string_total(&self) -> Field {
        let mut out = self.tension.clone();
        for t in &self.beta {
            out = out.add(&t.value);
        }
        out
    }

    /// Pointwise Σ|term| (summed over normal components).
    pub fn magnitude(&self) -> Field {
        let mut out = abs_sum(&self.tension);
        for t in self.einstein.iter().chain(&self.beta) {
            out = out.add(&abs_sum(&t.value));
        }
        out
    }
}

/// Σ_i |f^i| as a scalar field.
pub(crate) fn abs_sum(f: &Field) -> Field {
    let np = f.n_points();
    let mut out = vec![0.0; np];
    for c in f.data().chunks(np) {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v.abs();
        }
    }
    Field::from_vec(f.grid(), vec![], out).expect("scalar length")
}

fn check_phi(geo: &GeometryBundle, phi: &Field) -> Result<(), DynamicsError> {
    geo.check_normal(phi)?;
    if **phi.grid() != **geo.grid() {
        return Err(GeometryError::Field(crate::field::FieldError::GridMismatch).into());
    }
    Ok(())
}

/// Direct evaluation of every term of the general linearized equation.
pub fn linearized_terms(
    geo: &GeometryBundle,
    phi: &Field,
    p: &ActionParams,
) -> Result<LinearizedTerms, DynamicsError> {
    check_phi(geo, phi)?;
    let (s, b) = (p.tension, p.gb_coupling);
    let gi = &geo.gamma_inv;
    let k = &geo.k;
    let ku = geo.k_upper();
    let h = &geo.k_mean;
    let bg = geo.background();
    let x = geo.embedding.x();

    let dphi = tilde_grad(geo, phi)?;
    let ddphi = tilde_cov(geo, &dphi)?;
    let lapphi = tilde_laplacian(geo, phi)?;
    let dk = tilde_cov(geo, k)?;
    let ddk = tilde_cov(geo, &dk)?;
    let lapk = tilde_box(geo, k)?;
    let dh = tilde_grad(geo, h)?;
    let ddh = tilde_cov(geo, &dh)?;
    let laph = tilde_laplacian(geo, h)?;
    let m = riemann_contract(bg, x, &geo.e, &geo.n, gi)?;
    let frame = riemann_frame(bg, x, &geo.e, &geo.n)?;

    let kk_phi = contract("i", &[(&ku, "abi"), (k, "abj"), (phi, "j")]);
    let mut tension = lapphi.scale(-1.0).sub(&kk_phi);
    if !bg.is_flat() {
        tension = tension.add(&contract("i", &[(&m, "ij"), (phi, "j")]));
    }
    let tension = tension.scale(s);

    let g_up = raise2(geo, &geo.einstein);
    let einstein = vec![
        contract("i", &[(&g_up, "ab"), (&ddphi, "abi")]).scale(-2.0 * b),
        contract("i", &[(&g_up, "ab"), (k, "adi"), (gi, "de"), (k, "ebj"), (phi, "j")]).scale(2.0 * b),
        contract("i", &[(&g_up, "ab"), (&frame, "abij"), (phi, "j")]).scale(2.0 * b),
        contract("i", &[(&geo.einstein, "ab"), (gi, "be"), (k, "edi"), (&ku, "adj"), (phi, "j")])
            .scale(-8.0 * b),
    ];

    let beta = vec![
        contract("i", &[(&ku, "abi"), (gi, "cd"), (&ddk, "cbadj"), (phi, "j")]).scale(4.0 * b),
        contract("i", &[(&ku, "abi"), (gi, "cd"), (&dk, "badj"), (&dphi, "cj")]).scale(4.0 * b),
        contract("i", &[(&ku, "abi"), (gi, "cd"), (&dk, "cadj"), (&dphi, "bj")]).scale(4.0 * b),
        contract("i", &[(&ku, "abi"), (gi, "cd"), (k, "adj"), (&ddphi, "cbj")]).scale(4.0 * b),
        contract("i", &[(&ku, "abi"), (&lapk, "abj"), (phi, "j")]).scale(-2.0 * b),
        contract("i", &[(&ku, "abi"), (&dk, "cabj"), (gi, "cd"), (&dphi, "dj")]).scale(-4.0 * b),
        contract("i", &[(&ku, "abi"), (k, "abj"), (&lapphi, "j")]).scale(-2.0 * b),
        contract("i", &[(&ku, "abi"), (&ddh, "baj"), (phi, "j")]).scale(-2.0 * b),
        contract("i", &[(&ku, "abi"), (&dh, "aj"), (&dphi, "bj")]).scale(-4.0 * b),
        contract("i", &[(&ku, "abi"), (h, "j"), (&ddphi, "baj")]).scale(-2.0 * b),
        contract("i", &[(&ku, "abi"), (k, "abj"), (phi, "j")])
            .mul_scalar(&geo.scalar)
            .scale(-2.0 * b),
        contract("i", &[(&geo.ricci, "cd"), (&ku, "cdj"), (phi, "j"), (h, "i")]).scale(2.0 * b),
        contract("i", &[(h, "i"), (&laph, "j"), (phi, "j")]).scale(2.0 * b),
        contract("i", &[(h, "i"), (&dh, "cj"), (gi, "cd"), (&dphi, "dj")]).scale(4.0 * b),
        contract("i", &[(h, "i"), (h, "j"), (&lapphi, "j")]).scale(2.0 * b),
        contract("i", &[(h, "i"), (gi, "ge"), (gi, "cf"), (&ddk, "cgefj"), (phi, "j")]).scale(-2.0 * b),
        contract("i", &[(h, "i"), (gi, "ge"), (gi, "cf"), (&dk, "gefj"), (&dphi, "cj")]).scale(-4.0 * b),
        contract("i", &[(h, "i"), (&ku, "cgj"), (&ddphi, "cgj")]).scale(-2.0 * b),
    ];

    let normal = phi.slots().to_vec();
    let finish = |f: Field| {
        let mut f = f.retag(normal.clone());
        f.zero_where(|q| !geo.mask.is_active(q));
        f
    };
    Ok(LinearizedTerms {
        tension: finish(tension),
        einstein: EINSTEIN_TERMS
            .iter()
            .zip(einstein)
            .map(|(n, v)| Term { name: n, value: finish(v) })
            .collect(),
        beta: BETA_TERMS
            .iter()
            .zip(beta)
            .map(|(n, v)| Term { name: n, value: finish(v) })
            .collect(),
    })
}

/// Full general linearized residual (all terms summed).
pub fn linearized_residual(
    geo: &GeometryBundle,
    phi: &Field,
    p: &ActionParams,
) -> Result<Field, DynamicsError> {
    Ok(linearized_terms(geo, phi, p)?.total())
}

/// Coefficients of one operator term: c0 φ_j + c1^c ˜∇_c φ_j + c2^{cb} ˜∇_c˜∇_b φ_j + cl ˜Δφ_j.
#[derive(Debug, Clone)]
struct CoeffTerm {
    name: &'static str,
    c0: Option<Field>,
    c1: Option<Field>,
    c2: Option<Field>,
    cl: Option<Field>,
}

impl CoeffTerm {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            c0: None,
            c1: None,
            c2: None,
            cl: None,
        }
    }
    fn c0(mut self, f: Field) -> Self {
        self.c0 = Some(f);
        self
    }
    fn c1(mut self, f: Field) -> Self {
        self.c1 = Some(f);
        self
    }
    fn c2(mut self, f: Field) -> Self {
        self.c2 = Some(f);
        self
    }
    fn cl(mut self, f: Field) -> Self {
        self.cl = Some(f);
        self
    }
}

/// Derivatives of a normal field needed to apply an operator.
struct Jet {
    phi: Field,
    d: Field,
    dd: Field,
    lap: Field,
}

/// A linear operator on normal fields with precomputed coefficient fields.
#[derive(Debug, Clone)]
pub struct LinearOperator<'g> {
    geo: &'g GeometryBundle,
    tension: CoeffTerm,
    beta: Vec<CoeffTerm>,
}

impl<'g> LinearOperator<'g> {
    /// All string-case terms, valid off-shell.
    pub fn string(geo: &'g GeometryBundle, p: &ActionParams) -> Result<Self, DynamicsError> {
        p.validate()?;
        Self::build(geo, p, None)
    }

    /// The on-shell operator P, built from the string terms that do not
    /// carry a factor of the mean curvature.
    pub fn on_shell(geo: &'g GeometryBundle, p: &ActionParams) -> Result<Self, DynamicsError> {
        p.validate()?;
        require_on_shell(geo)?;
        Self::build(geo, p, Some(&ON_SHELL_TERMS))
    }

    fn build(
        geo: &'g GeometryBundle,
        p: &ActionParams,
        keep: Option<&[usize]>,
    ) -> Result<Self, DynamicsError> {
        let (s, b) = (p.tension, p.gb_coupling);
        let gi = &geo.gamma_inv;
        let k = &geo.k;
        let ku = geo.k_upper();
        let h = &geo.k_mean;
        let nn = Slot::Normal(geo.codim());

        let delta = Field::from_fn(geo.grid(), vec![nn, nn], |_, _, i| f64::from(u8::from(i[0] == i[1])));
        let kk = contract("ij", &[(&ku, "abi"), (k, "abj")]);
        let mut c0_tension = kk.scale(-s);
        if !geo.background().is_flat() {
            let m = riemann_contract(geo.background(), geo.embedding.x(), &geo.e, &geo.n, gi)?;
            c0_tension = c0_tension.add(&m.scale(s));
        }
        let tension = CoeffTerm::new("tension").c0(c0_tension).cl(delta.scale(-s));

        // K_a^{c j} with the worldsheet index raised after differentiation.
        let dk = tilde_cov(geo, k)?; // [c a b j]
        let ddk = tilde_cov(geo, &dk)?; // [c b a d j]
        let lapk = tilde_box(geo, k)?;
        let dh = tilde_grad(geo, h)?;
        let ddh = tilde_cov(geo, &dh)?;
        let laph = tilde_laplacian(geo, h)?;
        let k_mixed = contract("acj", &[(k, "adj"), (gi, "cd")]); // K_a^{cj}
        let dk_mixed = contract("bacj", &[(&dk, "badj"), (gi, "cd")]); // ∇_b K_a^{cj}
        let ddk_mixed = contract("cbaej", &[(&ddk, "cbadj"), (gi, "ed")]); // ∇_c∇_b K_a^{ej}
        let dk_up = contract("cj", &[(&dk, "gefj"), (gi, "ge"), (gi, "cf")]); // ∇_g K^{gcj}
        let ddk_up = contract("j", &[(&ddk, "cgefj"), (gi, "ge"), (gi, "cf")]); // ∇_c∇_g K^{gcj}
        let dh_up = contract("cj", &[(gi, "cd"), (&dh, "dj")]);

        let terms: Vec<CoeffTerm> = vec![
            CoeffTerm::new(BETA_TERMS[0]).c0(contract("ij", &[(&ku, "abi"), (&ddk_mixed, "cbacj")]).scale(4.0 * b)),
            CoeffTerm::new(BETA_TERMS[1]).c1(contract("cij", &[(&ku, "abi"), (&dk_mixed, "bacj")]).scale(4.0 * b)),
            CoeffTerm::new(BETA_TERMS[2]).c1(contract("bij", &[(&ku, "abi"), (&dk_mixed, "cacj")]).scale(4.0 * b)),
            CoeffTerm::new(BETA_TERMS[3]).c2(contract("cbij", &[(&ku, "abi"), (&k_mixed, "acj")]).scale(4.0 * b)),
            CoeffTerm::new(BETA_TERMS[4]).c0(contract("ij", &[(&ku, "abi"), (&lapk, "abj")]).scale(-2.0 * b)),
            CoeffTerm::new(BETA_TERMS[5]).c1(contract("dij", &[(&ku, "abi"), (&dk, "cabj"), (gi, "cd")]).scale(-4.0 * b)),
            CoeffTerm::new(BETA_TERMS[6]).cl(kk.scale(-2.0 * b)),
            CoeffTerm::new(BETA_TERMS[7]).c0(contract("ij", &[(&ku, "abi"), (&ddh, "baj")]).scale(-2.0 * b)),
            CoeffTerm::new(BETA_TERMS[8]).c1(contract("bij", &[(&ku, "abi"), (&dh, "aj")]).scale(-4.0 * b)),
            CoeffTerm::new(BETA_TERMS[9]).c2(contract("baij", &[(&ku, "abi"), (h, "j")]).scale(-2.0 * b)),
            CoeffTerm::new(BETA_TERMS[10]).c0(kk.mul_scalar(&geo.scalar).scale(-2.0 * b)),
            CoeffTerm::new(BETA_TERMS[11]).c0(contract("ij", &[(h, "i"), (&geo.ricci, "cd"), (&ku, "cdj")]).scale(2.0 * b)),
            CoeffTerm::new(BETA_TERMS[12]).c0(contract("ij", &[(h, "i"), (&laph, "j")]).scale(2.0 * b)),
            CoeffTerm::new(BETA_TERMS[13]).c1(contract("cij", &[(h, "i"), (&dh_up, "cj")]).scale(4.0 * b)),
            CoeffTerm::new(BETA_TERMS[14]).cl(contract("ij", &[(h, "i"), (h, "j")]).scale(2.0 * b)),
            CoeffTerm::new(BETA_TERMS[15]).c0(contract("ij", &[(h, "i"), (&ddk_up, "j")]).scale(-2.0 * b)),
            CoeffTerm::new(BETA_TERMS[16]).c1(contract("cij", &[(h, "i"), (&dk_up, "cj")]).scale(-4.0 * b)),
            CoeffTerm::new(BETA_TERMS[17]).c2(contract("cgij", &[(h, "i"), (&ku, "cgj")]).scale(-2.0 * b)),
        ];
        let beta = match keep {
            None => terms,
            Some(idx) => idx.iter().map(|&i| terms[i].clone()).collect(),
        };
        Ok(Self { geo, tension, beta })
    }

    pub fn term_names(&self) -> Vec<&'static str> {
        self.beta.iter().map(|t| t.name).collect()
    }

    fn jet(&self, phi: &Field) -> Result<Jet, DynamicsError> {
        check_phi(self.geo, phi)?;
        let d = tilde_grad(self.geo, phi)?;
        let dd = tilde_cov(self.geo, &d)?;
        let lap = tilde_laplacian(self.geo, phi)?;
        Ok(Jet {
            phi: phi.clone(),
            d,
            dd,
            lap,
        })
    }

    fn pieces(&self, t: &CoeffTerm, jet: &Jet) -> Vec<Field> {
        let slots = jet.phi.slots().to_vec();
        let mut out = Vec::with_capacity(4);
        if let Some(c) = &t.c0 {
            out.push(contract("i", &[(c, "ij"), (&jet.phi, "j")]));
        }
        if let Some(c) = &t.c1 {
            out.push(contract("i", &[(c, "cij"), (&jet.d, "cj")]));
        }
        if let Some(c) = &t.c2 {
            out.push(contract("i", &[(c, "cbij"), (&jet.dd, "cbj")]));
        }
        if let Some(c) = &t.cl {
            out.push(contract("i", &[(c, "ij"), (&jet.lap, "j")]));
        }
        out.into_iter()
            .map(|f| {
                let mut f = f.retag(slots.clone());
                f.zero_where(|q| !self.geo.mask.is_active(q));
                f
            })
            .collect()
    }

    fn apply_one(&self, t: &CoeffTerm, jet: &Jet) -> Field {
        let mut out = Field::zeros(self.geo.grid(), jet.phi.slots().to_vec());
        for f in self.pieces(t, jet) {
            out = out.add(&f);
        }
        out
    }

    /// Tension part and each β term applied to φ.
    pub fn apply_terms(&self, phi: &Field) -> Result<(Field, Vec<Term>), DynamicsError> {
        let jet = self.jet(phi)?;
        let tension = self.apply_one(&self.tension, &jet);
        let beta = self
            .beta
            .iter()
            .map(|t| Term {
                name: t.name,
                value: self.apply_one(t, &jet),
            })
            .collect();
        Ok((tension, beta))
    }

    pub fn apply(&self, phi: &Field) -> Result<Field, DynamicsError> {
        let (mut out, beta) = self.apply_terms(phi)?;
        for t in &beta {
            out = out.add(&t.value);
        }
        Ok(out)
    }

    /// The β-proportional part alone.
    pub fn apply_beta(&self, phi: &Field) -> Result<Field, DynamicsError> {
        let (t, beta) = self.apply_terms(phi)?;
        let mut out = Field::zeros(self.geo.grid(), t.slots().to_vec());
        for b in &beta {
            out = out.add(&b.value);
        }
        Ok(out)
    }

    /// Pointwise Σ|piece| over every coefficient piece of every term, so
    /// that cancellations inside a term do not shrink the scale.
    pub fn magnitude(&self, phi: &Field) -> Result<Field, DynamicsError> {
        let jet = self.jet(phi)?;
        let mut out = Field::zeros(self.geo.grid(), vec![]);
        for t in std::iter::once(&self.tension).chain(&self.beta) {
            for f in self.pieces(t, &jet) {
                out = out.add(&abs_sum(&f));
            }
        }
        Ok(out)
    }
}

/// The string-case linearized residual from precomputed coefficients.
pub fn linearized_residual_string(
    geo: &GeometryBundle,
    phi: &Field,
    p: &ActionParams,
) -> Result<Field, DynamicsError> {
    LinearOperator::string(geo, p)?.apply(phi)
}

/// P^{ij} φ_j on an on-shell geometry.
pub fn p_operator_apply(
    geo: &GeometryBundle,
    phi: &Field,
    p: &ActionParams,
) -> Result<Field, DynamicsError> {
    LinearOperator::on_shell(geo, p)?.apply(phi)
}

/// Central difference of the equations of motion along δX = ε φ^i n_i,
/// with the displaced residuals projected back onto the undisplaced normal
/// frame.
pub fn eom_variation_fd(
    geo: &GeometryBundle,
    phi: &Field,
    p: &ActionParams,
    eps: f64,
) -> Result<Field, DynamicsError> {
    check_phi(geo, phi)?;
    if !(ORACLE_EPS_RANGE.0..=ORACLE_EPS_RANGE.1).contains(&eps) {
        return Err(DynamicsError::Step(eps));
    }
    let d = DeformationField::normal(phi.clone());
    let side = |e: f64| -> Result<Field, DynamicsError> {
        let moved = build_geometry(&deform_embedding(geo, &d, e)?)?;
        let overlap = contract("ij", &[(&geo.n_lower, "iu"), (&moved.n, "ju")]);
        Ok(contract("i", &[(&overlap, "ij"), (&eom_residual(&moved, p), "j")]))
    };
    let mut out = side(eps)?.sub(&side(-eps)?).scale(0.5 / eps).retag(phi.slots().to_vec());
    out.zero_where(|q| !geo.mask.is_active(q));
    Ok(out)
}
