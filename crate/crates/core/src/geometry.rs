//! Worldsheet geometry of a discretized embedding: tangent frames, induced
//! metric, orthonormal normal frame, extrinsic curvature, intrinsic
//! curvature and the normal-bundle connection behind ˜∇ and ˜Δ.
//!
//! Conventions: signature (−,+,…,+); K_ab^i = −g(n^i, ∂_a e_b + Γ e_a e_b);
//! worldsheet Riemann R^e_{fdg} = ∂_dΓ^e_{fg} − ∂_gΓ^e_{fd} + ΓΓ − ΓΓ, so
//! that R_ab = R^c_{acb} and a round sphere has R > 0.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::background::{Background, BackgroundError};
use crate::field::{contract, Field, FieldError, Slot};
use crate::grid::{d_sigma, d_tau, Grid, GridError, Mask};

/// Gram determinants below this magnitude mark a degenerate point.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;
/// Minimum projected seed norm accepted when building normals.
pub const SEED_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Background(#[from] BackgroundError),
    #[error("embedding has {got} components but the background has dimension {dim}")]
    EmbeddingShape { got: usize, dim: usize },
    #[error("induced metric is not Lorentzian at tau index {tau_index}, sigma index {sigma_index} (det = {det:e})")]
    NotLorentzian {
        tau_index: usize,
        sigma_index: usize,
        det: f64,
    },
    #[error("normal frame construction broke down at tau index {tau_index}, sigma index {sigma_index}: {reason}")]
    NormalFrame {
        tau_index: usize,
        sigma_index: usize,
        reason: String,
    },
    #[error("field slots {got:?} are not normal-bundle slots for codimension {codim}")]
    NormalSlots { got: Vec<Slot>, codim: usize },
    #[error("spacetime-indexed fields have no worldsheet covariant derivative")]
    SpacetimeSlot,
}

/// A discretized map X^μ(τ, σ) into a background.
#[derive(Debug, Clone)]
pub struct Embedding {
    background: Arc<Background>,
    x: Field,
    declared_mask: Option<Mask>,
}

impl Embedding {
    pub fn new(background: Arc<Background>, x: Field) -> Result<Self, GeometryError> {
        let dim = background.dim();
        if x.slots() != [Slot::Spacetime(dim)] {
            return Err(GeometryError::EmbeddingShape {
                got: x.n_components(),
                dim,
            });
        }
        x.check_finite_where(|_| true)?;
        Ok(Self {
            background,
            x,
            declared_mask: None,
        })
    }

    pub fn from_fn(
        background: Arc<Background>,
        grid: &Arc<Grid>,
        f: impl Fn(f64, f64) -> Vec<f64>,
    ) -> Result<Self, GeometryError> {
        let dim = background.dim();
        let x = Field::from_fn(grid, vec![Slot::Spacetime(dim)], |t, s, i| f(t, s)[i[0]]);
        Self::new(background, x)
    }

    /// Attach a mask of points known in advance to be degenerate.
    pub fn with_mask(mut self, mask: Mask) -> Result<Self, GeometryError> {
        mask.check_grid(self.x.grid())?;
        mask.validate()?;
        self.declared_mask = Some(mask);
        Ok(self)
    }

    pub fn background(&self) -> &Arc<Background> {
        &self.background
    }

    pub fn x(&self) -> &Field {
        &self.x
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.x.grid()
    }

    pub fn declared_mask(&self) -> Option<&Mask> {
        self.declared_mask.as_ref()
    }

    pub fn codim(&self) -> usize {
        self.background.dim() - 2
    }

    /// The same embedding with displaced coordinates.
    pub fn with_x(&self, x: Field) -> Result<Self, GeometryError> {
        let mut out = Self::new(self.background.clone(), x)?;
        out.declared_mask = self.declared_mask.clone();
        Ok(out)
    }
}

/// Every derived geometric object of an embedding. Quantities at inactive
/// mask points are set to zero.
#[derive(Debug, Clone)]
pub struct GeometryBundle {
    pub embedding: Embedding,
    pub mask: Mask,
    /// Background metric g_μν along the embedding.
    pub metric: Field,
    /// e_a^μ, slots `[Lower, Spacetime]`.
    pub e: Field,
    pub gamma: Field,
    pub gamma_inv: Field,
    /// det γ_ab.
    pub det: Field,
    /// √−γ.
    pub vol: Field,
    /// Γ^a_bc, slots `[Upper, Lower, Lower]`.
    pub conn: Field,
    /// R^e_{fdg}, slots `[Upper, Lower, Lower, Lower]`.
    pub riem: Field,
    pub ricci: Field,
    pub scalar: Field,
    pub einstein: Field,
    /// n_i^μ, slots `[Normal, Spacetime]`.
    pub n: Field,
    /// n_{iμ} = g_μν n_i^ν.
    pub n_lower: Field,
    /// K_ab^i, slots `[Lower, Lower, Normal]`.
    pub k: Field,
    /// K^i = γ^ab K_ab^i.
    pub k_mean: Field,
    /// ω_a^{ij} = g(n^i, ∂_a n^j + Γ e_a n^j), slots `[Lower, Normal, Normal]`.
    pub normal_conn: Field,
}

/// Options controlling the normal-frame construction.
#[derive(Debug, Clone, Default)]
pub struct FrameOptions {
    /// Order in which coordinate basis vectors are tried as seeds; the
    /// default is `0, 1, …, N−1`.
    pub seed_order: Option<Vec<usize>>,
}

pub fn build_geometry(emb: &Embedding) -> Result<GeometryBundle, GeometryError> {
    build_geometry_with(emb, &FrameOptions::default())
}

pub fn build_geometry_with(
    emb: &Embedding,
    opts: &FrameOptions,
) -> Result<GeometryBundle, GeometryError> {
    let base = Intrinsic::new(emb)?;
    let n = normal_frame(&base, opts)?;
    base.finish(n)
}

/// Build the geometry with a caller-supplied orthonormal normal frame
/// `n_i^μ` (for instance a rotated copy of the default frame).
pub fn build_geometry_with_normals(
    emb: &Embedding,
    normals: Field,
) -> Result<GeometryBundle, GeometryError> {
    let base = Intrinsic::new(emb)?;
    let codim = emb.codim();
    let st = Slot::Spacetime(emb.background().dim());
    if normals.slots() != [Slot::Normal(codim), st] {
        return Err(GeometryError::NormalSlots {
            got: normals.slots().to_vec(),
            codim,
        });
    }
    base.finish(normals)
}

/// Tangent-frame data shared by every normal-frame choice.
struct Intrinsic<'a> {
    emb: &'a Embedding,
    mask: Mask,
    metric: Field,
    e: Field,
    gamma: Field,
    gamma_inv: Field,
    det: Field,
    vol: Field,
}

impl<'a> Intrinsic<'a> {
    fn new(emb: &'a Embedding) -> Result<Self, GeometryError> {
        let grid = emb.grid().clone();
        let x = emb.x();
        let e = Field::stack(Slot::Lower, &[d_tau(x), d_sigma(x)]);
        let metric = emb.background().metric_field(x);
        let gamma = contract("ab", &[(&metric, "uv"), (&e, "au"), (&e, "bv")]).symmetrize(0, 1);
        let (g00, g01, g11) = (gamma.comp(&[0, 0]), gamma.comp(&[0, 1]), gamma.comp(&[1, 1]));
        let det_data: Vec<f64> = (0..grid.n_points())
            .map(|p| g00[p] * g11[p] - g01[p] * g01[p])
            .collect();
        let det = Field::from_vec(&grid, vec![], det_data)?;

        let mut detected = Mask::full(&grid);
        for p in 0..grid.n_points() {
            if det.data()[p].abs() < DEGENERACY_THRESHOLD {
                let (i, j) = grid.coords(p);
                detected.exclude_rect(i.saturating_sub(1), i + 1, j as isize - 1, j as isize + 1);
            }
        }
        let mask = match emb.declared_mask() {
            Some(m) => m.intersect(&detected),
            None => detected,
        };
        mask.validate()?;
        for p in mask.iter_active() {
            if det.data()[p] >= 0.0 {
                let (tau_index, sigma_index) = grid.coords(p);
                return Err(GeometryError::NotLorentzian {
                    tau_index,
                    sigma_index,
                    det: det.data()[p],
                });
            }
        }

        let inactive = |p: usize| !mask.is_active(p);
        let mut gamma_inv = Field::from_fn(&grid, vec![Slot::Upper, Slot::Upper], |_, _, _| 0.0);
        for p in 0..grid.n_points() {
            let d = det.data()[p];
            let (a, b, c) = (g00[p], g01[p], g11[p]);
            let np = grid.n_points();
            let gi = gamma_inv.data_mut();
            gi[p] = c / d;
            gi[np + p] = -b / d;
            gi[2 * np + p] = -b / d;
            gi[3 * np + p] = a / d;
        }
        gamma_inv.zero_where(inactive);
        let mut vol = det.map(|d| (-d).sqrt());
        vol.zero_where(inactive);
        Ok(Self {
            emb,
            mask,
            metric,
            e,
            gamma,
            gamma_inv,
            det,
            vol,
        })
    }

    /// Remove the tangential part of a spacetime vector field.
    fn project_normal(&self, v: &Field) -> Field {
        let coeff = contract(
            "a",
            &[(&self.gamma_inv, "ab"), (&self.e, "bu"), (&self.metric, "uv"), (v, "v")],
        );
        v.sub(&contract("u", &[(&coeff, "a"), (&self.e, "au")]))
    }

    fn finish(self, n: Field) -> Result<GeometryBundle, GeometryError> {
        let grid = self.emb.grid().clone();
        let bg = self.emb.background().clone();
        let codim = self.emb.codim();
        let mask = self.mask;
        let inactive = |p: usize| !mask.is_active(p);
        let x = self.emb.x();

        let mut n = n;
        n.zero_where(inactive);
        let n_lower = contract("iu", &[(&self.metric, "uv"), (&n, "iv")]);

        // Accelerations ∂_a e_b with the background connection folded in.
        let e_tau = Field::stack(Slot::Spacetime(bg.dim()), &spacetime_parts(&self.e, 0));
        let e_sigma = Field::stack(Slot::Spacetime(bg.dim()), &spacetime_parts(&self.e, 1));
        let acc_rows = [
            Field::stack(Slot::Lower, &[d_tau(&e_tau), d_sigma(&e_tau)]),
            Field::stack(Slot::Lower, &[d_tau(&e_sigma), d_sigma(&e_sigma)]),
        ];
        // acc[b][a][μ] = ∂_a e_b^μ; relabel to [a][b][μ].
        let acc = contract("abu", &[(&Field::stack(Slot::Lower, &acc_rows), "bau")]);
        let mut acc = acc;
        if !bg.is_flat() {
            let chris = bg.christoffel_field(x);
            acc = acc.add(&contract(
                "abu",
                &[(&chris, "uvw"), (&self.e, "av"), (&self.e, "bw")],
            ));
        }
        let mut k = contract("abi", &[(&n_lower, "iu"), (&acc, "abu")])
            .scale(-1.0)
            .symmetrize(0, 1);
        k.zero_where(inactive);
        let k_mean = contract("i", &[(&self.gamma_inv, "ab"), (&k, "abi")]);

        let (conn, riem) = intrinsic_curvature(&self.gamma, &self.det, &mask);
        let ricci = contract("ab", &[(&riem, "cacb")]);
        let scalar = contract("", &[(&self.gamma_inv, "ab"), (&ricci, "ab")]);
        let einstein = ricci.sub(
            &contract("ab", &[(&self.gamma, "ab"), (&scalar, "")]).scale(0.5),
        );

        let mut normal_conn = Field::zeros(&grid, vec![Slot::Lower, Slot::Normal(codim), Slot::Normal(codim)]);
        if codim > 1 {
            let dn = Field::stack(Slot::Lower, &[d_tau(&n), d_sigma(&n)]);
            let mut w = contract("aij", &[(&n_lower, "iu"), (&dn, "aju")]);
            if !bg.is_flat() {
                let chris = bg.christoffel_field(x);
                w = w.add(&contract(
                    "aij",
                    &[(&n_lower, "iu"), (&chris, "uvw"), (&self.e, "av"), (&n, "jw")],
                ));
            }
            normal_conn = w.antisymmetrize(1, 2);
            normal_conn.zero_where(inactive);
        }

        Ok(GeometryBundle {
            embedding: self.emb.clone(),
            mask,
            metric: self.metric,
            e: self.e,
            gamma: self.gamma,
            gamma_inv: self.gamma_inv,
            det: self.det,
            vol: self.vol,
            conn,
            riem,
            ricci,
            scalar,
            einstein,
            n,
            n_lower,
            k,
            k_mean,
            normal_conn,
        })
    }
}

fn spacetime_parts(e: &Field, a: usize) -> Vec<Field> {
    let dim = e.slots()[1].dim();
    (0..dim).map(|mu| e.component(&[a, mu])).collect()
}

/// Worldsheet Christoffels Γ^a_bc and Riemann R^e_{fdg}.
///
/// Derivatives are taken of the adjugate numerators Γ̃ = adj(γ)·Γ_{d,bc},
/// which stay smooth where det γ vanishes, and divided by det γ pointwise.
fn intrinsic_curvature(gamma: &Field, det: &Field, mask: &Mask) -> (Field, Field) {
    let grid = gamma.grid().clone();
    let inactive = |p: usize| !mask.is_active(p);
    let dg = Field::stack(Slot::Lower, &[d_tau(gamma), d_sigma(gamma)]);
    // Γ_{d,bc} = ½(∂_b γ_dc + ∂_c γ_db − ∂_d γ_bc)
    let first = contract("dbc", &[(&dg, "bdc")])
        .add(&contract("dbc", &[(&dg, "cdb")]))
        .sub(&dg)
        .scale(0.5);
    let adj = Field::from_fn(&grid, vec![Slot::Upper, Slot::Upper], |_, _, _| 0.0);
    let mut adj = adj;
    {
        let np = grid.n_points();
        let (g00, g01, g11) = (gamma.comp(&[0, 0]), gamma.comp(&[0, 1]), gamma.comp(&[1, 1]));
        let a = adj.data_mut();
        for p in 0..np {
            a[p] = g11[p];
            a[np + p] = -g01[p];
            a[2 * np + p] = -g01[p];
            a[3 * np + p] = g00[p];
        }
    }
    let num = contract("abc", &[(&adj, "ad"), (&first, "dbc")]);
    let inv_det = det.map(|d| 1.0 / d);
    let mut conn = num.mul_scalar(&inv_det);
    conn.zero_where(inactive);

    // ∂_d Γ^e_fg = (∂_d Γ̃ · det − Γ̃ · ∂_d det) / det²
    let dnum = Field::stack(Slot::Lower, &[d_tau(&num), d_sigma(&num)]);
    let ddet = Field::stack(Slot::Lower, &[d_tau(det), d_sigma(det)]);
    let dconn = dnum
        .mul_scalar(&inv_det)
        .sub(&contract("defg", &[(&ddet, "d"), (&num, "efg")]).mul_scalar(&inv_det.map(|v| v * v)));
    let mut riem = contract("efdg", &[(&dconn, "defg")])
        .sub(&contract("efdg", &[(&dconn, "gefd")]))
        .add(&contract("efdg", &[(&conn, "edh"), (&conn, "hfg")]))
        .sub(&contract("efdg", &[(&conn, "egh"), (&conn, "hfd")]));
    riem.zero_where(inactive);
    (conn, riem)
}

/// Orthonormal normal frame. Coordinate basis vectors are tried as seeds in
/// order; a seed is used only if its normal projection keeps norm ≥
/// [`SEED_THRESHOLD`] at every active point, so the frame cannot flip sign
/// between neighbouring points. The last normal is the metric dual of the
/// remaining frame vectors, negated; on a closed string in three dimensions
/// this is the outward normal.
fn normal_frame(base: &Intrinsic<'_>, opts: &FrameOptions) -> Result<Field, GeometryError> {
    let grid = base.emb.grid().clone();
    let dim = base.emb.background().dim();
    let codim = dim - 2;
    let st = Slot::Spacetime(dim);
    let np = grid.n_points();
    let mask = &base.mask;
    let order: Vec<usize> = opts.seed_order.clone().unwrap_or_else(|| (0..dim).collect());

    let mut accepted: Vec<Field> = Vec::new();
    let mut last_failure = None;
    for &mu in &order {
        if accepted.len() + 1 == codim {
            break;
        }
        let seed = Field::from_fn(&grid, vec![st], |_, _, i| (i[0] == mu) as u8 as f64);
        let mut v = base.project_normal(&seed);
        for n in &accepted {
            let c = contract("", &[(&base.metric, "uv"), (n, "u"), (&v, "v")]);
            v = v.sub(&contract("u", &[(&c, ""), (n, "u")]));
        }
        let norm2 = contract("", &[(&base.metric, "uv"), (&v, "u"), (&v, "v")]);
        let worst = mask
            .iter_active()
            .map(|p| (norm2.data()[p].max(0.0).sqrt(), p))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
        if worst.0 < SEED_THRESHOLD {
            last_failure = Some(worst.1);
            continue;
        }
        accepted.push(v.div_scalar(&norm2.map(f64::sqrt)));
    }
    if accepted.len() + 1 != codim {
        let (tau_index, sigma_index) = grid.coords(last_failure.unwrap_or(0));
        return Err(GeometryError::NormalFrame {
            tau_index,
            sigma_index,
            reason: "every coordinate seed is parallel to the tangent span somewhere".into(),
        });
    }

    // Dual covector n_μ = ε_{μ α β ν…} e_τ^α e_σ^β n_1^ν …, computed as
    // cofactors of the matrix whose rows are the frame vectors.
    let mut rows: Vec<Vec<f64>> = vec![
        base.e.data()[0..dim * np].to_vec(),
        base.e.data()[dim * np..2 * dim * np].to_vec(),
    ];
    for n in &accepted {
        rows.push(n.data().to_vec());
    }
    let mut dual = Field::zeros(&grid, vec![st]);
    let flat_inverse = base.emb.background().is_flat().then(|| {
        let g = base.emb.background().metric_at(&vec![0.0; dim]);
        DMatrix::from_row_slice(dim, dim, &g).try_inverse().expect("flat metric is invertible")
    });
    for p in 0..np {
        if !mask.is_active(p) {
            continue;
        }
        let mut m = DMatrix::<f64>::zeros(dim, dim);
        for (r, row) in rows.iter().enumerate() {
            for mu in 0..dim {
                m[(r + 1, mu)] = row[mu * np + p];
            }
        }
        let mut low = vec![0.0; dim];
        for (mu, l) in low.iter_mut().enumerate() {
            let mut mm = m.clone();
            mm[(0, mu)] = 1.0;
            *l = mm.determinant();
        }
        let ginv = match &flat_inverse {
            Some(gi) => gi.clone(),
            None => {
                let g: Vec<f64> = (0..dim * dim).map(|c| base.metric.data()[c * np + p]).collect();
                DMatrix::from_row_slice(dim, dim, &g)
                    .try_inverse()
                    .ok_or_else(|| frame_error(&grid, p, "background metric is singular"))?
            }
        };
        let mut norm2 = 0.0;
        for mu in 0..dim {
            let up: f64 = (0..dim).map(|nu| ginv[(mu, nu)] * low[nu]).sum();
            dual.data_mut()[mu * np + p] = up;
            norm2 += up * low[mu];
        }
        if !(norm2 > 0.0) {
            return Err(frame_error(&grid, p, "dual normal is not spacelike"));
        }
        let s = -1.0 / norm2.sqrt();
        for mu in 0..dim {
            dual.data_mut()[mu * np + p] *= s;
        }
    }
    accepted.push(dual);
    Ok(Field::stack(Slot::Normal(codim), &accepted))
}

fn frame_error(grid: &Grid, p: usize, reason: &str) -> GeometryError {
    let (tau_index, sigma_index) = grid.coords(p);
    GeometryError::NormalFrame {
        tau_index,
        sigma_index,
        reason: reason.into(),
    }
}

impl GeometryBundle {
    pub fn grid(&self) -> &Arc<Grid> {
        self.e.grid()
    }

    pub fn codim(&self) -> usize {
        self.embedding.codim()
    }

    pub fn background(&self) -> &Arc<Background> {
        self.embedding.background()
    }

    /// K^{ab i} with both worldsheet indices raised.
    pub fn k_upper(&self) -> Field {
        contract(
            "abi",
            &[(&self.gamma_inv, "ac"), (&self.gamma_inv, "bd"), (&self.k, "cdi")],
        )
    }

    /// Scalar curvature from the Gauss relation in a flat background,
    /// K^i K_i − K_ab^i K^ab_i.
    pub fn gauss_scalar(&self) -> Field {
        let kk = contract("", &[(&self.k_upper(), "abi"), (&self.k, "abi")]);
        contract("", &[(&self.k_mean, "i"), (&self.k_mean, "i")]).sub(&kk)
    }

    /// Largest value of |f| over active points.
    pub fn max_active(&self, f: &Field) -> f64 {
        f.max_abs_where(|p| self.mask.is_active(p))
    }

    pub fn check_normal(&self, phi: &Field) -> Result<(), GeometryError> {
        let codim = self.codim();
        if phi.slots() != [Slot::Normal(codim)] {
            return Err(GeometryError::NormalSlots {
                got: phi.slots().to_vec(),
                codim,
            });
        }
        Ok(())
    }
}

/// Covariant derivative ˜∇_c acting on a tensor with worldsheet and normal
/// slots; the result has a new leading `Lower` slot.
pub fn tilde_cov(geo: &GeometryBundle, f: &Field) -> Result<Field, GeometryError> {
    if f.slots().iter().any(|s| matches!(s, Slot::Spacetime(_))) {
        return Err(GeometryError::SpacetimeSlot);
    }
    let mut out = Field::stack(Slot::Lower, &[d_tau(f), d_sigma(f)]);
    let labels: Vec<char> = "ABCDEFGH".chars().take(f.slots().len()).collect();
    let out_labels: String = std::iter::once('c').chain(labels.iter().copied()).collect();
    for (s, slot) in f.slots().iter().enumerate() {
        let mut inner = labels.clone();
        inner[s] = 'z';
        let inner: String = inner.into_iter().collect();
        let l = labels[s];
        match slot {
            Slot::Lower => {
                let conn_l = format!("zc{l}");
                out = out.sub(&contract(&out_labels, &[(&geo.conn, &conn_l), (f, &inner)]));
            }
            Slot::Upper => {
                let conn_l = format!("{l}cz");
                out = out.add(&contract(&out_labels, &[(&geo.conn, &conn_l), (f, &inner)]));
            }
            Slot::Normal(_) => {
                if geo.codim() > 1 {
                    let w_l = format!("c{l}z");
                    out = out.add(&contract(&out_labels, &[(&geo.normal_conn, &w_l), (f, &inner)]));
                }
            }
            Slot::Spacetime(_) => unreachable!(),
        }
    }
    // Output slot kinds follow the first factor's labels; restore the input's.
    let mut slots = vec![Slot::Lower];
    slots.extend_from_slice(f.slots());
    Ok(out.retag(slots))
}

/// (˜∇_a φ)^i = ∂_a φ^i + ω_a^{ij} φ^j for a normal vector field.
pub fn tilde_grad(geo: &GeometryBundle, phi: &Field) -> Result<Field, GeometryError> {
    geo.check_normal(phi)?;
    tilde_cov(geo, phi)
}

/// ˜Δφ in divergence form, (1/√−γ) ∂_a(√−γ γ^ab ˜∇_b φ) + ω_a (γ^ab ˜∇_b φ).
pub fn tilde_laplacian(geo: &GeometryBundle, phi: &Field) -> Result<Field, GeometryError> {
    let grad = tilde_grad(geo, phi)?;
    let up = contract("ai", &[(&geo.gamma_inv, "ab"), (&grad, "bi")]);
    let flux = up.mul_scalar(&geo.vol);
    let div = d_tau(&first_row(&flux, 0)).add(&d_sigma(&first_row(&flux, 1)));
    let inv_vol = geo.vol.map(|v| if v > 0.0 { 1.0 / v } else { 0.0 });
    let mut out = div.mul_scalar(&inv_vol);
    if geo.codim() > 1 {
        out = out.add(&contract("i", &[(&geo.normal_conn, "aij"), (&up, "aj")]));
    }
    out.zero_where(|p| !geo.mask.is_active(p));
    Ok(out)
}

/// ˜Δ as the trace of two covariant derivatives, γ^ab ˜∇_a ˜∇_b f, for any
/// worldsheet/normal tensor.
pub fn tilde_box(geo: &GeometryBundle, f: &Field) -> Result<Field, GeometryError> {
    let dd = tilde_cov(geo, &tilde_cov(geo, f)?)?;
    let labels: String = "ABCDEFGH".chars().take(f.slots().len()).collect();
    let mut out = contract(&labels, &[(&geo.gamma_inv, "ab"), (&dd, &format!("ab{labels}"))]);
    if !f.slots().is_empty() {
        out = out.retag(f.slots().to_vec());
    }
    Ok(out)
}

/// Slice a field with a leading worldsheet slot at component `a`.
fn first_row(f: &Field, a: usize) -> Field {
    let np = f.n_points();
    let slots = f.slots()[1..].to_vec();
    let nc: usize = slots.iter().map(|s| s.dim()).product();
    Field::from_vec(f.grid(), slots, f.data()[a * nc * np..(a + 1) * nc * np].to_vec())
        .expect("slice length")
}

/// Covariant divergence (1/√−γ) ∂_a(√−γ j^a) of a worldsheet vector.
pub fn divergence(geo: &GeometryBundle, j: &Field) -> Field {
    let flux = j.mul_scalar(&geo.vol);
    let div = d_tau(&first_row(&flux, 0)).add(&d_sigma(&first_row(&flux, 1)));
    let inv_vol = geo.vol.map(|v| if v > 0.0 { 1.0 / v } else { 0.0 });
    let mut out = div.mul_scalar(&inv_vol);
    out.zero_where(|p| !geo.mask.is_active(p));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::minkowski;

    fn cylinder(nt: usize, ns: usize) -> GeometryBundle {
        let g = Grid::new(nt, ns, 0.0, 1.0).unwrap();
        let emb = Embedding::from_fn(minkowski(3).unwrap(), &g, |t, s| vec![t, s.cos(), s.sin()]).unwrap();
        build_geometry(&emb).unwrap()
    }

    fn pulsating(nt: usize, ns: usize, dim: usize) -> GeometryBundle {
        let g = Grid::new(nt, ns, 0.1, 0.9).unwrap();
        let emb = Embedding::from_fn(minkowski(dim).unwrap(), &g, |t, s| {
            let mut x = vec![t, t.cos() * s.cos(), t.cos() * s.sin()];
            x.resize(dim, 0.0);
            x
        })
        .unwrap();
        build_geometry(&emb).unwrap()
    }

    #[test]
    fn cylinder_geometry() {
        let geo = cylinder(17, 16);
        let eta = Field::from_fn(geo.grid(), vec![Slot::Lower, Slot::Lower], |_, _, i| match (i[0], i[1]) {
            (0, 0) => -1.0,
            (1, 1) => 1.0,
            _ => 0.0,
        });
        assert!(geo.gamma.max_abs_diff(&eta) < 1e-12);
        // Outward normal, K_σσ = −g(n, ∂_σ∂_σ X) = +1.
        let p = geo.grid().point(4, 3);
        let s = geo.grid().sigma(3);
        assert!((geo.n.at(&[0, 1], p) - s.cos()).abs() < 1e-12);
        assert!((geo.k.at(&[1, 1, 0], p) - 1.0).abs() < 1e-12);
        assert!(geo.k.at(&[0, 0, 0], p).abs() < 1e-12);
        assert!(geo.scalar.max_abs() < 1e-10);
        assert!(geo.einstein.max_abs() < 1e-10);
    }

    #[test]
    fn pulsating_geometry() {
        let geo = pulsating(129, 32, 3);
        for p in [0, 500, geo.grid().n_points() - 1] {
            let (i, _) = geo.grid().coords(p);
            let t = geo.grid().tau(i);
            let c2 = t.cos().powi(2);
            assert!((geo.gamma.at(&[0, 0], p) + c2).abs() < 1e-9);
            assert!((geo.gamma.at(&[1, 1], p) - c2).abs() < 1e-12);
            assert!((geo.vol.data()[p] - c2).abs() < 1e-9);
        }
        assert!(geo.max_active(&geo.k_mean) <= 1e-6, "{}", geo.max_active(&geo.k_mean));
    }

    #[test]
    fn pulsating_curvatures_agree() {
        let geo = pulsating(129, 32, 3);
        let exact = Field::scalar_from_fn(geo.grid(), |t, _| -2.0 / t.cos().powi(4));
        let interior = geo.mask.without_tau_edges(4);
        let diff = geo.scalar.sub(&exact);
        assert!(diff.max_abs_where(|p| interior.is_active(p)) < 1e-6);
        let gauss = geo.gauss_scalar().sub(&geo.scalar);
        assert!(gauss.max_abs_where(|p| interior.is_active(p)) < 5e-6);
    }

    #[test]
    fn frame_is_orthonormal() {
        let geo = pulsating(33, 16, 4);
        let gram = contract("ij", &[(&geo.metric, "uv"), (&geo.n, "iu"), (&geo.n, "jv")]);
        let id = Field::from_fn(geo.grid(), vec![Slot::Normal(2), Slot::Normal(2)], |_, _, i| {
            (i[0] == i[1]) as u8 as f64
        });
        assert!(gram.max_abs_diff(&id) < 1e-10);
        let ne = contract("ia", &[(&geo.metric, "uv"), (&geo.n, "iu"), (&geo.e, "av")]);
        assert!(ne.max_abs() < 1e-10);
        let gg = contract("ac", &[(&geo.gamma_inv, "ab"), (&geo.gamma, "bc")]);
        let id2 = Field::from_fn(geo.grid(), vec![Slot::Upper, Slot::Lower], |_, _, i| {
            (i[0] == i[1]) as u8 as f64
        });
        assert!(gg.max_abs_diff(&id2) < 1e-10);
        let w = &geo.normal_conn;
        assert_eq!(w.add(&w.swap_slots(1, 2)).max_abs(), 0.0);
        assert_eq!(geo.k.sub(&geo.k.swap_slots(0, 1)).max_abs(), 0.0);
    }

    #[test]
    fn codimension_one_gradient_is_partial() {
        let geo = pulsating(17, 16, 3);
        let phi = Field::from_fn(geo.grid(), vec![Slot::Normal(1)], |t, s, _| t * s.sin());
        let g = tilde_grad(&geo, &phi).unwrap();
        let plain = Field::stack(Slot::Lower, &[d_tau(&phi), d_sigma(&phi)]);
        assert_eq!(g.max_abs_diff(&plain), 0.0);
        let c = Field::from_fn(geo.grid(), vec![Slot::Normal(1)], |_, _, _| 2.0);
        assert!(tilde_grad(&geo, &c).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn laplacian_on_cylinder() {
        let geo = cylinder(17, 16);
        let phi = Field::from_fn(geo.grid(), vec![Slot::Normal(1)], |_, s, _| s.sin());
        let lap = tilde_laplacian(&geo, &phi).unwrap();
        assert!(lap.max_abs_diff(&phi.scale(-1.0)) < 1e-10);
        let c = Field::from_fn(geo.grid(), vec![Slot::Normal(1)], |_, _, _| 1.0);
        assert!(tilde_laplacian(&geo, &c).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn laplacian_conformal_identity() {
        let geo = pulsating(129, 32, 3);
        let phi = Field::from_fn(geo.grid(), vec![Slot::Normal(1)], |t, s, _| t.exp() * (2.0 * s).cos());
        let lap = tilde_laplacian(&geo, &phi).unwrap();
        // Ω² = cos²τ, φ = f g with f = e^τ, g = cos 2σ.
        let exact = Field::from_fn(geo.grid(), vec![Slot::Normal(1)], |t, s, _| {
            (-t.exp() * (2.0 * s).cos() - 4.0 * t.exp() * (2.0 * s).cos()) / t.cos().powi(2)
        });
        let interior = geo.mask.without_tau_edges(4);
        assert!(lap.sub(&exact).max_abs_where(|p| interior.is_active(p)) < 1e-6);
        let boxed = tilde_box(&geo, &phi).unwrap();
        assert!(boxed.sub(&lap).max_abs_where(|p| interior.is_active(p)) < 1e-8);
    }

    #[test]
    fn rejects_wrong_normal_slots() {
        let geo = pulsating(17, 16, 3);
        let bad = Field::zeros(geo.grid(), vec![Slot::Normal(2)]);
        assert!(matches!(tilde_grad(&geo, &bad), Err(GeometryError::NormalSlots { .. })));
    }

    #[test]
    fn euclidean_sheet_is_rejected() {
        let g = Grid::new(9, 8, 0.0, 1.0).unwrap();
        // Purely spatial torus-like sheet: both tangents spacelike.
        let emb = Embedding::from_fn(minkowski(4).unwrap(), &g, |t, s| {
            vec![0.0, s.cos(), s.sin(), t]
        })
        .unwrap();
        assert!(matches!(build_geometry(&emb), Err(GeometryError::NotLorentzian { .. })));
    }
}
