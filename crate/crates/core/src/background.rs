//! Ambient spacetime: metric, Christoffel symbols and Riemann tensor as
//! analytic point evaluators, signature (−,+,…,+).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::field::{Field, Slot};

/// Point evaluator returning a flattened row-major tensor.
pub type Evaluator = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

const SYMMETRY_TOL: f64 = 1e-10;
const VALIDATION_SAMPLES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackgroundError {
    #[error("spacetime dimension {0} is too small; a string needs at least 3")]
    DimensionTooSmall(usize),
    #[error("{what} evaluator returned {got} values, expected {expected}")]
    EvaluatorShape {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("metric is not symmetric at {point:?}")]
    MetricNotSymmetric { point: Vec<f64> },
    #[error("metric at {point:?} has {negative} negative eigenvalues; exactly one is required")]
    NotLorentzian { point: Vec<f64>, negative: usize },
    #[error("Riemann tensor violates the {symmetry} symmetry at {point:?} (deviation {deviation:e})")]
    RiemannSymmetry {
        symmetry: &'static str,
        point: Vec<f64>,
        deviation: f64,
    },
    #[error("field dimensions do not match the background (dim {dim})")]
    DimensionMismatch { dim: usize },
}

#[derive(Clone)]
pub struct Background {
    dim: usize,
    metric: Evaluator,
    christoffel: Evaluator,
    riemann: Evaluator,
    flat: bool,
}

impl fmt::Debug for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Background")
            .field("dim", &self.dim)
            .field("flat", &self.flat)
            .finish_non_exhaustive()
    }
}

/// Flat Minkowski space of dimension `n`.
pub fn minkowski(n: usize) -> Result<Arc<Background>, BackgroundError> {
    if n < 3 {
        return Err(BackgroundError::DimensionTooSmall(n));
    }
    let metric: Evaluator = Arc::new(move |_| {
        let mut g = vec![0.0; n * n];
        g[0] = -1.0;
        for k in 1..n {
            g[k * n + k] = 1.0;
        }
        g
    });
    Ok(Arc::new(Background {
        dim: n,
        metric,
        christoffel: Arc::new(move |_| vec![0.0; n * n * n]),
        riemann: Arc::new(move |_| vec![0.0; n * n * n * n]),
        flat: true,
    }))
}

impl Background {
    /// A background from user-supplied analytic evaluators. The metric is
    /// checked for symmetry and Lorentzian signature and the Riemann tensor
    /// for its algebraic symmetries at deterministic sample points.
    pub fn custom(
        dim: usize,
        metric: Evaluator,
        christoffel: Evaluator,
        riemann: Evaluator,
    ) -> Result<Arc<Self>, BackgroundError> {
        if dim < 3 {
            return Err(BackgroundError::DimensionTooSmall(dim));
        }
        let bg = Background {
            dim,
            metric,
            christoffel,
            riemann,
            flat: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..VALIDATION_SAMPLES {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            bg.validate_at(&x)?;
        }
        Ok(Arc::new(bg))
    }

    fn validate_at(&self, x: &[f64]) -> Result<(), BackgroundError> {
        let n = self.dim;
        let g = (self.metric)(x);
        check_len("metric", g.len(), n * n)?;
        check_len("christoffel", (self.christoffel)(x).len(), n * n * n)?;
        let r = (self.riemann)(x);
        check_len("riemann", r.len(), n * n * n * n)?;
        for a in 0..n {
            for b in 0..a {
                if (g[a * n + b] - g[b * n + a]).abs() > SYMMETRY_TOL {
                    return Err(BackgroundError::MetricNotSymmetric { point: x.to_vec() });
                }
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &g));
        let negative = eig.eigenvalues.iter().filter(|v| **v < 0.0).count();
        if negative != 1 {
            return Err(BackgroundError::NotLorentzian {
                point: x.to_vec(),
                negative,
            });
        }
        let at = |a: usize, b: usize, c: usize, d: usize| r[((a * n + b) * n + c) * n + d];
        let mut worst = [0.0f64; 3];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        let v = at(a, b, c, d);
                        worst[0] = worst[0].max((v + at(b, a, c, d)).abs());
                        worst[1] = worst[1].max((v + at(a, b, d, c)).abs());
                        worst[2] = worst[2].max((v - at(c, d, a, b)).abs());
                    }
                }
            }
        }
        for (dev, name) in worst.iter().zip(["first-pair", "second-pair", "pair-exchange"]) {
            if *dev > SYMMETRY_TOL {
                return Err(BackgroundError::RiemannSymmetry {
                    symmetry: name,
                    point: x.to_vec(),
                    deviation: *dev,
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when the background is known to be flat; Γ and Riemann terms are
    /// then skipped altogether.
    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn metric_at(&self, x: &[f64]) -> Vec<f64> {
        (self.metric)(x)
    }

    /// Γ^λ_μν flattened as `[λ][μ][ν]`.
    pub fn christoffel_at(&self, x: &[f64]) -> Vec<f64> {
        (self.christoffel)(x)
    }

    /// R_αβγν, all indices down, flattened in that order.
    pub fn riemann_at(&self, x: &[f64]) -> Vec<f64> {
        (self.riemann)(x)
    }

    /// Metric components g_μν sampled along an embedding.
    pub fn metric_field(&self, x: &Field) -> Field {
        let n = self.dim;
        let st = Slot::Spacetime(n);
        if self.flat {
            let g0 = self.metric_at(&vec![0.0; n]);
            return Field::from_fn(x.grid(), vec![st, st], |_, _, i| g0[i[0] * n + i[1]]);
        }
        self.sample(x, vec![st, st], &self.metric)
    }

    /// Christoffel symbols Γ^λ_μν sampled along an embedding.
    pub fn christoffel_field(&self, x: &Field) -> Field {
        let st = Slot::Spacetime(self.dim);
        if self.flat {
            return Field::zeros(x.grid(), vec![st, st, st]);
        }
        self.sample(x, vec![st, st, st], &self.christoffel)
    }

    /// Riemann tensor R_αβγν sampled along an embedding.
    pub fn riemann_field(&self, x: &Field) -> Field {
        let st = Slot::Spacetime(self.dim);
        if self.flat {
            return Field::zeros(x.grid(), vec![st, st, st, st]);
        }
        self.sample(x, vec![st, st, st, st], &self.riemann)
    }

    fn sample(&self, x: &Field, slots: Vec<Slot>, eval: &Evaluator) -> Field {
        let n = self.dim;
        let np = x.n_points();
        let mut out = Field::zeros(x.grid(), slots);
        let nc = out.n_components();
        let mut pt = vec![0.0; n];
        for p in 0..np {
            for (mu, v) in pt.iter_mut().enumerate() {
                *v = x.data()[mu * np + p];
            }
            let vals = eval(&pt);
            for (c, v) in vals.iter().enumerate().take(nc) {
                out.data_mut()[c * np + p] = *v;
            }
        }
        out
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), BackgroundError> {
    if got != expected {
        return Err(BackgroundError::EvaluatorShape {
            what,
            got,
            expected,
        });
    }
    Ok(())
}

/// The frame components g(**R**(e_a, n_j) e_b, n_i) = R_αβγν n_j^α e_a^β
/// e_b^γ n_i^ν with slots `[a, b, i, j]`.
pub fn riemann_frame(
    bg: &Background,
    x: &Field,
    e: &Field,
    n: &Field,
) -> Result<Field, BackgroundError> {
    let dim = bg.dim();
    check_shapes(dim, x, e, n)?;
    let k = n.slots()[0];
    if bg.is_flat() {
        return Ok(Field::zeros(x.grid(), vec![Slot::Lower, Slot::Lower, k, k]));
    }
    let riem = bg.riemann_field(x);
    Ok(crate::field::contract(
        "abij",
        &[(&riem, "uvwz"), (n, "ju"), (e, "av"), (e, "bw"), (n, "iz")],
    ))
}

/// M^i_j = γ^ab g(**R**(e_a, n_j) e_b, n^i) with slots `[i, j]`.
pub fn riemann_contract(
    bg: &Background,
    x: &Field,
    e: &Field,
    n: &Field,
    gamma_inv: &Field,
) -> Result<Field, BackgroundError> {
    let frame = riemann_frame(bg, x, e, n)?;
    if bg.is_flat() {
        let k = n.slots()[0];
        return Ok(Field::zeros(x.grid(), vec![k, k]));
    }
    Ok(crate::field::contract("ij", &[(gamma_inv, "ab"), (&frame, "abij")]))
}

fn check_shapes(dim: usize, x: &Field, e: &Field, n: &Field) -> Result<(), BackgroundError> {
    let st = Slot::Spacetime(dim);
    let ok = x.slots() == [st]
        && e.slots() == [Slot::Lower, st]
        && n.slots().len() == 2
        && matches!(n.slots()[0], Slot::Normal(k) if k == dim - 2)
        && n.slots()[1] == st;
    if ok {
        Ok(())
    } else {
        Err(BackgroundError::DimensionMismatch { dim })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn eta(n: usize) -> Vec<f64> {
        let mut g = vec![0.0; n * n];
        g[0] = -1.0;
        for k in 1..n {
            g[k * n + k] = 1.0;
        }
        g
    }

    /// Constant-curvature form K(g_αγ g_βν − g_αν g_βγ) on a flat metric.
    fn constant_curvature(n: usize, kappa: f64) -> Arc<Background> {
        let g = eta(n);
        let riemann: Evaluator = Arc::new(move |_| {
            let mut r = vec![0.0; n * n * n * n];
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        for d in 0..n {
                            r[((a * n + b) * n + c) * n + d] =
                                kappa * (g[a * n + c] * g[b * n + d] - g[a * n + d] * g[b * n + c]);
                        }
                    }
                }
            }
            r
        });
        Background::custom(
            n,
            Arc::new(move |_| eta(n)),
            Arc::new(move |_| vec![0.0; n * n * n]),
            riemann,
        )
        .unwrap()
    }

    /// A flat sheet X = (τ, σ, 0, 0) with its coordinate frames.
    fn flat_sheet(n: usize) -> (Field, Field, Field, Field) {
        let g = Grid::new(9, 8, 0.0, 1.0).unwrap();
        let st = Slot::Spacetime(n);
        let x = Field::from_fn(&g, vec![st], |t, s, i| match i[0] {
            0 => t,
            1 => s,
            _ => 0.0,
        });
        let e = Field::from_fn(&g, vec![Slot::Lower, st], |_, _, i| (i[0] == i[1]) as u8 as f64);
        let nrm = Field::from_fn(&g, vec![Slot::Normal(n - 2), st], |_, _, i| {
            (i[1] == i[0] + 2) as u8 as f64
        });
        let ginv = Field::from_fn(&g, vec![Slot::Upper, Slot::Upper], |_, _, i| match (i[0], i[1]) {
            (0, 0) => -1.0,
            (1, 1) => 1.0,
            _ => 0.0,
        });
        (x, e, nrm, ginv)
    }

    #[test]
    fn minkowski_metric() {
        assert_eq!(minkowski(2).unwrap_err(), BackgroundError::DimensionTooSmall(2));
        let m3 = minkowski(3).unwrap();
        assert_eq!(m3.metric_at(&[0.3, 1.0, 2.0]), eta(3));
        assert!(m3.riemann_at(&[0.0; 3]).iter().all(|v| *v == 0.0));
        assert_eq!(minkowski(4).unwrap().metric_at(&[0.0; 4]), eta(4));
    }

    #[test]
    fn flat_contraction_vanishes() {
        let bg = minkowski(4).unwrap();
        let (x, e, n, ginv) = flat_sheet(4);
        let m = riemann_contract(&bg, &x, &e, &n, &ginv).unwrap();
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn constant_curvature_contraction() {
        // With the contraction R_αβγν n_j^α e_a^β e^aγ n_i^ν the constant
        // curvature form gives −K·D·δ_ij on orthonormal frames.
        let (x, e, n, ginv) = flat_sheet(4);
        let m = riemann_contract(&constant_curvature(4, 1.0), &x, &e, &n, &ginv).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { -2.0 } else { 0.0 };
                assert!((m.at(&[i, j], 7) - expect).abs() < 1e-14);
            }
        }
        let zero = riemann_contract(&constant_curvature(4, 0.0), &x, &e, &n, &ginv).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn rejects_bad_evaluators() {
        let euclid: Evaluator = Arc::new(|_| vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zero3: Evaluator = Arc::new(|_| vec![0.0; 27]);
        let zero4: Evaluator = Arc::new(|_| vec![0.0; 81]);
        assert!(matches!(
            Background::custom(3, euclid, zero3.clone(), zero4.clone()),
            Err(BackgroundError::NotLorentzian { negative: 0, .. })
        ));
        let bad_riemann: Evaluator = Arc::new(|_| {
            let mut r = vec![0.0; 81];
            r[1] = 1.0;
            r
        });
        assert!(matches!(
            Background::custom(3, Arc::new(|_| eta(3)), zero3.clone(), bad_riemann),
            Err(BackgroundError::RiemannSymmetry { .. })
        ));
        assert!(matches!(
            Background::custom(3, Arc::new(|_| eta(3)), zero3, Arc::new(|_| vec![0.0; 3])),
            Err(BackgroundError::EvaluatorShape { what: "riemann", .. })
        ));
    }

    #[test]
    fn contraction_is_frame_covariant() {
        // Rotate the two normals by a point-dependent angle: M transforms by
        // conjugation.
        let (x, e, n, ginv) = flat_sheet(4);
        let bg = constant_curvature(4, 0.7);
        let g = x.grid().clone();
        let rot = Field::from_fn(&g, vec![Slot::Normal(2), Slot::Normal(2)], |t, s, i| {
            let th = 0.3 + t * s.sin();
            match (i[0], i[1]) {
                (0, 0) | (1, 1) => th.cos(),
                (0, 1) => -th.sin(),
                _ => th.sin(),
            }
        });
        let n_rot = crate::field::contract("iu", &[(&rot, "ik"), (&n, "ku")]);
        let m = riemann_contract(&bg, &x, &e, &n, &ginv).unwrap();
        let m_rot = riemann_contract(&bg, &x, &e, &n_rot, &ginv).unwrap();
        let back = crate::field::contract("kl", &[(&rot, "ik"), (&m_rot, "ij"), (&rot, "jl")]);
        assert!(back.max_abs_diff(&m) < 1e-10);
    }
}
