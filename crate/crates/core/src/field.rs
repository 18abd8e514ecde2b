//! Tensor fields on the worldsheet grid.
//!
//! A field stores one dense array per index component, component-major:
//! `data[comp * n_points + p]` with `p = tau_index * n_sigma + sigma_index`.
//! Index slots carry their kind so that contractions can check dimensions
//! and derivative operators know which connection to apply.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::Grid;

/// Kind of one index slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Covariant worldsheet index (dimension 2).
    Lower,
    /// Contravariant worldsheet index (dimension 2).
    Upper,
    /// Normal-bundle index; the normal frame is orthonormal so position is
    /// immaterial.
    Normal(usize),
    /// Spacetime index of the given dimension.
    Spacetime(usize),
}

impl Slot {
    pub fn dim(self) -> usize {
        match self {
            Slot::Lower | Slot::Upper => 2,
            Slot::Normal(k) | Slot::Spacetime(k) => k,
        }
    }

    fn compatible(self, other: Slot) -> bool {
        self.dim() == other.dim()
            && matches!(
                (self, other),
                (Slot::Lower | Slot::Upper, Slot::Lower | Slot::Upper)
                    | (Slot::Normal(_), Slot::Normal(_))
                    | (Slot::Spacetime(_), Slot::Spacetime(_))
            )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("data length {got} does not match expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("factor {factor}: label string {labels:?} has {got} labels but the field has {expected} slots")]
    LabelCount {
        factor: usize,
        labels: String,
        got: usize,
        expected: usize,
    },
    #[error("label '{label}' is used with incompatible slots {first:?} and {second:?}")]
    LabelClash { label: char, first: Slot, second: Slot },
    #[error("output label '{0}' does not occur in any factor")]
    UnboundLabel(char),
    #[error("output label '{0}' is repeated")]
    RepeatedOutput(char),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("slot mismatch: {0:?} vs {1:?}")]
    SlotMismatch(Vec<Slot>, Vec<Slot>),
    #[error("non-finite value at tau index {tau_index}, sigma index {sigma_index}")]
    NonFinite { tau_index: usize, sigma_index: usize },
}

#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    slots: Vec<Slot>,
    data: Vec<f64>,
}

fn n_components(slots: &[Slot]) -> usize {
    slots.iter().map(|s| s.dim()).product()
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>, slots: Vec<Slot>) -> Self {
        let len = n_components(&slots) * grid.n_points();
        Self {
            grid: grid.clone(),
            slots,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(grid: &Arc<Grid>, slots: Vec<Slot>, data: Vec<f64>) -> Result<Self, FieldError> {
        let expected = n_components(&slots) * grid.n_points();
        if data.len() != expected {
            return Err(FieldError::Length {
                got: data.len(),
                expected,
            });
        }
        Ok(Self {
            grid: grid.clone(),
            slots,
            data,
        })
    }

    pub fn scalar_from_fn(grid: &Arc<Grid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid, vec![]);
        for i in 0..grid.n_tau() {
            let t = grid.tau(i);
            for j in 0..grid.n_sigma() {
                out.data[grid.point(i, j)] = f(t, grid.sigma(j));
            }
        }
        out
    }

    /// Build a field from `f(tau, sigma, component) -> value`, where the
    /// component is the flat (row-major over slots) index.
    pub fn from_fn(
        grid: &Arc<Grid>,
        slots: Vec<Slot>,
        f: impl Fn(f64, f64, &[usize]) -> f64,
    ) -> Self {
        let mut out = Self::zeros(grid, slots);
        let np = grid.n_points();
        let shape: Vec<usize> = out.slots.iter().map(|s| s.dim()).collect();
        let mut idx = vec![0usize; shape.len()];
        for c in 0..out.n_components() {
            unflatten(c, &shape, &mut idx);
            for i in 0..grid.n_tau() {
                let t = grid.tau(i);
                for j in 0..grid.n_sigma() {
                    out.data[c * np + grid.point(i, j)] = f(t, grid.sigma(j), &idx);
                }
            }
        }
        out
    }

    /// Stack scalar fields into one field with a single leading slot.
    pub fn stack(slot: Slot, parts: &[Field]) -> Self {
        assert_eq!(parts.len(), slot.dim(), "stack: wrong number of parts");
        let grid = parts[0].grid.clone();
        let inner = parts[0].slots.clone();
        let mut slots = vec![slot];
        slots.extend(inner.iter().copied());
        let mut data = Vec::with_capacity(parts.len() * parts[0].data.len());
        for p in parts {
            assert!(Arc::ptr_eq(&p.grid, &grid) || *p.grid == *grid);
            assert_eq!(p.slots, inner, "stack: parts have different slots");
            data.extend_from_slice(&p.data);
        }
        Self { grid, slots, data }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_components(&self) -> usize {
        n_components(&self.slots)
    }

    pub fn n_points(&self) -> usize {
        self.grid.n_points()
    }

    /// Flat component index of a multi-index.
    pub fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.slots.len());
        let mut c = 0;
        for (i, s) in idx.iter().zip(&self.slots) {
            debug_assert!(*i < s.dim());
            c = c * s.dim() + i;
        }
        c
    }

    pub fn comp(&self, idx: &[usize]) -> &[f64] {
        let np = self.n_points();
        let c = self.flat(idx);
        &self.data[c * np..(c + 1) * np]
    }

    pub fn comp_mut(&mut self, idx: &[usize]) -> &mut [f64] {
        let np = self.n_points();
        let c = self.flat(idx);
        &mut self.data[c * np..(c + 1) * np]
    }

    pub fn at(&self, idx: &[usize], p: usize) -> f64 {
        self.data[self.flat(idx) * self.n_points() + p]
    }

    /// Extract one component as a scalar field.
    pub fn component(&self, idx: &[usize]) -> Field {
        Field {
            grid: self.grid.clone(),
            slots: vec![],
            data: self.comp(idx).to_vec(),
        }
    }

    /// Same data, different slot tags (dimensions must agree).
    pub fn retag(mut self, slots: Vec<Slot>) -> Self {
        assert_eq!(
            self.slots.iter().map(|s| s.dim()).collect::<Vec<_>>(),
            slots.iter().map(|s| s.dim()).collect::<Vec<_>>(),
            "retag: dimension change"
        );
        self.slots = slots;
        self
    }

    fn check_same(&self, other: &Field) {
        assert!(
            *self.grid == *other.grid,
            "field arithmetic across different grids"
        );
        assert_eq!(self.slots, other.slots, "field arithmetic with different slots");
    }

    pub fn add(&self, other: &Field) -> Field {
        self.check_same(other);
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.check_same(other);
        self.zip_map(other, |a, b| a - b)
    }

    pub fn axpy(&mut self, a: f64, x: &Field) {
        self.check_same(x);
        for (y, x) in self.data.iter_mut().zip(&x.data) {
            *y += a * x;
        }
    }

    pub fn scale(&self, a: f64) -> Field {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid.clone(),
            slots: self.slots.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        Field {
            grid: self.grid.clone(),
            slots: self.slots.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Multiply every component pointwise by a scalar field.
    pub fn mul_scalar(&self, s: &Field) -> Field {
        assert!(s.is_scalar(), "mul_scalar: factor is not a scalar");
        assert!(*self.grid == *s.grid, "mul_scalar: grid mismatch");
        let np = self.n_points();
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(np) {
            for (v, w) in chunk.iter_mut().zip(&s.data) {
                *v *= w;
            }
        }
        out
    }

    /// Divide every component pointwise by a scalar field.
    pub fn div_scalar(&self, s: &Field) -> Field {
        self.mul_scalar(&s.map(|v| 1.0 / v))
    }

    /// Set every component to zero at the given points.
    pub fn zero_where(&mut self, inactive: impl Fn(usize) -> bool) {
        let np = self.n_points();
        for chunk in self.data.chunks_exact_mut(np) {
            for (p, v) in chunk.iter_mut().enumerate() {
                if inactive(p) {
                    *v = 0.0;
                }
            }
        }
    }

    /// Symmetrize over two slots of the same kind.
    pub fn symmetrize(&self, s0: usize, s1: usize) -> Field {
        self.add(&self.swap_slots(s0, s1)).scale(0.5)
    }

    /// Antisymmetrize over two slots of the same kind.
    pub fn antisymmetrize(&self, s0: usize, s1: usize) -> Field {
        self.sub(&self.swap_slots(s0, s1)).scale(0.5)
    }

    /// Exchange the values of two index slots (a transpose).
    pub fn swap_slots(&self, s0: usize, s1: usize) -> Field {
        assert!(self.slots[s0].compatible(self.slots[s1]));
        let shape: Vec<usize> = self.slots.iter().map(|s| s.dim()).collect();
        let np = self.n_points();
        let mut out = self.clone();
        let mut idx = vec![0; shape.len()];
        for c in 0..self.n_components() {
            unflatten(c, &shape, &mut idx);
            idx.swap(s0, s1);
            let src = self.flat(&idx);
            out.data[c * np..(c + 1) * np].copy_from_slice(&self.data[src * np..(src + 1) * np]);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.check_same(other);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest absolute value over all components at the points `keep`
    /// accepts.
    pub fn max_abs_where(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let np = self.n_points();
        let mut m: f64 = 0.0;
        for chunk in self.data.chunks_exact(np) {
            for (p, v) in chunk.iter().enumerate() {
                if keep(p) {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }

    /// Reject non-finite values at the points `keep` accepts.
    pub fn check_finite_where(&self, keep: impl Fn(usize) -> bool) -> Result<(), FieldError> {
        let np = self.n_points();
        for chunk in self.data.chunks_exact(np) {
            for (p, v) in chunk.iter().enumerate() {
                if keep(p) && !v.is_finite() {
                    let (tau_index, sigma_index) = self.grid.coords(p);
                    return Err(FieldError::NonFinite {
                        tau_index,
                        sigma_index,
                    });
                }
            }
        }
        Ok(())
    }
}

fn unflatten(mut c: usize, shape: &[usize], idx: &mut [usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] = c % shape[k];
        c /= shape[k];
    }
}

/// Einstein-summation contraction. Each factor carries one label per slot;
/// labels repeated across (or within) factors and absent from `out` are
/// summed. The output slot kinds follow the first occurrence of each label.
///
/// ```
/// # use dnggb::field::{contract, Field, Slot};
/// # use dnggb::grid::Grid;
/// let g = Grid::new(9, 8, 0.0, 1.0).unwrap();
/// let m = Field::from_fn(&g, vec![Slot::Lower, Slot::Lower], |_, _, i| (i[0] + 2 * i[1]) as f64);
/// let tr = contract("", &[(&m, "aa")]);
/// assert_eq!(tr.data()[0], 0.0 + 3.0);
/// ```
pub fn contract(out: &str, factors: &[(&Field, &str)]) -> Field {
    try_contract(out, factors).unwrap_or_else(|e| panic!("contract({out:?}): {e}"))
}

pub fn try_contract(out: &str, factors: &[(&Field, &str)]) -> Result<Field, FieldError> {
    let grid = factors
        .first()
        .map(|(f, _)| f.grid.clone())
        .ok_or(FieldError::GridMismatch)?;
    let mut labels: Vec<(char, Slot)> = Vec::new();
    let mut factor_labels: Vec<Vec<usize>> = Vec::with_capacity(factors.len());
    for (fi, (f, ls)) in factors.iter().enumerate() {
        if *f.grid != *grid {
            return Err(FieldError::GridMismatch);
        }
        let chars: Vec<char> = ls.chars().collect();
        if chars.len() != f.slots.len() {
            return Err(FieldError::LabelCount {
                factor: fi,
                labels: ls.to_string(),
                got: chars.len(),
                expected: f.slots.len(),
            });
        }
        let mut pos = Vec::with_capacity(chars.len());
        for (c, s) in chars.iter().zip(&f.slots) {
            match labels.iter().position(|(l, _)| l == c) {
                Some(k) => {
                    if !labels[k].1.compatible(*s) {
                        return Err(FieldError::LabelClash {
                            label: *c,
                            first: labels[k].1,
                            second: *s,
                        });
                    }
                    pos.push(k);
                }
                None => {
                    labels.push((*c, *s));
                    pos.push(labels.len() - 1);
                }
            }
        }
        factor_labels.push(pos);
    }
    let mut out_pos = Vec::new();
    for c in out.chars() {
        let k = labels
            .iter()
            .position(|(l, _)| *l == c)
            .ok_or(FieldError::UnboundLabel(c))?;
        if out_pos.contains(&k) {
            return Err(FieldError::RepeatedOutput(c));
        }
        out_pos.push(k);
    }
    let out_slots: Vec<Slot> = out_pos.iter().map(|k| labels[*k].1).collect();
    let mut result = Field::zeros(&grid, out_slots);
    let np = grid.n_points();
    let dims: Vec<usize> = labels.iter().map(|(_, s)| s.dim()).collect();
    let total: usize = dims.iter().product();
    let mut assign = vec![0usize; dims.len()];
    let mut fidx: Vec<usize> = vec![0; factors.len()];
    let mut scratch = vec![0.0; np];
    for combo in 0..total {
        unflatten(combo, &dims, &mut assign);
        for (fi, pos) in factor_labels.iter().enumerate() {
            let f = factors[fi].0;
            let mut c = 0;
            for (k, s) in pos.iter().zip(&f.slots) {
                c = c * s.dim() + assign[*k];
            }
            fidx[fi] = c;
        }
        let mut oc = 0;
        for (k, s) in out_pos.iter().zip(&result.slots) {
            oc = oc * s.dim() + assign[*k];
        }
        let first = factors[0].0;
        scratch.copy_from_slice(&first.data[fidx[0] * np..(fidx[0] + 1) * np]);
        for fi in 1..factors.len() {
            let f = factors[fi].0;
            let src = &f.data[fidx[fi] * np..(fidx[fi] + 1) * np];
            for (s, v) in scratch.iter_mut().zip(src) {
                *s *= v;
            }
        }
        for (o, s) in result.data[oc * np..(oc + 1) * np].iter_mut().zip(&scratch) {
            *o += s;
        }
    }
    Ok(result)
}
