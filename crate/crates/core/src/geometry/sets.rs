use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Zonotope, GEOMETRY_TOL};
use crate::conic::{solve_socp, ConicProgram, ConicStatus, DEFAULT_TOLERANCE};

/// Axis-aligned box `[lower, upper]`.
///
/// Emptiness is carried by an explicit flag; the bounds of an empty box are
/// not meaningful.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
    empty: bool,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, GeometryError> {
        if lower.len() != upper.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(GeometryError::Invalid("box of dimension 0".into()));
        }
        if lower.iter().chain(upper.iter()).any(|v| v.is_nan()) {
            return Err(GeometryError::Invalid("NaN bound".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(GeometryError::Invalid(
                "lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self {
            lower,
            upper,
            empty: false,
        })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self, GeometryError> {
        Self::new(
            DVector::from_column_slice(lower),
            DVector::from_column_slice(upper),
        )
    }

    /// The symmetric box `[-r, r]^dim`.
    pub fn symmetric(dim: usize, radius: f64) -> Result<Self, GeometryError> {
        Self::new(
            DVector::from_element(dim, -radius),
            DVector::from_element(dim, radius),
        )
    }

    pub fn origin(dim: usize) -> Self {
        Self {
            lower: DVector::zeros(dim),
            upper: DVector::zeros(dim),
            empty: false,
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            lower: DVector::zeros(dim),
            upper: DVector::zeros(dim),
            empty: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        !self.empty
            && x.len() == self.dim()
            && (0..self.dim()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
    }

    pub fn support(&self, d: &DVector<f64>) -> f64 {
        (0..self.dim())
            .map(|i| (d[i] * self.lower[i]).max(d[i] * self.upper[i]))
            .sum()
    }

    /// Largest violation of the box bounds (0 when inside).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        (0..self.dim())
            .map(|i| (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn to_polytope(&self) -> Polytope {
        let n = self.dim();
        let mut h = DMatrix::zeros(2 * n, n);
        let mut k = DVector::zeros(2 * n);
        for i in 0..n {
            h[(i, i)] = 1.0;
            k[i] = self.upper[i];
            h[(n + i, i)] = -1.0;
            k[n + i] = -self.lower[i];
        }
        Polytope {
            normals: h,
            offsets: k,
            empty: self.empty,
            generators: None,
        }
    }

    /// Box as a zonotope (center plus axis generators).
    pub fn to_zonotope(&self) -> Zonotope {
        let half = (&self.upper - &self.lower) * 0.5;
        Zonotope::new(self.center(), DMatrix::from_diagonal(&half))
    }

    /// Pontryagin difference by a box; empty when any interval crosses.
    pub fn shrink_by_box(&self, other: &BoxSet) -> Result<BoxSet, GeometryError> {
        check_dim(self.dim(), other.dim())?;
        let lower = &self.lower - &other.lower;
        let upper = &self.upper - &other.upper;
        Ok(box_or_empty(lower, upper, self.empty || other.empty))
    }
}

fn box_or_empty(lower: DVector<f64>, upper: DVector<f64>, force_empty: bool) -> BoxSet {
    let crossed = lower.iter().zip(upper.iter()).any(|(l, u)| l > u);
    if force_empty || crossed {
        BoxSet::empty(lower.len())
    } else {
        BoxSet {
            lower,
            upper,
            empty: false,
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), GeometryError> {
    if expected == got {
        Ok(())
    } else {
        Err(GeometryError::DimensionMismatch { expected, got })
    }
}

/// `a ⊕ b` for boxes.
pub fn minkowski_sum_box(a: &BoxSet, b: &BoxSet) -> Result<BoxSet, GeometryError> {
    check_dim(a.dim(), b.dim())?;
    if a.empty || b.empty {
        return Ok(BoxSet::empty(a.dim()));
    }
    Ok(BoxSet {
        lower: &a.lower + &b.lower,
        upper: &a.upper + &b.upper,
        empty: false,
    })
}

/// `x ⊖ z = {s : s + e ∈ x ∀ e ∈ z}` for a box `x`, computed facet-wise
/// from the support function of `z`.
pub fn pontryagin_diff(x: &BoxSet, z: &Polytope) -> Result<Polytope, GeometryError> {
    check_dim(x.dim(), z.dim())?;
    x.to_polytope().pontryagin_diff(z)
}

/// H-representation `{s : H s ≤ h}`.
///
/// A polytope built from a zonotope keeps the generators around so that
/// support-function queries are exact and LP-free.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Polytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
    empty: bool,
    #[serde(default)]
    generators: Option<Zonotope>,
}

impl PartialEq for Polytope {
    fn eq(&self, other: &Self) -> bool {
        self.normals == other.normals && self.offsets == other.offsets && self.empty == other.empty
    }
}

impl Polytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, GeometryError> {
        check_dim(normals.nrows(), offsets.len())?;
        if normals.ncols() == 0 {
            return Err(GeometryError::Invalid("polytope of dimension 0".into()));
        }
        if normals.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::Invalid("non-finite facet data".into()));
        }
        Ok(Self {
            normals,
            offsets,
            empty: false,
            generators: None,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            normals: DMatrix::zeros(0, dim),
            offsets: DVector::zeros(0),
            empty: true,
            generators: None,
        }
    }

    pub(crate) fn with_generators(mut self, z: Zonotope) -> Self {
        self.generators = Some(z);
        self
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_facets(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    /// Explicit emptiness flag. Set by constructions that detect emptiness
    /// (crossed box bounds, infeasible LPs); see also [`Self::check_empty`].
    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn generators(&self) -> Option<&Zonotope> {
        self.generators.as_ref()
    }

    /// Decides emptiness by a feasibility LP and returns the updated set.
    pub fn check_empty(mut self) -> Result<Self, GeometryError> {
        if !self.empty {
            self.empty = !self.is_feasible()?;
        }
        Ok(self)
    }

    fn is_feasible(&self) -> Result<bool, GeometryError> {
        let (p, _) = self.lp_skeleton(&DVector::zeros(self.dim()), None);
        let sol = solve_socp(&p, DEFAULT_TOLERANCE).map_err(|e| GeometryError::Solver(e.to_string()))?;
        match sol.status {
            ConicStatus::Optimal => Ok(true),
            ConicStatus::Infeasible => Ok(false),
            s => Err(GeometryError::Solver(format!("feasibility LP ended {s:?}"))),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        !self.empty && self.violation(x) <= tol
    }

    /// `max_i (H_i x - h_i)`, clipped at zero.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        if self.num_facets() == 0 {
            return 0.0;
        }
        let r = &self.normals * x - &self.offsets;
        r.max().max(0.0)
    }

    /// Builds `max d·x s.t. H x ≤ h` (optionally dropping one row) as a conic
    /// program; returns it with the decision variable indices.
    fn lp_skeleton(&self, d: &DVector<f64>, skip: Option<usize>) -> (ConicProgram, Vec<usize>) {
        let n = self.dim();
        let mut p = ConicProgram::new();
        let x = p.add_vars(n);
        for i in 0..n {
            p.set_cost(x[i], -d[i]);
        }
        for r in 0..self.num_facets() {
            if Some(r) == skip {
                continue;
            }
            let terms: Vec<_> = (0..n)
                .filter(|&c| self.normals[(r, c)] != 0.0)
                .map(|c| (x[c], self.normals[(r, c)]))
                .collect();
            p.add_le(&terms, self.offsets[r]);
        }
        (p, x)
    }

    /// Support function `sup_{x ∈ P} d·x`. Returns `-∞` for an empty set.
    pub fn support(&self, d: &DVector<f64>) -> Result<f64, GeometryError> {
        check_dim(self.dim(), d.len())?;
        if self.empty {
            return Ok(f64::NEG_INFINITY);
        }
        if let Some(z) = &self.generators {
            return Ok(z.support(d));
        }
        if let Some(b) = self.as_box() {
            return Ok(if b.is_empty() { f64::NEG_INFINITY } else { b.support(d) });
        }
        self.support_lp(d, None, None)
    }

    /// LP support, optionally skipping one facet and capping the objective
    /// with `d·x ≤ cap` to keep the program bounded.
    fn support_lp(
        &self,
        d: &DVector<f64>,
        skip: Option<usize>,
        cap: Option<f64>,
    ) -> Result<f64, GeometryError> {
        let (mut p, x) = self.lp_skeleton(d, skip);
        if let Some(cap) = cap {
            let terms: Vec<_> = (0..self.dim()).map(|c| (x[c], d[c])).collect();
            p.add_le(&terms, cap);
        }
        let sol = solve_socp(&p, DEFAULT_TOLERANCE).map_err(|e| GeometryError::Solver(e.to_string()))?;
        match sol.status {
            ConicStatus::Optimal => Ok(-sol.objective),
            ConicStatus::Infeasible => Ok(f64::NEG_INFINITY),
            ConicStatus::Unbounded => Err(GeometryError::Unbounded(d.iter().copied().collect())),
            ConicStatus::NumericalFailure => {
                Err(GeometryError::Solver("support LP numerical failure".into()))
            }
        }
    }

    /// Radius of the largest Euclidean ball inside the set (Chebyshev
    /// radius); zero for sets without interior, `-∞` when empty.
    pub fn inner_radius(&self) -> Result<f64, GeometryError> {
        if self.empty {
            return Ok(f64::NEG_INFINITY);
        }
        let n = self.dim();
        let mut p = ConicProgram::new();
        let x = p.add_vars(n);
        let r = p.add_var();
        p.set_cost(r, -1.0);
        for row in 0..self.num_facets() {
            let norm = self.normals.row(row).norm();
            let mut terms: Vec<_> = (0..n)
                .filter(|&c| self.normals[(row, c)] != 0.0)
                .map(|c| (x[c], self.normals[(row, c)]))
                .collect();
            terms.push((r, norm));
            p.add_le(&terms, self.offsets[row]);
        }
        let sol = solve_socp(&p, DEFAULT_TOLERANCE).map_err(|e| GeometryError::Solver(e.to_string()))?;
        match sol.status {
            ConicStatus::Optimal => Ok(sol.value(r).max(0.0)),
            ConicStatus::Infeasible => Ok(f64::NEG_INFINITY),
            ConicStatus::Unbounded => Ok(f64::INFINITY),
            ConicStatus::NumericalFailure => {
                Err(GeometryError::Solver("Chebyshev LP numerical failure".into()))
            }
        }
    }

    pub fn bounding_box(&self) -> Result<BoxSet, GeometryError> {
        let n = self.dim();
        if self.empty {
            return Ok(BoxSet::empty(n));
        }
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            hi[i] = self.support(&e)?;
            lo[i] = -self.support(&(-e))?;
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return Ok(BoxSet::empty(n));
        }
        Ok(box_or_empty(lo, hi, false))
    }

    /// `{x : M x ∈ P}`.
    pub fn preimage(&self, map: &DMatrix<f64>) -> Result<Polytope, GeometryError> {
        check_dim(self.dim(), map.nrows())?;
        let mut out = Polytope::new(&self.normals * map, self.offsets.clone())?;
        out.empty = self.empty;
        Ok(out)
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope, GeometryError> {
        check_dim(self.dim(), other.dim())?;
        let n = self.dim();
        let rows = self.num_facets() + other.num_facets();
        let mut h = DMatrix::zeros(rows, n);
        let mut k = DVector::zeros(rows);
        h.rows_mut(0, self.num_facets()).copy_from(&self.normals);
        h.rows_mut(self.num_facets(), other.num_facets())
            .copy_from(&other.normals);
        k.rows_mut(0, self.num_facets()).copy_from(&self.offsets);
        k.rows_mut(self.num_facets(), other.num_facets())
            .copy_from(&other.offsets);
        let mut out = Polytope::new(h, k)?;
        out.empty = self.empty || other.empty;
        Ok(out)
    }

    /// `{x - c : x ∈ P}`.
    pub fn translate(&self, c: &DVector<f64>) -> Polytope {
        let mut out = self.clone();
        out.offsets = &self.offsets - &self.normals * c;
        out.generators = self.generators.as_ref().map(|z| z.translate(c));
        out
    }

    /// `factor · P` for a set containing the origin (facets scale with
    /// their offsets).
    pub fn scale(&self, factor: f64) -> Polytope {
        let mut out = self.clone();
        out.offsets *= factor;
        out.generators = self.generators.as_ref().map(|z| z.scale(factor));
        out
    }

    /// `P ⊖ z`: every offset shrinks by the support of `z` along its normal.
    pub fn pontryagin_diff(&self, z: &Polytope) -> Result<Polytope, GeometryError> {
        self.pontryagin_diff_mapped(z, None)
    }

    /// `P ⊖ M z`, where `M` maps the space of `z` into the space of `P`.
    pub fn pontryagin_diff_mapped(
        &self,
        z: &Polytope,
        map: Option<&DMatrix<f64>>,
    ) -> Result<Polytope, GeometryError> {
        match map {
            Some(m) => {
                check_dim(self.dim(), m.nrows())?;
                check_dim(z.dim(), m.ncols())?;
            }
            None => check_dim(self.dim(), z.dim())?,
        }
        if z.empty {
            return Err(GeometryError::Invalid(
                "Pontryagin difference by an empty set".into(),
            ));
        }
        let mut offsets = self.offsets.clone();
        for r in 0..self.num_facets() {
            let row = self.normals.row(r).transpose();
            let d = match map {
                Some(m) => m.transpose() * row,
                None => row,
            };
            offsets[r] -= z.support(&d)?;
        }
        let mut out = Polytope::new(self.normals.clone(), offsets)?;
        out.empty = self.empty;
        if !out.empty {
            out = out.check_empty_fast()?;
        }
        Ok(out)
    }

    /// Emptiness test that skips the LP for box-shaped sets.
    fn check_empty_fast(mut self) -> Result<Self, GeometryError> {
        if let Some(b) = self.as_box() {
            self.empty = b.is_empty();
            Ok(self)
        } else {
            self.check_empty()
        }
    }

    /// Recognizes the `[I; -I]` layout produced by [`BoxSet::to_polytope`].
    pub fn as_box(&self) -> Option<BoxSet> {
        let n = self.dim();
        if self.num_facets() != 2 * n {
            return None;
        }
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                if self.normals[(i, j)] != want || self.normals[(n + i, j)] != -want {
                    return None;
                }
            }
        }
        let upper = self.offsets.rows(0, n).into_owned();
        let lower = -self.offsets.rows(n, n).into_owned();
        Some(box_or_empty(lower, upper, self.empty))
    }

    /// Rescales rows to unit norm and merges duplicate normals (keeping the
    /// tighter offset). Zero rows are dropped, or mark the set empty when
    /// their offset is negative.
    pub fn normalized(&self) -> Polytope {
        let n = self.dim();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let mut empty = self.empty;
        for r in 0..self.num_facets() {
            let row = self.normals.row(r).transpose();
            let norm = row.norm();
            if norm < 1e-12 {
                if self.offsets[r] < -GEOMETRY_TOL {
                    empty = true;
                }
                continue;
            }
            let unit = row / norm;
            let off = self.offsets[r] / norm;
            match rows
                .iter_mut()
                .find(|(u, _)| (u - &unit).amax() < 1e-9)
            {
                Some(existing) => existing.1 = existing.1.min(off),
                None => rows.push((unit, off)),
            }
        }
        let mut h = DMatrix::zeros(rows.len(), n);
        let mut k = DVector::zeros(rows.len());
        for (i, (u, off)) in rows.into_iter().enumerate() {
            h.set_row(i, &u.transpose());
            k[i] = off;
        }
        Polytope {
            normals: h,
            offsets: k,
            empty,
            generators: self.generators.clone(),
        }
    }

    /// Drops facets implied by the others, one LP per facet.
    pub fn remove_redundant(&self) -> Result<Polytope, GeometryError> {
        let mut cur = self.normalized();
        if cur.empty {
            return Ok(cur);
        }
        let mut r = 0;
        while r < cur.num_facets() {
            if cur.num_facets() <= 1 {
                break;
            }
            let d = cur.normals.row(r).transpose();
            let cap = cur.offsets[r] + 1.0;
            let best = cur.support_lp(&d, Some(r), Some(cap))?;
            if best == f64::NEG_INFINITY {
                // remaining facets are already infeasible
                return Ok(Polytope::empty(cur.dim()));
            }
            if best <= cur.offsets[r] + GEOMETRY_TOL {
                cur = cur.without_row(r);
            } else {
                r += 1;
            }
        }
        Ok(cur)
    }

    fn without_row(&self, r: usize) -> Polytope {
        Polytope {
            normals: self.normals.clone().remove_row(r),
            offsets: self.offsets.clone().remove_row(r),
            empty: self.empty,
            generators: self.generators.clone(),
        }
    }

    /// `true` when `self ⊆ other` (checked facet-wise on `other`).
    pub fn is_subset_of(&self, other: &Polytope, tol: f64) -> Result<bool, GeometryError> {
        check_dim(self.dim(), other.dim())?;
        if self.empty {
            return Ok(true);
        }
        for r in 0..other.num_facets() {
            let d = other.normals.row(r).transpose();
            if self.support(&d)? > other.offsets[r] + tol {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(lo: &[f64], hi: &[f64]) -> BoxSet {
        BoxSet::from_slices(lo, hi).unwrap()
    }

    #[test]
    fn inner_radius_of_box_and_segment() {
        let sq = b(&[-1.0, -3.0], &[1.0, 3.0]).to_polytope();
        assert!((sq.inner_radius().unwrap() - 1.0).abs() < 1e-7);
        let flat = b(&[-1.0, 0.0], &[1.0, 0.0]).to_polytope();
        assert!(flat.inner_radius().unwrap() < 1e-7);
        assert_eq!(Polytope::empty(2).inner_radius().unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn minkowski_interval_examples() {
        let s = minkowski_sum_box(&b(&[-1.0], &[1.0]), &b(&[-2.0], &[2.0])).unwrap();
        assert_eq!(s, b(&[-3.0], &[3.0]));
        let x = b(&[-7.0, -3.0], &[0.0, 2.0]);
        assert_eq!(minkowski_sum_box(&x, &BoxSet::origin(2)).unwrap(), x);
        let s = minkowski_sum_box(&b(&[0.0], &[1.0]), &b(&[3.0], &[5.0])).unwrap();
        assert_eq!(s, b(&[3.0], &[6.0]));
    }

    #[test]
    fn minkowski_dimension_mismatch() {
        let err = minkowski_sum_box(&b(&[0.0], &[1.0]), &BoxSet::origin(2)).unwrap_err();
        assert_eq!(err, GeometryError::DimensionMismatch { expected: 1, got: 2 });
    }

    #[test]
    fn crossed_bounds_rejected() {
        assert!(BoxSet::from_slices(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn pontryagin_interval_shrink() {
        let z = b(&[-0.5], &[0.5]).to_polytope();
        let d = pontryagin_diff(&b(&[-7.0], &[0.0]), &z).unwrap();
        let bx = d.as_box().unwrap();
        assert!((bx.lower()[0] + 6.5).abs() < 1e-12);
        assert!((bx.upper()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn pontryagin_by_origin_is_identity() {
        let x = b(&[-7.0, -3.0], &[0.0, 2.0]);
        let d = pontryagin_diff(&x, &BoxSet::origin(2).to_polytope()).unwrap();
        assert_eq!(d.as_box().unwrap(), x);
    }

    #[test]
    fn pontryagin_over_tightening_is_empty_not_error() {
        let d = pontryagin_diff(&b(&[-1.0], &[1.0]), &b(&[-2.0], &[2.0]).to_polytope()).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn lp_support_matches_box_support() {
        let x = b(&[-1.0, -2.0], &[3.0, 0.5]);
        let p = x.to_polytope();
        let d = DVector::from_vec(vec![0.3, -1.2]);
        assert!((p.support(&d).unwrap() - x.support(&d)).abs() < 1e-7);
    }

    #[test]
    fn redundant_facets_are_removed() {
        let mut h = DMatrix::zeros(5, 2);
        h.set_row(0, &nalgebra::RowDVector::from_vec(vec![1.0, 0.0]));
        h.set_row(1, &nalgebra::RowDVector::from_vec(vec![-1.0, 0.0]));
        h.set_row(2, &nalgebra::RowDVector::from_vec(vec![0.0, 1.0]));
        h.set_row(3, &nalgebra::RowDVector::from_vec(vec![0.0, -1.0]));
        h.set_row(4, &nalgebra::RowDVector::from_vec(vec![1.0, 1.0]));
        let k = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 5.0]);
        let p = Polytope::new(h, k).unwrap().remove_redundant().unwrap();
        assert_eq!(p.num_facets(), 4);
    }

    #[test]
    fn infeasible_polytope_detected() {
        let h = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let k = DVector::from_vec(vec![-1.0, -1.0]);
        let p = Polytope::new(h, k).unwrap().check_empty().unwrap();
        assert!(p.is_empty());
    }

    fn small_box(dim: usize) -> impl Strategy<Value = BoxSet> {
        (
            prop::collection::vec(-3.0f64..0.0, dim),
            prop::collection::vec(0.0f64..3.0, dim),
        )
            .prop_map(|(l, u)| BoxSet::from_slices(&l, &u).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pontryagin_is_monotone(x in small_box(2), z1 in small_box(2), grow in prop::collection::vec(0.0f64..1.0, 2)) {
            let z2 = minkowski_sum_box(&z1, &BoxSet::from_slices(&[-grow[0], -grow[1]], &[grow[0], grow[1]]).unwrap()).unwrap();
            let d1 = pontryagin_diff(&x, &z1.to_polytope()).unwrap();
            let d2 = pontryagin_diff(&x, &z2.to_polytope()).unwrap();
            if !d2.is_empty() {
                prop_assert!(!d1.is_empty());
                prop_assert!(d2.is_subset_of(&d1, 1e-9).unwrap());
            }
        }

        #[test]
        fn difference_then_sum_stays_inside(x in small_box(2), z in small_box(2)) {
            let d = pontryagin_diff(&x, &z.to_polytope()).unwrap();
            if let Some(dbox) = d.as_box().filter(|b| !b.is_empty()) {
                let back = minkowski_sum_box(&dbox, &z).unwrap();
                for i in 0..2 {
                    prop_assert!(back.lower()[i] >= x.lower()[i] - 1e-12);
                    prop_assert!(back.upper()[i] <= x.upper()[i] + 1e-12);
                }
            }
        }
    }
}
