use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Polytope};

/// Upper bound on generator subsets visited during facet enumeration.
const MAX_SUBSETS: usize = 2_000_000;

/// `{c + G ξ : ‖ξ‖_∞ ≤ 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zonotope {
    center: DVector<f64>,
    generators: DMatrix<f64>,
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: DMatrix<f64>) -> Self {
        assert_eq!(center.len(), generators.nrows(), "zonotope dimension");
        Self { center, generators }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    pub fn support(&self, d: &DVector<f64>) -> f64 {
        let spread: f64 = (self.generators.transpose() * d).iter().map(|v| v.abs()).sum();
        d.dot(&self.center) + spread
    }

    pub fn linear_map(&self, m: &DMatrix<f64>) -> Zonotope {
        Zonotope::new(m * &self.center, m * &self.generators)
    }

    pub fn translate(&self, c: &DVector<f64>) -> Zonotope {
        Zonotope::new(&self.center - c, self.generators.clone())
    }

    pub fn scale(&self, factor: f64) -> Zonotope {
        Zonotope::new(&self.center * factor, &self.generators * factor)
    }

    pub fn minkowski_sum(&self, other: &Zonotope) -> Zonotope {
        let n = self.dim();
        let p = self.generators.ncols();
        let q = other.generators.ncols();
        let mut g = DMatrix::zeros(n, p + q);
        g.columns_mut(0, p).copy_from(&self.generators);
        g.columns_mut(p, q).copy_from(&other.generators);
        Zonotope::new(&self.center + &other.center, g)
    }

    /// Drops negligible generators and merges parallel ones.
    pub fn reduced(&self) -> Zonotope {
        let scale = self.generators.amax().max(1e-300);
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for g in self.generators.column_iter() {
            let mut g = g.into_owned();
            if g.amax() <= 1e-13 * scale {
                continue;
            }
            let lead = g.iter().copied().find(|v| v.abs() > 1e-13 * scale).unwrap_or(1.0);
            if lead < 0.0 {
                g = -g;
            }
            let unit = g.normalize();
            match cols.iter_mut().find(|c| (c.normalize() - &unit).amax() < 1e-10) {
                Some(c) => *c += &g,
                None => cols.push(g),
            }
        }
        let g = if cols.is_empty() {
            DMatrix::zeros(self.dim(), 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Zonotope::new(self.center.clone(), g)
    }

    /// Exact H-representation.
    ///
    /// Facet normals of a full-dimensional zonotope are the normals of the
    /// hyperplanes spanned by `dim - 1` generators. A rank-deficient zonotope
    /// is enumerated inside its affine hull and closed with equality pairs
    /// along the orthogonal complement.
    pub fn to_polytope(&self) -> Result<Polytope, GeometryError> {
        let z = self.reduced();
        let n = z.dim();
        let g = &z.generators;
        let (basis, complement) = split_range(g, n);
        let r = basis.ncols();

        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let push_pair = |normal: DVector<f64>, rows: &mut Vec<(DVector<f64>, f64)>| {
            for sgn in [1.0, -1.0] {
                let d = &normal * sgn;
                let off = z.support(&d);
                if !rows.iter().any(|(u, _)| (u - &d).amax() < 1e-9) {
                    rows.push((d, off));
                }
            }
        };

        if r == 1 {
            push_pair(basis.column(0).into_owned(), &mut rows);
        } else if r > 1 {
            let reduced = basis.transpose() * g;
            let p = reduced.ncols();
            let count = binomial(p, r - 1);
            if count > MAX_SUBSETS {
                return Err(GeometryError::TooManyFacets(count));
            }
            let mut idx: Vec<usize> = (0..r - 1).collect();
            loop {
                let sub = DMatrix::from_fn(r, r - 1, |i, j| reduced[(i, idx[j])]);
                let normal = cross_normal(&sub);
                let norm = normal.norm();
                if norm > 1e-10 * sub.amax().powi((r - 1) as i32).max(1e-300) {
                    let full = &basis * (normal / norm);
                    push_pair(full.normalize(), &mut rows);
                }
                if !next_combination(&mut idx, p) {
                    break;
                }
            }
        }
        for v in complement.column_iter() {
            push_pair(v.into_owned(), &mut rows);
        }

        let mut h = DMatrix::zeros(rows.len(), n);
        let mut k = DVector::zeros(rows.len());
        for (i, (u, off)) in rows.into_iter().enumerate() {
            h.set_row(i, &u.transpose());
            k[i] = off;
        }
        Ok(Polytope::new(h, k)?.with_generators(self.clone()))
    }
}

/// Orthonormal bases of the column space of `g` and its complement.
fn split_range(g: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    if g.ncols() == 0 {
        return (DMatrix::zeros(n, 0), DMatrix::identity(n, n));
    }
    // Left singular vectors of [G | 0] padded to at least n columns give a
    // full orthonormal basis of R^n.
    let cols = g.ncols().max(n);
    let mut padded = DMatrix::zeros(n, cols);
    padded.columns_mut(0, g.ncols()).copy_from(g);
    let svd = padded.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > tol)
        .count();
    let pick = |ids: &[usize]| {
        if ids.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&ids.iter().map(|&i| u.column(i).into_owned()).collect::<Vec<_>>())
        }
    };
    (pick(&order[..rank]), pick(&order[rank..]))
}

/// Generalized cross product of the `r - 1` columns of `m` (an `r × (r-1)`
/// matrix): the vector of signed maximal minors.
fn cross_normal(m: &DMatrix<f64>) -> DVector<f64> {
    let r = m.nrows();
    DVector::from_fn(r, |i, _| {
        let minor = m.clone().remove_row(i);
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * minor.determinant()
    })
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_from_axis_generators() {
        let z = Zonotope::new(DVector::zeros(2), DMatrix::identity(2, 2));
        let p = z.to_polytope().unwrap();
        assert_eq!(p.num_facets(), 4);
        assert!(p.contains(&DVector::from_vec(vec![1.0, 1.0]), 1e-12));
        assert!(!p.contains(&DVector::from_vec(vec![1.01, 0.0]), 1e-12));
    }

    #[test]
    fn hexagon_has_six_facets() {
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let p = Zonotope::new(DVector::zeros(2), g).to_polytope().unwrap();
        assert_eq!(p.num_facets(), 6);
    }

    #[test]
    fn degenerate_segment_in_plane() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let p = Zonotope::new(DVector::zeros(2), g).to_polytope().unwrap();
        assert!(p.contains(&DVector::from_vec(vec![3.0, 3.0]), 1e-9));
        assert!(!p.contains(&DVector::from_vec(vec![1.0, 0.0]), 1e-6));
    }

    #[test]
    fn point_zonotope() {
        let c = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let p = Zonotope::new(c.clone(), DMatrix::zeros(3, 0)).to_polytope().unwrap();
        assert!(p.contains(&c, 1e-12));
        assert!(!p.contains(&DVector::from_vec(vec![1.0, -2.0, 0.6]), 1e-9));
    }

    #[test]
    fn combination_enumeration_count() {
        let mut idx = vec![0, 1];
        let mut n = 1;
        while next_combination(&mut idx, 5) {
            n += 1;
        }
        assert_eq!(n, binomial(5, 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn h_rep_support_matches_generators(
            vals in prop::collection::vec(-1.0f64..1.0, 12),
            dir in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let g = DMatrix::from_column_slice(3, 4, &vals);
            let z = Zonotope::new(DVector::from_vec(vec![0.1, -0.2, 0.3]), g);
            let p = z.to_polytope().unwrap();
            let d = DVector::from_vec(dir);
            prop_assume!(d.norm() > 1e-3);
            // LP over the bare H-rep, ignoring the cached generators
            let bare = Polytope::new(p.normals().clone(), p.offsets().clone()).unwrap();
            let lp = bare.support(&d).unwrap();
            prop_assert!((lp - z.support(&d)).abs() < 1e-6 * (1.0 + lp.abs()));
        }
    }
}
