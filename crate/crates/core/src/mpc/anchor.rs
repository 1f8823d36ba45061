use nalgebra::{DMatrix, DVector};

use super::MpcError;
use crate::conic::{solve_socp, ConicProgram, ConicStatus, DEFAULT_TOLERANCE};
use crate::geometry::{Polytope, ANCHOR_SNAP_TOL};

/// Default fraction of each facet's largest attainable slack that the anchor
/// must keep.
pub const DEFAULT_ANCHOR_MARGIN: f64 = 0.1;

/// Equilibrium `(s_e, v_e)` of `s = A s + B v` around which the terminal set
/// is built.
///
/// The origin is used whenever it is admissible with the required margins.
/// Otherwise the anchor minimizes `‖s‖²_Q + ‖v‖²_R` over equilibria that
/// keep, for every facet of the tightened state and input sets, at least
/// `margin` times the largest slack any admissible equilibrium attains on
/// that facet. Without the margin the cheapest equilibrium sits on a facet
/// and the invariant set around it can collapse to a point.
pub fn select_anchor(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x_tight: &Polytope,
    u_tight: &Polytope,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    margin: f64,
) -> Result<(DVector<f64>, DVector<f64>), MpcError> {
    let n = a.nrows();
    let m = b.ncols();
    let basis = equilibrium_basis(a, b);
    let d = basis.ncols();
    let ns = basis.rows(0, n).into_owned();
    let nv = basis.rows(n, m).into_owned();

    // Facets expressed in the equilibrium coordinates θ.
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..x_tight.num_facets() {
        let h = x_tight.normals().row(i) * &ns;
        rows.push((h.transpose(), x_tight.offsets()[i] + ANCHOR_SNAP_TOL));
    }
    for i in 0..u_tight.num_facets() {
        let h = u_tight.normals().row(i) * &nv;
        rows.push((h.transpose(), u_tight.offsets()[i] + ANCHOR_SNAP_TOL));
    }
    if rows.iter().any(|(_, o)| *o < 0.0) && d == 0 {
        return Err(MpcError::Config(
            "the origin is the only equilibrium and it violates the tightened constraints".into(),
        ));
    }
    if d == 0 {
        return Ok((DVector::zeros(n), DVector::zeros(m)));
    }

    let mut best_slack = Vec::with_capacity(rows.len());
    for (h, o) in &rows {
        let low = minimize_linear(h, &rows)?;
        best_slack.push(o - low);
    }
    let required: Vec<f64> = best_slack.iter().map(|s| margin * s.max(0.0)).collect();
    if rows.iter().zip(&required).all(|((_, o), req)| *o >= *req) {
        return Ok((DVector::zeros(n), DVector::zeros(m)));
    }

    // min ‖L_q N_s θ‖² + ‖L_r N_v θ‖² subject to the margins.
    let lq = cholesky_factor(q, "Q")?;
    let lr = cholesky_factor(r, "R")?;
    let cost_map = {
        let top = lq.transpose() * &ns;
        let bottom = lr.transpose() * &nv;
        let mut stacked = DMatrix::zeros(n + m, d);
        stacked.rows_mut(0, n).copy_from(&top);
        stacked.rows_mut(n, m).copy_from(&bottom);
        stacked
    };
    let mut p = ConicProgram::new();
    let theta = p.add_vars(d);
    let t = p.add_var();
    p.set_cost(t, 1.0);
    for ((h, o), req) in rows.iter().zip(&required) {
        let terms: Vec<(usize, f64)> = theta.iter().zip(h.iter()).map(|(&v, &c)| (v, c)).collect();
        p.add_le(&terms, o - req);
    }
    let head = p.add_affine(&[(t, 1.0)], 1.0);
    let mut legs = Vec::new();
    for row in 0..n + m {
        let terms: Vec<(usize, f64)> = theta
            .iter()
            .enumerate()
            .map(|(j, &v)| (v, 2.0 * cost_map[(row, j)]))
            .collect();
        legs.push(p.add_affine(&terms, 0.0));
    }
    legs.push(p.add_affine(&[(t, -1.0)], 1.0));
    p.add_soc(head, &legs);
    let sol = solve(&p)?;
    let th = DVector::from_iterator(d, theta.iter().map(|&v| sol.x[v]));
    Ok((&ns * &th, &nv * &th))
}

/// Orthonormal basis of the null space of `[A - I, B]`.
fn equilibrium_basis(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut mat = DMatrix::zeros(n, n + m);
    mat.columns_mut(0, n)
        .copy_from(&(a - DMatrix::identity(n, n)));
    mat.columns_mut(n, m).copy_from(b);
    // Pad to a square matrix so the SVD exposes the full right basis.
    let mut square = DMatrix::zeros(n + m, n + m);
    square.rows_mut(0, n).copy_from(&mat);
    let svd = square.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let scale = svd.singular_values.max().max(1.0);
    let cols: Vec<DVector<f64>> = (0..n + m)
        .filter(|&i| svd.singular_values[i] <= 1e-10 * scale)
        .map(|i| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n + m, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn minimize_linear(c: &DVector<f64>, rows: &[(DVector<f64>, f64)]) -> Result<f64, MpcError> {
    let d = c.len();
    let mut p = ConicProgram::new();
    let theta = p.add_vars(d);
    for (j, &v) in theta.iter().enumerate() {
        p.set_cost(v, c[j]);
    }
    for (h, o) in rows {
        let terms: Vec<(usize, f64)> = theta.iter().zip(h.iter()).map(|(&v, &k)| (v, k)).collect();
        p.add_le(&terms, *o);
    }
    let sol = solve(&p)?;
    Ok(sol.objective)
}

fn solve(p: &ConicProgram) -> Result<crate::conic::ConicSolution, MpcError> {
    let sol = solve_socp(p, DEFAULT_TOLERANCE)
        .map_err(|e| MpcError::Config(format!("anchor program rejected: {e}")))?;
    match sol.status {
        ConicStatus::Optimal => Ok(sol),
        ConicStatus::Infeasible => Err(MpcError::Config(
            "no equilibrium satisfies the tightened constraints".into(),
        )),
        ConicStatus::Unbounded => Err(MpcError::Config(
            "tightened constraint sets are unbounded along the equilibria".into(),
        )),
        ConicStatus::NumericalFailure => Err(MpcError::Solver(ConicStatus::NumericalFailure)),
    }
}

pub(crate) fn cholesky_factor(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>, MpcError> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| MpcError::Config(format!("weight {name} must be positive definite")))
}
