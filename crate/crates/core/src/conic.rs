//! Conic program representation and solver contract.
//!
//! A [`ConicProgram`] is a linear objective over scalar variables subject to
//! linear equalities, nonnegativity of selected variables and second-order
//! cone blocks `‖x‖₂ ≤ t`. Inequalities are expressed through explicit slack
//! variables so the stored program is always in this standard form.
//!
//! The numerical backend is Clarabel; everything outside this module only sees
//! [`ConicProgram`] and [`ConicSolution`].

use std::fmt::Write as _;
use std::io::{self, BufRead};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default KKT tolerance handed to the backend.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

/// Residual bound that an `Optimal` solution is guaranteed to meet.
pub const ACCEPT_RESIDUAL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("variable index {index} out of bounds ({num_vars} variables)")]
    IndexOutOfBounds { index: usize, num_vars: usize },
    #[error("malformed program dump at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A sparse linear row `Σ coeff·x[var] = rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// `‖x[xs]‖₂ ≤ x[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocBlock {
    pub t: usize,
    pub xs: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    num_vars: usize,
    objective: Vec<f64>,
    equalities: Vec<LinearRow>,
    nonneg: Vec<usize>,
    soc_blocks: Vec<SocBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConicStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest absolute equality residual.
    pub equality_residual: f64,
    /// Largest violation of a nonnegativity or cone constraint.
    pub cone_violation: f64,
    pub iterations: u32,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == ConicStatus::Optimal
    }

    pub fn value(&self, var: usize) -> f64 {
        self.x[var]
    }
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn equalities(&self) -> &[LinearRow] {
        &self.equalities
    }

    pub fn nonneg_vars(&self) -> &[usize] {
        &self.nonneg
    }

    pub fn soc_blocks(&self) -> &[SocBlock] {
        &self.soc_blocks
    }

    /// Adds a free variable and returns its index.
    pub fn add_var(&mut self) -> usize {
        self.num_vars += 1;
        self.objective.push(0.0);
        self.num_vars - 1
    }

    pub fn add_vars(&mut self, count: usize) -> Vec<usize> {
        (0..count).map(|_| self.add_var()).collect()
    }

    /// Adds a variable constrained to be nonnegative.
    pub fn add_nonneg_var(&mut self) -> usize {
        let v = self.add_var();
        self.nonneg.push(v);
        v
    }

    pub fn set_cost(&mut self, var: usize, coeff: f64) {
        self.objective[var] = coeff;
    }

    pub fn add_equality(&mut self, terms: &[(usize, f64)], rhs: f64) {
        self.equalities.push(LinearRow {
            terms: terms.to_vec(),
            rhs,
        });
    }

    pub fn add_nonneg(&mut self, var: usize) {
        self.nonneg.push(var);
    }

    /// `Σ terms ≤ rhs`, via a fresh nonnegative slack.
    pub fn add_le(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        let slack = self.add_nonneg_var();
        let mut row = terms.to_vec();
        row.push((slack, 1.0));
        self.add_equality(&row, rhs);
        slack
    }

    /// `Σ terms ≥ rhs`, via a fresh nonnegative slack.
    pub fn add_ge(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        let slack = self.add_nonneg_var();
        let mut row = terms.to_vec();
        row.push((slack, -1.0));
        self.add_equality(&row, rhs);
        slack
    }

    /// Introduces `y = Σ terms + constant` as a new free variable.
    pub fn add_affine(&mut self, terms: &[(usize, f64)], constant: f64) -> usize {
        let y = self.add_var();
        let mut row = terms.to_vec();
        row.push((y, -1.0));
        self.add_equality(&row, -constant);
        y
    }

    pub fn add_soc(&mut self, t: usize, xs: &[usize]) {
        self.soc_blocks.push(SocBlock { t, xs: xs.to_vec() });
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let check = |index: usize| {
            if index < self.num_vars {
                Ok(())
            } else {
                Err(ConicError::IndexOutOfBounds {
                    index,
                    num_vars: self.num_vars,
                })
            }
        };
        for row in &self.equalities {
            for &(v, _) in &row.terms {
                check(v)?;
            }
        }
        for &v in &self.nonneg {
            check(v)?;
        }
        for block in &self.soc_blocks {
            check(block.t)?;
            for &v in &block.xs {
                check(v)?;
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        self.equalities
            .iter()
            .map(|row| {
                let lhs: f64 = row.terms.iter().map(|&(v, c)| c * x[v]).sum();
                (lhs - row.rhs).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn cone_violation(&self, x: &[f64]) -> f64 {
        let nonneg = self.nonneg.iter().map(|&v| (-x[v]).max(0.0));
        let soc = self.soc_blocks.iter().map(|b| {
            let norm = b.xs.iter().map(|&v| x[v] * x[v]).sum::<f64>().sqrt();
            (norm - x[b.t]).max(0.0)
        });
        nonneg.chain(soc).fold(0.0, f64::max)
    }

    /// Writes the program in the line-oriented dump format:
    ///
    /// ```text
    /// %%ConicProgram 1
    /// vars <n>
    /// objective <nnz>          then <var> <coeff> lines
    /// equalities <rows> <nnz>  then <row> <var> <coeff> lines
    /// rhs                      then one <row> <value> line per row
    /// nonneg <k>               then one <var> line each
    /// soc <blocks>             then <t> <x1> <x2> ... lines
    /// ```
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "%%ConicProgram 1");
        let _ = writeln!(out, "vars {}", self.num_vars);
        let nz: Vec<_> = self
            .objective
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .collect();
        let _ = writeln!(out, "objective {}", nz.len());
        for (i, c) in nz {
            let _ = writeln!(out, "{i} {c:e}");
        }
        let nnz: usize = self.equalities.iter().map(|r| r.terms.len()).sum();
        let _ = writeln!(out, "equalities {} {}", self.equalities.len(), nnz);
        for (r, row) in self.equalities.iter().enumerate() {
            for &(v, c) in &row.terms {
                let _ = writeln!(out, "{r} {v} {c:e}");
            }
        }
        let _ = writeln!(out, "rhs");
        for (r, row) in self.equalities.iter().enumerate() {
            let _ = writeln!(out, "{r} {:e}", row.rhs);
        }
        let _ = writeln!(out, "nonneg {}", self.nonneg.len());
        for v in &self.nonneg {
            let _ = writeln!(out, "{v}");
        }
        let _ = writeln!(out, "soc {}", self.soc_blocks.len());
        for b in &self.soc_blocks {
            let _ = write!(out, "{}", b.t);
            for v in &b.xs {
                let _ = write!(out, " {v}");
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn from_dump<R: BufRead>(reader: R) -> Result<Self, ConicError> {
        let mut lines = reader
            .lines()
            .enumerate()
            .map(|(i, l)| l.map(|s| (i + 1, s)));
        let mut next = |what: &str| -> Result<(usize, String), ConicError> {
            match lines.next() {
                Some(Ok(pair)) => Ok(pair),
                Some(Err(e)) => Err(e.into()),
                None => Err(ConicError::Parse {
                    line: 0,
                    reason: format!("unexpected end of input, expected {what}"),
                }),
            }
        };
        fn bad(line: usize, reason: impl Into<String>) -> ConicError {
            ConicError::Parse {
                line,
                reason: reason.into(),
            }
        }
        fn header(line: usize, text: &str, key: &str) -> Result<Vec<usize>, ConicError> {
            let mut parts = text.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(line, format!("expected `{key}`")));
            }
            parts
                .map(|p| p.parse().map_err(|_| bad(line, format!("bad count `{p}`"))))
                .collect()
        }
        fn nums(line: usize, text: &str) -> Result<Vec<f64>, ConicError> {
            text.split_whitespace()
                .map(|p| p.parse().map_err(|_| bad(line, format!("bad number `{p}`"))))
                .collect()
        }

        let (l, magic) = next("magic")?;
        if magic.trim() != "%%ConicProgram 1" {
            return Err(bad(l, "missing %%ConicProgram 1 header"));
        }
        let (l, t) = next("vars")?;
        let num_vars = header(l, &t, "vars")?[0];
        let mut p = ConicProgram::new();
        p.add_vars(num_vars);

        let (l, t) = next("objective")?;
        for _ in 0..header(l, &t, "objective")?[0] {
            let (l, t) = next("objective entry")?;
            let v = nums(l, &t)?;
            p.objective[v[0] as usize] = v[1];
        }
        let (l, t) = next("equalities")?;
        let counts = header(l, &t, "equalities")?;
        p.equalities = vec![
            LinearRow {
                terms: Vec::new(),
                rhs: 0.0
            };
            counts[0]
        ];
        for _ in 0..counts[1] {
            let (l, t) = next("equality entry")?;
            let v = nums(l, &t)?;
            let row = v[0] as usize;
            if row >= counts[0] {
                return Err(bad(l, "row index out of range"));
            }
            p.equalities[row].terms.push((v[1] as usize, v[2]));
        }
        let (l, t) = next("rhs")?;
        header(l, &t, "rhs")?;
        for _ in 0..counts[0] {
            let (l, t) = next("rhs entry")?;
            let v = nums(l, &t)?;
            p.equalities[v[0] as usize].rhs = v[1];
        }
        let (l, t) = next("nonneg")?;
        for _ in 0..header(l, &t, "nonneg")?[0] {
            let (l, t) = next("nonneg entry")?;
            p.nonneg.push(nums(l, &t)?[0] as usize);
        }
        let (l, t) = next("soc")?;
        for _ in 0..header(l, &t, "soc")?[0] {
            let (l, t) = next("soc entry")?;
            let v: Vec<usize> = nums(l, &t)?.into_iter().map(|x| x as usize).collect();
            if v.is_empty() {
                return Err(bad(l, "empty cone block"));
            }
            p.soc_blocks.push(SocBlock {
                t: v[0],
                xs: v[1..].to_vec(),
            });
        }
        p.validate()?;
        Ok(p)
    }
}

/// Solves the program to the given KKT tolerance.
///
/// `Optimal` is only reported when the recovered point satisfies the
/// equalities and cones to [`ACCEPT_RESIDUAL`]; otherwise the result is
/// downgraded to `NumericalFailure`.
pub fn solve_socp(p: &ConicProgram, tol: f64) -> Result<ConicSolution, ConicError> {
    p.validate()?;
    let n = p.num_vars;

    // Rows: equalities (zero cone), nonnegativity, then each SOC block.
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut r = 0;

    for row in &p.equalities {
        for &(v, c) in &row.terms {
            rows.push(r);
            cols.push(v);
            vals.push(c);
        }
        b.push(row.rhs);
        r += 1;
    }
    if !p.equalities.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(p.equalities.len()));
    }
    for &v in &p.nonneg {
        rows.push(r);
        cols.push(v);
        vals.push(-1.0);
        b.push(0.0);
        r += 1;
    }
    if !p.nonneg.is_empty() {
        cones.push(SupportedConeT::NonnegativeConeT(p.nonneg.len()));
    }
    for block in &p.soc_blocks {
        for &v in std::iter::once(&block.t).chain(&block.xs) {
            rows.push(r);
            cols.push(v);
            vals.push(-1.0);
            b.push(0.0);
            r += 1;
        }
        cones.push(SupportedConeT::SecondOrderConeT(1 + block.xs.len()));
    }

    let a = CscMatrix::new_from_triplets(r, n, rows, cols, vals);
    let q = p.objective.clone();
    let pmat = CscMatrix::zeros((n, n));

    let settings = DefaultSettings {
        verbose: false,
        max_iter: 500,
        tol_gap_abs: tol,
        tol_gap_rel: tol,
        tol_feas: tol * 0.1,
        max_threads: 1,
        ..DefaultSettings::default()
    };
    let mut solver = match DefaultSolver::new(&pmat, &q, &a, &b, &cones, settings) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("conic backend rejected program: {e}");
            return Ok(failure(n));
        }
    };
    solver.solve();
    let sol = &solver.solution;

    log::trace!("backend status {:?} after {} iterations", sol.status, sol.iterations);
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => ConicStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            ConicStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => ConicStatus::Unbounded,
        _ => ConicStatus::NumericalFailure,
    };
    let x = sol.x.clone();
    let equality_residual = p.equality_residual(&x);
    let cone_violation = p.cone_violation(&x);
    let status = if status == ConicStatus::Optimal
        && (equality_residual > ACCEPT_RESIDUAL
            || cone_violation > ACCEPT_RESIDUAL
            || x.iter().any(|v| !v.is_finite()))
    {
        log::debug!(
            "downgrading backend solution: eq residual {equality_residual:e}, cone violation {cone_violation:e}"
        );
        ConicStatus::NumericalFailure
    } else {
        status
    };
    Ok(ConicSolution {
        status,
        objective: p.objective_value(&x),
        x,
        equality_residual,
        cone_violation,
        iterations: sol.iterations,
    })
}

fn failure(n: usize) -> ConicSolution {
    ConicSolution {
        status: ConicStatus::NumericalFailure,
        x: vec![f64::NAN; n],
        objective: f64::NAN,
        equality_residual: f64::INFINITY,
        cone_violation: f64::INFINITY,
        iterations: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lp_corner() {
        // min x s.t. x - s = 3, s >= 0
        let mut p = ConicProgram::new();
        let x = p.add_var();
        p.set_cost(x, 1.0);
        p.add_ge(&[(x, 1.0)], 3.0);
        let sol = solve_socp(&p, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(sol.status, ConicStatus::Optimal);
        assert!((sol.objective - 3.0).abs() < 1e-7);
    }

    #[test]
    fn norm_epigraph() {
        let mut p = ConicProgram::new();
        let t = p.add_var();
        let a = p.add_var();
        let b = p.add_var();
        p.set_cost(t, 1.0);
        p.add_equality(&[(a, 1.0)], 1.0);
        p.add_equality(&[(b, 1.0)], 1.0);
        p.add_soc(t, &[a, b]);
        let sol = solve_socp(&p, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(sol.status, ConicStatus::Optimal);
        assert!((sol.value(t) - 2f64.sqrt()).abs() < 1e-7, "{}", sol.value(t));
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut p = ConicProgram::new();
        let x = p.add_var();
        p.set_cost(x, 1.0);
        p.add_le(&[(x, 1.0)], -1.0);
        p.add_nonneg(x);
        let sol = solve_socp(&p, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(sol.status, ConicStatus::Infeasible);
    }

    #[test]
    fn unbounded_below() {
        let mut p = ConicProgram::new();
        let x = p.add_var();
        p.set_cost(x, 1.0);
        p.add_le(&[(x, 1.0)], 0.0);
        let sol = solve_socp(&p, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(sol.status, ConicStatus::Unbounded);
    }

    #[test]
    fn out_of_bounds_index_rejected() {
        let mut p = ConicProgram::new();
        p.add_var();
        p.add_soc(0, &[3]);
        assert!(matches!(
            solve_socp(&p, DEFAULT_TOLERANCE),
            Err(ConicError::IndexOutOfBounds { index: 3, .. })
        ));
    }

    #[test]
    fn dump_round_trip() {
        let mut p = ConicProgram::new();
        let t = p.add_var();
        let x = p.add_vars(2);
        p.set_cost(t, 1.5);
        p.add_equality(&[(x[0], 1.0), (x[1], -2.0)], 0.25);
        p.add_le(&[(x[0], 1.0)], 4.0);
        p.add_soc(t, &x);
        let text = p.to_dump();
        let q = ConicProgram::from_dump(text.as_bytes()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_dump_is_an_error() {
        let text = "%%ConicProgram 1\nvars 2\nobjective 1\n";
        assert!(matches!(
            ConicProgram::from_dump(text.as_bytes()),
            Err(ConicError::Parse { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        // min c·x over the box [lo, hi] written as slack inequalities: the
        // solver objective can never beat a feasible corner of our choosing.
        #[test]
        fn objective_not_above_any_feasible_point(
            c in prop::collection::vec(-3.0f64..3.0, 3),
            lo in prop::collection::vec(-2.0f64..0.0, 3),
            width in prop::collection::vec(0.1f64..2.0, 3),
            pick in prop::collection::vec(0.0f64..1.0, 3),
        ) {
            let mut p = ConicProgram::new();
            let xs = p.add_vars(3);
            for i in 0..3 {
                p.set_cost(xs[i], c[i]);
                p.add_ge(&[(xs[i], 1.0)], lo[i]);
                p.add_le(&[(xs[i], 1.0)], lo[i] + width[i]);
            }
            let sol = solve_socp(&p, DEFAULT_TOLERANCE).unwrap();
            prop_assert_eq!(sol.status, ConicStatus::Optimal);
            let feasible: f64 = (0..3).map(|i| c[i] * (lo[i] + pick[i] * width[i])).sum();
            prop_assert!(sol.objective <= feasible + 1e-6);
            let exact: f64 = (0..3).map(|i| if c[i] > 0.0 { c[i] * lo[i] } else { c[i] * (lo[i] + width[i]) }).sum();
            prop_assert!((sol.objective - exact).abs() < 1e-6);
        }

        #[test]
        fn solves_are_bit_reproducible(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut p = ConicProgram::new();
            let t = p.add_var();
            let x = p.add_var();
            let y = p.add_var();
            p.set_cost(t, 1.0);
            p.add_equality(&[(x, 1.0), (y, 1.0)], a);
            p.add_equality(&[(x, 1.0), (y, -1.0)], b);
            p.add_soc(t, &[x, y]);
            let s1 = solve_socp(&p, DEFAULT_TOLERANCE).unwrap();
            let s2 = solve_socp(&p, DEFAULT_TOLERANCE).unwrap();
            prop_assert_eq!(s1.x, s2.x);
        }
    }
}
