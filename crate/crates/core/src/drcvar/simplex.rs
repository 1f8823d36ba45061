//! Dense two-phase simplex for small-row linear programs
//! `max cᵀx s.t. A x = b, x ≥ 0`.

const PIVOT_TOL: f64 = 1e-11;
const MAX_PIVOTS: usize = 10_000;
const DEGENERATE_LIMIT: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, x: Vec<f64> },
    Infeasible,
    Unbounded,
}

/// Tableau with the objective kept as the last row.
struct Tableau {
    rows: usize,
    cols: usize,
    t: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * (self.cols + 1) + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.t[r * (self.cols + 1) + self.cols]
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let p = self.at(pr, pc);
        for c in 0..w {
            self.t[pr * w + c] /= p;
        }
        for r in 0..=self.rows {
            if r == pr {
                continue;
            }
            let f = self.t[r * w + pc];
            if f != 0.0 {
                for c in 0..w {
                    self.t[r * w + c] -= f * self.t[pr * w + c];
                }
            }
        }
        self.basis[pr] = pc;
    }

    /// Runs simplex iterations on the objective row (stored as reduced
    /// costs to minimize) restricted to columns `< allowed`. Dantzig pricing,
    /// switching to Bland's rule after a run of degenerate pivots.
    fn optimize(&mut self, allowed: usize) -> Result<(), LpOutcome> {
        let mut degenerate_run = 0;
        for _ in 0..MAX_PIVOTS {
            let obj = self.rows;
            let entering = if degenerate_run < DEGENERATE_LIMIT {
                let mut best = None;
                let mut most = -PIVOT_TOL;
                for c in 0..allowed {
                    let r = self.at(obj, c);
                    if r < most {
                        most = r;
                        best = Some(c);
                    }
                }
                best
            } else {
                (0..allowed).find(|&c| self.at(obj, c) < -PIVOT_TOL)
            };
            let Some(pc) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r) / a;
                    let better = match best {
                        None => true,
                        Some((br, bratio)) => {
                            ratio < bratio - 1e-15 || (ratio <= bratio + 1e-15 && self.basis[r] < self.basis[br])
                        }
                    };
                    if better {
                        best = Some((r, ratio));
                    }
                }
            }
            let Some((pr, ratio)) = best else {
                return Err(LpOutcome::Unbounded);
            };
            if ratio.abs() <= 1e-15 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(pr, pc);
        }
        Err(LpOutcome::Unbounded)
    }
}

/// Solves `max cᵀx s.t. A x = b, x ≥ 0` with `A` given row-wise.
pub fn maximize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> LpOutcome {
    let m = a.len();
    let n = c.len();
    // columns: n structural, m artificial
    let cols = n + m;
    let w = cols + 1;
    let mut t = vec![0.0; (m + 1) * w];
    for r in 0..m {
        let sign = if b[r] < 0.0 { -1.0 } else { 1.0 };
        for col in 0..n {
            t[r * w + col] = sign * a[r][col];
        }
        t[r * w + n + r] = 1.0;
        t[r * w + cols] = sign * b[r];
    }
    // phase 1: minimize the sum of artificials
    for r in 0..m {
        for col in 0..w {
            if col < n || col == cols {
                t[m * w + col] -= t[r * w + col];
            }
        }
    }
    let mut tab = Tableau {
        rows: m,
        cols,
        t,
        basis: (n..n + m).collect(),
    };
    if let Err(e) = tab.optimize(cols) {
        return e;
    }
    let scale = 1.0 + b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if -tab.rhs(m) > 1e-9 * scale {
        return LpOutcome::Infeasible;
    }
    // drive remaining artificials out of the basis where possible
    for r in 0..m {
        if tab.basis[r] >= n {
            if let Some(pc) = (0..n).find(|&col| tab.at(r, col).abs() > PIVOT_TOL) {
                tab.pivot(r, pc);
            }
        }
    }
    // phase 2 objective row: minimize -cᵀx
    for col in 0..w {
        tab.t[m * w + col] = if col < n { -c[col] } else { 0.0 };
    }
    for r in 0..m {
        let bc = tab.basis[r];
        if bc < n {
            let f = tab.t[m * w + bc];
            if f != 0.0 {
                for col in 0..w {
                    tab.t[m * w + col] -= f * tab.t[r * w + col];
                }
            }
        }
    }
    if let Err(e) = tab.optimize(n) {
        return e;
    }
    let mut x = vec![0.0; n];
    for r in 0..m {
        if tab.basis[r] < n {
            x[tab.basis[r]] = tab.rhs(r);
        }
    }
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    LpOutcome::Optimal { value, x }
}
