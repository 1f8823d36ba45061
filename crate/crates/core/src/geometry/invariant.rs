use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BoxSet, GeometryError, Polytope, Zonotope};

/// Cap on the number of powers tried while approximating the mRPI set.
const MRPI_MAX_STEPS: usize = 2000;
/// Default cap on terminal-set refinement steps.
pub const TERMINAL_MAX_ITER: usize = 200;
/// Slack used when deciding whether a pre-image facet cuts the current set.
const TERMINAL_CUT_TOL: f64 = 1e-9;
/// Offsets this close to zero are snapped so the anchor stays inside.
pub const ANCHOR_SNAP_TOL: f64 = 1e-7;

/// Square matrix with spectral radius strictly below one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopMatrix {
    matrix: DMatrix<f64>,
    spectral_radius: f64,
}

impl ClosedLoopMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, GeometryError> {
        if !matrix.is_square() {
            return Err(GeometryError::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Invalid("non-finite closed-loop matrix".into()));
        }
        let spectral_radius = spectral_radius(&matrix);
        if !(spectral_radius < 1.0) {
            return Err(GeometryError::NotStable(spectral_radius));
        }
        Ok(Self {
            matrix,
            spectral_radius,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

pub(crate) fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Outer approximation of the minimal robust positively invariant set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MrpiApprox {
    pub zonotope: Zonotope,
    pub polytope: Polytope,
    /// Number of closed-loop powers summed.
    pub steps: usize,
    /// Contraction factor with `A^steps W ⊆ alpha W`.
    pub alpha: f64,
}

/// `(1 - α)^{-1} ⊕_{k<s} A^k W` with `s` the first power such that
/// `A^s W ⊆ α W` and `α ≤ eps`. The result is robust positively invariant
/// and contains the true minimal set; the excess shrinks with `eps`.
pub fn mrpi_zonotope(
    a_cl: &ClosedLoopMatrix,
    w: &BoxSet,
    eps: f64,
) -> Result<MrpiApprox, GeometryError> {
    let n = a_cl.dim();
    if w.dim() != n {
        return Err(GeometryError::DimensionMismatch {
            expected: n,
            got: w.dim(),
        });
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(GeometryError::Invalid(format!(
            "mRPI accuracy must lie in (0, 1), got {eps}"
        )));
    }
    if w.is_empty() || !w.contains(&DVector::zeros(n), 0.0) {
        return Err(GeometryError::Invalid(
            "disturbance set must contain the origin".into(),
        ));
    }
    let wz = w.to_zonotope();
    let a = a_cl.matrix();
    let scale = w.lower().amax().max(w.upper().amax());
    if scale == 0.0 {
        let zonotope = Zonotope::new(DVector::zeros(n), DMatrix::zeros(n, 0));
        let polytope = zonotope.to_polytope()?;
        return Ok(MrpiApprox {
            zonotope,
            polytope,
            steps: 0,
            alpha: 0.0,
        });
    }

    let mut acc = wz.clone();
    let mut power = a.clone();
    for s in 1..=MRPI_MAX_STEPS {
        let image = wz.linear_map(&power);
        if let Some(alpha) = containment_factor(&image, w, scale) {
            if alpha <= eps {
                let zonotope = acc.scale(1.0 / (1.0 - alpha));
                let polytope = zonotope.to_polytope()?;
                return Ok(MrpiApprox {
                    zonotope,
                    polytope,
                    steps: s,
                    alpha,
                });
            }
        }
        acc = acc.minkowski_sum(&image);
        power = a * power;
    }
    Err(GeometryError::NonConvergence(MRPI_MAX_STEPS))
}

/// Smallest `α` with `image ⊆ α W` for a box `W` containing the origin, or
/// `None` when a flat direction of `W` is not matched.
fn containment_factor(image: &Zonotope, w: &BoxSet, scale: f64) -> Option<f64> {
    let n = w.dim();
    let mut alpha: f64 = 0.0;
    for i in 0..n {
        for sgn in [1.0, -1.0] {
            let mut d = DVector::zeros(n);
            d[i] = sgn;
            let hw = w.support(&d);
            let hi = image.support(&d);
            if hw > 1e-14 * scale {
                alpha = alpha.max(hi / hw);
            } else if hi > 1e-14 * scale {
                return None;
            }
        }
    }
    Some(alpha)
}

/// H-representation of [`mrpi_zonotope`].
pub fn mrpi_approx(
    a_cl: &ClosedLoopMatrix,
    w: &BoxSet,
    eps: f64,
) -> Result<Polytope, GeometryError> {
    Ok(mrpi_zonotope(a_cl, w, eps)?.polytope)
}

/// Maximal positively invariant subset of the tightened constraints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TerminalSet {
    /// The set, in the original (unshifted) coordinates.
    pub set: Polytope,
    /// Equilibrium state the set is built around.
    pub anchor_state: DVector<f64>,
    /// Nominal input at the anchor.
    pub anchor_input: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Maximal positively invariant set of `s⁺ = A_cl s` inside
/// `{s ∈ X_tight, K s ∈ U_tight}`.
pub fn terminal_set(
    a_cl: &ClosedLoopMatrix,
    k: &DMatrix<f64>,
    x_tight: &Polytope,
    u_tight: &Polytope,
) -> Result<TerminalSet, GeometryError> {
    let n = a_cl.dim();
    let m = k.nrows();
    terminal_set_about(
        a_cl,
        k,
        x_tight,
        u_tight,
        &DVector::zeros(n),
        &DVector::zeros(m),
        TERMINAL_MAX_ITER,
    )
}

/// Maximal positively invariant set of the shifted law
/// `s⁺ = s_e + A_cl (s - s_e)`, `v = v_e + K (s - s_e)` inside the tightened
/// constraints, for an equilibrium pair `(s_e, v_e)`.
///
/// With `s_e = 0, v_e = 0` this is the usual terminal set. Anchor offsets
/// within a small tolerance of zero are snapped so that the anchor itself
/// belongs to the starting set.
pub fn terminal_set_about(
    a_cl: &ClosedLoopMatrix,
    k: &DMatrix<f64>,
    x_tight: &Polytope,
    u_tight: &Polytope,
    s_e: &DVector<f64>,
    v_e: &DVector<f64>,
    max_iter: usize,
) -> Result<TerminalSet, GeometryError> {
    let n = a_cl.dim();
    if x_tight.dim() != n || k.ncols() != n || s_e.len() != n {
        return Err(GeometryError::DimensionMismatch {
            expected: n,
            got: x_tight.dim(),
        });
    }
    if u_tight.dim() != k.nrows() || v_e.len() != k.nrows() {
        return Err(GeometryError::DimensionMismatch {
            expected: k.nrows(),
            got: u_tight.dim(),
        });
    }
    let empty = |iterations| TerminalSet {
        set: Polytope::empty(n),
        anchor_state: s_e.clone(),
        anchor_input: v_e.clone(),
        converged: true,
        iterations,
    };
    if x_tight.is_empty() || u_tight.is_empty() {
        return Ok(empty(0));
    }

    // Work in deviation coordinates d = s - s_e.
    let x_dev = snap_anchor(&x_tight.translate(s_e));
    let u_dev = snap_anchor(&u_tight.translate(v_e)).preimage(k)?;
    let mut cur = x_dev.intersect(&u_dev)?.remove_redundant()?;
    if cur.is_empty() || cur.clone().check_empty()?.is_empty() {
        return Ok(empty(0));
    }

    for it in 1..=max_iter {
        let pre = cur.preimage(a_cl.matrix())?;
        let mut cuts_h = Vec::new();
        let mut cuts_k = Vec::new();
        for r in 0..pre.num_facets() {
            let d = pre.normals().row(r).transpose();
            if d.norm() < 1e-14 {
                continue;
            }
            let best = cur.support(&d)?;
            if best == f64::NEG_INFINITY {
                return Ok(empty(it));
            }
            if best > pre.offsets()[r] + TERMINAL_CUT_TOL * (1.0 + pre.offsets()[r].abs()) {
                cuts_h.push(pre.normals().row(r).into_owned());
                cuts_k.push(pre.offsets()[r]);
            }
        }
        if cuts_h.is_empty() {
            let set = cur.check_empty()?;
            if set.is_empty() {
                return Ok(empty(it));
            }
            return Ok(TerminalSet {
                set: shift_back(&set, s_e),
                anchor_state: s_e.clone(),
                anchor_input: v_e.clone(),
                converged: true,
                iterations: it,
            });
        }
        let cuts = Polytope::new(DMatrix::from_rows(&cuts_h), DVector::from_vec(cuts_k))?;
        cur = cur.intersect(&cuts)?.remove_redundant()?;
        if cur.is_empty() {
            return Ok(empty(it));
        }
    }
    log::warn!("terminal set iteration hit the cap of {max_iter} steps");
    Ok(TerminalSet {
        set: shift_back(&cur, s_e),
        anchor_state: s_e.clone(),
        anchor_input: v_e.clone(),
        converged: false,
        iterations: max_iter,
    })
}

fn snap_anchor(p: &Polytope) -> Polytope {
    let offsets = p.offsets().map(|o| {
        if o < 0.0 && o > -ANCHOR_SNAP_TOL {
            0.0
        } else {
            o
        }
    });
    Polytope::new(p.normals().clone(), offsets).expect("same shape as input")
}

fn shift_back(p: &Polytope, s_e: &DVector<f64>) -> Polytope {
    p.translate(&(-s_e))
}
