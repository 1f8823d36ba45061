use nalgebra::DMatrix;

use super::MpcError;
use crate::geometry::ClosedLoopMatrix;

/// Relative residual at which the Riccati iteration stops.
pub const RICCATI_TOL: f64 = 1e-12;
const RICCATI_MAX_ITER: usize = 100_000;

/// Infinite-horizon LQR gain `K` and cost matrix `P` for `x⁺ = Ax + Bu` with
/// stage cost `xᵀQx + uᵀRu`, so that `u = Kx` is optimal.
///
/// `P` is the fixed point of the discrete algebraic Riccati equation, found
/// by value iteration from `P = Q`.
pub fn riccati_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), MpcError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(MpcError::Config("Riccati matrices have inconsistent shapes".into()));
    }
    if r.clone().cholesky().is_none() {
        return Err(MpcError::Config("input weight R must be positive definite".into()));
    }

    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let next = riccati_map(a, b, q, r, &p)?;
        let diff = (&next - &p).amax();
        let scale = 1.0 + next.amax();
        p = symmetrize(next);
        if diff <= RICCATI_TOL * scale {
            let k = gain(a, b, r, &p)?;
            let a_cl = a + b * &k;
            ClosedLoopMatrix::new(a_cl).map_err(|e| {
                MpcError::Config(format!("Riccati gain does not stabilize the system: {e}"))
            })?;
            return Ok((k, p));
        }
        if !p.iter().all(|v| v.is_finite()) || p.amax() > 1e15 {
            break;
        }
    }
    Err(MpcError::Config(
        "Riccati iteration did not converge; (A, B) may not be stabilizable".into(),
    ))
}

/// `Q + AᵀPA - AᵀPB (R + BᵀPB)⁻¹ BᵀPA`.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, MpcError> {
    let pa = p * a;
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let chol = s
        .cholesky()
        .ok_or_else(|| MpcError::Config("R + BᵀPB lost positive definiteness".into()))?;
    let x = chol.solve(&(b.transpose() * &pa));
    Ok(q + a.transpose() * &pa - (a.transpose() * &pb) * x)
}

/// `-(R + BᵀPB)⁻¹ BᵀPA`.
fn gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, MpcError> {
    let s = r + b.transpose() * p * b;
    let chol = s
        .cholesky()
        .ok_or_else(|| MpcError::Config("R + BᵀPB lost positive definiteness".into()))?;
    Ok(-chol.solve(&(b.transpose() * p * a)))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Residual of the Riccati equation at `P`, in the max norm.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    match riccati_map(a, b, q, r, p) {
        Ok(next) => (next - p).amax(),
        Err(_) => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Structure-preserving doubling: `A_{k+1} = A_k (I + G_k H_k)⁻¹ A_k`,
    /// `G_{k+1} = G_k + A_k (I + G_k H_k)⁻¹ G_k A_kᵀ`,
    /// `H_{k+1} = H_k + A_kᵀ H_k (I + G_k H_k)⁻¹ A_k`, with `H_k → P`.
    fn doubling(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let n = a.nrows();
        let eye = DMatrix::<f64>::identity(n, n);
        let mut ak = a.clone();
        let mut gk = b * r.clone().try_inverse().unwrap() * b.transpose();
        let mut hk = q.clone();
        for _ in 0..60 {
            let w = (&eye + &gk * &hk).try_inverse().unwrap();
            let a_next = &ak * &w * &ak;
            let g_next = &gk + &ak * &w * &gk * ak.transpose();
            let h_next = &hk + ak.transpose() * &hk * &w * &ak;
            let done = (&h_next - &hk).amax() <= 1e-15 * (1.0 + h_next.amax());
            ak = a_next;
            gk = g_next;
            hk = h_next;
            if done {
                break;
            }
        }
        hk
    }

    #[test]
    fn zero_dynamics() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let r = DMatrix::from_element(1, 1, 0.7);
        let (k, p) = riccati_gain(&a, &b, &q, &r).unwrap();
        assert!((&p - &q).amax() < 1e-14);
        assert!(k.amax() < 1e-14);
    }

    #[test]
    fn scalar_golden_ratio() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let (k, p) = riccati_gain(&one, &one, &one, &one).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - phi).abs() < 1e-11);
        assert!((k[(0, 0)] + 1.0 / phi).abs() < 1e-11);
    }

    #[test]
    fn double_integrator_gain() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 0.1);
        let (k, p) = riccati_gain(&a, &b, &q, &r).unwrap();
        assert!((k[(0, 0)] + 0.61669526).abs() < 1e-7);
        assert!((k[(0, 1)] + 1.27031633).abs() < 1e-7);
        assert!(riccati_residual(&a, &b, &q, &r, &p) < 1e-10);
        assert!((doubling(&a, &b, &q, &r) - p).amax() < 1e-9);
    }

    #[test]
    fn unstabilizable_pair_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 1.0);
        assert!(riccati_gain(&a, &b, &q, &r).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn agrees_with_doubling(
            a_entries in proptest::collection::vec(-1.0f64..1.0, 9),
            b_entries in proptest::collection::vec(-1.0f64..1.0, 6),
            rho in 0.2f64..0.95,
        ) {
            let mut a = DMatrix::from_row_slice(3, 3, &a_entries);
            let radius = a.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            if radius > 1e-9 {
                a *= rho / radius;
            }
            let b = DMatrix::from_row_slice(3, 2, &b_entries);
            let q = DMatrix::identity(3, 3);
            let r = DMatrix::identity(2, 2) * 0.5;
            let (_, p) = riccati_gain(&a, &b, &q, &r).unwrap();
            prop_assert!(riccati_residual(&a, &b, &q, &r, &p) <= 1e-10);
            let oracle = doubling(&a, &b, &q, &r);
            prop_assert!((&oracle - &p).amax() <= 1e-9 * (1.0 + p.amax()));
        }
    }
}
