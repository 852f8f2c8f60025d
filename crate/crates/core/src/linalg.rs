use nalgebra::{DMatrix, DVector};

/// Relative pivot size below which a factorization is treated as singular.
const PIVOT_FLOOR: f64 = 1e-13;

/// Dense LU with partial pivoting, kept around to solve several right-hand sides.
pub(crate) struct DenseLu {
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseLu {
    /// `None` when the matrix is numerically singular.
    pub(crate) fn new(a: DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        let scale = a.amax().max(f64::MIN_POSITIVE);
        let lu = a.lu();
        let u = lu.u();
        let min_pivot = (0..n).map(|k| u[(k, k)].abs()).fold(f64::INFINITY, f64::min);
        if n > 0 && !(min_pivot > PIVOT_FLOOR * scale) {
            return None;
        }
        Some(DenseLu { lu })
    }

    pub(crate) fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let b = DVector::from_column_slice(rhs);
        let x = self.lu.solve(&b)?;
        x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
    }
}

pub(crate) fn solve_dense(a: DMatrix<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    DenseLu::new(a)?.solve(rhs)
}
