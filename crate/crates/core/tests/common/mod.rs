//! Shared test oracles.

use nalgebra::{DMatrix, DVector};

/// Exact minimizer of a strictly convex QP with `A w <= b`, found by trying
/// every active set and keeping the KKT point with the lowest objective.
pub fn enumerate(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<DVector<f64>> {
    let (m, d) = (a.nrows(), a.ncols());
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = rows.len();
        if k > d {
            continue;
        }
        let mut kkt = DMatrix::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(p);
        let mut rhs = DVector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-q));
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..d {
                kkt[(d + r, j)] = a[(i, j)];
                kkt[(j, d + r)] = a[(i, j)];
            }
            rhs[d + r] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let w = sol.rows(0, d).into_owned();
        let feasible = (a * &w - b).iter().all(|&v| v <= 1e-9);
        let dual_ok = (0..k).all(|r| sol[d + r] >= -1e-9);
        if feasible && dual_ok {
            let f = 0.5 * w.dot(&(p * &w)) + q.dot(&w);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, w));
            }
        }
    }
    best.map(|(_, w)| w)
}
