//! Solver vs. brute-force active-set enumeration on small random QPs.

mod common;

use common::enumerate;
use koopnav::qp::{solve, QpProblem, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    let mut case = 0;
    while checked < 250 {
        case += 1;
        let d = rng.gen_range(1..=4);
        let m = rng.gen_range(0..=6);
        let l = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let p = &l * l.transpose() + DMatrix::identity(d, d) * 0.1;
        let q = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let a = DMatrix::from_fn(m, d, |_, _| rng.gen_range(-1.0..1.0));
        // feasible by construction: w0 satisfies every row with margin
        let w0 = DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5));
        let b = &a * &w0 + DVector::from_fn(m, |_, _| rng.gen_range(0.05..1.0));

        let Some(exact) = enumerate(&p, &q, &a, &b) else {
            panic!("case {case}: oracle found no KKT point");
        };
        let pr = QpProblem::new(p.clone(), q.clone()).with_inequalities(
            a.clone(),
            DVector::from_element(m, f64::NEG_INFINITY),
            b.clone(),
        );
        let sol = solve(&pr, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        let err = (&sol.x - &exact).amax() / (1.0 + exact.amax());
        assert!(err <= 1e-5, "case {case}: rel err {err}");
        assert!(sol.kkt.max() <= 1e-6, "case {case}: {:?}", sol.kkt);
        checked += 1;
    }
}

#[test]
fn two_sided_rows_and_bounds_match_one_sided_form() {
    // the same feasible set written as l <= Aw <= u plus bounds, and as
    // one-sided rows for the oracle
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let d = rng.gen_range(1..=3);
        let l = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let p = &l * l.transpose() + DMatrix::identity(d, d) * 0.2;
        let q = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
        let a = DMatrix::from_fn(1, d, |_, _| rng.gen_range(-1.0..1.0));
        let lo = rng.gen_range(-1.0..0.0);
        let hi = rng.gen_range(0.0..1.0);
        let box_ = 0.7;

        let mut rows = DMatrix::zeros(2 + 2 * d, d);
        let mut rhs = DVector::zeros(2 + 2 * d);
        rows.row_mut(0).copy_from(&a.row(0));
        rhs[0] = hi;
        rows.row_mut(1).copy_from(&(-a.row(0)));
        rhs[1] = -lo;
        for j in 0..d {
            rows[(2 + 2 * j, j)] = 1.0;
            rhs[2 + 2 * j] = box_;
            rows[(3 + 2 * j, j)] = -1.0;
            rhs[3 + 2 * j] = box_;
        }
        let exact = enumerate(&p, &q, &rows, &rhs).expect("feasible");
        let pr = QpProblem::new(p, q)
            .with_inequalities(
                a,
                DVector::from_element(1, lo),
                DVector::from_element(1, hi),
            )
            .with_bounds(
                DVector::from_element(d, -box_),
                DVector::from_element(d, box_),
            );
        let sol = solve(&pr, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        assert!(
            (&sol.x - &exact).amax() <= 1e-5 * (1.0 + exact.amax()),
            "case {case}"
        );
        assert!(sol.kkt.max() <= 1e-6);
    }
}
