//! Dense convex QP solver based on operator splitting (ADMM).
//!
//! Problems have the form
//!
//! ```text
//!     minimize     1/2 w' P w + q' w
//!     subject to   A_eq w  = b_eq
//!                  l_in <= A_in w <= u_in
//!                  lb   <=      w <= ub
//! ```
//!
//! Internally the constraints are stacked as `l <= C w <= u` with
//! `C = [A_eq; A_in; I_B]`, where `I_B` selects the variables that carry a
//! finite bound. Bound rows are kept as a (row -> variable, coefficient)
//! list rather than dense identity rows, which is the only place the dense
//! layout departs from the textbook one.
//!
//! The iteration is the relaxed ADMM of OSQP with Ruiz equilibration,
//! adaptive step size, infeasibility certificates and an active-set
//! polishing step. Every solution reported as optimal has passed
//! [`kkt_residuals`] against the solver's tolerances.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Real> {
    pub p: DMatrix<T>,
    pub q: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
    pub a_in: DMatrix<T>,
    pub l_in: DVector<T>,
    pub u_in: DVector<T>,
    /// Variable bounds; infinite entries mean unbounded.
    pub lb: DVector<T>,
    pub ub: DVector<T>,
}

impl<T: Real> QpProblem<T> {
    /// Unconstrained problem in `d` variables.
    pub fn new(p: DMatrix<T>, q: DVector<T>) -> Self {
        let d = q.len();
        QpProblem {
            p,
            q,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, d),
            l_in: DVector::zeros(0),
            u_in: DVector::zeros(0),
            lb: DVector::from_element(d, -T::infinity()),
            ub: DVector::from_element(d, T::infinity()),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<T>, b: DVector<T>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<T>, l: DVector<T>, u: DVector<T>) -> Self {
        self.a_in = a;
        self.l_in = l;
        self.u_in = u;
        self
    }

    pub fn with_bounds(mut self, lb: DVector<T>, ub: DVector<T>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, w: &DVector<T>) -> T {
        (w.dot(&(&self.p * w))) * T::lit(0.5) + self.q.dot(w)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let bad = |m: String| Err(Error::InvalidProblem(m));
        if self.p.shape() != (d, d) {
            return bad(format!("P is {:?}, expected {d}x{d}", self.p.shape()));
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block dimensions disagree".into());
        }
        if self.a_in.ncols() != d
            || self.a_in.nrows() != self.l_in.len()
            || self.l_in.len() != self.u_in.len()
        {
            return bad("inequality block dimensions disagree".into());
        }
        if self.lb.len() != d || self.ub.len() != d {
            return bad("bound vectors must have one entry per variable".into());
        }
        let finite = |m: &DMatrix<T>| m.iter().all(|v| v.is_finite());
        if !finite(&self.p)
            || !self.q.iter().all(|v| v.is_finite())
            || !finite(&self.a_eq)
            || !self.b_eq.iter().all(|v| v.is_finite())
            || !finite(&self.a_in)
        {
            return bad("problem data must be finite".into());
        }
        let scale = T::one() + self.p.amax();
        if (&self.p - self.p.transpose()).amax() > T::lit(1e-10) * scale {
            return bad("P is not symmetric".into());
        }
        let nan = |v: &DVector<T>| v.iter().any(|x| x.partial_cmp(x).is_none());
        if nan(&self.l_in) || nan(&self.u_in) || nan(&self.lb) || nan(&self.ub) {
            return bad("bounds must not be NaN".into());
        }
        if self.l_in.iter().zip(self.u_in.iter()).any(|(l, u)| l > u)
            || self.lb.iter().zip(self.ub.iter()).any(|(l, u)| l > u)
        {
            return bad("lower bounds exceed upper bounds".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    InfeasibleDetected,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max_iterations",
            QpStatus::InfeasibleDetected => "infeasible_detected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings<T> {
    pub eps_abs: T,
    pub eps_rel: T,
    pub eps_prim_inf: T,
    pub eps_dual_inf: T,
    pub max_iter: usize,
    pub rho: T,
    pub sigma: T,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: T,
    pub adaptive_rho: bool,
    pub adapt_interval: usize,
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    pub polish_refine_iters: usize,
    /// Try polishing as soon as both residuals are within this factor of
    /// their tolerances; the polished point is accepted only if it passes
    /// the full KKT check. `1` disables early attempts.
    pub polish_early_factor: T,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        QpSettings {
            eps_abs: T::lit(1e-6),
            eps_rel: T::lit(1e-6),
            eps_prim_inf: T::lit(1e-5),
            eps_dual_inf: T::lit(1e-5),
            max_iter: 20_000,
            rho: T::lit(0.1),
            sigma: T::lit(1e-6),
            alpha: T::lit(1.6),
            adaptive_rho: true,
            adapt_interval: 25,
            check_interval: 5,
            scaling_iters: 10,
            polish: true,
            polish_refine_iters: 3,
            polish_early_factor: T::lit(1e3),
        }
    }
}

/// Primal iterate and stacked duals from an earlier solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart<T: Real> {
    pub x: DVector<T>,
    /// Stacked multipliers in `[eq; in; bounded variables]` order.
    pub y: DVector<T>,
}

/// Residuals of the first-order optimality conditions, all in the
/// unscaled problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct KktReport<T> {
    /// `|| P w + q + A_eq' nu + A_in' lambda + mu ||_inf`
    pub stationarity: T,
    /// Largest equality, inequality or bound violation.
    pub primal: T,
    /// Largest multiplier with the wrong sign for its constraint side.
    pub dual: T,
    /// Largest `|multiplier| * distance to the bound it acts on`.
    pub complementarity: T,
}

impl<T: Real> KktReport<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Real> {
    pub x: DVector<T>,
    /// Multipliers of the equality rows.
    pub y_eq: DVector<T>,
    /// Multipliers of the inequality rows; positive on the upper side.
    pub y_in: DVector<T>,
    /// Multipliers of the variable bounds; positive on the upper side.
    pub y_bounds: DVector<T>,
    pub status: QpStatus,
    pub iterations: usize,
    pub solve_time: std::time::Duration,
    pub objective: T,
    pub kkt: KktReport<T>,
    pub polished: bool,
    pub warm: WarmStart<T>,
}

/// Stacked constraint operator `C = [G; bound rows]`.
#[derive(Debug, Clone)]
struct Stacked<T: Real> {
    g: DMatrix<T>,
    /// variable index of each bound row
    bidx: Vec<usize>,
    /// coefficient of each bound row (1 before scaling)
    bcoef: DVector<T>,
    l: DVector<T>,
    u: DVector<T>,
}

impl<T: Real> Stacked<T> {
    fn from_problem(pr: &QpProblem<T>) -> Self {
        let d = pr.dim();
        let (me, mi) = (pr.a_eq.nrows(), pr.a_in.nrows());
        let mut g = DMatrix::zeros(me + mi, d);
        g.rows_mut(0, me).copy_from(&pr.a_eq);
        g.rows_mut(me, mi).copy_from(&pr.a_in);
        let bidx: Vec<usize> = (0..d)
            .filter(|&j| pr.lb[j].is_finite() || pr.ub[j].is_finite())
            .collect();
        let m = me + mi + bidx.len();
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for i in 0..me {
            l[i] = pr.b_eq[i];
            u[i] = pr.b_eq[i];
        }
        for i in 0..mi {
            l[me + i] = pr.l_in[i];
            u[me + i] = pr.u_in[i];
        }
        for (r, &j) in bidx.iter().enumerate() {
            l[me + mi + r] = pr.lb[j];
            u[me + mi + r] = pr.ub[j];
        }
        let bcoef = DVector::from_element(bidx.len(), T::one());
        Stacked {
            g,
            bidx,
            bcoef,
            l,
            u,
        }
    }

    fn m(&self) -> usize {
        self.g.nrows() + self.bidx.len()
    }

    fn mul(&self, x: &DVector<T>) -> DVector<T> {
        let mg = self.g.nrows();
        let mut out = DVector::zeros(self.m());
        out.rows_mut(0, mg).copy_from(&(&self.g * x));
        for (r, &j) in self.bidx.iter().enumerate() {
            out[mg + r] = self.bcoef[r] * x[j];
        }
        out
    }

    fn tr_mul(&self, y: &DVector<T>) -> DVector<T> {
        let mg = self.g.nrows();
        let mut out = self.g.tr_mul(&y.rows(0, mg).into_owned());
        for (r, &j) in self.bidx.iter().enumerate() {
            out[j] += self.bcoef[r] * y[mg + r];
        }
        out
    }

    /// `C' diag(rho) C`
    fn gram(&self, rho: &DVector<T>) -> DMatrix<T> {
        let mg = self.g.nrows();
        let mut wg = self.g.clone();
        for i in 0..mg {
            let s = rho[i].sqrt();
            wg.row_mut(i).scale_mut(s);
        }
        let mut out = wg.tr_mul(&wg);
        for (r, &j) in self.bidx.iter().enumerate() {
            out[(j, j)] += rho[mg + r] * self.bcoef[r] * self.bcoef[r];
        }
        out
    }

    fn row_inf_norm(&self, i: usize) -> T {
        let mg = self.g.nrows();
        if i < mg {
            self.g.row(i).amax()
        } else {
            self.bcoef[i - mg].abs()
        }
    }
}

/// Diagonal equilibration `P~ = c D P D`, `C~ = E C D`.
struct Scaling<T: Real> {
    d: DVector<T>,
    e: DVector<T>,
    c: T,
}

fn clamp_scale<T: Real>(v: T) -> T {
    let lo = T::lit(1e-4);
    let hi = T::lit(1e4);
    if v < lo {
        T::one()
    } else {
        v.min(hi)
    }
}

fn ruiz<T: Real>(
    p: &mut DMatrix<T>,
    q: &mut DVector<T>,
    c: &mut Stacked<T>,
    iters: usize,
) -> Scaling<T> {
    let n = q.len();
    let m = c.m();
    let mg = c.g.nrows();
    let mut dsc = DVector::from_element(n, T::one());
    let mut esc = DVector::from_element(m, T::one());
    for _ in 0..iters {
        let mut col = DVector::from_fn(n, |j, _| p.column(j).amax());
        for j in 0..n {
            if mg > 0 {
                col[j] = col[j].max(c.g.column(j).amax());
            }
        }
        for (r, &j) in c.bidx.iter().enumerate() {
            col[j] = col[j].max(c.bcoef[r].abs());
        }
        let dd = col.map(|v| T::one() / clamp_scale(v).sqrt());
        let ee = DVector::from_fn(m, |i, _| T::one() / clamp_scale(c.row_inf_norm(i)).sqrt());

        for i in 0..n {
            for j in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
        }
        q.component_mul_assign(&dd);
        for i in 0..mg {
            for j in 0..n {
                c.g[(i, j)] *= ee[i] * dd[j];
            }
        }
        for (r, &j) in c.bidx.iter().enumerate() {
            c.bcoef[r] *= ee[mg + r] * dd[j];
        }
        dsc.component_mul_assign(&dd);
        esc.component_mul_assign(&ee);
    }
    for i in 0..m {
        c.l[i] *= esc[i];
        c.u[i] *= esc[i];
    }

    // cost scaling
    let mean_col = if n > 0 {
        (0..n)
            .map(|j| p.column(j).amax())
            .fold(T::zero(), |a, b| a + b)
            / T::lit(n as f64)
    } else {
        T::one()
    };
    let cost = T::one() / clamp_scale(mean_col.max(q.amax()));
    p.scale_mut(cost);
    q.scale_mut(cost);
    Scaling {
        d: dsc,
        e: esc,
        c: cost,
    }
}

fn project<T: Real>(v: &DVector<T>, l: &DVector<T>, u: &DVector<T>) -> DVector<T> {
    DVector::from_fn(v.len(), |i, _| v[i].max(l[i]).min(u[i]))
}

fn rho_vector<T: Real>(c: &Stacked<T>, rho: T) -> DVector<T> {
    let big = T::lit(1e20);
    DVector::from_fn(c.m(), |i, _| {
        let (l, u) = (c.l[i], c.u[i]);
        if l == u {
            rho * T::lit(1e3)
        } else if l < -big && u > big {
            T::lit(1e-6)
        } else {
            rho
        }
    })
}

/// Fail with `InvalidProblem` unless `P + shift I` is Cholesky-factorable
/// for one of a few small shifts.
fn check_psd<T: Real>(p: &DMatrix<T>) -> Result<()> {
    let n = p.nrows();
    if n == 0 {
        return Ok(());
    }
    let scale = T::one() + p.amax();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || p[(i, j)] == T::zero()));
    if diagonal {
        return if (0..n).all(|i| p[(i, i)] >= -T::lit(1e-6) * scale) {
            Ok(())
        } else {
            Err(Error::InvalidProblem(
                "P is not positive semidefinite".into(),
            ))
        };
    }
    for s in [1e-10, 1e-8, 1e-6] {
        let shifted = p + DMatrix::<T>::identity(n, n) * (T::lit(s) * scale);
        if Cholesky::new(shifted).is_some() {
            return Ok(());
        }
    }
    Err(Error::InvalidProblem(
        "P is not positive semidefinite".into(),
    ))
}

/// Residuals of the optimality conditions at `(x, y)`; `y` stacked.
fn kkt_stacked<T: Real>(
    pr: &QpProblem<T>,
    c: &Stacked<T>,
    x: &DVector<T>,
    y: &DVector<T>,
) -> KktReport<T> {
    let grad = &pr.p * x + &pr.q + c.tr_mul(y);
    let cx = c.mul(x);
    let mut primal = T::zero();
    let mut dual = T::zero();
    let mut comp = T::zero();
    for i in 0..c.m() {
        let (l, u) = (c.l[i], c.u[i]);
        let viol = (l - cx[i]).max(cx[i] - u).max(T::zero());
        primal = primal.max(viol);
        if l == u {
            continue;
        }
        if y[i] > T::zero() {
            if u.is_finite() {
                comp = comp.max(y[i] * (u - cx[i]).abs());
            } else {
                dual = dual.max(y[i]);
            }
        } else if y[i] < T::zero() {
            if l.is_finite() {
                comp = comp.max(-y[i] * (cx[i] - l).abs());
            } else {
                dual = dual.max(-y[i]);
            }
        }
    }
    KktReport {
        stationarity: grad.amax(),
        primal,
        dual,
        complementarity: comp,
    }
}

/// KKT residual report of `solution` against `problem`.
pub fn kkt_residuals<T: Real>(problem: &QpProblem<T>, solution: &QpSolution<T>) -> KktReport<T> {
    let c = Stacked::from_problem(problem);
    let y = stack_duals(
        problem,
        &c,
        &solution.y_eq,
        &solution.y_in,
        &solution.y_bounds,
    );
    kkt_stacked(problem, &c, &solution.x, &y)
}

/// Whether `solution` meets the optimality tolerances of `settings`
/// (the test behind an `Optimal` status).
pub fn certified<T: Real>(
    problem: &QpProblem<T>,
    solution: &QpSolution<T>,
    settings: &QpSettings<T>,
) -> bool {
    let c = Stacked::from_problem(problem);
    let y = stack_duals(
        problem,
        &c,
        &solution.y_eq,
        &solution.y_in,
        &solution.y_bounds,
    );
    let rep = kkt_stacked(problem, &c, &solution.x, &y);
    certify(problem, &c, &solution.x, &y, &rep, settings)
}

fn stack_duals<T: Real>(
    pr: &QpProblem<T>,
    c: &Stacked<T>,
    y_eq: &DVector<T>,
    y_in: &DVector<T>,
    y_bounds: &DVector<T>,
) -> DVector<T> {
    let (me, mi) = (pr.a_eq.nrows(), pr.a_in.nrows());
    let mut y = DVector::zeros(c.m());
    y.rows_mut(0, me).copy_from(y_eq);
    y.rows_mut(me, mi).copy_from(y_in);
    for (r, &j) in c.bidx.iter().enumerate() {
        y[me + mi + r] = y_bounds[j];
    }
    y
}

/// Tolerance each KKT residual must meet for an `Optimal` status.
fn certify<T: Real>(
    pr: &QpProblem<T>,
    c: &Stacked<T>,
    x: &DVector<T>,
    y: &DVector<T>,
    rep: &KktReport<T>,
    s: &QpSettings<T>,
) -> bool {
    let px = (&pr.p * x).amax();
    let cty = c.tr_mul(y).amax();
    let cx = c.mul(x).amax();
    let ymax = y.amax();
    let stat_tol = s.eps_abs + s.eps_rel * px.max(cty).max(pr.q.amax());
    let prim_tol = s.eps_abs + s.eps_rel * cx;
    let comp_tol = s.eps_abs + s.eps_rel * ymax * (T::one() + cx);
    rep.stationarity <= stat_tol
        && rep.primal <= prim_tol
        && rep.dual <= s.eps_abs
        && rep.complementarity <= comp_tol
}

/// Solve the equality-constrained problem on the active set guessed from
/// `(z, y)`; returns the polished `(x, y)` in the unscaled problem.
fn polish<T: Real>(
    pr: &QpProblem<T>,
    c: &Stacked<T>,
    z: &DVector<T>,
    y: &DVector<T>,
    refine: usize,
) -> Option<(DVector<T>, DVector<T>)> {
    let d = pr.dim();
    let mg = c.g.nrows();
    // (row, rhs)
    let mut active: Vec<(usize, T)> = Vec::new();
    for i in 0..c.m() {
        let (l, u) = (c.l[i], c.u[i]);
        if l == u || (l.is_finite() && z[i] - l < -y[i]) {
            active.push((i, l));
        } else if u.is_finite() && u - z[i] < y[i] {
            active.push((i, u));
        }
    }
    let na = active.len();
    let mut a = DMatrix::<T>::zeros(na, d);
    let mut b = DVector::<T>::zeros(na);
    for (r, &(i, rhs)) in active.iter().enumerate() {
        if i < mg {
            a.row_mut(r).copy_from(&c.g.row(i));
        } else {
            a[(r, c.bidx[i - mg])] = c.bcoef[i - mg];
        }
        b[r] = rhs;
    }
    let n = d + na;
    let mut kkt = DMatrix::<T>::zeros(n, n);
    kkt.view_mut((0, 0), (d, d)).copy_from(&pr.p);
    kkt.view_mut((d, 0), (na, d)).copy_from(&a);
    kkt.view_mut((0, d), (d, na)).copy_from(&a.transpose());
    let mut rhs = DVector::<T>::zeros(n);
    rhs.rows_mut(0, d).copy_from(&(-&pr.q));
    rhs.rows_mut(d, na).copy_from(&b);

    let delta = T::lit(1e-9);
    let mut reg = kkt.clone();
    for i in 0..d {
        reg[(i, i)] += delta;
    }
    for i in d..n {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..refine {
        let r = &rhs - &kkt * &sol;
        let dx = lu.solve(&r)?;
        sol += dx;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, d).into_owned();
    let mut yf = DVector::<T>::zeros(c.m());
    for (r, &(i, _)) in active.iter().enumerate() {
        yf[i] = sol[d + r];
    }
    Some((x, yf))
}

/// Reusable solver; holds settings only, per-solve memory is local.
#[derive(Debug, Clone, Default)]
pub struct QpSolver<T: Real> {
    pub settings: QpSettings<T>,
}

impl<T: Real> QpSolver<T> {
    pub fn new(settings: QpSettings<T>) -> Self {
        QpSolver { settings }
    }

    pub fn solve(
        &self,
        problem: &QpProblem<T>,
        warm: Option<&WarmStart<T>>,
    ) -> Result<QpSolution<T>> {
        solve(problem, &self.settings, warm)
    }
}

/// Solve `problem`; see the module docs for the method.
pub fn solve<T: Real>(
    problem: &QpProblem<T>,
    s: &QpSettings<T>,
    warm: Option<&WarmStart<T>>,
) -> Result<QpSolution<T>> {
    let start = Instant::now();
    problem.validate()?;
    check_psd(&problem.p)?;

    let d = problem.dim();
    let orig = Stacked::from_problem(problem);
    let m = orig.m();

    let mut p = problem.p.clone();
    let mut q = problem.q.clone();
    let mut c = orig.clone();
    let sc = ruiz(&mut p, &mut q, &mut c, s.scaling_iters);
    let dinv = sc.d.map(|v| T::one() / v);
    let einv = sc.e.map(|v| T::one() / v);

    // iterates in scaled space
    let mut x = DVector::<T>::zeros(d);
    let mut y = DVector::<T>::zeros(m);
    if let Some(w) = warm {
        if w.x.len() == d && w.y.len() == m {
            x = w.x.component_mul(&dinv);
            y = w.y.component_mul(&einv) * sc.c;
        }
    }
    let mut z = project(&c.mul(&x), &c.l, &c.u);

    let mut rho = s.rho;
    let mut rho_vec = rho_vector(&c, rho);
    let eye = DMatrix::<T>::identity(d, d);
    let factor = |rv: &DVector<T>| -> Result<Cholesky<T, nalgebra::Dyn>> {
        let k = &p + &eye * s.sigma + c.gram(rv);
        Cholesky::new(k).ok_or_else(|| Error::InvalidProblem("KKT factorization failed".into()))
    };
    let mut chol = factor(&rho_vec)?;

    let unscale_x = |x: &DVector<T>| x.component_mul(&sc.d);
    let unscale_y = |y: &DVector<T>| y.component_mul(&sc.e) / sc.c;

    let mut status = QpStatus::MaxIterations;
    let mut iterations = s.max_iter;
    let mut best: Option<(DVector<T>, DVector<T>, bool)> = None;
    let mut last_early = 0usize;
    let one = T::one();

    for it in 1..=s.max_iter {
        let y_prev = y.clone();
        let x_prev = x.clone();

        let rhs = &x * s.sigma - &q + c.tr_mul(&(rho_vec.component_mul(&z) - &y));
        let xt = chol.solve(&rhs);
        let zt = c.mul(&xt);
        x = &xt * s.alpha + &x * (one - s.alpha);
        let zr = &zt * s.alpha + &z * (one - s.alpha);
        let z_new = project(&(&zr + y.component_div(&rho_vec)), &c.l, &c.u);
        y += rho_vec.component_mul(&(&zr - &z_new));
        z = z_new;

        let check = it % s.check_interval.max(1) == 0 || it == s.max_iter;
        let adapt = s.adaptive_rho && it % s.adapt_interval.max(1) == 0;
        if !check && !adapt {
            continue;
        }

        // residuals in the unscaled problem
        let cx = c.mul(&x);
        let px = &p * &x;
        let cty = c.tr_mul(&y);
        let r_prim = (&cx - &z).component_mul(&einv).amax();
        let r_dual = (&px + &q + &cty).component_mul(&dinv).amax() / sc.c;
        let n_cx = cx
            .component_mul(&einv)
            .amax()
            .max(z.component_mul(&einv).amax());
        let n_dual = px
            .component_mul(&dinv)
            .amax()
            .max(cty.component_mul(&dinv).amax())
            .max(q.component_mul(&dinv).amax())
            / sc.c;
        let eps_p = s.eps_abs + s.eps_rel * n_cx;
        let eps_d = s.eps_abs + s.eps_rel * n_dual;

        if check {
            let converged = r_prim <= eps_p && r_dual <= eps_d;
            let f = s.polish_early_factor.max(one);
            let early = s.polish
                && !converged
                && r_prim <= eps_p * f
                && r_dual <= eps_d * f
                && it >= last_early + s.adapt_interval.max(1);
            if early {
                last_early = it;
                let zu = z.component_mul(&einv);
                let yu = unscale_y(&y);
                if let Some((xp, yp)) = polish(problem, &orig, &zu, &yu, s.polish_refine_iters) {
                    let rep = kkt_stacked(problem, &orig, &xp, &yp);
                    if certify(problem, &orig, &xp, &yp, &rep, s) {
                        best = Some((xp, yp, true));
                        status = QpStatus::Optimal;
                        iterations = it;
                        break;
                    }
                }
            }
            if converged {
                let xu = unscale_x(&x);
                let yu = unscale_y(&y);
                let zu = z.component_mul(&einv);
                let mut cand = (xu.clone(), yu.clone(), false);
                if s.polish {
                    if let Some((xp, yp)) = polish(problem, &orig, &zu, &yu, s.polish_refine_iters)
                    {
                        let rp = kkt_stacked(problem, &orig, &xp, &yp);
                        let ra = kkt_stacked(problem, &orig, &xu, &yu);
                        if rp.max() <= ra.max() {
                            cand = (xp, yp, true);
                        }
                    }
                }
                let rep = kkt_stacked(problem, &orig, &cand.0, &cand.1);
                if certify(problem, &orig, &cand.0, &cand.1, &rep, s) {
                    best = Some(cand);
                    status = QpStatus::Optimal;
                    iterations = it;
                    break;
                }
            }

            // infeasibility certificates
            let dy = (&y - &y_prev).component_mul(&sc.e);
            let dy_norm = dy.amax();
            if dy_norm > T::zero() {
                let ctdy = orig.tr_mul(&dy).amax();
                let mut support = T::zero();
                let mut valid = true;
                for i in 0..m {
                    if dy[i] > T::zero() {
                        if orig.u[i].is_finite() {
                            support += orig.u[i] * dy[i];
                        } else {
                            valid = false;
                        }
                    } else if dy[i] < T::zero() {
                        if orig.l[i].is_finite() {
                            support += orig.l[i] * dy[i];
                        } else {
                            valid = false;
                        }
                    }
                }
                if valid && ctdy <= s.eps_prim_inf * dy_norm && support <= -s.eps_prim_inf * dy_norm
                {
                    status = QpStatus::InfeasibleDetected;
                    iterations = it;
                    break;
                }
            }
            let dx = (&x - &x_prev).component_mul(&sc.d);
            let dx_norm = dx.amax();
            if dx_norm > T::zero() {
                let pdx = (&problem.p * &dx).amax();
                let qdx = problem.q.dot(&dx);
                let cdx = orig.mul(&dx);
                let tol = s.eps_dual_inf * dx_norm;
                let cone_ok = (0..m).all(|i| {
                    let (l, u) = (orig.l[i], orig.u[i]);
                    (u.is_finite() || cdx[i] >= -tol)
                        && (l.is_finite() || cdx[i] <= tol)
                        && (!u.is_finite() || cdx[i] <= tol)
                        && (!l.is_finite() || cdx[i] >= -tol)
                        || (!l.is_finite() && !u.is_finite())
                });
                if pdx <= tol && qdx <= -tol && cone_ok {
                    status = QpStatus::InfeasibleDetected;
                    iterations = it;
                    break;
                }
            }
        }

        if adapt {
            let num = r_prim / (n_cx + T::lit(1e-30));
            let den = r_dual / (n_dual + T::lit(1e-30));
            let ratio = (num / (den + T::lit(1e-30))).sqrt();
            let new_rho = (rho * ratio).max(T::lit(1e-6)).min(T::lit(1e6));
            if new_rho > rho * T::lit(5.0) || new_rho < rho / T::lit(5.0) {
                rho = new_rho;
                rho_vec = rho_vector(&c, rho);
                chol = factor(&rho_vec)?;
            }
        }
    }

    let (xu, yu, polished) = best.unwrap_or_else(|| (unscale_x(&x), unscale_y(&y), false));
    let kkt = kkt_stacked(problem, &orig, &xu, &yu);
    let (me, mi) = (problem.a_eq.nrows(), problem.a_in.nrows());
    let mut y_bounds = DVector::zeros(d);
    for (r, &j) in orig.bidx.iter().enumerate() {
        y_bounds[j] = yu[me + mi + r];
    }
    Ok(QpSolution {
        objective: problem.objective(&xu),
        y_eq: yu.rows(0, me).into_owned(),
        y_in: yu.rows(me, mi).into_owned(),
        y_bounds,
        status,
        iterations,
        solve_time: start.elapsed(),
        kkt,
        polished,
        warm: WarmStart {
            x: xu.clone(),
            y: yu,
        },
        x: xu,
    })
}

pub const QP_DUMP_FORMAT: &str = "koopnav-qp";

/// Debug dump of a problem. Matrices are row-major; `null` in a lower
/// (upper) bound vector stands for minus (plus) infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpDump {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub m_eq: usize,
    pub a_eq: Vec<f64>,
    pub b_eq: Vec<f64>,
    pub m_in: usize,
    pub a_in: Vec<f64>,
    pub l_in: Vec<Option<f64>>,
    pub u_in: Vec<Option<f64>>,
    pub lb: Vec<Option<f64>>,
    pub ub: Vec<Option<f64>>,
}

fn rm<T: Real>(m: &DMatrix<T>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)].as_f64()))
        .collect()
}

fn opt<T: Real>(v: &DVector<T>) -> Vec<Option<f64>> {
    v.iter()
        .map(|x| {
            if x.is_finite() {
                Some(x.as_f64())
            } else {
                None
            }
        })
        .collect()
}

impl<T: Real> QpProblem<T> {
    pub fn to_dump(&self) -> QpDump {
        QpDump {
            format: QP_DUMP_FORMAT.into(),
            version: 1,
            d: self.dim(),
            p: rm(&self.p),
            q: self.q.iter().map(|v| v.as_f64()).collect(),
            m_eq: self.a_eq.nrows(),
            a_eq: rm(&self.a_eq),
            b_eq: self.b_eq.iter().map(|v| v.as_f64()).collect(),
            m_in: self.a_in.nrows(),
            a_in: rm(&self.a_in),
            l_in: opt(&self.l_in),
            u_in: opt(&self.u_in),
            lb: opt(&self.lb),
            ub: opt(&self.ub),
        }
    }

    pub fn from_dump(dump: &QpDump) -> Result<Self> {
        if dump.format != QP_DUMP_FORMAT {
            return Err(Error::Config(format!("not a QP dump: {}", dump.format)));
        }
        let d = dump.d;
        let vec = |v: &[f64]| DVector::from_iterator(v.len(), v.iter().map(|&x| T::lit(x)));
        let mat = |r: usize, v: &[f64]| -> Result<DMatrix<T>> {
            if v.len() != r * d {
                return Err(Error::Config("matrix size mismatch in QP dump".into()));
            }
            Ok(DMatrix::from_row_iterator(
                r,
                d,
                v.iter().map(|&x| T::lit(x)),
            ))
        };
        let bound = |v: &[Option<f64>], inf: T| {
            DVector::from_iterator(v.len(), v.iter().map(|x| x.map(T::lit).unwrap_or(inf)))
        };
        let pr = QpProblem {
            p: mat(d, &dump.p)?,
            q: vec(&dump.q),
            a_eq: mat(dump.m_eq, &dump.a_eq)?,
            b_eq: vec(&dump.b_eq),
            a_in: mat(dump.m_in, &dump.a_in)?,
            l_in: bound(&dump.l_in, -T::infinity()),
            u_in: bound(&dump.u_in, T::infinity()),
            lb: bound(&dump.lb, -T::infinity()),
            ub: bound(&dump.ub, T::infinity()),
        };
        pr.validate()?;
        Ok(pr)
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s =
            serde_json::to_string_pretty(&self.to_dump()).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_dump(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dump: QpDump = serde_json::from_str(&s).map_err(|e| Error::format(path, e))?;
        Self::from_dump(&dump)
    }
}
