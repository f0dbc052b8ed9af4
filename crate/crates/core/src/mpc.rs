//! Koopman-space MPC with tightened, softened half-space constraints.
//!
//! Decision vector, in order:
//!
//! ```text
//!   z_1 .. z_N        lifted predictions (p each)
//!   u_0 .. u_{N-1}    controls (m each)
//!   e_1 .. e_N        per-step slacks, one per obstacle row
//!   e_s               shared slack, one per obstacle row
//!   t_1 .. t_N, t_s   epigraph variables (only for the inf-norm)
//! ```
//!
//! Tracking cost and safety rows act on the predictions `z_1 .. z_N`;
//! the current lifted state `z_0` is data and enters the first dynamics row.

use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{KoopmanModel, LiftedState};
use crate::qp::{self, KktReport, QpProblem, QpSettings, QpStatus, WarmStart};
use crate::safe_sets::{horizon_constraints, HorizonConstraints, ObstaclePrediction};
use crate::scalar::Real;
use crate::sim_env::{Control, ControlBounds, ObstacleSpec, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackNorm {
    /// Linear penalty on the (nonnegative) slack sum.
    #[default]
    One,
    /// Penalty on the largest slack through one epigraph variable per step.
    Inf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig<T: Real> {
    pub horizon: usize,
    /// p x p lifted-state penalty.
    pub q: DMatrix<T>,
    /// m x m control penalty.
    pub r: DMatrix<T>,
    /// Quadratic slack weight; the slack penalty matrix is `s * I`.
    pub s: T,
    pub rho1: T,
    pub slack_norm: SlackNorm,
    pub eps_max: T,
    /// `false` drops every slack variable and enforces the safety rows hard.
    pub soft: bool,
    pub bounds: ControlBounds<T>,
    pub prediction: ObstaclePrediction,
    pub warm_start: bool,
    /// Solve the equivalent problem with the predictions eliminated.
    pub condensed: bool,
    pub solver: QpSettings<T>,
}

impl<T: Real> MpcConfig<T> {
    /// Defaults for a lifted dimension `p` with position slots `pos`.
    pub fn for_lifted(p: usize, pos: [usize; 2]) -> Self {
        // positions dominate; heading observables get a light weight so the
        // reference heading guides rather than dictates the turn
        let mut q = DMatrix::identity(p, p) * T::lit(0.1);
        for &i in &pos {
            q[(i, i)] = T::lit(10.0);
        }
        MpcConfig {
            horizon: 10,
            q,
            r: DMatrix::identity(2, 2) * T::lit(0.1),
            s: T::lit(1e3),
            rho1: T::lit(1e3),
            slack_norm: SlackNorm::One,
            eps_max: T::lit(0.5),
            soft: true,
            bounds: ControlBounds::default(),
            prediction: ObstaclePrediction::Frozen,
            warm_start: true,
            condensed: true,
            solver: QpSettings::default(),
        }
    }

    pub fn for_model(model: &KoopmanModel<T>) -> Self {
        Self::for_lifted(model.lifted_dim(), model.dictionary.position_slots())
    }

    pub fn validate(&self, p: usize, m: usize) -> Result<()> {
        let cfg = |s: String| Err(Error::Config(s));
        if self.horizon == 0 {
            return cfg("horizon must be at least 1".into());
        }
        if self.q.shape() != (p, p) {
            return cfg(format!(
                "Q is {:?} but the model has p = {p}",
                self.q.shape()
            ));
        }
        if self.r.shape() != (m, m) {
            return cfg(format!(
                "R is {:?} but the model has m = {m}",
                self.r.shape()
            ));
        }
        if m != 2 {
            return cfg(format!("unicycle MPC needs m = 2 controls, model has {m}"));
        }
        if !(self.s > T::zero() && self.rho1 > T::zero() && self.eps_max > T::zero()) {
            return cfg("S, rho1 and eps_max must be positive".into());
        }
        if self.r.clone().cholesky().is_none() {
            return cfg("R must be positive definite".into());
        }
        let qs = (&self.q + self.q.transpose()) * T::lit(0.5);
        let shift = T::lit(1e-9) * (T::one() + qs.amax());
        if (qs + DMatrix::identity(p, p) * shift).cholesky().is_none() {
            return cfg("Q must be positive semidefinite".into());
        }
        Ok(())
    }
}

/// Column and row offsets of one assembled MPC problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpcLayout {
    pub horizon: usize,
    pub p: usize,
    pub m: usize,
    /// obstacle rows per step
    pub n_obs: usize,
    pub soft: bool,
    pub inf_norm: bool,
}

impl MpcLayout {
    pub fn z(&self, i: usize) -> usize {
        (i - 1) * self.p
    }

    pub fn u(&self, i: usize) -> usize {
        self.horizon * self.p + i * self.m
    }

    fn n_slack(&self) -> usize {
        if self.soft {
            self.n_obs
        } else {
            0
        }
    }

    pub fn e(&self, i: usize) -> usize {
        self.u(self.horizon) + (i - 1) * self.n_slack()
    }

    pub fn e_shared(&self) -> usize {
        self.e(self.horizon + 1)
    }

    /// Epigraph variable of step `i` (`horizon + 1` is the shared one).
    pub fn t(&self, i: usize) -> usize {
        self.e_shared() + self.n_slack() + (i - 1)
    }

    pub fn dim(&self) -> usize {
        let t = if self.soft && self.inf_norm && self.n_obs > 0 {
            self.horizon + 1
        } else {
            0
        };
        self.e_shared() + self.n_slack() + t
    }

    fn has_epigraph(&self) -> bool {
        self.soft && self.inf_norm && self.n_obs > 0
    }

    pub fn n_eq(&self) -> usize {
        self.horizon * self.p
    }

    /// safety rows, then (soft) cap rows, then (inf-norm) epigraph rows
    pub fn n_in(&self) -> usize {
        let safety = self.horizon * self.n_obs;
        let caps = if self.soft { safety } else { 0 };
        let epi = if self.has_epigraph() {
            (self.horizon + 1) * self.n_obs
        } else {
            0
        };
        safety + caps + epi
    }
}

/// An assembled MPC problem and the layout needed to read its solution.
#[derive(Debug, Clone)]
pub struct MpcProblem<T: Real> {
    pub qp: QpProblem<T>,
    pub layout: MpcLayout,
    pub z0: LiftedState<T>,
    /// Pose the lifted coordinates are relative to (body-frame models).
    pub origin: Option<State<T>>,
}

/// Assemble the QP for one receding-horizon step.
pub fn build_mpc_qp<T: Real>(
    model: &KoopmanModel<T>,
    x_k: &State<T>,
    x_ref: &State<T>,
    constraints: &HorizonConstraints<T>,
    cfg: &MpcConfig<T>,
) -> Result<MpcProblem<T>> {
    let (p, m) = (model.lifted_dim(), model.control_dim());
    cfg.validate(p, m)?;
    let n = cfg.horizon;
    if constraints.horizon() != n {
        return Err(Error::Config(format!(
            "constraints cover {} steps, horizon is {n}",
            constraints.horizon()
        )));
    }
    let n_obs = constraints.steps.first().map_or(0, |s| s.len());
    if constraints.steps.iter().any(|s| s.len() != n_obs) {
        return Err(Error::Config(
            "constraint row count varies across the horizon".into(),
        ));
    }
    let lay = MpcLayout {
        horizon: n,
        p,
        m,
        n_obs,
        soft: cfg.soft,
        inf_norm: cfg.slack_norm == SlackNorm::Inf,
    };
    let d = lay.dim();
    let two = T::lit(2.0);
    let origin = model.frame_origin(x_k);
    let framed;
    let (x_k, x_ref, constraints) = match &origin {
        Some(o) => {
            framed = constraints.in_frame(o);
            (x_k.relative_to(o), x_ref.relative_to(o), &framed)
        }
        None => (*x_k, *x_ref, constraints),
    };
    let z0 = model.lift(&x_k.to_vec())?;
    let zbar = model.lift(&x_ref.to_vec())?;
    let [px, py] = model.dictionary.position_slots();

    // cost
    let mut pm = DMatrix::<T>::zeros(d, d);
    let mut q = DVector::<T>::zeros(d);
    let qsym = (&cfg.q + cfg.q.transpose()) * T::lit(0.5);
    let rsym = (&cfg.r + cfg.r.transpose()) * T::lit(0.5);
    let qz = &qsym * &zbar.0 * (-two);
    for i in 1..=n {
        let o = lay.z(i);
        pm.view_mut((o, o), (p, p)).copy_from(&(&qsym * two));
        q.rows_mut(o, p).copy_from(&qz);
    }
    for i in 0..n {
        let o = lay.u(i);
        pm.view_mut((o, o), (m, m)).copy_from(&(&rsym * two));
    }
    let ns = lay.n_slack();
    if ns > 0 {
        for j in lay.e(1)..lay.e_shared() + ns {
            pm[(j, j)] = cfg.s * two;
        }
        if lay.has_epigraph() {
            for i in 1..=n + 1 {
                q[lay.t(i)] = cfg.rho1;
            }
        } else {
            for j in lay.e(1)..lay.e_shared() + ns {
                q[j] = cfg.rho1;
            }
        }
    }

    // dynamics: z_{i+1} - A z_i - B u_i = 0, z_0 folded into the first block
    let mut a_eq = DMatrix::<T>::zeros(lay.n_eq(), d);
    let mut b_eq = DVector::<T>::zeros(lay.n_eq());
    for i in 0..n {
        let r = i * p;
        a_eq.view_mut((r, lay.z(i + 1)), (p, p))
            .fill_with_identity();
        if i > 0 {
            a_eq.view_mut((r, lay.z(i)), (p, p)).copy_from(&(-&model.a));
        }
        a_eq.view_mut((r, lay.u(i)), (p, m)).copy_from(&(-&model.b));
    }
    b_eq.rows_mut(0, p).copy_from(&(&model.a * &z0.0));

    // safety:  n . pos(z_i) + c + e_s + e_i >= delta
    let mut a_in = DMatrix::<T>::zeros(lay.n_in(), d);
    let mut l_in = DVector::<T>::from_element(lay.n_in(), -T::infinity());
    let mut u_in = DVector::<T>::from_element(lay.n_in(), T::infinity());
    let mut row = 0;
    for (i, set) in (1..=n).zip(&constraints.steps) {
        for (j, c) in set.rows.iter().enumerate() {
            a_in[(row, lay.z(i) + px)] = c.halfspace.normal[0];
            a_in[(row, lay.z(i) + py)] = c.halfspace.normal[1];
            if lay.soft {
                a_in[(row, lay.e(i) + j)] = T::one();
                a_in[(row, lay.e_shared() + j)] = T::one();
            }
            l_in[row] = set.margin - c.halfspace.offset;
            row += 1;
        }
    }
    if lay.soft {
        for i in 1..=n {
            for j in 0..n_obs {
                a_in[(row, lay.e(i) + j)] = T::one();
                a_in[(row, lay.e_shared() + j)] = T::one();
                u_in[row] = cfg.eps_max;
                row += 1;
            }
        }
    }
    if lay.has_epigraph() {
        // e - t <= 0
        for i in 1..=n + 1 {
            for j in 0..n_obs {
                a_in[(row, lay.e(i) + j)] = T::one();
                a_in[(row, lay.t(i))] = -T::one();
                u_in[row] = T::zero();
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, lay.n_in());

    let mut lb = DVector::<T>::from_element(d, -T::infinity());
    let mut ub = DVector::<T>::from_element(d, T::infinity());
    for i in 0..n {
        let o = lay.u(i);
        let (lo, hi) = (cfg.bounds.lower(), cfg.bounds.upper());
        for c in 0..2 {
            lb[o + c] = lo[c];
            ub[o + c] = hi[c];
        }
    }
    for j in lay.e(1)..lay.e_shared() + ns {
        lb[j] = T::zero();
        ub[j] = cfg.eps_max;
    }

    let qp = QpProblem::new(pm, q)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, l_in, u_in)
        .with_bounds(lb, ub);
    Ok(MpcProblem {
        qp,
        layout: lay,
        z0,
        origin,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStepResult<T: Real> {
    /// Control to apply; the brake command when `fallback` is set.
    pub control: Control<T>,
    /// Predicted lifted states `z_0 .. z_N`, in the model frame.
    pub predicted: Vec<DVector<T>>,
    /// Origin of the model frame, if not the world frame.
    pub origin: Option<State<T>>,
    /// Planned controls `u_0 .. u_{N-1}`.
    pub plan: Vec<Control<T>>,
    /// Shared slack per obstacle row.
    pub slack_shared: Vec<T>,
    /// Per-step slack, `slack_steps[i - 1][j]` for step `i`, row `j`.
    pub slack_steps: Vec<Vec<T>>,
    pub objective: T,
    pub status: QpStatus,
    pub iterations: usize,
    pub solve_time: Duration,
    pub fallback: bool,
    pub n_halfspaces: usize,
    /// Residuals of the stacked problem.
    pub kkt: KktReport<T>,
    pub warm: WarmStart<T>,
}

impl<T: Real> MpcStepResult<T> {
    pub fn max_step_slack(&self) -> T {
        self.slack_steps
            .iter()
            .flatten()
            .fold(T::zero(), |a, &b| a.max(b))
    }

    pub fn max_shared_slack(&self) -> T {
        self.slack_shared.iter().fold(T::zero(), |a, &b| a.max(b))
    }

    /// Decoded world-frame prediction for step `i` of the horizon.
    pub fn predicted_state(&self, model: &KoopmanModel<T>, i: usize) -> Result<State<T>> {
        let s = State::from_slice(&model.decode(&LiftedState(self.predicted[i].clone()))?)?;
        Ok(match &self.origin {
            Some(o) => State::from_relative(o, &s),
            None => s,
        })
    }

    pub fn total_slack(&self) -> T {
        self.slack_steps
            .iter()
            .flatten()
            .chain(&self.slack_shared)
            .fold(T::zero(), |a, &b| a + b)
    }
}

/// The stacked problem with the predictions eliminated: `w = M r + w0`,
/// where `r` collects controls and slacks.
#[derive(Debug, Clone)]
pub struct CondensedQp<T: Real> {
    pub qp: QpProblem<T>,
    map: DMatrix<T>,
    w0: DVector<T>,
    nz: usize,
}

impl<T: Real> CondensedQp<T> {
    /// Eliminate the first `nz` variables using the equality rows, whose
    /// leading `nz x nz` block must be unit lower triangular (the dynamics
    /// rows have this shape).
    pub fn new(stacked: &QpProblem<T>, nz: usize) -> Result<Self> {
        let d = stacked.dim();
        if stacked.a_eq.nrows() != nz || nz > d {
            return Err(Error::InvalidProblem(
                "equality rows do not match the eliminated block".into(),
            ));
        }
        if (0..nz).any(|j| stacked.lb[j].is_finite() || stacked.ub[j].is_finite()) {
            return Err(Error::InvalidProblem(
                "eliminated variables must be unbounded".into(),
            ));
        }
        let dr = d - nz;
        let az = stacked.a_eq.columns(0, nz).into_owned();
        let ar = stacked.a_eq.columns(nz, dr);
        let bad = || Error::InvalidProblem("dynamics block is singular".into());
        let f = az.solve_lower_triangular(&stacked.b_eq).ok_or_else(bad)?;
        // only the columns of r that enter the dynamics (the controls) have
        // a nonzero image in z; the rest of the map is the identity
        let active: Vec<usize> = (0..dr)
            .filter(|&j| ar.column(j).iter().any(|v| *v != T::zero()))
            .collect();
        let na = active.len();
        let ar_act = DMatrix::from_fn(nz, na, |i, j| -ar[(i, active[j])]);
        let g = az.solve_lower_triangular(&ar_act).ok_or_else(bad)?;
        let mut map = DMatrix::<T>::zeros(d, dr);
        for (c, &j) in active.iter().enumerate() {
            map.view_mut((0, j), (nz, 1)).copy_from(&g.column(c));
        }
        map.view_mut((nz, 0), (dr, dr)).fill_with_identity();
        let mut w0 = DVector::<T>::zeros(d);
        w0.rows_mut(0, nz).copy_from(&f);

        // M^T P M = g^T Pzz g + g^T Pzr + Prz g + Prr, on the active columns
        let pzz = stacked.p.view((0, 0), (nz, nz));
        let pzr = stacked.p.view((0, nz), (nz, dr));
        let mut pm = stacked.p.view((nz, nz), (dr, dr)).into_owned();
        let gpg = g.tr_mul(&(pzz * &g));
        let gpr = g.tr_mul(&pzr);
        for (a, &i) in active.iter().enumerate() {
            for (b, &j) in active.iter().enumerate() {
                pm[(i, j)] += gpg[(a, b)];
            }
            for j in 0..dr {
                pm[(i, j)] += gpr[(a, j)];
                pm[(j, i)] += gpr[(a, j)];
            }
        }
        let pm = (&pm + pm.transpose()) * T::lit(0.5);
        let v = &stacked.p * &w0 + &stacked.q;
        let mut q = v.rows(nz, dr).into_owned();
        let gv = g.tr_mul(&v.rows(0, nz));
        for (a, &i) in active.iter().enumerate() {
            q[i] += gv[a];
        }
        let mut a_in = stacked.a_in.columns(nz, dr).into_owned();
        let azg = stacked.a_in.columns(0, nz) * &g;
        for (a, &i) in active.iter().enumerate() {
            let mut col = a_in.column_mut(i);
            col += azg.column(a);
        }
        let shift = &stacked.a_in * &w0;
        let qp = QpProblem::new(pm, q)
            .with_inequalities(a_in, &stacked.l_in - &shift, &stacked.u_in - &shift)
            .with_bounds(
                stacked.lb.rows(nz, dr).into_owned(),
                stacked.ub.rows(nz, dr).into_owned(),
            );
        Ok(CondensedQp { qp, map, w0, nz })
    }

    /// Lift a condensed solution to a primal-dual point of `stacked`; the
    /// dynamics multipliers come from the stationarity rows of the
    /// eliminated block.
    pub fn expand(&self, stacked: &QpProblem<T>, sol: &qp::QpSolution<T>) -> qp::QpSolution<T> {
        let d = stacked.dim();
        let nz = self.nz;
        let x = &self.map * &sol.x + &self.w0;
        let mut y_bounds = DVector::zeros(d);
        y_bounds.rows_mut(nz, d - nz).copy_from(&sol.y_bounds);
        let grad = &stacked.p * &x + &stacked.q + stacked.a_in.tr_mul(&sol.y_in) + &y_bounds;
        let azt = stacked.a_eq.columns(0, nz).transpose();
        let rhs = -grad.rows(0, nz).into_owned();
        let y_eq = azt
            .solve_upper_triangular(&rhs)
            .unwrap_or_else(|| DVector::zeros(nz));
        qp::QpSolution {
            objective: stacked.objective(&x),
            warm: sol.warm.clone(),
            x,
            y_eq,
            y_in: sol.y_in.clone(),
            y_bounds,
            status: sol.status,
            iterations: sol.iterations,
            solve_time: sol.solve_time,
            kkt: sol.kkt,
            polished: sol.polished,
        }
    }
}

/// Solve an assembled problem and unpack it.
///
/// With `cfg.condensed` the solver runs on [`CondensedQp`]; the returned
/// KKT residuals and status are always those of the stacked problem.
pub fn solve_mpc_qp<T: Real>(
    problem: &MpcProblem<T>,
    cfg: &MpcConfig<T>,
    warm: Option<&WarmStart<T>>,
) -> Result<MpcStepResult<T>> {
    let lay = &problem.layout;
    let start = std::time::Instant::now();
    let mut sol = if cfg.condensed {
        let cond = CondensedQp::new(&problem.qp, lay.n_eq())?;
        let inner = qp::solve(&cond.qp, &cfg.solver, warm)?;
        let mut full = cond.expand(&problem.qp, &inner);
        full.kkt = qp::kkt_residuals(&problem.qp, &full);
        if full.status == QpStatus::Optimal && !qp::certified(&problem.qp, &full, &cfg.solver) {
            log::warn!("condensed optimum failed stacked KKT check: {:?}", full.kkt);
            full.status = QpStatus::MaxIterations;
        }
        full
    } else {
        qp::solve(&problem.qp, &cfg.solver, warm)?
    };
    sol.solve_time = start.elapsed();
    let w = &sol.x;
    let mut predicted = vec![problem.z0.0.clone()];
    predicted.extend((1..=lay.horizon).map(|i| w.rows(lay.z(i), lay.p).into_owned()));
    let plan: Vec<Control<T>> = (0..lay.horizon)
        .map(|i| Control::new(w[lay.u(i)], w[lay.u(i) + 1]))
        .collect();
    let ns = lay.n_slack();
    let slack_steps = (1..=lay.horizon)
        .map(|i| (0..ns).map(|j| w[lay.e(i) + j].max(T::zero())).collect())
        .collect();
    let slack_shared = (0..ns)
        .map(|j| w[lay.e_shared() + j].max(T::zero()))
        .collect();
    let fallback = sol.status != QpStatus::Optimal;
    let control = if fallback {
        Control::zero()
    } else {
        cfg.bounds.clamp(plan[0])
    };
    Ok(MpcStepResult {
        control,
        predicted,
        origin: problem.origin,
        plan,
        slack_shared,
        slack_steps,
        objective: sol.objective,
        status: sol.status,
        iterations: sol.iterations,
        solve_time: sol.solve_time,
        fallback,
        n_halfspaces: lay.n_obs,
        kkt: sol.kkt,
        warm: sol.warm,
    })
}

fn shift_blocks<T: Real>(v: &mut DVector<T>, first: usize, width: usize, count: usize) {
    for i in 0..count.saturating_sub(1) {
        for c in 0..width {
            v[first + i * width + c] = v[first + (i + 1) * width + c];
        }
    }
}

/// Shift a previous solution one step forward so it can seed the next
/// solve. `condensed` selects the variable space the warm start lives in.
/// Returns `None` when the layouts differ.
pub fn shift_warm_start<T: Real>(
    prev: &WarmStart<T>,
    prev_lay: &MpcLayout,
    lay: &MpcLayout,
    condensed: bool,
) -> Option<WarmStart<T>> {
    let (nz, neq) = if condensed {
        (0, 0)
    } else {
        (lay.horizon * lay.p, lay.n_eq())
    };
    let dim = lay.dim() - lay.horizon * lay.p + nz;
    if prev_lay != lay || prev.x.len() != dim {
        return None;
    }
    let n = lay.horizon;
    let ns = lay.n_slack();
    let u0 = lay.u(0) - lay.horizon * lay.p + nz;
    let e0 = u0 + n * lay.m;

    let mut x = prev.x.clone();
    if !condensed {
        shift_blocks(&mut x, 0, lay.p, n);
    }
    shift_blocks(&mut x, u0, lay.m, n);
    shift_blocks(&mut x, e0, ns, n);

    // stacked duals: [dynamics; safety; caps; epigraph; bounded variables]
    let mut y = prev.y.clone();
    if !condensed {
        shift_blocks(&mut y, 0, lay.p, n);
    }
    shift_blocks(&mut y, neq, lay.n_obs, n);
    if lay.soft {
        shift_blocks(&mut y, neq + n * lay.n_obs, lay.n_obs, n);
    }
    // bound rows follow the variable order: controls, then slacks
    let b0 = neq + lay.n_in();
    if y.len() >= b0 + n * lay.m + n * ns {
        shift_blocks(&mut y, b0, lay.m, n);
        shift_blocks(&mut y, b0 + n * lay.m, ns, n);
    }
    Some(WarmStart { x, y })
}

/// Receding-horizon controller carrying only the warm-start cache.
#[derive(Debug, Clone)]
pub struct MpcController<T: Real> {
    pub config: MpcConfig<T>,
    cache: Option<(WarmStart<T>, MpcLayout)>,
}

impl<T: Real> MpcController<T> {
    pub fn new(config: MpcConfig<T>) -> Self {
        MpcController {
            config,
            cache: None,
        }
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }

    /// Build constraints at step `k`, solve, and return the first control.
    pub fn step(
        &mut self,
        model: &KoopmanModel<T>,
        x_k: &State<T>,
        x_ref: &State<T>,
        obstacles: &[ObstacleSpec<T>],
        k: usize,
        delta: T,
    ) -> Result<MpcStepResult<T>> {
        let cons = horizon_constraints(
            obstacles,
            k,
            &x_k.position(),
            delta,
            self.config.horizon,
            self.config.prediction,
        )?;
        self.step_with(model, x_k, x_ref, &cons)
    }

    /// As [`MpcController::step`], with margin `margins[i]` on predicted
    /// step `k + 1 + i`.
    pub fn step_with_margins(
        &mut self,
        model: &KoopmanModel<T>,
        x_k: &State<T>,
        x_ref: &State<T>,
        obstacles: &[ObstacleSpec<T>],
        k: usize,
        margins: &[T],
    ) -> Result<MpcStepResult<T>> {
        let first = margins.first().copied().unwrap_or_else(T::zero);
        let mut cons = horizon_constraints(
            obstacles,
            k,
            &x_k.position(),
            first,
            self.config.horizon,
            self.config.prediction,
        )?;
        cons.set_margins(margins)?;
        self.step_with(model, x_k, x_ref, &cons)
    }

    pub fn step_with(
        &mut self,
        model: &KoopmanModel<T>,
        x_k: &State<T>,
        x_ref: &State<T>,
        constraints: &HorizonConstraints<T>,
    ) -> Result<MpcStepResult<T>> {
        let problem = build_mpc_qp(model, x_k, x_ref, constraints, &self.config)?;
        let warm = if self.config.warm_start {
            self.cache
                .as_ref()
                .and_then(|(w, l)| shift_warm_start(w, l, &problem.layout, self.config.condensed))
        } else {
            None
        };
        let res = solve_mpc_qp(&problem, &self.config, warm.as_ref())?;
        self.cache = if res.fallback {
            None
        } else {
            Some((res.warm.clone(), problem.layout))
        };
        Ok(res)
    }
}

/// One-shot MPC step without a warm start.
pub fn mpc_step<T: Real>(
    model: &KoopmanModel<T>,
    x_k: &State<T>,
    x_ref: &State<T>,
    obstacles: &[ObstacleSpec<T>],
    k: usize,
    delta: T,
    cfg: &MpcConfig<T>,
) -> Result<MpcStepResult<T>> {
    let mut cfg = cfg.clone();
    cfg.warm_start = false;
    MpcController::new(cfg).step(model, x_k, x_ref, obstacles, k, delta)
}
