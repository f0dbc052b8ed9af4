//! Lifted linear models `z' = A z + B u` fit by extended DMD with control.
//!
//! States are lifted through a fixed [`Dictionary`] of observables, the
//! matrices are fit jointly by (ridge-)regularized least squares, and lifted
//! states are mapped back through a structural decoder.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sim_env::{Control, State, Transition};

/// Observable dictionary.
///
/// Every member keeps the raw state coordinates needed by its decoder in
/// the leading slots, so `decode(lift(x)) == x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dictionary {
    /// `(x, y, cos t, sin t, sin t cos t, cos^2 t, x cos t, x sin t, y cos t, y sin t, 1)`
    /// over unicycle states `(x, y, t)`.
    Default11,
    /// `(x, y, cos t, sin t, 1)`.
    Trig5,
    /// `z = x` for an `dim`-dimensional state.
    Identity { dim: usize },
}

impl Dictionary {
    pub fn name(&self) -> String {
        match self {
            Dictionary::Default11 => "default11".into(),
            Dictionary::Trig5 => "trig5".into(),
            Dictionary::Identity { dim } => format!("identity{dim}"),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "default11" => Ok(Dictionary::Default11),
            "trig5" => Ok(Dictionary::Trig5),
            other => other
                .strip_prefix("identity")
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|d| *d > 0)
                .map(|dim| Dictionary::Identity { dim })
                .ok_or_else(|| Error::Config(format!("unknown dictionary `{other}`"))),
        }
    }

    /// Lifted dimension `p`.
    pub fn dim(&self) -> usize {
        match self {
            Dictionary::Default11 => 11,
            Dictionary::Trig5 => 5,
            Dictionary::Identity { dim } => *dim,
        }
    }

    /// Physical state dimension `n`.
    pub fn state_dim(&self) -> usize {
        match self {
            Dictionary::Default11 | Dictionary::Trig5 => 3,
            Dictionary::Identity { dim } => *dim,
        }
    }

    /// Lifted coordinates that equal the planar position.
    pub fn position_slots(&self) -> [usize; 2] {
        [0, 1]
    }

    pub fn lift<T: Real>(&self, state: &[T]) -> Result<LiftedState<T>> {
        if state.len() != self.state_dim() {
            return Err(Error::InvalidInput(format!(
                "dictionary {} expects {} state components, got {}",
                self.name(),
                self.state_dim(),
                state.len()
            )));
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite state".into()));
        }
        let z = match self {
            Dictionary::Default11 => {
                let (x, y) = (state[0], state[1]);
                let (s, c) = state[2].sin_cos();
                vec![
                    x,
                    y,
                    c,
                    s,
                    s * c,
                    c * c,
                    x * c,
                    x * s,
                    y * c,
                    y * s,
                    T::one(),
                ]
            }
            Dictionary::Trig5 => {
                let (s, c) = state[2].sin_cos();
                vec![state[0], state[1], c, s, T::one()]
            }
            Dictionary::Identity { .. } => state.to_vec(),
        };
        Ok(LiftedState(DVector::from_vec(z)))
    }

    pub fn lift_state<T: Real>(&self, state: &State<T>) -> Result<LiftedState<T>> {
        self.lift(&state.to_vec())
    }

    /// Structural inverse of [`Dictionary::lift`].
    pub fn decode<T: Real>(&self, z: &LiftedState<T>) -> Result<Vec<T>> {
        let z = &z.0;
        if z.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "lifted state has length {}, dictionary {} has p = {}",
                z.len(),
                self.name(),
                self.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite lifted state".into()));
        }
        match self {
            Dictionary::Default11 | Dictionary::Trig5 => {
                if z[2] == T::zero() && z[3] == T::zero() {
                    return Err(Error::DegenerateHeading);
                }
                Ok(vec![z[0], z[1], z[3].atan2(z[2])])
            }
            Dictionary::Identity { .. } => Ok(z.iter().copied().collect()),
        }
    }
}

/// Vector of observables, length `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState<T: Real>(pub DVector<T>);

impl<T: Real> LiftedState<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One regression sample: state, control and successor as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub state: Vec<T>,
    pub control: Vec<T>,
    pub next: Vec<T>,
}

impl<T: Real> From<&Transition<T>> for Snapshot<T> {
    fn from(t: &Transition<T>) -> Self {
        Snapshot {
            state: t.state.to_vec(),
            control: t.control.to_vec(),
            next: t.next_state.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Frobenius norm of `Z' - A Z - B U` over the training set.
    pub residual_norm: f64,
    /// Ratio of extreme singular values of the regressor `[Z; U]`.
    pub condition_number: f64,
    pub samples: usize,
    pub ridge: f64,
}

/// Coordinates the model is evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFrame {
    /// States are lifted as given.
    #[default]
    World,
    /// States are first expressed relative to the pose the prediction
    /// starts from, so every query begins at the origin with heading 0.
    /// Exact for the unicycle, whose dynamics commute with planar rigid
    /// motions.
    Body,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel<T: Real> {
    pub dictionary: Dictionary,
    pub frame: ModelFrame,
    /// `p x p`
    pub a: DMatrix<T>,
    /// `p x m`
    pub b: DMatrix<T>,
    pub diagnostics: FitDiagnostics,
}

fn numeric_rank<T: Real>(m: &DMatrix<T>) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.iter().fold(T::zero(), |a, &b| a.max(b));
    if smax == T::zero() {
        return 0;
    }
    let tol = smax * T::default_epsilon() * T::lit(m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Fit `[A B]` by minimizing `sum ||z' - A z - B u||^2 + ridge ||[A B]||_F^2`.
pub fn fit_edmdc<T: Real>(
    data: &[Snapshot<T>],
    dictionary: Dictionary,
    ridge: T,
) -> Result<KoopmanModel<T>> {
    if !(ridge >= T::zero()) {
        return Err(Error::InvalidInput(
            "ridge weight must be non-negative".into(),
        ));
    }
    let p = dictionary.dim();
    let m = data.first().map(|s| s.control.len()).unwrap_or(0);
    let cols = p + m;
    if data.len() < cols || m == 0 {
        return Err(Error::Underdetermined {
            samples: data.len(),
            unknowns: cols,
        });
    }

    let rows = data.len();
    let mut phi = DMatrix::<T>::zeros(rows, cols);
    let mut target = DMatrix::<T>::zeros(rows, p);
    for (r, snap) in data.iter().enumerate() {
        if snap.control.len() != m {
            return Err(Error::InvalidInput(format!(
                "sample {r} has {} controls, expected {m}",
                snap.control.len()
            )));
        }
        let z = dictionary.lift(&snap.state)?;
        let zn = dictionary.lift(&snap.next)?;
        for j in 0..p {
            phi[(r, j)] = z.0[j];
            target[(r, j)] = zn.0[j];
        }
        for j in 0..m {
            phi[(r, p + j)] = snap.control[j];
        }
    }

    let sv = phi.singular_values();
    let smax = sv.iter().fold(T::zero(), |a, &b| a.max(b));
    let smin = sv.iter().fold(T::infinity(), |a, &b| a.min(b));
    let condition_number = if smin > T::zero() {
        (smax / smin).as_f64()
    } else {
        f64::INFINITY
    };

    if ridge == T::zero() {
        let rank = numeric_rank(&phi);
        if rank < cols {
            let u_rank = numeric_rank(&phi.columns(p, m).into_owned());
            let z_rank = numeric_rank(&phi.columns(0, p).into_owned());
            let (block, rank, cols) = if u_rank < m {
                ("control", u_rank, m)
            } else if z_rank < p {
                ("lifted-state", z_rank, p)
            } else {
                ("joint state-control", rank, cols)
            };
            return Err(Error::IllConditioned { block, rank, cols });
        }
    }

    // Ridge via the augmented system [Phi; sqrt(ridge) I] Theta = [Y; 0].
    let (lhs, rhs) = if ridge > T::zero() {
        let mut lhs = DMatrix::<T>::zeros(rows + cols, cols);
        lhs.rows_mut(0, rows).copy_from(&phi);
        let sr = ridge.sqrt();
        for j in 0..cols {
            lhs[(rows + j, j)] = sr;
        }
        let mut rhs = DMatrix::<T>::zeros(rows + cols, p);
        rhs.rows_mut(0, rows).copy_from(&target);
        (lhs, rhs)
    } else {
        (phi.clone(), target.clone())
    };
    let theta = lhs
        .svd(true, true)
        .solve(&rhs, T::default_epsilon())
        .map_err(|e| Error::InvalidInput(format!("least-squares solve failed: {e}")))?;

    let a = theta.rows(0, p).transpose();
    let b = theta.rows(p, m).transpose();
    let residual_norm = (&target - &phi * &theta).norm().as_f64();

    Ok(KoopmanModel {
        dictionary,
        frame: ModelFrame::World,
        a,
        b,
        diagnostics: FitDiagnostics {
            residual_norm,
            condition_number,
            samples: rows,
            ridge: ridge.as_f64(),
        },
    })
}

/// Cut contiguous runs of `data` into windows of `window` transitions and
/// express each window relative to its first pose. `stride` is the offset
/// between consecutive window starts.
pub fn body_frame_windows<T: Real>(
    data: &[Transition<T>],
    window: usize,
    stride: usize,
) -> Result<Vec<Transition<T>>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidInput(
            "window and stride must be positive".into(),
        ));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let mut end = start + 1;
        while end < data.len() && data[end].state == data[end - 1].next_state {
            end += 1;
        }
        let run = &data[start..end];
        let mut s = 0;
        while s < run.len() {
            let origin = run[s].state;
            for t in &run[s..(s + window).min(run.len())] {
                out.push(Transition {
                    state: t.state.relative_to(&origin),
                    control: t.control,
                    next_state: t.next_state.relative_to(&origin),
                });
            }
            s += stride;
        }
        start = end;
    }
    Ok(out)
}

/// Fit on body-frame windows of `data`; the model predicts in
/// [`ModelFrame::Body`].
pub fn fit_body_frame<T: Real>(
    data: &[Transition<T>],
    dictionary: Dictionary,
    ridge: T,
    window: usize,
    stride: usize,
) -> Result<KoopmanModel<T>> {
    let windows = body_frame_windows(data, window, stride)?;
    let mut model = fit_transitions(&windows, dictionary, ridge)?;
    model.frame = ModelFrame::Body;
    Ok(model)
}

/// Convenience wrapper over [`fit_edmdc`] for unicycle transitions.
pub fn fit_transitions<T: Real>(
    data: &[Transition<T>],
    dictionary: Dictionary,
    ridge: T,
) -> Result<KoopmanModel<T>> {
    let snaps: Vec<Snapshot<T>> = data.iter().map(Snapshot::from).collect();
    fit_edmdc(&snaps, dictionary, ridge)
}

impl<T: Real> KoopmanModel<T> {
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn lift(&self, state: &[T]) -> Result<LiftedState<T>> {
        self.dictionary.lift(state)
    }

    pub fn decode(&self, z: &LiftedState<T>) -> Result<Vec<T>> {
        self.dictionary.decode(z)
    }

    /// `A z + B u`
    pub fn step_lifted(&self, z: &LiftedState<T>, u: &[T]) -> LiftedState<T> {
        let u = DVector::from_column_slice(u);
        LiftedState(&self.a * &z.0 + &self.b * u)
    }

    pub fn predict_one_step(&self, state: &[T], control: &[T]) -> Result<Vec<T>> {
        if control.len() != self.control_dim() {
            return Err(Error::InvalidInput(format!(
                "model takes {} controls, got {}",
                self.control_dim(),
                control.len()
            )));
        }
        let z = self.lift(state)?;
        self.decode(&self.step_lifted(&z, control))
    }

    /// One-step prediction honouring the model frame.
    pub fn predict_state(&self, state: &State<T>, control: &Control<T>) -> Result<State<T>> {
        match self.frame {
            ModelFrame::World => {
                State::from_slice(&self.predict_one_step(&state.to_vec(), &control.to_vec())?)
            }
            ModelFrame::Body => {
                let origin = State::new(T::zero(), T::zero(), T::zero()).to_vec();
                let rel = State::from_slice(&self.predict_one_step(&origin, &control.to_vec())?)?;
                Ok(State::from_relative(state, &rel))
            }
        }
    }

    /// Pose the model's lifted coordinates are measured against when
    /// predicting from `state`.
    pub fn frame_origin(&self, state: &State<T>) -> Option<State<T>> {
        match self.frame {
            ModelFrame::World => None,
            ModelFrame::Body => Some(*state),
        }
    }

    /// Lifted trajectory `z_0 = lift(state)`, `z_{i+1} = A z_i + B u_i`;
    /// returns `z_0 ..= z_len`.
    pub fn rollout_lifted(&self, state: &[T], controls: &[Vec<T>]) -> Result<Vec<LiftedState<T>>> {
        let mut zs = Vec::with_capacity(controls.len() + 1);
        zs.push(self.lift(state)?);
        for u in controls {
            if u.len() != self.control_dim() {
                return Err(Error::InvalidInput("control dimension mismatch".into()));
            }
            let next = self.step_lifted(zs.last().expect("nonempty"), u);
            zs.push(next);
        }
        Ok(zs)
    }

    /// Decoded states after each control; lifting happens once at the root.
    pub fn rollout(&self, state: &[T], controls: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        self.rollout_lifted(state, controls)?
            .iter()
            .skip(1)
            .map(|z| self.decode(z))
            .collect()
    }

    /// Decoded world-frame states after each control, honouring the model
    /// frame.
    pub fn rollout_states(
        &self,
        state: &State<T>,
        controls: &[Control<T>],
    ) -> Result<Vec<State<T>>> {
        let us: Vec<Vec<T>> = controls.iter().map(|u| u.to_vec()).collect();
        let root = match self.frame_origin(state) {
            Some(o) => state.relative_to(&o),
            None => *state,
        };
        self.rollout(&root.to_vec(), &us)?
            .iter()
            .map(|s| {
                let s = State::from_slice(s)?;
                Ok(match self.frame_origin(state) {
                    Some(o) => State::from_relative(&o, &s),
                    None => s,
                })
            })
            .collect()
    }
}

pub const MODEL_FORMAT: &str = "koopnav-model";
pub const MODEL_VERSION: u32 = 1;

/// On-disk model document. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub dictionary: String,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub layout: String,
    #[serde(default)]
    pub frame: ModelFrame,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

fn row_major<T: Real>(m: &DMatrix<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)].as_f64());
        }
    }
    out
}

impl<T: Real> KoopmanModel<T> {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dictionary: self.dictionary.name(),
            n: self.dictionary.state_dim(),
            p: self.lifted_dim(),
            m: self.control_dim(),
            layout: "row-major".into(),
            frame: self.frame,
            a: row_major(&self.a),
            b: row_major(&self.b),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model document {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.layout != "row-major" {
            return Err(Error::Config(format!(
                "unsupported layout `{}`",
                doc.layout
            )));
        }
        let dictionary = Dictionary::from_name(&doc.dictionary)?;
        if dictionary.dim() != doc.p || dictionary.state_dim() != doc.n {
            return Err(Error::Config(
                "dictionary dimensions disagree with document".into(),
            ));
        }
        if doc.a.len() != doc.p * doc.p || doc.b.len() != doc.p * doc.m {
            return Err(Error::Config("matrix sizes disagree with p and m".into()));
        }
        let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        Ok(KoopmanModel {
            dictionary,
            frame: doc.frame,
            a: DMatrix::from_row_slice(doc.p, doc.p, &conv(&doc.a)),
            b: DMatrix::from_row_slice(doc.p, doc.m, &conv(&doc.b)),
            diagnostics: doc.diagnostics.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("model json: {e}")))?;
        Self::from_document(&doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::format(path, e))
    }
}
