//! The `n`-particle controlled system, its Euler–Maruyama integrator and the
//! cooperative cost.
//!
//! Coefficients are given in separable form:
//!
//! ```text
//! b(t, x_i, M1_i, M2_i, a) = b0(t, x_i, a)
//!                          + 1/n sum_j gamma_ij b1(t, xi_ij, x_i, x_j, u_j)
//!                          + 1/n sum_j gamma_ji b2(t, xi_ij, x_i, x_j, u_j)
//! L(t, x_i, M1_i, M2_i, a) = L0(t, x_i, a)
//!                          + 1/n sum_j L1(t, gamma_ij, xi_ij, x_i, x_j, u_j)
//!                          + 1/n sum_j L2(t, gamma_ji, xi_ij, x_i, x_j, u_j)
//! ```
//!
//! A fully general drift reading the raw interaction sample sets can be
//! supplied instead of `b1`/`b2`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::controls::{
    ActionBox, InteractionControl, InteractionFamily, PairActions, PairControlMatrix, Phi, PopulationView,
    RegularControl, RelaxedDraw, RelaxedInteractionControl,
};
use crate::error::{Error, Result};
use crate::kernels::StepKernel;
use crate::metrics::{mc_summary, McSummary};
use crate::rng::{Purpose, StreamKey};

/// States of `n` agents in `R^d` at time `time`; agent `i` (0-based) has
/// label `(i + 1) / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    n: usize,
    d: usize,
    states: Vec<f64>,
    time: f64,
}

impl ParticleEnsemble {
    pub fn new(d: usize, states: Vec<f64>, time: f64) -> Result<Self> {
        if d == 0 || states.is_empty() || !states.len().is_multiple_of(d) {
            return Err(Error::SizeMismatch {
                what: format!("{} state values for dimension {d}", states.len()),
            });
        }
        Ok(Self {
            n: states.len() / d,
            d,
            states,
            time,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.n as f64
    }

    pub fn view(&self) -> PopulationView<'_> {
        PopulationView::new(self.time, self.d, &self.states)
    }
}

/// Equal-weight atoms `(action, state, label, mark)` of one agent's
/// interaction measure.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSampleSet {
    pub action: Vec<f64>,
    /// `n x d`, row-major.
    pub state: Vec<f64>,
    pub label: Vec<f64>,
    /// `n x dim(E)`, row-major.
    pub mark: Vec<f64>,
}

/// Outgoing (`M1`) and incoming (`M2`) measures of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSets {
    pub outgoing: InteractionSampleSet,
    pub incoming: InteractionSampleSet,
}

/// Interaction measures of agent `i`:
/// `M1_i = 1/n sum_j delta(gamma_ij, X_j, u_j, xi_ij)` and
/// `M2_i = 1/n sum_j delta(gamma_ji, X_j, u_j, xi_ij)`.
pub fn interaction_sets_for(
    ens: &ParticleEnsemble,
    pairs: &PairActions,
    kernel: &StepKernel,
    i: usize,
) -> Result<InteractionSets> {
    let n = ens.n();
    if kernel.n() != n || pairs.n() != n {
        return Err(Error::SizeMismatch {
            what: format!("ensemble n={n}, kernel n={}, pair actions n={}", kernel.n(), pairs.n()),
        });
    }
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, n });
    }
    let state = ens.states().to_vec();
    let label: Vec<f64> = (0..n).map(|j| ens.label(j)).collect();
    let mark = kernel.row(i).to_vec();
    Ok(InteractionSets {
        outgoing: InteractionSampleSet {
            action: (0..n).map(|j| pairs.get(i, j)).collect(),
            state: state.clone(),
            label: label.clone(),
            mark: mark.clone(),
        },
        incoming: InteractionSampleSet {
            action: (0..n).map(|j| pairs.get(j, i)).collect(),
            state,
            label,
            mark,
        },
    })
}

/// Interaction measures of every agent.
pub fn build_interaction_sets(
    ens: &ParticleEnsemble,
    pairs: &PairActions,
    kernel: &StepKernel,
) -> Result<Vec<InteractionSets>> {
    (0..ens.n())
        .map(|i| interaction_sets_for(ens, pairs, kernel, i))
        .collect()
}

/// Arguments of a pairwise coefficient, seen from agent `i` toward `j`.
#[derive(Debug, Clone, Copy)]
pub struct PairArgs<'a> {
    pub t: f64,
    pub mark: &'a [f64],
    pub x: &'a [f64],
    pub xj: &'a [f64],
    pub uj: f64,
}

type PairTermFn = dyn Fn(&PairArgs<'_>, &PopulationView<'_>, &mut [f64]) + Send + Sync;

/// Pairwise drift coefficient `b1` or `b2`; scalar families act on every
/// state component.
#[derive(Clone)]
pub enum PairTerm {
    Zero,
    Constant(f64),
    /// `xi[0]`.
    Mark,
    /// `x_j`.
    NeighborState,
    /// `xi[0] x_j`.
    MarkTimesNeighbor,
    /// `x_j - x_i`.
    NeighborMinusSelf,
    /// `Phi(t, x_i, x_j, mu)`, times `xi[0]` when `mark_weighted`.
    Phi {
        phi: Phi,
        mark_weighted: bool,
    },
    Custom(Arc<PairTermFn>),
}

impl fmt::Debug for PairTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairTerm::Zero => f.write_str("Zero"),
            PairTerm::Constant(c) => write!(f, "Constant({c})"),
            PairTerm::Mark => f.write_str("Mark"),
            PairTerm::NeighborState => f.write_str("NeighborState"),
            PairTerm::MarkTimesNeighbor => f.write_str("MarkTimesNeighbor"),
            PairTerm::NeighborMinusSelf => f.write_str("NeighborMinusSelf"),
            PairTerm::Phi { phi, mark_weighted } => write!(f, "Phi({phi:?}, {mark_weighted})"),
            PairTerm::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl PairTerm {
    fn is_zero(&self) -> bool {
        matches!(self, PairTerm::Zero)
    }

    /// `out += w * term(args)`.
    #[inline]
    fn accumulate(&self, w: f64, a: &PairArgs<'_>, pop: &PopulationView<'_>, out: &mut [f64]) {
        match self {
            PairTerm::Zero => {}
            PairTerm::Constant(c) => out.iter_mut().for_each(|o| *o += w * c),
            PairTerm::Mark => out.iter_mut().for_each(|o| *o += w * a.mark[0]),
            PairTerm::NeighborState => {
                for (o, y) in out.iter_mut().zip(a.xj) {
                    *o += w * y;
                }
            }
            PairTerm::MarkTimesNeighbor => {
                for (o, y) in out.iter_mut().zip(a.xj) {
                    *o += w * a.mark[0] * y;
                }
            }
            PairTerm::NeighborMinusSelf => {
                for ((o, y), x) in out.iter_mut().zip(a.xj).zip(a.x) {
                    *o += w * (y - x);
                }
            }
            PairTerm::Phi { phi, mark_weighted } => {
                let mut v = phi.eval(a.t, a.x[0], a.xj[0], pop);
                if *mark_weighted {
                    v *= a.mark[0];
                }
                out[0] += w * v;
            }
            PairTerm::Custom(f) => {
                let mut tmp = vec![0.0; out.len()];
                f(a, pop, &mut tmp);
                for (o, v) in out.iter_mut().zip(tmp) {
                    *o += w * v;
                }
            }
        }
    }
}

type RegDriftFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Own-state drift `b0(t, x, a)`.
#[derive(Clone)]
pub enum RegDrift {
    Zero,
    Constant(Vec<f64>),
    /// `b0 = a`; needs `dim(A_reg) = d`.
    Action,
    /// `-rate x`.
    MeanReverting(f64),
    Custom(Arc<RegDriftFn>),
}

impl fmt::Debug for RegDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegDrift::Zero => f.write_str("Zero"),
            RegDrift::Constant(c) => write!(f, "Constant({c:?})"),
            RegDrift::Action => f.write_str("Action"),
            RegDrift::MeanReverting(r) => write!(f, "MeanReverting({r})"),
            RegDrift::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl RegDrift {
    fn eval(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        match self {
            RegDrift::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            RegDrift::Constant(c) => out.copy_from_slice(c),
            RegDrift::Action => out.copy_from_slice(&a[..out.len()]),
            RegDrift::MeanReverting(r) => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -r * v;
                }
            }
            RegDrift::Custom(f) => f(t, x, a, out),
        }
    }
}

type GeneralDriftFn = dyn Fn(f64, &[f64], &InteractionSets, &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub struct Drift {
    pub b0: RegDrift,
    pub b1: PairTerm,
    pub b2: PairTerm,
    /// Replaces `b1`/`b2` when set: `(t, x_i, sets_i, a_i, out)`.
    pub general: Option<Arc<GeneralDriftFn>>,
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Drift")
            .field("b0", &self.b0)
            .field("b1", &self.b1)
            .field("b2", &self.b2)
            .field("general", &self.general.is_some())
            .finish()
    }
}

impl Drift {
    pub fn zero() -> Self {
        Self {
            b0: RegDrift::Zero,
            b1: PairTerm::Zero,
            b2: PairTerm::Zero,
            general: None,
        }
    }
}

type DiffusionFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Diffusion matrix `sigma(t, x)`, `d x d`.
#[derive(Clone)]
pub enum Diffusion {
    Zero,
    /// `s I`.
    Scalar(f64),
    Diagonal(Vec<f64>),
    /// Row-major `d x d`.
    Full(Vec<f64>),
    Custom(Arc<DiffusionFn>),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Zero => f.write_str("Zero"),
            Diffusion::Scalar(s) => write!(f, "Scalar({s})"),
            Diffusion::Diagonal(v) => write!(f, "Diagonal({v:?})"),
            Diffusion::Full(_) => f.write_str("Full"),
            Diffusion::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl Diffusion {
    /// `out += sigma(t, x) z`.
    fn apply(&self, t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            Diffusion::Zero => {}
            Diffusion::Scalar(s) => {
                for (o, zi) in out.iter_mut().zip(z) {
                    *o += s * zi;
                }
            }
            Diffusion::Diagonal(v) => {
                for ((o, zi), s) in out.iter_mut().zip(z).zip(v) {
                    *o += s * zi;
                }
            }
            Diffusion::Full(m) => {
                for r in 0..d {
                    out[r] += (0..d).map(|c| m[r * d + c] * z[c]).sum::<f64>();
                }
            }
            Diffusion::Custom(f) => {
                let mut m = vec![0.0; d * d];
                f(t, x, &mut m);
                for r in 0..d {
                    out[r] += (0..d).map(|c| m[r * d + c] * z[c]).sum::<f64>();
                }
            }
        }
    }

    fn matrix(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut m = vec![0.0; d * d];
        match self {
            Diffusion::Zero => {}
            Diffusion::Scalar(s) => (0..d).for_each(|k| m[k * d + k] = *s),
            Diffusion::Diagonal(v) => (0..d).for_each(|k| m[k * d + k] = v[k]),
            Diffusion::Full(f) => m.copy_from_slice(f),
            Diffusion::Custom(f) => f(t, x, &mut m),
        }
        m
    }

    fn is_zero(&self) -> bool {
        matches!(self, Diffusion::Zero) || matches!(self, Diffusion::Scalar(s) if *s == 0.0)
    }
}

/// Smallest eigenvalue bound check: `sigma sigma^T - theta I` admits a
/// Cholesky factorization.
fn dominates(m: &[f64], d: usize, theta: f64) -> bool {
    let mut a = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            a[r * d + c] = (0..d).map(|k| m[r * d + k] * m[c * d + k]).sum::<f64>();
        }
        a[r * d + r] -= theta;
    }
    let tol = 1e-12;
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if diag < -tol {
            return false;
        }
        let diag = diag.max(0.0).sqrt();
        a[j * d + j] = diag;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = if diag > 0.0 { s / diag } else { 0.0 };
        }
    }
    true
}

type RegCostFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum RegCost {
    Zero,
    Constant(f64),
    /// `-c |a|^2`.
    QuadraticAction(f64),
    Custom(Arc<RegCostFn>),
}

impl fmt::Debug for RegCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegCost::Zero => f.write_str("Zero"),
            RegCost::Constant(c) => write!(f, "Constant({c})"),
            RegCost::QuadraticAction(c) => write!(f, "QuadraticAction({c})"),
            RegCost::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl RegCost {
    fn eval(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        match self {
            RegCost::Zero => 0.0,
            RegCost::Constant(c) => *c,
            RegCost::QuadraticAction(c) => -c * a.iter().map(|v| v * v).sum::<f64>(),
            RegCost::Custom(f) => f(t, x, a),
        }
    }
}

type PairCostFn = dyn Fn(f64, f64, &PairArgs<'_>) -> f64 + Send + Sync;

/// Pairwise running reward `L1` / `L2` as a function of the action `e`.
#[derive(Clone)]
pub enum PairCost {
    Zero,
    /// `linear e - quadratic e^2`; concave iff `quadratic >= 0`.
    Polynomial {
        linear: f64,
        quadratic: f64,
    },
    /// `(t, e, args)`.
    Custom(Arc<PairCostFn>),
}

impl fmt::Debug for PairCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairCost::Zero => f.write_str("Zero"),
            PairCost::Polynomial { linear, quadratic } => {
                write!(f, "Polynomial({linear}, {quadratic})")
            }
            PairCost::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl PairCost {
    fn is_zero(&self) -> bool {
        matches!(self, PairCost::Zero)
    }

    #[inline]
    fn eval(&self, t: f64, e: f64, a: &PairArgs<'_>) -> f64 {
        match self {
            PairCost::Zero => 0.0,
            PairCost::Polynomial { linear, quadratic } => linear * e - quadratic * e * e,
            PairCost::Custom(f) => f(t, e, a),
        }
    }

    /// Whether concavity in the action is known from the family.
    pub fn known_concave(&self) -> Option<bool> {
        match self {
            PairCost::Zero => Some(true),
            PairCost::Polynomial { quadratic, .. } => Some(*quadratic >= 0.0),
            PairCost::Custom(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunningCost {
    pub l0: RegCost,
    pub l1: PairCost,
    pub l2: PairCost,
}

impl RunningCost {
    pub fn zero() -> Self {
        Self {
            l0: RegCost::Zero,
            l1: PairCost::Zero,
            l2: PairCost::Zero,
        }
    }
}

/// Equal-weight atoms `(X_j, xi_ij)` of `R^i_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalMeasure {
    pub d: usize,
    pub mark_dim: usize,
    pub states: Vec<f64>,
    pub marks: Vec<f64>,
}

impl TerminalMeasure {
    pub fn len(&self) -> usize {
        self.states.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Mean of the first state component.
    pub fn state_mean(&self) -> f64 {
        self.states.iter().step_by(self.d).sum::<f64>() / self.len() as f64
    }
}

/// `R^i_T = 1/n sum_j delta(X_j, xi_ij)`.
pub fn terminal_measure(ens: &ParticleEnsemble, kernel: &StepKernel, i: usize) -> Result<TerminalMeasure> {
    if kernel.n() != ens.n() {
        return Err(Error::SizeMismatch {
            what: format!("ensemble n={}, kernel n={}", ens.n(), kernel.n()),
        });
    }
    if i >= ens.n() {
        return Err(Error::IndexOutOfRange { index: i, n: ens.n() });
    }
    Ok(TerminalMeasure {
        d: ens.d(),
        mark_dim: kernel.dim(),
        states: ens.states().to_vec(),
        marks: kernel.row(i).to_vec(),
    })
}

type TerminalFn = dyn Fn(&[f64], &TerminalMeasure) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum TerminalCost {
    Zero,
    /// `x[0]`.
    State,
    /// Mean of the first state component of `R`.
    PopulationMean,
    Custom(Arc<TerminalFn>),
}

impl fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalCost::Zero => f.write_str("Zero"),
            TerminalCost::State => f.write_str("State"),
            TerminalCost::PopulationMean => f.write_str("PopulationMean"),
            TerminalCost::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Coefficients and declared structure of a controlled particle model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub d: usize,
    pub int_box: ActionBox,
    pub reg_box: ActionBox,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub running: RunningCost,
    pub terminal: TerminalCost,
    /// Declared `|b| <= b_max`.
    pub b_max: Option<f64>,
    /// Declared `sigma sigma^T >= theta I`.
    pub theta: Option<f64>,
    /// Monotonicity hypotheses of the bang-bang example, declared not proven.
    pub monotone_declared: bool,
    /// `e -> L(t, e, ...)` concave, declared.
    pub concave_declared: bool,
}

impl ModelSpec {
    /// `b = 0`, `sigma = 0`, zero costs.
    pub fn frozen(d: usize) -> Self {
        Self {
            name: "frozen".into(),
            d,
            int_box: ActionBox::unit(),
            reg_box: ActionBox::unit(),
            drift: Drift::zero(),
            diffusion: Diffusion::Zero,
            running: RunningCost::zero(),
            terminal: TerminalCost::Zero,
            b_max: Some(0.0),
            theta: None,
            monotone_declared: false,
            concave_declared: true,
        }
    }

    /// Pure Brownian motion with `sigma = I`.
    pub fn brownian(d: usize) -> Self {
        Self {
            name: "brownian".into(),
            diffusion: Diffusion::Scalar(1.0),
            theta: Some(1.0),
            ..Self::frozen(d)
        }
    }

    /// Bang-bang example: `d = 1`, `A_int = [0,1]`, `L = 0`, `sigma = 1`,
    /// drift `1/n sum_j gamma_ij Phi(t, x_i, x_j, mu)` and terminal reward
    /// `G(mu_T) = mean`.
    pub fn example1(phi: Phi) -> Self {
        Self {
            name: "example1".into(),
            d: 1,
            int_box: ActionBox::unit(),
            reg_box: ActionBox::unit(),
            drift: Drift {
                b0: RegDrift::Zero,
                b1: PairTerm::Phi {
                    phi,
                    mark_weighted: false,
                },
                b2: PairTerm::Zero,
                general: None,
            },
            diffusion: Diffusion::Scalar(1.0),
            running: RunningCost::zero(),
            terminal: TerminalCost::PopulationMean,
            b_max: Some(1.0),
            theta: Some(1.0),
            monotone_declared: true,
            concave_declared: true,
        }
    }

    /// Social-media example: drift
    /// `1/n sum_j gamma_ij xi_ij + 1/n sum_j gamma_ji xi_ij x_j`, running
    /// reward `1/n sum_j (linear gamma_ij - quadratic gamma_ij^2)`,
    /// terminal reward `x`.
    pub fn example2(linear: f64, quadratic: f64, sigma: f64) -> Self {
        Self {
            name: "example2".into(),
            d: 1,
            int_box: ActionBox::unit(),
            reg_box: ActionBox::unit(),
            drift: Drift {
                b0: RegDrift::Zero,
                b1: PairTerm::Mark,
                b2: PairTerm::MarkTimesNeighbor,
                general: None,
            },
            diffusion: Diffusion::Scalar(sigma),
            running: RunningCost {
                l0: RegCost::Zero,
                l1: PairCost::Polynomial { linear, quadratic },
                l2: PairCost::Zero,
            },
            terminal: TerminalCost::State,
            b_max: None,
            theta: Some(sigma * sigma),
            monotone_declared: false,
            concave_declared: quadratic >= 0.0,
        }
    }

    /// Drift `1/n sum_j gamma_ij` and `g = x`: under a constant interaction
    /// level `c` the cost is `E[mean X_0] + c T`.
    pub fn linear(sigma: f64) -> Self {
        Self {
            name: "linear".into(),
            drift: Drift {
                b0: RegDrift::Zero,
                b1: PairTerm::Constant(1.0),
                b2: PairTerm::Zero,
                general: None,
            },
            diffusion: Diffusion::Scalar(sigma),
            terminal: TerminalCost::State,
            theta: Some(sigma * sigma),
            b_max: Some(1.0),
            ..Self::frozen(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::BadSpec("model dimension must be >= 1".into()));
        }
        if self.int_box.dim() != 1 {
            return Err(Error::BadSpec("interaction actions must be scalar".into()));
        }
        let uses_phi = |t: &PairTerm| matches!(t, PairTerm::Phi { .. });
        if (uses_phi(&self.drift.b1) || uses_phi(&self.drift.b2)) && self.d != 1 {
            return Err(Error::BadSpec("Phi pair terms need d = 1".into()));
        }
        if matches!(self.drift.b0, RegDrift::Action) && self.reg_box.dim() < self.d {
            return Err(Error::BadSpec("b0 = a needs dim(A_reg) >= d".into()));
        }
        if let RegDrift::Constant(c) = &self.drift.b0 {
            if c.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: c.len(),
                });
            }
        }
        match &self.diffusion {
            Diffusion::Diagonal(v) if v.len() != self.d => {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: v.len(),
                })
            }
            Diffusion::Full(m) if m.len() != self.d * self.d => {
                return Err(Error::DimensionMismatch {
                    expected: self.d * self.d,
                    got: m.len(),
                })
            }
            _ => {}
        }
        Ok(())
    }

    /// Samples `sigma` at `samples` random points and checks the declared
    /// non-degeneracy bound.
    pub fn check_nondegeneracy(&self, samples: usize, seed: u64) -> Result<()> {
        let Some(theta) = self.theta else {
            return Ok(());
        };
        let mut rng = StreamKey::new(seed, Purpose::Subsample).rng();
        for _ in 0..samples.max(1) {
            let t: f64 = rng.random();
            let x: Vec<f64> = (0..self.d).map(|_| rng.random_range(-10.0..10.0)).collect();
            if !dominates(&self.diffusion.matrix(t, &x), self.d, theta) {
                return Err(Error::BadSpec(format!(
                    "sigma sigma^T >= {theta} I violated at t={t}, x={x:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Initial law of the ensemble, i.i.d. across agents given the labels.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Dirac(Vec<f64>),
    Gaussian {
        mean: f64,
        std: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Piecewise-linear in the label through `nodes` placed at `k / (K-1)`,
    /// plus optional Gaussian noise; one node means a constant.
    PerLabelTable {
        nodes: Vec<f64>,
        noise: f64,
    },
}

impl InitSpec {
    /// `dirac: [x_1..x_d]`, `gaussian: [mean, std]`, `uniform: [lo, hi]`,
    /// `per_label_table: [nodes..]` with optional `noise`.
    pub fn from_params(family: &str, params: &[f64], noise: f64) -> Result<Self> {
        let spec = match (family, params) {
            ("dirac", p) if !p.is_empty() => InitSpec::Dirac(p.to_vec()),
            ("gaussian", [mean, std]) => InitSpec::Gaussian { mean: *mean, std: *std },
            ("uniform", [lo, hi]) => InitSpec::Uniform { lo: *lo, hi: *hi },
            ("per_label_table", p) if !p.is_empty() => InitSpec::PerLabelTable {
                nodes: p.to_vec(),
                noise,
            },
            ("dirac" | "gaussian" | "uniform" | "per_label_table", _) => {
                return Err(Error::BadSpec(format!("init `{family}`: wrong parameters {params:?}")))
            }
            _ => return Err(Error::BadSpec(format!("unknown init family `{family}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        match self {
            InitSpec::Gaussian { std, .. } if !(*std >= 0.0) => Err(Error::BadSpec("gaussian std must be >= 0".into())),
            InitSpec::Uniform { lo, hi } if !(lo <= hi) => Err(Error::BadSpec("uniform needs lo <= hi".into())),
            InitSpec::PerLabelTable { noise, .. } if !(*noise >= 0.0) => {
                Err(Error::BadSpec("noise must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }
}

fn table_value(nodes: &[f64], u: f64) -> f64 {
    if nodes.len() == 1 {
        return nodes[0];
    }
    let segs = nodes.len() - 1;
    let pos = u * segs as f64;
    let k = (pos.floor() as usize).min(segs - 1);
    let frac = pos - k as f64;
    nodes[k] + (nodes[k + 1] - nodes[k]) * frac
}

/// Draws `X_0` for `n` agents in `R^d`.
pub fn initial_sampler<R: Rng + ?Sized>(spec: &InitSpec, n: usize, d: usize, rng: &mut R) -> Result<ParticleEnsemble> {
    spec.validate()?;
    if n == 0 || d == 0 {
        return Err(Error::BadSpec("n and d must be >= 1".into()));
    }
    let mut states = Vec::with_capacity(n * d);
    match spec {
        InitSpec::Dirac(x) => {
            if x.len() != d {
                return Err(Error::BadSpec(format!("dirac needs {d} coordinates, got {}", x.len())));
            }
            for _ in 0..n {
                states.extend_from_slice(x);
            }
        }
        InitSpec::Gaussian { mean, std } => {
            for _ in 0..n * d {
                let z: f64 = rng.sample(StandardNormal);
                states.push(mean + std * z);
            }
        }
        InitSpec::Uniform { lo, hi } => {
            for _ in 0..n * d {
                states.push(lo + (hi - lo) * rng.random::<f64>());
            }
        }
        InitSpec::PerLabelTable { nodes, noise } => {
            for i in 0..n {
                let base = table_value(nodes, (i + 1) as f64 / n as f64);
                for _ in 0..d {
                    let z: f64 = if *noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    states.push(base + noise * z);
                }
            }
        }
    }
    ParticleEnsemble::new(d, states, 0.0)
}

/// Simulation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub t_final: f64,
    pub dt: f64,
    pub reps: usize,
    pub seed: u64,
    pub store_stride: usize,
    /// `None` uses the current rayon pool.
    pub workers: Option<usize>,
}

impl SimConfig {
    pub fn new(n: usize, t_final: f64, dt: f64, reps: usize, seed: u64) -> Self {
        Self {
            n,
            t_final,
            dt,
            reps,
            seed,
            store_stride: 1,
            workers: None,
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::BadSpec("n must be >= 1".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::BadSpec("dt must be > 0".into()));
        }
        if !(self.t_final >= 0.0) {
            return Err(Error::BadSpec("T must be >= 0".into()));
        }
        let steps = self.t_final / self.dt;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::BadSpec(format!("T / dt = {steps} is not an integer")));
        }
        if self.reps == 0 {
            return Err(Error::BadSpec("reps must be >= 1".into()));
        }
        if self.store_stride == 0 {
            return Err(Error::BadSpec("store_stride must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::BadSpec("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Controls driving a simulation.
#[derive(Debug, Clone)]
pub enum Controls {
    Closed {
        gamma: InteractionControl,
        alpha: RegularControl,
    },
    /// Interaction actions drawn afresh each step through `(V_i, pi)`.
    Relaxed {
        gbar: RelaxedInteractionControl,
        alpha: RegularControl,
    },
}

impl Controls {
    pub fn closed(gamma: InteractionControl, alpha: RegularControl) -> Self {
        Controls::Closed { gamma, alpha }
    }

    /// Closed-loop `gamma` with the zero regular control on `model`'s box.
    pub fn interaction_only(gamma: InteractionControl, model: &ModelSpec) -> Self {
        Controls::Closed {
            gamma,
            alpha: RegularControl::zero(model.reg_box.clone()),
        }
    }

    fn boxes(&self) -> (&ActionBox, &ActionBox) {
        match self {
            Controls::Closed { gamma, alpha } => (gamma.action_box(), alpha.action_box()),
            Controls::Relaxed { gbar, alpha } => (gbar.action_box(), alpha.action_box()),
        }
    }

    fn alpha(&self) -> &RegularControl {
        match self {
            Controls::Closed { alpha, .. } | Controls::Relaxed { alpha, .. } => alpha,
        }
    }
}

/// Per-step pairwise actions.
enum PairPolicy<'a> {
    Closed(&'a InteractionControl),
    Relaxed(&'a RelaxedInteractionControl, RelaxedDraw),
    Dense(&'a PairActions),
}

impl PairPolicy<'_> {
    #[inline]
    fn action(&self, pop: &PopulationView<'_>, i: usize, j: usize) -> f64 {
        match self {
            PairPolicy::Closed(g) => g.eval(pop.t, pop.state(i), pop.label(i), pop.state(j), pop.label(j), pop),
            PairPolicy::Relaxed(g, draw) => draw.pair_action(g, pop, i, j),
            PairPolicy::Dense(p) => p.get(i, j),
        }
    }

    fn snapshot(&self, pop: &PopulationView<'_>) -> PairActions {
        match self {
            PairPolicy::Dense(p) => (*p).clone(),
            _ => PairActions::from_fn(pop.n(), |i, j| self.action(pop, i, j)),
        }
    }
}

/// Specialized evaluation routes, chosen once per simulation.
#[derive(Debug, Clone, PartialEq)]
enum Route {
    Generic,
    /// `gamma = 1{Phi >= 0}` on `[0,1]` with `b1 = Phi`: the interaction
    /// drift is the positive part `1/n sum_j Phi(x_i, x_j)^+`.
    PositivePart(PhiKind),
    /// Constant `gamma`, mark-free `b1`/`b2` depending on `x_j` only through
    /// its mean: `O(n)` per step.
    Separable(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum PhiKind {
    Constant(f64),
    Tanh(f64),
    NeighborMinusMean,
}

fn choose_route(model: &ModelSpec, policy: &PairPolicy<'_>) -> Route {
    let drift = &model.drift;
    let costs_free = model.running.l1.is_zero() && model.running.l2.is_zero();
    if drift.general.is_some() {
        return Route::Generic;
    }
    if let PairPolicy::Closed(g) = policy {
        if let (
            InteractionFamily::BangBangPhi {
                phi,
                threshold,
                flipped: false,
            },
            PairTerm::Phi {
                phi: drift_phi,
                mark_weighted: false,
            },
        ) = (g.family(), &drift.b1)
        {
            let unit = g.action_box().lo() == 0.0 && g.action_box().hi() == 1.0;
            if *threshold == 0.0 && unit && phi.same_as(drift_phi) && drift.b2.is_zero() && costs_free {
                let kind = match phi {
                    Phi::Constant(c) => Some(PhiKind::Constant(*c)),
                    Phi::TanhDiff { scale } if *scale > 0.0 => Some(PhiKind::Tanh(*scale)),
                    Phi::NeighborMinusMean => Some(PhiKind::NeighborMinusMean),
                    _ => None,
                };
                if let Some(kind) = kind {
                    return Route::PositivePart(kind);
                }
            }
        }
        if let Some(a) = g.as_constant() {
            let sep = |t: &PairTerm| matches!(t, PairTerm::Zero | PairTerm::Constant(_) | PairTerm::NeighborState);
            let cost_sep = |c: &PairCost| matches!(c, PairCost::Zero | PairCost::Polynomial { .. });
            if sep(&drift.b1) && sep(&drift.b2) && cost_sep(&model.running.l1) && cost_sep(&model.running.l2) {
                return Route::Separable(a);
            }
        }
    }
    Route::Generic
}

/// `1/n sum_j tanh(scale (x_j - x_i))^+` for every agent, using the sorted
/// order so that only the `x_j > x_i` half is visited.
fn tanh_positive_part(states: &[f64], scale: f64, out: &mut [f64]) {
    let n = states.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| states[a].total_cmp(&states[b]));
    let sorted: Vec<f64> = order.iter().map(|&k| states[k]).collect();
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let center = 0.5 * (lo + hi);
    // tanh(s (y - x)) = (p_y - p_x) / (p_y + p_x) with p = exp(2 s (. - c))
    let use_exp = scale * (hi - lo) < 600.0;
    let p: Vec<f64> = if use_exp {
        sorted.iter().map(|x| (2.0 * scale * (x - center)).exp()).collect()
    } else {
        Vec::new()
    };
    let inv_n = 1.0 / n as f64;
    for k in 0..n {
        let mut acc = 0.0;
        if use_exp {
            let pk = p[k];
            for &pj in &p[k + 1..] {
                acc += (pj - pk) / (pj + pk);
            }
        } else {
            let xk = sorted[k];
            for &xj in &sorted[k + 1..] {
                acc += (scale * (xj - xk)).tanh();
            }
        }
        out[order[k]] = acc * inv_n;
    }
}

/// Drift and running reward for every agent at the pre-step state.
struct StepEval {
    drift: Vec<f64>,
    running: f64,
}

fn evaluate_step(
    model: &ModelSpec,
    route: &Route,
    policy: &PairPolicy<'_>,
    alpha: &RegularControl,
    kernel: &StepKernel,
    pop: &PopulationView<'_>,
) -> StepEval {
    let n = pop.n();
    let d = model.d;
    let t = pop.t;
    let inv_n = 1.0 / n as f64;
    let mut drift = vec![0.0; n * d];
    let mut running = 0.0;
    let reg_actions: Vec<Vec<f64>> = (0..n).map(|i| alpha.eval(t, pop.state(i), pop.label(i))).collect();

    for i in 0..n {
        let x = pop.state(i);
        let out = &mut drift[i * d..(i + 1) * d];
        model.drift.b0.eval(t, x, &reg_actions[i], out);
        running += model.running.l0.eval(t, x, &reg_actions[i]);
    }

    match route {
        Route::PositivePart(kind) => {
            let mut hat = vec![0.0; n];
            match kind {
                PhiKind::Constant(c) => hat.iter_mut().for_each(|h| *h = c.max(0.0)),
                PhiKind::Tanh(s) => tanh_positive_part(pop.states(), *s, &mut hat),
                PhiKind::NeighborMinusMean => {
                    let m = pop.mean()[0];
                    let v = pop.states().iter().map(|y| (y - m).max(0.0)).sum::<f64>() * inv_n;
                    hat.iter_mut().for_each(|h| *h = v);
                }
            }
            for (o, h) in drift.iter_mut().zip(&hat) {
                *o += h;
            }
        }
        Route::Separable(a) => {
            let mean = pop.mean();
            let term = |b: &PairTerm, k: usize| match b {
                PairTerm::Zero => 0.0,
                PairTerm::Constant(c) => *c,
                PairTerm::NeighborState => mean[k],
                _ => unreachable!("route checked"),
            };
            let bar: Vec<f64> = (0..d)
                .map(|k| a * term(&model.drift.b1, k) + a * term(&model.drift.b2, k))
                .collect();
            for (idx, o) in drift.iter_mut().enumerate() {
                *o += bar[idx % d];
            }
            let dummy = PairArgs {
                t,
                mark: &[0.0],
                x: &[],
                xj: &[],
                uj: 0.0,
            };
            let pair = model.running.l1.eval(t, *a, &dummy) + model.running.l2.eval(t, *a, &dummy);
            running += n as f64 * pair;
        }
        Route::Generic => {
            let b1 = &model.drift.b1;
            let b2 = &model.drift.b2;
            let (l1, l2) = (&model.running.l1, &model.running.l2);
            let need_out = !b1.is_zero() || !l1.is_zero();
            let need_in = !b2.is_zero() || !l2.is_zero();
            let mut acc = vec![0.0; d];
            for i in 0..n {
                let x = pop.state(i);
                if let Some(general) = &model.drift.general {
                    let snap = policy.snapshot(pop);
                    let ens = ParticleEnsemble {
                        n,
                        d,
                        states: pop.states().to_vec(),
                        time: t,
                    };
                    let sets = interaction_sets_for(&ens, &snap, kernel, i).expect("sizes checked");
                    let mut extra = vec![0.0; d];
                    general(t, x, &sets, &reg_actions[i], &mut extra);
                    for (o, e) in drift[i * d..(i + 1) * d].iter_mut().zip(extra) {
                        *o += e;
                    }
                    if !need_out && !need_in {
                        continue;
                    }
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut lsum = 0.0;
                for j in 0..n {
                    let args = PairArgs {
                        t,
                        mark: kernel.mark(i, j),
                        x,
                        xj: pop.state(j),
                        uj: pop.label(j),
                    };
                    if need_out {
                        let g = policy.action(pop, i, j);
                        if model.drift.general.is_none() {
                            b1.accumulate(g, &args, pop, &mut acc);
                        }
                        lsum += l1.eval(t, g, &args);
                    }
                    if need_in {
                        let g = policy.action(pop, j, i);
                        if model.drift.general.is_none() {
                            b2.accumulate(g, &args, pop, &mut acc);
                        }
                        lsum += l2.eval(t, g, &args);
                    }
                }
                for (o, a) in drift[i * d..(i + 1) * d].iter_mut().zip(&acc) {
                    *o += a * inv_n;
                }
                running += lsum * inv_n;
            }
        }
    }
    StepEval {
        drift,
        running: running * inv_n,
    }
}

fn check_sizes(model: &ModelSpec, n: usize, d: usize, kernel: &StepKernel) -> Result<()> {
    if kernel.n() != n {
        return Err(Error::SizeMismatch {
            what: format!("kernel n={} but ensemble n={n}", kernel.n()),
        });
    }
    if model.d != d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            got: d,
        });
    }
    Ok(())
}

/// `X <- X + drift dt + sigma sqrt(dt) Z`.
fn apply_update(
    model: &ModelSpec,
    ens: &ParticleEnsemble,
    drift: &[f64],
    dt: f64,
    mut normals: impl FnMut(usize, &mut [f64]),
) -> ParticleEnsemble {
    let d = ens.d;
    let sq = dt.sqrt();
    let mut next = ens.states.clone();
    let noisy = !model.diffusion.is_zero();
    let mut z = vec![0.0; d];
    let mut inc = vec![0.0; d];
    for i in 0..ens.n {
        let x = ens.state(i);
        let row = &mut next[i * d..(i + 1) * d];
        for k in 0..d {
            row[k] = x[k] + drift[i * d + k] * dt;
        }
        if noisy {
            normals(i, &mut z);
            inc.iter_mut().for_each(|v| *v = 0.0);
            model.diffusion.apply(ens.time, x, &z, &mut inc);
            for k in 0..d {
                row[k] += inc[k] * sq;
            }
        }
    }
    ParticleEnsemble {
        n: ens.n,
        d,
        states: next,
        time: ens.time + dt,
    }
}

/// One explicit Euler–Maruyama step under lifted closed-loop controls; the
/// interaction measures are frozen at the pre-step state and the Gaussian
/// increments are drawn agent by agent from `rng`.
pub fn euler_step<R: Rng + ?Sized>(
    ens: &ParticleEnsemble,
    model: &ModelSpec,
    pairs: &PairControlMatrix,
    kernel: &StepKernel,
    dt: f64,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    if !(dt > 0.0) {
        return Err(Error::BadSpec("dt must be > 0".into()));
    }
    check_sizes(model, ens.n(), ens.d(), kernel)?;
    let policy = PairPolicy::Closed(pairs.gamma());
    let route = choose_route(model, &policy);
    let pop = ens.view();
    let eval = evaluate_step(model, &route, &policy, pairs.alpha(), kernel, &pop);
    let next = apply_update(model, ens, &eval.drift, dt, |_, z| {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    });
    if next.states.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState {
            replication: 0,
            step: 0,
        });
    }
    Ok(next)
}

/// Same step driven by an explicit matrix of pairwise actions and regular
/// actions `alpha`.
pub fn euler_step_with_actions<R: Rng + ?Sized>(
    ens: &ParticleEnsemble,
    model: &ModelSpec,
    pairs: &PairActions,
    alpha: &RegularControl,
    kernel: &StepKernel,
    dt: f64,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    if !(dt > 0.0) {
        return Err(Error::BadSpec("dt must be > 0".into()));
    }
    check_sizes(model, ens.n(), ens.d(), kernel)?;
    if pairs.n() != ens.n() {
        return Err(Error::SizeMismatch {
            what: "pair actions do not match the ensemble".into(),
        });
    }
    let policy = PairPolicy::Dense(pairs);
    let pop = ens.view();
    let eval = evaluate_step(model, &Route::Generic, &policy, alpha, kernel, &pop);
    let next = apply_update(model, ens, &eval.drift, dt, |_, z| {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    });
    if next.states.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState {
            replication: 0,
            step: 0,
        });
    }
    Ok(next)
}

/// Stored path of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub replication: usize,
    pub n: usize,
    pub d: usize,
    pub times: Vec<f64>,
    /// One `n x d` state array per stored time.
    pub snapshots: Vec<Vec<f64>>,
    pub running_cost: f64,
    pub terminal_cost: f64,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.running_cost + self.terminal_cost
    }

    pub fn final_states(&self) -> &[f64] {
        self.snapshots.last().expect("at least the initial snapshot")
    }

    /// Snapshot closest to `t`, if within `tol`.
    pub fn snapshot_at(&self, t: f64, tol: f64) -> Option<&[f64]> {
        let (k, dist) = self
            .times
            .iter()
            .enumerate()
            .map(|(k, s)| (k, (s - t).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        (dist <= tol).then(|| self.snapshots[k].as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub config: SimConfig,
    pub model: String,
    pub trajectories: Vec<Trajectory>,
}

/// Terminal reward `1/n sum_i g(X_i, R^i)` of an ensemble.
pub fn terminal_reward(model: &ModelSpec, kernel: &StepKernel, ens: &ParticleEnsemble) -> Result<f64> {
    check_sizes(model, ens.n(), ens.d(), kernel)?;
    let n = ens.n();
    let total: f64 = match &model.terminal {
        TerminalCost::Zero => 0.0,
        TerminalCost::State => (0..n).map(|i| ens.state(i)[0]).sum(),
        TerminalCost::PopulationMean => {
            let m = ens.states().iter().step_by(ens.d()).sum::<f64>() / n as f64;
            m * n as f64
        }
        TerminalCost::Custom(g) => {
            let mut acc = 0.0;
            for i in 0..n {
                acc += g(ens.state(i), &terminal_measure(ens, kernel, i)?);
            }
            acc
        }
    };
    Ok(total / n as f64)
}

fn run_replication(
    model: &ModelSpec,
    controls: &Controls,
    kernel: &StepKernel,
    init: &InitSpec,
    cfg: &SimConfig,
    rep: usize,
) -> Result<Trajectory> {
    let steps = cfg.steps();
    let mut rng = StreamKey::new(cfg.seed, Purpose::Init).replication(rep).rng();
    let mut ens = initial_sampler(init, cfg.n, model.d, &mut rng)?;
    let mut times = vec![0.0];
    let mut snapshots = vec![ens.states.clone()];
    let mut running_sum = 0.0;
    let noise_key = StreamKey::new(cfg.seed, Purpose::Noise).replication(rep);
    let route_closed = match controls {
        Controls::Closed { gamma, .. } => Some(choose_route(model, &PairPolicy::Closed(gamma))),
        Controls::Relaxed { .. } => None,
    };
    for s in 0..steps {
        ens.time = s as f64 * cfg.dt;
        let pop = ens.view();
        let eval = match controls {
            Controls::Closed { gamma, alpha } => evaluate_step(
                model,
                route_closed.as_ref().expect("closed route"),
                &PairPolicy::Closed(gamma),
                alpha,
                kernel,
                &pop,
            ),
            Controls::Relaxed { gbar, alpha } => {
                let v = (0..cfg.n)
                    .map(|i| {
                        StreamKey::new(cfg.seed, Purpose::RelaxedAgent)
                            .replication(rep)
                            .agent(i)
                            .step(s)
                            .rng()
                            .random::<f64>()
                    })
                    .collect();
                let pi = StreamKey::new(cfg.seed, Purpose::RelaxedShared)
                    .replication(rep)
                    .step(s)
                    .rng()
                    .random::<f64>();
                let policy = PairPolicy::Relaxed(gbar, RelaxedDraw { v, pi });
                evaluate_step(model, &Route::Generic, &policy, alpha, kernel, &pop)
            }
        };
        running_sum += eval.running;
        let key = noise_key.step(s);
        let mut next = apply_update(model, &ens, &eval.drift, cfg.dt, |i, z| {
            let mut r = key.agent(i).rng();
            z.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
        });
        if next.states.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                replication: rep,
                step: s,
            });
        }
        next.time = (s + 1) as f64 * cfg.dt;
        ens = next;
        if (s + 1) % cfg.store_stride == 0 || s + 1 == steps {
            times.push(ens.time);
            snapshots.push(ens.states.clone());
        }
    }
    let terminal_cost = terminal_reward(model, kernel, &ens)?;
    let running_cost = running_sum * cfg.dt;
    if !running_cost.is_finite() || !terminal_cost.is_finite() {
        return Err(Error::NonFiniteState {
            replication: rep,
            step: steps,
        });
    }
    Ok(Trajectory {
        replication: rep,
        n: cfg.n,
        d: model.d,
        times,
        snapshots,
        running_cost,
        terminal_cost,
    })
}

/// `M` independent replications from the initial law to `T`.
///
/// Results are identical for any worker count: every random number is
/// addressed by (seed, replication, agent, step).
pub fn simulate(
    model: &ModelSpec,
    controls: &Controls,
    kernel: &StepKernel,
    init: &InitSpec,
    cfg: &SimConfig,
) -> Result<SimOutput> {
    cfg.validate()?;
    model.validate()?;
    check_sizes(model, cfg.n, model.d, kernel)?;
    let (int_box, reg_box) = controls.boxes();
    if int_box != &model.int_box {
        return Err(Error::BadSpec(
            "interaction control box differs from the model's A_int".into(),
        ));
    }
    if reg_box != &model.reg_box || controls.alpha().action_box() != &model.reg_box {
        return Err(Error::BadSpec(
            "regular control box differs from the model's A_reg".into(),
        ));
    }
    let run = || {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_replication(model, controls, kernel, init, cfg, rep))
            .collect::<Result<Vec<_>>>()
    };
    let trajectories = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Io(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    Ok(SimOutput {
        config: cfg.clone(),
        model: model.name.clone(),
        trajectories,
    })
}

/// Monte Carlo mean and standard error of `J_n` over replications.
pub fn evaluate_cost(trajectories: &[Trajectory]) -> McSummary {
    let totals: Vec<f64> = trajectories.iter().map(Trajectory::total_cost).collect();
    mc_summary(&totals)
}

/// Trajectory dump: `t,rep,agent,x_1..x_d`.
pub fn write_trajectories<W: Write>(out: &SimOutput, w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let d = out.trajectories.first().map_or(1, |t| t.d);
    let mut header = vec!["t".to_string(), "rep".into(), "agent".into()];
    header.extend((1..=d).map(|k| format!("x_{k}")));
    csv.write_record(&header)?;
    for tr in &out.trajectories {
        for (t, snap) in tr.times.iter().zip(&tr.snapshots) {
            for (i, x) in snap.chunks_exact(d).enumerate() {
                let mut rec = vec![format!("{t}"), tr.replication.to_string(), (i + 1).to_string()];
                rec.extend(x.iter().map(|v| format!("{v}")));
                csv.write_record(&rec)?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}

/// Per-replication costs: `rep,running,terminal,total`.
pub fn write_costs<W: Write>(out: &SimOutput, w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["rep", "running", "terminal", "total"])?;
    for tr in &out.trajectories {
        csv.write_record([
            tr.replication.to_string(),
            format!("{}", tr.running_cost),
            format!("{}", tr.terminal_cost),
            format!("{}", tr.total_cost()),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Cost summary: `model,n,dt,M,J_mean,J_stderr`.
pub fn write_cost_summary<W: Write>(out: &SimOutput, w: W) -> Result<()> {
    let s = evaluate_cost(&out.trajectories);
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["model", "n", "dt", "M", "J_mean", "J_stderr"])?;
    csv.write_record([
        out.model.clone(),
        out.config.n.to_string(),
        format!("{}", out.config.dt),
        out.config.reps.to_string(),
        format!("{}", s.mean),
        format!("{}", s.stderr),
    ])?;
    csv.flush()?;
    Ok(())
}
