//! Closed-loop, randomized and n-player interaction controls.
//!
//! Interaction actions are scalars in a closed interval: they act as the
//! weight of a pairwise interaction. Regular actions live in a box of any
//! dimension.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::block_index;
use crate::rng::{splitmix64, unit_from_bits};

/// Compact box of admissible actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ActionBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len().max(1),
                got: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::BadSpec("action box has lower > upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn unit() -> Self {
        Self {
            lower: vec![0.0],
            upper: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Bounds of the first component.
    pub fn lo(&self) -> f64 {
        self.lower[0]
    }

    pub fn hi(&self) -> f64 {
        self.upper[0]
    }

    #[inline]
    pub fn clamp_scalar(&self, a: f64) -> f64 {
        a.clamp(self.lower[0], self.upper[0])
    }

    pub fn clamp_in_place(&self, a: &mut [f64]) {
        for ((x, l), u) in a.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*l, *u);
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim()
            && a.iter()
                .zip(&self.lower)
                .zip(&self.upper)
                .all(|((x, l), u)| l <= x && x <= u)
    }
}

/// Componentwise clamp of `a` into `b`.
pub fn clamp_action(a: &[f64], b: &ActionBox) -> Result<Vec<f64>> {
    if a.len() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: b.dim(),
            got: a.len(),
        });
    }
    let mut out = a.to_vec();
    b.clamp_in_place(&mut out);
    Ok(out)
}

/// States of the whole population at one instant, with the label of agent
/// `j` (0-based) equal to `(j + 1) / n`.
#[derive(Debug, Clone)]
pub struct PopulationView<'a> {
    pub t: f64,
    pub d: usize,
    states: &'a [f64],
    mean: Vec<f64>,
}

impl<'a> PopulationView<'a> {
    pub fn new(t: f64, d: usize, states: &'a [f64]) -> Self {
        let n = states.len() / d;
        let mut mean = vec![0.0; d];
        for x in states.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Self { t, d, states, mean }
    }

    pub fn n(&self) -> usize {
        self.states.len() / self.d
    }

    #[inline]
    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.d..(j + 1) * self.d]
    }

    pub fn states(&self) -> &[f64] {
        self.states
    }

    #[inline]
    pub fn label(&self, j: usize) -> f64 {
        (j + 1) as f64 / self.n() as f64
    }

    /// Mean state of the empirical law.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

type PhiFn = dyn Fn(f64, f64, f64, &PopulationView<'_>) -> f64 + Send + Sync;

/// Scalar pairwise potential `Phi(t, x, y, m)` on one-dimensional states.
#[derive(Clone)]
pub enum Phi {
    Constant(f64),
    /// `tanh(scale (y - x))`.
    TanhDiff {
        scale: f64,
    },
    /// `y - mean(m)`.
    NeighborMinusMean,
    Custom(Arc<PhiFn>),
}

impl fmt::Debug for Phi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phi::Constant(c) => write!(f, "Constant({c})"),
            Phi::TanhDiff { scale } => write!(f, "TanhDiff({scale})"),
            Phi::NeighborMinusMean => f.write_str("NeighborMinusMean"),
            Phi::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl Phi {
    /// `constant:<c>`, `tanh`, `tanh:<scale>` or `neighbor_minus_mean`.
    pub fn from_id(id: &str) -> Result<Self> {
        let (head, arg) = match id.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (id, None),
        };
        let num = |a: Option<&str>, default: Option<f64>| -> Result<f64> {
            match (a, default) {
                (Some(s), _) => s
                    .parse()
                    .map_err(|_| Error::BadSpec(format!("phi `{id}`: bad parameter"))),
                (None, Some(d)) => Ok(d),
                (None, None) => Err(Error::BadSpec(format!("phi `{id}` needs a parameter"))),
            }
        };
        match head {
            "constant" => Ok(Phi::Constant(num(arg, None)?)),
            "tanh" => Ok(Phi::TanhDiff {
                scale: num(arg, Some(1.0))?,
            }),
            "neighbor_minus_mean" => Ok(Phi::NeighborMinusMean),
            _ => Err(Error::BadSpec(format!("unknown phi `{id}`"))),
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64, y: f64, pop: &PopulationView<'_>) -> f64 {
        match self {
            Phi::Constant(c) => *c,
            Phi::TanhDiff { scale } => (scale * (y - x)).tanh(),
            Phi::NeighborMinusMean => y - pop.mean()[0],
            Phi::Custom(f) => f(t, x, y, pop),
        }
    }

    /// Same function, possibly the same closure.
    pub fn same_as(&self, other: &Phi) -> bool {
        match (self, other) {
            (Phi::Constant(a), Phi::Constant(b)) => a == b,
            (Phi::TanhDiff { scale: a }, Phi::TanhDiff { scale: b }) => a == b,
            (Phi::NeighborMinusMean, Phi::NeighborMinusMean) => true,
            (Phi::Custom(a), Phi::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

type RegularFn = dyn Fn(f64, &[f64], f64) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
pub enum RegularFamily {
    Constant(Vec<f64>),
    /// `below` when `x[0] < level`, `above` otherwise.
    Threshold {
        level: f64,
        below: Vec<f64>,
        above: Vec<f64>,
    },
    /// `offset + x_coef x[0] + u_coef u + t_coef t`, then clamped.
    AffineClamped {
        offset: Vec<f64>,
        x_coef: Vec<f64>,
        u_coef: Vec<f64>,
        t_coef: Vec<f64>,
    },
    /// One action per label block.
    Table(Vec<Vec<f64>>),
    Custom(Arc<RegularFn>),
}

impl fmt::Debug for RegularFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegularFamily::Constant(a) => write!(f, "Constant({a:?})"),
            RegularFamily::Threshold { level, .. } => write!(f, "Threshold({level})"),
            RegularFamily::AffineClamped { .. } => f.write_str("AffineClamped"),
            RegularFamily::Table(t) => write!(f, "Table({} blocks)", t.len()),
            RegularFamily::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Feedback map `(t, x, u) -> A_reg`.
#[derive(Debug, Clone)]
pub struct RegularControl {
    family: RegularFamily,
    action_box: ActionBox,
}

impl RegularControl {
    pub fn new(family: RegularFamily, action_box: ActionBox) -> Result<Self> {
        let d = action_box.dim();
        let check = |v: &Vec<f64>| {
            if v.len() == d {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                })
            }
        };
        match &family {
            RegularFamily::Constant(a) => check(a)?,
            RegularFamily::Threshold { below, above, .. } => {
                check(below)?;
                check(above)?;
            }
            RegularFamily::AffineClamped {
                offset,
                x_coef,
                u_coef,
                t_coef,
            } => {
                for v in [offset, x_coef, u_coef, t_coef] {
                    check(v)?;
                }
            }
            RegularFamily::Table(rows) => {
                if rows.is_empty() {
                    return Err(Error::BadSpec("empty regular-control table".into()));
                }
                rows.iter().try_for_each(check)?;
            }
            RegularFamily::Custom(_) => {}
        }
        Ok(Self { family, action_box })
    }

    /// The constant control nearest to zero.
    pub fn zero(action_box: ActionBox) -> Self {
        let mut a = vec![0.0; action_box.dim()];
        action_box.clamp_in_place(&mut a);
        Self {
            family: RegularFamily::Constant(a),
            action_box,
        }
    }

    /// Builds a family from a flat parameter list.
    ///
    /// * `constant`: `[a_1..a_d]`
    /// * `threshold`: `[level, below_1..below_d, above_1..above_d]`
    /// * `affine_clamped`: `[offset.., x_coef.., u_coef.., t_coef..]`
    /// * `table`: `d` values per label block, row after row
    pub fn from_params(family: &str, params: &[f64], action_box: ActionBox) -> Result<Self> {
        let d = action_box.dim();
        let need = |k: usize| {
            if params.len() == k {
                Ok(())
            } else {
                Err(Error::BadSpec(format!(
                    "alpha family `{family}` expects {k} params, got {}",
                    params.len()
                )))
            }
        };
        let fam = match family {
            "constant" => {
                need(d)?;
                RegularFamily::Constant(params.to_vec())
            }
            "threshold" => {
                need(1 + 2 * d)?;
                RegularFamily::Threshold {
                    level: params[0],
                    below: params[1..1 + d].to_vec(),
                    above: params[1 + d..].to_vec(),
                }
            }
            "affine_clamped" => {
                need(4 * d)?;
                RegularFamily::AffineClamped {
                    offset: params[..d].to_vec(),
                    x_coef: params[d..2 * d].to_vec(),
                    u_coef: params[2 * d..3 * d].to_vec(),
                    t_coef: params[3 * d..].to_vec(),
                }
            }
            "table" => {
                if params.is_empty() || !params.len().is_multiple_of(d) {
                    return Err(Error::BadSpec(format!(
                        "alpha family `table` needs a positive multiple of {d} params"
                    )));
                }
                RegularFamily::Table(params.chunks(d).map(|c| c.to_vec()).collect())
            }
            other => return Err(Error::BadSpec(format!("unknown alpha family `{other}`"))),
        };
        Self::new(fam, action_box)
    }

    pub fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    pub fn family(&self) -> &RegularFamily {
        &self.family
    }

    pub fn eval(&self, t: f64, x: &[f64], u: f64) -> Vec<f64> {
        let mut a = match &self.family {
            RegularFamily::Constant(a) => a.clone(),
            RegularFamily::Threshold { level, below, above } => {
                if x[0] < *level {
                    below.clone()
                } else {
                    above.clone()
                }
            }
            RegularFamily::AffineClamped {
                offset,
                x_coef,
                u_coef,
                t_coef,
            } => (0..offset.len())
                .map(|k| offset[k] + x_coef[k] * x[0] + u_coef[k] * u + t_coef[k] * t)
                .collect(),
            RegularFamily::Table(rows) => rows[block_index(u, rows.len())].clone(),
            RegularFamily::Custom(f) => f(t, x, u),
        };
        a.resize(self.action_box.dim(), 0.0);
        self.action_box.clamp_in_place(&mut a);
        a
    }
}

type InteractionFn = dyn Fn(f64, &[f64], f64, &[f64], f64, &PopulationView<'_>) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum InteractionFamily {
    Constant(f64),
    /// Upper bound of the box where `Phi >= threshold` (or `<` when
    /// `flipped`), lower bound elsewhere. With `A_int = [0,1]` and
    /// `threshold = 0` this is `1{Phi >= 0}`.
    BangBangPhi {
        phi: Phi,
        threshold: f64,
        flipped: bool,
    },
    /// `(p0 + p1 u) (p2 + p3 u')`.
    ProductForm([f64; 4]),
    /// Action per pair of label blocks.
    Table(Vec<Vec<f64>>),
    /// Fixed pseudo-random action per label pair.
    HashedLabels {
        seed: u64,
    },
    /// Average of a randomized control over its auxiliary uniforms.
    Projected {
        inner: Arc<RelaxedInteractionControl>,
        nodes: Arc<Vec<f64>>,
    },
    Custom(Arc<InteractionFn>),
}

impl fmt::Debug for InteractionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InteractionFamily::Constant(a) => write!(f, "Constant({a})"),
            InteractionFamily::BangBangPhi {
                phi,
                threshold,
                flipped,
            } => write!(f, "BangBangPhi({phi:?}, {threshold}, flipped={flipped})"),
            InteractionFamily::ProductForm(p) => write!(f, "ProductForm({p:?})"),
            InteractionFamily::Table(t) => write!(f, "Table({}x{})", t.len(), t.len()),
            InteractionFamily::HashedLabels { seed } => write!(f, "HashedLabels({seed})"),
            InteractionFamily::Projected { nodes, .. } => write!(f, "Projected({} nodes)", nodes.len()),
            InteractionFamily::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Feedback map `(t, x, u, x', u') -> A_int`.
#[derive(Debug, Clone)]
pub struct InteractionControl {
    family: InteractionFamily,
    action_box: ActionBox,
}

impl InteractionControl {
    pub fn new(family: InteractionFamily, action_box: ActionBox) -> Result<Self> {
        if action_box.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: action_box.dim(),
            });
        }
        if let InteractionFamily::Table(rows) = &family {
            let m = rows.len();
            if m == 0 || rows.iter().any(|r| r.len() != m) {
                return Err(Error::BadSpec("interaction table must be square and non-empty".into()));
            }
        }
        Ok(Self { family, action_box })
    }

    pub fn constant(a: f64, action_box: ActionBox) -> Result<Self> {
        Self::new(InteractionFamily::Constant(a), action_box)
    }

    /// `1{Phi >= 0}` on `[0, 1]`.
    pub fn bang_bang(phi: Phi) -> Self {
        Self {
            family: InteractionFamily::BangBangPhi {
                phi,
                threshold: 0.0,
                flipped: false,
            },
            action_box: ActionBox::unit(),
        }
    }

    /// Builds a family from a flat parameter list.
    ///
    /// * `constant`: `[a]`
    /// * `bang_bang_phi`: `[]`, `[threshold]` or `[threshold, flipped]`; needs `phi`
    /// * `product_form`: `[p0, p1, p2, p3]`
    /// * `table`: `m * m` values, row-major over label blocks
    /// * `hashed_labels`: `[seed]`
    pub fn from_params(family: &str, params: &[f64], action_box: ActionBox, phi: Option<Phi>) -> Result<Self> {
        let bad = |msg: String| Error::BadSpec(format!("gamma family `{family}`: {msg}"));
        let fam = match family {
            "constant" => match params {
                [a] => InteractionFamily::Constant(*a),
                _ => return Err(bad("expects 1 param".into())),
            },
            "bang_bang_phi" => {
                let phi = phi.ok_or_else(|| bad("requires `phi`".into()))?;
                let (threshold, flipped) = match params {
                    [] => (0.0, false),
                    [c] => (*c, false),
                    [c, f] => (*c, *f != 0.0),
                    _ => return Err(bad("expects at most 2 params".into())),
                };
                InteractionFamily::BangBangPhi {
                    phi,
                    threshold,
                    flipped,
                }
            }
            "product_form" => match params {
                [a, b, c, d] => InteractionFamily::ProductForm([*a, *b, *c, *d]),
                _ => return Err(bad("expects 4 params".into())),
            },
            "table" => {
                let m = (params.len() as f64).sqrt().round() as usize;
                if m == 0 || m * m != params.len() {
                    return Err(bad("needs m*m params".into()));
                }
                InteractionFamily::Table(params.chunks(m).map(|c| c.to_vec()).collect())
            }
            "hashed_labels" => match params {
                [s] if *s >= 0.0 => InteractionFamily::HashedLabels { seed: *s as u64 },
                _ => return Err(bad("expects 1 non-negative param".into())),
            },
            other => return Err(Error::BadSpec(format!("unknown gamma family `{other}`"))),
        };
        Self::new(fam, action_box)
    }

    pub fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    pub fn family(&self) -> &InteractionFamily {
        &self.family
    }

    /// Action when it does not depend on its arguments.
    pub fn as_constant(&self) -> Option<f64> {
        match self.family {
            InteractionFamily::Constant(a) => Some(self.action_box.clamp_scalar(a)),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], u: f64, xp: &[f64], up: f64, pop: &PopulationView<'_>) -> f64 {
        let b = &self.action_box;
        let a = match &self.family {
            InteractionFamily::Constant(a) => *a,
            InteractionFamily::BangBangPhi {
                phi,
                threshold,
                flipped,
            } => {
                let on = phi.eval(t, x[0], xp[0], pop) >= *threshold;
                if on != *flipped {
                    b.hi()
                } else {
                    b.lo()
                }
            }
            InteractionFamily::ProductForm(p) => (p[0] + p[1] * u) * (p[2] + p[3] * up),
            InteractionFamily::Table(rows) => {
                let m = rows.len();
                rows[block_index(u, m)][block_index(up, m)]
            }
            InteractionFamily::HashedLabels { seed } => {
                let h = splitmix64(splitmix64(seed ^ u.to_bits()) ^ up.to_bits());
                b.lo() + unit_from_bits(h) * (b.hi() - b.lo())
            }
            InteractionFamily::Projected { inner, nodes } => inner.average(t, x, u, xp, up, pop, nodes),
            InteractionFamily::Custom(f) => f(t, x, u, xp, up, pop),
        };
        b.clamp_scalar(a)
    }
}

/// Arguments of a randomized interaction control.
#[derive(Debug, Clone, Copy)]
pub struct RelaxedArgs<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub u: f64,
    pub v: f64,
    pub xp: &'a [f64],
    pub up: f64,
    pub vp: f64,
    /// Joint coupling uniform; always `0.5` here.
    pub vbar: f64,
    pub pi: f64,
}

/// Which auxiliary uniforms a randomized control actually reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxUse {
    pub v: bool,
    pub vp: bool,
    pub pi: bool,
}

impl AuxUse {
    pub const ALL: AuxUse = AuxUse {
        v: true,
        vp: true,
        pi: true,
    };
    pub const NONE: AuxUse = AuxUse {
        v: false,
        vp: false,
        pi: false,
    };
}

/// Value of the coupling uniform `vbar` fed to every randomized control.
pub const VBAR: f64 = 0.5;

type RelaxedFn = dyn Fn(&RelaxedArgs<'_>, &PopulationView<'_>) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum RelaxedFamily {
    Deterministic(InteractionControl),
    /// `lo + v (hi - lo)`: the action is the agent's own uniform.
    EchoV,
    /// `hi` when `v <= p`, `lo` otherwise.
    IndicatorV {
        p: f64,
    },
    /// `first` when `pi <= p`, `second` otherwise.
    MixturePi {
        p: f64,
        first: InteractionControl,
        second: InteractionControl,
    },
    Custom {
        f: Arc<RelaxedFn>,
        uses: AuxUse,
    },
}

impl fmt::Debug for RelaxedFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelaxedFamily::Deterministic(c) => write!(f, "Deterministic({:?})", c.family),
            RelaxedFamily::EchoV => f.write_str("EchoV"),
            RelaxedFamily::IndicatorV { p } => write!(f, "IndicatorV({p})"),
            RelaxedFamily::MixturePi { p, .. } => write!(f, "MixturePi({p})"),
            RelaxedFamily::Custom { uses, .. } => write!(f, "Custom({uses:?})"),
        }
    }
}

/// Interaction control with auxiliary uniforms `(v, v', pi)`.
#[derive(Debug, Clone)]
pub struct RelaxedInteractionControl {
    family: RelaxedFamily,
    action_box: ActionBox,
}

impl RelaxedInteractionControl {
    pub fn new(family: RelaxedFamily, action_box: ActionBox) -> Result<Self> {
        if action_box.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: action_box.dim(),
            });
        }
        Ok(Self { family, action_box })
    }

    pub fn deterministic(c: InteractionControl) -> Self {
        let action_box = c.action_box.clone();
        Self {
            family: RelaxedFamily::Deterministic(c),
            action_box,
        }
    }

    /// `echo_v: []`, `indicator_v: [p]`.
    pub fn from_params(family: &str, params: &[f64], action_box: ActionBox) -> Result<Self> {
        let fam = match (family, params) {
            ("echo_v", []) => RelaxedFamily::EchoV,
            ("indicator_v", [p]) => RelaxedFamily::IndicatorV { p: *p },
            ("echo_v" | "indicator_v", _) => {
                return Err(Error::BadSpec(format!(
                    "relaxed family `{family}`: wrong parameter count"
                )))
            }
            (other, _) => return Err(Error::BadSpec(format!("unknown relaxed family `{other}`"))),
        };
        Self::new(fam, action_box)
    }

    pub fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    pub fn family(&self) -> &RelaxedFamily {
        &self.family
    }

    pub fn uses(&self) -> AuxUse {
        match &self.family {
            RelaxedFamily::Deterministic(_) => AuxUse::NONE,
            RelaxedFamily::EchoV | RelaxedFamily::IndicatorV { .. } => AuxUse {
                v: true,
                vp: false,
                pi: false,
            },
            RelaxedFamily::MixturePi { .. } => AuxUse {
                v: false,
                vp: false,
                pi: true,
            },
            RelaxedFamily::Custom { uses, .. } => *uses,
        }
    }

    #[inline]
    pub fn eval(&self, a: &RelaxedArgs<'_>, pop: &PopulationView<'_>) -> f64 {
        let b = &self.action_box;
        let value = match &self.family {
            RelaxedFamily::Deterministic(c) => c.eval(a.t, a.x, a.u, a.xp, a.up, pop),
            RelaxedFamily::EchoV => b.lo() + a.v * (b.hi() - b.lo()),
            RelaxedFamily::IndicatorV { p } => {
                if a.v <= *p {
                    b.hi()
                } else {
                    b.lo()
                }
            }
            RelaxedFamily::MixturePi { p, first, second } => {
                if a.pi <= *p {
                    first.eval(a.t, a.x, a.u, a.xp, a.up, pop)
                } else {
                    second.eval(a.t, a.x, a.u, a.xp, a.up, pop)
                }
            }
            RelaxedFamily::Custom { f, .. } => f(a, pop),
        };
        b.clamp_scalar(value)
    }

    /// Tensor midpoint average over the uniforms the control reads.
    #[allow(clippy::too_many_arguments)]
    fn average(&self, t: f64, x: &[f64], u: f64, xp: &[f64], up: f64, pop: &PopulationView<'_>, nodes: &[f64]) -> f64 {
        let uses = self.uses();
        let axis = |used: bool| if used { nodes } else { &[0.5][..] };
        let (vs, vps, pis) = (axis(uses.v), axis(uses.vp), axis(uses.pi));
        let mut acc = 0.0;
        for &pi in pis {
            for &vp in vps {
                for &v in vs {
                    acc += self.eval(
                        &RelaxedArgs {
                            t,
                            x,
                            u,
                            v,
                            xp,
                            up,
                            vp,
                            vbar: VBAR,
                            pi,
                        },
                        pop,
                    );
                }
            }
        }
        acc / (vs.len() * vps.len() * pis.len()) as f64
    }
}

/// Midpoints `(k + 1/2) / q`.
pub fn midpoint_nodes(q: usize) -> Vec<f64> {
    (0..q).map(|k| (k as f64 + 0.5) / q as f64).collect()
}

/// Deterministic closed-loop control obtained by averaging `gbar` over its
/// auxiliary uniforms with a `quad_points`-node midpoint rule per axis.
pub fn barycentric_projection(gbar: &RelaxedInteractionControl, quad_points: usize) -> Result<InteractionControl> {
    if quad_points == 0 {
        return Err(Error::BadSpec("quad_points must be >= 1".into()));
    }
    if let RelaxedFamily::Deterministic(c) = &gbar.family {
        return Ok(c.clone());
    }
    InteractionControl::new(
        InteractionFamily::Projected {
            inner: Arc::new(gbar.clone()),
            nodes: Arc::new(midpoint_nodes(quad_points)),
        },
        gbar.action_box.clone(),
    )
}

/// Dense `n x n` matrix of interaction actions at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PairActions {
    n: usize,
    values: Vec<f64>,
}

impl PairActions {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(i, j));
            }
        }
        Self { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Action of agent `i` toward agent `j` (0-based).
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Controls lifted to an `n`-player system: agent `i` directs
/// `gamma(t, x_i, i/n, x_j, j/n)` at agent `j` and uses `alpha(t, x_i, i/n)`.
#[derive(Debug, Clone)]
pub struct PairControlMatrix {
    n: usize,
    gamma: InteractionControl,
    alpha: RegularControl,
}

pub fn lift_to_nplayer(gamma: InteractionControl, alpha: RegularControl, n: usize) -> PairControlMatrix {
    PairControlMatrix { n, gamma, alpha }
}

impl PairControlMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> &InteractionControl {
        &self.gamma
    }

    pub fn alpha(&self) -> &RegularControl {
        &self.alpha
    }

    /// `gamma^n_{ij}` with 0-based indices.
    #[inline]
    pub fn pair_action(&self, pop: &PopulationView<'_>, i: usize, j: usize) -> f64 {
        self.gamma
            .eval(pop.t, pop.state(i), pop.label(i), pop.state(j), pop.label(j), pop)
    }

    pub fn regular_action(&self, pop: &PopulationView<'_>, i: usize) -> Vec<f64> {
        self.alpha.eval(pop.t, pop.state(i), pop.label(i))
    }

    pub fn snapshot(&self, pop: &PopulationView<'_>) -> PairActions {
        PairActions::from_fn(self.n, |i, j| self.pair_action(pop, i, j))
    }
}

/// One draw of the auxiliary uniforms: `V_i` per agent and a shared `pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedDraw {
    pub v: Vec<f64>,
    pub pi: f64,
}

impl RelaxedDraw {
    pub fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let v = (0..n).map(|_| rng.random::<f64>()).collect();
        let pi = rng.random::<f64>();
        Self { v, pi }
    }

    #[inline]
    pub fn pair_action(&self, gbar: &RelaxedInteractionControl, pop: &PopulationView<'_>, i: usize, j: usize) -> f64 {
        gbar.eval(
            &RelaxedArgs {
                t: pop.t,
                x: pop.state(i),
                u: pop.label(i),
                v: self.v[i],
                xp: pop.state(j),
                up: pop.label(j),
                vp: self.v[j],
                vbar: VBAR,
                pi: self.pi,
            },
            pop,
        )
    }
}

/// Pairwise actions of a randomized control for one fresh draw of
/// `(V_1..V_n, pi)` from `rng`.
pub fn sample_relaxed_realization<R: Rng + ?Sized>(
    gbar: &RelaxedInteractionControl,
    pop: &PopulationView<'_>,
    rng: &mut R,
) -> PairActions {
    let n = pop.n();
    let draw = RelaxedDraw::sample(n, rng);
    PairActions::from_fn(n, |i, j| draw.pair_action(gbar, pop, i, j))
}

/// Deterministic selector on `[0,1]^2` reproducing block-constant action
/// frequencies.
///
/// Inside the cell `T_j x T_l` of the `1/n` grid, the `s`-interval `T_j` is
/// cut into consecutive pieces of lengths `Lambda^e / n`, `e = 1..k`, where
/// `Lambda` is read on the coarser `1/m` grid; the piece with index `e`
/// carries action `a_e` for every `t` in `T_l`.
#[derive(Debug, Clone)]
pub struct ChatteringSelector {
    n: usize,
    m: usize,
    /// `weights[e][q][r]`.
    weights: Vec<Vec<Vec<f64>>>,
    actions: Vec<Vec<f64>>,
}

pub fn chattering_selector(
    weights: Vec<Vec<Vec<f64>>>,
    n: usize,
    actions: Vec<Vec<f64>>,
) -> Result<ChatteringSelector> {
    let k = weights.len();
    if k == 0 || actions.len() != k {
        return Err(Error::SizeMismatch {
            what: format!("{k} weight layers for {} actions", actions.len()),
        });
    }
    let m = weights[0].len();
    if m == 0 || weights.iter().any(|w| w.len() != m || w.iter().any(|r| r.len() != m)) {
        return Err(Error::SizeMismatch {
            what: "weight layers must all be m x m".into(),
        });
    }
    if n == 0 || !n.is_multiple_of(m) {
        return Err(Error::GridMismatch { n, m });
    }
    for q in 0..m {
        for r in 0..m {
            let sum: f64 = weights.iter().map(|w| w[q][r]).sum();
            if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| w[q][r] < 0.0) {
                return Err(Error::WeightsNotNormalized { row: q, col: r, sum });
            }
        }
    }
    Ok(ChatteringSelector { n, m, weights, actions })
}

impl ChatteringSelector {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.actions.len()
    }

    fn coarse(&self, j: usize) -> usize {
        j / (self.n / self.m)
    }

    /// Endpoints `(lo, hi]` of piece `e` in cell `(j, l)`.
    pub fn piece(&self, j: usize, l: usize, e: usize) -> (f64, f64) {
        let (q, r) = (self.coarse(j), self.coarse(l));
        let nf = self.n as f64;
        let before: f64 = self.weights[..e].iter().map(|w| w[q][r]).sum();
        let lo = j as f64 / nf + before / nf;
        let hi = lo + self.weights[e][q][r] / nf;
        (lo, hi)
    }

    /// Index of the action used at `(s, t)`.
    pub fn select_index(&self, s: f64, t: f64) -> usize {
        let (j, l) = (block_index(s, self.n), block_index(t, self.n));
        let (q, r) = (self.coarse(j), self.coarse(l));
        let offset = (s - j as f64 / self.n as f64) * self.n as f64;
        let mut acc = 0.0;
        let mut last = 0;
        for (e, w) in self.weights.iter().enumerate() {
            if w[q][r] <= 0.0 {
                continue;
            }
            last = e;
            acc += w[q][r];
            if offset <= acc {
                return e;
            }
        }
        last
    }

    pub fn select(&self, s: f64, t: f64) -> &[f64] {
        &self.actions[self.select_index(s, t)]
    }
}
