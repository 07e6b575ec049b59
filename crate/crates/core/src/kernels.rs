//! Step kernels, analytic graphons and cut-norm computations.
//!
//! A step kernel of size `n` is block constant on the uniform grid with
//! blocks `((i-1)/n, i/n] x ((j-1)/n, j/n]`. Intervals are left-open and
//! right-closed; the point `0` belongs to the first block.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};

/// Default largest grid size handled by exhaustive enumeration.
pub const EXACT_ENUMERATION_CAP: usize = 24;

/// Box `[lower, upper]` in `R^dim` holding the kernel marks.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl MarkSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::BadSpec("mark space must have dim >= 1".into()));
        }
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if let Some(k) = (0..lower.len()).find(|&k| !(lower[k] <= upper[k])) {
            return Err(Error::BadSpec(format!(
                "mark space bound {k}: lower {} > upper {}",
                lower[k], upper[k]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// The scalar box `[lo, hi]`.
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

    fn check(&self, i: usize, j: usize, mark: &[f64]) -> Result<()> {
        if mark.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: mark.len(),
            });
        }
        for (k, &value) in mark.iter().enumerate() {
            if !(value >= self.lower[k] && value <= self.upper[k]) {
                return Err(Error::MarkOutOfBounds {
                    i,
                    j,
                    k,
                    value,
                    lo: self.lower[k],
                    hi: self.upper[k],
                });
            }
        }
        Ok(())
    }
}

/// Index (0-based) of the grid block of size `1/n` containing `u`.
///
/// Blocks are `((k-1)/n, k/n]`; `u = 0` maps to block 0.
pub fn block_index(u: f64, n: usize) -> usize {
    if u <= 0.0 {
        return 0;
    }
    let nf = n as f64;
    let mut k = ((u * nf).ceil() as usize).clamp(1, n);
    // correct rounding at the breakpoints: want (k-1)/n < u <= k/n
    if k > 1 && u <= (k - 1) as f64 / nf {
        k -= 1;
    } else if k < n && u > k as f64 / nf {
        k += 1;
    }
    k - 1
}

/// Block-constant interaction structure on the uniform `1/n` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StepKernel {
    n: usize,
    mark_space: MarkSpace,
    marks: Vec<f64>,
}

impl StepKernel {
    /// Builds a kernel from an `n x n` array of marks.
    pub fn from_matrix(matrix: &[Vec<Vec<f64>>], mark_space: MarkSpace) -> Result<Self> {
        let n = matrix.len();
        if n == 0 {
            return Err(Error::BadSpec("empty kernel matrix".into()));
        }
        let dim = mark_space.dim();
        let mut marks = Vec::with_capacity(n * n * dim);
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != n {
                return Err(Error::NonSquareMatrix {
                    rows: n,
                    row: i,
                    cols: row.len(),
                });
            }
            for (j, mark) in row.iter().enumerate() {
                mark_space.check(i, j, mark)?;
                marks.extend_from_slice(mark);
            }
        }
        Ok(Self { n, mark_space, marks })
    }

    /// Scalar marks (`dim = 1`).
    pub fn from_scalar_matrix(matrix: &[Vec<f64>], mark_space: MarkSpace) -> Result<Self> {
        let lifted: Vec<Vec<Vec<f64>>> = matrix
            .iter()
            .map(|row| row.iter().map(|&x| vec![x]).collect())
            .collect();
        Self::from_matrix(&lifted, mark_space)
    }

    /// Constant kernel on a single block.
    pub fn constant(mark: Vec<f64>, mark_space: MarkSpace) -> Result<Self> {
        Self::from_matrix(&[vec![mark]], mark_space)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.mark_space.dim()
    }

    pub fn mark_space(&self) -> &MarkSpace {
        &self.mark_space
    }

    /// Mark `xi_{ij}` with 0-based indices.
    #[inline]
    pub fn mark(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        let start = (i * self.n + j) * d;
        &self.marks[start..start + d]
    }

    /// First mark component, the common case of scalar marks.
    #[inline]
    pub fn scalar(&self, i: usize, j: usize) -> f64 {
        self.marks[(i * self.n + j) * self.dim()]
    }

    /// Row `i` of marks as a flat slice of `n * dim` values.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n * self.dim();
        &self.marks[i * w..(i + 1) * w]
    }

    /// Evaluates `G^n(u, v)`.
    pub fn eval(&self, u: f64, v: f64) -> Result<&[f64]> {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Err(Error::DomainViolation { u, v });
        }
        Ok(self.mark(block_index(u, self.n), block_index(v, self.n)))
    }

    /// Applies a scalar test map to every mark.
    pub fn compose(&self, f: &dyn Fn(&[f64]) -> f64) -> WeightedStepKernel {
        let values = (0..self.n)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .map(|(i, j)| f(self.mark(i, j)))
            .collect();
        WeightedStepKernel::uniform(self.n, values).expect("square by construction")
    }

    /// Writes the kernel in the `# stepkernel` CSV format.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(";");
        writeln!(
            w,
            "# stepkernel n={} dim={} lo={} hi={}",
            self.n,
            self.dim(),
            join(self.mark_space.lower()),
            join(self.mark_space.upper())
        )?;
        for i in 0..self.n {
            let line = (0..self.n).map(|j| join(self.mark(i, j))).collect::<Vec<_>>().join(",");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::BadSpec("empty kernel file".into()))??;
        let header = header
            .trim()
            .strip_prefix("# stepkernel")
            .ok_or_else(|| Error::BadSpec("missing `# stepkernel` header".into()))?;
        let (mut n, mut dim, mut lo, mut hi) = (None, None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::BadSpec(format!("bad header field `{field}`")))?;
            match key {
                "n" => n = Some(parse_usize(value, "n")?),
                "dim" => dim = Some(parse_usize(value, "dim")?),
                "lo" => lo = Some(parse_vec(value, "lo")?),
                "hi" => hi = Some(parse_vec(value, "hi")?),
                other => return Err(Error::BadSpec(format!("unknown header field `{other}`"))),
            }
        }
        let missing = |k: &str| Error::BadSpec(format!("header is missing `{k}`"));
        let n = n.ok_or_else(|| missing("n"))?;
        let dim = dim.ok_or_else(|| missing("dim"))?;
        let space = MarkSpace::new(lo.ok_or_else(|| missing("lo"))?, hi.ok_or_else(|| missing("hi"))?)?;
        if space.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: space.dim(),
            });
        }
        let mut matrix = Vec::with_capacity(n);
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|cell| {
                    let mark = parse_vec(cell.trim(), "cell")?;
                    if mark.len() != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            got: mark.len(),
                        });
                    }
                    Ok(mark)
                })
                .collect::<Result<Vec<_>>>()?;
            matrix.push(row);
        }
        if matrix.len() != n {
            return Err(Error::BadSpec(format!(
                "header declares n={n} but found {} rows",
                matrix.len()
            )));
        }
        Self::from_matrix(&matrix, space)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::BadSpec(format!("`{what}`: cannot parse `{s}`")))
}

fn parse_vec(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(';')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::BadSpec(format!("`{what}`: cannot parse `{x}`")))
        })
        .collect()
}

pub(crate) fn format_float(x: f64) -> String {
    format!("{x}")
}

type GraphonFn = dyn Fn(f64, f64) -> Vec<f64> + Send + Sync;

/// Closed-form limiting kernel `G : [0,1]^2 -> E`.
#[derive(Clone)]
pub struct AnalyticGraphon {
    name: String,
    evaluator: Arc<GraphonFn>,
    lipschitz: Option<f64>,
    mark_space: MarkSpace,
}

impl fmt::Debug for AnalyticGraphon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticGraphon")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .field("mark_space", &self.mark_space)
            .finish()
    }
}

impl AnalyticGraphon {
    /// Registers a graphon. `lipschitz` is with respect to the l1 metric on
    /// `[0,1]^2`, `None` when unknown.
    pub fn new<F>(name: impl Into<String>, mark_space: MarkSpace, lipschitz: Option<f64>, f: F) -> Self
    where
        F: Fn(f64, f64) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            evaluator: Arc::new(f),
            lipschitz,
            mark_space,
        }
    }

    pub fn constant(c: f64) -> Self {
        let lo = c.min(0.0);
        let hi = c.max(1.0);
        Self::new(
            format!("constant:{c}"),
            MarkSpace::interval(lo, hi).expect("ordered"),
            Some(0.0),
            move |_, _| vec![c],
        )
    }

    /// `G(u, v) = u v`.
    pub fn product() -> Self {
        Self::new("product", MarkSpace::unit(), Some(1.0), |u, v| vec![u * v])
    }

    /// `G(u, v) = 1{u + v > 1}`.
    pub fn threshold() -> Self {
        Self::new("threshold", MarkSpace::unit(), None, |u, v| {
            vec![if u + v > 1.0 { 1.0 } else { 0.0 }]
        })
    }

    /// Stochastic block model with `probs.len()` equal blocks.
    pub fn sbm(probs: Vec<Vec<f64>>) -> Result<Self> {
        let k = probs.len();
        if k == 0 || probs.iter().any(|r| r.len() != k) {
            return Err(Error::BadSpec(
                "sbm probabilities must be a non-empty square matrix".into(),
            ));
        }
        let lo = probs.iter().flatten().cloned().fold(0.0, f64::min);
        let hi = probs.iter().flatten().cloned().fold(1.0, f64::max);
        Ok(Self::new(
            format!("sbm{k}"),
            MarkSpace::interval(lo, hi)?,
            None,
            move |u, v| vec![probs[block_index(u, k)][block_index(v, k)]],
        ))
    }

    /// `G(u, v) = exp(-rate |u - v|)`.
    pub fn exp_decay(rate: f64) -> Self {
        Self::new(
            format!("exp_decay:{rate}"),
            MarkSpace::unit(),
            Some(rate.abs()),
            move |u, v| vec![(-rate * (u - v).abs()).exp()],
        )
    }

    /// Parses `constant:<c>`, `product`, `threshold`, `sbm2:<p_in>:<p_out>`
    /// or `exp_decay:<rate>`.
    pub fn from_id(id: &str) -> Result<Self> {
        let mut parts = id.split(':');
        let head = parts.next().unwrap_or_default();
        let args: Vec<f64> = parts
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::BadSpec(format!("graphon `{id}`: bad parameter `{p}`")))
            })
            .collect::<Result<_>>()?;
        let arity = |k: usize| {
            if args.len() == k {
                Ok(())
            } else {
                Err(Error::BadSpec(format!("graphon `{head}` takes {k} parameters")))
            }
        };
        match head {
            "constant" => {
                arity(1)?;
                Ok(Self::constant(args[0]))
            }
            "product" => {
                arity(0)?;
                Ok(Self::product())
            }
            "threshold" => {
                arity(0)?;
                Ok(Self::threshold())
            }
            "sbm2" => {
                arity(2)?;
                Self::sbm(vec![vec![args[0], args[1]], vec![args[1], args[0]]])
            }
            "exp_decay" => {
                arity(1)?;
                Ok(Self::exp_decay(args[0]))
            }
            _ => Err(Error::BadSpec(format!("unknown graphon `{id}`"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn mark_space(&self) -> &MarkSpace {
        &self.mark_space
    }

    pub fn eval(&self, u: f64, v: f64) -> Vec<f64> {
        (self.evaluator)(u, v)
    }
}

/// `xi_{ij} = G(i/n, j/n)`.
pub fn sample_from_graphon(g: &AnalyticGraphon, n: usize) -> Result<StepKernel> {
    if n == 0 {
        return Err(Error::BadSpec("n must be >= 1".into()));
    }
    let nf = n as f64;
    let matrix: Vec<Vec<Vec<f64>>> = (1..=n)
        .map(|i| (1..=n).map(|j| g.eval(i as f64 / nf, j as f64 / nf)).collect())
        .collect();
    StepKernel::from_matrix(&matrix, g.mark_space().clone())
}

/// Scalar block matrix with arbitrary positive block widths on each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedStepKernel {
    row_weights: Vec<f64>,
    col_weights: Vec<f64>,
    values: Vec<f64>,
}

impl WeightedStepKernel {
    pub fn new(row_weights: Vec<f64>, col_weights: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        for w in [&row_weights, &col_weights] {
            if w.is_empty() || w.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::BadSpec("block weights must be strictly positive".into()));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::BadSpec(format!("block weights sum to {s}, expected 1")));
            }
        }
        if values.len() != row_weights.len() * col_weights.len() {
            return Err(Error::SizeMismatch {
                what: format!(
                    "{} values for a {}x{} grid",
                    values.len(),
                    row_weights.len(),
                    col_weights.len()
                ),
            });
        }
        Ok(Self {
            row_weights,
            col_weights,
            values,
        })
    }

    /// Uniform `1/n` weights on both axes, values row-major.
    pub fn uniform(n: usize, values: Vec<f64>) -> Result<Self> {
        let w = vec![1.0 / n as f64; n];
        Self::new(w.clone(), w, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::NonSquareMatrix {
                rows: n,
                row,
                cols: r.len(),
            });
        }
        Self::uniform(n, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.row_weights.len()
    }

    pub fn cols(&self) -> usize {
        self.col_weights.len()
    }

    pub fn row_weights(&self) -> &[f64] {
        &self.row_weights
    }

    pub fn col_weights(&self) -> &[f64] {
        &self.col_weights
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| c * v).collect(),
            ..self.clone()
        }
    }

    /// Block masses `w_i w_j T_ij`.
    fn masses(&self) -> Vec<f64> {
        let c = self.cols();
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| self.row_weights[k / c] * self.col_weights[k % c] * v)
            .collect()
    }

    fn transposed(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let values = (0..c)
            .flat_map(|j| (0..r).map(move |i| (i, j)))
            .map(|(i, j)| self.values[i * c + j])
            .collect();
        Self {
            row_weights: self.col_weights.clone(),
            col_weights: self.row_weights.clone(),
            values,
        }
    }

    /// `sum_ij w_i w_j |T_ij|`.
    pub fn l1_norm(&self) -> f64 {
        self.masses().iter().map(|m| m.abs()).sum()
    }
}

/// Value of the best column set for a fixed row set, given the restricted
/// column sums.
#[inline]
fn best_columns(col_sums: &[f64]) -> f64 {
    let (mut pos, mut neg) = (0.0, 0.0);
    for &s in col_sums {
        if s > 0.0 {
            pos += s;
        } else {
            neg -= s;
        }
    }
    pos.max(neg)
}

/// Exact cut norm by enumerating row subsets, with the default cap.
pub fn cut_norm_exact(m: &WeightedStepKernel) -> Result<f64> {
    cut_norm_exact_with_cap(m, EXACT_ENUMERATION_CAP)
}

/// Exact cut norm `sup_{A,B} |int_{A x B} T|`.
///
/// The supremum is attained on unions of blocks. Row subsets are enumerated
/// in Gray-code order with incremental column sums; the optimal column set
/// for each row set follows from the signs of those sums. The enumerated
/// axis is the shorter one, which must not exceed `cap`.
pub fn cut_norm_exact_with_cap(m: &WeightedStepKernel, cap: usize) -> Result<f64> {
    if m.rows() > m.cols() {
        return cut_norm_exact_with_cap(&m.transposed(), cap);
    }
    let rows = m.rows();
    if rows > cap {
        return Err(Error::SizeCapExceeded { size: rows, cap });
    }
    let cols = m.cols();
    let masses = m.masses();

    // Fix the top `split` bits per chunk and Gray-walk the rest.
    let split = rows.saturating_sub(12).min(8);
    let low = rows - split;
    let chunks = 1usize << split;
    let best = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut sums = vec![0.0; cols];
            for b in 0..split {
                if chunk >> b & 1 == 1 {
                    let i = low + b;
                    for (s, x) in sums.iter_mut().zip(&masses[i * cols..(i + 1) * cols]) {
                        *s += x;
                    }
                }
            }
            let mut set = (chunk as u64) << low;
            let mut best = (best_columns(&sums), set);
            for k in 1u64..(1u64 << low) {
                let i = k.trailing_zeros() as usize;
                let row = &masses[i * cols..(i + 1) * cols];
                set ^= 1 << i;
                if set >> i & 1 == 1 {
                    for (s, x) in sums.iter_mut().zip(row) {
                        *s += x;
                    }
                } else {
                    for (s, x) in sums.iter_mut().zip(row) {
                        *s -= x;
                    }
                }
                let v = best_columns(&sums);
                if v > best.0 {
                    best = (v, set);
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(|a, b| if b.0 > a.0 { b } else { a })
        .expect("at least one chunk");

    // recompute the winner from scratch to shed incremental rounding
    let set = best.1;
    let sums: Vec<f64> = (0..cols)
        .map(|j| {
            (0..rows)
                .filter(|&i| set >> i & 1 == 1)
                .map(|i| masses[i * cols + j])
                .sum()
        })
        .collect();
    Ok(best_columns(&sums))
}

/// Lower bound on the cut norm by alternating maximization.
///
/// Each restart fixes a row set, picks the best column set for a given
/// sign, then the best row set for that column set, until the signed value
/// stops improving. Restart 0 starts from the full row set; the others from
/// seeded random row sets.
pub fn cut_norm_lower_bound(m: &WeightedStepKernel, restarts: usize, seed: u64) -> f64 {
    let (rows, cols) = (m.rows(), m.cols());
    let masses = m.masses();
    let mut best = 0.0f64;
    for r in 0..restarts.max(1) {
        let start: Vec<bool> = if r == 0 {
            vec![true; rows]
        } else {
            let mut rng = StreamKey::new(seed, Purpose::Heuristic).replication(r).rng();
            (0..rows).map(|_| rng.random_bool(0.5)).collect()
        };
        for sign in [1.0, -1.0] {
            let mut row_set = start.clone();
            let mut col_set = vec![false; cols];
            let mut value = f64::NEG_INFINITY;
            loop {
                for (j, c) in col_set.iter_mut().enumerate() {
                    let s: f64 = (0..rows).filter(|&i| row_set[i]).map(|i| masses[i * cols + j]).sum();
                    *c = sign * s > 0.0;
                }
                for (i, r) in row_set.iter_mut().enumerate() {
                    let s: f64 = (0..cols).filter(|&j| col_set[j]).map(|j| masses[i * cols + j]).sum();
                    *r = sign * s > 0.0;
                }
                let v = sign * rectangle_mass(&masses, cols, &row_set, &col_set);
                if v <= value {
                    break;
                }
                value = v;
            }
            best = best.max(value);
        }
    }
    best
}

fn rectangle_mass(masses: &[f64], cols: usize, row_set: &[bool], col_set: &[bool]) -> f64 {
    row_set
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| {
            col_set
                .iter()
                .enumerate()
                .filter(|(_, &c)| c)
                .map(|(j, _)| masses[i * cols + j])
                .sum::<f64>()
        })
        .sum()
}

/// How a cut norm was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutMethod {
    Exact,
    LowerBound,
}

impl fmt::Display for CutMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CutMethod::Exact => "exact",
            CutMethod::LowerBound => "lower-bound",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutValue {
    pub value: f64,
    pub method: CutMethod,
}

#[derive(Debug, Clone, Copy)]
pub struct CutOptions {
    pub cap: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CutOptions {
    fn default() -> Self {
        Self {
            cap: EXACT_ENUMERATION_CAP,
            restarts: 32,
            seed: 0,
        }
    }
}

/// Exact when within the cap, heuristic lower bound otherwise.
pub fn cut_norm(m: &WeightedStepKernel, opts: CutOptions) -> CutValue {
    // with entries of one sign the full square is optimal
    let (mut pos, mut neg) = (false, false);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m.value(i, j);
            pos |= v > 0.0;
            neg |= v < 0.0;
        }
    }
    if !(pos && neg) {
        let total: f64 = (0..m.rows())
            .map(|i| m.row_weights()[i] * (0..m.cols()).map(|j| m.col_weights()[j] * m.value(i, j)).sum::<f64>())
            .sum();
        return CutValue {
            value: total.abs(),
            method: CutMethod::Exact,
        };
    }
    match cut_norm_exact_with_cap(m, opts.cap) {
        Ok(value) => CutValue {
            value,
            method: CutMethod::Exact,
        },
        Err(_) => CutValue {
            value: cut_norm_lower_bound(m, opts.restarts, opts.seed),
            method: CutMethod::LowerBound,
        },
    }
}

/// Common refinement of the uniform grids of sizes `n1` and `n2`: block
/// widths and, for each refined block, the indices of the source blocks.
pub fn common_refinement(n1: usize, n2: usize) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let l = n1 / gcd(n1, n2) * n2;
    let (s1, s2) = (l / n1, l / n2);
    // breakpoints as integer multiples of 1/l
    let mut cuts: Vec<usize> = (1..=n1).map(|i| i * s1).chain((1..=n2).map(|j| j * s2)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut widths = Vec::with_capacity(cuts.len());
    let mut idx1 = Vec::with_capacity(cuts.len());
    let mut idx2 = Vec::with_capacity(cuts.len());
    let mut prev = 0;
    for &c in &cuts {
        widths.push((c - prev) as f64 / l as f64);
        idx1.push((c - 1) / s1);
        idx2.push((c - 1) / s2);
        prev = c;
    }
    (widths, idx1, idx2)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `f o k1 - f o k2` on the common refinement of the two grids.
pub fn refined_difference(k1: &StepKernel, k2: &StepKernel, f: &dyn Fn(&[f64]) -> f64) -> WeightedStepKernel {
    let (w, a, b) = common_refinement(k1.n(), k2.n());
    let r = w.len();
    let mut values = Vec::with_capacity(r * r);
    for p in 0..r {
        for q in 0..r {
            values.push(f(k1.mark(a[p], a[q])) - f(k2.mark(b[p], b[q])));
        }
    }
    WeightedStepKernel::new(w.clone(), w, values).expect("refinement weights are valid")
}

/// `|| f o k1 - f o k2 ||_cut`, exact when the refinement fits the cap.
pub fn cut_distance(k1: &StepKernel, k2: &StepKernel, f: &dyn Fn(&[f64]) -> f64) -> CutValue {
    cut_distance_with(k1, k2, f, CutOptions::default())
}

pub fn cut_distance_with(k1: &StepKernel, k2: &StepKernel, f: &dyn Fn(&[f64]) -> f64, opts: CutOptions) -> CutValue {
    cut_norm(&refined_difference(k1, k2, f), opts)
}

/// `int int |k1 - k2|` with the Euclidean norm on marks.
pub fn l1_distance(k1: &StepKernel, k2: &StepKernel) -> Result<f64> {
    if k1.dim() != k2.dim() {
        return Err(Error::DimensionMismatch {
            expected: k1.dim(),
            got: k2.dim(),
        });
    }
    let (w, a, b) = common_refinement(k1.n(), k2.n());
    let mut total = 0.0;
    for p in 0..w.len() {
        for q in 0..w.len() {
            let d2: f64 = k1
                .mark(a[p], a[q])
                .iter()
                .zip(k2.mark(b[p], b[q]))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += w[p] * w[q] * d2.sqrt();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive oracle over all (row set, column set) pairs.
    fn brute_cut_norm(m: &WeightedStepKernel) -> f64 {
        let (r, c) = (m.rows(), m.cols());
        let mut best = 0.0f64;
        for s in 0u32..(1 << r) {
            for t in 0u32..(1 << c) {
                let mut acc = 0.0;
                for i in 0..r {
                    for j in 0..c {
                        if s >> i & 1 == 1 && t >> j & 1 == 1 {
                            acc += m.row_weights()[i] * m.col_weights()[j] * m.value(i, j);
                        }
                    }
                }
                best = best.max(acc.abs());
            }
        }
        best
    }

    fn scalar_kernel(rows: &[Vec<f64>]) -> StepKernel {
        StepKernel::from_scalar_matrix(rows, MarkSpace::unit()).unwrap()
    }

    #[test]
    fn single_block_kernel() {
        let k = scalar_kernel(&[vec![0.5]]);
        for (u, v) in [(0.0, 0.0), (0.3, 0.9), (1.0, 1.0)] {
            assert_eq!(k.eval(u, v).unwrap(), &[0.5]);
        }
    }

    #[test]
    fn identity_block_lookup() {
        let k = scalar_kernel(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(k.eval(0.25, 0.75).unwrap(), &[0.0]);
        assert_eq!(k.eval(0.75, 0.75).unwrap(), &[1.0]);
    }

    #[test]
    fn out_of_bounds_mark_is_reported() {
        let err = StepKernel::from_scalar_matrix(&[vec![0.0, 1.5], vec![0.0, 0.0]], MarkSpace::unit()).unwrap_err();
        assert!(matches!(err, Error::MarkOutOfBounds { i: 0, j: 1, .. }));
    }

    #[test]
    fn non_square_rejected() {
        let err = StepKernel::from_scalar_matrix(&[vec![0.0, 1.0], vec![0.0]], MarkSpace::unit()).unwrap_err();
        assert!(matches!(err, Error::NonSquareMatrix { row: 1, .. }));
    }

    #[test]
    fn half_open_blocks() {
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        let k = scalar_kernel(&[vec![a, b], vec![c, d]]);
        assert_eq!(k.eval(0.5, 0.5).unwrap(), &[a]);
        assert_eq!(k.eval(0.5 + 1e-12, 0.5).unwrap(), &[c]);
        assert_eq!(k.eval(0.0, 0.0).unwrap(), &[a]);
        assert!(matches!(k.eval(1.1, 0.0), Err(Error::DomainViolation { .. })));
        assert!(matches!(k.eval(0.0, -0.1), Err(Error::DomainViolation { .. })));
    }

    #[test]
    fn block_index_at_grid_points() {
        for n in 1..50 {
            for i in 1..=n {
                let u = i as f64 / n as f64;
                assert_eq!(block_index(u, n), i - 1, "u = {i}/{n}");
            }
        }
    }

    #[test]
    fn graphon_sampling() {
        let z = sample_from_graphon(&AnalyticGraphon::constant(0.0), 3).unwrap();
        assert!((0..3).all(|i| (0..3).all(|j| z.scalar(i, j) == 0.0)));

        let p = sample_from_graphon(&AnalyticGraphon::product(), 2).unwrap();
        assert_eq!(
            [p.scalar(0, 0), p.scalar(0, 1), p.scalar(1, 0), p.scalar(1, 1)],
            [0.25, 0.5, 0.5, 1.0]
        );

        let t = sample_from_graphon(&AnalyticGraphon::threshold(), 2).unwrap();
        assert_eq!(
            [t.scalar(0, 0), t.scalar(0, 1), t.scalar(1, 0), t.scalar(1, 1)],
            [0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn exact_cut_norm_examples() {
        let c = WeightedStepKernel::from_rows(&[vec![-0.7; 3], vec![-0.7; 3], vec![-0.7; 3]]).unwrap();
        assert!((cut_norm_exact(&c).unwrap() - 0.7).abs() < 1e-15);
        let z = WeightedStepKernel::from_rows(&vec![vec![0.0; 4]; 4]).unwrap();
        assert_eq!(cut_norm_exact(&z).unwrap(), 0.0);
        let m = WeightedStepKernel::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert_eq!(brute_cut_norm(&m), 0.25);
        assert_eq!(cut_norm_exact(&m).unwrap(), 0.25);
    }

    #[test]
    fn exact_cut_norm_cap() {
        let m = WeightedStepKernel::from_rows(&vec![vec![1.0; 25]; 25]).unwrap();
        assert_eq!(cut_norm_exact(&m), Err(Error::SizeCapExceeded { size: 25, cap: 24 }));
    }

    #[test]
    fn chunked_enumeration_matches_small_cap_path() {
        // 16 rows triggers chunking; the answer must agree with the
        // heuristic's certificate and the L1 bound on a one-signed matrix.
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|i| (0..16).map(|j| ((i * 7 + j * 3) % 5) as f64 / 4.0).collect())
            .collect();
        let m = WeightedStepKernel::from_rows(&rows).unwrap();
        let exact = cut_norm_exact(&m).unwrap();
        assert!((exact - m.l1_norm()).abs() < 1e-12);
    }

    #[test]
    fn heuristic_examples() {
        let z = WeightedStepKernel::from_rows(&vec![vec![0.0; 5]; 5]).unwrap();
        assert_eq!(cut_norm_lower_bound(&z, 4, 1), 0.0);
        let ones = WeightedStepKernel::from_rows(&vec![vec![1.0; 6]; 6]).unwrap();
        assert!((cut_norm_lower_bound(&ones, 1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn refinement_of_grids() {
        let (w, a, b) = common_refinement(2, 3);
        // breakpoints 1/3, 1/2, 2/3, 1
        let expect = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for (x, y) in w.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(a, vec![0, 0, 1, 1]);
        assert_eq!(b, vec![0, 1, 1, 2]);
    }

    #[test]
    fn cut_distance_examples() {
        let k = sample_from_graphon(&AnalyticGraphon::product(), 5).unwrap();
        assert_eq!(cut_distance(&k, &k, &|m| m[0]).value, 0.0);

        let c1 = StepKernel::constant(vec![0.2], MarkSpace::unit()).unwrap();
        let c2 = StepKernel::constant(vec![0.9], MarkSpace::unit()).unwrap();
        let d = cut_distance(&c1, &c2, &|m| m[0]);
        assert!((d.value - 0.7).abs() < 1e-15);
        assert_eq!(d.method, CutMethod::Exact);
        assert!((l1_distance(&c1, &c2).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(l1_distance(&k, &k).unwrap(), 0.0);
    }

    #[test]
    fn cut_distance_on_refined_grid_matches_brute_force() {
        let g = AnalyticGraphon::product();
        let k4 = sample_from_graphon(&g, 4).unwrap();
        let k8 = sample_from_graphon(&g, 8).unwrap();
        let d = cut_distance(&k4, &k8, &|m| m[0]);
        assert_eq!(d.method, CutMethod::Exact);
        let diff = refined_difference(&k4, &k8, &|m| m[0]);
        assert_eq!(diff.rows(), 8);
        assert!((d.value - brute_cut_norm(&diff)).abs() < 1e-14);
        // the difference is one-signed, so the value is
        // ((4+1)/8)^2 - ((8+1)/16)^2
        let closed = (5.0f64 / 8.0).powi(2) - (9.0f64 / 16.0).powi(2);
        assert!((d.value - closed).abs() < 1e-14);
    }

    #[test]
    fn l1_distance_dimension_mismatch() {
        let a = StepKernel::constant(vec![0.0], MarkSpace::unit()).unwrap();
        let b = StepKernel::constant(vec![0.0, 0.0], MarkSpace::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(l1_distance(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn csv_round_trip_vector_marks() {
        let space = MarkSpace::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let k = StepKernel::from_matrix(
            &[
                vec![vec![0.5, -0.25], vec![1.0, 0.0]],
                vec![vec![0.0, 1.0], vec![0.125, -1.0]],
            ],
            space,
        )
        .unwrap();
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# stepkernel n=2 dim=2 lo=0;-1 hi=1;1\n"));
        assert_eq!(StepKernel::read_csv(&buf[..]).unwrap(), k);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(StepKernel::read_csv(&b"0,1\n1,0\n"[..]).is_err());
        assert!(StepKernel::read_csv(&b"# stepkernel n=2 dim=1 lo=0\n0,1\n1,0\n"[..]).is_err());
    }

    fn matrix_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec(-1.0f64..1.0, n * n)))
    }

    proptest! {
        #[test]
        fn exact_agrees_with_brute_force((n, v) in matrix_strategy(6)) {
            let m = WeightedStepKernel::uniform(n, v).unwrap();
            prop_assert!((cut_norm_exact(&m).unwrap() - brute_cut_norm(&m)).abs() < 1e-12);
        }

        #[test]
        fn cut_norm_is_a_seminorm((n, v) in matrix_strategy(8), w in prop::collection::vec(-1.0f64..1.0, 64), c in -3.0f64..3.0) {
            let m1 = WeightedStepKernel::uniform(n, v).unwrap();
            let m2 = WeightedStepKernel::uniform(n, w[..n * n].to_vec()).unwrap();
            let sum = WeightedStepKernel::uniform(n, (0..n * n).map(|k| m1.values[k] + m2.values[k]).collect()).unwrap();
            let a = cut_norm_exact(&m1).unwrap();
            let b = cut_norm_exact(&m2).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((cut_norm_exact(&m1.scale(c)).unwrap() - c.abs() * a).abs() < 1e-12);
            prop_assert!(cut_norm_exact(&sum).unwrap() <= a + b + 1e-12);
            prop_assert!(a <= m1.l1_norm() + 1e-12);
        }

        #[test]
        fn heuristic_never_exceeds_exact((n, v) in matrix_strategy(10), seed in 0u64..1000) {
            let m = WeightedStepKernel::uniform(n, v).unwrap();
            prop_assert!(cut_norm_lower_bound(&m, 4, seed) <= cut_norm_exact(&m).unwrap() + 1e-12);
        }

        #[test]
        fn heuristic_exact_on_one_signed((n, v) in matrix_strategy(10), neg in any::<bool>()) {
            let s = if neg { -1.0 } else { 1.0 };
            let m = WeightedStepKernel::uniform(n, v.iter().map(|x| s * x.abs()).collect()).unwrap();
            let exact = cut_norm_exact(&m).unwrap();
            prop_assert!((cut_norm_lower_bound(&m, 2, 0) - exact).abs() < 1e-12);
        }

        #[test]
        fn cut_distance_bounded_by_l1(n1 in 1usize..7, n2 in 1usize..7, v in prop::collection::vec(0.0f64..1.0, 72), lip in 0.1f64..3.0) {
            let k1 = StepKernel::from_scalar_matrix(
                &(0..n1).map(|i| v[i * n1..(i + 1) * n1].to_vec()).collect::<Vec<_>>(), MarkSpace::unit()).unwrap();
            let k2 = StepKernel::from_scalar_matrix(
                &(0..n2).map(|i| v[36 + i * n2..36 + (i + 1) * n2].to_vec()).collect::<Vec<_>>(), MarkSpace::unit()).unwrap();
            let f = move |m: &[f64]| lip * m[0].sin();
            let d = cut_distance(&k1, &k2, &f);
            prop_assert!(d.value <= lip * l1_distance(&k1, &k2).unwrap() + 1e-12);
        }

        #[test]
        fn eval_constant_on_blocks(n in 1usize..12, u in 0.0f64..=1.0, v in 0.0f64..=1.0) {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| ((i * n + j) as f64) / (n * n) as f64).collect()).collect();
            let k = StepKernel::from_scalar_matrix(&rows, MarkSpace::unit()).unwrap();
            let (i, j) = (block_index(u, n), block_index(v, n));
            prop_assert!(i < n && j < n);
            prop_assert!(u == 0.0 || (i as f64 / n as f64) < u);
            prop_assert!(u <= (i + 1) as f64 / n as f64);
            prop_assert_eq!(k.eval(u, v).unwrap()[0], rows[i][j]);
        }
    }
}
