//! Wasserstein-1 distances between equal-weight empirical measures, flow
//! distances between simulated systems, and Monte Carlo summaries.

use std::fmt;
use std::io::Write;

use rand::seq::index::sample;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::kernels::block_index;
use crate::rng::{Purpose, StreamKey};

/// Largest measure handled by exact assignment.
pub const ASSIGNMENT_CAP: usize = 512;

/// Equal-weight empirical measure with `m` atoms in `R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    k: usize,
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(k: usize, atoms: Vec<f64>) -> Result<Self> {
        if k == 0 || atoms.is_empty() || !atoms.len().is_multiple_of(k) {
            return Err(Error::SizeMismatch {
                what: format!("{} coordinates for dimension {k}", atoms.len()),
            });
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadSpec("atoms must be finite".into()));
        }
        Ok(Self { k, atoms })
    }

    pub fn from_1d(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    /// Only uniform weights are accepted.
    pub fn with_weights(k: usize, atoms: Vec<f64>, weights: &[f64]) -> Result<Self> {
        let m = Self::new(k, atoms)?;
        if weights.len() != m.len() {
            return Err(Error::LengthMismatch {
                left: m.len(),
                right: weights.len(),
            });
        }
        let w = 1.0 / m.len() as f64;
        if weights.iter().any(|x| (x - w).abs() > 1e-12) {
            return Err(Error::BadSpec(
                "only equal-weight empirical measures are supported".into(),
            ));
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.k..(i + 1) * self.k]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    fn subsample(&self, size: usize, seed: u64) -> Self {
        if size >= self.len() {
            return self.clone();
        }
        let mut rng = StreamKey::new(seed, Purpose::Subsample).rng();
        let mut idx = sample(&mut rng, self.len(), size).into_vec();
        idx.sort_unstable();
        let atoms = idx.iter().flat_map(|&i| self.atom(i).iter().copied()).collect();
        Self { k: self.k, atoms }
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Exact `W1` between two equal-size 1-d samples.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let (sa, sb) = (sorted(a), sorted(b));
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Exact `W1` between 1-d samples of any sizes: the `L1` distance between
/// quantile functions.
pub fn w1_quantile(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::SizeMismatch {
            what: "empty sample".into(),
        });
    }
    if a.len() == b.len() {
        return w1_sorted(a, b);
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let (m, n) = (sa.len(), sb.len());
    // walk the merged breakpoints i/m and j/n in integer units of 1/(m n)
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0usize;
    let mut total = 0.0;
    while i < m && j < n {
        let next_a = (i + 1) * n;
        let next_b = (j + 1) * m;
        let next = next_a.min(next_b);
        total += (next - pos) as f64 * (sa[i] - sb[j]).abs();
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    Ok(total / (m * n) as f64)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum-cost perfect matching on a square cost matrix by shortest
/// augmenting paths with potentials; returns the assignment row -> column.
pub fn min_cost_assignment(cost: &[f64], m: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    // p[col] = row matched to col (1-based, 0 = none)
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; m];
    for j in 1..=m {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Exact `W1` between equal-size measures in `R^k` with Euclidean ground
/// cost.
pub fn w1_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let m = a.len();
    if m > ASSIGNMENT_CAP {
        return Err(Error::SizeCapExceeded {
            size: m,
            cap: ASSIGNMENT_CAP,
        });
    }
    if a.dim() == 1 {
        return w1_sorted(a.atoms(), b.atoms());
    }
    let mut cost = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            cost[i * m + j] = euclid(a.atom(i), b.atom(j));
        }
    }
    let matching = min_cost_assignment(&cost, m);
    let total: f64 = matching.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum();
    Ok(total / m as f64)
}

/// `W1` for any pair of measures: exact in 1-d; above the cap or for
/// unequal sizes in higher dimension, both sides are subsampled (seeded) to
/// a common size first.
pub fn w1(a: &EmpiricalMeasure, b: &EmpiricalMeasure, seed: u64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.dim() == 1 {
        return w1_quantile(a.atoms(), b.atoms());
    }
    let size = a.len().min(b.len()).min(ASSIGNMENT_CAP);
    if a.len() == size && b.len() == size {
        return w1_assignment(a, b);
    }
    w1_assignment(&a.subsample(size, seed), &b.subsample(size, seed.wrapping_add(1)))
}

/// Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSummary {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(count)`, 0 for one value.
    pub stderr: f64,
    pub count: usize,
}

pub fn mc_summary(values: &[f64]) -> McSummary {
    let count = values.len();
    if count == 0 {
        return McSummary {
            mean: f64::NAN,
            stderr: f64::NAN,
            count,
        };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    if count == 1 {
        return McSummary {
            mean,
            stderr: 0.0,
            count,
        };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64;
    McSummary {
        mean,
        stderr: (var / count as f64).sqrt(),
        count,
    }
}

/// Summary of the paired differences `a_r - b_r` (common random numbers).
pub fn paired_summary(a: &[f64], b: &[f64]) -> Result<McSummary> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(mc_summary(&diffs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMode {
    /// `W1` between the state marginals.
    StateMarginal,
    /// Labels binned into `ceil(sqrt(n_min))` equal bins, per-bin `W1` on
    /// states, averaged over bins.
    LabelStratified,
}

impl fmt::Display for FlowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowMode::StateMarginal => "state_marginal",
            FlowMode::LabelStratified => "label_stratified",
        })
    }
}

impl std::str::FromStr for FlowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state_marginal" => Ok(FlowMode::StateMarginal),
            "label_stratified" => Ok(FlowMode::LabelStratified),
            _ => Err(Error::BadSpec(format!("unknown flow mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowOptions {
    /// Nearest-snapshot matching tolerance.
    pub tol: f64,
    pub seed: u64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { tol: 1e-9, seed: 0 }
    }
}

/// One point of a distance curve: mean over paired replications.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPoint {
    pub t: f64,
    pub distance: f64,
    pub stderr: f64,
    pub mode: FlowMode,
    pub n_a: usize,
    pub n_b: usize,
}

fn snapshot_distance(sa: &[f64], sb: &[f64], d: usize, mode: FlowMode, seed: u64) -> Result<f64> {
    let (na, nb) = (sa.len() / d, sb.len() / d);
    match mode {
        FlowMode::StateMarginal => w1(
            &EmpiricalMeasure::new(d, sa.to_vec())?,
            &EmpiricalMeasure::new(d, sb.to_vec())?,
            seed,
        ),
        FlowMode::LabelStratified => {
            let bins = (na.min(nb) as f64).sqrt().ceil() as usize;
            let split = |s: &[f64], n: usize| {
                let mut out = vec![Vec::new(); bins];
                for i in 0..n {
                    let b = block_index((i + 1) as f64 / n as f64, bins);
                    out[b].extend_from_slice(&s[i * d..(i + 1) * d]);
                }
                out
            };
            let (ba, bb) = (split(sa, na), split(sb, nb));
            let mut total = 0.0;
            for (k, (x, y)) in ba.into_iter().zip(bb).enumerate() {
                total += w1(
                    &EmpiricalMeasure::new(d, x)?,
                    &EmpiricalMeasure::new(d, y)?,
                    seed.wrapping_add(k as u64),
                )?;
            }
            Ok(total / bins as f64)
        }
    }
}

/// Distance curve between two simulated systems; replication `r` of `a` is
/// compared with replication `r` of `b`.
pub fn flow_distance(
    a: &[Trajectory],
    b: &[Trajectory],
    times: &[f64],
    mode: FlowMode,
    opts: &FlowOptions,
) -> Result<Vec<FlowPoint>> {
    let reps = a.len().min(b.len());
    if reps == 0 {
        return Err(Error::BadSpec(
            "flow distance needs at least one replication on each side".into(),
        ));
    }
    let (d, n_a, n_b) = (a[0].d, a[0].n, b[0].n);
    if b[0].d != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: b[0].d,
        });
    }
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mut values = Vec::with_capacity(reps);
        for r in 0..reps {
            let sa = a[r].snapshot_at(t, opts.tol).ok_or(Error::NoSnapshot { t })?;
            let sb = b[r].snapshot_at(t, opts.tol).ok_or(Error::NoSnapshot { t })?;
            let seed = StreamKey::new(opts.seed, Purpose::Subsample).replication(r).rng_seed();
            values.push(snapshot_distance(sa, sb, d, mode, seed)?);
        }
        let s = mc_summary(&values);
        out.push(FlowPoint {
            t,
            distance: s.mean,
            stderr: s.stderr,
            mode,
            n_a,
            n_b,
        });
    }
    Ok(out)
}

/// Distance curve CSV: `t,distance,mode,n_a,n_b`.
pub fn write_flow_csv<W: Write>(points: &[FlowPoint], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["t", "distance", "mode", "n_a", "n_b"])?;
    for p in points {
        csv.write_record([
            format!("{}", p.t),
            format!("{}", p.distance),
            p.mode.to_string(),
            p.n_a.to_string(),
            p.n_b.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
