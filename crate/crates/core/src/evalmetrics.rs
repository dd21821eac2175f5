//! Sample-based evaluation: straightness, exact W2, transport cost and
//! coupling similarity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Scalar};
use crate::odesolve::Trajectory;
use crate::rng::Rng;

/// Uniform resampling grid used by [`straightness`].
pub const STRAIGHTNESS_GRID: usize = 64;
/// Largest batch solved exactly by [`wasserstein2`].
pub const W2_MAX_POINTS: usize = 512;
/// Permutations averaged for the coupling-similarity baseline.
pub const SIMILARITY_PERMUTATIONS: usize = 16;

/// Straightness `S` of a recorded trajectory on the default grid.
pub fn straightness<T: Scalar>(traj: &Trajectory<T>) -> Result<T> {
    straightness_on_grid(traj, STRAIGHTNESS_GRID)
}

/// Mean squared deviation of the finite-difference velocity from the
/// endpoint displacement, after linear resampling onto `m` uniform
/// intervals. Time is normalised to `[0, 1]` along the span.
pub fn straightness_on_grid<T: Scalar>(traj: &Trajectory<T>, m: usize) -> Result<T> {
    if traj.states.len() < 2 || traj.times.len() != traj.states.len() {
        return Err(Error::invalid("straightness needs at least two recorded states"));
    }
    if m == 0 {
        return Err(Error::invalid("straightness grid must have at least one interval"));
    }
    let ta = traj.times[0];
    let tb = *traj.times.last().expect("non-empty");
    let span = tb - ta;
    if span == T::zero() || !span.is_finite() {
        return Err(Error::invalid("straightness of a degenerate time span"));
    }
    if traj.states.len() == 2 {
        // a single segment is a straight line
        return Ok(T::zero());
    }
    let s: Vec<T> = traj.times.iter().map(|&t| (t - ta) / span).collect();
    let x0 = traj.initial();
    let disp = traj.terminal().sub(x0);

    let mut seg = 0;
    let mut prev = x0.clone();
    let mut total = T::zero();
    let inv_h = T::from_usize_lossy(m);
    for i in 1..=m {
        let target = T::from_usize_lossy(i) / T::from_usize_lossy(m);
        let next = if i == m {
            traj.terminal().clone()
        } else {
            while seg + 2 < s.len() && s[seg + 1] < target {
                seg += 1;
            }
            let (s0, s1) = (s[seg], s[seg + 1]);
            let w = if s1 > s0 { (target - s0) / (s1 - s0) } else { T::one() };
            let w = w.max(T::zero()).min(T::one());
            let mut x = traj.states[seg].scale(T::one() - w);
            x.axpy(w, &traj.states[seg + 1]);
            x
        };
        let dev = next.sub(&prev).scale(inv_h).sub(&disp);
        total += dev.row_sq_norms().into_iter().sum::<T>() / T::from_usize_lossy(dev.rows());
        prev = next;
    }
    Ok(total / T::from_usize_lossy(m))
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn–Munkres with
/// potentials, O(n³)). Returns `assignment[row] = col`.
pub fn hungarian<T: Scalar>(cost: &Matrix<T>) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::shape("hungarian", "square cost matrix", format!("{:?}", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::NumericFault("non-finite assignment cost".into()));
    }
    // 1-based arrays; column 0 is a virtual source.
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn pairwise_sq<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(a.rows(), b.rows(), |i, j| sq_dist(a.row(i), b.row(j)))
}

/// Exact 2-Wasserstein distance between two equal-size point sets.
pub fn wasserstein2<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    a.check_same_shape(b, "wasserstein2")?;
    if a.rows() == 0 {
        return Err(Error::invalid("wasserstein2 of empty batches"));
    }
    if a.rows() > W2_MAX_POINTS {
        return Err(Error::invalid(format!(
            "wasserstein2 is exact only up to {W2_MAX_POINTS} points, got {}; use wasserstein2_blocked",
            a.rows()
        )));
    }
    let cost = pairwise_sq(a, b);
    let assignment = hungarian(&cost)?;
    let total: T = assignment.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((total / T::from_usize_lossy(a.rows())).max(T::zero()).sqrt())
}

/// W2 averaged over disjoint, near-equal blocks of at most 512 rows.
/// Identical to [`wasserstein2`] when the batch fits in one block.
pub fn wasserstein2_blocked<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    a.check_same_shape(b, "wasserstein2")?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::invalid("wasserstein2 of empty batches"));
    }
    let blocks = n.div_ceil(W2_MAX_POINTS);
    let mut acc = T::zero();
    let mut start = 0;
    for k in 0..blocks {
        let end = start + n / blocks + usize::from(k < n % blocks);
        acc += wasserstein2(&a.slice_rows(start, end), &b.slice_rows(start, end))?;
        start = end;
    }
    Ok(acc / T::from_usize_lossy(blocks))
}

/// Mean squared displacement `E‖x_to − x_from‖²`.
pub fn transport_cost<T: Scalar>(x_from: &Matrix<T>, x_to: &Matrix<T>) -> Result<T> {
    x_from.check_same_shape(x_to, "transport_cost")?;
    if x_from.rows() == 0 {
        return Err(Error::invalid("transport cost of an empty batch"));
    }
    let total: T = x_to.sub(x_from).row_sq_norms().into_iter().sum();
    Ok(total / T::from_usize_lossy(x_from.rows()))
}

/// Agreement of two deterministic noise→data maps on shared inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity<T> {
    pub mse: T,
    /// Mean over random re-pairings of `map_b`'s outputs.
    pub baseline_mse: T,
}

pub fn coupling_similarity<T, A, B>(map_a: A, map_b: B, noise: &Matrix<T>, rng: &mut Rng) -> Result<Similarity<T>>
where
    T: Scalar,
    A: Fn(&Matrix<T>) -> Result<Matrix<T>>,
    B: Fn(&Matrix<T>) -> Result<Matrix<T>>,
{
    let ya = map_a(noise)?;
    let yb = map_b(noise)?;
    compare_outputs(&ya, &yb, rng)
}

/// [`coupling_similarity`] on precomputed outputs.
pub fn compare_outputs<T: Scalar>(ya: &Matrix<T>, yb: &Matrix<T>, rng: &mut Rng) -> Result<Similarity<T>> {
    let mse = transport_cost(ya, yb)?;
    let mut baseline = T::zero();
    for _ in 0..SIMILARITY_PERMUTATIONS {
        let perm = rng.permutation(yb.rows());
        baseline += transport_cost(ya, &yb.select_rows(&perm))?;
    }
    Ok(Similarity {
        mse,
        baseline_mse: baseline / T::from_usize_lossy(SIMILARITY_PERMUTATIONS),
    })
}

/// Metrics selectable by name from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Straightness,
    W2,
    Cost,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Straightness, MetricKind::W2, MetricKind::Cost];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Straightness => "straightness",
            MetricKind::W2 => "w2",
            MetricKind::Cost => "cost",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown metric '{s}'; valid metrics: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    /// Solver steps, when the metric depends on them.
    pub steps: Option<usize>,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

/// Named scalar metrics with the sample counts and seeds that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, metric: impl Into<String>, steps: Option<usize>, value: f64, n: usize, seed: u64) -> Result<()> {
        let metric = metric.into();
        if !value.is_finite() {
            return Err(Error::NumericFault(format!("metric {metric} is not finite: {value}")));
        }
        self.rows.push(MetricRow { metric, steps, value, n, seed });
        Ok(())
    }

    pub fn get(&self, metric: &str, steps: Option<usize>) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.steps == steps).map(|r| r.value)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
