//! Measurements on agent snapshots: moments, marginal densities, survival
//! functions with log-log tail fits, and local conditional-mean profiles.
//! Also the closed-form mean-knowledge curves used as test oracles.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Agent, KnowledgeParams};

/// Block size for order-stable parallel reductions.
const REDUCE_BLOCK: usize = 1 << 15;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("tail fit needs at least {needed} samples in the top fraction, got {got}")]
    TooFewTailSamples { needed: usize, got: usize },
    #[error("tail contains a non-positive value ({0}); log-log fit undefined")]
    NonPositiveTail(f64),
    #[error("tail values are all equal; slope undefined")]
    DegenerateTail,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("histogram bins differ: {0}")]
    BinMismatch(String),
}

/// Minimum number of points in a tail fit.
pub const MIN_TAIL_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Knowledge,
    Wealth,
}

impl Axis {
    #[inline]
    pub fn of(self, a: &Agent) -> f64 {
        match self {
            Axis::Knowledge => a.x,
            Axis::Wealth => a.v,
        }
    }

    pub fn other(self) -> Axis {
        match self {
            Axis::Knowledge => Axis::Wealth,
            Axis::Wealth => Axis::Knowledge,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Knowledge => "knowledge",
            Axis::Wealth => "wealth",
        }
    }
}

/// Sample moments of a population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean_knowledge: f64,
    pub mean_wealth: f64,
    pub var_knowledge: f64,
    pub var_wealth: f64,
    /// Pearson correlation; `None` when either variance vanishes.
    pub corr_xv: Option<f64>,
}

/// Sum `f` over `items` in fixed-size blocks so the result does not depend on
/// the thread count.
fn block_sum<T: Sync, const K: usize>(items: &[T], f: impl Fn(&T) -> [f64; K] + Sync) -> [f64; K] {
    let partials: Vec<[f64; K]> = items
        .par_chunks(REDUCE_BLOCK)
        .map(|chunk| {
            let mut acc = [0.0; K];
            for item in chunk {
                let v = f(item);
                for k in 0..K {
                    acc[k] += v[k];
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; K];
    for p in partials {
        for k in 0..K {
            total[k] += p[k];
        }
    }
    total
}

/// Means, unbiased variances and the Pearson correlation of `(x, v)`.
pub fn moments(agents: &[Agent]) -> Result<Moments, StatsError> {
    let n = agents.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples { needed: 2, got: n });
    }
    let nf = n as f64;
    let [sx, sv] = block_sum(agents, |a| [a.x, a.v]);
    let (mx, mv) = (sx / nf, sv / nf);
    let [sxx, svv, sxv] = block_sum(agents, |a| {
        let (dx, dv) = (a.x - mx, a.v - mv);
        [dx * dx, dv * dv, dx * dv]
    });
    let var_x = sxx / (nf - 1.0);
    let var_v = svv / (nf - 1.0);
    // Spread at rounding level of the mean counts as constant.
    let spread = |ss: f64, m: f64| ss / nf > (1e-12 * m.abs()).powi(2) && ss > 0.0;
    let corr = if spread(sxx, mx) && spread(svv, mv) {
        Some(sxv / (sxx.sqrt() * svv.sqrt()))
    } else {
        None
    };
    Ok(Moments {
        mean_knowledge: mx,
        mean_wealth: mv,
        var_knowledge: var_x,
        var_wealth: var_v,
        corr_xv: corr,
    })
}

/// Uniform binning of `[lo, hi)`; the right edge is included in the last bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl BinSpec {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins >= 1, "at least one bin");
        assert!(hi > lo, "empty bin range [{lo}, {hi}]");
        Self { lo, hi, bins }
    }

    /// `[0, max(5, 1.05 * max sample)]`.
    pub fn auto(samples: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let max = samples.into_iter().fold(0.0f64, f64::max);
        Self::new(0.0, f64::max(5.0, 1.05 * max), bins)
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|i| self.center(i)).collect()
    }

    #[inline]
    pub fn index(&self, value: f64) -> Option<usize> {
        if !(value >= self.lo && value <= self.hi) {
            return None;
        }
        let i = ((value - self.lo) / self.width()) as usize;
        Some(i.min(self.bins - 1))
    }

    pub fn same_as(&self, other: &BinSpec) -> bool {
        self.bins == other.bins
            && (self.lo - other.lo).abs() <= 1e-12 * (1.0 + self.lo.abs())
            && (self.hi - other.hi).abs() <= 1e-12 * (1.0 + self.hi.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram1D {
    pub spec: BinSpec,
    pub counts: Vec<u64>,
    /// All samples offered, including those outside the range.
    pub total: u64,
}

impl Histogram1D {
    pub fn from_samples(samples: impl IntoIterator<Item = f64>, spec: BinSpec) -> Self {
        let mut counts = vec![0u64; spec.bins];
        let mut total = 0;
        for s in samples {
            total += 1;
            if let Some(i) = spec.index(s) {
                counts[i] += 1;
            }
        }
        Self {
            spec,
            counts,
            total,
        }
    }

    /// Samples that fell outside the range.
    pub fn overflow(&self) -> u64 {
        self.total - self.counts.iter().sum::<u64>()
    }

    /// Probability density per bin, normalized by the total sample count.
    pub fn density(&self) -> Vec<f64> {
        let norm = self.total as f64 * self.spec.width();
        self.counts.iter().map(|&c| c as f64 / norm).collect()
    }
}

/// Density-normalized marginal histogram of one coordinate.
pub fn marginal(agents: &[Agent], axis: Axis, spec: BinSpec) -> Histogram1D {
    Histogram1D::from_samples(agents.iter().map(|a| axis.of(a)), spec)
}

/// L1 distance `Σ |f - g| Δ` between two densities on identical bins.
pub fn l1_distance(a: &[f64], b: &[f64], width: f64) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::BinMismatch(format!("{} vs {} bins", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() * width)
}

/// Joint `(x, v)` histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    pub x: BinSpec,
    pub v: BinSpec,
    /// Row-major, `counts[ix * v.bins + iv]`.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram2D {
    pub fn from_agents(agents: &[Agent], x: BinSpec, v: BinSpec) -> Self {
        let mut counts = vec![0u64; x.bins * v.bins];
        for a in agents {
            if let (Some(i), Some(j)) = (x.index(a.x), v.index(a.v)) {
                counts[i * v.bins + j] += 1;
            }
        }
        Self {
            x,
            v,
            counts,
            total: agents.len() as u64,
        }
    }

    pub fn density(&self) -> Vec<f64> {
        let norm = self.total as f64 * self.x.width() * self.v.width();
        self.counts.iter().map(|&c| c as f64 / norm).collect()
    }
}

/// Empirical survival function `F̄(t) = P(X >= t)` of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TailDistribution {
    sorted: Vec<f64>,
}

impl TailDistribution {
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `P(X >= t)`, i.e. the left limit of `1 - F` at `t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        let below = self.sorted.partition_point(|&s| s < t);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }

    /// `(value, survival)` at each sorted sample point; survival at the
    /// `i`-th smallest sample is `(N - i) / N`.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.sorted.len() as f64;
        self.sorted
            .iter()
            .enumerate()
            .map(move |(i, &s)| (s, (n - i as f64) / n))
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }
}

pub fn tail_distribution(samples: &[f64]) -> TailDistribution {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    TailDistribution { sorted }
}

/// Least-squares fit of `log F̄` against `log value` on the upper tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    pub slope: f64,
    pub intercept: f64,
    pub top_fraction: f64,
    pub n_used: usize,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
}

/// `⌈fraction · n⌉`, robust to the representation error of `fraction`.
pub fn top_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

fn ols(points: &[(f64, f64)]) -> Result<(f64, f64, f64), StatsError> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if !(sxx > 0.0) {
        return Err(StatsError::DegenerateTail);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = points
        .iter()
        .map(|&(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Ok((slope, intercept, (ss / n).sqrt()))
}

/// Fit the survival tail on the largest `⌈top_fraction · N⌉` samples using
/// the rank-based survival estimate `(N - i) / N`.
pub fn tail_slope(samples: &[f64], top_fraction: f64) -> Result<TailFit, StatsError> {
    let n = samples.len();
    let k = top_count(top_fraction, n);
    if k < MIN_TAIL_SAMPLES {
        return Err(StatsError::TooFewTailSamples {
            needed: MIN_TAIL_SAMPLES,
            got: k,
        });
    }
    let mut work = samples.to_vec();
    let split = n - k;
    if split > 0 {
        work.select_nth_unstable_by(split, f64::total_cmp);
    }
    let top = &mut work[split..];
    top.sort_unstable_by(f64::total_cmp);
    if top[0] <= 0.0 {
        return Err(StatsError::NonPositiveTail(top[0]));
    }
    let nf = n as f64;
    let points: Vec<(f64, f64)> = top
        .iter()
        .enumerate()
        .map(|(j, &s)| (s.ln(), ((k - j) as f64 / nf).ln()))
        .collect();
    let (slope, intercept, residual) = ols(&points)?;
    Ok(TailFit {
        slope,
        intercept,
        top_fraction,
        n_used: k,
        residual,
    })
}

/// Tail fit for a binned density (e.g. a Fokker-Planck marginal).
///
/// Survival is evaluated at each bin's lower edge; every bin whose survival
/// lies in `(0, top_fraction]` and whose lower edge is positive enters the
/// fit.
pub fn tail_slope_binned(
    spec: &BinSpec,
    density: &[f64],
    top_fraction: f64,
) -> Result<TailFit, StatsError> {
    let w = spec.width();
    let mut survival = vec![0.0; density.len()];
    let mut acc = 0.0;
    for i in (0..density.len()).rev() {
        acc += density[i] * w;
        survival[i] = acc;
    }
    let points: Vec<(f64, f64)> = (0..density.len())
        .filter_map(|i| {
            let lo = spec.lo + i as f64 * w;
            let s = survival[i];
            (lo > 0.0 && s > 0.0 && s <= top_fraction).then(|| (lo.ln(), s.ln()))
        })
        .collect();
    if points.len() < 3 {
        return Err(StatsError::TooFewTailSamples {
            needed: 3,
            got: points.len(),
        });
    }
    let (slope, intercept, residual) = ols(&points)?;
    Ok(TailFit {
        slope,
        intercept,
        top_fraction,
        n_used: points.len(),
        residual,
    })
}

/// Local conditional means of one coordinate binned over the other.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub conditioning: Axis,
    pub spec: BinSpec,
    /// `None` marks an empty bin.
    pub means: Vec<Option<f64>>,
    pub counts: Vec<u64>,
}

impl Profile {
    pub fn centers(&self) -> Vec<f64> {
        self.spec.centers()
    }
}

/// `W(x)` (conditioning on knowledge) or `K(v)` (conditioning on wealth).
pub fn local_profile(agents: &[Agent], conditioning: Axis, spec: BinSpec) -> Profile {
    let target = conditioning.other();
    let mut sums = vec![0.0; spec.bins];
    let mut counts = vec![0u64; spec.bins];
    for a in agents {
        if let Some(i) = spec.index(conditioning.of(a)) {
            sums[i] += target.of(a);
            counts[i] += 1;
        }
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Profile {
        conditioning,
        spec,
        means,
        counts,
    }
}

/// `M_K(t) = M_K(0) e^{-λt} + (λ_B M / λ)(1 - e^{-λt})` for constant rates.
pub fn analytic_mean_knowledge(t: f64, mk0: f64, lambda: f64, lambda_b: f64, background_mean: f64) -> f64 {
    let decay = (-lambda * t).exp();
    mk0 * decay + lambda_b * background_mean / lambda * (1.0 - decay)
}

/// Upper bound `λ̄ M / λ_-` on the long-time mean knowledge.
pub fn mean_knowledge_bound(kp: &KnowledgeParams) -> f64 {
    kp.lambda_bar * kp.background.mean() / kp.lambda_minus
}
