//! Conservative finite-volume solver for the limit Fokker-Planck equation
//!
//! ```text
//! ∂h/∂τ = ∂x[ ∂x(d_x h) + a_x h ] + ∂v[ ∂v(d_v h) + a_v h ]
//! d_x = δ x² / 2,          a_x = x λ(x) - λ_B(x) M
//! d_v = σ Φ(x)² v² / 2,    a_v = γ (Ψ(x) v - M_W)
//! ```
//!
//! on the box `[0, x_max] × [0, v_max]` with zero flux through every side.
//!
//! Each face flux `J = d ∂h + (a + ∂d) h` uses exponential fitting
//! (Scharfetter-Gummel / Chang-Cooper weights), which reduces to the centered
//! diffusive flux when drift is negligible and to the upwind drift flux when
//! diffusion is negligible. The explicit update is a sum of face fluxes, so
//! mass changes only by rounding, and it is positivity preserving whenever
//! `dτ` is below the advertised bound.

use rayon::prelude::*;
use thiserror::Error;

use crate::boltzmann::{InitSpec, KnowledgeInit, WealthInit};
use crate::model::{ModelError, ModelParams};
use crate::stats::BinSpec;

/// Safety factor applied to the positivity limit of the explicit step.
pub const STABILITY_SAFETY: f64 = 0.9;

#[derive(Debug, Error)]
pub enum FpError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("time step {dtau} exceeds the stability bound {bound}")]
    Unstable { dtau: f64, bound: f64 },
    #[error("field does not match the grid ({got} values, expected {expected})")]
    Shape { got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub x_max: f64,
    pub v_max: f64,
    pub nx: usize,
    pub nv: usize,
}

impl Default for Grid2D {
    fn default() -> Self {
        Self {
            x_max: 10.0,
            v_max: 10.0,
            nx: 200,
            nv: 200,
        }
    }
}

impl Grid2D {
    pub const MIN_CELLS: usize = 16;

    pub fn new(x_max: f64, v_max: f64, nx: usize, nv: usize) -> Result<Self, FpError> {
        if nx < Self::MIN_CELLS || nv < Self::MIN_CELLS {
            return Err(FpError::Grid(format!(
                "{nx}x{nv} cells; at least {} per axis required",
                Self::MIN_CELLS
            )));
        }
        if !(x_max > 0.0 && v_max > 0.0 && x_max.is_finite() && v_max.is_finite()) {
            return Err(FpError::Grid(format!(
                "domain bounds x_max = {x_max}, v_max = {v_max} must be positive"
            )));
        }
        Ok(Self {
            x_max,
            v_max,
            nx,
            nv,
        })
    }

    pub fn dx(&self) -> f64 {
        self.x_max / self.nx as f64
    }

    pub fn dv(&self) -> f64 {
        self.v_max / self.nv as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dv()
    }

    pub fn x_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    pub fn v_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dv()
    }

    pub fn len(&self) -> usize {
        self.nx * self.nv
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_bins(&self) -> BinSpec {
        BinSpec::new(0.0, self.x_max, self.nx)
    }

    pub fn v_bins(&self) -> BinSpec {
        BinSpec::new(0.0, self.v_max, self.nv)
    }
}

/// Cell averages of the density `h(x, v, τ)`, row-major in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    pub grid: Grid2D,
    /// `values[i * nv + j]` is the average over cell `(x_i, v_j)`.
    pub values: Vec<f64>,
    pub tau: f64,
}

/// Mass per cell for a one-dimensional initial law.
fn cell_masses_1d(n: usize, width: f64, law: OneDimLaw) -> Vec<f64> {
    let mut m = vec![0.0; n];
    match law {
        OneDimLaw::Point(c) => {
            // Linear sharing between the two nearest centers keeps the mean exact.
            let s = c / width - 0.5;
            if s <= 0.0 {
                m[0] = 1.0;
            } else if s >= (n - 1) as f64 {
                m[n - 1] = 1.0;
            } else {
                let k = s.floor() as usize;
                let frac = s - k as f64;
                m[k] = 1.0 - frac;
                m[k + 1] = frac;
            }
        }
        OneDimLaw::Uniform(upper) => {
            for (i, slot) in m.iter_mut().enumerate() {
                let (lo, hi) = (i as f64 * width, (i + 1) as f64 * width);
                let overlap = (hi.min(upper) - lo).max(0.0);
                *slot = overlap / upper;
            }
            let total: f64 = m.iter().sum();
            m.iter_mut().for_each(|v| *v /= total);
        }
    }
    m
}

#[derive(Debug, Clone, Copy)]
enum OneDimLaw {
    Point(f64),
    Uniform(f64),
}

impl Field2D {
    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            tau: 0.0,
        }
    }

    pub fn from_values(grid: Grid2D, values: Vec<f64>) -> Result<Self, FpError> {
        if values.len() != grid.len() {
            return Err(FpError::Shape {
                got: values.len(),
                expected: grid.len(),
            });
        }
        Ok(Self {
            grid,
            values,
            tau: 0.0,
        })
    }

    /// Product of the particle solver's initial marginals, with wealth
    /// normalized to mean one.
    pub fn from_init(grid: Grid2D, init: &InitSpec) -> Self {
        let kx = match init.knowledge {
            KnowledgeInit::AllEqual { value } => OneDimLaw::Point(value),
            KnowledgeInit::Uniform { upper } => OneDimLaw::Uniform(upper),
        };
        let kv = match init.wealth {
            WealthInit::AllEqual { .. } => OneDimLaw::Point(1.0),
            WealthInit::Uniform { .. } => OneDimLaw::Uniform(2.0),
        };
        let mx = cell_masses_1d(grid.nx, grid.dx(), kx);
        let mv = cell_masses_1d(grid.nv, grid.dv(), kv);
        let area = grid.cell_area();
        let mut values = vec![0.0; grid.len()];
        for i in 0..grid.nx {
            for j in 0..grid.nv {
                values[i * grid.nv + j] = mx[i] * mv[j] / area;
            }
        }
        Self {
            grid,
            values,
            tau: 0.0,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.nv + j]
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn weighted(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let g = &self.grid;
        let mut total = 0.0;
        for i in 0..g.nx {
            let x = g.x_center(i);
            let row = &self.values[i * g.nv..(i + 1) * g.nv];
            for (j, &h) in row.iter().enumerate() {
                total += f(x, g.v_center(j)) * h;
            }
        }
        total * g.cell_area()
    }

    pub fn mean_wealth(&self) -> f64 {
        self.weighted(|_, v| v)
    }

    pub fn mean_knowledge(&self) -> f64 {
        self.weighted(|x, _| x)
    }

    /// Knowledge marginal, one density value per x-cell.
    pub fn marginal_x(&self) -> Vec<f64> {
        let g = &self.grid;
        (0..g.nx)
            .map(|i| self.values[i * g.nv..(i + 1) * g.nv].iter().sum::<f64>() * g.dv())
            .collect()
    }

    /// Wealth marginal, one density value per v-cell.
    pub fn marginal_v(&self) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; g.nv];
        for i in 0..g.nx {
            for (j, slot) in out.iter_mut().enumerate() {
                *slot += self.values[i * g.nv + j];
            }
        }
        out.iter_mut().for_each(|v| *v *= g.dx());
        out
    }

    /// Mass in the outermost tenth of each axis, `(x strip, v strip)`; large
    /// values mean the box truncates the tails.
    pub fn boundary_mass(&self) -> (f64, f64) {
        let g = &self.grid;
        let (sx, sv) = (g.nx - g.nx / 10, g.nv - g.nv / 10);
        let mut mx = 0.0;
        let mut mv = 0.0;
        for i in 0..g.nx {
            for j in 0..g.nv {
                let h = self.values[i * g.nv + j];
                if i >= sx {
                    mx += h;
                }
                if j >= sv {
                    mv += h;
                }
            }
        }
        (mx * g.cell_area(), mv * g.cell_area())
    }
}

/// Average a piecewise-constant density given on `source` cells over the bins
/// of `target`.
pub fn rebin(source: &BinSpec, density: &[f64], target: &BinSpec) -> Vec<f64> {
    let sw = source.width();
    let tw = target.width();
    (0..target.bins)
        .map(|k| {
            let (lo, hi) = (target.lo + k as f64 * tw, target.lo + (k + 1) as f64 * tw);
            let first = (((lo - source.lo) / sw).floor().max(0.0)) as usize;
            let mut mass = 0.0;
            for (i, &d) in density.iter().enumerate().skip(first) {
                let (a, b) = (source.lo + i as f64 * sw, source.lo + (i + 1) as f64 * sw);
                if a >= hi {
                    break;
                }
                let overlap = b.min(hi) - a.max(lo);
                if overlap > 0.0 {
                    mass += d * overlap;
                }
            }
            mass / tw
        })
        .collect()
}

/// Drift and diffusion coefficients at `(x, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpCoefficients {
    pub a_x: f64,
    pub a_v: f64,
    pub d_x: f64,
    pub d_v: f64,
}

pub fn fp_coefficients(x: f64, v: f64, mp: &ModelParams, m_w: f64) -> FpCoefficients {
    let k = &mp.knowledge;
    let t = &mp.trade;
    let phi = t.phi.eval(x);
    FpCoefficients {
        a_x: x * k.lambda.eval(x) - k.lambda_b.eval(x) * k.background.mean(),
        a_v: t.gamma * (t.psi.eval(x) * v - m_w),
        d_x: 0.5 * k.delta * x * x,
        d_v: 0.5 * t.sigma() * phi * phi * v * v,
    }
}

/// `M_W = ∬ w Ψ(y) h(y, w) dy dw` by the midpoint rule.
pub fn compute_mw(h: &Field2D, mp: &ModelParams) -> f64 {
    let psi = mp.trade.psi;
    h.weighted(|x, v| v * psi.eval(x))
}

/// Which limit equation to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Equation {
    /// `M_W(τ)` recomputed from the current density every step.
    #[default]
    General,
    /// `M_W` frozen at its initial value.
    ConstantMean,
}

/// `B(z) = z / (e^z - 1)`.
#[inline]
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-10 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Weights `(c_plus, c_minus)` of the face flux `J = c_plus h_right - c_minus h_left`
/// for `J = d ∂h + b h`, divided by the cell width.
#[inline]
fn face_weights(d: f64, b: f64, width: f64) -> (f64, f64) {
    if d > 0.0 {
        let pe = b * width / d;
        let s = d / (width * width);
        (s * bernoulli(-pe), s * bernoulli(pe))
    } else {
        (b.max(0.0) / width, (-b).max(0.0) / width)
    }
}

/// Precomputed face weights for one reference value of `M_W`.
///
/// A departure `c` of the wealth mean field from the reference enters the
/// step as an extra upwind drift `-γ c h` through every interior v-face.
#[derive(Debug, Clone)]
pub struct FpOperator {
    grid: Grid2D,
    gamma: f64,
    /// x-faces `0..=nx`; the two boundary faces carry zero weight.
    xp: Vec<f64>,
    xm: Vec<f64>,
    /// v-faces per row, `row * (nv + 1) + face`.
    vp: Vec<f64>,
    vm: Vec<f64>,
    m_w: f64,
    max_rate: f64,
}

impl FpOperator {
    pub fn new(grid: Grid2D, mp: &ModelParams, m_w: f64) -> Self {
        let (nx, nv) = (grid.nx, grid.nv);
        let dx = grid.dx();
        let k = &mp.knowledge;
        let background_mean = k.background.mean();

        let mut xp = vec![0.0; nx + 1];
        let mut xm = vec![0.0; nx + 1];
        for f in 1..nx {
            let x = f as f64 * dx;
            let d = 0.5 * k.delta * x * x;
            let a = x * k.lambda.eval(x) - k.lambda_b.eval(x) * background_mean;
            let (p, m) = face_weights(d, a + k.delta * x, dx);
            xp[f] = p;
            xm[f] = m;
        }

        let mut op = Self {
            grid,
            gamma: mp.trade.gamma,
            xp,
            xm,
            vp: vec![0.0; nx * (nv + 1)],
            vm: vec![0.0; nx * (nv + 1)],
            m_w,
            max_rate: 0.0,
        };
        op.set_reference(mp, m_w);
        op
    }

    /// Rebuild the v-face weights around a new reference `M_W`.
    pub fn set_reference(&mut self, mp: &ModelParams, m_w: f64) {
        let grid = self.grid;
        let (nx, nv) = (grid.nx, grid.nv);
        let dv = grid.dv();
        let t = &mp.trade;
        let stride = nv + 1;
        self.vp
            .par_chunks_mut(stride)
            .zip(self.vm.par_chunks_mut(stride))
            .enumerate()
            .for_each(|(i, (rp, rm))| {
                let x = grid.x_center(i);
                let phi = t.phi.eval(x);
                let psi = t.psi.eval(x);
                let diff = t.sigma() * phi * phi;
                for f in 1..nv {
                    let v = f as f64 * dv;
                    let d = 0.5 * diff * v * v;
                    let a = t.gamma * (psi * v - m_w);
                    let (p, m) = face_weights(d, a + diff * v, dv);
                    rp[f] = p;
                    rm[f] = m;
                }
            });

        let mut max_rate = 0.0f64;
        for i in 0..nx {
            let rx = self.xm[i + 1] + self.xp[i];
            let row = i * stride;
            for j in 0..nv {
                let rate = rx + self.vm[row + j + 1] + self.vp[row + j];
                max_rate = max_rate.max(rate);
            }
        }
        self.m_w = m_w;
        self.max_rate = max_rate;
    }

    /// Reference `M_W` the face weights were built for.
    pub fn m_w(&self) -> f64 {
        self.m_w
    }

    /// Largest admissible `dτ` at zero shift: `0.9 / max_cell(outflow rate)`.
    pub fn stability_bound(&self) -> f64 {
        self.stability_bound_with(0.0)
    }

    /// Largest admissible `dτ` when the mean field is shifted by `shift`.
    pub fn stability_bound_with(&self, shift: f64) -> f64 {
        let rate = self.max_rate + self.gamma * shift.abs() / self.grid.dv();
        if rate > 0.0 {
            STABILITY_SAFETY / rate
        } else {
            f64::INFINITY
        }
    }

    /// Mean-field shift that makes the net flux through the v-faces vanish,
    /// so that the grid mean wealth is conserved by the step.
    pub fn balancing_shift(&self, h: &[f64]) -> f64 {
        let g = self.grid;
        let (nx, nv) = (g.nx, g.nv);
        let stride = nv + 1;
        if self.gamma == 0.0 {
            return 0.0;
        }
        // net = Σ_faces J / Δv, low = Σ h_left, high = Σ h_right over interior faces
        let mut net = 0.0;
        let mut low = 0.0;
        let mut high = 0.0;
        for i in 0..nx {
            let row = &h[i * nv..(i + 1) * nv];
            let vp = &self.vp[i * stride..(i + 1) * stride];
            let vm = &self.vm[i * stride..(i + 1) * stride];
            for j in 0..nv {
                net += (vp[j] - vm[j + 1]) * row[j];
            }
            let row_sum: f64 = row.iter().sum();
            low += row_sum - row[nv - 1];
            high += row_sum - row[0];
        }
        let weight = if net > 0.0 { low } else { high };
        if weight > 0.0 {
            net * g.dv() / (self.gamma * weight)
        } else {
            0.0
        }
    }

    /// Write `h + dτ L h` into `out` and return `Σ |out - h|` over cells.
    pub fn apply(&self, h: &[f64], dtau: f64, out: &mut [f64]) -> Result<f64, FpError> {
        self.apply_shifted(h, dtau, 0.0, out)
    }

    /// As [`apply`](Self::apply) with the wealth mean field moved by `shift`.
    pub fn apply_shifted(
        &self,
        h: &[f64],
        dtau: f64,
        shift: f64,
        out: &mut [f64],
    ) -> Result<f64, FpError> {
        let bound = self.stability_bound_with(shift);
        if dtau > bound * (1.0 + 1e-12) {
            return Err(FpError::Unstable { dtau, bound });
        }
        let g = self.grid;
        let (nx, nv) = (g.nx, g.nv);
        if h.len() != g.len() || out.len() != g.len() {
            return Err(FpError::Shape {
                got: h.len().min(out.len()),
                expected: g.len(),
            });
        }
        let stride = nv + 1;
        let extra_p = (-self.gamma * shift).max(0.0) / g.dv();
        let extra_m = (self.gamma * shift).max(0.0) / g.dv();
        let changes: Vec<f64> = out
            .par_chunks_mut(nv)
            .enumerate()
            .map(|(i, row_out)| {
                let row = &h[i * nv..(i + 1) * nv];
                let prev = (i > 0).then(|| &h[(i - 1) * nv..i * nv]);
                let next = (i + 1 < nx).then(|| &h[(i + 1) * nv..(i + 2) * nv]);
                let (xp_lo, xm_lo) = (self.xp[i], self.xm[i]);
                let (xp_hi, xm_hi) = (self.xp[i + 1], self.xm[i + 1]);
                let vp = &self.vp[i * stride..(i + 1) * stride];
                let vm = &self.vm[i * stride..(i + 1) * stride];
                let mut change = 0.0;
                let mut j_lo = 0.0;
                for j in 0..nv {
                    let hc = row[j];
                    let j_hi = if j + 1 < nv {
                        (vp[j + 1] + extra_p) * row[j + 1] - (vm[j + 1] + extra_m) * hc
                    } else {
                        0.0
                    };
                    let jx_hi = match next {
                        Some(n) => xp_hi * n[j] - xm_hi * hc,
                        None => 0.0,
                    };
                    let jx_lo = match prev {
                        Some(p) => xp_lo * hc - xm_lo * p[j],
                        None => 0.0,
                    };
                    let delta = dtau * ((jx_hi - jx_lo) + (j_hi - j_lo));
                    row_out[j] = hc + delta;
                    change += delta.abs();
                    j_lo = j_hi;
                }
                change
            })
            .collect();
        Ok(changes.iter().sum())
    }
}

/// One explicit step of length `dtau`.
pub fn fp_step(h: &Field2D, mp: &ModelParams, dtau: f64, m_w: f64) -> Result<Field2D, FpError> {
    let op = FpOperator::new(h.grid, mp, m_w);
    let mut out = vec![0.0; h.values.len()];
    op.apply(&h.values, dtau, &mut out)?;
    Ok(Field2D {
        grid: h.grid,
        values: out,
        tau: h.tau + dtau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpRecord {
    pub tau: f64,
    pub mass: f64,
    pub mean_wealth: f64,
    pub mean_knowledge: f64,
    /// `Σ |Δh| ΔxΔv / Δτ` over the latest step.
    pub l1_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpDiagnostics {
    pub records: Vec<FpRecord>,
    pub steps: u64,
    /// Stopped because the L1 rate fell below the tolerance.
    pub stationary: bool,
    /// Stability bound at the start of the run.
    pub dtau_bound: f64,
    pub initial_mass: f64,
    pub min_value: f64,
    pub boundary_mass: (f64, f64),
}

impl FpDiagnostics {
    pub fn max_mass_drift(&self) -> f64 {
        self.records
            .iter()
            .map(|r| (r.mass - self.initial_mass).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpRunOptions {
    pub t_final: f64,
    /// Stationarity threshold on the L1 rate; `0` disables the check.
    pub tol: f64,
    pub equation: Equation,
    /// Spacing of diagnostic records in τ.
    pub record_interval: f64,
    /// Stop after this many steps regardless of τ.
    pub max_steps: Option<u64>,
}

impl Default for FpRunOptions {
    fn default() -> Self {
        Self {
            t_final: 100.0,
            tol: 1e-4,
            equation: Equation::General,
            record_interval: 1.0,
            max_steps: None,
        }
    }
}

/// Relative mean-field shift that triggers a rebuild of the v-face weights.
const MW_REFRESH: f64 = 1e-3;
/// Any nonzero shift is folded into the weights at least this often.
const MW_REFRESH_STEPS: u64 = 1000;

/// Move the reference `M_W` to the root of the balancing shift (secant
/// iteration); returns the remaining shift.
fn recenter(op: &mut FpOperator, mp: &ModelParams, h: &[f64]) -> f64 {
    let (mut r0, mut s0) = (op.m_w(), op.balancing_shift(h));
    if s0 == 0.0 {
        return 0.0;
    }
    let mut r1 = r0 + s0;
    op.set_reference(mp, r1);
    let mut s1 = op.balancing_shift(h);
    for _ in 0..30 {
        if s1.abs() <= 1e-14 * r1.abs().max(1.0) || s1 == s0 {
            break;
        }
        let r2 = r1 - s1 * (r1 - r0) / (s1 - s0);
        (r0, s0) = (r1, s1);
        r1 = r2;
        op.set_reference(mp, r1);
        s1 = op.balancing_shift(h);
    }
    s1
}

/// Integrate from `init` until `τ = t_final`, stationarity, or `max_steps`.
pub fn fp_run(
    mp: &ModelParams,
    init: Field2D,
    opts: &FpRunOptions,
) -> Result<(Field2D, FpDiagnostics), FpError> {
    let mp = mp.validated()?;
    let grid = init.grid;
    let initial_mass = init.mass();
    let mut h = init;
    let mut scratch = vec![0.0; h.values.len()];

    let mut op = FpOperator::new(grid, &mp, compute_mw(&h, &mp));
    if opts.equation == Equation::General {
        recenter(&mut op, &mp, &h.values);
    }
    let dtau_bound = op.stability_bound();
    let mut last_rebuild = 0u64;

    let record = |h: &Field2D, l1_rate: f64| FpRecord {
        tau: h.tau,
        mass: h.mass(),
        mean_wealth: h.mean_wealth(),
        mean_knowledge: h.mean_knowledge(),
        l1_rate,
    };
    let mut records = vec![record(&h, f64::NAN)];
    let mut next_record = opts.record_interval;
    let mut steps = 0u64;
    let mut stationary = false;
    let area = grid.cell_area();
    let tau_end = h.tau + opts.t_final;

    while h.tau < tau_end - 1e-12 && opts.max_steps.is_none_or(|m| steps < m) {
        // The general equation's mean field is the value that balances the
        // discrete wealth flux; the frozen variant keeps its initial value.
        let mut shift = 0.0;
        if opts.equation == Equation::General {
            shift = op.balancing_shift(&h.values);
            let scale = op.m_w().abs().max(1.0);
            let stale = steps - last_rebuild >= MW_REFRESH_STEPS && shift.abs() > 1e-14 * scale;
            if shift.abs() > MW_REFRESH * scale || stale {
                shift = recenter(&mut op, &mp, &h.values);
                last_rebuild = steps;
            }
        }
        let dtau = op.stability_bound_with(shift).min(tau_end - h.tau);
        let change = op.apply_shifted(&h.values, dtau, shift, &mut scratch)?;
        std::mem::swap(&mut h.values, &mut scratch);
        h.tau = if tau_end - (h.tau + dtau) < 1e-12 {
            tau_end
        } else {
            h.tau + dtau
        };
        steps += 1;
        let l1_rate = change * area / dtau;

        let done_time = h.tau >= tau_end - 1e-12;
        if opts.tol > 0.0 && l1_rate < opts.tol {
            stationary = true;
        }
        if h.tau >= next_record - 1e-12 || stationary || done_time {
            records.push(record(&h, l1_rate));
            let passed = ((h.tau + 1e-12) / opts.record_interval).floor();
            next_record = next_record.max((passed + 1.0) * opts.record_interval);
        }
        if stationary {
            break;
        }
    }
    if records.last().is_some_and(|r| r.tau != h.tau) {
        records.push(record(&h, f64::NAN));
    }

    let diagnostics = FpDiagnostics {
        records,
        steps,
        stationary,
        dtau_bound,
        initial_mass,
        min_value: h.min(),
        boundary_mass: h.boundary_mass(),
    };
    Ok((h, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackgroundSpec, FunctionSpec, KnowledgeParams, TradeParams};
    use approx::assert_abs_diff_eq;

    fn params(lambda: f64, gamma: f64, sigma: f64, delta: f64, psi: FunctionSpec) -> ModelParams {
        ModelParams {
            knowledge: KnowledgeParams::new(
                FunctionSpec::constant(lambda),
                FunctionSpec::constant(lambda),
                delta,
                BackgroundSpec::Uniform { upper: 2.0 },
            ),
            trade: TradeParams::from_sigma(gamma, sigma, psi, FunctionSpec::power_law(2.0)),
        }
    }

    fn small_grid() -> Grid2D {
        Grid2D::new(10.0, 10.0, 40, 40).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid2D::new(10.0, 10.0, 15, 200).is_err());
        assert!(Grid2D::new(0.0, 10.0, 20, 20).is_err());
        let g = Grid2D::default();
        assert_eq!((g.nx, g.nv), (200, 200));
        assert_abs_diff_eq!(g.dx(), 0.05);
    }

    #[test]
    fn coefficient_examples() {
        let mp = params(0.01, 0.1, 0.1, 0.05, FunctionSpec::constant(1.0));
        let c = fp_coefficients(0.0, 0.0, &mp, 1.3);
        assert_abs_diff_eq!(c.a_x, -0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(c.a_v, -0.13, epsilon = 1e-15);
        assert_eq!(c.d_x, 0.0);
        assert_eq!(c.d_v, 0.0);

        let c = fp_coefficients(1.0, 2.0, &mp, 1.0);
        assert_abs_diff_eq!(c.a_x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.a_v, 0.1 * (2.0 - 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(c.d_v, 0.5 * 0.1 * 0.0625 * 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.d_x, 0.025, epsilon = 1e-15);
    }

    #[test]
    fn bernoulli_limits() {
        assert_eq!(bernoulli(0.0), 1.0);
        assert_abs_diff_eq!(bernoulli(1e-6), 1e-6 / (1e-6f64).exp_m1(), epsilon = 1e-14);
        assert_abs_diff_eq!(bernoulli(-30.0), 30.0, epsilon = 1e-9);
        assert!(bernoulli(800.0) < 1e-300);
        // B(-z) = z + B(z)
        for z in [-3.0, -0.2, 0.7, 5.0] {
            assert_abs_diff_eq!(bernoulli(-z), z + bernoulli(z), epsilon = 1e-12);
        }
    }

    #[test]
    fn face_weights_limits() {
        let (p, m) = face_weights(1.0, 0.0, 0.1);
        assert_abs_diff_eq!(p, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m, 100.0, epsilon = 1e-9);
        // Pure drift: upwind.
        assert_eq!(face_weights(0.0, 2.0, 0.5), (4.0, 0.0));
        assert_eq!(face_weights(0.0, -2.0, 0.5), (0.0, 4.0));
        // Vanishing diffusion approaches the upwind limit.
        let (p, m) = face_weights(1e-12, 2.0, 0.5);
        assert_abs_diff_eq!(p, 4.0, epsilon = 1e-9);
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn mw_quadrature() {
        let g = small_grid();
        let mp = params(0.1, 0.1, 0.1, 0.05, FunctionSpec::constant(1.0));
        let h = Field2D::from_init(
            g,
            &InitSpec {
                wealth: WealthInit::Uniform { mean: 1.0 },
                knowledge: KnowledgeInit::Uniform { upper: 1.0 },
            },
        );
        assert_abs_diff_eq!(compute_mw(&h, &mp), h.mean_wealth(), epsilon = 1e-14);
        assert_abs_diff_eq!(h.mean_wealth(), 1.0, epsilon = 1e-12);

        // Single spike at the center of cell (i, j).
        let mut spike = Field2D::zeros(g);
        let (i, j) = (7, 13);
        spike.values[i * g.nv + j] = 1.0 / g.cell_area();
        let mp = params(0.1, 0.1, 0.1, 0.05, FunctionSpec::power_law(2.0));
        assert_abs_diff_eq!(
            compute_mw(&spike, &mp),
            FunctionSpec::power_law(2.0).eval(g.x_center(i)) * g.v_center(j),
            epsilon = 1e-12
        );
    }

    #[test]
    fn mw_quadrature_converges_at_second_order() {
        // Uniform density on [0, 2]² with Ψ = (1 + y)^-2:
        // ∫₀² (1+y)^-2 / 2 dy · ∫₀² w / 2 dw = (1/3) · 1.
        let mp = params(0.1, 0.1, 0.1, 0.05, FunctionSpec::power_law(2.0));
        let err = |n: usize| {
            let g = Grid2D::new(2.0, 2.0, n, n).unwrap();
            let h = Field2D::from_values(g, vec![0.25; g.len()]).unwrap();
            (compute_mw(&h, &mp) - 1.0 / 3.0).abs()
        };
        let (e1, e2) = (err(32), err(64));
        assert!(e1 < 1e-3, "{e1}");
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn zero_coefficients_leave_field_unchanged() {
        let mut mp = params(0.1, 0.1, 0.0, 0.0, FunctionSpec::constant(1.0));
        mp.knowledge.lambda = FunctionSpec::constant(0.0);
        mp.knowledge.lambda_b = FunctionSpec::constant(0.0);
        mp.trade.gamma = 0.0;
        let h = Field2D::from_init(small_grid(), &InitSpec::default());
        let next = fp_step(&h, &mp, 0.5, 1.0).unwrap();
        assert_eq!(next.values, h.values);
    }

    #[test]
    fn step_conserves_mass_and_positivity() {
        let mp = params(0.1, 0.1, 0.1, 0.05, FunctionSpec::power_law(2.0));
        let mut h = Field2D::from_init(small_grid(), &InitSpec::default());
        let m0 = h.mass();
        for _ in 0..200 {
            let m_w = compute_mw(&h, &mp);
            let dtau = FpOperator::new(h.grid, &mp, m_w).stability_bound();
            h = fp_step(&h, &mp, dtau, m_w).unwrap();
            assert!((h.mass() - m0).abs() <= 1e-12);
            assert!(h.min() >= 0.0);
        }
    }

    #[test]
    fn refuses_unstable_step() {
        let mp = params(0.1, 0.1, 0.1, 0.05, FunctionSpec::constant(1.0));
        let h = Field2D::from_init(small_grid(), &InitSpec::default());
        let op = FpOperator::new(h.grid, &mp, 1.0);
        let err = fp_step(&h, &mp, 1.5 * op.stability_bound(), 1.0).unwrap_err();
        assert!(matches!(err, FpError::Unstable { .. }));
    }

    #[test]
    fn pure_knowledge_mean_follows_exact_relaxation() {
        // σ = γ = 0 decouples knowledge; its mean obeys dM/dτ = -λ M + λ_B M_bg.
        let mut mp = params(0.1, 0.1, 0.0, 0.05, FunctionSpec::constant(1.0));
        mp.trade.gamma = 0.0;
        mp.trade.risk = 0.0;
        let grid = Grid2D::new(20.0, 2.0, 400, 16).unwrap();
        let init = Field2D::from_init(
            grid,
            &InitSpec {
                wealth: WealthInit::AllEqual { value: 1.0 },
                knowledge: KnowledgeInit::AllEqual { value: 0.5 },
            },
        );
        let mk0 = init.mean_knowledge();
        let opts = FpRunOptions {
            t_final: 10.0,
            tol: 0.0,
            equation: Equation::ConstantMean,
            record_interval: 1.0,
            max_steps: None,
        };
        // `fp_run` validates; γ = 0 is outside the trade range, so drive the
        // operator by hand.
        let op = FpOperator::new(grid, &mp, 1.0);
        let mut h = init;
        let mut scratch = vec![0.0; h.values.len()];
        let dtau = op.stability_bound();
        while h.tau < opts.t_final - 1e-12 {
            let dt = dtau.min(opts.t_final - h.tau);
            op.apply(&h.values, dt, &mut scratch).unwrap();
            std::mem::swap(&mut h.values, &mut scratch);
            h.tau += dt;
        }
        let exact = crate::stats::analytic_mean_knowledge(10.0, mk0, 0.1, 0.1, 1.0);
        assert!(
            (h.mean_knowledge() - exact).abs() < 2e-3,
            "{} vs {exact}",
            h.mean_knowledge()
        );
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let mp = params(0.1, 0.1, 0.1, 0.05, FunctionSpec::constant(1.0));
        let grid = Grid2D::new(10.0, 10.0, 32, 32).unwrap();
        let init = Field2D::from_init(grid, &InitSpec::default());
        let opts = FpRunOptions {
            t_final: 400.0,
            tol: 1e-9,
            equation: Equation::General,
            ..FpRunOptions::default()
        };
        let (settled, d) = fp_run(&mp, init, &opts).unwrap();
        assert!(d.stationary, "did not settle");
        let again = fp_run(
            &mp,
            settled,
            &FpRunOptions {
                tol: 1e-8,
                ..opts
            },
        )
        .unwrap()
        .1;
        assert!(again.stationary);
        assert_eq!(again.steps, 1);
    }

    #[test]
    fn general_equation_conserves_mean_wealth() {
        let mp = params(0.1, 0.1, 0.1, 0.05, FunctionSpec::power_law(2.0));
        let init = Field2D::from_init(small_grid(), &InitSpec::default());
        let opts = FpRunOptions {
            t_final: 20.0,
            tol: 0.0,
            ..FpRunOptions::default()
        };
        let (h, d) = fp_run(&mp, init, &opts).unwrap();
        assert!(d.records.iter().all(|r| (r.mean_wealth - 1.0).abs() < 1e-12));
        assert!(d.max_mass_drift() < 1e-12);
        assert!(h.min() >= 0.0);
        assert_abs_diff_eq!(h.tau, 20.0);
    }

    #[test]
    fn rebin_preserves_mass() {
        let src = BinSpec::new(0.0, 10.0, 200);
        let density: Vec<f64> = (0..200).map(|i| (i % 7) as f64 * 0.01).collect();
        let total: f64 = density.iter().sum::<f64>() * src.width();
        let dst = BinSpec::new(0.0, 10.0, 100);
        let r = rebin(&src, &density, &dst);
        assert_abs_diff_eq!(r.iter().sum::<f64>() * dst.width(), total, epsilon = 1e-12);
        assert_abs_diff_eq!(r[0], 0.5 * (density[0] + density[1]), epsilon = 1e-15);
        let odd = BinSpec::new(0.0, 10.0, 33);
        let r = rebin(&src, &density, &odd);
        assert_abs_diff_eq!(r.iter().sum::<f64>() * odd.width(), total, epsilon = 1e-12);
    }

    #[test]
    fn point_init_keeps_mean() {
        let g = Grid2D::default();
        let h = Field2D::from_init(
            g,
            &InitSpec {
                wealth: WealthInit::AllEqual { value: 5.0 },
                knowledge: KnowledgeInit::AllEqual { value: 0.73 },
            },
        );
        assert_abs_diff_eq!(h.mass(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h.mean_wealth(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h.mean_knowledge(), 0.73, epsilon = 1e-12);
    }
}
