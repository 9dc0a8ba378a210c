//! Analysis artifacts shared by particle snapshots and Fokker-Planck fields:
//! marginals, log-log tails with fits, local mean profiles and a summary.

use std::path::Path;

use kinwealth_core::fokker_planck::rebin;
use kinwealth_core::stats::{
    self, local_profile, marginal, tail_distribution, tail_slope, tail_slope_binned, StatsError,
};
use kinwealth_core::{Agent, Axis, BinSpec, Field2D, Moments, TailFit};

use crate::config::AnalysisSection;
use crate::output::{fmt_f64, fmt_opt, write_csv};
use crate::CliError;

pub const MARGINAL_KNOWLEDGE: &str = "marginal_knowledge.csv";
pub const MARGINAL_WEALTH: &str = "marginal_wealth.csv";
pub const TAILFIT: &str = "tailfit.csv";
pub const SUMMARY: &str = "summary.csv";

pub fn marginal_file(axis: Axis) -> &'static str {
    match axis {
        Axis::Knowledge => MARGINAL_KNOWLEDGE,
        Axis::Wealth => MARGINAL_WEALTH,
    }
}

#[derive(Debug, Clone)]
pub struct Marginal {
    pub axis: Axis,
    pub spec: BinSpec,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProfileOut {
    /// File stem: `profile_W` (mean wealth given knowledge) or `profile_K`.
    pub name: &'static str,
    pub spec: BinSpec,
    pub means: Vec<Option<f64>>,
    /// Agents per bin; absent for densities.
    pub counts: Option<Vec<u64>>,
}

#[derive(Debug)]
pub struct Analysis {
    pub marginals: Vec<Marginal>,
    /// `(axis, [(log value, log survival)])`.
    pub tails: Vec<(Axis, Vec<(f64, f64)>)>,
    pub fits: Vec<(Axis, Result<TailFit, StatsError>)>,
    pub profiles: Vec<ProfileOut>,
    /// `(x bins, v bins, density)`, particle samples only.
    pub joint: Option<(BinSpec, BinSpec, Vec<f64>)>,
    pub summary: Vec<(&'static str, Option<f64>)>,
}

const AXES: [Axis; 2] = [Axis::Knowledge, Axis::Wealth];

/// Survival points at ranks spaced evenly in `log(rank)`, at most `limit`.
fn thinned_tail(samples: &[f64], limit: usize) -> Vec<(f64, f64)> {
    let tail = tail_distribution(samples);
    let sorted = tail.sorted();
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    let nf = n as f64;
    let mut ranks: Vec<usize> = (0..limit)
        .map(|m| {
            let e = 1.0 - m as f64 / (limit - 1) as f64;
            (nf.powf(e).round() as usize).clamp(1, n)
        })
        .collect();
    ranks.dedup();
    ranks
        .into_iter()
        .filter_map(|k| {
            let s = sorted[n - k];
            (s > 0.0).then(|| (s.ln(), (k as f64 / nf).ln()))
        })
        .collect()
}

fn moment_summary(m: Option<&Moments>) -> [(&'static str, Option<f64>); 5] {
    [
        ("mean_knowledge", m.map(|m| m.mean_knowledge)),
        ("mean_wealth", m.map(|m| m.mean_wealth)),
        ("var_knowledge", m.map(|m| m.var_knowledge)),
        ("var_wealth", m.map(|m| m.var_wealth)),
        ("corr_xv", m.and_then(|m| m.corr_xv)),
    ]
}

pub fn analyze_agents(agents: &[Agent], t: Option<f64>, cfg: &AnalysisSection) -> Analysis {
    let column = |axis: Axis| agents.iter().map(|a| axis.of(a)).collect::<Vec<f64>>();
    let max_of = |axis: Axis| agents.iter().map(|a| axis.of(a)).fold(0.0f64, f64::max);
    let specs = AXES.map(|axis| cfg.bin_spec(max_of(axis)));

    let marginals = AXES
        .iter()
        .zip(specs)
        .map(|(&axis, spec)| Marginal {
            axis,
            spec,
            density: marginal(agents, axis, spec).density(),
        })
        .collect();

    let mut tails = Vec::new();
    let mut fits = Vec::new();
    for axis in AXES {
        let samples = column(axis);
        tails.push((axis, thinned_tail(&samples, cfg.tail_points)));
        fits.push((axis, tail_slope(&samples, cfg.top_fraction)));
    }

    let profiles = [("profile_W", Axis::Knowledge, specs[0]), ("profile_K", Axis::Wealth, specs[1])]
        .into_iter()
        .map(|(name, conditioning, spec)| {
            let p = local_profile(agents, conditioning, spec);
            ProfileOut {
                name,
                spec,
                means: p.means,
                counts: Some(p.counts),
            }
        })
        .collect();

    let jx = cfg.joint_spec(max_of(Axis::Knowledge));
    let jv = cfg.joint_spec(max_of(Axis::Wealth));
    let joint = stats::Histogram2D::from_agents(agents, jx, jv).density();

    let m = stats::moments(agents).ok();
    let mut summary = vec![("t", t), ("n_agents", Some(agents.len() as f64))];
    summary.extend(moment_summary(m.as_ref()));

    Analysis {
        marginals,
        tails,
        fits,
        profiles,
        joint: Some((jx, jv, joint)),
        summary,
    }
}

/// Means, variances and correlation of a density on the grid (midpoint rule).
pub fn field_moments(h: &Field2D) -> Moments {
    let g = &h.grid;
    let area = g.cell_area();
    let mut s = [0.0f64; 6];
    for i in 0..g.nx {
        let x = g.x_center(i);
        for j in 0..g.nv {
            let v = g.v_center(j);
            let w = h.at(i, j) * area;
            s[0] += w;
            s[1] += w * x;
            s[2] += w * v;
            s[3] += w * x * x;
            s[4] += w * v * v;
            s[5] += w * x * v;
        }
    }
    let mx = s[1] / s[0];
    let mv = s[2] / s[0];
    let vx = s[3] / s[0] - mx * mx;
    let vv = s[4] / s[0] - mv * mv;
    let cov = s[5] / s[0] - mx * mv;
    Moments {
        mean_knowledge: mx,
        mean_wealth: mv,
        var_knowledge: vx,
        var_wealth: vv,
        corr_xv: (vx > 0.0 && vv > 0.0).then(|| cov / (vx.sqrt() * vv.sqrt())),
    }
}

/// Survival at every cell's lower edge from a piecewise-constant density.
fn binned_tail(spec: &BinSpec, density: &[f64]) -> Vec<(f64, f64)> {
    let w = spec.width();
    let mut acc = 0.0;
    let mut out: Vec<(f64, f64)> = (0..density.len())
        .rev()
        .filter_map(|i| {
            acc += density[i] * w;
            let lo = spec.lo + i as f64 * w;
            (lo > 0.0 && acc > 0.0).then(|| (lo.ln(), acc.ln()))
        })
        .collect();
    out.reverse();
    out
}

pub fn analyze_field(h: &Field2D, cfg: &AnalysisSection) -> Analysis {
    let g = &h.grid;
    let native = [g.x_bins(), g.v_bins()];
    let raw = [h.marginal_x(), h.marginal_v()];
    let specs = [cfg.bin_spec(g.x_max), cfg.bin_spec(g.v_max)];

    let marginals = (0..2)
        .map(|k| Marginal {
            axis: AXES[k],
            spec: specs[k],
            density: rebin(&native[k], &raw[k], &specs[k]),
        })
        .collect();
    let tails = (0..2)
        .map(|k| (AXES[k], binned_tail(&native[k], &raw[k])))
        .collect();
    let fits = (0..2)
        .map(|k| (AXES[k], tail_slope_binned(&native[k], &raw[k], cfg.top_fraction)))
        .collect();

    // Conditional means as ratios of rebinned zeroth and first moments.
    let mut first_x = vec![0.0; g.nx]; // ∫ v h dv per x-cell
    let mut first_v = vec![0.0; g.nv]; // ∫ x h dx per v-cell
    for (i, fx) in first_x.iter_mut().enumerate() {
        for (j, fv) in first_v.iter_mut().enumerate() {
            let hv = h.at(i, j);
            *fx += g.v_center(j) * hv * g.dv();
            *fv += g.x_center(i) * hv * g.dx();
        }
    }
    let profiles = [
        ("profile_W", 0usize, first_x),
        ("profile_K", 1usize, first_v),
    ]
    .into_iter()
    .map(|(name, k, first)| {
        let m0 = rebin(&native[k], &raw[k], &specs[k]);
        let m1 = rebin(&native[k], &first, &specs[k]);
        ProfileOut {
            name,
            spec: specs[k],
            means: m0
                .iter()
                .zip(&m1)
                .map(|(&a, &b)| (a > 0.0).then(|| b / a))
                .collect(),
            counts: None,
        }
    })
    .collect();

    let m = field_moments(h);
    let mut summary = vec![("t", Some(h.tau)), ("mass", Some(h.mass()))];
    summary.extend(moment_summary(Some(&m)));

    Analysis {
        marginals,
        tails,
        fits,
        profiles,
        joint: None,
        summary,
    }
}

impl Analysis {
    pub fn fit(&self, axis: Axis) -> Option<&TailFit> {
        self.fits
            .iter()
            .find(|(a, _)| *a == axis)
            .and_then(|(_, f)| f.as_ref().ok())
    }

    pub fn marginal(&self, axis: Axis) -> &Marginal {
        self.marginals
            .iter()
            .find(|m| m.axis == axis)
            .expect("both marginals present")
    }

    /// Write every artifact into `dir`; tail-fit refusals are reported on
    /// stderr and leave empty fields.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        for m in &self.marginals {
            write_csv(
                &dir.join(marginal_file(m.axis)),
                &["center", "density"],
                m.spec
                    .centers()
                    .into_iter()
                    .zip(&m.density)
                    .map(|(c, &d)| [fmt_f64(c), fmt_f64(d)]),
            )?;
        }
        for (axis, points) in &self.tails {
            write_csv(
                &dir.join(format!("tail_{}.csv", axis.name())),
                &["log_value", "log_survival"],
                points.iter().map(|&(a, b)| [fmt_f64(a), fmt_f64(b)]),
            )?;
        }
        let mut rows = Vec::new();
        for (axis, fit) in &self.fits {
            match fit {
                Ok(f) => rows.push([
                    axis.name().to_string(),
                    fmt_f64(f.slope),
                    fmt_f64(f.intercept),
                    f.n_used.to_string(),
                    fmt_f64(f.residual),
                ]),
                Err(e) => {
                    eprintln!("warning: {} tail fit skipped: {e}", axis.name());
                    rows.push([axis.name().to_string(), String::new(), String::new(), String::new(), String::new()]);
                }
            }
        }
        write_csv(
            &dir.join(TAILFIT),
            &["target", "slope", "intercept", "n_used", "residual"],
            rows,
        )?;
        for p in &self.profiles {
            let counts = p.counts.as_ref();
            write_csv(
                &dir.join(format!("{}.csv", p.name)),
                &["center", "mean", "count"],
                p.spec.centers().into_iter().enumerate().map(|(i, c)| {
                    [
                        fmt_f64(c),
                        fmt_opt(p.means[i]),
                        counts.map(|c| c[i].to_string()).unwrap_or_default(),
                    ]
                }),
            )?;
        }
        if let Some((jx, jv, density)) = &self.joint {
            let mut rows = Vec::with_capacity(density.len());
            for (i, x) in jx.centers().into_iter().enumerate() {
                for (j, v) in jv.centers().into_iter().enumerate() {
                    rows.push([fmt_f64(x), fmt_f64(v), fmt_f64(density[i * jv.bins + j])]);
                }
            }
            write_csv(&dir.join("joint_density.csv"), &["x", "v", "density"], rows)?;
        }
        write_csv(
            &dir.join(SUMMARY),
            &["key", "value"],
            self.summary.iter().map(|(k, v)| [k.to_string(), fmt_opt(*v)]),
        )
    }
}
