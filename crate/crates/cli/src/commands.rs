//! Subcommand implementations. Each writes a self-contained bundle directory;
//! wall-clock timings go to stderr so bundles stay byte-reproducible.

use std::path::{Path, PathBuf};
use std::time::Instant;

use kinwealth_core::boltzmann::run;
use kinwealth_core::fokker_planck::fp_run;
use kinwealth_core::{Axis, Field2D, MomentRecord};

use crate::analysis::{analyze_agents, analyze_field, marginal_file, Analysis, SUMMARY, TAILFIT};
use crate::config::{AnalysisSection, OutputSection, RunConfig};
use crate::output::{
    ensure_dir, fmt_f64, fmt_opt, read_agents, read_columns, read_key_values, write_agents,
    write_csv, write_text,
};
use crate::CliError;

pub const CONFIG_ECHO: &str = "config.toml";
pub const MOMENTS: &str = "moments.csv";
pub const SNAPSHOT_FINAL: &str = "snapshot_final.csv";
pub const FP_FIELD: &str = "fp_field.csv";
pub const FP_DIAGNOSTICS: &str = "fp_diagnostics.csv";
pub const COMPARISON: &str = "comparison.csv";

/// Write the resolved config. The output directory is reset to its default
/// so that bundles written to different places are identical.
fn write_echo(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let mut echo = cfg.resolved_echo()?;
    echo.output.dir = OutputSection::default().dir;
    let text = format!(
        "# Resolved configuration; rerun with `--config {CONFIG_ECHO} --out <dir>`.\n{}",
        echo.to_toml()
    );
    write_text(&dir.join(CONFIG_ECHO), &text)
}

fn write_moments(path: &Path, records: &[MomentRecord]) -> Result<(), CliError> {
    write_csv(
        path,
        &["t", "mean_knowledge", "mean_wealth", "var_knowledge", "var_wealth", "corr_xv"],
        records.iter().map(|r| {
            let m = &r.moments;
            [
                fmt_f64(r.t),
                fmt_f64(m.mean_knowledge),
                fmt_f64(m.mean_wealth),
                fmt_f64(m.var_knowledge),
                fmt_f64(m.var_wealth),
                fmt_opt(m.corr_xv),
            ]
        }),
    )
}

pub fn snapshot_name(t: f64) -> String {
    format!("snapshot_t{}.csv", fmt_f64(t))
}

/// Run the particle solver and write its bundle to `cfg.output.dir`.
pub fn simulate(cfg: &RunConfig) -> Result<Analysis, CliError> {
    let resolved = cfg.resolve()?;
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    write_echo(cfg, dir)?;

    let start = Instant::now();
    let report = run(&resolved.sim, &resolved.model)?;
    eprintln!(
        "simulate: {} agents, {} steps in {:.2} s",
        resolved.sim.n_agents,
        resolved.sim.n_steps(),
        start.elapsed().as_secs_f64()
    );

    let start = Instant::now();
    write_moments(&dir.join(MOMENTS), &report.moments)?;
    for s in &report.snapshots {
        write_agents(&dir.join(snapshot_name(s.t)), &s.agents)?;
    }
    let fin = &report.final_state;
    if cfg.output.final_snapshot {
        write_agents(&dir.join(SNAPSHOT_FINAL), &fin.agents)?;
    }
    let analysis = analyze_agents(&fin.agents, Some(fin.t), &cfg.analysis);
    analysis.write(dir)?;
    write_text(&dir.join("plot.gp"), &plot_script(true))?;
    eprintln!("simulate: analysis and output in {:.2} s", start.elapsed().as_secs_f64());
    Ok(analysis)
}

/// Integrate the Fokker-Planck equation and write its bundle.
pub fn fp(cfg: &RunConfig) -> Result<(Field2D, Analysis), CliError> {
    let resolved = cfg.resolve()?;
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    write_echo(cfg, dir)?;

    let start = Instant::now();
    let init = Field2D::from_init(resolved.grid, &resolved.sim.init);
    let (h, diag) = fp_run(&resolved.model, init, &resolved.fp)?;
    eprintln!(
        "fp: {} steps to tau = {} ({}) in {:.2} s",
        diag.steps,
        h.tau,
        if diag.stationary { "stationary" } else { "horizon" },
        start.elapsed().as_secs_f64()
    );

    write_csv(
        &dir.join(FP_DIAGNOSTICS),
        &["tau", "mass", "mean_wealth", "mean_knowledge", "l1_rate"],
        diag.records.iter().map(|r| {
            [
                fmt_f64(r.tau),
                fmt_f64(r.mass),
                fmt_f64(r.mean_wealth),
                fmt_f64(r.mean_knowledge),
                // Undefined before the first step.
                fmt_opt(r.l1_rate.is_finite().then_some(r.l1_rate)),
            ]
        }),
    )?;
    if cfg.output.field {
        let g = &h.grid;
        let mut rows = Vec::with_capacity(g.len());
        for i in 0..g.nx {
            for j in 0..g.nv {
                rows.push([fmt_f64(g.x_center(i)), fmt_f64(g.v_center(j)), fmt_f64(h.at(i, j))]);
            }
        }
        write_csv(&dir.join(FP_FIELD), &["x", "v", "h"], rows)?;
    }

    let mut analysis = analyze_field(&h, &cfg.analysis);
    analysis.summary.extend([
        ("steps", Some(diag.steps as f64)),
        ("stationary", Some(if diag.stationary { 1.0 } else { 0.0 })),
        ("dtau_bound", Some(diag.dtau_bound)),
        ("max_mass_drift", Some(diag.max_mass_drift())),
        ("min_h", Some(diag.min_value)),
        ("boundary_mass_x", Some(diag.boundary_mass.0)),
        ("boundary_mass_v", Some(diag.boundary_mass.1)),
    ]);
    analysis.write(dir)?;
    write_text(&dir.join("plot.gp"), &plot_script(false))?;
    if diag.boundary_mass.0.max(diag.boundary_mass.1) > 1e-3 {
        eprintln!(
            "warning: {:.2e} of the mass sits in the outer tenth of the grid; consider a larger domain",
            diag.boundary_mass.0.max(diag.boundary_mass.1)
        );
    }
    Ok((h, analysis))
}

/// Analyze an `x,v` snapshot into `out`.
pub fn analyze(snapshot: &Path, cfg: &AnalysisSection, out: &Path) -> Result<Analysis, CliError> {
    let agents = read_agents(snapshot)?;
    if agents.is_empty() {
        return Err(CliError::Input(format!("{}: no agents", snapshot.display())));
    }
    ensure_dir(out)?;
    let analysis = analyze_agents(&agents, None, cfg);
    analysis.write(out)?;
    Ok(analysis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a`, or the distance for rows without per-bundle values.
    pub difference: Option<f64>,
}

impl ComparisonRow {
    fn pair(metric: impl Into<String>, a: Option<f64>, b: Option<f64>) -> Self {
        let difference = a.zip(b).map(|(a, b)| b - a);
        Self {
            metric: metric.into(),
            a,
            b,
            difference,
        }
    }
}

fn read_marginal(bundle: &Path, axis: Axis) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let path = bundle.join(marginal_file(axis));
    let cols = read_columns(&path, &["center", "density"])?;
    let need = |c: &Vec<Option<f64>>| -> Result<Vec<f64>, CliError> {
        c.iter()
            .map(|v| v.ok_or_else(|| CliError::Input(format!("{}: empty field", path.display()))))
            .collect()
    };
    Ok((need(&cols[0])?, need(&cols[1])?))
}

fn read_fits(bundle: &Path) -> Result<Vec<(String, Option<f64>)>, CliError> {
    let path = bundle.join(TAILFIT);
    let mut r = csv::Reader::from_path(&path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let slope = rec.get(1).map(str::trim).filter(|s| !s.is_empty());
        let slope = slope
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| CliError::Input(format!("{}: bad slope '{s}'", path.display())))
            })
            .transpose()?;
        out.push((rec.get(0).unwrap_or("").to_string(), slope));
    }
    Ok(out)
}

/// Compare two bundles that share marginal bins.
pub fn compare(a: &Path, b: &Path) -> Result<Vec<ComparisonRow>, CliError> {
    let mut rows = Vec::new();
    for axis in [Axis::Knowledge, Axis::Wealth] {
        let (ca, da) = read_marginal(a, axis)?;
        let (cb, db) = read_marginal(b, axis)?;
        let same_bins = ca.len() == cb.len()
            && ca.len() >= 2
            && ca.iter().zip(&cb).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        if !same_bins {
            return Err(CliError::Input(format!(
                "{} marginals use different bins ({} vs {} bins, first centers {:?} vs {:?})",
                axis.name(),
                ca.len(),
                cb.len(),
                ca.first(),
                cb.first()
            )));
        }
        let width = ca[1] - ca[0];
        let l1 = da.iter().zip(&db).map(|(p, q)| (p - q).abs()).sum::<f64>() * width;
        rows.push(ComparisonRow {
            metric: format!("l1_{}", axis.name()),
            a: None,
            b: None,
            difference: Some(l1),
        });
        rows.push(ComparisonRow::pair(
            format!("first_bin_{}", axis.name()),
            Some(da[0]),
            Some(db[0]),
        ));
    }

    let (fa, fb) = (read_fits(a)?, read_fits(b)?);
    for (target, sa) in &fa {
        let sb = fb.iter().find(|(t, _)| t == target).and_then(|(_, s)| *s);
        rows.push(ComparisonRow::pair(format!("slope_{target}"), *sa, sb));
    }

    let (ma, mb) = (read_key_values(&a.join(SUMMARY))?, read_key_values(&b.join(SUMMARY))?);
    for key in ["mean_knowledge", "mean_wealth", "var_knowledge", "var_wealth", "corr_xv"] {
        let get = |m: &[(String, Option<f64>)]| m.iter().find(|(k, _)| k == key).and_then(|(_, v)| *v);
        rows.push(ComparisonRow::pair(key, get(&ma), get(&mb)));
    }
    Ok(rows)
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<(), CliError> {
    write_csv(
        path,
        &["metric", "a", "b", "difference"],
        rows.iter()
            .map(|r| [r.metric.clone(), fmt_opt(r.a), fmt_opt(r.b), fmt_opt(r.difference)]),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Simulate,
    Fp,
}

/// Split `key=v1,v2,...`; commas inside brackets or quotes do not separate.
pub fn parse_set(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set '{spec}' is not of the form key=v1,v2")))?;
    let mut out = Vec::new();
    let (mut depth, mut quoted, mut cur) = (0i32, false, String::new());
    for c in values.chars() {
        match c {
            '"' => quoted = !quoted,
            '[' | '{' if !quoted => depth += 1,
            ']' | '}' if !quoted => depth -= 1,
            ',' if depth == 0 && !quoted => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    out.push(cur);
    let out: Vec<String> = out.into_iter().map(|s| s.trim().to_string()).collect();
    if key.trim().is_empty() || out.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("--set '{spec}' has an empty key or value")));
    }
    Ok((key.trim().to_string(), out))
}

/// One bundle per point of the Cartesian product of `sets` (first key
/// slowest), in `point_NNN` under `cfg.output.dir`, plus `sweep.csv`.
pub fn sweep(
    cfg: &RunConfig,
    sets: &[(String, Vec<String>)],
    solver: Solver,
) -> Result<Vec<PathBuf>, CliError> {
    let total: usize = sets.iter().map(|(_, v)| v.len()).product();
    let root = cfg.output.dir.clone();

    // Validate every point before running any of them.
    let mut points = Vec::with_capacity(total);
    for p in 0..total {
        let mut c = cfg.clone();
        let mut rem = p;
        let mut chosen = vec![String::new(); sets.len()];
        for (k, (key, values)) in sets.iter().enumerate().rev() {
            let v = &values[rem % values.len()];
            rem /= values.len();
            c = c.with_override(key, v)?;
            chosen[k] = v.clone();
        }
        c.output.dir = root.join(format!("point_{p:03}"));
        c.resolve()
            .map_err(|e| CliError::Config(format!("sweep point {p} ({}): {e}", chosen.join(", "))))?;
        points.push((c, chosen));
    }

    ensure_dir(&root)?;
    let mut header: Vec<String> = vec!["point".into()];
    header.extend(sets.iter().map(|(k, _)| k.clone()));
    let mut rows = Vec::with_capacity(total);
    let mut dirs = Vec::with_capacity(total);
    for (p, (c, chosen)) in points.into_iter().enumerate() {
        eprintln!("sweep: point {}/{total}", p + 1);
        let analysis = match solver {
            Solver::Simulate => simulate(&c)?,
            Solver::Fp => fp(&c)?.1,
        };
        if p == 0 {
            header.extend(analysis.summary.iter().map(|(k, _)| k.to_string()));
            header.extend(analysis.fits.iter().map(|(a, _)| format!("slope_{}", a.name())));
        }
        let mut row = vec![format!("point_{p:03}")];
        row.extend(chosen);
        row.extend(analysis.summary.iter().map(|(_, v)| fmt_opt(*v)));
        row.extend(
            analysis
                .fits
                .iter()
                .map(|(_, f)| fmt_opt(f.as_ref().ok().map(|f| f.slope))),
        );
        rows.push(row);
        dirs.push(c.output.dir);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&root.join("sweep.csv"), &header, rows)?;
    Ok(dirs)
}

/// Gnuplot script over the bundle CSVs.
fn plot_script(particles: bool) -> String {
    let mut s = String::from(
        "# gnuplot -persist plot.gp\n\
         set datafile separator ','\n\
         set key autotitle columnhead\n\
         set multiplot layout 2,3\n\
         set title 'knowledge marginal'\n\
         plot 'marginal_knowledge.csv' using 1:2 with lines\n\
         set title 'wealth marginal'\n\
         plot 'marginal_wealth.csv' using 1:2 with lines\n\
         set title 'log-log tails'\n\
         plot 'tail_knowledge.csv' using 1:2 with lines, 'tail_wealth.csv' using 1:2 with lines\n\
         set title 'mean wealth given knowledge'\n\
         plot 'profile_W.csv' using 1:2 with linespoints\n\
         set title 'mean knowledge given wealth'\n\
         plot 'profile_K.csv' using 1:2 with linespoints\n",
    );
    if particles {
        s.push_str(
            "set title 'moments'\n\
             plot 'moments.csv' using 1:2 with lines, '' using 1:3 with lines\n",
        );
    } else {
        s.push_str(
            "set title 'stationarity (L1 rate)'\n\
             set logscale y\n\
             plot 'fp_diagnostics.csv' using 1:5 with lines\n",
        );
    }
    s.push_str("unset multiplot\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_values_split_outside_brackets() {
        let (k, v) = parse_set("analysis.range=[0, 5],[0,10]").unwrap();
        assert_eq!(k, "analysis.range");
        assert_eq!(v, vec!["[0, 5]", "[0,10]"]);
        let (_, v) = parse_set("model.trade.gamma=0.05, 0.1").unwrap();
        assert_eq!(v, vec!["0.05", "0.1"]);
        assert!(parse_set("gamma").is_err());
        assert!(parse_set("a=1,,2").is_err());
    }

    #[test]
    fn snapshot_names_use_round_trip_format() {
        assert_eq!(snapshot_name(50.0), "snapshot_t50.0.csv");
        assert_eq!(snapshot_name(0.1), "snapshot_t0.1.csv");
    }
}
