//! Run configuration: TOML schema, shipped presets and resolution into solver
//! inputs.
//!
//! Every key has a default, unknown keys are rejected, and the resolved
//! configuration is what gets echoed into a bundle, so feeding the echo back
//! in reproduces the run.

use std::path::{Path, PathBuf};

use kinwealth_core::fokker_planck::FpRunOptions;
use kinwealth_core::{
    BackgroundSpec, BinSpec, Equation, FunctionSpec, Grid2D, InitSpec, KnowledgeParams,
    ModelParams, SimConfig, TradeParams,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Knowledge-noise variance used when a config leaves it out.
pub const DEFAULT_DELTA: f64 = 0.06;

const PRESETS: &[(&str, &str)] = &[
    ("test1", include_str!("../presets/test1.toml")),
    ("test1-fp", include_str!("../presets/test1-fp.toml")),
    ("test2", include_str!("../presets/test2.toml")),
    ("test2-fp", include_str!("../presets/test2-fp.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(name, _)| *name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for every random stream of a run.
    pub seed: u64,
    pub model: ModelSection,
    pub simulation: SimulationSection,
    pub analysis: AnalysisSection,
    pub fp: FpSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            model: ModelSection::default(),
            simulation: SimulationSection::default(),
            analysis: AnalysisSection::default(),
            fp: FpSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub knowledge: KnowledgeSection,
    pub trade: TradeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnowledgeSection {
    /// Selection rate λ(x).
    pub lambda: FunctionSpec,
    /// Learning rate λ_B(x).
    pub lambda_b: FunctionSpec,
    /// Variance of the knowledge noise κ = ±√δ.
    pub delta: f64,
    pub background: BackgroundSpec,
    /// Declared bounds; derived from the rate functions when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_minus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_bar: Option<f64>,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        Self {
            lambda: FunctionSpec::constant(0.1),
            lambda_b: FunctionSpec::constant(0.1),
            delta: DEFAULT_DELTA,
            background: BackgroundSpec::default(),
            lambda_minus: None,
            lambda_plus: None,
            lambda_bar: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TradeSection {
    /// Saving propensity γ.
    pub gamma: f64,
    /// Risk variance σ; give either this or `risk`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Risk amplitude r = √σ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    pub psi: FunctionSpec,
    pub phi: FunctionSpec,
}

impl Default for TradeSection {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            sigma: None,
            risk: None,
            psi: FunctionSpec::constant(1.0),
            phi: FunctionSpec::power_law(2.0),
        }
    }
}

const DEFAULT_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n_agents: usize,
    /// Time step, in units of the unscaled interaction time.
    pub dt: f64,
    pub t_final: f64,
    /// Quasi-invariant scaling; rates and noise variances are multiplied by it.
    pub epsilon: f64,
    /// Extra times for full `(x, v)` snapshots; the final state is always kept.
    pub record_times: Vec<f64>,
    pub init: InitSpec,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n_agents: 1_000_000,
            dt: 1.0,
            t_final: 100.0,
            epsilon: 1.0,
            record_times: Vec::new(),
            init: InitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Bins per axis for marginals and profiles.
    pub bins: usize,
    /// Histogram range `[lo, hi]`; when absent it is `[0, max(5, 1.05 max)]`
    /// per axis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    /// Bins per axis of the joint density.
    pub joint_bins: usize,
    /// Fraction of the largest samples used by the tail fit.
    pub top_fraction: f64,
    /// Upper limit on the rows of each tail CSV.
    pub tail_points: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            bins: 100,
            range: None,
            joint_bins: 50,
            top_fraction: 0.01,
            tail_points: 2000,
        }
    }
}

impl AnalysisSection {
    /// Bins for one axis given the largest sample on it.
    pub fn bin_spec(&self, max_sample: f64) -> BinSpec {
        match self.range {
            Some([lo, hi]) => BinSpec::new(lo, hi, self.bins),
            None => BinSpec::auto([max_sample], self.bins),
        }
    }

    pub fn joint_spec(&self, max_sample: f64) -> BinSpec {
        let b = self.bin_spec(max_sample);
        BinSpec::new(b.lo, b.hi, self.joint_bins)
    }

    fn check(&self, problems: &mut Vec<String>) {
        if self.bins == 0 || self.joint_bins == 0 {
            problems.push("analysis.bins and analysis.joint_bins must be >= 1".into());
        }
        if let Some([lo, hi]) = self.range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                problems.push(format!("analysis.range [{lo}, {hi}] must be increasing"));
            }
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            problems.push(format!(
                "analysis.top_fraction = {} must lie in (0, 1]",
                self.top_fraction
            ));
        }
        if self.tail_points < 2 {
            problems.push("analysis.tail_points must be >= 2".into());
        }
    }
}

/// Which limit equation `fp` integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquationChoice {
    /// Mean field `M_W` follows the density.
    #[default]
    Fp,
    /// Mean field frozen at its initial value.
    Fp2,
}

impl From<EquationChoice> for Equation {
    fn from(e: EquationChoice) -> Self {
        match e {
            EquationChoice::Fp => Equation::General,
            EquationChoice::Fp2 => Equation::ConstantMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpSection {
    pub nx: usize,
    pub nv: usize,
    pub x_max: f64,
    pub v_max: f64,
    /// Horizon in the scaled time τ.
    pub t_final: f64,
    /// Stop once `Σ|Δh| ΔxΔv / Δτ` falls below this; `0` disables.
    pub tol: f64,
    pub equation: EquationChoice,
    /// Spacing in τ of the diagnostic rows.
    pub record_interval: f64,
}

impl Default for FpSection {
    fn default() -> Self {
        let g = Grid2D::default();
        Self {
            nx: g.nx,
            nv: g.nv,
            x_max: g.x_max,
            v_max: g.v_max,
            t_final: 100.0,
            tol: 1e-4,
            equation: EquationChoice::Fp,
            record_interval: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write `snapshot_final.csv` (one row per agent).
    pub final_snapshot: bool,
    /// Write `fp_field.csv` (one row per cell).
    pub field: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            final_snapshot: true,
            field: true,
        }
    }
}

/// Everything the solvers need, validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelParams,
    pub sim: SimConfig,
    pub grid: Grid2D,
    pub fp: FpRunOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            CliError::Config(format!(
                "unknown preset '{name}' (available: {})",
                preset_names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_params(&self) -> Result<ModelParams, CliError> {
        let k = &self.model.knowledge;
        let mut knowledge = KnowledgeParams::new(k.lambda, k.lambda_b, k.delta, k.background);
        if let Some(v) = k.lambda_minus {
            knowledge.lambda_minus = v;
        }
        if let Some(v) = k.lambda_plus {
            knowledge.lambda_plus = v;
        }
        if let Some(v) = k.lambda_bar {
            knowledge.lambda_bar = v;
        }
        let t = &self.model.trade;
        let risk = match (t.sigma, t.risk) {
            (Some(s), Some(r)) => {
                if (r * r - s).abs() > 1e-12 * s.abs().max(1.0) {
                    return Err(CliError::Config(format!(
                        "model.trade: sigma = {s} and risk = {r} disagree (sigma must equal risk^2)"
                    )));
                }
                r
            }
            (Some(s), None) => {
                if !(s >= 0.0) {
                    return Err(CliError::Config(format!(
                        "model.trade.sigma = {s} must be >= 0"
                    )));
                }
                s.sqrt()
            }
            (None, Some(r)) => r,
            (None, None) => DEFAULT_SIGMA.sqrt(),
        };
        let trade = TradeParams {
            gamma: t.gamma,
            risk,
            psi: t.psi,
            phi: t.phi,
        };
        ModelParams { knowledge, trade }
            .validated()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            n_agents: s.n_agents,
            dt: s.dt,
            t_final: s.t_final,
            epsilon: s.epsilon,
            seed: self.seed,
            record_times: s.record_times.clone(),
            init: s.init,
        }
    }

    /// Validate every section and build the solver inputs.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let mut problems = Vec::new();
        let model = match self.model_params() {
            Ok(m) => Some(m),
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        };
        let sim = self.sim_config();
        if let Err(e) = sim.validate() {
            problems.push(e.to_string());
        }
        self.analysis.check(&mut problems);
        let f = &self.fp;
        let grid = match Grid2D::new(f.x_max, f.v_max, f.nx, f.nv) {
            Ok(g) => Some(g),
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        };
        if !(f.t_final >= 0.0 && f.t_final.is_finite()) {
            problems.push(format!("fp.t_final = {} must be finite and >= 0", f.t_final));
        }
        if !(f.tol >= 0.0) {
            problems.push(format!("fp.tol = {} must be >= 0", f.tol));
        }
        if !(f.record_interval > 0.0) {
            problems.push(format!("fp.record_interval = {} must be > 0", f.record_interval));
        }
        match (model, grid) {
            (Some(model), Some(grid)) if problems.is_empty() => Ok(Resolved {
                model,
                sim,
                grid,
                fp: FpRunOptions {
                    t_final: f.t_final,
                    tol: f.tol,
                    equation: f.equation.into(),
                    record_interval: f.record_interval,
                    max_steps: None,
                },
            }),
            _ => Err(CliError::Config(problems.join("\n"))),
        }
    }

    /// The configuration with derived values written out, as echoed into
    /// bundles.
    pub fn resolved_echo(&self) -> Result<Self, CliError> {
        let mp = self.model_params()?;
        let mut out = self.clone();
        let k = &mut out.model.knowledge;
        k.lambda_minus = Some(mp.knowledge.lambda_minus);
        k.lambda_plus = Some(mp.knowledge.lambda_plus);
        k.lambda_bar = Some(mp.knowledge.lambda_bar);
        let t = &mut out.model.trade;
        if t.sigma.is_none() && t.risk.is_none() {
            t.sigma = Some(DEFAULT_SIGMA);
        }
        Ok(out)
    }

    /// Set one dotted key (e.g. `model.trade.gamma`) from a TOML literal.
    pub fn with_override(&self, key: &str, literal: &str) -> Result<Self, CliError> {
        let mut root = toml::Value::try_from(self)
            .map_err(|e| CliError::Config(format!("cannot encode config: {e}")))?;
        let value: toml::Value = parse_literal(literal)?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut node = &mut root;
        for p in path {
            node = node
                .as_table_mut()
                .and_then(|t| {
                    if !t.contains_key(*p) {
                        t.insert((*p).to_string(), toml::Value::Table(Default::default()));
                    }
                    t.get_mut(*p)
                })
                .ok_or_else(|| CliError::Config(format!("'{key}' does not name a config key")))?;
        }
        node.as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{key}' does not name a config key")))?
            .insert((*last).to_string(), value);
        root.try_into()
            .map_err(|e| CliError::Config(format!("override {key} = {literal}: {e}")))
    }
}

fn parse_literal(literal: &str) -> Result<toml::Value, CliError> {
    let doc: toml::Table = toml::from_str(&format!("v = {literal}"))
        .or_else(|_| toml::from_str(&format!("v = \"{literal}\"")))
        .map_err(|e| CliError::Config(format!("cannot parse value '{literal}': {e}")))?;
    Ok(doc["v"].clone())
}
