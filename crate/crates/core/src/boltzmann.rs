//! Monte Carlo solver for the joint wealth-knowledge kinetic equation.
//!
//! Time is measured in the (possibly rescaled) units of the configuration:
//! with scaling parameter `ε` every rate is multiplied by `ε` and one step of
//! length `dt` gives each agent an interaction with probability `dt / ε`.
//! For `ε = 1` this is the usual Nanbu-Babovsky selection with unit rate.
//!
//! A step first lets every selected agent interact with the background, then
//! performs `⌊N · dt / (2ε)⌋` trades between disjoint random pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{knowledge_rule, trade_post_interaction, Agent, ModelError, ModelParams};
use crate::sampling::{
    sample_background, sample_disjoint_pairs, sample_eta, sample_kappa, RngStream, SamplingError,
    StreamRole,
};
use crate::stats::{moments, Moments, StatsError};

/// Agents per knowledge-update random stream.
const KNOWLEDGE_BLOCK: usize = 8192;
/// Pairs per trade random stream.
const TRADE_BLOCK: usize = 4096;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WealthInit {
    /// Every agent starts with `value`.
    AllEqual { value: f64 },
    /// Uniform on `(0, 2 mean)`.
    Uniform { mean: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KnowledgeInit {
    AllEqual { value: f64 },
    /// Uniform on `(0, upper)`.
    Uniform { upper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub wealth: WealthInit,
    pub knowledge: KnowledgeInit,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            wealth: WealthInit::AllEqual { value: 1.0 },
            knowledge: KnowledgeInit::Uniform { upper: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_agents: usize,
    pub dt: f64,
    pub t_final: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Times at which full `(x, v)` snapshots are kept.
    pub record_times: Vec<f64>,
    pub init: InitSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_agents: 1_000_000,
            dt: 1.0,
            t_final: 100.0,
            epsilon: 1.0,
            seed: 0,
            record_times: Vec::new(),
            init: InitSpec::default(),
        }
    }
}

impl SimConfig {
    /// Per-step interaction probability `dt / ε`.
    pub fn interaction_probability(&self) -> f64 {
        self.dt / self.epsilon
    }

    /// Trades per step, `⌊N dt / (2ε)⌋`.
    pub fn pairs_per_step(&self) -> usize {
        (self.n_agents as f64 * self.interaction_probability() / 2.0 + 1e-9).floor() as usize
    }

    pub fn n_steps(&self) -> u64 {
        (self.t_final / self.dt - 1e-9).ceil().max(0.0) as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut problems = Vec::new();
        if self.n_agents < 2 {
            problems.push(format!("n_agents = {} must be >= 2", self.n_agents));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            problems.push(format!("epsilon = {} must lie in (0, 1]", self.epsilon));
        }
        if !(self.dt > 0.0 && self.dt <= self.epsilon * (1.0 + 1e-12)) {
            problems.push(format!(
                "dt = {} must lie in (0, epsilon = {}]",
                self.dt, self.epsilon
            ));
        }
        if self.n_agents >= 2 && self.dt > 0.0 && self.pairs_per_step() < 1 {
            problems.push(format!(
                "n_agents * dt / (2 epsilon) = {} gives no trades per step",
                self.n_agents as f64 * self.interaction_probability() / 2.0
            ));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            problems.push(format!("t_final = {} must be finite and >= 0", self.t_final));
        }
        match self.init.wealth {
            WealthInit::AllEqual { value: m } | WealthInit::Uniform { mean: m } if !(m > 0.0) => {
                problems.push(format!("initial wealth level {m} must be > 0"))
            }
            _ => {}
        }
        match self.init.knowledge {
            KnowledgeInit::AllEqual { value } if !(value >= 0.0) => {
                problems.push(format!("initial knowledge {value} must be >= 0"))
            }
            KnowledgeInit::Uniform { upper } if !(upper > 0.0) => {
                problems.push(format!("initial knowledge upper bound {upper} must be > 0"))
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub agents: Vec<Agent>,
    pub t: f64,
    /// Completed steps; addresses the random streams of the next step.
    pub step: u64,
}

/// Quasi-invariant scaling: `λ, λ_B, γ → ελ, ελ_B, εγ` and `κ, η → √ε κ, √ε η`.
pub fn apply_scaling(mp: &ModelParams, epsilon: f64) -> Result<ModelParams, ModelError> {
    let mut out = *mp;
    if epsilon != 1.0 {
        let k = &mut out.knowledge;
        k.lambda = k.lambda.scaled(epsilon);
        k.lambda_b = k.lambda_b.scaled(epsilon);
        k.lambda_minus *= epsilon;
        k.lambda_plus *= epsilon;
        k.lambda_bar *= epsilon;
        k.delta *= epsilon;
        out.trade.gamma *= epsilon;
        out.trade.risk *= epsilon.sqrt();
    }
    out.validated()
}

/// Draw the initial population; wealth is rescaled to mean exactly one.
pub fn init_population(cfg: &SimConfig) -> Population {
    let n = cfg.n_agents;
    let init = cfg.init;
    let mut agents = vec![Agent::default(); n];
    agents
        .par_chunks_mut(KNOWLEDGE_BLOCK)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = RngStream::for_role(cfg.seed, StreamRole::Init, 0, b as u64);
            for a in chunk {
                a.x = match init.knowledge {
                    KnowledgeInit::AllEqual { value } => value,
                    KnowledgeInit::Uniform { upper } => upper * rng.uniform_open(),
                };
                a.v = match init.wealth {
                    WealthInit::AllEqual { value } => value,
                    WealthInit::Uniform { mean } => 2.0 * mean * rng.uniform_open(),
                };
            }
        });

    match init.wealth {
        WealthInit::AllEqual { .. } => agents.iter_mut().for_each(|a| a.v = 1.0),
        WealthInit::Uniform { .. } => {
            let total: f64 = agents.iter().map(|a| a.v).sum();
            let scale = n as f64 / total;
            agents.iter_mut().for_each(|a| a.v *= scale);
        }
    }

    Population {
        agents,
        t: 0.0,
        step: 0,
    }
}

/// Advance `pop` by one step of length `dt` under (already scaled) `mp`.
pub fn step(
    pop: &mut Population,
    mp: &ModelParams,
    dt: f64,
    epsilon: f64,
    seed: u64,
) -> Result<(), SimError> {
    let p = dt / epsilon;
    let step = pop.step;
    let kp = mp.knowledge;

    pop.agents
        .par_chunks_mut(KNOWLEDGE_BLOCK)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = RngStream::for_role(seed, StreamRole::Knowledge, step, b as u64);
            for a in chunk {
                if p < 1.0 && rng.uniform_open() >= p {
                    continue;
                }
                let z = sample_background(&kp.background, &mut rng);
                let kappa = sample_kappa(&kp, &mut rng);
                a.x = knowledge_rule(a.x, z, kappa, &kp);
            }
        });

    let n = pop.agents.len();
    let count = ((n as f64) * p / 2.0 + 1e-9).floor() as usize;
    let mut pair_rng = RngStream::for_role(seed, StreamRole::Pairing, step, 0);
    let pairs = sample_disjoint_pairs(n, count, &mut pair_rng)?;

    let tp = mp.trade;
    let agents = &pop.agents;
    let mut updates = vec![(0.0, 0.0); pairs.len()];
    updates
        .par_chunks_mut(TRADE_BLOCK)
        .zip(pairs.par_chunks(TRADE_BLOCK))
        .enumerate()
        .for_each(|(b, (out, block))| {
            let mut rng = RngStream::for_role(seed, StreamRole::Trade, step, b as u64);
            for (slot, &(i, j)) in out.iter_mut().zip(block) {
                let eta1 = sample_eta(&tp, &mut rng);
                let eta2 = sample_eta(&tp, &mut rng);
                *slot = trade_post_interaction(agents[i as usize], agents[j as usize], eta1, eta2, &tp);
            }
        });
    for (&(i, j), &(v, w)) in pairs.iter().zip(&updates) {
        pop.agents[i as usize].v = v;
        pop.agents[j as usize].v = w;
    }

    pop.step += 1;
    pop.t = pop.step as f64 * dt;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentRecord {
    pub t: f64,
    pub moments: Moments,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub agents: Vec<Agent>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    /// Parameters after scaling, as used by the interaction rules.
    pub scaled_params: ModelParams,
    /// One record per step, starting with the initial state.
    pub moments: Vec<MomentRecord>,
    pub snapshots: Vec<Snapshot>,
    pub final_state: Population,
}

/// Run the particle solver from `t = 0` to `cfg.t_final`.
pub fn run(cfg: &SimConfig, mp: &ModelParams) -> Result<RunReport, SimError> {
    run_with(cfg, mp, |_| {})
}

/// As [`run`], calling `on_step` after every step with the latest record.
pub fn run_with(
    cfg: &SimConfig,
    mp: &ModelParams,
    mut on_step: impl FnMut(&MomentRecord),
) -> Result<RunReport, SimError> {
    cfg.validate()?;
    let base = mp.validated()?;
    let scaled = apply_scaling(&base, cfg.epsilon)?;

    let mut pop = init_population(cfg);
    let mut records = vec![MomentRecord {
        t: 0.0,
        moments: moments(&pop.agents)?,
    }];
    let mut pending: Vec<f64> = cfg.record_times.clone();
    pending.sort_by(f64::total_cmp);
    pending.dedup();
    let mut pending = pending.into_iter().peekable();
    let mut snapshots = Vec::new();
    let tol = 1e-9 * cfg.dt;
    let mut take_due = |pop: &Population, snapshots: &mut Vec<Snapshot>| {
        while let Some(&r) = pending.peek() {
            if r <= pop.t + tol {
                snapshots.push(Snapshot {
                    t: pop.t,
                    agents: pop.agents.clone(),
                });
                // Several record times may fall within one step.
                while pending.peek().is_some_and(|&r| r <= pop.t + tol) {
                    pending.next();
                }
            } else {
                break;
            }
        }
    };
    take_due(&pop, &mut snapshots);

    for _ in 0..cfg.n_steps() {
        step(&mut pop, &scaled, cfg.dt, cfg.epsilon, cfg.seed)?;
        let rec = MomentRecord {
            t: pop.t,
            moments: moments(&pop.agents)?,
        };
        on_step(&rec);
        records.push(rec);
        take_due(&pop, &mut snapshots);
    }

    Ok(RunReport {
        scaled_params: scaled,
        moments: records,
        snapshots,
        final_state: pop,
    })
}
