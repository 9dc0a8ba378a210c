//! Domain types and the two microscopic interaction rules.
//!
//! An agent carries a knowledge level `x` and a wealth `v`. Knowledge changes
//! through interactions with a fixed background,
//!
//! ```text
//! x* = (1 - λ(x)) x + λ_B(x) z + κ x
//! ```
//!
//! and wealth changes through binary trades between two agents `(x, v)` and
//! `(y, w)`:
//!
//! ```text
//! v* = (1 - Ψ(x) γ + Φ(x) η₁) v + Ψ(y) γ w
//! w* = (1 - Ψ(y) γ + Φ(y) η₂) w + Ψ(x) γ v
//! ```
//!
//! Nonnegativity of the post-interaction states is guaranteed a priori by
//! [`validate_params`], never by clamping inside the rules.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Agent {
    /// Knowledge level.
    pub x: f64,
    /// Wealth.
    pub v: f64,
}

impl Agent {
    pub fn new(x: f64, v: f64) -> Self {
        Self { x, v }
    }
}

/// A nonnegative function of knowledge.
///
/// `PowerLaw` evaluates to `coefficient * (1 + x)^(-exponent)`; the coefficient
/// defaults to one and only departs from it when a power-law rate is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSpec {
    Constant {
        value: f64,
    },
    PowerLaw {
        exponent: f64,
        #[serde(default = "one")]
        coefficient: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl FunctionSpec {
    pub fn constant(value: f64) -> Self {
        FunctionSpec::Constant { value }
    }

    pub fn power_law(exponent: f64) -> Self {
        FunctionSpec::PowerLaw {
            exponent,
            coefficient: 1.0,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            FunctionSpec::Constant { value } => value,
            FunctionSpec::PowerLaw {
                exponent,
                coefficient,
            } => {
                if exponent == 2.0 {
                    // Hot path for the shipped presets; avoids powf.
                    let s = 1.0 + x;
                    coefficient / (s * s)
                } else {
                    coefficient * (1.0 + x).powf(-exponent)
                }
            }
        }
    }

    /// Supremum over `x >= 0`.
    pub fn sup(&self) -> f64 {
        match *self {
            FunctionSpec::Constant { value } => value,
            FunctionSpec::PowerLaw { coefficient, .. } => coefficient,
        }
    }

    /// Infimum over `x >= 0`.
    pub fn inf(&self) -> f64 {
        match *self {
            FunctionSpec::Constant { value } => value,
            FunctionSpec::PowerLaw { .. } => 0.0,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, FunctionSpec::Constant { .. })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            FunctionSpec::Constant { value } => FunctionSpec::Constant {
                value: value * factor,
            },
            FunctionSpec::PowerLaw {
                exponent,
                coefficient,
            } => FunctionSpec::PowerLaw {
                exponent,
                coefficient: coefficient * factor,
            },
        }
    }

    fn check(&self, name: &'static str, out: &mut Vec<Violation>) {
        match *self {
            FunctionSpec::Constant { value } if !(value.is_finite() && value >= 0.0) => {
                out.push(Violation::BadFunction {
                    name,
                    reason: format!("constant value {value} must be finite and >= 0"),
                })
            }
            FunctionSpec::PowerLaw {
                exponent,
                coefficient,
            } => {
                if !(exponent.is_finite() && exponent > 0.0) {
                    out.push(Violation::BadFunction {
                        name,
                        reason: format!("power-law exponent {exponent} must be > 0"),
                    });
                }
                if !(coefficient.is_finite() && coefficient > 0.0) {
                    out.push(Violation::BadFunction {
                        name,
                        reason: format!("power-law coefficient {coefficient} must be > 0"),
                    });
                }
            }
            _ => {}
        }
    }
}

/// Knowledge distribution `C(z)` of the fixed background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundSpec {
    /// Uniform on `(0, upper)`.
    Uniform { upper: f64 },
    /// Every draw equals `value`.
    PointMass { value: f64 },
}

impl BackgroundSpec {
    /// Mean `M` of the background.
    pub fn mean(&self) -> f64 {
        match *self {
            BackgroundSpec::Uniform { upper } => 0.5 * upper,
            BackgroundSpec::PointMass { value } => value,
        }
    }
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec::Uniform { upper: 2.0 }
    }
}

/// Coefficients of the knowledge rule.
///
/// `lambda_minus <= λ(x) <= lambda_plus` and `λ_B(x) <= lambda_bar` are declared
/// bounds; [`KnowledgeParams::new`] derives the tightest ones from the
/// function specs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnowledgeParams {
    pub lambda: FunctionSpec,
    pub lambda_b: FunctionSpec,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub lambda_bar: f64,
    /// Variance of the two-point law `κ = ±√δ`.
    pub delta: f64,
    pub background: BackgroundSpec,
}

impl KnowledgeParams {
    pub fn new(
        lambda: FunctionSpec,
        lambda_b: FunctionSpec,
        delta: f64,
        background: BackgroundSpec,
    ) -> Self {
        Self {
            lambda,
            lambda_b,
            lambda_minus: lambda.inf(),
            lambda_plus: lambda.sup(),
            lambda_bar: lambda_b.sup(),
            delta,
            background,
        }
    }

    #[inline]
    pub fn kappa_amplitude(&self) -> f64 {
        self.delta.sqrt()
    }

    /// Smallest admissible κ, `-(1 - λ_+)`.
    pub fn kappa_lower_bound(&self) -> f64 {
        -(1.0 - self.lambda_plus)
    }
}

/// Coefficients of the binary trade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeParams {
    /// Saving propensity γ.
    pub gamma: f64,
    /// Risk amplitude `r`; the risk law is `η = ±r` with equal probability.
    pub risk: f64,
    /// Saving modulation Ψ.
    pub psi: FunctionSpec,
    /// Risk modulation Φ.
    pub phi: FunctionSpec,
}

impl TradeParams {
    /// Build from the risk variance σ instead of the amplitude.
    pub fn from_sigma(gamma: f64, sigma: f64, psi: FunctionSpec, phi: FunctionSpec) -> Self {
        Self {
            gamma,
            risk: sigma.sqrt(),
            psi,
            phi,
        }
    }

    /// Risk variance σ = r².
    pub fn sigma(&self) -> f64 {
        self.risk * self.risk
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub knowledge: KnowledgeParams,
    pub trade: TradeParams,
}

impl ModelParams {
    /// Validate and return `self`, or the full list of violations.
    pub fn validated(self) -> Result<Self, ModelError> {
        let report = validate_params(&self);
        if report.is_ok() {
            Ok(self)
        } else {
            Err(ModelError::Invalid(report))
        }
    }
}

/// One violated constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LambdaMinusNotPositive(f64),
    LambdaPlusNotBelowOne(f64),
    LambdaBoundsInverted { minus: f64, plus: f64 },
    LambdaOutsideBounds { inf: f64, sup: f64, minus: f64, plus: f64 },
    LambdaBarOutOfRange(f64),
    LambdaBAboveBound { sup: f64, bar: f64 },
    DeltaNegative(f64),
    KappaBound { amplitude: f64, limit: f64 },
    Background(String),
    GammaOutOfRange(f64),
    RiskNegative(f64),
    Nonnegativity { margin: f64 },
    BadFunction { name: &'static str, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LambdaMinusNotPositive(v) => write!(f, "lambda_minus = {v} must be > 0"),
            Violation::LambdaPlusNotBelowOne(v) => write!(f, "lambda_plus = {v} must be < 1"),
            Violation::LambdaBoundsInverted { minus, plus } => {
                write!(f, "lambda_minus = {minus} exceeds lambda_plus = {plus}")
            }
            Violation::LambdaOutsideBounds {
                inf,
                sup,
                minus,
                plus,
            } => write!(
                f,
                "lambda(x) ranges over [{inf}, {sup}], outside declared bounds [{minus}, {plus}]"
            ),
            Violation::LambdaBarOutOfRange(v) => write!(f, "lambda_bar = {v} must lie in [0, 1)"),
            Violation::LambdaBAboveBound { sup, bar } => {
                write!(f, "lambda_B(x) reaches {sup}, above lambda_bar = {bar}")
            }
            Violation::DeltaNegative(v) => write!(f, "delta = {v} must be >= 0"),
            Violation::KappaBound { amplitude, limit } => write!(
                f,
                "kappa bound violated: sqrt(delta) = {amplitude} exceeds 1 - lambda_plus = {limit}"
            ),
            Violation::Background(msg) => write!(f, "background: {msg}"),
            Violation::GammaOutOfRange(v) => write!(f, "gamma = {v} must lie in (0, 1)"),
            Violation::RiskNegative(v) => write!(f, "risk amplitude r = {v} must be >= 0"),
            Violation::Nonnegativity { margin } => write!(
                f,
                "nonnegativity guarantee violated: 1 - gamma*sup(psi) - r*sup(phi) = {margin} < 0"
            ),
            Violation::BadFunction { name, reason } => write!(f, "{name}: {reason}"),
        }
    }
}

/// Every violated constraint of a parameter set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "parameters valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "- {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model parameters:\n{0}")]
    Invalid(ValidationReport),
    #[error("kappa = {kappa} is below the admissible bound {bound}")]
    KappaOutOfRange { kappa: f64, bound: f64 },
}

pub fn validate_knowledge(kp: &KnowledgeParams, out: &mut Vec<Violation>) {
    kp.lambda.check("lambda", out);
    kp.lambda_b.check("lambda_B", out);

    if !(kp.lambda_minus > 0.0) {
        out.push(Violation::LambdaMinusNotPositive(kp.lambda_minus));
    }
    if !(kp.lambda_plus < 1.0) {
        out.push(Violation::LambdaPlusNotBelowOne(kp.lambda_plus));
    }
    if kp.lambda_minus > kp.lambda_plus {
        out.push(Violation::LambdaBoundsInverted {
            minus: kp.lambda_minus,
            plus: kp.lambda_plus,
        });
    }
    let (inf, sup) = (kp.lambda.inf(), kp.lambda.sup());
    if inf < kp.lambda_minus || sup > kp.lambda_plus {
        out.push(Violation::LambdaOutsideBounds {
            inf,
            sup,
            minus: kp.lambda_minus,
            plus: kp.lambda_plus,
        });
    }
    if !(kp.lambda_bar >= 0.0 && kp.lambda_bar < 1.0) {
        out.push(Violation::LambdaBarOutOfRange(kp.lambda_bar));
    }
    if kp.lambda_b.sup() > kp.lambda_bar {
        out.push(Violation::LambdaBAboveBound {
            sup: kp.lambda_b.sup(),
            bar: kp.lambda_bar,
        });
    }

    if !(kp.delta >= 0.0 && kp.delta.is_finite()) {
        out.push(Violation::DeltaNegative(kp.delta));
    } else {
        let amplitude = kp.delta.sqrt();
        let limit = 1.0 - kp.lambda_plus;
        if amplitude > limit {
            out.push(Violation::KappaBound { amplitude, limit });
        }
    }

    match kp.background {
        BackgroundSpec::Uniform { upper } if !(upper.is_finite() && upper > 0.0) => out.push(
            Violation::Background(format!("uniform upper bound {upper} must be finite and > 0")),
        ),
        BackgroundSpec::PointMass { value } if !(value.is_finite() && value >= 0.0) => out.push(
            Violation::Background(format!("point mass {value} must be finite and >= 0")),
        ),
        _ => {}
    }
}

pub fn validate_trade(tp: &TradeParams, out: &mut Vec<Violation>) {
    tp.psi.check("psi", out);
    tp.phi.check("phi", out);
    if !(tp.gamma > 0.0 && tp.gamma < 1.0) {
        out.push(Violation::GammaOutOfRange(tp.gamma));
    }
    if !(tp.risk >= 0.0 && tp.risk.is_finite()) {
        out.push(Violation::RiskNegative(tp.risk));
    }
    let margin = 1.0 - tp.gamma * tp.psi.sup() - tp.risk * tp.phi.sup();
    if margin < 0.0 {
        out.push(Violation::Nonnegativity { margin });
    }
}

/// Check every invariant of `mp`, collecting all violations.
pub fn validate_params(mp: &ModelParams) -> ValidationReport {
    let mut violations = Vec::new();
    validate_knowledge(&mp.knowledge, &mut violations);
    validate_trade(&mp.trade, &mut violations);
    ValidationReport { violations }
}

#[inline]
pub fn eval_function(spec: &FunctionSpec, x: f64) -> f64 {
    spec.eval(x)
}

/// Knowledge rule without the κ admissibility check. Callers must draw κ from
/// a validated law.
#[inline]
pub(crate) fn knowledge_rule(x: f64, z: f64, kappa: f64, kp: &KnowledgeParams) -> f64 {
    (1.0 - kp.lambda.eval(x)) * x + kp.lambda_b.eval(x) * z + kappa * x
}

/// Post-interaction knowledge after one exchange with the background.
pub fn knowledge_post_interaction(
    x: f64,
    z: f64,
    kappa: f64,
    kp: &KnowledgeParams,
) -> Result<f64, ModelError> {
    let bound = kp.kappa_lower_bound();
    if kappa < bound {
        return Err(ModelError::KappaOutOfRange { kappa, bound });
    }
    Ok(knowledge_rule(x, z, kappa, kp))
}

/// Post-trade wealths `(v*, w*)` for agents `a = (x, v)` and `b = (y, w)`.
#[inline]
pub fn trade_post_interaction(
    a: Agent,
    b: Agent,
    eta1: f64,
    eta2: f64,
    tp: &TradeParams,
) -> (f64, f64) {
    let psi_x = tp.psi.eval(a.x);
    let psi_y = tp.psi.eval(b.x);
    let phi_x = tp.phi.eval(a.x);
    let phi_y = tp.phi.eval(b.x);
    let g = tp.gamma;
    let v_new = (1.0 - psi_x * g + phi_x * eta1) * a.v + psi_y * g * b.v;
    let w_new = (1.0 - psi_y * g + phi_y * eta2) * b.v + psi_x * g * a.v;
    (v_new, w_new)
}

/// Mean knowledge drift `D(x) = λ_B(x) M - λ(x) x`.
pub fn drift_d(x: f64, kp: &KnowledgeParams) -> f64 {
    kp.lambda_b.eval(x) * kp.background.mean() - kp.lambda.eval(x) * x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kp_const(lambda: f64, lambda_b: f64, delta: f64, background: BackgroundSpec) -> KnowledgeParams {
        KnowledgeParams::new(
            FunctionSpec::constant(lambda),
            FunctionSpec::constant(lambda_b),
            delta,
            background,
        )
    }

    fn trade(gamma: f64, risk: f64, psi: FunctionSpec, phi: FunctionSpec) -> TradeParams {
        TradeParams {
            gamma,
            risk,
            psi,
            phi,
        }
    }

    #[test]
    fn function_eval() {
        assert_eq!(FunctionSpec::power_law(2.0).eval(1.0), 0.25);
        assert_eq!(FunctionSpec::constant(1.0).eval(7.3), 1.0);
        assert_eq!(FunctionSpec::power_law(2.0).eval(0.0), 1.0);
        assert_abs_diff_eq!(FunctionSpec::power_law(1.5).eval(3.0), 0.125, epsilon = 1e-15);
        assert_eq!(
            FunctionSpec::power_law(2.0).scaled(0.1).eval(1.0),
            0.1 * 0.25
        );
    }

    #[test]
    fn knowledge_rule_examples() {
        let kp = kp_const(0.1, 0.1, 0.0, BackgroundSpec::default());
        assert_abs_diff_eq!(
            knowledge_post_interaction(1.0, 2.0, 0.0, &kp).unwrap(),
            1.1,
            epsilon = 1e-15
        );
        assert_eq!(knowledge_post_interaction(0.0, 0.0, 0.0, &kp).unwrap(), 0.0);

        let kp = kp_const(0.5, 0.0, 0.0625, BackgroundSpec::default());
        assert_abs_diff_eq!(
            knowledge_post_interaction(2.0, 3.0, -0.25, &kp).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn knowledge_rule_rejects_inadmissible_kappa() {
        let kp = kp_const(0.1, 0.1, 0.1, BackgroundSpec::default());
        let err = knowledge_post_interaction(1.0, 1.0, -0.95, &kp).unwrap_err();
        assert!(matches!(err, ModelError::KappaOutOfRange { .. }));
        assert!(knowledge_post_interaction(1.0, 1.0, -0.9, &kp).is_ok());
    }

    #[test]
    fn trade_examples() {
        let tp = trade(0.1, 0.0, FunctionSpec::constant(1.0), FunctionSpec::constant(1.0));
        let (v, w) = trade_post_interaction(Agent::new(0.3, 1.0), Agent::new(2.0, 1.0), 0.0, 0.0, &tp);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w, 1.0, epsilon = 1e-15);

        let r = 0.1f64.sqrt();
        let tp = trade(0.1, r, FunctionSpec::constant(1.0), FunctionSpec::power_law(2.0));
        let (v, w) = trade_post_interaction(Agent::new(1.0, 1.0), Agent::new(0.0, 1.0), r, -r, &tp);
        assert_abs_diff_eq!(v, 1.079057, epsilon = 1e-6);
        assert_abs_diff_eq!(w, 0.683772, epsilon = 1e-6);
    }

    #[test]
    fn constant_modulation_matches_plain_cpt_rule() {
        let tp = trade(0.3, 0.2, FunctionSpec::constant(1.0), FunctionSpec::constant(1.0));
        let (a, b) = (Agent::new(4.0, 2.5), Agent::new(0.2, 0.7));
        for (e1, e2) in [(0.2, 0.2), (0.2, -0.2), (-0.2, 0.2), (-0.2, -0.2)] {
            let (v, w) = trade_post_interaction(a, b, e1, e2, &tp);
            assert_eq!(v, (1.0 - 0.3 + e1) * a.v + 0.3 * b.v);
            assert_eq!(w, (1.0 - 0.3 + e2) * b.v + 0.3 * a.v);
        }
    }

    #[test]
    fn validation_examples() {
        let kp = kp_const(0.1, 0.1, 0.1, BackgroundSpec::default());
        let mut out = Vec::new();
        validate_knowledge(&kp, &mut out);
        assert!(out.is_empty(), "{out:?}");

        let ok = trade(0.1, 0.5, FunctionSpec::constant(1.0), FunctionSpec::constant(1.0));
        let mut out = Vec::new();
        validate_trade(&ok, &mut out);
        assert!(out.is_empty());

        let bad = trade(0.5, 0.6, FunctionSpec::constant(1.0), FunctionSpec::constant(1.0));
        let mut out = Vec::new();
        validate_trade(&bad, &mut out);
        assert_eq!(out.len(), 1);
        match &out[0] {
            Violation::Nonnegativity { margin } => assert_abs_diff_eq!(*margin, -0.1, epsilon = 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        assert!(out[0].to_string().contains("nonnegativity guarantee violated"));
    }

    #[test]
    fn validation_collects_every_violation() {
        let mp = ModelParams {
            knowledge: KnowledgeParams {
                lambda: FunctionSpec::constant(0.1),
                lambda_b: FunctionSpec::constant(0.1),
                lambda_minus: 0.1,
                lambda_plus: 0.1,
                lambda_bar: 0.1,
                delta: 0.95,
                background: BackgroundSpec::Uniform { upper: -1.0 },
            },
            trade: trade(1.5, 0.6, FunctionSpec::constant(1.0), FunctionSpec::constant(1.0)),
        };
        let report = validate_params(&mp);
        let kinds: Vec<_> = report.violations.iter().map(std::mem::discriminant).collect();
        assert_eq!(report.violations.len(), 4, "{report}");
        assert!(kinds.contains(&std::mem::discriminant(&Violation::GammaOutOfRange(0.0))));
        assert!(mp.validated().is_err());
    }

    #[test]
    fn power_law_lambda_cannot_satisfy_positive_lower_bound() {
        let kp = KnowledgeParams::new(
            FunctionSpec::power_law(1.0).scaled(0.5),
            FunctionSpec::constant(0.1),
            0.0,
            BackgroundSpec::default(),
        );
        let mut out = Vec::new();
        validate_knowledge(&kp, &mut out);
        assert!(out
            .iter()
            .any(|v| matches!(v, Violation::LambdaMinusNotPositive(_))));
    }

    #[test]
    fn drift_examples() {
        let kp = kp_const(0.1, 0.1, 0.0, BackgroundSpec::PointMass { value: 1.0 });
        assert_abs_diff_eq!(drift_d(1.0, &kp), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(drift_d(0.0, &kp), 0.1, epsilon = 1e-15);
        let kp = kp_const(0.2, 0.1, 0.0, BackgroundSpec::PointMass { value: 2.0 });
        assert_abs_diff_eq!(drift_d(3.0, &kp), -0.4, epsilon = 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_function() -> impl Strategy<Value = FunctionSpec> {
            prop_oneof![
                (0.01f64..1.0).prop_map(FunctionSpec::constant),
                (0.1f64..4.0).prop_map(FunctionSpec::power_law),
            ]
        }

        proptest! {
            #[test]
            fn power_law_in_unit_interval_and_non_increasing(p in 0.01f64..6.0, x in 0.0f64..1e3, dx in 0.0f64..10.0) {
                let f = FunctionSpec::power_law(p);
                let a = f.eval(x);
                prop_assert!(a > 0.0 && a <= 1.0);
                prop_assert!(f.eval(x + dx) <= a);
            }

            #[test]
            fn knowledge_nonnegative_and_monotone_in_z(
                lambda in 0.01f64..0.99,
                lambda_b in 0.0f64..0.99,
                frac in 0.0f64..1.0,
                sign in any::<bool>(),
                x in 0.0f64..100.0,
                z in 0.0f64..10.0,
                dz in 0.0f64..10.0,
            ) {
                let amp = frac * (1.0 - lambda);
                let kp = kp_const(lambda, lambda_b, amp * amp, BackgroundSpec::default());
                let kappa = if sign { amp } else { -amp };
                let a = knowledge_post_interaction(x, z, kappa, &kp).unwrap();
                let b = knowledge_post_interaction(x, z + dz, kappa, &kp).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!(b >= a);
            }

            #[test]
            fn trades_nonnegative_and_conservative_in_mean(
                gamma in 0.01f64..0.99,
                frac in 0.0f64..1.0,
                psi in any_function(),
                phi in any_function(),
                x in 0.0f64..50.0, v in 0.0f64..50.0,
                y in 0.0f64..50.0, w in 0.0f64..50.0,
            ) {
                let headroom = 1.0 - gamma * psi.sup();
                prop_assume!(headroom > 0.0);
                let r = frac * headroom / phi.sup();
                let tp = trade(gamma, r, psi, phi);
                let mut violations = Vec::new();
                validate_trade(&tp, &mut violations);
                prop_assert!(violations.is_empty());
                let (a, b) = (Agent::new(x, v), Agent::new(y, w));
                let mut total = 0.0;
                for e1 in [r, -r] {
                    for e2 in [r, -r] {
                        let (vs, ws) = trade_post_interaction(a, b, e1, e2, &tp);
                        prop_assert!(vs >= 0.0 && ws >= 0.0);
                        total += vs + ws;
                    }
                }
                let scale = (v + w).max(1.0);
                prop_assert!((total / 4.0 - (v + w)).abs() <= 1e-12 * scale);
            }
        }
    }
}
