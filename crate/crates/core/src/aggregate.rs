//! Server-side aggregation.
//!
//! FedAvg replaces the global head with the sample-weighted mean of the
//! client heads. Fine-tuned aggregation (FTA) forms the same weighted mean
//! as a delta from the current global head,
//!
//! ```text
//! Δ = Σ_k (n_k / N) · (W_k − W_global)
//! F(x) = validation_loss(W_global + x · Δ)
//! ```
//!
//! minimizes `F` over `[x_lower, x_upper]` with golden-section search, and
//! steps by the midpoint `σ` of the final bracket. `σ = 1` is FedAvg.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{axpy, weighted_mean, ParamVector};

/// `(√5 − 1) / 2`.
pub const GOLDEN_RATIO: f64 = 0.618_033_988_749_894_9;

/// A client's trained head and its sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub head: ParamVector,
    pub samples: usize,
}

/// Golden-section search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GssConfig {
    #[serde(default = "GssConfig::default_lower")]
    pub x_lower: f64,
    #[serde(default = "GssConfig::default_upper")]
    pub x_upper: f64,
    #[serde(default = "GssConfig::default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "GssConfig::default_max_iterations")]
    pub max_iterations: usize,
    /// Reuse the surviving probe's value instead of evaluating both probes
    /// every iteration.
    #[serde(default)]
    pub reuse_probes: bool,
}

impl GssConfig {
    fn default_lower() -> f64 {
        0.0
    }
    fn default_upper() -> f64 {
        2.0
    }
    fn default_tolerance() -> f64 {
        0.01
    }
    fn default_max_iterations() -> usize {
        50
    }

    pub fn new(x_lower: f64, x_upper: f64, tolerance: f64) -> Self {
        Self {
            x_lower,
            x_upper,
            tolerance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.x_lower.is_finite() && self.x_upper.is_finite();
        if !finite || self.x_lower >= self.x_upper {
            return Err(Error::Argument(format!(
                "search interval [{}, {}] is empty or not finite",
                self.x_lower, self.x_upper
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.tolerance >= self.x_upper - self.x_lower {
            return Err(Error::Argument(format!(
                "tolerance {} must be positive and below the interval width {}",
                self.tolerance,
                self.x_upper - self.x_lower
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Argument("max iterations must be positive".into()));
        }
        Ok(())
    }

    /// Iterations needed to shrink the initial bracket to the tolerance.
    pub fn expected_iterations(&self) -> usize {
        ((self.tolerance / (self.x_upper - self.x_lower)).ln() / GOLDEN_RATIO.ln()).ceil() as usize
    }
}

impl Default for GssConfig {
    fn default() -> Self {
        Self {
            x_lower: Self::default_lower(),
            x_upper: Self::default_upper(),
            tolerance: Self::default_tolerance(),
            max_iterations: Self::default_max_iterations(),
            reuse_probes: false,
        }
    }
}

/// One bracket-shrinking step. Bounds are those in force before the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GssStep {
    pub x_lower: f64,
    pub x_upper: f64,
    pub x1: f64,
    pub f1: f64,
    pub x2: f64,
    pub f2: f64,
}

impl GssStep {
    pub fn width(&self) -> f64 {
        self.x_upper - self.x_lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GssOutcome {
    /// Midpoint of the final bracket.
    pub x_star: f64,
    pub steps: Vec<GssStep>,
    pub final_lower: f64,
    pub final_upper: f64,
    /// Every objective evaluation as `(x, F(x))`, in call order.
    pub evaluations: Vec<(f64, f64)>,
}

impl GssOutcome {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn converged(&self, tolerance: f64) -> bool {
        self.final_upper - self.final_lower <= tolerance
    }
}

/// Golden-section search for the minimum of `objective` on the configured
/// bracket.
pub fn gss_minimize(mut objective: impl FnMut(f64) -> f64, cfg: &GssConfig) -> Result<GssOutcome> {
    gss_minimize_with(|x| Ok(objective(x)), cfg)
}

/// As [`gss_minimize`], for objectives that can fail.
///
/// Each step probes `x1 = x_U − φ·w` and `x2 = x_L + φ·w`. If
/// `F(x1) < F(x2)` the upper bound moves to `x2`, otherwise (ties included)
/// the lower bound moves to `x1`. Stops once `x_U − x_L ≤ ε` or after
/// `max_iterations` steps.
pub fn gss_minimize_with(
    mut objective: impl FnMut(f64) -> Result<f64>,
    cfg: &GssConfig,
) -> Result<GssOutcome> {
    cfg.validate()?;
    let mut evaluations = Vec::new();
    let mut eval = |x: f64| -> Result<f64> {
        let f = objective(x)?;
        if !f.is_finite() {
            return Err(Error::NonFiniteObjective { x });
        }
        evaluations.push((x, f));
        Ok(f)
    };

    let (mut lo, mut hi) = (cfg.x_lower, cfg.x_upper);
    let mut steps = Vec::new();
    // Probe carried over from the previous step when reusing.
    let mut carried: Option<Carried> = None;
    while hi - lo > cfg.tolerance && steps.len() < cfg.max_iterations {
        let w = hi - lo;
        let (x1, f1, x2, f2) = match carried.take() {
            Some(Carried::AsX1(x1, f1)) => {
                let x2 = lo + GOLDEN_RATIO * w;
                (x1, f1, x2, eval(x2)?)
            }
            Some(Carried::AsX2(x2, f2)) => {
                let x1 = hi - GOLDEN_RATIO * w;
                (x1, eval(x1)?, x2, f2)
            }
            None => {
                let x1 = hi - GOLDEN_RATIO * w;
                let x2 = lo + GOLDEN_RATIO * w;
                let f1 = eval(x1)?;
                (x1, f1, x2, eval(x2)?)
            }
        };
        steps.push(GssStep {
            x_lower: lo,
            x_upper: hi,
            x1,
            f1,
            x2,
            f2,
        });
        if f1 < f2 {
            hi = x2;
            if cfg.reuse_probes {
                carried = Some(Carried::AsX2(x1, f1));
            }
        } else {
            lo = x1;
            if cfg.reuse_probes {
                carried = Some(Carried::AsX1(x2, f2));
            }
        }
    }
    Ok(GssOutcome {
        x_star: (hi + lo) / 2.0,
        steps,
        final_lower: lo,
        final_upper: hi,
        evaluations,
    })
}

enum Carried {
    AsX1(f64, f64),
    AsX2(f64, f64),
}

fn sorted_updates<'a>(global: &ParamVector, updates: &'a [LocalUpdate]) -> Result<Vec<&'a LocalUpdate>> {
    if updates.is_empty() {
        return Err(Error::Argument("no local updates to aggregate".into()));
    }
    let mut sorted: Vec<&LocalUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Argument(format!(
                "client {} submitted more than one update",
                pair[0].client_id
            )));
        }
    }
    for u in &sorted {
        Error::check_len(global.len(), u.head.len())?;
        if u.samples == 0 {
            return Err(Error::Argument(format!("client {} reported zero samples", u.client_id)));
        }
    }
    Ok(sorted)
}

/// `Σ (n_k / N) · W_k`, summed in ascending client-id order.
pub fn fedavg_aggregate(global: &ParamVector, updates: &[LocalUpdate]) -> Result<ParamVector> {
    let sorted = sorted_updates(global, updates)?;
    let heads: Vec<&ParamVector> = sorted.iter().map(|u| &u.head).collect();
    let weights: Vec<f64> = sorted.iter().map(|u| u.samples as f64).collect();
    weighted_mean(&heads, &weights)
}

/// `Σ (n_k / N) · (W_k − W_global)`, summed in ascending client-id order.
pub fn aggregated_delta(global: &ParamVector, updates: &[LocalUpdate]) -> Result<ParamVector> {
    let sorted = sorted_updates(global, updates)?;
    let deltas = sorted
        .iter()
        .map(|u| u.head.sub(global))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ParamVector> = deltas.iter().collect();
    let weights: Vec<f64> = sorted.iter().map(|u| u.samples as f64).collect();
    weighted_mean(&refs, &weights)
}

/// Outcome of one server aggregation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationResult {
    pub new_head: ParamVector,
    /// Step applied to the averaged delta; 1.0 for FedAvg.
    pub sigma: f64,
    /// Objective evaluations `(x, F(x))` made by the search.
    pub evaluations: Vec<(f64, f64)>,
    pub iterations: usize,
    pub steps: Vec<GssStep>,
}

/// Fine-tuned aggregation: golden-section search over the step `σ` applied
/// to the averaged client delta, minimizing `evaluate_loss`.
pub fn fta_aggregate(
    global: &ParamVector,
    updates: &[LocalUpdate],
    mut evaluate_loss: impl FnMut(&ParamVector) -> Result<f64>,
    cfg: &GssConfig,
) -> Result<AggregationResult> {
    cfg.validate()?;
    let delta = aggregated_delta(global, updates)?;
    let outcome = gss_minimize_with(
        |x| {
            let candidate = axpy(x, &delta, global)?;
            evaluate_loss(&candidate)
        },
        cfg,
    )?;
    let sigma = outcome.x_star;
    Ok(AggregationResult {
        new_head: axpy(sigma, &delta, global)?,
        sigma,
        iterations: outcome.iterations(),
        evaluations: outcome.evaluations,
        steps: outcome.steps,
    })
}

/// Server aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    Fedavg,
    Fta,
}

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::Fedavg => "fedavg",
            Aggregator::Fta => "fta",
        }
    }

    pub fn aggregate(
        &self,
        global: &ParamVector,
        updates: &[LocalUpdate],
        evaluate_loss: impl FnMut(&ParamVector) -> Result<f64>,
        gss: &GssConfig,
    ) -> Result<AggregationResult> {
        match self {
            Aggregator::Fedavg => Ok(AggregationResult {
                new_head: fedavg_aggregate(global, updates)?,
                sigma: 1.0,
                evaluations: Vec::new(),
                iterations: 0,
                steps: Vec::new(),
            }),
            Aggregator::Fta => fta_aggregate(global, updates, evaluate_loss, gss),
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fedavg" => Ok(Aggregator::Fedavg),
            "fta" => Ok(Aggregator::Fta),
            other => Err(Error::Argument(format!(
                "unknown aggregator `{other}` (expected fedavg or fta)"
            ))),
        }
    }
}
