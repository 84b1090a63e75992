//! Agent bidding: follow the dashboard, bid a constant, or learn with Hedge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dashboards::Dashboard;
use crate::error::RuleError;
use crate::seeding::{substream, tag};

/// Default number of Hedge arms.
pub const HEDGE_ARMS: usize = 257;

/// Per-stage values of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValuePath {
    Static {
        value: f64,
    },
    /// Redrawn from U[lo, hi] every stage.
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Stage s uses `values[s-1]`; the last value repeats.
    Explicit {
        values: Vec<f64>,
    },
}

impl ValuePath {
    pub fn value(&self, seed: u64, stage: usize, agent: usize) -> f64 {
        match self {
            Self::Static { value } => *value,
            Self::Uniform { lo, hi } => {
                let u: f64 = substream(seed, tag::VALUES, stage, agent).gen();
                lo + (hi - lo) * u
            }
            Self::Explicit { values } => values[(stage - 1).min(values.len() - 1)],
        }
    }

    /// Checks every value the path can produce lies in `[0, vmax]`.
    pub fn validate(&self, vmax: f64) -> Result<(), String> {
        let ok = |v: f64| (0.0..=vmax).contains(&v);
        match self {
            Self::Static { value } if !ok(*value) => Err(format!("static value {value} outside [0, {vmax}]")),
            Self::Uniform { lo, hi } if !(ok(*lo) && ok(*hi) && lo <= hi) => {
                Err(format!("uniform range [{lo}, {hi}] outside [0, {vmax}]"))
            }
            Self::Explicit { values } if values.is_empty() => Err("explicit value path is empty".into()),
            Self::Explicit { values } => match values.iter().find(|&&v| !ok(v)) {
                Some(v) => Err(format!("explicit value {v} outside [0, {vmax}]")),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    FollowDashboard,
    ConstantBid {
        bid: f64,
    },
    /// Full-information exponential weights over a uniform bid grid on `[0, vmax]`.
    Hedge {
        #[serde(default = "default_arms")]
        arms: usize,
    },
}

fn default_arms() -> usize {
    HEDGE_ARMS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub values: ValuePath,
    pub strategy: Strategy,
}

/// Exponential-weights state: cumulative utility per arm.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerState {
    pub grid: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub stages: usize,
    /// Utilities are divided by this before weighting.
    pub scale: f64,
}

impl LearnerState {
    pub fn new(arms: usize, vmax: f64) -> Result<Self, RuleError> {
        Ok(Self {
            grid: crate::rulekit::uniform_grid(vmax, arms)?,
            cumulative: vec![0.0; arms],
            stages: 0,
            scale: vmax,
        })
    }

    /// Step size √(8 ln K / t) for the upcoming stage t.
    pub fn rate(&self) -> f64 {
        (8.0 * (self.grid.len() as f64).ln() / (self.stages + 1) as f64).sqrt()
    }

    /// Normalized weights for the upcoming stage.
    pub fn weights(&self) -> Vec<f64> {
        let eta = self.rate() / self.scale;
        let top = self.cumulative.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.cumulative.iter().map(|u| (eta * (u - top)).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// Draws an arm index from the current weights.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let w = self.weights();
        let mut u: f64 = rng.gen();
        for (i, p) in w.iter().enumerate() {
            if u < *p {
                return i;
            }
            u -= p;
        }
        w.len() - 1
    }
}

/// Adds one stage of per-arm utilities.
pub fn learner_update(state: &mut LearnerState, utilities: &[f64]) {
    for (c, u) in state.cumulative.iter_mut().zip(utilities) {
        *c += u;
    }
    state.stages += 1;
}

/// Bid for `value` this stage.
///
/// ```
/// use dashmech::agents::{act, Strategy};
/// use dashmech::dashboards::Dashboard;
/// use dashmech::rulekit::{MonotoneRule, PaymentFormat};
/// let d = Dashboard::new(MonotoneRule::linear(1.0, 1025).unwrap(), PaymentFormat::WinnerPaysBid, 0.0, 1);
/// let b = act(&Strategy::FollowDashboard, None, &d, 0.5, 0, 1, 0).unwrap();
/// assert!((b - 0.25).abs() < 1e-12);
/// ```
pub fn act(
    strategy: &Strategy,
    state: Option<&LearnerState>,
    dashboard: &Dashboard,
    value: f64,
    seed: u64,
    stage: usize,
    agent: usize,
) -> Result<f64, RuleError> {
    match strategy {
        Strategy::FollowDashboard => dashboard.bid(value),
        Strategy::ConstantBid { bid } => Ok(*bid),
        Strategy::Hedge { .. } => {
            let state = state.ok_or_else(|| RuleError::InvalidKnots("hedge agent without learner state".into()))?;
            let mut rng = substream(seed, tag::LEARNER, stage, agent);
            Ok(state.grid[state.sample(&mut rng)])
        }
    }
}
