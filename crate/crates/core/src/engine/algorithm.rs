use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, RuleError};
use crate::rulekit::{MonotoneRule, Tolerances};
use crate::seeding::{substream, tag};
use crate::singlecall::Blackbox;

/// Allocation algorithm as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmSpec {
    /// xᵢ = vᵢ / (Σⱼ vⱼ + reserve), outcomes drawn independently.
    ProportionalShare {
        #[serde(default)]
        reserve: f64,
    },
    /// One item, winner drawn with probability ∝ exp(vᵢ/T).
    SoftmaxSingleItem { temperature: f64 },
    /// Proportional share with the reserve redrawn from U[lo, hi] each stage.
    RandomProportionalShare { reserve_lo: f64, reserve_hi: f64 },
    /// Softmax with the temperature redrawn from U[lo, hi] each stage.
    RandomSoftmax { temperature_lo: f64, temperature_hi: f64 },
    /// Agent i is served with probability rules[i](vᵢ), independently of others.
    FixedRules { rules: Vec<MonotoneRule> },
}

impl AlgorithmSpec {
    pub fn validate(&self, n: usize) -> Result<(), String> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        match self {
            Self::ProportionalShare { reserve } if !(*reserve >= 0.0) => {
                Err(format!("reserve {reserve} must be non-negative"))
            }
            Self::SoftmaxSingleItem { temperature } if !pos(*temperature) => {
                Err(format!("temperature {temperature} must be positive"))
            }
            Self::RandomProportionalShare { reserve_lo, reserve_hi }
                if !(*reserve_lo >= 0.0 && reserve_lo <= reserve_hi) =>
            {
                Err(format!("reserve range [{reserve_lo}, {reserve_hi}] is invalid"))
            }
            Self::RandomSoftmax { temperature_lo, temperature_hi }
                if !(pos(*temperature_lo) && temperature_lo <= temperature_hi) =>
            {
                Err(format!("temperature range [{temperature_lo}, {temperature_hi}] is invalid"))
            }
            Self::FixedRules { rules } if rules.len() != n => {
                Err(format!("fixed_rules has {} rules for {n} agents", rules.len()))
            }
            _ => Ok(()),
        }
    }

    /// Parameters are redrawn every stage.
    pub fn is_random(&self) -> bool {
        matches!(self, Self::RandomProportionalShare { .. } | Self::RandomSoftmax { .. })
    }

    /// The algorithm used in `stage`, drawing any random parameters from the run seed.
    pub fn instantiate(
        &self,
        n: usize,
        vmax: f64,
        seed: u64,
        stage: usize,
    ) -> Result<AllocationAlgorithm, EngineError> {
        let rng = || -> f64 { substream(seed, tag::ALGORITHM, stage, 0).gen() };
        let kind = match self {
            Self::ProportionalShare { reserve } => AlgorithmKind::ProportionalShare { reserve: *reserve },
            Self::SoftmaxSingleItem { temperature } => AlgorithmKind::SoftmaxSingleItem { temperature: *temperature },
            Self::RandomProportionalShare { reserve_lo, reserve_hi } => {
                AlgorithmKind::ProportionalShare { reserve: reserve_lo + (reserve_hi - reserve_lo) * rng() }
            }
            Self::RandomSoftmax { temperature_lo, temperature_hi } => AlgorithmKind::SoftmaxSingleItem {
                temperature: temperature_lo + (temperature_hi - temperature_lo) * rng(),
            },
            Self::FixedRules { rules } => AlgorithmKind::FixedRules(rules.clone()),
        };
        AllocationAlgorithm::new(kind, n, vmax)
    }
}

/// Allocation probabilities of every agent at a value profile.
pub type ProfileFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum AlgorithmKind {
    ProportionalShare {
        reserve: f64,
    },
    SoftmaxSingleItem {
        temperature: f64,
    },
    FixedRules(Vec<MonotoneRule>),
    /// User-supplied marginals; `single_item` selects categorical realization.
    Custom {
        probs: ProfileFn,
        single_item: bool,
    },
}

impl fmt::Debug for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ProportionalShare { reserve } => write!(f, "ProportionalShare({reserve})"),
            Self::SoftmaxSingleItem { temperature } => write!(f, "SoftmaxSingleItem({temperature})"),
            Self::FixedRules(r) => write!(f, "FixedRules({})", r.len()),
            Self::Custom { single_item, .. } => write!(f, "Custom(single_item={single_item})"),
        }
    }
}

/// A stage allocation algorithm over `n` agents with values in `[0, vmax]`.
#[derive(Clone, Debug)]
pub struct AllocationAlgorithm {
    pub kind: AlgorithmKind,
    pub n: usize,
    pub vmax: f64,
}

impl AllocationAlgorithm {
    pub fn new(kind: AlgorithmKind, n: usize, vmax: f64) -> Result<Self, EngineError> {
        if n == 0 {
            return Err(EngineError::Config("at least one agent is required".into()));
        }
        if let AlgorithmKind::FixedRules(r) = &kind {
            if r.len() != n {
                return Err(EngineError::Config(format!("{} fixed rules for {n} agents", r.len())));
            }
        }
        Ok(Self { kind, n, vmax })
    }

    pub fn single_item(&self) -> bool {
        match &self.kind {
            AlgorithmKind::SoftmaxSingleItem { .. } => true,
            AlgorithmKind::Custom { single_item, .. } => *single_item,
            _ => false,
        }
    }

    /// Allocation probability of each agent at `profile`.
    pub fn probs(&self, profile: &[f64]) -> Vec<f64> {
        match &self.kind {
            AlgorithmKind::ProportionalShare { reserve } => {
                let total: f64 = profile.iter().sum::<f64>() + reserve;
                if total > 0.0 {
                    profile.iter().map(|v| v / total).collect()
                } else {
                    vec![0.0; profile.len()]
                }
            }
            AlgorithmKind::SoftmaxSingleItem { temperature } => {
                let top = profile.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = profile.iter().map(|v| ((v - top) / temperature).exp()).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            }
            AlgorithmKind::FixedRules(rules) => profile.iter().zip(rules).map(|(&v, r)| r.at(v)).collect(),
            AlgorithmKind::Custom { probs, .. } => probs(profile),
        }
    }

    /// Agent `agent`'s probability as a function of its own value z, others fixed.
    fn projection(&self, agent: usize, profile: &[f64]) -> Box<dyn Fn(f64) -> f64 + '_> {
        let others = || profile.iter().enumerate().filter(move |&(j, _)| j != agent).map(|(_, &v)| v);
        match &self.kind {
            AlgorithmKind::ProportionalShare { reserve } => {
                let s: f64 = others().sum::<f64>() + reserve;
                Box::new(move |z| if z + s > 0.0 { z / (z + s) } else { 0.0 })
            }
            AlgorithmKind::SoftmaxSingleItem { temperature } => {
                let t = *temperature;
                let rest: Vec<f64> = others().collect();
                Box::new(move |z| 1.0 / (1.0 + rest.iter().map(|v| ((v - z) / t).exp()).sum::<f64>()))
            }
            AlgorithmKind::FixedRules(rules) => Box::new(move |z| rules[agent].at(z)),
            AlgorithmKind::Custom { probs, .. } => {
                let base = profile.to_vec();
                Box::new(move |z| {
                    let mut p = base.clone();
                    p[agent] = z;
                    probs(&p)[agent]
                })
            }
        }
    }

    /// One 0/1 outcome per agent: a categorical winner for single-item
    /// algorithms, independent draws otherwise.
    pub fn realize(&self, probs: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        if self.single_item() {
            let mut u: f64 = rng.gen();
            let mut out = vec![0.0; probs.len()];
            for (i, p) in probs.iter().enumerate() {
                if u < *p {
                    out[i] = 1.0;
                    break;
                }
                u -= p;
            }
            out
        } else {
            probs.iter().map(|&p| f64::from(rng.gen::<f64>() < p)).collect()
        }
    }
}

impl Blackbox for AllocationAlgorithm {
    fn allocate(&self, values: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.probs(values);
        self.realize(&p, rng)
    }
}

/// Samples z ↦ xᵢ(z, v₋ᵢ) on the knots of `grid`; fails if the result is not strict.
///
/// ```
/// use dashmech::engine::{project_rule, AlgorithmKind, AllocationAlgorithm};
/// use dashmech::rulekit::{MonotoneRule, Tolerances};
/// let alg = AllocationAlgorithm::new(AlgorithmKind::ProportionalShare { reserve: 0.0 }, 2, 4.0).unwrap();
/// let grid = MonotoneRule::linear(4.0, 1025).unwrap();
/// let x = project_rule(&alg, 0, &[0.0, 2.0], &grid, Tolerances::default()).unwrap();
/// assert!((x.eval(1.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
/// ```
pub fn project_rule(
    alg: &AllocationAlgorithm,
    agent: usize,
    profile: &[f64],
    grid: &MonotoneRule,
    tol: Tolerances,
) -> Result<MonotoneRule, RuleError> {
    let f = alg.projection(agent, profile);
    let rule = grid.map_probs(|v, _| f(v))?;
    rule.check_strict(tol.min_slope)?;
    Ok(rule)
}
