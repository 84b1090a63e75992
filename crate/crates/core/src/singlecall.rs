//! Single-call implementation: one blackbox call per stage with uniform
//! exploration, implicit payments, and dashboards fitted by isotonic regression.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RuleError, SingleCallError};
use crate::rebalancing::{BalanceLedger, LedgerEntry};
use crate::rulekit::MonotoneRule;
use crate::seeding::{substream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentConfig {
    /// Probability of replacing an input by a uniform draw.
    pub rho: f64,
    pub vmax: f64,
    pub seed: u64,
}

impl InstrumentConfig {
    pub fn new(rho: f64, vmax: f64, seed: u64) -> Result<Self, SingleCallError> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(SingleCallError::Rho(rho));
        }
        if !(vmax > 0.0 && vmax.is_finite()) {
            return Err(RuleError::Domain(vmax).into());
        }
        Ok(Self { rho, vmax, seed })
    }
}

/// A randomized allocation algorithm called once per stage.
///
/// Takes the input profile and a random stream and returns one 0/1 outcome per
/// agent. It must be a pure function of its arguments.
pub trait Blackbox {
    fn allocate(&self, values: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
}

impl<F: Fn(&[f64], &mut ChaCha8Rng) -> Vec<f64>> Blackbox for F {
    fn allocate(&self, values: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self(values, rng)
    }
}

/// One agent's share of an instrumented draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDraw {
    /// Input value vᵢ.
    pub value: f64,
    /// Value passed to the blackbox.
    pub sampled: f64,
    pub explored: bool,
    /// Realized instrumented allocation.
    pub realized: f64,
    /// Realized allocation at the agent's own input, zero when explored.
    pub own_alloc: f64,
    /// Below indicator: realized·vmax/vᵢ when the explored input fell below vᵢ.
    pub below: f64,
    /// Implicit payment vᵢ·(own − (1−ρ)/ρ·below).
    pub payment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentedOutcome {
    pub agents: Vec<AgentDraw>,
}

/// Runs the blackbox once on inputs each replaced by U[0, vmax] with probability ρ.
///
/// ```
/// use dashmech::singlecall::{instrument_draw, InstrumentConfig};
/// use rand_chacha::ChaCha8Rng;
/// let cfg = InstrumentConfig::new(0.2, 1.0, 7).unwrap();
/// let always = |v: &[f64], _: &mut ChaCha8Rng| vec![1.0; v.len()];
/// let out = instrument_draw(&always, &[0.5, 0.0], &cfg, 1).unwrap();
/// assert_eq!(out.agents[1].payment, 0.0);
/// ```
pub fn instrument_draw<B: Blackbox + ?Sized>(
    blackbox: &B,
    values: &[f64],
    cfg: &InstrumentConfig,
    stage: usize,
) -> Result<InstrumentedOutcome, SingleCallError> {
    let mut sampled = Vec::with_capacity(values.len());
    let mut explored = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if !(0.0..=cfg.vmax).contains(&v) {
            return Err(RuleError::Domain(v).into());
        }
        let mut rng = substream(cfg.seed, tag::EXPLORE, stage, i);
        let e = rng.gen::<f64>() < cfg.rho;
        explored.push(e);
        sampled.push(if e { rng.gen::<f64>() * cfg.vmax } else { v });
    }
    let mut rng = substream(cfg.seed, tag::BLACKBOX, stage, 0);
    let realized = blackbox.allocate(&sampled, &mut rng);
    if realized.len() != values.len() {
        return Err(SingleCallError::Arity(realized.len(), values.len()));
    }
    if let Some(&bad) = realized.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(SingleCallError::Protocol(bad));
    }
    let odds = (1.0 - cfg.rho) / cfg.rho;
    let agents = (0..values.len())
        .map(|i| {
            let v = values[i];
            let x = realized[i];
            let own_alloc = if explored[i] { 0.0 } else { x };
            let below = if explored[i] && sampled[i] < v { x * cfg.vmax / v } else { 0.0 };
            AgentDraw {
                value: v,
                sampled: sampled[i],
                explored: explored[i],
                realized: x,
                own_alloc,
                below,
                payment: v * (own_alloc - odds * below),
            }
        })
        .collect();
    Ok(InstrumentedOutcome { agents })
}

/// Expected instrumented rule (1−ρ)·x(v) + ρ·avg.
pub fn instrumented_rule(valloc: &MonotoneRule, rho: f64, avg_alloc: f64) -> Result<MonotoneRule, SingleCallError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(SingleCallError::Rho(rho));
    }
    Ok(valloc.map_probs(|_, p| (1.0 - rho) * p + rho * avg_alloc)?)
}

/// A pooled block of the isotonic fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsoBlock {
    /// Smallest and largest value in the block.
    pub lo: f64,
    pub hi: f64,
    /// Mean outcome of the block.
    pub level: f64,
    pub weight: f64,
}

/// Pool-adjacent-violators fit of outcomes against values (least squares, non-decreasing).
pub fn isotonic_blocks(points: &[(f64, f64)]) -> Result<Vec<IsoBlock>, SingleCallError> {
    if points.is_empty() {
        return Err(SingleCallError::Empty);
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut stack: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(sorted.len());
    for &(v, y) in &sorted {
        match stack.last_mut() {
            // equal values share one fitted level
            Some(top) if top.1 == v => {
                top.2 += y;
                top.3 += 1.0;
            }
            _ => stack.push((v, v, y, 1.0)),
        }
        while stack.len() >= 2 {
            let n = stack.len();
            let (a, b) = (stack[n - 2], stack[n - 1]);
            if a.2 / a.3 < b.2 / b.3 {
                break;
            }
            stack[n - 2] = (a.0, b.1, a.2 + b.2, a.3 + b.3);
            stack.pop();
        }
    }
    Ok(stack.into_iter().map(|(lo, hi, sum, weight)| IsoBlock { lo, hi, level: sum / weight, weight }).collect())
}

/// Fitted level for each input point, in input order.
pub fn isotonic_levels(points: &[(f64, f64)]) -> Result<Vec<f64>, SingleCallError> {
    let blocks = isotonic_blocks(points)?;
    Ok(points.iter().map(|&(v, _)| blocks[blocks.partition_point(|b| b.hi < v)].level).collect())
}

/// Continuous isotonic fit on a uniform `grid` over `[0, vmax]`.
///
/// Levels are interpolated linearly between block midpoints, held constant
/// outside them, clamped to `[0, 1]` and tilted so every segment rises by at
/// least `min_slope`.
pub fn isotonic_fit(
    points: &[(f64, f64)],
    vmax: f64,
    grid: usize,
    min_slope: f64,
) -> Result<MonotoneRule, SingleCallError> {
    let reps: Vec<(f64, f64)> =
        isotonic_blocks(points)?.iter().map(|b| (0.5 * (b.lo + b.hi), b.level.clamp(0.0, 1.0))).collect();
    if !(min_slope >= 0.0 && min_slope * vmax < 1.0) {
        return Err(RuleError::InvalidKnots(format!("slope floor {min_slope} on [0, {vmax}]")).into());
    }
    let tilt = 1.0 - min_slope * vmax;
    let level = |v: f64| {
        let k = reps.partition_point(|r| r.0 <= v);
        if k == 0 {
            reps[0].1
        } else if k == reps.len() {
            reps[k - 1].1
        } else {
            let (a, b) = (reps[k - 1], reps[k]);
            a.1 + (b.1 - a.1) * (v - a.0) / (b.0 - a.0)
        }
    };
    Ok(MonotoneRule::from_fn_relaxed(vmax, grid, |v| tilt * level(v) + min_slope * v)?)
}

/// Exploration samples (sampled input, realized allocation) for one agent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExplorationSet {
    points: Vec<(f64, f64)>,
    total: f64,
}

impl ExplorationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the draw if its input was resampled.
    pub fn record(&mut self, draw: &AgentDraw) {
        if draw.explored {
            self.points.push((draw.sampled, draw.realized));
            self.total += draw.realized;
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean realized allocation over the exploration rounds.
    pub fn average(&self) -> Option<f64> {
        (!self.points.is_empty()).then(|| self.total / self.points.len() as f64)
    }
}

/// Instrumented value-space rule (1−ρ)·fit + ρ·avg, or `None` before any exploration.
pub fn instrumented_estimate(
    data: &ExplorationSet,
    rho: f64,
    vmax: f64,
    grid: usize,
    min_slope: f64,
) -> Result<Option<MonotoneRule>, SingleCallError> {
    let Some(avg) = data.average() else {
        return Ok(None);
    };
    let fit = isotonic_fit(data.points(), vmax, grid, min_slope)?;
    instrumented_rule(&fit, rho, avg).map(Some)
}

/// Dashboard over the instrumented estimate, falling back to `initial` (flagged).
pub fn build_instrumented_dashboard(
    data: &ExplorationSet,
    rho: f64,
    format: crate::rulekit::PaymentFormat,
    initial: &MonotoneRule,
    min_slope: f64,
) -> Result<crate::dashboards::Dashboard, SingleCallError> {
    let estimate = instrumented_estimate(data, rho, initial.vmax(), initial.len(), min_slope)?;
    let fallback = estimate.is_none();
    let mut d =
        crate::dashboards::Dashboard::new(estimate.unwrap_or_else(|| initial.clone()), format, 0.0, data.len() + 1);
    d.fallback = fallback;
    Ok(d)
}

/// B′ = B + p̂ − realized·bid; `s_hat` is the unrebalanced bid at the inferred value.
pub fn update_balance_singlecall(
    ledger: &mut BalanceLedger,
    stage: usize,
    p_hat: f64,
    realized: f64,
    bid: f64,
    s_hat: f64,
) -> LedgerEntry {
    ledger.settle(stage, p_hat, realized * bid, realized * s_hat, realized != 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coin(p: f64) -> impl Fn(&[f64], &mut ChaCha8Rng) -> Vec<f64> {
        move |v: &[f64], rng: &mut ChaCha8Rng| v.iter().map(|_| f64::from(rng.gen::<f64>() < p)).collect()
    }

    #[test]
    fn draw_variables_follow_their_definitions() {
        let cfg = InstrumentConfig::new(0.3, 2.0, 11).unwrap();
        let bb = coin(0.6);
        for stage in 1..500 {
            let out = instrument_draw(&bb, &[1.2, 0.4, 0.0], &cfg, stage).unwrap();
            for d in &out.agents {
                assert_eq!(d.own_alloc, if d.explored { 0.0 } else { d.realized });
                assert!(d.own_alloc == 0.0 || d.below == 0.0);
                if d.value == 0.0 {
                    assert_eq!(d.payment, 0.0);
                }
                if !d.explored {
                    assert_eq!(d.sampled, d.value);
                }
            }
        }
    }

    #[test]
    fn protocol_errors() {
        let cfg = InstrumentConfig::new(0.3, 1.0, 1).unwrap();
        let half = |v: &[f64], _: &mut ChaCha8Rng| vec![0.5; v.len()];
        assert_eq!(instrument_draw(&half, &[0.5], &cfg, 1), Err(SingleCallError::Protocol(0.5)));
        let short = |_: &[f64], _: &mut ChaCha8Rng| vec![1.0];
        assert_eq!(instrument_draw(&short, &[0.5, 0.2], &cfg, 1), Err(SingleCallError::Arity(1, 2)));
        assert!(InstrumentConfig::new(1.0, 1.0, 1).is_err());
    }

    #[test]
    fn instrumented_rule_floor() {
        let x = MonotoneRule::linear(1.0, 1025).unwrap();
        let r = instrumented_rule(&x, 0.2, 0.5).unwrap();
        assert!((r.eval(0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!((r.eval(0.0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn pava_small_cases() {
        let lv = isotonic_levels(&[(0.2, 1.0), (0.4, 0.0), (0.6, 1.0)]).unwrap();
        assert_eq!(lv, vec![0.5, 0.5, 1.0]);
        let sorted = isotonic_levels(&[(0.3, 0.0), (0.1, 0.0), (0.5, 1.0)]).unwrap();
        assert_eq!(sorted, vec![0.0, 0.0, 1.0]);
        let ties = isotonic_levels(&[(0.5, 1.0), (0.5, 0.0), (0.2, 1.0)]).unwrap();
        assert_eq!(ties, vec![2.0 / 3.0; 3]);
        assert_eq!(isotonic_blocks(&[]), Err(SingleCallError::Empty));
    }

    #[test]
    fn fit_is_continuous_and_strict() {
        let fit = isotonic_fit(&[(0.25, 0.0), (0.75, 1.0)], 1.0, 1025, 1e-6).unwrap();
        assert!(fit.is_strict(0.99e-6));
        assert!((fit.eval(0.5).unwrap() - 0.5).abs() < 1e-5);
        let single = isotonic_fit(&[(0.3, 1.0)], 1.0, 65, 1e-6).unwrap();
        assert!((single.eval(0.0).unwrap() - (1.0 - 1e-6)).abs() < 1e-15);
        assert!((single.eval(1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn estimate_needs_exploration() {
        let mut data = ExplorationSet::new();
        assert_eq!(instrumented_estimate(&data, 0.2, 1.0, 65, 1e-6).unwrap(), None);
        let initial = MonotoneRule::linear(1.0, 65).unwrap();
        let d =
            build_instrumented_dashboard(&data, 0.2, crate::rulekit::PaymentFormat::AllPay, &initial, 1e-6).unwrap();
        assert!(d.fallback);
        let draw = AgentDraw {
            value: 0.5,
            sampled: 0.8,
            explored: true,
            realized: 1.0,
            own_alloc: 0.0,
            below: 0.0,
            payment: 0.0,
        };
        data.record(&draw);
        data.record(&AgentDraw { explored: false, ..draw });
        assert_eq!(data.len(), 1);
        let r = instrumented_estimate(&data, 0.2, 1.0, 65, 1e-6).unwrap().unwrap();
        assert!(r.at(0.0) >= 0.2 - 1e-12);
    }

    #[test]
    fn singlecall_ledger() {
        let mut l = BalanceLedger::new(0.1).unwrap();
        update_balance_singlecall(&mut l, 1, 0.0, 0.0, 0.7, 0.3);
        assert_eq!(l.balance, 0.0);
        let (v, rho) = (0.8, 0.2);
        let worst = -v * (1.0 - rho) / rho;
        let e = update_balance_singlecall(&mut l, 2, worst, 1.0, v, v);
        assert!(e.residual.abs() <= v / rho + 1e-15);
    }
}
