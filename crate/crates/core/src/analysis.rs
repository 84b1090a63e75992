//! Post-hoc metrics over traces: balances, incentive inconsistency, hindsight
//! regret, and rationalizable (value, regret) sets of learning agents.

use serde::{Deserialize, Serialize};

use crate::agents::{Strategy, ValuePath};
use crate::dashboards::PolicyKind;
use crate::engine::{RebalanceMode, Trace};
use crate::error::RuleError;
use crate::rulekit::{BidRule, MonotoneRule, PaymentFormat};

/// Running sums of one agent's stage bid-allocation rules on a fixed bid grid,
/// plus the same sums at the bids actually played.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub format: PaymentFormat,
    pub grid: Vec<f64>,
    /// Σ_s x̃⁽ˢ⁾(b).
    pub alloc: Vec<f64>,
    /// Σ_s p̃⁽ˢ⁾(b).
    pub pay: Vec<f64>,
    /// Σ_s v⁽ˢ⁾·x̃⁽ˢ⁾(b) − p̃⁽ˢ⁾(b).
    pub utility: Vec<f64>,
    pub stages: usize,
    pub played_alloc: f64,
    pub played_pay: f64,
    pub played_utility: f64,
    pub played_bid: f64,
}

impl Counterfactual {
    pub fn new(format: PaymentFormat, grid: Vec<f64>) -> Self {
        let k = grid.len();
        Self {
            format,
            grid,
            alloc: vec![0.0; k],
            pay: vec![0.0; k],
            utility: vec![0.0; k],
            stages: 0,
            played_alloc: 0.0,
            played_pay: 0.0,
            played_utility: 0.0,
            played_bid: 0.0,
        }
    }

    /// Format payment of bid `b` at allocation `x`.
    pub fn payment(&self, b: f64, x: f64) -> f64 {
        match self.format {
            PaymentFormat::AllPay => b,
            PaymentFormat::WinnerPaysBid => b * x,
        }
    }

    /// Adds a stage given x̃⁽ˢ⁾ on the grid, the agent's value, its bid and x̃⁽ˢ⁾(bid).
    pub fn add_stage(&mut self, x_tilde: &[f64], value: f64, bid: f64, alloc_at_bid: f64) {
        for (k, &x) in x_tilde.iter().enumerate() {
            let p = self.payment(self.grid[k], x);
            self.alloc[k] += x;
            self.pay[k] += p;
            self.utility[k] += value * x - p;
        }
        let p = self.payment(bid, alloc_at_bid);
        self.stages += 1;
        self.played_alloc += alloc_at_bid;
        self.played_pay += p;
        self.played_utility += value * alloc_at_bid - p;
        self.played_bid += bid;
    }

    fn mean(&self, sum: &[f64]) -> Vec<f64> {
        let t = self.stages.max(1) as f64;
        sum.iter().map(|s| s / t).collect()
    }

    /// Average regret Regret(b; v) for every grid bid b at a static value v.
    pub fn regret_at(&self, v: f64) -> Vec<f64> {
        let t = self.stages.max(1) as f64;
        let played = (v * self.played_alloc - self.played_pay) / t;
        self.alloc.iter().zip(&self.pay).map(|(x, p)| (v * x - p) / t - played).collect()
    }
}

/// Utility gain of the best grid bid over `played` in a single stage.
pub fn best_response_gap(format: PaymentFormat, grid: &[f64], x_tilde: &[f64], value: f64, played: f64) -> f64 {
    let best = grid
        .iter()
        .zip(x_tilde)
        .map(|(&b, &x)| match format {
            PaymentFormat::AllPay => value * x - b,
            PaymentFormat::WinnerPaysBid => (value - b) * x,
        })
        .fold(f64::NEG_INFINITY, f64::max);
    best - played
}

/// Per-agent balance series: the realized ledger balance after each stage.
pub fn outstanding_balance(trace: &Trace) -> Vec<Vec<f64>> {
    per_agent(trace, |a| a.balance)
}

/// Per-agent expected balance: cumulative truthful payment at the inferred value
/// minus the expected format payment.
pub fn expected_outstanding_balance(trace: &Trace) -> Vec<Vec<f64>> {
    let n = trace.agent_count();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            trace
                .stages
                .iter()
                .map(|s| {
                    let a = &s.agents[i];
                    acc += a.truthful_payment - a.expected_payment;
                    acc
                })
                .collect()
        })
        .collect()
}

fn per_agent(trace: &Trace, f: impl Fn(&crate::engine::AgentRecord) -> f64) -> Vec<Vec<f64>> {
    (0..trace.agent_count()).map(|i| trace.stages.iter().map(|s| f(&s.agents[i])).collect()).collect()
}

/// Largest |B| over a series.
pub fn max_abs(series: &[f64]) -> f64 {
    series.iter().fold(0.0, |m, b| m.max(b.abs()))
}

/// Gap between dashboard-run and truthful-mechanism outcomes at the inferred values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inconsistency {
    /// |mean x̃⁽ˢ⁾(b⁽ˢ⁾) − mean x⁽ˢ⁾(ṽ⁽ˢ⁾)|.
    pub alloc_gap: f64,
    /// |mean p̃⁽ˢ⁾(b⁽ˢ⁾) − mean p⁽ˢ⁾(ṽ⁽ˢ⁾)|.
    pub payment_gap: f64,
}

/// Incentive inconsistency of agent `agent` over the whole trace, in expectation.
pub fn incentive_inconsistency(trace: &Trace, agent: usize) -> Inconsistency {
    let t = trace.stages.len().max(1) as f64;
    let (mut da, mut dp) = (0.0, 0.0);
    for s in &trace.stages {
        let a = &s.agents[agent];
        da += a.projected_prob - a.alloc_prob;
        dp += a.expected_payment - a.truthful_payment;
    }
    Inconsistency { alloc_gap: (da / t).abs(), payment_gap: (dp / t).abs() }
}

/// Realized-payment inconsistency |Σ(charged − truthful term)|/t from the ledger.
pub fn realized_inconsistency(trace: &Trace, agent: usize) -> f64 {
    let ledger = &trace.ledgers[agent];
    (ledger.balance - ledger.initial).abs() / trace.stages.len().max(1) as f64
}

/// One agent's running metrics after a stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: usize,
    pub agent: usize,
    pub balance: f64,
    pub expected_balance: f64,
    /// Running |Σ(projected − algorithm probability)|/s.
    pub alloc_inconsistency: f64,
    /// Running |Σ(expected − truthful payment)|/s.
    pub payment_inconsistency: f64,
    /// Running |B − B₀|/s.
    pub realized_inconsistency: f64,
}

/// Running balance and inconsistency series, stage-major. The last row of an
/// agent agrees with [`incentive_inconsistency`] and [`realized_inconsistency`].
pub fn metric_series(trace: &Trace) -> Vec<MetricRow> {
    let n = trace.agent_count();
    let initial: Vec<f64> = (0..n).map(|i| trace.ledgers.get(i).map_or(0.0, |l| l.initial)).collect();
    let (mut da, mut dp) = (vec![0.0; n], vec![0.0; n]);
    let mut out = Vec::with_capacity(n * trace.stages.len());
    for (k, s) in trace.stages.iter().enumerate() {
        let t = (k + 1) as f64;
        for (i, a) in s.agents.iter().enumerate() {
            da[i] += a.projected_prob - a.alloc_prob;
            dp[i] += a.expected_payment - a.truthful_payment;
            out.push(MetricRow {
                stage: s.stage,
                agent: i,
                balance: a.balance,
                expected_balance: -dp[i],
                alloc_inconsistency: (da[i] / t).abs(),
                payment_inconsistency: (dp[i] / t).abs(),
                realized_inconsistency: (a.balance - initial[i]).abs() / t,
            });
        }
    }
    out
}

/// Hindsight regret of `agent` against the best fixed grid bid, and that bid.
///
/// Uses the per-stage values, so dynamic value paths are handled.
pub fn hindsight_regret(trace: &Trace, agent: usize) -> Option<(f64, f64)> {
    let cf = trace.counterfactual.get(agent)?.as_ref()?;
    Some(regret_of(cf))
}

/// Best fixed-bid average utility minus the realized average utility.
pub fn regret_of(cf: &Counterfactual) -> (f64, f64) {
    let t = cf.stages.max(1) as f64;
    let (k, best) =
        cf.utility.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (k, &u)| if u > acc.1 { (k, u) } else { acc });
    ((best - cf.played_utility) / t, cf.grid[k])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalizablePoint {
    pub bid: f64,
    pub value: f64,
    pub regret: f64,
}

/// Boundary of the rationalizable set of a static-value agent, sampled on the
/// interior of the bid grid.
///
/// All-pay: v(b) = 1/x̄′(b). Winner-pays-bid: v(b) = b + x̄(b)/x̄′(b). The regret
/// is Regret(b; v(b)). Points with a non-positive slope are skipped; the count is
/// returned alongside.
pub fn rationalizable_boundary(cf: &Counterfactual) -> (Vec<RationalizablePoint>, usize) {
    let x = cf.mean(&cf.alloc);
    let p = cf.mean(&cf.pay);
    let t = cf.stages.max(1) as f64;
    let (a_bar, p_bar) = (cf.played_alloc / t, cf.played_pay / t);
    let mut out = Vec::new();
    let mut skipped = 0;
    for k in 1..cf.grid.len().saturating_sub(1) {
        let d = (x[k + 1] - x[k - 1]) / (cf.grid[k + 1] - cf.grid[k - 1]);
        if !(d > 0.0) {
            skipped += 1;
            continue;
        }
        let b = cf.grid[k];
        let value = match cf.format {
            PaymentFormat::AllPay => 1.0 / d,
            PaymentFormat::WinnerPaysBid => b + x[k] / d,
        };
        let regret = value * x[k] - p[k] - (value * a_bar - p_bar);
        out.push(RationalizablePoint { bid: b, value, regret });
    }
    (out, skipped)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueInterval {
    pub lo: f64,
    pub hi: f64,
    /// Value at the smallest boundary regret.
    pub center: f64,
    pub alpha: f64,
}

impl ValueInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Values on the boundary whose regret is at most `eps`, with endpoints
/// interpolated where the boundary crosses `eps`.
pub fn value_interval(boundary: &[RationalizablePoint], eps: f64, alpha: f64) -> Result<ValueInterval, RuleError> {
    let center = boundary
        .iter()
        .min_by(|a, b| a.regret.total_cmp(&b.regret))
        .ok_or_else(|| RuleError::InvalidKnots("empty rationalizable boundary".into()))?;
    if center.regret > eps {
        return Err(RuleError::InvalidKnots(format!(
            "regret bound {eps} is below the smallest boundary regret {}",
            center.regret
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, p) in boundary.iter().enumerate() {
        if p.regret <= eps {
            lo = lo.min(p.value);
            hi = hi.max(p.value);
            for j in [i.wrapping_sub(1), i + 1] {
                if let Some(q) = boundary.get(j) {
                    if q.regret > eps {
                        let w = (eps - p.regret) / (q.regret - p.regret);
                        let v = p.value + w * (q.value - p.value);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
        }
    }
    Ok(ValueInterval { lo, hi, center: center.value, alpha })
}

/// α with x′(v) ≥ 1/(α²v³) on `values`, all-pay form: α = 1/√(min x′(v)·v³).
pub fn alpha_allpay(rule: &MonotoneRule, values: &[f64]) -> f64 {
    alpha_from(values, |v| slope_at(rule, v) * v.powi(3))
}

/// α with x′(v)/x(v) ≥ 1/(α²v³) on `values`, winner-pays-bid form.
pub fn alpha_wpb(rule: &MonotoneRule, values: &[f64]) -> f64 {
    alpha_from(values, |v| slope_at(rule, v) / rule.at(v) * v.powi(3))
}

fn alpha_from(values: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let m = values.iter().map(|&v| f(v)).fold(f64::INFINITY, f64::min);
    if m > 0.0 {
        1.0 / m.sqrt()
    } else {
        f64::INFINITY
    }
}

fn slope_at(rule: &MonotoneRule, v: f64) -> f64 {
    rule.segment_slope(rule.segment(v))
}

/// Central second difference of a bid rule's x̃ at `b`.
pub fn bid_curvature(rule: &BidRule, b: f64, h: f64) -> f64 {
    (rule.alloc(b + h) - 2.0 * rule.alloc(b) + rule.alloc(b - h)) / (h * h)
}

/// Discrete second differences of a sampled (v, ε) curve, by value.
pub fn boundary_second_differences(boundary: &[RationalizablePoint]) -> Vec<f64> {
    boundary
        .windows(3)
        .filter_map(|w| {
            let (a, b, c) = (w[0], w[1], w[2]);
            let (h1, h2) = (b.value - a.value, c.value - b.value);
            (h1 > 0.0 && h2 > 0.0).then(|| 2.0 * ((c.regret - b.regret) / h2 - (b.regret - a.regret) / h1) / (h1 + h2))
        })
        .collect()
}

/// The guarantee that covers an agent's balance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// vmax/η under transfer or splice rebalancing.
    Rebalancing,
    /// vmax/(ρ·η) with single-call payments.
    SingleCall,
    /// v for a static follower of a last-stage (all-pay) or last-winning-stage
    /// (winner-pays-bid) dashboard without rebalancing.
    Natural,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceCheck {
    pub agent: usize,
    pub kind: BoundKind,
    pub bound: f64,
    pub max_abs: f64,
    /// First stage whose |B| exceeds the bound.
    pub violation: Option<usize>,
}

impl BalanceCheck {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

/// Pathwise balance bound of every agent a guarantee covers. η is the smallest
/// rate the agent saw, so the check only needs the trace rows.
pub fn balance_checks(trace: &Trace) -> Vec<BalanceCheck> {
    let cfg = &trace.config;
    let mut out = Vec::new();
    for (i, spec) in cfg.agents.iter().enumerate() {
        let rows = || trace.stages.iter().map(move |s| (s.stage, &s.agents[i]));
        let eta = rows().map(|(_, a)| a.eta).fold(f64::INFINITY, f64::min);
        let covered = match (cfg.rebalancing.mode, &cfg.single_call) {
            (RebalanceMode::Off, None) => match (&spec.values, &spec.strategy, cfg.format, cfg.policy) {
                (
                    ValuePath::Static { value },
                    Strategy::FollowDashboard,
                    PaymentFormat::AllPay,
                    PolicyKind::LastStage,
                )
                | (
                    ValuePath::Static { value },
                    Strategy::FollowDashboard,
                    PaymentFormat::WinnerPaysBid,
                    PolicyKind::LastWinningStage,
                ) => Some((BoundKind::Natural, *value)),
                _ => None,
            },
            (RebalanceMode::Off, Some(_)) => None,
            (_, None) => Some((BoundKind::Rebalancing, cfg.vmax / eta)),
            (_, Some(sc)) => Some((BoundKind::SingleCall, cfg.vmax / (sc.rho * eta))),
        };
        let Some((kind, bound)) = covered else { continue };
        let max_abs = rows().fold(0.0, |m: f64, (_, a)| m.max(a.balance.abs()));
        let violation = rows().find(|(_, a)| a.balance.abs() > bound).map(|(s, _)| s);
        out.push(BalanceCheck { agent: i, kind, bound, max_abs, violation });
    }
    out
}

/// High-probability single-call bound vmax/η + (vmax/ρ)·√(ln(2/δ)/(2η)).
pub fn single_call_tail_bound(vmax: f64, rho: f64, eta: f64, delta: f64) -> f64 {
    vmax / eta + vmax / rho * ((2.0 / delta).ln() / (2.0 * eta)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashCheck {
    /// Largest |ṽ − v| from stage 2 on.
    pub max_value_error: f64,
    /// Largest per-stage best-response gap from stage 2 on.
    pub max_gap: f64,
    pub value_tolerance: f64,
    pub gap_tolerance: f64,
    /// First (stage, agent) outside a tolerance.
    pub violation: Option<(usize, usize)>,
}

impl NashCheck {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

/// Convergence of static followers of a last-stage dashboard under a fixed
/// algorithm: from stage 2, ṽ = v within 1e-6·vmax and no grid bid gains more
/// than 1e-3·vmax. `None` when the setting does not apply or the run kept no
/// best-response gaps.
pub fn nash_check(trace: &Trace) -> Option<NashCheck> {
    let cfg = &trace.config;
    let statics = cfg
        .agents
        .iter()
        .all(|a| matches!((&a.values, &a.strategy), (ValuePath::Static { .. }, Strategy::FollowDashboard)));
    let setting = statics
        && cfg.policy == PolicyKind::LastStage
        && cfg.rebalancing.mode == RebalanceMode::Off
        && cfg.single_call.is_none()
        && !cfg.algorithm.is_random();
    if !setting {
        return None;
    }
    let (value_tolerance, gap_tolerance) = (1e-6 * cfg.vmax, 1e-3 * cfg.vmax);
    let mut check = NashCheck { max_value_error: 0.0, max_gap: 0.0, value_tolerance, gap_tolerance, violation: None };
    for s in trace.stages.iter().filter(|s| s.stage >= 2) {
        for (i, a) in s.agents.iter().enumerate() {
            let err = (a.inferred_value - a.value).abs();
            let gap = a.best_response_gap?;
            check.max_value_error = check.max_value_error.max(err);
            check.max_gap = check.max_gap.max(gap);
            if check.violation.is_none() && (err > value_tolerance || gap > gap_tolerance) {
                check.violation = Some((s.stage, i));
            }
        }
    }
    Some(check)
}
