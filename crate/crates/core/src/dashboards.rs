//! Published dashboards and the policies that build them from rule history.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::RuleError;
use crate::rulekit::{bid_strategy, BidRule, Inference, MonotoneRule, PaymentFormat, Tolerances};

/// Which past stage rules a dashboard averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Mean over every past stage.
    InferredValuesAll,
    /// Mean over the last min(k, t) stages.
    KLookback { k: usize },
    /// The previous stage alone.
    LastStage,
    /// The latest stage in which the agent was served.
    LastWinningStage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DashboardPolicy {
    pub kind: PolicyKind,
    pub initial_rule: MonotoneRule,
}

impl DashboardPolicy {
    pub fn new(kind: PolicyKind, initial_rule: MonotoneRule) -> Result<Self, RuleError> {
        if let PolicyKind::KLookback { k: 0 } = kind {
            return Err(RuleError::InvalidKnots("lookback window must be at least 1".into()));
        }
        Ok(Self { kind, initial_rule })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub stage: usize,
    pub rule: MonotoneRule,
    pub won: bool,
}

/// Per-stage projections of one agent's allocation rule.
///
/// Keeps a running sum for the all-stage mean, the latest win, and a window of
/// recent stages. An unbounded history keeps every stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleHistory {
    window: VecDeque<HistoryEntry>,
    cap: Option<usize>,
    total: Vec<f64>,
    count: usize,
    last_win: Option<HistoryEntry>,
}

impl RuleHistory {
    /// History that keeps every stage.
    pub fn new() -> Self {
        Self::default()
    }

    /// History that keeps the latest `cap` stages in its window.
    pub fn bounded(cap: usize) -> Self {
        Self { cap: Some(cap.max(1)), ..Self::default() }
    }

    /// Smallest history that still serves `kind`.
    pub fn for_policy(kind: PolicyKind) -> Self {
        match kind {
            PolicyKind::KLookback { k } => Self::bounded(k),
            _ => Self::bounded(1),
        }
    }

    /// Appends the next stage; rules must share the first rule's knot grid.
    pub fn push(&mut self, rule: MonotoneRule, won: bool) -> Result<(), RuleError> {
        if self.count == 0 {
            self.total = rule.probs().to_vec();
        } else {
            let first = self.window.back().or(self.last_win.as_ref()).expect("non-empty history");
            if first.rule.values() != rule.values() {
                return Err(RuleError::DomainMismatch(first.rule.vmax(), rule.vmax()));
            }
            for (s, p) in self.total.iter_mut().zip(rule.probs()) {
                *s += p;
            }
        }
        self.count += 1;
        let entry = HistoryEntry { stage: self.count, rule, won };
        if won {
            self.last_win = Some(entry.clone());
        }
        self.window.push_back(entry);
        if let Some(cap) = self.cap {
            while self.window.len() > cap {
                self.window.pop_front();
            }
        }
        Ok(())
    }

    /// Retained stages, oldest first.
    pub fn window(&self) -> impl DoubleEndedIterator<Item = &HistoryEntry> + ExactSizeIterator {
        self.window.iter()
    }

    pub fn latest(&self) -> Option<&HistoryEntry> {
        self.window.back()
    }

    pub fn last_win(&self) -> Option<&HistoryEntry> {
        self.last_win.as_ref()
    }

    /// Number of stages pushed so far.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn mean_all(&self) -> Result<MonotoneRule, RuleError> {
        let t = self.count as f64;
        let template = &self.window.back().expect("non-empty history").rule;
        template.with_probs(self.total.iter().map(|s| (s / t).min(1.0)).collect())
    }
}

/// A published bid-allocation forecast for one agent.
#[derive(Clone, Debug)]
pub struct Dashboard {
    pub format: PaymentFormat,
    /// Estimated value-space rule.
    pub ealloc: MonotoneRule,
    pub transfer: f64,
    pub stage_index: usize,
    /// The policy had nothing to average and used its initial rule.
    pub fallback: bool,
    bid_rule: Result<BidRule, RuleError>,
}

impl Dashboard {
    /// Dashboard over `ealloc`; an invertibility failure is kept, not raised.
    pub fn new(ealloc: MonotoneRule, format: PaymentFormat, transfer: f64, stage_index: usize) -> Self {
        Self::with_tolerances(ealloc, format, transfer, stage_index, Tolerances::default())
    }

    pub fn with_tolerances(
        ealloc: MonotoneRule,
        format: PaymentFormat,
        transfer: f64,
        stage_index: usize,
        tol: Tolerances,
    ) -> Self {
        let bid_rule = BidRule::build(&ealloc, format, transfer, tol);
        Self { format, ealloc, transfer, stage_index, fallback: false, bid_rule }
    }

    /// Dashboard publishing `ealloc` with an already-built bid rule.
    pub fn from_parts(ealloc: MonotoneRule, bid_rule: BidRule, stage_index: usize) -> Self {
        Self {
            format: bid_rule.format(),
            ealloc,
            transfer: bid_rule.transfer(),
            stage_index,
            fallback: false,
            bid_rule: Ok(bid_rule),
        }
    }

    /// Dashboard over a bid rule given directly in bid space.
    pub fn from_bid_rule(bid_rule: BidRule, stage_index: usize) -> Result<Self, RuleError> {
        let knots = bid_rule.table().iter().map(|&(v, _)| (v, bid_rule.value_alloc(v))).collect();
        Ok(Self {
            format: bid_rule.format(),
            ealloc: MonotoneRule::relaxed(knots)?,
            transfer: bid_rule.transfer(),
            stage_index,
            fallback: false,
            bid_rule: Ok(bid_rule),
        })
    }

    pub fn bid_rule(&self) -> Result<&BidRule, RuleError> {
        self.bid_rule.as_ref().map_err(Clone::clone)
    }

    pub fn is_invertible(&self) -> bool {
        self.bid_rule.is_ok()
    }

    /// Forecast allocation for a value-`v` agent.
    pub fn forecast(&self, v: f64) -> f64 {
        match &self.bid_rule {
            Ok(rule) => rule.value_alloc(v),
            Err(_) => self.ealloc.at(v),
        }
    }

    /// Follow-the-dashboard bid; the winner-pays-bid no-win region bids 0.
    pub fn bid(&self, v: f64) -> Result<f64, RuleError> {
        let out = match &self.bid_rule {
            Ok(rule) => rule.strategy(v),
            Err(_) => bid_strategy(&self.ealloc, v, self.format, self.transfer),
        };
        match out {
            Err(RuleError::NoWin(_)) => Ok(0.0),
            other => other,
        }
    }

    /// Value inferred from bid `b`.
    pub fn infer(&self, b: f64) -> Result<Inference, RuleError> {
        Ok(self.bid_rule()?.invert(b))
    }
}

impl Serialize for Dashboard {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out<'a> {
            format: PaymentFormat,
            transfer: f64,
            knots: &'a MonotoneRule,
        }
        Out { format: self.format, transfer: self.transfer, knots: &self.ealloc }.serialize(s)
    }
}

/// Publishes the dashboard for the next stage.
///
/// ```
/// use dashmech::dashboards::{build_dashboard, DashboardPolicy, PolicyKind, RuleHistory};
/// use dashmech::rulekit::{MonotoneRule, PaymentFormat};
/// let initial = MonotoneRule::linear(1.0, 65).unwrap();
/// let policy = DashboardPolicy::new(PolicyKind::LastStage, initial).unwrap();
/// let mut history = RuleHistory::new();
/// history.push(MonotoneRule::from_fn(1.0, 65, |v| 0.5 * v + 0.1).unwrap(), false).unwrap();
/// let d = build_dashboard(&policy, &history, PaymentFormat::AllPay, 0.0).unwrap();
/// assert!((d.ealloc.eval(1.0).unwrap() - 0.6).abs() < 1e-12);
/// ```
pub fn build_dashboard(
    policy: &DashboardPolicy,
    history: &RuleHistory,
    format: PaymentFormat,
    transfer: f64,
) -> Result<Dashboard, RuleError> {
    let (ealloc, fallback) = select_rule(policy, history)?;
    let mut d = Dashboard::new(ealloc, format, transfer, history.len() + 1);
    d.fallback = fallback;
    Ok(d)
}

/// The averaged value-space rule a policy publishes, and whether it fell back.
pub fn select_rule(policy: &DashboardPolicy, history: &RuleHistory) -> Result<(MonotoneRule, bool), RuleError> {
    let Some(latest) = history.latest() else {
        return Ok((policy.initial_rule.clone(), true));
    };
    let t = history.len();
    let rule = match policy.kind {
        PolicyKind::InferredValuesAll => history.mean_all()?,
        PolicyKind::LastStage => latest.rule.clone(),
        PolicyKind::KLookback { k } => {
            let k = k.max(1).min(t);
            if k == t {
                history.mean_all()?
            } else if history.window.len() < k {
                return Err(RuleError::InvalidKnots(format!(
                    "history keeps {} stages, lookback needs {k}",
                    history.window.len()
                )));
            } else {
                MonotoneRule::mean(history.window().rev().take(k).map(|e| &e.rule))?
            }
        }
        PolicyKind::LastWinningStage => match history.last_win() {
            Some(e) => e.rule.clone(),
            None => return Ok((policy.initial_rule.clone(), true)),
        },
    };
    Ok((rule, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(f: impl Fn(f64) -> f64) -> MonotoneRule {
        MonotoneRule::from_fn_relaxed(1.0, 129, f).unwrap()
    }

    fn policy(kind: PolicyKind) -> DashboardPolicy {
        DashboardPolicy::new(kind, MonotoneRule::linear(1.0, 129).unwrap()).unwrap()
    }

    #[test]
    fn lookback_averages_pointwise() {
        let mut h = RuleHistory::new();
        h.push(rule(|v| v), false).unwrap();
        h.push(rule(|v| v * v), false).unwrap();
        let (m, fallback) = select_rule(&policy(PolicyKind::KLookback { k: 2 }), &h).unwrap();
        assert!(!fallback);
        for (v, p) in m.knots() {
            assert!((p - (v + v * v) / 2.0).abs() < 1e-15);
        }
        let (last, _) = select_rule(&policy(PolicyKind::KLookback { k: 1 }), &h).unwrap();
        assert_eq!(last, h.latest().unwrap().rule);
    }

    #[test]
    fn last_winning_stage_picks_latest_win() {
        let mut h = RuleHistory::new();
        for (s, won) in [(1, true), (2, false), (3, true), (4, false)] {
            h.push(rule(move |v| v / s as f64), won).unwrap();
        }
        let (r, _) = select_rule(&policy(PolicyKind::LastWinningStage), &h).unwrap();
        assert_eq!(r, rule(|v| v / 3.0));
        assert_eq!(h.last_win().unwrap().stage, 3);
        let mut never = RuleHistory::new();
        never.push(rule(|v| v), false).unwrap();
        let p = policy(PolicyKind::LastWinningStage);
        let (r, fallback) = select_rule(&p, &never).unwrap();
        assert!(fallback);
        assert_eq!(r, p.initial_rule);
    }

    #[test]
    fn bounded_history_matches_unbounded() {
        let mut full = RuleHistory::new();
        let mut small = RuleHistory::for_policy(PolicyKind::KLookback { k: 3 });
        for s in 1..=7 {
            let r = rule(move |v| v.powf(1.0 + s as f64 / 4.0));
            full.push(r.clone(), s % 3 == 0).unwrap();
            small.push(r, s % 3 == 0).unwrap();
        }
        assert_eq!(small.window().len(), 3);
        for kind in [
            PolicyKind::InferredValuesAll,
            PolicyKind::KLookback { k: 3 },
            PolicyKind::LastStage,
            PolicyKind::LastWinningStage,
        ] {
            let p = policy(kind);
            assert_eq!(select_rule(&p, &full).unwrap(), select_rule(&p, &small).unwrap());
        }
        let mut mismatch = RuleHistory::new();
        mismatch.push(rule(|v| v), false).unwrap();
        assert!(mismatch.push(MonotoneRule::linear(2.0, 129).unwrap(), false).is_err());
    }

    #[test]
    fn first_stage_uses_initial_rule() {
        let p = policy(PolicyKind::InferredValuesAll);
        let d = build_dashboard(&p, &RuleHistory::new(), PaymentFormat::WinnerPaysBid, 0.0).unwrap();
        assert_eq!(d.ealloc, p.initial_rule);
        assert_eq!(d.stage_index, 1);
    }

    #[test]
    fn dashboard_bids_and_inference() {
        let x = MonotoneRule::linear(1.0, 1025).unwrap();
        let d = Dashboard::new(x.clone(), PaymentFormat::WinnerPaysBid, 0.0, 1);
        assert!((d.bid(0.5).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(d.bid(0.0).unwrap(), 0.0);
        let back = d.infer(0.25).unwrap();
        assert!((back.value - 0.5).abs() < 1e-9);
        let low = d.infer(-0.2).unwrap();
        assert_eq!((low.value, low.extrapolated), (0.0, true));
        let ap = Dashboard::new(x, PaymentFormat::AllPay, 0.2, 1);
        assert!((ap.bid(0.5).unwrap() - 0.325).abs() < 1e-15);
    }

    #[test]
    fn bid_space_dashboard_recovers_value() {
        let rule = BidRule::from_bid_fn(PaymentFormat::WinnerPaysBid, 6.0, 6.0, 257, |b| b / (b + 2.0)).unwrap();
        let d = Dashboard::from_bid_rule(rule, 1).unwrap();
        assert!((d.infer(1.0).unwrap().value - 2.5).abs() < 1e-6);
    }

    #[test]
    fn non_invertible_dashboard_still_bids() {
        let x = MonotoneRule::linear(1.0, 1025).unwrap();
        let d = Dashboard::new(x, PaymentFormat::WinnerPaysBid, 0.1, 1);
        assert!(!d.is_invertible());
        assert!((d.bid(0.5).unwrap() - 0.45).abs() < 1e-15);
        assert!(matches!(d.infer(0.3), Err(RuleError::NonInvertible { .. })));
    }

    #[test]
    fn dashboard_json_has_format_transfer_knots() {
        let x = MonotoneRule::new(vec![(0.0, 0.1), (1.0, 0.9)]).unwrap();
        let d = Dashboard::new(x, PaymentFormat::AllPay, 0.0, 3);
        let text = serde_json::to_string(&d).unwrap();
        assert_eq!(text, r#"{"format":"all_pay","transfer":0.0,"knots":[[0.0,0.1],[1.0,0.9]]}"#);
    }
}
