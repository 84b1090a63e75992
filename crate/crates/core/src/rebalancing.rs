//! Payment rebalancing: reference dashboards, the individually rational
//! linear-bid splice, and per-agent balance ledgers.

use serde::{Deserialize, Serialize};

use crate::dashboards::Dashboard;
use crate::error::{BalanceError, RuleError};
use crate::rulekit::{linear_bid_exponent, BidRule, LowPiece, MonotoneRule, PaymentFormat, Tolerances};

/// Nominal γ used when the balance is non-negative (bids near full value).
pub const GAMMA_HIGH: f64 = 1.0 - 1e-4;
/// Nominal γ used when the balance is negative (bids near zero).
pub const GAMMA_LOW: f64 = 1e-4;
/// Cap on the linear-bid exponent γ/(1−γ).
pub const EXPONENT_CAP: f64 = 1e4;

/// One stage of a ledger.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: usize,
    /// Payment residual Δ.
    pub residual: f64,
    /// Balance resolved by the dashboard, R.
    pub resolved: f64,
    pub realized: bool,
    /// Balance after the stage.
    pub balance: f64,
}

/// Outstanding balance of one agent. Positive means the agent underpaid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceLedger {
    pub balance: f64,
    pub rate: f64,
    pub initial: f64,
    pub entries: Vec<LedgerEntry>,
}

impl BalanceLedger {
    pub fn new(rate: f64) -> Result<Self, BalanceError> {
        Self::with_balance(0.0, rate)
    }

    pub fn with_balance(balance: f64, rate: f64) -> Result<Self, BalanceError> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(BalanceError::Rate(rate));
        }
        Ok(Self { balance, rate, initial: balance, entries: Vec::new() })
    }

    /// Settles a stage: the balance moves by `truthful − charged`; the residual is
    /// `truthful − baseline` and the resolved part `charged − baseline`, where
    /// `baseline` is what the unrebalanced dashboard would have charged.
    pub fn settle(&mut self, stage: usize, truthful: f64, charged: f64, baseline: f64, realized: bool) -> LedgerEntry {
        self.balance += truthful - charged;
        let entry = LedgerEntry {
            stage,
            residual: truthful - baseline,
            resolved: charged - baseline,
            realized,
            balance: self.balance,
        };
        self.entries.push(entry);
        entry
    }

    /// Largest |B| seen so far, including the initial balance.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.balance.abs()).fold(self.initial.abs(), f64::max)
    }

    /// CSV rows `stage,residual,resolved,balance`, header first.
    pub fn csv_rows(&self) -> Vec<String> {
        std::iter::once("stage,residual,resolved,balance".to_string())
            .chain(self.entries.iter().map(|e| format!("{},{},{},{}", e.stage, e.residual, e.resolved, e.balance)))
            .collect()
    }
}

/// All-pay stage: B′ = B + s(ṽ) − bid; `s_hat` is the unrebalanced dashboard bid.
pub fn update_balance_allpay(ledger: &mut BalanceLedger, stage: usize, s: f64, bid: f64, s_hat: f64) -> LedgerEntry {
    ledger.settle(stage, s, bid, s_hat, true)
}

/// Winner-pays-bid stage: B′ = B + [s(ṽ) − bid]·realized.
pub fn update_balance_wpb(
    ledger: &mut BalanceLedger,
    stage: usize,
    s: f64,
    bid: f64,
    s_hat: f64,
    realized: bool,
) -> LedgerEntry {
    let w = if realized { 1.0 } else { 0.0 };
    ledger.settle(stage, s * w, bid * w, s_hat * w, realized)
}

/// Dashboard with transfer B·η. Winner-pays-bid with B·η > 0 is kept but not invertible.
///
/// ```
/// use dashmech::rebalancing::reference_rebalancing;
/// use dashmech::rulekit::{MonotoneRule, PaymentFormat};
/// let x = MonotoneRule::linear(1.0, 1025).unwrap();
/// let d = reference_rebalancing(&x, PaymentFormat::AllPay, 0.2, 1.0).unwrap();
/// assert!((d.bid(0.5).unwrap() - 0.325).abs() < 1e-12);
/// ```
pub fn reference_rebalancing(
    ealloc: &MonotoneRule,
    format: PaymentFormat,
    balance: f64,
    rate: f64,
) -> Result<Dashboard, BalanceError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(BalanceError::Rate(rate));
    }
    Ok(Dashboard::new(ealloc.clone(), format, balance * rate, 0))
}

/// Affine support clamp x ↦ η + (1−η)·x into `[η, 1]`.
pub fn clamp_support(rule: &MonotoneRule, eta: f64) -> Result<MonotoneRule, BalanceError> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(BalanceError::Rate(eta));
    }
    Ok(rule.map_probs(|_, p| (eta + (1.0 - eta) * p).min(1.0))?)
}

/// Linear-bid rule meeting `(meet_v, meet_x)`, sampled on a uniform grid and
/// clamped to 1; the flag reports a capped exponent.
pub fn linear_bid_rule(
    gamma: f64,
    meet_v: f64,
    meet_x: f64,
    vmax: f64,
    grid: usize,
) -> Result<(MonotoneRule, bool), RuleError> {
    if !(gamma > 0.0 && gamma < 1.0) || !(meet_x > 0.0 && meet_x <= 1.0) || !(meet_v > 0.0) {
        return Err(RuleError::InvalidKnots(format!(
            "linear-bid rule needs γ in (0,1) and a meeting point with positive value and probability, got γ={gamma}, ({meet_v}, {meet_x})"
        )));
    }
    let (k, capped) = linear_bid_exponent(gamma, EXPONENT_CAP);
    let rule = MonotoneRule::from_fn_relaxed(vmax, grid, |z| (meet_x * (z / meet_v).powf(k)).min(1.0))?;
    Ok((rule, capped))
}

/// The individually rational splice below v†.
#[derive(Clone, Debug, PartialEq)]
pub struct IrSplice {
    pub v_dagger: f64,
    /// Nominal γ of the low piece.
    pub gamma: f64,
    /// Bid map slope on `[0, v†]`: the γ limit.
    pub bid_slope: f64,
    /// Linear-bid rule meeting `(v†, ealloc(v†))`.
    pub low_rule: MonotoneRule,
    /// `low_rule` on `[0, v†]`, `ealloc` above.
    pub spliced: MonotoneRule,
    /// No v† ≤ vmax solved the balance equation; v† = vmax.
    pub no_root: bool,
    pub exponent_capped: bool,
}

/// Winner-pays-bid rebalancing without a transfer.
///
/// For B ≥ 0, v† solves v − ŝ(v) = B and types below v† bid their value; for
/// B < 0, v† solves ŝ(v) = |B| and types below bid γ⁻·v. Above v† bids carry
/// the effective transfer of the splice.
pub fn ir_rebalancing(
    ealloc: &MonotoneRule,
    balance: f64,
    rate: f64,
    tol: Tolerances,
) -> Result<(Dashboard, IrSplice), BalanceError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(BalanceError::Rate(rate));
    }
    let plain = BidRule::build(ealloc, PaymentFormat::WinnerPaysBid, 0.0, tol)?;
    let vmax = ealloc.vmax();
    if balance == 0.0 {
        let d = Dashboard::new(ealloc.clone(), PaymentFormat::WinnerPaysBid, 0.0, 0);
        let splice = IrSplice {
            v_dagger: 0.0,
            gamma: GAMMA_HIGH,
            bid_slope: 1.0,
            low_rule: ealloc.clone(),
            spliced: ealloc.clone(),
            no_root: false,
            exponent_capped: false,
        };
        return Ok((d, splice));
    }
    let (gamma, bid_slope) = if balance > 0.0 { (GAMMA_HIGH, 1.0) } else { (GAMMA_LOW, GAMMA_LOW) };
    let (v_dagger, no_root) = if balance > 0.0 {
        solve_surplus(&plain, balance, tol.invert * vmax)
    } else if plain.bid_range().1 < -balance {
        (vmax, true)
    } else {
        (plain.invert(-balance).value, false)
    };
    let x_dagger = ealloc.at(v_dagger);
    let low = LowPiece::new(bid_slope, gamma, v_dagger, x_dagger, EXPONENT_CAP);
    let (low_rule, exponent_capped) = linear_bid_rule(gamma, v_dagger, x_dagger, vmax, ealloc.len())?;
    let mut knots: Vec<(f64, f64)> =
        ealloc.values().iter().filter(|&&v| v < v_dagger).map(|&v| (v, low.alloc(v))).collect();
    if knots.is_empty() || knots.last().unwrap().0 < v_dagger {
        knots.push((v_dagger, x_dagger));
    }
    knots.extend(ealloc.knots().filter(|&(v, _)| v > v_dagger));
    if knots[0].0 > 0.0 {
        knots.insert(0, (0.0, 0.0));
    }
    let spliced = MonotoneRule::relaxed(knots)?;
    let bid_rule = BidRule::spliced(ealloc, low, tol)?;
    let d = Dashboard::from_parts(spliced.clone(), bid_rule, 0);
    let splice = IrSplice { v_dagger, gamma, bid_slope, low_rule, spliced, no_root, exponent_capped };
    Ok((d, splice))
}

/// First v with v − ŝ(v) = target, by a scan over the table then bisection.
fn solve_surplus(plain: &BidRule, target: f64, tol: f64) -> (f64, bool) {
    let gap = |v: f64| v - plain.strategy(v).unwrap_or(v);
    let table = plain.table();
    let Some(k) = table.iter().position(|&(v, s)| v - s >= target) else {
        return (plain.vmax(), true);
    };
    if k == 0 {
        return (table[0].0, false);
    }
    let (mut lo, mut hi) = (table[k - 1].0, table[k].0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if gap(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi), false)
}

/// Per-stage residual Δ and resolved balance R of the reference dashboard.
///
/// All-pay: Δ = s(ṽ) − ŝ(ṽ), R = B·η. Winner-pays-bid (realized):
/// Δ = [s(ṽ) − ŝ(ṽ)]·realized, R = [B·η/ealloc(ṽ)]·realized.
#[allow(clippy::too_many_arguments)]
pub fn residual_and_resolved(
    valloc: &MonotoneRule,
    ealloc: &MonotoneRule,
    format: PaymentFormat,
    v: f64,
    balance: f64,
    rate: f64,
    realized: bool,
) -> Result<(f64, f64), BalanceError> {
    let tol = Tolerances::default();
    let s = |rule: &MonotoneRule| crate::rulekit::bid_strategy(rule, v, format, 0.0);
    match format {
        PaymentFormat::AllPay => Ok((s(valloc)? - s(ealloc)?, balance * rate)),
        PaymentFormat::WinnerPaysBid => {
            let e = ealloc.at(v);
            if e < rate * (1.0 - 1e-12) {
                return Err(BalanceError::Support { value: v, alloc: e, eta: rate });
            }
            if !realized {
                return Ok((0.0, 0.0));
            }
            let sv = if valloc.at(v) < tol.no_win { Err(RuleError::NoWin(v)) } else { s(valloc) }?;
            Ok((sv - s(ealloc)?, balance * rate / e))
        }
    }
}
