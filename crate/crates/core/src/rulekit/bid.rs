use std::fmt;
use std::sync::Arc;

use super::rule::{MonotoneRule, PaymentFormat, Tolerances};
use crate::error::RuleError;

/// Result of mapping a bid back to a value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inference {
    pub value: f64,
    /// The bid fell outside the strategy range and was clamped to an endpoint.
    pub extrapolated: bool,
}

/// Payment-identity payment v·x(v) − ∫₀ᵛ x + transfer.
pub fn truthful_payment(rule: &MonotoneRule, v: f64, transfer: f64) -> Result<f64, RuleError> {
    let c = rule.cumulative(v)?;
    Ok(v * rule.at(v) - c + transfer)
}

/// Optimal bid of a value-`v` agent facing `rule` under `format` with the given transfer.
///
/// ```
/// use dashmech::rulekit::{bid_strategy, MonotoneRule, PaymentFormat};
/// let rule = MonotoneRule::linear(1.0, 1025).unwrap();
/// let b = bid_strategy(&rule, 0.5, PaymentFormat::WinnerPaysBid, 0.0).unwrap();
/// assert!((b - 0.25).abs() < 1e-12);
/// ```
pub fn bid_strategy(rule: &MonotoneRule, v: f64, format: PaymentFormat, transfer: f64) -> Result<f64, RuleError> {
    strategy_with(rule, v, format, transfer, Tolerances::default().no_win)
}

pub(crate) fn strategy_with(
    rule: &MonotoneRule,
    v: f64,
    format: PaymentFormat,
    transfer: f64,
    no_win: f64,
) -> Result<f64, RuleError> {
    let c = rule.cumulative(v)?;
    let x = rule.at(v);
    match format {
        PaymentFormat::AllPay => Ok(v * x - c + transfer),
        PaymentFormat::WinnerPaysBid => {
            if x < no_win {
                Err(RuleError::NoWin(v))
            } else {
                Ok(v - (c - transfer) / x)
            }
        }
    }
}

/// Builds the bid-space view of `rule` with default tolerances.
pub fn make_bid_rule(rule: &MonotoneRule, format: PaymentFormat, transfer: f64) -> Result<BidRule, RuleError> {
    BidRule::build(rule, format, transfer, Tolerances::default())
}

/// First-order-condition inference: WPB v = b + x̃/x̃′, all-pay v = 1/x̃′.
pub fn infer_value_foc(bid_rule: &BidRule, b: f64) -> Result<Inference, RuleError> {
    bid_rule.infer_foc(b)
}

/// Bisection inversion of the bid strategy.
pub fn invert_strategy(bid_rule: &BidRule, b: f64) -> Inference {
    bid_rule.invert(b)
}

/// Multiplies every probability by `alpha`.
pub fn scale_rule(rule: &MonotoneRule, alpha: f64) -> Result<MonotoneRule, RuleError> {
    if !(alpha > 0.0) || alpha * rule.max_prob() > 1.0 {
        return Err(RuleError::ScaleOverflow(alpha));
    }
    rule.map_probs(|_, p| alpha * p)
}

/// Linear-bid piece under v†: allocation x†·(z/v†)^k and bid `bid_slope`·z.
///
/// The exponent comes from a nominal γ as γ/(1−γ), capped. The bid slope may be
/// the γ limit itself, which keeps the bid map exact where the power law is not.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowPiece {
    pub bid_slope: f64,
    pub exponent: f64,
    pub v_dagger: f64,
    pub x_dagger: f64,
}

impl LowPiece {
    pub fn new(bid_slope: f64, gamma: f64, v_dagger: f64, x_dagger: f64, exponent_cap: f64) -> Self {
        Self { bid_slope, exponent: linear_bid_exponent(gamma, exponent_cap).0, v_dagger, x_dagger }
    }

    pub fn alloc(&self, z: f64) -> f64 {
        if z <= 0.0 {
            0.0
        } else {
            (self.x_dagger * (z / self.v_dagger).powf(self.exponent)).min(1.0)
        }
    }

    /// ∫₀^{v†} of the allocation implied by the bid map, x†·v†·(1 − slope).
    pub fn integral(&self) -> f64 {
        self.x_dagger * self.v_dagger * (1.0 - self.bid_slope)
    }
}

/// Exponent γ/(1−γ) of the linear-bid rule, capped, with a flag set when capping.
pub fn linear_bid_exponent(gamma: f64, cap: f64) -> (f64, bool) {
    let k = gamma / (1.0 - gamma);
    if k.is_finite() && k <= cap {
        (k, false)
    } else {
        (cap, true)
    }
}

type BidFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Repr {
    Rule { rule: MonotoneRule, low: Option<LowPiece> },
    Analytic { alloc: BidFn, bid_hi: f64 },
}

/// Bid-space allocation rule x̃ = x ∘ s⁻¹ with its strategy table.
///
/// Values live in `[0, vmax]`. The table holds `(value, bid)` pairs with
/// strictly increasing bids; between rows the exact strategy is inverted.
#[derive(Clone)]
pub struct BidRule {
    format: PaymentFormat,
    transfer: f64,
    effective_transfer: f64,
    vmax: f64,
    tol: Tolerances,
    repr: Repr,
    table: Vec<(f64, f64)>,
}

impl fmt::Debug for BidRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BidRule")
            .field("format", &self.format)
            .field("transfer", &self.transfer)
            .field("vmax", &self.vmax)
            .field("rows", &self.table.len())
            .finish()
    }
}

impl BidRule {
    /// Bid rule of a strict value rule under the payment identity.
    pub fn build(
        rule: &MonotoneRule,
        format: PaymentFormat,
        transfer: f64,
        tol: Tolerances,
    ) -> Result<Self, RuleError> {
        rule.check_strict(tol.min_slope)?;
        let mut table = Vec::with_capacity(rule.len() + 1);
        let values = rule.values();
        let probs = rule.probs();
        let start = match format {
            PaymentFormat::AllPay => 0,
            PaymentFormat::WinnerPaysBid => {
                let k0 = probs.partition_point(|&p| p < tol.no_win);
                if k0 == probs.len() {
                    return Err(RuleError::NoWin(rule.vmax()));
                }
                // s′ = (C − t)·x′/x², so the strategy falls wherever C(v) < t
                if transfer > rule.prefix(k0) {
                    let hi =
                        (k0..values.len()).find(|&k| rule.prefix(k) >= transfer).map_or(rule.vmax(), |k| values[k]);
                    return Err(RuleError::NonInvertible { lo: values[k0], hi });
                }
                if k0 > 0 && probs[k0 - 1] == 0.0 && transfer == 0.0 {
                    // right limit of v − ∫x/x where x leaves zero linearly
                    table.push((values[k0 - 1], values[k0 - 1]));
                }
                k0
            }
        };
        // knots are exact: C(v_k) is the stored prefix integral
        for k in start..values.len() {
            let (v, x, c) = (values[k], probs[k], rule.prefix(k));
            let s = match format {
                PaymentFormat::AllPay => v * x - c + transfer,
                PaymentFormat::WinnerPaysBid => v - (c - transfer) / x,
            };
            table.push((v, s));
        }
        let out = Self {
            format,
            transfer,
            effective_transfer: transfer,
            vmax: rule.vmax(),
            tol,
            repr: Repr::Rule { rule: rule.clone(), low: None },
            table,
        };
        out.check_table()?;
        Ok(out)
    }

    /// Winner-pays-bid rule that follows a linear-bid piece below `low.v_dagger`
    /// and `rule` above it, with no transfer.
    pub fn spliced(rule: &MonotoneRule, low: LowPiece, tol: Tolerances) -> Result<Self, RuleError> {
        let vd = low.v_dagger;
        if vd <= 0.0 {
            return Self::build(rule, PaymentFormat::WinnerPaysBid, 0.0, tol);
        }
        let effective_transfer = rule.integral(vd) - low.integral();
        let mut out = Self {
            format: PaymentFormat::WinnerPaysBid,
            transfer: 0.0,
            effective_transfer,
            vmax: rule.vmax(),
            tol,
            repr: Repr::Rule { rule: rule.clone(), low: Some(low) },
            table: vec![(0.0, 0.0), (vd, low.bid_slope * vd)],
        };
        // slope-one splices start flat at v†, so roundoff can tie the next knot
        for &v in rule.values().iter().filter(|&&v| v > vd) {
            let s = out.strategy_unchecked(v);
            let last = out.table[out.table.len() - 1].1;
            if s > last || !s.is_finite() {
                out.table.push((v, s));
            }
        }
        if let Some(bad) = out.table.iter().find(|(_, b)| !b.is_finite()) {
            return Err(RuleError::NoWin(bad.0));
        }
        out.check_table()?;
        Ok(out)
    }

    /// Bid rule given directly in bid space by a smooth, increasing `alloc` on `[0, bid_hi]`.
    ///
    /// The strategy is the utility-maximizing bid, found by golden-section search;
    /// `grid` values on `[0, vmax]` populate the table.
    pub fn from_bid_fn(
        format: PaymentFormat,
        vmax: f64,
        bid_hi: f64,
        grid: usize,
        alloc: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, RuleError> {
        let tol = Tolerances::default();
        let mut out = Self {
            format,
            transfer: 0.0,
            effective_transfer: 0.0,
            vmax,
            tol,
            repr: Repr::Analytic { alloc: Arc::new(alloc), bid_hi },
            table: Vec::new(),
        };
        for v in super::rule::uniform_grid(vmax, grid)? {
            let s = out.strategy_unchecked(v);
            out.table.push((v, s));
        }
        let tie = 1e-12 * vmax;
        out.table.dedup_by(|a, b| (a.1 - b.1).abs() <= tie);
        out.check_table()?;
        Ok(out)
    }

    fn check_table(&self) -> Result<(), RuleError> {
        for w in self.table.windows(2) {
            if !(w[1].1 > w[0].1) {
                return Err(RuleError::NonInvertible { lo: w[0].0, hi: w[1].0 });
            }
        }
        Ok(())
    }

    pub fn format(&self) -> PaymentFormat {
        self.format
    }

    pub fn transfer(&self) -> f64 {
        self.transfer
    }

    pub fn vmax(&self) -> f64 {
        self.vmax
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    /// Sampled `(value, bid)` pairs.
    pub fn table(&self) -> &[(f64, f64)] {
        &self.table
    }

    /// Lowest and highest bid of the strategy.
    pub fn bid_range(&self) -> (f64, f64) {
        (self.table[0].1, self.table[self.table.len() - 1].1)
    }

    /// Lowest and highest value on which the strategy is defined.
    pub fn value_range(&self) -> (f64, f64) {
        (self.table[0].0, self.table[self.table.len() - 1].0)
    }

    /// Value-space allocation x(v).
    pub fn value_alloc(&self, v: f64) -> f64 {
        match &self.repr {
            Repr::Rule { rule, low } => match low {
                Some(lp) if v < lp.v_dagger => lp.alloc(v),
                _ => rule.at(v),
            },
            Repr::Analytic { alloc, .. } => alloc(self.strategy_unchecked(v)),
        }
    }

    /// Bid of a value-`v` agent; errors outside the domain or in the no-win region.
    pub fn strategy(&self, v: f64) -> Result<f64, RuleError> {
        if v.is_nan() || v < 0.0 || v > self.vmax * (1.0 + 1e-12) {
            return Err(RuleError::Domain(v));
        }
        let (vlo, _) = self.value_range();
        if v < vlo {
            return Err(RuleError::NoWin(v));
        }
        if v == vlo {
            return Ok(self.table[0].1);
        }
        Ok(self.strategy_unchecked(v))
    }

    fn strategy_unchecked(&self, v: f64) -> f64 {
        match &self.repr {
            Repr::Rule { rule, low } => {
                if let Some(lp) = low {
                    if v <= lp.v_dagger {
                        return lp.bid_slope * v;
                    }
                }
                let x = rule.at(v);
                let c = rule.integral(v);
                match self.format {
                    PaymentFormat::AllPay => v * x - c + self.effective_transfer,
                    PaymentFormat::WinnerPaysBid => v - (c - self.effective_transfer) / x,
                }
            }
            Repr::Analytic { alloc, bid_hi } => {
                let hi = match self.format {
                    PaymentFormat::AllPay => *bid_hi,
                    PaymentFormat::WinnerPaysBid => v.min(*bid_hi),
                };
                let utility = |b: f64| match self.format {
                    PaymentFormat::AllPay => v * alloc(b) - b,
                    PaymentFormat::WinnerPaysBid => (v - b) * alloc(b),
                };
                golden_max(utility, 0.0, hi)
            }
        }
    }

    fn bracket(&self, b: f64) -> usize {
        let idx = self.table.partition_point(|&(_, s)| s <= b);
        idx.clamp(1, self.table.len() - 1) - 1
    }

    fn clamp_bid(&self, b: f64) -> Option<Inference> {
        let (lo, hi) = self.bid_range();
        if b < lo {
            Some(Inference { value: self.table[0].0, extrapolated: true })
        } else if b > hi {
            Some(Inference { value: self.table[self.table.len() - 1].0, extrapolated: true })
        } else {
            None
        }
    }

    /// Value whose strategy equals `b`, by bisection between table rows.
    pub fn invert(&self, b: f64) -> Inference {
        if let Some(out) = self.clamp_bid(b) {
            return out;
        }
        let k = self.bracket(b);
        let (mut lo, mut hi) = (self.table[k].0, self.table[k + 1].0);
        let tol = self.tol.invert * self.vmax;
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.strategy_unchecked(mid) < b {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Inference { value: 0.5 * (lo + hi), extrapolated: false }
    }

    /// Value for `b`, solved in closed form where the strategy row spans a single
    /// linear segment; used for fast bid-space evaluation.
    pub fn solve(&self, b: f64) -> Inference {
        if let Some(out) = self.clamp_bid(b) {
            return out;
        }
        let k = self.bracket(b);
        let (v0, s0) = self.table[k];
        let v1 = self.table[k + 1].0;
        let Repr::Rule { rule, low } = &self.repr else {
            return self.invert(b);
        };
        if let Some(lp) = low {
            if v1 <= lp.v_dagger {
                return Inference { value: (b / lp.bid_slope).clamp(v0, v1), extrapolated: false };
            }
        }
        let i = rule.segment(0.5 * (v0 + v1));
        let c = rule.segment_slope(i);
        let x0 = rule.at(v0);
        let a = 0.5 * c;
        let (lin, cst) = match self.format {
            PaymentFormat::AllPay => (v0 * c, s0 - b),
            PaymentFormat::WinnerPaysBid => (c * (v0 - b), x0 * (s0 - b)),
        };
        let u = if a == 0.0 {
            if lin > 0.0 {
                -cst / lin
            } else {
                return self.invert(b);
            }
        } else {
            let disc = (lin * lin - 4.0 * a * cst).max(0.0).sqrt();
            if lin >= 0.0 {
                let denom = lin + disc;
                if denom > 0.0 {
                    -2.0 * cst / denom
                } else {
                    0.0
                }
            } else {
                (-lin + disc) / (2.0 * a)
            }
        };
        Inference { value: (v0 + u).clamp(v0, v1), extrapolated: false }
    }

    /// Bid-space allocation x̃(b); bids outside the range clamp to the endpoints.
    pub fn alloc(&self, b: f64) -> f64 {
        if let Repr::Analytic { alloc, bid_hi } = &self.repr {
            return alloc(b.clamp(0.0, *bid_hi));
        }
        self.value_alloc(self.solve(b).value)
    }

    /// Format payment p̃(b): b·x̃(b) or b.
    pub fn payment(&self, b: f64) -> f64 {
        match self.format {
            PaymentFormat::AllPay => b,
            PaymentFormat::WinnerPaysBid => b * self.alloc(b),
        }
    }

    /// Numerical derivative of x̃ at `b`, central where possible.
    pub fn alloc_slope(&self, b: f64, h: f64) -> f64 {
        let (lo, hi) = self.bid_range();
        let f = |z: f64| self.alloc(z);
        if b - h >= lo && b + h <= hi {
            (f(b + h) - f(b - h)) / (2.0 * h)
        } else if b - h < lo {
            (-3.0 * f(b) + 4.0 * f(b + h) - f(b + 2.0 * h)) / (2.0 * h)
        } else {
            (3.0 * f(b) - 4.0 * f(b - h) + f(b - 2.0 * h)) / (2.0 * h)
        }
    }

    /// First-order-condition inference from finite differences of x̃.
    pub fn infer_foc(&self, b: f64) -> Result<Inference, RuleError> {
        if let Some(out) = self.clamp_bid(b) {
            return Ok(out);
        }
        let (lo, hi) = self.bid_range();
        let h = self.tol.fd_step * (hi - lo);
        let d = self.alloc_slope(b, h);
        if !(d > 0.0) {
            return Err(RuleError::ZeroDerivative(b));
        }
        let value = match self.format {
            PaymentFormat::AllPay => 1.0 / d,
            PaymentFormat::WinnerPaysBid => b + self.alloc(b) / d,
        };
        Ok(Inference { value, extrapolated: false })
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        }
    }
    let mid = 0.5 * (lo + hi);
    [lo, mid, hi].into_iter().max_by(|x, y| f(*x).total_cmp(&f(*y))).unwrap()
}
