use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::RuleError;

/// Default number of knots on the shared value grid.
pub const DEFAULT_GRID: usize = 1025;

/// Numerical knobs of the rule toolkit. Lengths are relative to `vmax`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Smallest segment slope a strict rule may have.
    pub min_slope: f64,
    /// Allocations below this are the winner-pays-bid no-win region.
    pub no_win: f64,
    /// Bisection tolerance for strategy inversion.
    pub invert: f64,
    /// Finite-difference step for first-order-condition inference, relative to the bid range.
    pub fd_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { min_slope: 1e-9, no_win: 1e-12, invert: 1e-10, fd_step: 1e-6 }
    }
}

/// How bids turn into payments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaymentFormat {
    /// Pay the bid only when served: p̃(b) = b·x̃(b).
    WinnerPaysBid,
    /// Pay the bid regardless: p̃(b) = b.
    AllPay,
}

/// A non-decreasing allocation rule on `[0, vmax]`, piecewise linear between knots.
///
/// Evaluation is constant above the last knot. Integrals are exact for this
/// representation, so payments and bid strategies carry no quadrature error.
///
/// ```
/// use dashmech::rulekit::MonotoneRule;
/// let rule = MonotoneRule::new(vec![(0.0, 0.0), (1.0, 0.2), (2.0, 1.0)]).unwrap();
/// assert!((rule.eval(1.5).unwrap() - 0.6).abs() < 1e-12);
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneRule {
    values: Arc<[f64]>,
    probs: Vec<f64>,
    prefix: Vec<f64>,
    min_slope: f64,
}

impl MonotoneRule {
    /// Strict rule with the default slope floor.
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, RuleError> {
        Self::with_floor(knots, Tolerances::default().min_slope)
    }

    /// Strict rule: every segment slope must be at least `min_slope`.
    pub fn with_floor(knots: Vec<(f64, f64)>, min_slope: f64) -> Result<Self, RuleError> {
        let rule = Self::relaxed(knots)?;
        rule.check_strict(min_slope)?;
        Ok(rule)
    }

    /// Non-decreasing rule without a slope floor, for analysis-only use.
    pub fn relaxed(knots: Vec<(f64, f64)>) -> Result<Self, RuleError> {
        let (values, probs): (Vec<f64>, Vec<f64>) = knots.into_iter().unzip();
        Self::from_parts(values, probs)
    }

    fn from_parts(values: impl Into<Arc<[f64]>>, probs: Vec<f64>) -> Result<Self, RuleError> {
        let values: Arc<[f64]> = values.into();
        let bad = |m: &str| Err(RuleError::InvalidKnots(m.to_string()));
        if values.len() < 2 || values.len() != probs.len() {
            return bad("need at least two knots");
        }
        if values[0] != 0.0 {
            return bad("first knot must sit at value 0");
        }
        if values.iter().chain(&probs).any(|x| !x.is_finite()) {
            return bad("knots must be finite");
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return bad("knot values must be strictly increasing");
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if probs.windows(2).any(|w| w[1] < w[0]) {
            return bad("probabilities must be non-decreasing");
        }
        let mut prefix = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        prefix.push(0.0);
        let mut min_slope = f64::INFINITY;
        for i in 1..values.len() {
            let dv = values[i] - values[i - 1];
            acc += dv * (probs[i] + probs[i - 1]) / 2.0;
            prefix.push(acc);
            min_slope = min_slope.min((probs[i] - probs[i - 1]) / dv);
        }
        Ok(Self { values, probs, prefix, min_slope })
    }

    /// Samples `f` on a uniform grid of `n` knots and requires strictness.
    pub fn from_fn(vmax: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self, RuleError> {
        let grid = uniform_grid(vmax, n)?;
        let knots = grid.iter().map(|&v| (v, f(v))).collect();
        Self::new(knots)
    }

    /// Samples `f` on a uniform grid of `n` knots without a slope floor.
    pub fn from_fn_relaxed(vmax: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self, RuleError> {
        let grid = uniform_grid(vmax, n)?;
        let knots = grid.iter().map(|&v| (v, f(v))).collect();
        Self::relaxed(knots)
    }

    /// The rule x(v) = v/vmax.
    pub fn linear(vmax: f64, n: usize) -> Result<Self, RuleError> {
        Self::from_fn(vmax, n, |v| v / vmax)
    }

    /// The default stage-one dashboard rule x(v) = max(min_slope, v/vmax).
    pub fn initial(vmax: f64, n: usize, min_slope: f64) -> Result<Self, RuleError> {
        Self::with_floor(
            uniform_grid(vmax, n)?.into_iter().map(|v| (v, (v / vmax).max(min_slope))).collect(),
            min_slope,
        )
    }

    pub fn vmax(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().copied().zip(self.probs.iter().copied())
    }

    /// Smallest slope over all segments.
    pub fn min_segment_slope(&self) -> f64 {
        self.min_slope
    }

    pub fn is_strict(&self, min_slope: f64) -> bool {
        self.min_slope >= min_slope
    }

    /// Errors with the first segment whose slope is below `min_slope`.
    pub fn check_strict(&self, min_slope: f64) -> Result<(), RuleError> {
        if self.min_slope >= min_slope {
            return Ok(());
        }
        for i in 1..self.values.len() {
            let slope = self.segment_slope(i - 1);
            if slope < min_slope {
                return Err(RuleError::NotStrict { lo: self.values[i - 1], hi: self.values[i], slope, min_slope });
            }
        }
        Ok(())
    }

    pub fn max_prob(&self) -> f64 {
        *self.probs.last().unwrap()
    }

    /// Index `i` of the segment `[values[i], values[i+1]]` containing `v`.
    pub fn segment(&self, v: f64) -> usize {
        let idx = self.values.partition_point(|&x| x <= v);
        idx.clamp(1, self.values.len() - 1) - 1
    }

    pub fn segment_slope(&self, i: usize) -> f64 {
        (self.probs[i + 1] - self.probs[i]) / (self.values[i + 1] - self.values[i])
    }

    /// Allocation probability at `v`; negative values are a domain error.
    pub fn eval(&self, v: f64) -> Result<f64, RuleError> {
        if v < 0.0 || v.is_nan() {
            return Err(RuleError::Domain(v));
        }
        Ok(self.at(v))
    }

    /// Allocation probability with the domain clamped to `[0, vmax]`.
    pub fn at(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return self.probs[0];
        }
        if v >= self.vmax() {
            return self.max_prob();
        }
        let i = self.segment(v);
        self.probs[i] + self.segment_slope(i) * (v - self.values[i])
    }

    /// Exact integral of the rule over `[0, v]`.
    pub fn cumulative(&self, v: f64) -> Result<f64, RuleError> {
        let slack = 1e-12 * self.vmax();
        if v.is_nan() || v < -slack || v > self.vmax() + slack {
            return Err(RuleError::Domain(v));
        }
        Ok(self.integral(v))
    }

    pub(crate) fn integral(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, self.vmax());
        let i = self.segment(v);
        self.prefix[i] + (v - self.values[i]) * (self.probs[i] + self.at(v)) / 2.0
    }

    /// Integral over `[0, values[i]]`.
    pub fn prefix(&self, i: usize) -> f64 {
        self.prefix[i]
    }

    /// Applies `f` to every probability and rebuilds without a slope floor.
    pub fn map_probs(&self, f: impl Fn(f64, f64) -> f64) -> Result<Self, RuleError> {
        let probs = self.knots().map(|(v, p)| f(v, p)).collect();
        Self::from_parts(Arc::clone(&self.values), probs)
    }

    /// Same knots with new probabilities, without a slope floor.
    pub fn with_probs(&self, probs: Vec<f64>) -> Result<Self, RuleError> {
        Self::from_parts(Arc::clone(&self.values), probs)
    }

    /// Evaluates this rule on another knot set.
    pub fn resample(&self, values: &[f64]) -> Result<Self, RuleError> {
        Self::from_parts(values.to_vec(), values.iter().map(|&v| self.at(v)).collect())
    }

    /// Pointwise mean of rules sharing one knot grid.
    pub fn mean<'a>(rules: impl IntoIterator<Item = &'a MonotoneRule>) -> Result<Self, RuleError> {
        let mut iter = rules.into_iter();
        let first = iter.next().ok_or_else(|| RuleError::InvalidKnots("mean of no rules".into()))?;
        let mut sum = first.probs.clone();
        let mut count = 1.0;
        for rule in iter {
            if rule.values != first.values {
                return Err(RuleError::DomainMismatch(first.vmax(), rule.vmax()));
            }
            for (s, p) in sum.iter_mut().zip(&rule.probs) {
                *s += p;
            }
            count += 1.0;
        }
        for s in &mut sum {
            *s = (*s / count).min(1.0);
        }
        Self::from_parts(Arc::clone(&first.values), sum)
    }
}

/// `n` uniformly spaced values from 0 to `vmax` inclusive.
pub fn uniform_grid(vmax: f64, n: usize) -> Result<Vec<f64>, RuleError> {
    if n < 2 || !(vmax > 0.0) || !vmax.is_finite() {
        return Err(RuleError::InvalidKnots(format!("grid of {n} knots on [0, {vmax}]")));
    }
    let mut grid: Vec<f64> = (0..n).map(|i| vmax * i as f64 / (n - 1) as f64).collect();
    grid[n - 1] = vmax;
    Ok(grid)
}

impl Serialize for MonotoneRule {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<[f64; 2]> = self.knots().map(|(v, p)| [v, p]).collect();
        pairs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MonotoneRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(d)?;
        Self::relaxed(pairs.into_iter().map(|[v, p]| (v, p)).collect()).map_err(serde::de::Error::custom)
    }
}
