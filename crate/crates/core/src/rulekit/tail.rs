use crate::error::RuleError;

/// A winner-pays-bid rule that is linear with slope `delta` above `v`,
/// with `x = x(v)` and `p = p(v)` there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearTail {
    pub v: f64,
    pub x: f64,
    pub p: f64,
    pub delta: f64,
}

impl LinearTail {
    /// Bid of the type at the kink, B = P/X.
    pub fn kink_bid(&self) -> f64 {
        self.p / self.x
    }

    fn check(&self) -> Result<f64, RuleError> {
        let b = self.kink_bid();
        if !(self.v > b) || !(self.x > 0.0) || !(self.delta > 0.0) {
            return Err(RuleError::DegenerateTail { v: self.v, b });
        }
        Ok(b)
    }

    /// Winner-pays-bid bid of the type `v + nu`.
    pub fn bid_at(&self, nu: f64) -> f64 {
        (self.v * self.delta * nu + 0.5 * self.delta * nu * nu + self.p) / (self.x + self.delta * nu)
    }

    /// Bid-space allocation at bid `B + beta`, inverting `bid_at` by bisection.
    pub fn alloc_at(&self, beta: f64) -> f64 {
        let target = self.kink_bid() + beta;
        let (mut lo, mut hi) = (0.0, 1.0);
        while self.bid_at(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.bid_at(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.x + self.delta * 0.5 * (lo + hi)
    }

    /// Closed-form slope (X − δ(V−B−β))/√((V−B−β)² + 2βX/δ) + δ.
    pub fn closed_form_slope(&self, beta: f64) -> Result<f64, RuleError> {
        let b = self.check()?;
        let gap = self.v - b - beta;
        let root = (gap * gap + 2.0 * beta * self.x / self.delta).sqrt();
        Ok((self.x - self.delta * gap) / root + self.delta)
    }
}

/// Numerical derivative of the winner-pays-bid bid-allocation rule at bid B + β.
///
/// ```
/// use dashmech::rulekit::{linear_tail_slope, LinearTail};
/// let tail = LinearTail { v: 0.5, x: 0.5, p: 0.125, delta: 1.0 };
/// assert!((linear_tail_slope(&tail, 0.0).unwrap() - 2.0).abs() < 1e-6);
/// ```
pub fn linear_tail_slope(tail: &LinearTail, beta: f64) -> Result<f64, RuleError> {
    let b = tail.check()?;
    let h = 1e-5 * (tail.v - b);
    let f = |beta: f64| tail.alloc_at(beta);
    if beta >= h {
        Ok((f(beta + h) - f(beta - h)) / (2.0 * h))
    } else {
        Ok((-3.0 * f(beta) + 4.0 * f(beta + h) - f(beta + 2.0 * h)) / (2.0 * h))
    }
}
