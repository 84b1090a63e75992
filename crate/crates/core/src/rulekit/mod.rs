//! Allocation rules, payment identity, bid strategies and their inversion.

mod bid;
mod rule;
mod tail;

pub use bid::{
    bid_strategy, infer_value_foc, invert_strategy, linear_bid_exponent, make_bid_rule, scale_rule, truthful_payment,
    BidRule, Inference, LowPiece,
};
pub use rule::{uniform_grid, MonotoneRule, PaymentFormat, Tolerances, DEFAULT_GRID};
pub use tail::{linear_tail_slope, LinearTail};
