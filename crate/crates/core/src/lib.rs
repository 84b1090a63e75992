// `!(x > 0.0)` also rejects NaN, which is the point
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Dashboard mechanisms for sequential marketplaces.
//!
//! Agents bid against a published forecast of their bid-allocation rule (a
//! dashboard); the mechanism inverts each bid to a value, runs an allocation
//! algorithm on the inferred values, and tracks how far payments drift from the
//! truthful payments of the realized rules.

pub mod agents;
pub mod analysis;
pub mod dashboards;
pub mod engine;
pub mod error;
pub mod rebalancing;
pub mod rulekit;
pub mod seeding;
pub mod singlecall;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/rules.md")]
    pub struct Rules;
    #[doc = include_str!("../../../book/src/dashboards.md")]
    pub struct Dashboards;
    #[doc = include_str!("../../../book/src/rebalancing.md")]
    pub struct Rebalancing;
    #[doc = include_str!("../../../book/src/single-call.md")]
    pub struct SingleCall;
    #[doc = include_str!("../../../book/src/learners.md")]
    pub struct Learners;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
