//! Checks and report.md text. Everything here reads a trace rebuilt from
//! trace.csv, so the report can be reproduced from the CSV alone.

use std::fmt::Write;

use dashmech::analysis::{
    balance_checks, incentive_inconsistency, nash_check, realized_inconsistency, BalanceCheck, BoundKind, NashCheck,
};
use dashmech::engine::Trace;

#[derive(Clone, Debug, PartialEq)]
pub struct Checks {
    pub seed: u64,
    pub balance: Vec<BalanceCheck>,
    pub nash: Option<NashCheck>,
}

impl Checks {
    pub fn of(trace: &Trace) -> Self {
        Self { seed: trace.seed, balance: balance_checks(trace), nash: nash_check(trace) }
    }

    /// First violated bound, described with its stage and seed.
    pub fn violation(&self) -> Option<String> {
        for c in &self.balance {
            if let Some(stage) = c.violation {
                return Some(format!(
                    "agent {}: |B| exceeds the {} bound {} at stage {stage} (seed {})",
                    c.agent,
                    kind_name(c.kind),
                    c.bound,
                    self.seed
                ));
            }
        }
        if let Some(NashCheck { violation: Some((stage, agent)), value_tolerance, gap_tolerance, .. }) = self.nash {
            return Some(format!(
                "agent {agent}: static Nash tolerance (|ṽ−v| ≤ {value_tolerance}, gap ≤ {gap_tolerance}) fails at stage {stage} (seed {})",
                self.seed
            ));
        }
        None
    }
}

pub fn kind_name(kind: BoundKind) -> &'static str {
    match kind {
        BoundKind::Rebalancing => "rebalancing vmax/η",
        BoundKind::SingleCall => "single-call vmax/(ρη)",
        BoundKind::Natural => "natural v",
    }
}

/// Shortest round-trip text, in exponent form for very small or large magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e6).contains(&a) || !a.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn status(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "VIOLATED"
    }
}

/// report.md for one run.
pub fn render(trace: &Trace, checks: &Checks) -> String {
    let cfg = &trace.config;
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "# Run report\n");
    let _ = writeln!(
        w,
        "seed {}, format {:?}, {} stages, {} agents, vmax {}\n",
        trace.seed,
        cfg.format,
        trace.stages.len(),
        trace.agent_count(),
        num(cfg.vmax)
    );

    let _ = writeln!(w, "## Balance bounds\n");
    if checks.balance.is_empty() {
        let _ = writeln!(w, "No pathwise balance guarantee covers this setting.\n");
    } else {
        let _ = writeln!(w, "| agent | guarantee | bound | max abs balance | first violation | status |");
        let _ = writeln!(w, "|---|---|---|---|---|---|");
        for c in &checks.balance {
            let stage = c.violation.map_or("-".to_string(), |s| s.to_string());
            let _ = writeln!(
                w,
                "| {} | {} | {} | {} | {} | {} |",
                c.agent,
                kind_name(c.kind),
                num(c.bound),
                num(c.max_abs),
                stage,
                status(c.passed())
            );
        }
        let _ = writeln!(w);
    }

    let _ = writeln!(w, "## Static Nash convergence\n");
    match &checks.nash {
        None => {
            let _ = writeln!(w, "Not applicable, or the run kept no best-response gaps (analysis.bid_grid = 0).\n");
        }
        Some(n) => {
            let _ = writeln!(w, "From stage 2 on:\n");
            let _ = writeln!(w, "| quantity | max | tolerance |");
            let _ = writeln!(w, "|---|---|---|");
            let _ = writeln!(w, "| inferred value error | {} | {} |", num(n.max_value_error), num(n.value_tolerance));
            let _ = writeln!(w, "| best-response gap | {} | {} |", num(n.max_gap), num(n.gap_tolerance));
            let at = n.violation.map_or(String::new(), |(s, a)| format!(" (stage {s}, agent {a})"));
            let _ = writeln!(w, "\nstatus: {}{at}\n", status(n.passed()));
        }
    }

    let _ = writeln!(w, "## Incentive inconsistency\n");
    let _ = writeln!(w, "| agent | allocation | payment | realized | final balance |");
    let _ = writeln!(w, "|---|---|---|---|---|");
    for i in 0..trace.agent_count() {
        let inc = incentive_inconsistency(trace, i);
        let balance = trace.stages.last().map_or(0.0, |s| s.agents[i].balance);
        let _ = writeln!(
            w,
            "| {i} | {} | {} | {} | {} |",
            num(inc.alloc_gap),
            num(inc.payment_gap),
            num(realized_inconsistency(trace, i)),
            num(balance)
        );
    }
    out
}
