use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::analysis::Counterfactual;
use crate::dashboards::Dashboard;
use crate::rebalancing::{BalanceLedger, LedgerEntry};

/// One agent in one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub value: f64,
    pub bid: f64,
    pub inferred_value: f64,
    /// The bid was outside the dashboard's range and inference clamped it.
    pub extrapolated: bool,
    /// Stage whose published dashboard this agent faced.
    pub dashboard_id: usize,
    /// The dashboard fell back to the initial rule.
    pub fallback: bool,
    /// Algorithm probability at the inferred profile.
    pub alloc_prob: f64,
    /// Stage projection evaluated at the inferred value.
    pub projected_prob: f64,
    pub realized: f64,
    /// Charged payment: the bid (all-pay) or bid·realized (winner-pays-bid).
    pub payment: f64,
    /// Expected format payment: the bid or bid·alloc_prob.
    pub expected_payment: f64,
    /// Payment-identity payment of the stage projection at the inferred value.
    pub truthful_payment: f64,
    pub residual: f64,
    pub resolved: f64,
    pub balance_before: f64,
    pub balance: f64,
    pub eta: f64,
    pub v_dagger: Option<f64>,
    /// Best grid bid's utility minus the played bid's, this stage.
    pub best_response_gap: Option<f64>,
    pub explored: Option<bool>,
    pub implicit_payment: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub agents: Vec<AgentRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageDashboards {
    pub stage: usize,
    pub dashboards: Vec<Dashboard>,
}

/// Everything a run produced.
#[derive(Clone, Debug, Serialize)]
pub struct Trace {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub ledgers: Vec<BalanceLedger>,
    pub counterfactual: Vec<Option<Counterfactual>>,
    pub dashboards: Vec<StageDashboards>,
}

/// Flat CSV row; the first twelve columns are the stable core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub stage: usize,
    pub agent: usize,
    pub value: f64,
    pub bid: f64,
    pub inferred_value: f64,
    pub alloc_prob: f64,
    pub realized: f64,
    pub payment: f64,
    pub truthful_payment: f64,
    pub residual: f64,
    pub resolved: f64,
    pub balance: f64,
    pub expected_payment: f64,
    pub projected_prob: f64,
    pub best_response_gap: Option<f64>,
    pub extrapolated: bool,
    pub v_dagger: Option<f64>,
    pub eta: f64,
    pub implicit_payment: Option<f64>,
}

impl Trace {
    pub fn agent_count(&self) -> usize {
        self.config.agents.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = CsvRow> + '_ {
        self.stages.iter().flat_map(|s| {
            s.agents.iter().enumerate().map(move |(i, a)| CsvRow {
                stage: s.stage,
                agent: i,
                value: a.value,
                bid: a.bid,
                inferred_value: a.inferred_value,
                alloc_prob: a.alloc_prob,
                realized: a.realized,
                payment: a.payment,
                truthful_payment: a.truthful_payment,
                residual: a.residual,
                resolved: a.resolved,
                balance: a.balance,
                expected_payment: a.expected_payment,
                projected_prob: a.projected_prob,
                best_response_gap: a.best_response_gap,
                extrapolated: a.extrapolated,
                v_dagger: a.v_dagger,
                eta: a.eta,
                implicit_payment: a.implicit_payment,
            })
        })
    }

    /// Trace rebuilt from `config`, `seed` and CSV text; ledgers are replayed from
    /// the rows, counterfactual sums and dashboards are not recoverable.
    pub fn from_csv(config: ExperimentConfig, seed: u64, text: &str) -> Result<Self, csv::Error> {
        let stages = records_from_csv(text)?;
        let n = config.agents.len();
        let ledgers = (0..n)
            .map(|i| BalanceLedger {
                balance: stages.last().map_or(0.0, |s| s.agents[i].balance),
                rate: config.eta(),
                initial: 0.0,
                entries: stages
                    .iter()
                    .map(|s| {
                        let a = &s.agents[i];
                        LedgerEntry {
                            stage: s.stage,
                            residual: a.residual,
                            resolved: a.resolved,
                            realized: a.realized != 0.0,
                            balance: a.balance,
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(Self { config, seed, stages, ledgers, counterfactual: vec![None; n], dashboards: Vec::new() })
    }

    /// The trace as CSV, one row per agent and stage.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Rebuilds stage records from CSV rows. Columns not in the CSV come back empty
/// (`balance_before` is recovered from the previous row).
pub fn records_from_csv(text: &str) -> Result<Vec<StageRecord>, csv::Error> {
    let mut out: Vec<StageRecord> = Vec::new();
    let mut last_balance: Vec<f64> = Vec::new();
    for row in csv::Reader::from_reader(text.as_bytes()).deserialize() {
        let r: CsvRow = row?;
        if out.last().map(|s| s.stage) != Some(r.stage) {
            out.push(StageRecord { stage: r.stage, agents: Vec::new() });
        }
        if last_balance.len() <= r.agent {
            last_balance.resize(r.agent + 1, 0.0);
        }
        let before = std::mem::replace(&mut last_balance[r.agent], r.balance);
        out.last_mut().expect("stage pushed").agents.push(AgentRecord {
            value: r.value,
            bid: r.bid,
            inferred_value: r.inferred_value,
            extrapolated: r.extrapolated,
            dashboard_id: r.stage,
            fallback: false,
            alloc_prob: r.alloc_prob,
            projected_prob: r.projected_prob,
            realized: r.realized,
            payment: r.payment,
            expected_payment: r.expected_payment,
            truthful_payment: r.truthful_payment,
            residual: r.residual,
            resolved: r.resolved,
            balance_before: before,
            balance: r.balance,
            eta: r.eta,
            v_dagger: r.v_dagger,
            best_response_gap: r.best_response_gap,
            explored: None,
            implicit_payment: r.implicit_payment,
        });
    }
    Ok(out)
}
