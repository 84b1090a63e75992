use serde::{Deserialize, Serialize};

use super::algorithm::AlgorithmSpec;
use crate::agents::{AgentSpec, Strategy};
use crate::dashboards::PolicyKind;
use crate::error::EngineError;
use crate::rulekit::{MonotoneRule, PaymentFormat, Tolerances, DEFAULT_GRID};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebalanceMode {
    /// Track the balance without changing dashboards.
    #[default]
    Off,
    /// Transfer B·η in the dashboard (all-pay only).
    Reference,
    /// Winner-pays-bid linear-bid splice with no transfer.
    Ir,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebalanceSpec {
    #[serde(default)]
    pub mode: RebalanceMode,
    /// Rebalancing rate η; defaults to 1, or to 0.9·ρ·(mean explored allocation) under single-call.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Suppress rebalancing while |B| ≤ dead_band·ṽ (previous inferred value).
    #[serde(default)]
    pub dead_band: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleCallSpec {
    pub rho: f64,
    /// Slope floor of the isotonic fit.
    #[serde(default = "default_fit_slope")]
    pub fit_min_slope: f64,
}

fn default_fit_slope() -> f64 {
    1e-6
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Points of the counterfactual bid grid on `[0, vmax]`; 0 disables it.
    #[serde(default)]
    pub bid_grid: usize,
    /// Keep the published dashboards of every k-th stage (and the last one).
    #[serde(default)]
    pub dashboards_every: Option<usize>,
}

/// A full experiment: market, agents, dashboards and run length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format: PaymentFormat,
    pub algorithm: AlgorithmSpec,
    pub agents: Vec<AgentSpec>,
    pub policy: PolicyKind,
    #[serde(default)]
    pub rebalancing: RebalanceSpec,
    #[serde(default)]
    pub single_call: Option<SingleCallSpec>,
    pub stages: usize,
    #[serde(default)]
    pub seed: u64,
    /// Inclusive seed range for sweeps.
    #[serde(default)]
    pub seeds: Option<[u64; 2]>,
    pub vmax: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// First-stage dashboard rule; defaults to max(min_slope, v/vmax).
    #[serde(default)]
    pub initial_rule: Option<MonotoneRule>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    /// Output directory for the CLI; the `--out` flag overrides it.
    #[serde(default)]
    pub out: Option<String>,
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

impl ExperimentConfig {
    /// Minimal config: static follow-the-dashboard agents, no rebalancing.
    pub fn new(
        format: PaymentFormat,
        algorithm: AlgorithmSpec,
        agents: Vec<AgentSpec>,
        policy: PolicyKind,
        stages: usize,
        vmax: f64,
    ) -> Self {
        Self {
            format,
            algorithm,
            agents,
            policy,
            rebalancing: RebalanceSpec::default(),
            single_call: None,
            stages,
            seed: 0,
            seeds: None,
            vmax,
            grid: DEFAULT_GRID,
            tolerances: Tolerances::default(),
            initial_rule: None,
            analysis: AnalysisSpec::default(),
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |m: String| Err(EngineError::Config(m));
        if self.agents.is_empty() {
            return err("agents: at least one agent is required".into());
        }
        if self.agents.len() > 0xffff {
            return err("agents: at most 65535 agents".into());
        }
        if self.stages == 0 {
            return err("stages: must be at least 1".into());
        }
        if !(self.vmax > 0.0 && self.vmax.is_finite()) {
            return err(format!("vmax: {} must be positive and finite", self.vmax));
        }
        if self.grid < 2 {
            return err(format!("grid: {} knots, need at least 2", self.grid));
        }
        if let PolicyKind::KLookback { k: 0 } = self.policy {
            return err("policy: lookback window must be at least 1".into());
        }
        self.algorithm.validate(self.agents.len()).or_else(|m| err(format!("algorithm: {m}")))?;
        for (i, a) in self.agents.iter().enumerate() {
            a.values.validate(self.vmax).or_else(|m| err(format!("agents[{i}].values: {m}")))?;
            match a.strategy {
                Strategy::ConstantBid { bid } if !(bid >= 0.0 && bid.is_finite()) => {
                    return err(format!("agents[{i}].strategy: bid {bid} must be non-negative"));
                }
                Strategy::Hedge { arms } if arms < 2 => {
                    return err(format!("agents[{i}].strategy: hedge needs at least 2 arms, got {arms}"));
                }
                Strategy::Hedge { .. } if self.single_call.is_some() => {
                    return err(format!("agents[{i}].strategy: hedge agents are not supported with single_call"));
                }
                _ => {}
            }
        }
        if let Some(eta) = self.rebalancing.eta {
            if !(eta > 0.0 && eta <= 1.0) {
                return err(format!("rebalancing.eta: {eta} must lie in (0, 1]"));
            }
        }
        if !(self.rebalancing.dead_band >= 0.0) {
            return err("rebalancing.dead_band: must be non-negative".into());
        }
        match (self.rebalancing.mode, self.format) {
            (RebalanceMode::Reference, PaymentFormat::WinnerPaysBid) => {
                return err(
                    "rebalancing.mode: reference rebalancing is not invertible for winner_pays_bid; use ir".into()
                );
            }
            (RebalanceMode::Ir, PaymentFormat::AllPay) => {
                return err("rebalancing.mode: ir applies to winner_pays_bid only; use reference".into());
            }
            _ => {}
        }
        if let Some(sc) = &self.single_call {
            if !(sc.rho > 0.0 && sc.rho < 1.0) {
                return err(format!("single_call.rho: {} must lie in (0, 1)", sc.rho));
            }
            if !(sc.fit_min_slope >= 0.0 && sc.fit_min_slope * self.vmax < 1.0) {
                return err(format!("single_call.fit_min_slope: {} is out of range", sc.fit_min_slope));
            }
        }
        if let Some([a, b]) = self.seeds {
            if a > b {
                return err(format!("seeds: empty range {a}..{b}"));
            }
        }
        if let Some(r) = &self.initial_rule {
            if (r.vmax() - self.vmax).abs() > 1e-12 * self.vmax {
                return err(format!("initial_rule: domain ends at {} but vmax is {}", r.vmax(), self.vmax));
            }
            if !r.is_strict(self.tolerances.min_slope) {
                return err("initial_rule: must be strictly increasing".into());
            }
        }
        Ok(())
    }

    /// Rebalancing rate when fixed by the config.
    pub fn eta(&self) -> f64 {
        self.rebalancing.eta.unwrap_or(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"{
        "format": "all_pay",
        "algorithm": {"kind": "proportional_share", "reserve": 1.0},
        "agents": [{"values": {"kind": "static", "value": 0.5}, "strategy": {"kind": "follow_dashboard"}}],
        "policy": {"kind": "last_stage"},
        "stages": 10,
        "vmax": 1.0
    }"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_json(MIN).unwrap();
        assert_eq!(cfg.grid, 1025);
        assert_eq!(cfg.rebalancing.mode, RebalanceMode::Off);
        assert_eq!(cfg.eta(), 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let empty = MIN.replace(
            r#"[{"values": {"kind": "static", "value": 0.5}, "strategy": {"kind": "follow_dashboard"}}]"#,
            "[]",
        );
        assert!(matches!(ExperimentConfig::from_json(&empty), Err(EngineError::Config(m)) if m.contains("agents")));
        let typo = MIN.replace("\"stages\"", "\"stagez\"");
        assert!(matches!(ExperimentConfig::from_json(&typo), Err(EngineError::Config(m)) if m.contains("line")));
        let mut cfg = ExperimentConfig::from_json(MIN).unwrap();
        cfg.format = PaymentFormat::WinnerPaysBid;
        cfg.rebalancing.mode = RebalanceMode::Reference;
        assert!(cfg.validate().is_err());
        cfg.rebalancing.mode = RebalanceMode::Ir;
        cfg.rebalancing.eta = Some(0.0);
        assert!(cfg.validate().is_err());
        cfg.rebalancing.eta = Some(0.2);
        assert!(cfg.validate().is_ok());
        cfg.single_call = Some(SingleCallSpec { rho: 1.0, fit_min_slope: 1e-6 });
        assert!(cfg.validate().is_err());
    }
}
