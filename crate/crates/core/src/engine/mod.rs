//! Multi-stage simulation: publish dashboards, collect bids, infer values, run
//! the allocation algorithm, settle payments and balances.

mod algorithm;
mod config;
mod trace;

pub use algorithm::{project_rule, AlgorithmKind, AlgorithmSpec, AllocationAlgorithm, ProfileFn};
pub use config::{AnalysisSpec, ExperimentConfig, RebalanceMode, RebalanceSpec, SingleCallSpec};
pub use trace::{records_from_csv, AgentRecord, CsvRow, StageDashboards, StageRecord, Trace};

use crate::agents::{act, learner_update, LearnerState, Strategy};
use crate::analysis::{best_response_gap, Counterfactual};
use crate::dashboards::{select_rule, Dashboard, DashboardPolicy, RuleHistory};
use crate::error::{EngineError, RuleError};
use crate::rebalancing::{clamp_support, ir_rebalancing, BalanceLedger};
use crate::rulekit::{bid_strategy, truthful_payment, uniform_grid, BidRule, MonotoneRule, PaymentFormat};
use crate::seeding::{substream, tag};
use crate::singlecall::{instrument_draw, instrumented_estimate, ExplorationSet, InstrumentConfig};

/// Floor on a derived single-call rebalancing rate.
const MIN_ETA: f64 = 1e-6;

struct AgentState {
    history: RuleHistory,
    exploration: ExplorationSet,
    ledger: BalanceLedger,
    learner: Option<LearnerState>,
    cf: Option<Counterfactual>,
    last_inferred: f64,
}

struct Published {
    dashboard: Dashboard,
    /// Same estimate, no rebalancing.
    baseline: MonotoneRule,
    eta: f64,
    v_dagger: Option<f64>,
}

fn rule_err(stage: usize) -> impl Fn(RuleError) -> EngineError {
    move |source| EngineError::Rule { stage, source }
}

/// The stage-one rule: the configured one, or max(min_slope, v/vmax).
pub fn initial_rule(cfg: &ExperimentConfig) -> Result<MonotoneRule, RuleError> {
    match &cfg.initial_rule {
        Some(r) => Ok(r.clone()),
        None => MonotoneRule::initial(cfg.vmax, cfg.grid, cfg.tolerances.min_slope),
    }
}

/// x̃(b) = x(ŝ⁻¹(b)) on `grid`.
fn bid_space_alloc(bid_rule: &BidRule, proj: &MonotoneRule, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&b| proj.at(bid_rule.solve(b).value)).collect()
}

fn format_payment(format: PaymentFormat, b: f64, x: f64) -> f64 {
    match format {
        PaymentFormat::AllPay => b,
        PaymentFormat::WinnerPaysBid => b * x,
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    policy: DashboardPolicy,
    template: MonotoneRule,
    agents: Vec<AgentState>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, seed: u64) -> Result<Self, EngineError> {
        cfg.validate()?;
        let err = rule_err(0);
        let initial = initial_rule(cfg).map_err(&err)?;
        let policy = DashboardPolicy::new(cfg.policy, initial).map_err(&err)?;
        let template = MonotoneRule::linear(cfg.vmax, cfg.grid).map_err(&err)?;
        let cf_grid = match cfg.analysis.bid_grid {
            0 => None,
            k => Some(uniform_grid(cfg.vmax, k).map_err(&err)?),
        };
        let agents = cfg
            .agents
            .iter()
            .map(|a| {
                let learner = match a.strategy {
                    Strategy::Hedge { arms } => Some(LearnerState::new(arms, cfg.vmax).map_err(&err)?),
                    _ => None,
                };
                Ok(AgentState {
                    history: RuleHistory::for_policy(cfg.policy),
                    exploration: ExplorationSet::new(),
                    ledger: BalanceLedger::new(cfg.eta())?,
                    learner,
                    cf: cf_grid.clone().map(|g| Counterfactual::new(cfg.format, g)),
                    last_inferred: 0.0,
                })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        Ok(Self { cfg, seed, policy, template, agents })
    }

    fn eta(&self, agent: usize) -> f64 {
        let cfg = self.cfg;
        match (cfg.rebalancing.eta, &cfg.single_call) {
            (Some(eta), _) => eta,
            (None, Some(sc)) => {
                let avg = self.agents[agent].exploration.average().unwrap_or_else(|| {
                    let r = &self.policy.initial_rule;
                    r.cumulative(r.vmax()).unwrap_or(0.0) / r.vmax()
                });
                (0.9 * sc.rho * avg).clamp(MIN_ETA, 1.0)
            }
            (None, None) => 1.0,
        }
    }

    fn publish(&self, stage: usize, agent: usize) -> Result<Published, EngineError> {
        let cfg = self.cfg;
        let st = &self.agents[agent];
        let err = rule_err(stage);
        let (rule, fallback) = match &cfg.single_call {
            Some(sc) => match instrumented_estimate(&st.exploration, sc.rho, cfg.vmax, cfg.grid, sc.fit_min_slope)? {
                Some(r) => (r, false),
                None => (self.policy.initial_rule.clone(), true),
            },
            None => select_rule(&self.policy, &st.history).map_err(&err)?,
        };
        let eta = self.eta(agent);
        let balance = st.ledger.balance;
        let band = cfg.rebalancing.dead_band;
        let balance = if band > 0.0 && balance.abs() <= band * st.last_inferred { 0.0 } else { balance };
        let plain = |r: MonotoneRule, transfer: f64| {
            let mut d = Dashboard::with_tolerances(r, cfg.format, transfer, stage, cfg.tolerances);
            d.fallback = fallback;
            d
        };
        let mut out = match cfg.rebalancing.mode {
            RebalanceMode::Off => {
                Published { dashboard: plain(rule.clone(), 0.0), baseline: rule, eta, v_dagger: None }
            }
            RebalanceMode::Reference => {
                Published { dashboard: plain(rule.clone(), balance * eta), baseline: rule, eta, v_dagger: None }
            }
            RebalanceMode::Ir => {
                let rule = if rule.at(0.0) < eta { clamp_support(&rule, eta)? } else { rule };
                let (d, splice) = ir_rebalancing(&rule, balance, eta, cfg.tolerances)?;
                Published { dashboard: d, baseline: rule, eta, v_dagger: (balance != 0.0).then_some(splice.v_dagger) }
            }
        };
        out.dashboard.stage_index = stage;
        out.dashboard.fallback = fallback;
        Ok(out)
    }

    fn stage(&mut self, stage: usize) -> Result<(StageRecord, Vec<Dashboard>), EngineError> {
        let cfg = self.cfg;
        let n = cfg.agents.len();
        let err = rule_err(stage);
        let alg = cfg.algorithm.instantiate(n, cfg.vmax, self.seed, stage)?;
        let values: Vec<f64> =
            cfg.agents.iter().enumerate().map(|(i, a)| a.values.value(self.seed, stage, i)).collect();
        let published = (0..n).map(|i| self.publish(stage, i)).collect::<Result<Vec<_>, _>>()?;

        let mut bids = Vec::with_capacity(n);
        let mut inferred = Vec::with_capacity(n);
        let mut extrapolated = Vec::with_capacity(n);
        for i in 0..n {
            let d = &published[i].dashboard;
            let b = act(&cfg.agents[i].strategy, self.agents[i].learner.as_ref(), d, values[i], self.seed, stage, i)
                .map_err(&err)?;
            let inf = d.bid_rule().map_err(|_| EngineError::NonInvertible { stage, agent: i })?.solve(b);
            bids.push(b);
            inferred.push(inf.value);
            extrapolated.push(inf.extrapolated);
        }

        let probs = alg.probs(&inferred);
        let proj = (0..n)
            .map(|i| project_rule(&alg, i, &inferred, &self.template, cfg.tolerances))
            .collect::<Result<Vec<_>, _>>()
            .map_err(&err)?;
        let draws = match &cfg.single_call {
            Some(sc) => {
                let ic = InstrumentConfig::new(sc.rho, cfg.vmax, self.seed)?;
                Some(instrument_draw(&alg, &inferred, &ic, stage)?.agents)
            }
            None => None,
        };
        let realized: Vec<f64> = match &draws {
            Some(d) => d.iter().map(|a| a.realized).collect(),
            None => alg.realize(&probs, &mut substream(self.seed, tag::REALIZE, stage, 0)),
        };

        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let pb = &published[i];
            let (v, b, vt, r) = (values[i], bids[i], inferred[i], realized[i]);
            let x = &proj[i];
            let truthful = truthful_payment(x, vt, 0.0).map_err(&err)?;
            let s_hat = match bid_strategy(&pb.baseline, vt, cfg.format, 0.0) {
                Err(RuleError::NoWin(_)) => 0.0,
                other => other.map_err(&err)?,
            };
            let (payment, expected) = match cfg.format {
                PaymentFormat::AllPay => (b, b),
                PaymentFormat::WinnerPaysBid => (b * r, b * probs[i]),
            };
            let st = &mut self.agents[i];
            let before = st.ledger.balance;
            st.ledger.rate = pb.eta;
            let entry = match (&draws, cfg.format) {
                (Some(d), PaymentFormat::AllPay) => st.ledger.settle(stage, d[i].payment, b, s_hat, true),
                (Some(d), PaymentFormat::WinnerPaysBid) => {
                    st.ledger.settle(stage, d[i].payment, r * b, r * s_hat, r != 0.0)
                }
                (None, PaymentFormat::AllPay) => st.ledger.settle(stage, truthful, b, s_hat, true),
                (None, PaymentFormat::WinnerPaysBid) => {
                    let s_true = match bid_strategy(x, vt, cfg.format, 0.0) {
                        Err(RuleError::NoWin(_)) => 0.0,
                        other => other.map_err(&err)?,
                    };
                    st.ledger.settle(stage, r * s_true, r * b, r * s_hat, r != 0.0)
                }
            };
            if draws.is_none() {
                st.history.push(x.clone(), r != 0.0).map_err(&err)?;
            }
            if let Some(d) = &draws {
                st.exploration.record(&d[i]);
            }
            st.last_inferred = vt;

            let bid_rule = pb.dashboard.bid_rule().map_err(&err)?;
            let x_at_bid = x.at(vt);
            let played = v * x_at_bid - format_payment(cfg.format, b, x_at_bid);
            let mut gap = None;
            if let Some(cf) = st.cf.as_mut() {
                let xt = bid_space_alloc(bid_rule, x, &cf.grid);
                gap = Some(best_response_gap(cfg.format, &cf.grid, &xt, v, played));
                cf.add_stage(&xt, v, b, x_at_bid);
            }
            if let Some(learner) = st.learner.as_mut() {
                let xt = bid_space_alloc(bid_rule, x, &learner.grid);
                let u: Vec<f64> =
                    learner.grid.iter().zip(&xt).map(|(&g, &xg)| v * xg - format_payment(cfg.format, g, xg)).collect();
                learner_update(learner, &u);
            }

            records.push(AgentRecord {
                value: v,
                bid: b,
                inferred_value: vt,
                extrapolated: extrapolated[i],
                dashboard_id: stage,
                fallback: pb.dashboard.fallback,
                alloc_prob: probs[i],
                projected_prob: x_at_bid,
                realized: r,
                payment,
                expected_payment: expected,
                truthful_payment: truthful,
                residual: entry.residual,
                resolved: entry.resolved,
                balance_before: before,
                balance: entry.balance,
                eta: pb.eta,
                v_dagger: pb.v_dagger,
                best_response_gap: gap,
                explored: draws.as_ref().map(|d| d[i].explored),
                implicit_payment: draws.as_ref().map(|d| d[i].payment),
            });
        }
        let dashboards = published.into_iter().map(|p| p.dashboard).collect();
        Ok((StageRecord { stage, agents: records }, dashboards))
    }
}

/// Runs the dashboard mechanism for `cfg.stages` stages with seed `cfg.seed`.
///
/// ```
/// use dashmech::agents::{AgentSpec, Strategy, ValuePath};
/// use dashmech::dashboards::PolicyKind;
/// use dashmech::engine::{run_dashboard_mechanism, AlgorithmSpec, ExperimentConfig};
/// use dashmech::rulekit::PaymentFormat;
/// let agent = |v| AgentSpec { values: ValuePath::Static { value: v }, strategy: Strategy::FollowDashboard };
/// let mut cfg = ExperimentConfig::new(
///     PaymentFormat::AllPay,
///     AlgorithmSpec::ProportionalShare { reserve: 0.0 },
///     vec![agent(2.5), agent(1.7)],
///     PolicyKind::LastStage,
///     5,
///     4.0,
/// );
/// cfg.grid = 257;
/// let trace = run_dashboard_mechanism(&cfg).unwrap();
/// let last = &trace.stages[4].agents[0];
/// assert!((last.inferred_value - 2.5).abs() < 1e-6);
/// ```
pub fn run_dashboard_mechanism(cfg: &ExperimentConfig) -> Result<Trace, EngineError> {
    run_with_seed(cfg, cfg.seed)
}

/// Same as [`run_dashboard_mechanism`] with the seed overridden.
pub fn run_with_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Trace, EngineError> {
    let mut runner = Runner::new(cfg, seed)?;
    let every = cfg.analysis.dashboards_every;
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut dashboards = Vec::new();
    for s in 1..=cfg.stages {
        let (rec, ds) = runner.stage(s)?;
        stages.push(rec);
        if let Some(k) = every {
            if s == 1 || s == cfg.stages || (k > 0 && s % k == 0) {
                dashboards.push(StageDashboards { stage: s, dashboards: ds });
            }
        }
    }
    let (ledgers, counterfactual) = runner.agents.into_iter().map(|a| (a.ledger, a.cf)).unzip();
    Ok(Trace { config: cfg.clone(), seed, stages, ledgers, counterfactual, dashboards })
}

/// The truthful mechanism on the given report profiles, one per stage: same
/// algorithm and outcome draws, payment-identity payments, zero balance.
///
/// Winner-pays-bid charges p(v)/x(v) on a win, so the expected charge is p(v).
pub fn run_truthful_mechanism(cfg: &ExperimentConfig, reports: &[Vec<f64>]) -> Result<Trace, EngineError> {
    cfg.validate()?;
    let n = cfg.agents.len();
    let template = MonotoneRule::linear(cfg.vmax, cfg.grid).map_err(rule_err(0))?;
    let mut ledgers = (0..n).map(|_| BalanceLedger::new(cfg.eta())).collect::<Result<Vec<_>, _>>()?;
    let mut stages = Vec::with_capacity(reports.len());
    for (k, profile) in reports.iter().enumerate() {
        let stage = k + 1;
        let err = rule_err(stage);
        if profile.len() != n {
            return Err(EngineError::Config(format!("stage {stage}: {} reports for {n} agents", profile.len())));
        }
        let alg = cfg.algorithm.instantiate(n, cfg.vmax, cfg.seed, stage)?;
        let probs = alg.probs(profile);
        let realized = alg.realize(&probs, &mut substream(cfg.seed, tag::REALIZE, stage, 0));
        let mut agents = Vec::with_capacity(n);
        for i in 0..n {
            let v = profile[i];
            let x = project_rule(&alg, i, profile, &template, cfg.tolerances).map_err(&err)?;
            let p = truthful_payment(&x, v, 0.0).map_err(&err)?;
            let r = realized[i];
            let charged = match cfg.format {
                PaymentFormat::AllPay => p,
                PaymentFormat::WinnerPaysBid if r != 0.0 && x.at(v) > 0.0 => p / x.at(v),
                PaymentFormat::WinnerPaysBid => 0.0,
            };
            let entry = ledgers[i].settle(stage, charged, charged, charged, r != 0.0);
            agents.push(AgentRecord {
                value: v,
                bid: v,
                inferred_value: v,
                extrapolated: false,
                dashboard_id: stage,
                fallback: false,
                alloc_prob: probs[i],
                projected_prob: x.at(v),
                realized: r,
                payment: charged,
                expected_payment: p,
                truthful_payment: p,
                residual: entry.residual,
                resolved: entry.resolved,
                balance_before: 0.0,
                balance: entry.balance,
                eta: cfg.eta(),
                v_dagger: None,
                best_response_gap: None,
                explored: None,
                implicit_payment: None,
            });
        }
        stages.push(StageRecord { stage, agents });
    }
    Ok(Trace {
        config: cfg.clone(),
        seed: cfg.seed,
        stages,
        ledgers,
        counterfactual: vec![None; n],
        dashboards: Vec::new(),
    })
}

/// Inferred-value profiles of a trace, one per stage.
pub fn inferred_profiles(trace: &Trace) -> Vec<Vec<f64>> {
    trace.stages.iter().map(|s| s.agents.iter().map(|a| a.inferred_value).collect()).collect()
}
