use dashmech::agents::{AgentSpec, Strategy as Bidding, ValuePath};
use dashmech::analysis::hindsight_regret;
use dashmech::dashboards::PolicyKind;
use dashmech::engine::{
    inferred_profiles, run_dashboard_mechanism, run_truthful_mechanism, run_with_seed, AlgorithmSpec, ExperimentConfig,
};
use dashmech::rulekit::{MonotoneRule, PaymentFormat};
use proptest::prelude::*;

const VMAX: f64 = 4.0;

fn format() -> impl Strategy<Value = PaymentFormat> {
    prop_oneof![Just(PaymentFormat::AllPay), Just(PaymentFormat::WinnerPaysBid)]
}

fn bidder() -> impl Strategy<Value = AgentSpec> {
    let values = prop_oneof![
        (0.2f64..VMAX).prop_map(|value| ValuePath::Static { value }),
        (0.0f64..1.0, 1.0f64..VMAX).prop_map(|(lo, hi)| ValuePath::Uniform { lo, hi }),
    ];
    let strategy = prop_oneof![
        3 => Just(Bidding::FollowDashboard),
        1 => (0.0f64..1.0).prop_map(|bid| Bidding::ConstantBid { bid }),
    ];
    (values, strategy).prop_map(|(values, strategy)| AgentSpec { values, strategy })
}

fn config(format: PaymentFormat, agents: Vec<AgentSpec>, stages: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        format,
        AlgorithmSpec::RandomProportionalShare { reserve_lo: 0.1, reserve_hi: 1.0 },
        agents,
        PolicyKind::LastStage,
        stages,
        VMAX,
    );
    cfg.grid = 129;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_same_trace(f in format(), agents in prop::collection::vec(bidder(), 1..4), seed in any::<u64>()) {
        let cfg = config(f, agents, 12);
        let a = run_with_seed(&cfg, seed).unwrap();
        let b = run_with_seed(&cfg, seed).unwrap();
        prop_assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn allocations_equal_the_truthful_run(f in format(), agents in prop::collection::vec(bidder(), 1..4), seed in any::<u64>()) {
        let mut cfg = config(f, agents, 12);
        cfg.seed = seed;
        let dash = run_dashboard_mechanism(&cfg).unwrap();
        let truth = run_truthful_mechanism(&cfg, &inferred_profiles(&dash)).unwrap();
        for (a, b) in dash.stages.iter().zip(&truth.stages) {
            for (x, y) in a.agents.iter().zip(&b.agents) {
                prop_assert_eq!(x.alloc_prob, y.alloc_prob);
                prop_assert_eq!(x.realized, y.realized);
            }
        }
    }

    #[test]
    fn payments_follow_the_format(f in format(), agents in prop::collection::vec(bidder(), 1..4), seed in any::<u64>()) {
        let trace = run_with_seed(&config(f, agents, 12), seed).unwrap();
        for s in &trace.stages {
            let total: f64 = s.agents.iter().map(|a| a.inferred_value).sum();
            for a in &s.agents {
                let charged = match f {
                    PaymentFormat::AllPay => a.bid,
                    PaymentFormat::WinnerPaysBid => a.bid * a.realized,
                };
                prop_assert_eq!(a.payment, charged);
                prop_assert!(a.alloc_prob <= a.inferred_value / total + 1e-15);
            }
        }
    }

    #[test]
    fn static_followers_best_respond_from_stage_two(f in format(), v in prop::collection::vec(0.5f64..VMAX, 2..4)) {
        let agents = v.iter().map(|&value| AgentSpec { values: ValuePath::Static { value }, strategy: Bidding::FollowDashboard }).collect();
        let mut cfg = config(f, agents, 4);
        cfg.algorithm = AlgorithmSpec::ProportionalShare { reserve: 0.0 };
        cfg.analysis.bid_grid = 1025;
        let trace = run_dashboard_mechanism(&cfg).unwrap();
        for s in &trace.stages[1..] {
            for (a, &value) in s.agents.iter().zip(&v) {
                prop_assert!((a.inferred_value - value).abs() <= 1e-6 * VMAX);
                prop_assert!(a.best_response_gap.unwrap() <= 1e-3 * VMAX);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn hedge_regret_is_nonnegative_and_small(f in format(), value in 0.5f64..1.0, seed in any::<u64>()) {
        let t = 3000;
        let rule = MonotoneRule::from_fn(1.0, 129, |z| 0.1 + 0.8 * z).unwrap();
        let mut cfg = ExperimentConfig::new(
            f,
            AlgorithmSpec::FixedRules { rules: vec![rule] },
            vec![AgentSpec { values: ValuePath::Static { value }, strategy: Bidding::Hedge { arms: 257 } }],
            PolicyKind::LastStage,
            t,
            1.0,
        );
        cfg.grid = 129;
        cfg.analysis.bid_grid = 257;
        let trace = run_with_seed(&cfg, seed).unwrap();
        let (regret, _) = hindsight_regret(&trace, 0).unwrap();
        let bound = 2.0 * (257f64.ln() / t as f64).sqrt() + 3.0 / (t as f64).sqrt();
        prop_assert!(regret >= -1e-12, "{regret}");
        prop_assert!(regret <= bound, "{regret} > {bound}");
    }
}
