use proptest::prelude::*;
use rand::Rng;
use thermoload::baselines::{hindsight_oracle, OracleConfig};
use thermoload::config::{ConfigError, ExperimentSpec};
use thermoload::environment::{risk_temperature, EstimatorMode, SigmaEstimator};
use thermoload::load::{check_sif_pair, solve_fixed_point, DemandVector, LoadVector, SolverParams};
use thermoload::rng::seeded;
use thermoload::sac::{PolicyCheckpoint, SacAgent, SacConfig, SampleMode};
use thermoload::thermal::{step_temperature, EnvironmentTrace, ThermalParams, ThermalState};
use thermoload::topology::{build_gain_table, generate_instance, GainTable, InterferenceMode, NetworkConfig};

fn mode() -> impl Strategy<Value = InterferenceMode> {
    prop_oneof![Just(InterferenceMode::Exact), Just(InterferenceMode::LongRange), Just(InterferenceMode::UpperBound)]
}

fn gains(seed: u64, cells: usize, mode: InterferenceMode) -> GainTable {
    let cfg = NetworkConfig { cell_count: cells, users_per_cell: 4, seed, ..NetworkConfig::default() };
    build_gain_table(&generate_instance(&cfg).unwrap(), mode)
}

fn random_loads(g: &GainTable, seed: u64, scale: f64) -> LoadVector {
    let mut rng = seeded(seed);
    let mut v = LoadVector::zeros(g);
    for x in v.values.iter_mut() {
        *x = rng.random::<f64>() * scale;
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn interference_map_is_monotone_and_scalable(
        seed in 0u64..1000,
        cells in 1usize..4,
        mode in mode(),
        bump in 0.0f64..1.0,
        a in 1.001f64..5.0,
        demand in 1e6f64..100e6,
    ) {
        let g = gains(seed, cells, mode);
        let rho = random_loads(&g, seed + 1, 1.0);
        let mut rho_prime = rho.clone();
        for x in rho_prime.values.iter_mut() {
            *x += bump;
        }
        let d = DemandVector::uniform(cells, demand, 100e6).unwrap();
        let r = check_sif_pair(&g, &d, &rho, &rho_prime, a, SolverParams::default().log_base).unwrap();
        prop_assert!(r.passed(), "{:?}", r.witness);
    }

    #[test]
    fn fixed_point_is_independent_of_the_start(
        seed in 0u64..1000,
        mode in mode(),
        demand in 1e6f64..30e6,
        s1 in 0u64..1000,
        s2 in 0u64..1000,
    ) {
        let g = gains(seed, 3, mode);
        let solver = SolverParams::default();
        let d = DemandVector::uniform(3, demand, 100e6).unwrap();
        let a = solve_fixed_point(&g, &d, &solver, &random_loads(&g, s1, 1.0)).unwrap();
        let b = solve_fixed_point(&g, &d, &solver, &random_loads(&g, s2, 1.0)).unwrap();
        prop_assume!(a.converged() && b.converged());
        for (x, y) in a.loads.values.iter().zip(&b.loads.values) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn chip_never_falls_below_ambient(
        chip in 0.0f64..130.0,
        amb in 5.0f64..45.0,
        next_amb in 5.0f64..45.0,
        sigma in 0.25f64..1.25,
        demand in 0.0f64..100e6,
    ) {
        let s = ThermalState { chip: vec![chip.max(amb)], ambient: vec![amb], sigma: vec![sigma], slot: 0 };
        let next = thermoload::thermal::SlotConditions { ambient: vec![next_amb], sigma: vec![sigma] };
        let out = step_temperature(&s, &[demand], &[ThermalParams::default()], &next);
        prop_assert!(out.chip[0] >= next_amb);
    }

    #[test]
    fn risk_temperature_stays_in_range(
        sigma in 0.001f64..2.0,
        amb in 0.0f64..140.0,
        alpha in 0.0f64..2.0,
        d_max in 1e6f64..200e6,
    ) {
        let p = ThermalParams { alpha, ..ThermalParams::default() };
        let r = risk_temperature(&p, sigma, amb, d_max);
        prop_assert!(r.value <= p.safe_limit);
        prop_assert!(r.value >= amb.min(p.safe_limit));
        if !r.always_at_risk && r.value < p.safe_limit {
            let next = thermoload::thermal::next_unclamped(r.value, amb, d_max, sigma, &p);
            prop_assert!(next <= p.safe_limit);
        }
    }

    #[test]
    fn sigma_estimates_stay_positive(
        obs in proptest::collection::vec(-1.0f64..2.0, 0..40),
        worst in any::<bool>(),
    ) {
        let m = if worst { EstimatorMode::WorstCase } else { EstimatorMode::HistoricalMean };
        let mut e = SigmaEstimator::new(m, 10, 0.75, 1);
        for s in obs {
            e.observe(0, s);
            prop_assert!(e.estimate(0, 0.5) > 0.0);
        }
    }

    #[test]
    fn trace_csv_round_trips(cells in 1usize..5, slots in 1usize..20, mean in 0.0f64..40.0, seed in any::<u64>()) {
        let tr = EnvironmentTrace::generate(cells, slots, mean, seed);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = EnvironmentTrace::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.slots(), slots);
        for t in 0..=slots {
            let (a, b) = (tr.conditions(t), back.conditions(t));
            prop_assert_eq!(a.ambient, b.ambient);
            prop_assert_eq!(a.sigma, b.sigma);
        }
    }

    #[test]
    fn config_errors_report_their_line(pad in 0usize..10) {
        let mut text = "# header\n".repeat(pad);
        text.push_str("sac.batch_size = banana\n");
        match ExperimentSpec::parse_str(&text) {
            Err(ConfigError::Parse { line, .. }) => prop_assert_eq!(line, pad + 1),
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampled_actions_stay_in_the_box(seed in any::<u64>(), state in proptest::collection::vec(-3.0f64..3.0, 9)) {
        let mut agent = SacAgent::new(9, 3, 100e6, SacConfig { seed, hidden: vec![16, 16], ..SacConfig::default() }).unwrap();
        for mode in [SampleMode::Stochastic, SampleMode::Mean] {
            let a = agent.sample_action(&state, mode).unwrap();
            prop_assert!(a.action.iter().all(|&x| (0.0..=100e6).contains(&x)));
            prop_assert!(a.normalized.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(a.log_prob.is_finite());
        }
    }

    #[test]
    fn policy_checkpoint_round_trips(seed in any::<u64>()) {
        let agent = SacAgent::new(6, 3, 50e6, SacConfig { seed, hidden: vec![8], ..SacConfig::default() }).unwrap();
        let ck = agent.checkpoint();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let (back, _) = PolicyCheckpoint::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, ck);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn refining_the_oracle_grid_never_lowers_its_value(seed in 0u64..500, amb in 16.0f64..32.0) {
        let g = gains(42, 2, InterferenceMode::UpperBound);
        let solver = SolverParams::default();
        let th = [ThermalParams { lambda: 0.02, safe_limit: 80.0, ..ThermalParams::default() }; 2];
        let tr = EnvironmentTrace::generate(2, 4, amb, seed);
        let coarse = OracleConfig { levels: 3, temp_grid: 10, ..OracleConfig::default() };
        let fine = OracleConfig { levels: 5, temp_grid: 19, ..OracleConfig::default() };
        let a = hindsight_oracle(&g, &solver, &th, &tr, 4, 100e6, &coarse).unwrap();
        let b = hindsight_oracle(&g, &solver, &th, &tr, 4, 100e6, &fine).unwrap();
        prop_assert!(b.total >= a.total - 1e-6, "coarse {} fine {}", a.total, b.total);
    }
}
