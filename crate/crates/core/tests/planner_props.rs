use gap_core::envs::EnvSpec;
use gap_core::planner::{self, CemConfig, OracleModel};
use proptest::prelude::*;

fn small_cem() -> CemConfig {
    CemConfig {
        candidates: 60,
        elites: 6,
        horizon: 6,
        iterations: 4,
        ..CemConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elite_means_never_increase(seed in any::<u64>(), task in 0u64..1000) {
        let env = EnvSpec::pointnav();
        let (s0, goal) = env.sample_task(task);
        let model = OracleModel { env: &env };
        let plan = planner::latent_mpc(&model, &env, &s0, &goal, &small_cem(), seed).unwrap();
        prop_assert_eq!(plan.elite_means.len(), 4);
        for w in plan.elite_means.windows(2) {
            prop_assert!(w[1] <= w[0], "elite means {:?}", plan.elite_means);
        }
        prop_assert!(plan.actions.iter().all(|a| a.iter().all(|x| x.abs() <= env.action_bound)));
    }

    #[test]
    fn plans_are_deterministic(seed in any::<u64>()) {
        let env = EnvSpec::from_id("blockpush-task1").unwrap();
        let (s0, goal) = env.sample_task(seed);
        let model = OracleModel { env: &env };
        let a = planner::latent_mpc(&model, &env, &s0, &goal, &small_cem(), seed).unwrap();
        let b = planner::latent_mpc(&model, &env, &s0, &goal, &small_cem(), seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn open_loop_selection_is_first_argmin(costs in prop::collection::vec(0u8..6, 1..40)) {
        let costs: Vec<f64> = costs.into_iter().map(f64::from).collect();
        let i = planner::select_open_loop(&costs).unwrap();
        let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(costs[i], min);
        prop_assert!(costs[..i].iter().all(|&c| c > min));
    }
}

#[test]
fn empty_or_nan_costs_are_rejected() {
    assert!(planner::select_open_loop(&[]).is_err());
    assert!(planner::select_open_loop(&[1.0, f64::NAN]).is_err());
}
