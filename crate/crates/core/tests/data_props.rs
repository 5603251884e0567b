use gap_core::data::{self, Dataset, GoalMode, WindowSpec};
use gap_core::envs::EnvSpec;
use gap_core::rng;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

#[test]
fn window_offsets_and_starts_are_uniform() {
    let ds = data::collect(&EnvSpec::pointnav(), 8, 24, 5).unwrap();
    let spec = WindowSpec::default();
    let h = 4;
    let n_offsets = ds.episode_len + 1 - spec.window_len + 1;
    let n_starts = spec.window_len - h;
    let mut offsets = vec![0; n_offsets];
    let mut starts = vec![0; n_starts];
    let mut episodes = vec![0; ds.episodes.len()];
    let mut r = rng::stream(11, 0);
    for _ in 0..10_000 {
        let w = data::sample_window(&ds, &spec, h, &mut r).unwrap();
        offsets[w.offset] += 1;
        starts[w.t] += 1;
        episodes[w.episode] += 1;
    }
    for (what, counts) in [
        ("offset", &offsets),
        ("start", &starts),
        ("episode", &episodes),
    ] {
        let p = chi_square_p(counts);
        assert!(p > 0.01, "{what} counts {counts:?} give p = {p}");
    }
}

#[test]
fn collection_is_byte_identical_per_seed() {
    let env = EnvSpec::from_id("blockpush-task1").unwrap();
    let bytes = |seed| {
        let mut out = Vec::new();
        data::collect(&env, 6, 12, seed)
            .unwrap()
            .write_to(&mut out)
            .unwrap();
        out
    };
    assert_eq!(bytes(3), bytes(3));
    assert_ne!(bytes(3), bytes(4));
}

#[test]
fn dataset_roundtrips_through_disk() {
    let env = EnvSpec::from_id("blockpush-task2").unwrap();
    let ds = data::collect(&env, 5, 10, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.gapd");
    ds.write(&path).unwrap();
    let back = Dataset::read(&path).unwrap();
    back.verify(&env).unwrap();
    assert_eq!(back.env_id, ds.env_id);
    assert_eq!(back.episodes.len(), ds.episodes.len());
    for (a, b) in ds.episodes.iter().zip(&back.episodes) {
        for (x, y) in a.states.iter().zip(&b.states) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() <= 1e-6);
            }
        }
        for (x, y) in a.actions.iter().zip(&b.actions) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn truncated_file_is_rejected() {
    let ds = data::collect(&EnvSpec::pointnav(), 2, 5, 1).unwrap();
    let mut bytes = Vec::new();
    ds.write_to(&mut bytes).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Dataset::read_from(bytes.as_slice()).is_err());
}

#[test]
fn pointnav_collection_stays_in_unit_box() {
    let ds = data::collect(&EnvSpec::pointnav(), 500, 30, 2).unwrap();
    assert!(ds
        .episodes
        .iter()
        .flat_map(|e| &e.states)
        .all(|s| s.iter().all(|&x| (0.0..=1.0).contains(&x))));
}

fn shared_dataset() -> &'static Dataset {
    use std::sync::OnceLock;
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        data::collect(&EnvSpec::from_id("blockpush-task1").unwrap(), 6, 20, 21).unwrap()
    })
}

proptest! {
    #[test]
    fn relabeled_windows_reconstruct_goal(
        seed in any::<u64>(),
        window_len in 2usize..=21,
        h_frac in 0.0f64..1.0,
        episode_end in any::<bool>(),
    ) {
        let ds = shared_dataset();
        let h = ((window_len - 1) as f64 * h_frac) as usize;
        let goal_mode = if episode_end { GoalMode::EpisodeEnd } else { GoalMode::WindowEnd };
        let spec = WindowSpec { window_len, goal_mode };
        let w = data::sample_window(ds, &spec, h, &mut rng::stream(seed, 0)).unwrap();
        let ep = &ds.episodes[w.episode];

        // window stays inside its episode and its states are the episode's
        prop_assert!(w.offset + window_len <= ds.episode_len + 1);
        prop_assert!(w.t + h < window_len);
        prop_assert_eq!(&w.anchor, &ep.states[w.offset]);
        for k in 0..=h {
            prop_assert_eq!(w.state(k), &ep.states[w.offset + w.t + k]);
        }
        let expected_goal = match goal_mode {
            GoalMode::WindowEnd => &ep.states[w.offset + window_len - 1],
            GoalMode::EpisodeEnd => &ep.states[ds.episode_len],
        };
        prop_assert_eq!(&w.goal, expected_goal);

        prop_assert_eq!(w.residuals.len(), h + 1);
        for (k, r) in w.residuals.iter().enumerate() {
            for ((ri, si), gi) in r.iter().zip(w.state(k).iter()).zip(w.goal.iter()) {
                prop_assert_eq!(ri + si, *gi);
            }
        }
        if goal_mode == GoalMode::WindowEnd && w.t + h == window_len - 1 {
            prop_assert!(w.residuals[h].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn oversized_horizon_is_rejected(window_len in 1usize..=21, extra in 0usize..5) {
        let spec = WindowSpec { window_len, goal_mode: GoalMode::WindowEnd };
        let h = window_len + extra;
        prop_assert!(data::sample_window(shared_dataset(), &spec, h, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn curriculum_is_monotone_and_capped(quota in 1usize..5000, step in 0usize..1_000_000, cap in 0usize..20) {
        let h = data::curriculum_h(step, quota, cap);
        prop_assert!(h <= cap);
        prop_assert!(data::curriculum_h(step + 1, quota, cap) >= h);
        prop_assert_eq!(h, (step / quota).min(cap));
    }
}
