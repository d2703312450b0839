use apverify::model::{
    intensity, select_counterexample_params, CounterexampleParams, DensityVariant,
};
use apverify::path::{simulate_full_paths, simulate_paths, GridSpec, Outcome, PathBundle};
use apverify::stats::{joint_std_error, McEstimate};
use proptest::prelude::*;

const CONF: f64 = 0.997;

fn params() -> CounterexampleParams {
    select_counterexample_params(0.5, 4.0, Some(0.7), DensityVariant::Corrected).unwrap()
}

fn hit_before_alarm(b: &PathBundle) -> McEstimate {
    // P(T1 < T2 and T1 < A) with A ~ exp(gamma) independent, integrated out.
    let g = b.params.gamma();
    let xs: Vec<f64> = b
        .summaries
        .iter()
        .map(|s| match s.outcome() {
            Outcome::Hit => (-g * s.terminal_time().unwrap()).exp(),
            _ => 0.0,
        })
        .collect();
    McEstimate::from_samples(&xs, CONF)
}

fn jump_first(b: &PathBundle) -> McEstimate {
    let xs: Vec<f64> = b
        .summaries
        .iter()
        .map(|s| f64::from(u8::from(s.outcome() == Outcome::Jump)))
        .collect();
    McEstimate::from_samples(&xs, CONF)
}

#[test]
fn coarse_grid_matches_fine_oracle() {
    let p = params();
    let coarse = GridSpec {
        dt: 1.0 / 16.0,
        ..GridSpec::for_params(&p)
    };
    let fine = GridSpec {
        dt: coarse.dt / 64.0,
        ..coarse
    };
    let n = 6_000;
    let c = simulate_paths(&p, &coarse, n, 101).unwrap();
    let f = simulate_paths(&p, &fine, n, 202).unwrap();
    for (name, a, b) in [
        (
            "hit before alarm",
            hit_before_alarm(&c),
            hit_before_alarm(&f),
        ),
        ("jump first", jump_first(&c), jump_first(&f)),
    ] {
        let se = joint_std_error(&a, &b);
        assert!(
            (a.value - b.value).abs() <= 3.0 * se,
            "{name}: {} vs {} (se {se})",
            a.value,
            b.value
        );
    }
}

#[test]
fn stopped_price_is_a_martingale() {
    let p = params();
    let grid = GridSpec {
        t_max: 8.0,
        ..GridSpec::for_params(&p)
    };
    let b = simulate_full_paths(&p, &grid, 4_000, 7).unwrap();
    let paths = b.paths.as_ref().unwrap();
    for t in [0.5, 2.0, 8.0] {
        // S at t ^ T, where T = T1 ^ T2 and S is bounded by 2 before T.
        let xs: Vec<f64> = paths
            .iter()
            .map(|path| match path.summary.terminal_time() {
                Some(end) if end <= t => path.summary.s_final,
                _ => {
                    let k = path.times.partition_point(|&u| u <= t) - 1;
                    path.price[k]
                }
            })
            .collect();
        let e = McEstimate::from_samples(&xs, CONF);
        assert!(
            e.within(1.0, 3.0),
            "t={t}: E_Q[S_(t^T)] = {} +- {}",
            e.value,
            e.std_error
        );
    }
    // Terminal price over uncensored paths: S stopped at T is a bounded
    // martingale and T is finite almost surely.
    let full = simulate_paths(&p, &GridSpec::for_params(&p), 40_000, 8).unwrap();
    let xs: Vec<f64> = full.uncensored().map(|s| s.s_final).collect();
    let e = McEstimate::from_samples(&xs, CONF);
    assert!(full.censored_mass < 2e-4);
    assert!(
        e.within(1.0, 3.0),
        "E_Q[S_T] = {} +- {}",
        e.value,
        e.std_error
    );
}

#[test]
fn tail_of_terminal_time_is_dominated_by_floor_clock() {
    let p = params();
    let b = simulate_paths(&p, &GridSpec::for_params(&p), 20_000, 9).unwrap();
    let n = b.summaries.len() as f64;
    for t in [1.0, 10.0, 50.0, 100.0, 200.0] {
        let f = b
            .summaries
            .iter()
            .filter(|s| s.terminal_time().is_none_or(|x| x > t))
            .count() as f64
            / n;
        let se = (f * (1.0 - f) / n).sqrt();
        assert!(f <= (-p.gamma() * t).exp() + 3.0 * se, "t={t}: {f}");
    }
}

#[test]
fn same_seed_same_bundle() {
    let p = params();
    let g = GridSpec::for_params(&p);
    let a = simulate_paths(&p, &g, 300, 5).unwrap();
    let b = simulate_paths(&p, &g, 300, 5).unwrap();
    assert_eq!(a.summaries, b.summaries);
    let c = simulate_paths(&p, &g, 300, 6).unwrap();
    assert_ne!(a.summaries, c.summaries);
    // A prefix of a larger ensemble is the smaller ensemble.
    let d = simulate_paths(&p, &g, 600, 5).unwrap();
    assert_eq!(&d.summaries[..300], &a.summaries[..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn intensity_is_at_least_the_floor(s in 0.0f64..1.999_999, post in any::<bool>()) {
        let p = params();
        let l = intensity(s, &p, post).unwrap();
        prop_assert!(l >= p.gamma());
        if post {
            prop_assert_eq!(l, p.gamma());
        }
    }

    #[test]
    fn selected_parameters_satisfy_constraints(a in 0.05f64..0.9, extra in 0.05f64..3.0) {
        let p = 1.0 / (1.0 - a) + extra;
        let params = select_counterexample_params(a, p, None, DensityVariant::Corrected).unwrap();
        let q = p / (p - 1.0);
        prop_assert!(params.b() > a && params.b() < 1.0 / q);
        prop_assert!(params.gamma() > 0.0);
        prop_assert!(params.gamma() <= params.delta() * (1.0 - params.delta()) / 2.0 + 1e-15);
    }

    #[test]
    fn paths_respect_invariants(seed in 0u64..1000) {
        let p = params();
        let grid = GridSpec { t_max: 30.0, ..GridSpec::for_params(&p) };
        let b = simulate_paths(&p, &grid, 20, seed).unwrap();
        for s in &b.summaries {
            prop_assert!(s.s_final > 0.0 && s.s_final <= 2.0);
            match s.outcome() {
                Outcome::Hit => prop_assert_eq!(s.s_final, 2.0),
                Outcome::Jump => prop_assert!(s.t2.time().unwrap() <= grid.t_max),
                Outcome::Censored => prop_assert!(s.terminal_time().is_none()),
            }
        }
    }
}
