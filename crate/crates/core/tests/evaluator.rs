mod common;

use common::*;
use nextpoi::checkin::chronological_split;
use nextpoi::evaluate::*;
use nextpoi::model::GateMode;
use nextpoi::synth::{brute_force_rank, generate, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hand_enumerated_precision() {
    let (split, model) = metric_fixture();
    let want = [(1, 1.0 / 6.0), (2, 1.0 / 3.0), (3, 4.0 / 9.0), (4, 2.0 / 3.0)];
    for (n, p) in want {
        let got = precision_at_n(&model, &split, n).unwrap();
        assert!((got - p).abs() < 1e-15, "P@{n} = {got}, want {p}");
    }
    let want_new = [(1, 0.0), (2, 0.5), (3, 2.0 / 3.0), (4, 1.0)];
    for (n, p) in want_new {
        let got = precision_at_n_new(&model, &split, n).unwrap();
        assert!((got - p).abs() < 1e-15, "Pnew@{n} = {got}, want {p}");
    }
    let report = evaluate("fixed", &model, &split, &[1, 2, 3, 4], serde_json::Value::Null, true).unwrap();
    let frac = [(1, 0.0), (2, 0.5), (3, 2.0 / 3.0), (4, 0.8)];
    for (n, f) in frac {
        assert!((report.new_fraction_at[&n] - f).abs() < 1e-15);
    }
    let per_user = report.per_user_breakdown.unwrap();
    assert_eq!(per_user.len(), 3);
    assert_eq!(per_user[2].new_queries, 0);
    assert!(per_user[2].precision_new_at.is_empty());
}

#[test]
fn perfect_and_null_rankers() {
    let catalog = line_catalog(2, 6);
    let split = split_from(catalog.clone(), &[&[1], &[2]], &[&[0], &[0]]);
    let mut model = fixed_order_scorer(&catalog);
    // p0 always first: every query hits
    for n in [1, 3, 5] {
        assert_eq!(precision_at_n(&model, &split, n).unwrap(), 1.0);
    }
    // p0 always last
    model.poi_factors.iter_mut().for_each(|x| *x = -*x);
    for n in [1, 3, 4] {
        assert_eq!(precision_at_n(&model, &split, n).unwrap(), 0.0);
    }
}

#[test]
fn new_venue_precision_needs_new_targets() {
    let catalog = line_catalog(1, 4);
    let split = split_from(catalog.clone(), &[&[0, 1]], &[&[0, 1]]);
    let model = fixed_order_scorer(&catalog);
    assert!(precision_at_n_new(&model, &split, 2).is_err());
    let report = evaluate("m", &model, &split, &[1, 5, 10, 20], serde_json::Value::Null, false).unwrap();
    assert_eq!(report.precision_at.len(), 4);
    assert!(report.precision_new_at.is_empty());
}

#[test]
fn mismatched_model_is_refused() {
    let (split, mut model) = metric_fixture();
    model.fingerprint[0] ^= 1;
    assert!(matches!(
        evaluate("m", &model, &split, &[1], serde_json::Value::Null, false),
        Err(nextpoi::Error::Mismatch(_))
    ));
}

#[test]
fn top_n_matches_exhaustive_sort() {
    let model = random_model(3, 4, GateMode::PerUser, 5, 50, 0.5, 0.8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let u = rng.random_range(0..5);
        let i = rng.random_range(0..50);
        let ctx = context_at(&model, i, rng.random_range(0..10_000_000));
        let want = brute_force_rank(&model, u, i, &ctx);
        let n = rng.random_range(1..60);
        let got = recommend_top_n(&model, u, i, &ctx, n, None).unwrap();
        assert_eq!(got.len(), n.min(49));
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.poi, w.0);
        }
    }
}

#[test]
fn equal_scores_go_to_the_lower_index() {
    let catalog = line_catalog(1, 5);
    let mut model = fixed_order_scorer(&catalog);
    model.poi_factors = vec![1.0, 2.0, 2.0, 0.0, 2.0];
    let ctx = nextpoi::features::ContextVector { values: Vec::new() };
    let got = recommend_top_n(&model, 0, 0, &ctx, 10, None).unwrap();
    let order: Vec<u32> = got.iter().map(|r| r.poi).collect();
    assert_eq!(order, vec![1, 2, 4, 3]);
    let subset = recommend_top_n(&model, 0, 0, &ctx, 2, Some(&[4, 2, 3])).unwrap();
    assert_eq!(subset.iter().map(|r| r.poi).collect::<Vec<_>>(), vec![2, 4]);
}

#[test]
fn mf_separable_case_and_determinism() {
    let catalog = line_catalog(1, 2);
    let split = split_from(catalog, &[&[0, 0, 0, 0]], &[&[0]]);
    let config = MfConfig {
        dim: 1,
        epochs: 200,
        lambda: 0.001,
        ..MfConfig::default()
    };
    let a = train_mf_bpr_baseline(&split.train, &config).unwrap();
    assert!(a.score(0, 0) > a.score(0, 1));
    let b = train_mf_bpr_baseline(&split.train, &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn duplicate_models_give_identical_reports() {
    let corpus = generate(&SynthConfig {
        n_users: 10,
        n_pois: 30,
        events_per_user: 20,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = chronological_split(&corpus.dataset, 0.8).unwrap();
    let reports = evaluate_run(
        &[("a", &corpus.truth), ("b", &corpus.truth)],
        &split,
        &[1, 5, 10, 20],
        serde_json::Value::Null,
        false,
    )
    .unwrap();
    assert_eq!(reports[0].precision_at, reports[1].precision_at);
    assert_eq!(reports[0].precision_new_at, reports[1].precision_new_at);
    let table = render_table(&reports);
    assert_eq!(table.lines().count(), 3);
    let series = render_series(&reports);
    assert_eq!(series.lines().count(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn precision_is_monotone_in_n(seed in 0u64..1000) {
        let corpus = generate(&SynthConfig {
            n_users: 8,
            n_pois: 25,
            events_per_user: 12,
            seed,
            ..SynthConfig::default()
        }).unwrap();
        let split = chronological_split(&corpus.dataset, 0.7).unwrap();
        let cutoffs: Vec<usize> = (1..=25).collect();
        let r = evaluate("t", &corpus.truth, &split, &cutoffs, serde_json::Value::Null, false).unwrap();
        for w in cutoffs.windows(2) {
            prop_assert!(r.precision_at[&w[0]] <= r.precision_at[&w[1]]);
            if let (Some(a), Some(b)) = (r.precision_new_at.get(&w[0]), r.precision_new_at.get(&w[1])) {
                prop_assert!(a <= b);
                prop_assert!(*b <= 1.0);
            }
        }
    }

    #[test]
    fn ranking_ignores_monotone_transforms(seed in 0u64..1000, scale in 0.1f64..10.0, offset in -5.0f64..5.0) {
        let catalog = line_catalog(2, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = fixed_order_scorer(&catalog);
        model.poi_factors.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let ctx = nextpoi::features::ContextVector { values: Vec::new() };
        let before = recommend_top_n(&model, 1, 3, &ctx, 8, None).unwrap();
        // affine map with positive slope on every score: scale P, shift through a constant dimension
        model.dim = 2;
        model.user_factors = vec![scale, offset, scale, offset];
        model.poi_factors = model.poi_factors.iter().flat_map(|&q| [q, 1.0]).collect();
        let after = recommend_top_n(&model, 1, 3, &ctx, 8, None).unwrap();
        prop_assert_eq!(
            before.iter().map(|r| r.poi).collect::<Vec<_>>(),
            after.iter().map(|r| r.poi).collect::<Vec<_>>()
        );
    }
}
