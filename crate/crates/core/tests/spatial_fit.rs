use nextpoi::spatial::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Least squares through the normal equations, written out from sums.
fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    (intercept, slope)
}

#[test]
fn exact_power_law_is_recovered() {
    let samples: Vec<(f64, f64)> = (1..=40).map(|i| {
        let d = 0.05 * i as f64;
        (d, 11.0 / d)
    }).collect();
    let fit = fit_power_law(&samples, 50.0).unwrap();
    assert!((fit.a - 11.0).abs() < 1e-9, "a = {}", fit.a);
    assert!((fit.k + 1.0).abs() < 1e-9, "k = {}", fit.k);
    assert!((fit.r_squared - 1.0).abs() < 1e-9);
    assert!((fit.evaluate(2.0) - 5.5).abs() < 1e-9);
}

#[test]
fn samples_outside_the_range_are_ignored() {
    let mut samples = vec![(1.0, 2.0), (2.0, 1.0), (4.0, 0.5)];
    samples.extend([(100.0, 9.0), (0.0, 3.0), (3.0, 0.0), (-1.0, 1.0)]);
    let fit = fit_power_law(&samples, 50.0).unwrap();
    assert!((fit.k + 1.0).abs() < 1e-12);
    assert!(fit_power_law(&[(1.0, 1.0), (80.0, 2.0)], 50.0).is_err());
}

#[test]
fn histogram_counts_everything_in_range() {
    let d = [0.02, 0.5, 0.5, 3.0, 49.0, 60.0, 0.001];
    let bins = binned_frequencies(&d, 8, 0.01, 50.0);
    let total: f64 = bins.iter().map(|b| b.1).sum();
    assert_eq!(total, 5.0);
    assert!(bins.windows(2).all(|w| w[0].0 < w[1].0));
}

#[test]
fn known_distances() {
    // one degree of longitude on the equator
    let d = haversine_km(0.0, 0.0, 0.0, 1.0);
    assert!((d - EARTH_RADIUS_KM * std::f64::consts::PI / 180.0).abs() < 1e-9);
    let antipode = haversine_km(10.0, 20.0, -10.0, -160.0);
    // asin is ill-conditioned at 1, so antipodes only hold to about a metre
    assert!((antipode - EARTH_RADIUS_KM * std::f64::consts::PI).abs() < 1e-3);
    assert_eq!(spatial_preference(0.0, 0.01), 100.0);
    assert_eq!(spatial_preference(4.0, 0.01), 0.25);
}

proptest! {
    #[test]
    fn noisy_fit_matches_closed_form(seed in 0u64..10_000, k in -2.5f64..-0.2, a in 0.1f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<(f64, f64)> = (0..60).map(|_| {
            let d: f64 = rng.random_range(0.01..50.0);
            let noise: f64 = rng.random_range(-0.3..0.3);
            (d, a * d.powf(k) * noise.exp())
        }).collect();
        let logs: Vec<(f64, f64)> = samples.iter().map(|&(d, f)| (d.ln(), f.ln())).collect();
        let (b0, b1) = ols(&logs);
        let fit = fit_power_law(&samples, 50.0).unwrap();
        prop_assert!((fit.k - b1).abs() < 1e-9);
        prop_assert!((fit.a.ln() - b0).abs() < 1e-9);
        prop_assert!(fit.r_squared <= 1.0 + 1e-12);
    }

    #[test]
    fn haversine_is_a_metric(
        a in (-80.0f64..80.0, -179.0f64..179.0),
        b in (-80.0f64..80.0, -179.0f64..179.0),
        c in (-80.0f64..80.0, -179.0f64..179.0),
    ) {
        let ab = haversine_km(a.0, a.1, b.0, b.1);
        let ba = haversine_km(b.0, b.1, a.0, a.1);
        let bc = haversine_km(b.0, b.1, c.0, c.1);
        let ac = haversine_km(a.0, a.1, c.0, c.1);
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab >= 0.0 && ab <= EARTH_RADIUS_KM * std::f64::consts::PI + 1e-9);
        prop_assert!(ac <= ab + bc + 1e-6);
        prop_assert_eq!(haversine_km(a.0, a.1, a.0, a.1), 0.0);
    }
}
