//! Geodesic distance and the distance-decay preference.
//!
//! The model score uses a fixed `d^-1` decay scaled by a learned weight per
//! pattern; [`fit_power_law`] exists to measure how well a corpus follows
//! `freq = a * d^k` in the first place.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Distances below this are clamped before taking the reciprocal.
pub const DEFAULT_MIN_DISTANCE_KM: f64 = 0.01;

/// Displacements longer than this are ignored when fitting.
pub const DEFAULT_FIT_MAX_DISTANCE_KM: f64 = 50.0;

/// Number of logarithmic bins used by [`binned_frequencies`].
pub const DEFAULT_FIT_BINS: usize = 32;

/// Great-circle distance between two (lat, lon) points given in degrees.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let phi1 = lat1.to_radians();
    let phi2 = lat2.to_radians();
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();

    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    // rounding can push h a hair above 1 for antipodal points
    2.0 * EARTH_RADIUS_KM * h.min(1.0).sqrt().asin()
}

/// `max(d, clamp)^-1`. The model multiplies this by a learned weight.
#[inline]
pub fn spatial_preference(distance_km: f64, min_distance_km: f64) -> f64 {
    1.0 / distance_km.max(min_distance_km)
}

/// Result of a least-squares fit of `log f = log a + k log d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub k: f64,
    pub r_squared: f64,
    pub max_distance_km: f64,
}

impl PowerLawFit {
    pub fn evaluate(&self, distance_km: f64) -> f64 {
        self.a * distance_km.powf(self.k)
    }
}

/// Ordinary least squares on `(ln d, ln f)` over samples with
/// `0 < d <= max_distance_km` and `f > 0`.
pub fn fit_power_law(samples: &[(f64, f64)], max_distance_km: f64) -> Result<PowerLawFit> {
    let points: Vec<(f64, f64)> = samples
        .iter()
        .filter(|&&(d, f)| d > 0.0 && d <= max_distance_km && f > 0.0 && d.is_finite() && f.is_finite())
        .map(|&(d, f)| (d.ln(), f.ln()))
        .collect();

    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 usable samples within {max_distance_km} km, got {}",
            points.len()
        )));
    }

    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= f64::EPSILON * n {
        return Err(Error::Fit("all usable samples share one distance".into()));
    }

    let k = sxy / sxx;
    let intercept = mean_y - k * mean_x;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let ss_res: f64 = points
            .iter()
            .map(|&(x, y)| (y - intercept - k * x).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };

    Ok(PowerLawFit {
        a: intercept.exp(),
        k,
        r_squared,
        max_distance_km,
    })
}

/// Histogram of displacement lengths over `bins` logarithmic bins spanning
/// `[min_km, max_km]`. Returns `(geometric bin centre, raw count)` for every
/// non-empty bin.
pub fn binned_frequencies(distances_km: &[f64], bins: usize, min_km: f64, max_km: f64) -> Vec<(f64, f64)> {
    assert!(bins > 0 && min_km > 0.0 && max_km > min_km);
    let lo = min_km.ln();
    let width = (max_km.ln() - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &d in distances_km {
        if d < min_km || d > max_km {
            continue;
        }
        let b = (((d.ln() - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(b, &c)| ((lo + (b as f64 + 0.5) * width).exp(), c as f64))
        .collect()
}

/// Bin then fit, with the default binning range `[0.01, max_distance_km]`.
pub fn fit_displacements(distances_km: &[f64], max_distance_km: f64) -> Result<PowerLawFit> {
    let samples = binned_frequencies(
        distances_km,
        DEFAULT_FIT_BINS,
        DEFAULT_MIN_DISTANCE_KM,
        max_distance_km,
    );
    fit_power_law(&samples, max_distance_km)
}
