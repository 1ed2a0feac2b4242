//! Descriptive statistics of a check-in dataset.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkin::{build_transitions, Dataset};
use crate::error::Result;
use crate::features::FeatureSchema;
use crate::math::format_sig;
use crate::spatial::{fit_displacements, PowerLawFit, DEFAULT_FIT_MAX_DISTANCE_KM};

/// Distance thresholds in km. The last one exceeds half the earth's
/// circumference, so the CDF always ends at 1.
pub const DISTANCE_THRESHOLDS_KM: [f64; 17] = [
    0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0, 5000.0, 10000.0, 20100.0,
];

/// Time-gap thresholds in hours; the largest observed gap is appended.
pub const TIME_GAP_THRESHOLDS_H: [f64; 14] = [1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 48.0, 72.0, 168.0, 336.0, 720.0];

pub const TIMESCALE_DECILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Category-to-category transition frequencies on one weekday.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMatrix {
    /// Monday = 0.
    pub weekday: usize,
    /// Row-stochastic; rows without observations stay all zero.
    pub rows: Vec<Vec<f64>>,
    pub empty_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub num_users: usize,
    pub num_pois: usize,
    pub num_checkins: usize,
    pub num_transitions: usize,
    pub distance_cdf: Vec<(f64, f64)>,
    pub time_gap_cdf: Vec<(f64, f64)>,
    /// Check-ins per venue mapped to the share of venues with that count.
    pub visit_count_histogram: BTreeMap<usize, f64>,
    pub new_poi_ratio_by_timescale: Vec<(f64, f64)>,
    pub categories: Vec<String>,
    /// Seven matrices, empty when the dataset carries no categories.
    pub category_transition_matrix_by_weekday: Vec<CategoryMatrix>,
    /// Transitions over `M * N^2`.
    pub tensor_sparsity: f64,
    /// Power law fitted to binned transition distances, when enough bins
    /// are populated.
    pub spatial_fit: Option<PowerLawFit>,
}

fn cdf(values: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&v| v <= t) as f64 / n))
        .collect()
}

/// For each decile `t` of every user's own time span: the share of the
/// user's check-ins after the cut whose venue did not appear before it,
/// averaged over users with check-ins on both sides.
pub fn new_poi_ratio(dataset: &Dataset, deciles: &[f64]) -> Vec<(f64, f64)> {
    deciles
        .iter()
        .map(|&t| {
            let (mut sum, mut users) = (0.0, 0usize);
            for seq in dataset.sequences() {
                let (Some(first), Some(last)) = (seq.first(), seq.last()) else {
                    continue;
                };
                let cut = first.timestamp as f64 + t * (last.timestamp - first.timestamp) as f64;
                let split = seq.partition_point(|v| (v.timestamp as f64) <= cut);
                let (before, after) = seq.split_at(split);
                if before.is_empty() || after.is_empty() {
                    continue;
                }
                let known: HashSet<u32> = before.iter().map(|v| v.poi).collect();
                let fresh = after.iter().filter(|v| !known.contains(&v.poi)).count();
                sum += fresh as f64 / after.len() as f64;
                users += 1;
            }
            (t, if users == 0 { 0.0 } else { sum / users as f64 })
        })
        .collect()
}

pub fn compute_stats(dataset: &Dataset, utc_offset_hours: f64) -> Result<StatsReport> {
    let catalog = dataset.catalog();
    let schema = FeatureSchema::new(24, utc_offset_hours, catalog.categories().to_vec())?;
    let transitions = build_transitions(dataset, None);

    let distances: Vec<f64> = transitions.iter().map(|t| t.distance_km).collect();
    let gaps: Vec<f64> = transitions.iter().map(|t| t.gap_hours()).collect();
    let mut gap_thresholds = TIME_GAP_THRESHOLDS_H.to_vec();
    if let Some(max) = gaps.iter().copied().reduce(f64::max) {
        if max > *gap_thresholds.last().unwrap() {
            gap_thresholds.push(max);
        }
    }

    let mut per_poi = vec![0usize; catalog.num_pois()];
    for seq in dataset.sequences() {
        for v in seq {
            per_poi[v.poi as usize] += 1;
        }
    }
    let mut visit_count_histogram = BTreeMap::new();
    for &c in &per_poi {
        *visit_count_histogram.entry(c).or_insert(0.0) += 1.0;
    }
    let n_pois = per_poi.len().max(1) as f64;
    visit_count_histogram.values_mut().for_each(|v| *v /= n_pois);

    let n_cat = catalog.categories().len();
    let category_transition_matrix_by_weekday = if n_cat == 0 {
        Vec::new()
    } else {
        let mut counts = vec![vec![vec![0.0; n_cat]; n_cat]; 7];
        for t in &transitions {
            let pois = catalog.pois();
            if let (Some(a), Some(b)) = (pois[t.prev_poi as usize].category, pois[t.next_poi as usize].category) {
                counts[schema.weekday(t.next_time)][a as usize][b as usize] += 1.0;
            }
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(weekday, mut rows)| {
                let mut empty_rows = Vec::new();
                for (r, row) in rows.iter_mut().enumerate() {
                    let total: f64 = row.iter().sum();
                    if total == 0.0 {
                        empty_rows.push(r);
                    } else {
                        row.iter_mut().for_each(|x| *x /= total);
                    }
                }
                CategoryMatrix {
                    weekday,
                    rows,
                    empty_rows,
                }
            })
            .collect()
    };

    let denom = catalog.num_users() as f64 * (catalog.num_pois() as f64).powi(2);

    Ok(StatsReport {
        num_users: dataset.num_users(),
        num_pois: catalog.num_pois(),
        num_checkins: dataset.num_checkins(),
        num_transitions: transitions.len(),
        distance_cdf: cdf(&distances, &DISTANCE_THRESHOLDS_KM),
        time_gap_cdf: cdf(&gaps, &gap_thresholds),
        visit_count_histogram,
        new_poi_ratio_by_timescale: new_poi_ratio(dataset, &TIMESCALE_DECILES),
        categories: catalog.categories().to_vec(),
        category_transition_matrix_by_weekday,
        tensor_sparsity: transitions.len() as f64 / denom,
        spatial_fit: fit_displacements(&distances, DEFAULT_FIT_MAX_DISTANCE_KM).ok(),
    })
}

const WEEKDAYS: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

impl StatsReport {
    /// `key = value` lines, numbers to six significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let f = |v: f64| format_sig(v, 6);
        let _ = writeln!(out, "num_users = {}", self.num_users);
        let _ = writeln!(out, "num_pois = {}", self.num_pois);
        let _ = writeln!(out, "num_checkins = {}", self.num_checkins);
        let _ = writeln!(out, "num_transitions = {}", self.num_transitions);
        let _ = writeln!(out, "tensor_sparsity = {}", f(self.tensor_sparsity));
        match &self.spatial_fit {
            Some(fit) => {
                let _ = writeln!(out, "spatial_fit.a = {}", f(fit.a));
                let _ = writeln!(out, "spatial_fit.k = {}", f(fit.k));
                let _ = writeln!(out, "spatial_fit.r_squared = {}", f(fit.r_squared));
            }
            None => {
                let _ = writeln!(out, "spatial_fit = none");
            }
        }
        for (t, p) in &self.distance_cdf {
            let _ = writeln!(out, "distance_cdf[{} km] = {}", f(*t), f(*p));
        }
        for (t, p) in &self.time_gap_cdf {
            let _ = writeln!(out, "time_gap_cdf[{} h] = {}", f(*t), f(*p));
        }
        for (c, p) in &self.visit_count_histogram {
            let _ = writeln!(out, "visit_count_histogram[{c}] = {}", f(*p));
        }
        for (t, r) in &self.new_poi_ratio_by_timescale {
            let _ = writeln!(out, "new_poi_ratio[{}] = {}", f(*t), f(*r));
        }
        for m in &self.category_transition_matrix_by_weekday {
            for (a, row) in m.rows.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| f(*v)).collect();
                let flag = if m.empty_rows.contains(&a) { " (empty)" } else { "" };
                let _ = writeln!(
                    out,
                    "category_transitions[{}][{}] = {}{flag}",
                    WEEKDAYS[m.weekday],
                    self.categories[a],
                    cells.join(" ")
                );
            }
        }
        out
    }
}
