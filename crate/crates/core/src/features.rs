//! Context feature vectors that drive the pattern gate.
//!
//! Layout: `[hour-of-day bins | 7 weekday slots | category slots]`, each block
//! one-hot. Weekday slot 0 is Monday.

use serde::{Deserialize, Serialize};

use crate::checkin::{Dataset, Transition};
use crate::error::{Error, Result};

pub const WEEKDAY_SLOTS: usize = 7;
pub const DEFAULT_TIME_BINS: usize = 24;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub time_bins: usize,
    pub utc_offset_hours: f64,
    pub categories: Vec<String>,
}

impl FeatureSchema {
    pub fn new(time_bins: usize, utc_offset_hours: f64, categories: Vec<String>) -> Result<Self> {
        if time_bins == 0 || 24 % time_bins != 0 {
            return Err(Error::Config(format!("time_bins = {time_bins} must divide 24")));
        }
        if !utc_offset_hours.is_finite() || utc_offset_hours.abs() > 24.0 {
            return Err(Error::Config(format!("utc offset {utc_offset_hours} h out of range")));
        }
        Ok(FeatureSchema {
            time_bins,
            utc_offset_hours,
            categories,
        })
    }

    pub fn weekday_slots(&self) -> usize {
        WEEKDAY_SLOTS
    }

    pub fn category_slots(&self) -> usize {
        self.categories.len()
    }

    /// Total feature count F.
    pub fn total_features(&self) -> usize {
        self.time_bins + WEEKDAY_SLOTS + self.categories.len()
    }

    pub fn weekday_offset(&self) -> usize {
        self.time_bins
    }

    pub fn category_offset(&self) -> usize {
        self.time_bins + WEEKDAY_SLOTS
    }

    fn offset_seconds(&self) -> i64 {
        (self.utc_offset_hours * 3600.0).round() as i64
    }

    /// Hour-of-day bin of a UTC timestamp in local time.
    pub fn time_bin(&self, timestamp: i64) -> usize {
        let local = timestamp + self.offset_seconds();
        let second_of_day = local.rem_euclid(SECONDS_PER_DAY);
        let hour = (second_of_day / 3600) as usize;
        hour / (24 / self.time_bins)
    }

    /// Local weekday, Monday = 0.
    pub fn weekday(&self, timestamp: i64) -> usize {
        let local = timestamp + self.offset_seconds();
        // 1970-01-01 was a Thursday
        (local.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as usize
    }

    /// Feature vector from a timestamp and an already-resolved category index.
    pub fn encode(&self, timestamp: i64, category: Option<u32>) -> Result<ContextVector> {
        let mut values = vec![0.0; self.total_features()];
        values[self.time_bin(timestamp)] = 1.0;
        values[self.weekday_offset() + self.weekday(timestamp)] = 1.0;
        if let Some(c) = category {
            let c = c as usize;
            if c >= self.categories.len() {
                return Err(Error::Featurize(format!(
                    "category index {c} outside schema of {} categories",
                    self.categories.len()
                )));
            }
            values[self.category_offset() + c] = 1.0;
        }
        Ok(ContextVector { values })
    }
}

/// Schema whose category block covers the dataset's category vocabulary.
pub fn build_feature_schema(dataset: &Dataset, time_bins: usize, utc_offset_hours: f64) -> Result<FeatureSchema> {
    FeatureSchema::new(time_bins, utc_offset_hours, dataset.catalog().categories().to_vec())
}

/// The bag of binary context features g(c).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub values: Vec<f64>,
}

impl ContextVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices of non-zero entries with their values.
    pub fn active(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().copied().enumerate().filter(|(_, v)| *v != 0.0)
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        debug_assert_eq!(weights.len(), self.values.len());
        self.active().map(|(j, g)| g * weights[j]).sum()
    }
}

/// Context of a transition: local time of the previous check-in and the
/// previous venue's category label.
pub fn featurize(transition: &Transition, prev_category: Option<&str>, schema: &FeatureSchema) -> Result<ContextVector> {
    let category = match prev_category {
        None => None,
        Some(label) => Some(
            schema
                .categories
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| Error::Featurize(format!("unknown category `{label}`")))? as u32,
        ),
    };
    schema.encode(transition.prev_time, category)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema(time_bins: usize, cats: &[&str]) -> FeatureSchema {
        FeatureSchema::new(time_bins, 0.0, cats.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn transition_at(t: i64) -> Transition {
        Transition {
            user: 0,
            prev_poi: 0,
            next_poi: 1,
            prev_time: t,
            next_time: t + 60,
            distance_km: 1.0,
        }
    }

    const CATS: [&str; 8] = [
        "Arts & Entertainment",
        "College & University",
        "Food",
        "Great Outdoors",
        "Nightlife Spot",
        "Professional & Other Places",
        "Shop & Service",
        "Travel & Transport",
    ];

    #[test]
    fn feature_counts() {
        assert_eq!(schema(24, &CATS).total_features(), 39);
        assert_eq!(schema(6, &[]).total_features(), 13);
        assert!(FeatureSchema::new(5, 0.0, vec![]).is_err());
        assert!(FeatureSchema::new(0, 0.0, vec![]).is_err());
    }

    #[test]
    fn monday_morning_food() {
        // 2011-03-14 09:30:00 UTC, a Monday
        let t = 1_300_095_000;
        let s = schema(24, &CATS);
        let v = featurize(&transition_at(t), Some("Food"), &s).unwrap();
        let active: Vec<usize> = v.active().map(|(j, _)| j).collect();
        assert_eq!(active, vec![9, 24, 31 + 2]);
    }

    #[test]
    fn local_offset_shifts_bins() {
        // 2011-03-14 09:30 UTC is 01:30 in UTC-8, still Monday
        let s = FeatureSchema::new(24, -8.0, vec![]).unwrap();
        assert_eq!(s.time_bin(1_300_095_000), 1);
        assert_eq!(s.weekday(1_300_095_000), 0);
        // and 2011-03-14 03:00 UTC is Sunday 19:00 in UTC-8
        assert_eq!(s.weekday(1_300_071_600), 6);
        assert_eq!(s.time_bin(1_300_071_600), 19);
    }

    #[test]
    fn midnight_is_bin_zero() {
        let s = schema(24, &[]);
        // 1970-01-02 00:00:00 UTC
        assert_eq!(s.time_bin(86_400), 0);
        assert_eq!(s.time_bin(86_399), 23);
        assert_eq!(schema(6, &[]).time_bin(86_399), 5);
    }

    #[test]
    fn unknown_category_is_an_error() {
        let s = schema(24, &["Food"]);
        assert!(matches!(
            featurize(&transition_at(100), Some("Shop"), &s),
            Err(Error::Featurize(_))
        ));
        assert!(s.encode(100, Some(3)).is_err());
    }

    #[test]
    fn missing_category_leaves_block_empty() {
        let s = schema(24, &["Food", "Shop"]);
        let v = featurize(&transition_at(100), None, &s).unwrap();
        assert_eq!(v.values[s.category_offset()..].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn weekday_matches_calendar() {
        let s = schema(24, &[]);
        // 1970-01-01 Thursday, 2000-01-01 Saturday, 2024-02-29 Thursday
        assert_eq!(s.weekday(1), 3);
        assert_eq!(s.weekday(946_684_800), 5);
        assert_eq!(s.weekday(1_709_164_800), 3);
    }

    proptest! {
        #[test]
        fn blocks_are_one_hot(t in 1i64..4_000_000_000, bins in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 12, 24]),
                              cat in prop::option::of(0usize..8)) {
            let s = schema(bins, &CATS);
            let label = cat.map(|c| CATS[c]);
            let v = featurize(&transition_at(t), label, &s).unwrap();
            let time: f64 = v.values[..s.weekday_offset()].iter().sum();
            let week: f64 = v.values[s.weekday_offset()..s.category_offset()].iter().sum();
            let catsum: f64 = v.values[s.category_offset()..].iter().sum();
            prop_assert_eq!(time, 1.0);
            prop_assert_eq!(week, 1.0);
            prop_assert_eq!(catsum, if cat.is_some() { 1.0 } else { 0.0 });
            prop_assert!(v.values.iter().all(|&x| x == 0.0 || x == 1.0));
            let again = featurize(&transition_at(t), label, &s).unwrap();
            prop_assert_eq!(v, again);
        }
    }
}
