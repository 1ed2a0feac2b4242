use nextpoi::features::*;
use proptest::prelude::*;

#[test]
fn known_timestamp() {
    // 2011-03-13 18:30 UTC was a Sunday
    let ts = 1_300_041_000;
    let s = FeatureSchema::new(24, 0.0, vec!["a".into(), "b".into()]).unwrap();
    assert_eq!(s.total_features(), 33);
    assert_eq!(s.time_bin(ts), 18);
    assert_eq!(s.weekday(ts), 6);
    // eight hours ahead it is already Monday 02:30
    let east = FeatureSchema::new(24, 8.0, Vec::new()).unwrap();
    assert_eq!((east.time_bin(ts), east.weekday(ts)), (2, 0));
    let coarse = FeatureSchema::new(6, 0.0, Vec::new()).unwrap();
    assert_eq!(coarse.time_bin(ts), 4);
}

#[test]
fn invalid_schemas_and_categories() {
    assert!(FeatureSchema::new(5, 0.0, Vec::new()).is_err());
    assert!(FeatureSchema::new(24, 30.0, Vec::new()).is_err());
    let s = FeatureSchema::new(24, 0.0, vec!["a".into()]).unwrap();
    assert!(s.encode(1_300_000_000, Some(1)).is_err());
}

proptest! {
    #[test]
    fn one_hot_blocks(ts in 1_000_000_000i64..2_000_000_000, bins in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 12, 24]),
                      offset in -12.0f64..14.0, cat in prop::option::of(0u32..3)) {
        let s = FeatureSchema::new(bins, offset, vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let v = s.encode(ts, cat).unwrap();
        prop_assert_eq!(v.len(), bins + 7 + 3);
        let hour: f64 = v.values[..bins].iter().sum();
        let day: f64 = v.values[bins..bins + 7].iter().sum();
        let c: f64 = v.values[bins + 7..].iter().sum();
        prop_assert_eq!(hour, 1.0);
        prop_assert_eq!(day, 1.0);
        prop_assert_eq!(c, if cat.is_some() { 1.0 } else { 0.0 });
        prop_assert!(v.values.iter().all(|&x| x == 0.0 || x == 1.0));
        // the active hour bin agrees with plain arithmetic on local seconds
        let local = ts + (offset * 3600.0).round() as i64;
        let hour_of_day = local.rem_euclid(86_400) / 3600;
        prop_assert_eq!(v.values[(hour_of_day as usize) * bins / 24], 1.0);
        let w = vec![1.0; v.len()];
        prop_assert_eq!(v.dot(&w), hour + day + c);
    }
}
