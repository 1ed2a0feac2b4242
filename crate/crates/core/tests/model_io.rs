mod common;

use common::random_model;
use nextpoi::model::GateMode;
use nextpoi::model_io::*;
use nextpoi::spatial::PowerLawFit;
use proptest::prelude::*;

#[test]
fn spatial_fit_survives() {
    let mut m = random_model(2, 3, GateMode::Global, 4, 9, 0.1, 1.0, 3);
    m.meta.spatial_fit = Some(PowerLawFit {
        a: 2.0,
        k: -1.1,
        r_squared: 0.9,
        max_distance_km: 50.0,
    });
    let bytes = serialize(&m);
    assert_eq!(bytes.len(), encoded_len(&m));
    assert_eq!(deserialize(&bytes).unwrap(), m);
}

#[test]
fn damaged_files_are_rejected() {
    let m = random_model(2, 2, GateMode::PerUser, 3, 5, 0.1, 1.0, 4);
    let bytes = serialize(&m);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(deserialize(&bad_magic), Err(nextpoi::Error::Format(_))));
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    assert!(matches!(deserialize(&bad_version), Err(nextpoi::Error::Format(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(deserialize(&trailing).is_err());
    for cut in [0, 3, 10, 60, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(deserialize(&bytes[..cut]), Err(nextpoi::Error::Format(_))), "cut at {cut}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn round_trip_is_bit_exact(k in 1usize..4, d in 1usize..6, m in 1usize..6, n in 2usize..12,
                               per_user in any::<bool>(), seed in any::<u64>()) {
        let mode = if per_user { GateMode::PerUser } else { GateMode::Global };
        let model = random_model(k, d, mode, m, n, 0.37, 2.0, seed);
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        prop_assert_eq!(&buf, &serialize(&model));
        let back = read_model(&buf[..]).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(serialize(&back), buf);
    }
}
