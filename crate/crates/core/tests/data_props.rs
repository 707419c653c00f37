use bayescp::data::{apply_shift, make_blobs, split, ShiftKind, ShiftParams, SplitSpec};
use proptest::prelude::*;

fn kinds() -> impl Strategy<Value = ShiftKind> {
    prop_oneof![
        Just(ShiftKind::Translate),
        Just(ShiftKind::Rotate),
        Just(ShiftKind::GaussianNoise),
        Just(ShiftKind::FeatureScale),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shifts_keep_labels_and_size(
        k in 2usize..6,
        d in 2usize..6,
        n in 10usize..200,
        seed in any::<u64>(),
        kind in kinds(),
        intensity in 1u8..=5,
    ) {
        let n = n.max(k);
        let ds = make_blobs(k, d, n, 3.0, 1.0, seed).unwrap();
        let shifted = apply_shift(&ds, kind, intensity, &ShiftParams::for_within_std(1.0)).unwrap();
        prop_assert_eq!(shifted.len(), ds.len());
        prop_assert_eq!(shifted.labels(), ds.labels());
        prop_assert_eq!(shifted.dim(), d);
        prop_assert_eq!(shifted.provenance().intensity, intensity);
    }

    #[test]
    fn noise_displacement_grows_with_intensity(seed in any::<u64>(), d in 2usize..6) {
        let ds = make_blobs(4, d, 2000, 3.0, 1.0, seed).unwrap();
        let params = ShiftParams::for_within_std(1.0);
        let msd: Vec<f64> = (1..=5u8)
            .map(|i| {
                let s = apply_shift(&ds, ShiftKind::GaussianNoise, i, &params).unwrap();
                s.inputs().iter().zip(ds.inputs()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ds.len() as f64
            })
            .collect();
        prop_assert!(msd.windows(2).all(|w| w[1] > w[0]), "{:?}", msd);
    }

    #[test]
    fn partitions_cover_every_row_once(n in 20usize..300, seed in any::<u64>()) {
        let ds = make_blobs(3, 2, n, 3.0, 1.0, seed).unwrap();
        let spec = SplitSpec { train: 0.5, val: 0.1, cal: 0.2, test: 0.2, seed };
        let parts = split(&ds, &spec).unwrap();
        prop_assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), n);
        let mut rows: Vec<Vec<u64>> = parts
            .iter()
            .flat_map(|p| p.rows().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        let mut orig: Vec<Vec<u64>> = ds.rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        prop_assert_eq!(rows, orig);
    }
}

#[test]
fn same_seed_same_data() {
    let a = make_blobs(5, 3, 100, 2.0, 0.7, 9).unwrap();
    let b = make_blobs(5, 3, 100, 2.0, 0.7, 9).unwrap();
    let c = make_blobs(5, 3, 100, 2.0, 0.7, 10).unwrap();
    assert_eq!(a.inputs(), b.inputs());
    assert_ne!(a.inputs(), c.inputs());
}
