mod common;

use hetseg::grid::LabelMap;
use hetseg::metrics::{dsc, evaluate, hausdorff, hd95, jaccard};
use proptest::prelude::*;

use common::{blob_mask, hd95_oracle, rng};

fn mask_strategy() -> impl Strategy<Value = LabelMap> {
    (any::<u64>(), 6usize..14, 6usize..14).prop_map(|(seed, h, w)| blob_mask(&mut rng(seed), h, w))
}

fn pair_strategy() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (any::<u64>(), 6usize..14, 6usize..14).prop_map(|(seed, h, w)| {
        let mut r = rng(seed);
        (blob_mask(&mut r, h, w), blob_mask(&mut r, h, w))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dsc_and_jaccard_are_related((a, b) in pair_strategy()) {
        let d = dsc(&a, &b, 1).unwrap();
        let j = jaccard(&a, &b, 1).unwrap();
        prop_assert!((d - dsc(&b, &a, 1).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
    }

    #[test]
    fn identical_masks_are_perfect(a in mask_strategy()) {
        prop_assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        prop_assert_eq!(hd95(&a, &a, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn hd95_matches_pairwise_enumeration((a, b) in pair_strategy()) {
        let got = hd95(&a, &b, 1).unwrap();
        let expected = hd95_oracle(&a, &b, 1);
        match (got, expected) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y),
            (x, y) => prop_assert_eq!(x, y),
        }
        if let (Some(p95), Some(full)) = (got, hausdorff(&a, &b, 1).unwrap()) {
            prop_assert!(p95 <= full);
        }
    }
}

#[test]
fn report_means_skip_background_and_undefined_distances() {
    let gt = LabelMap::new(2, 3, vec![0, 1, 1, 0, 2, 2]).unwrap();
    let pred = LabelMap::new(2, 3, vec![0, 1, 1, 0, 0, 0]).unwrap();
    let rep = evaluate(&[pred], &[gt], 3).unwrap();
    assert_eq!(rep.class_dsc[1], 100.0);
    assert_eq!(rep.class_dsc[2], 0.0);
    assert_eq!(rep.mean_dsc, 50.0);
    assert_eq!(rep.class_hd95[2], None);
    assert_eq!(rep.hd95_undefined, 1);
    assert_eq!(rep.mean_hd95, Some(0.0));
}
