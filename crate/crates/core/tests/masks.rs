mod common;

use std::collections::BTreeSet;

use maskblend_core::masks::{
    build_target_mask, celebamask_to_hair_task, fast_marching_fill, inpaint_target_mask, region_indicator,
    region_indicator_set, relabel, resample_mask, resample_values, LabelGrid, LabelMapping, Provenance, RegionSpec,
    SemanticMask, SoftRegionMask, TargetMask, CELEBAMASK_CLASSES,
};
use maskblend_core::Error;
use proptest::prelude::*;

use common::*;

fn mask(h: usize, w: usize, labels: &[u8], k: usize) -> SemanticMask {
    SemanticMask::new(h, w, labels.to_vec(), k).unwrap()
}

#[test]
fn two_by_two_priority_rule() {
    let m1 = mask(2, 2, &[1, 1, 1, 0], 3);
    let m2 = mask(2, 2, &[2, 0, 0, 0], 3);
    let t = build_target_mask(&[m1, m2], &[RegionSpec::new(0, [1]), RegionSpec::new(1, [2])]).unwrap();
    assert_eq!(t.labels(), &[2, 1, 1, U]);
    assert_eq!(
        t.provenance(),
        &[Provenance::Reference(1), Provenance::Reference(0), Provenance::Reference(0), Provenance::Inpainted]
    );
}

#[test]
fn overlapping_claim_goes_to_the_higher_priority() {
    let face = mask(1, 1, &[1], 3);
    let hair = mask(1, 1, &[2], 3);
    let t = build_target_mask(&[face, hair], &[RegionSpec::new(0, [1]), RegionSpec::new(1, [2])]).unwrap();
    assert_eq!(t.labels(), &[2]);
    // Explicit priorities override the index order.
    let face = mask(1, 2, &[1, 1], 3);
    let hair = mask(1, 2, &[2, 0], 3);
    let specs = [
        RegionSpec {
            reference: 0,
            class_ids: [1].into(),
            priority: 5,
        },
        RegionSpec::new(1, [2]),
    ];
    let t = build_target_mask(&[face, hair], &specs).unwrap();
    assert_eq!(t.labels(), &[1, 1]);
}

#[test]
fn single_reference_reproduces_its_relabeled_mask() {
    let raw = mask(2, 3, &[0, 13, 1, 13, 17, 0], 19);
    let m = relabel(&raw, &celebamask_to_hair_task()).unwrap();
    let t = build_target_mask(std::slice::from_ref(&m), &[RegionSpec::new(0, [0, 1, 2])]).unwrap();
    assert_eq!(t.labels(), m.labels());
    assert_eq!(m.labels(), &[0, 2, 1, 2, 1, 0]);
}

#[test]
fn build_errors() {
    let a = mask(2, 2, &[0; 4], 3);
    let b = mask(1, 2, &[0; 2], 3);
    assert!(matches!(
        build_target_mask(&[a.clone(), b], &[RegionSpec::new(0, [0])]),
        Err(Error::Shape(_))
    ));
    let clash = build_target_mask(&[a.clone(), a.clone()], &[RegionSpec::new(0, [0, 1]), RegionSpec::new(1, [1])]);
    match clash {
        Err(Error::InvalidLabels { labels, .. }) => assert_eq!(labels, vec![1]),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        build_target_mask(&[a], &[RegionSpec::new(3, [0])]),
        Err(Error::Request(_))
    ));
}

#[test]
fn hand_derived_fixtures() {
    for fx in [fixture_4x4(), fixture_8x8()] {
        let (identity, hair) = fx.masks();
        let built = build_target_mask(
            &[identity.clone(), hair.clone()],
            &[RegionSpec::new(0, [0, 1]), RegionSpec::new(1, [2])],
        )
        .unwrap();
        assert_eq!(built.labels(), fx.built.as_slice(), "{0}x{0} build", fx.size);
        assert_eq!(built.provenance(), fx.built_provenance.as_slice());
        let filled = inpaint_target_mask(&built, &hair, &identity).unwrap();
        assert_eq!(filled.labels(), fx.inpainted.as_slice(), "{0}x{0} inpaint", fx.size);
        assert_eq!(filled.uncovered_count(), 0);
        assert_eq!(filled.provenance(), built.provenance());
    }
}

#[test]
fn complete_mask_is_returned_unchanged() {
    let fx = fixture_4x4();
    let (identity, hair) = fx.masks();
    let t = TargetMask::from_semantic(&identity, 0);
    assert_eq!(inpaint_target_mask(&t, &hair, &identity).unwrap(), t);
}

#[test]
fn hole_inside_hair_becomes_hair() {
    #[rustfmt::skip]
    let labels = [
        2, 2, 2, 0,
        2, U, 2, 0,
        2, 2, 2, 0,
        0, 0, 0, 0,
    ];
    assert_eq!(fast_marching_fill(4, 4, &labels, U, &[0, 2], 0)[5], 2);
}

#[test]
fn bangs_in_front_of_the_face_stay_hair() {
    // The identity's face covers the hair reference's bangs at (1, 1); the
    // uncovered pixel next to them is filled, and the bangs stay hair.
    let identity = mask(3, 3, &[0, 2, 0, 1, 1, 1, 1, 1, 1], 3);
    let hair = mask(3, 3, &[2, 2, 2, 2, 2, 0, 0, 1, 0], 3);
    let built = build_target_mask(
        &[identity.clone(), hair.clone()],
        &[RegionSpec::new(0, [0, 1]), RegionSpec::new(1, [2])],
    )
    .unwrap();
    let filled = inpaint_target_mask(&built, &hair, &identity).unwrap();
    for p in 0..9 {
        if hair.labels()[p] == 2 {
            assert_eq!(filled.labels()[p], 2, "pixel {p}");
        }
    }
    assert_eq!(filled.uncovered_count(), 0);
}

#[test]
fn region_indicator_examples() {
    let m = mask(2, 2, &[1, 2, 2, 2], 3);
    assert_eq!(region_indicator(&m, 2).values(), &[0.0, 1.0, 1.0, 1.0]);
    assert!(region_indicator(&m, 0).values().iter().all(|&v| v == 0.0));
    let both: BTreeSet<u8> = [1, 2].into();
    assert!(region_indicator_set(&m, &both).values().iter().all(|&v| v == 1.0));
}

#[test]
fn resample_examples() {
    let ones = SoftRegionMask::constant(5, 7, 1.0);
    assert!(resample_mask(&ones, 3, 11).values().iter().all(|&v| v == 1.0));
    let checker = SoftRegionMask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(resample_mask(&checker, 1, 1).values(), &[0.5]);
    // Catmull-Rom taps at offset 1/2 are (-1/16, 9/16, 9/16, -1/16); the top
    // output row sees rows (0, 0, 1, 2) after edge clamping and the bottom
    // row sees (1, 2, 3, 3).
    let top: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
    let raw = resample_values(&top, 4, 4, 2, 2);
    assert_eq!(raw, vec![1.0625, 1.0625, -0.0625, -0.0625]);
    let clamped = resample_mask(&SoftRegionMask::new(4, 4, top).unwrap(), 2, 2);
    assert_eq!(clamped.values(), &[1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn relabel_examples() {
    let m = mask(1, 3, &[0, 1, 2], 3);
    assert_eq!(relabel(&m, &LabelMapping::identity(3)).unwrap(), m);
    let to_one = LabelMapping {
        map: (0..3).map(|c| (c, 0)).collect(),
        num_classes: 1,
    };
    assert_eq!(relabel(&m, &to_one).unwrap().labels(), &[0, 0, 0]);
    let partial = LabelMapping {
        map: [(0, 0)].into(),
        num_classes: 1,
    };
    match relabel(&m, &partial) {
        Err(Error::InvalidLabels { labels, .. }) => assert_eq!(labels, vec![1, 2]),
        other => panic!("{other:?}"),
    }
    let table = celebamask_to_hair_task();
    assert_eq!(table.map.len(), CELEBAMASK_CLASSES.len());
    assert_eq!(CELEBAMASK_CLASSES[13], "hair");
}

#[test]
fn label_png_and_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = mask(3, 2, &[0, 1, 2, 2, 1, 0], 3);
    let path = dir.path().join("m.png");
    m.save(&path, &maskblend_core::masks::LabelTable::from_names(&["background", "face", "hair"]))
        .unwrap();
    assert!(maskblend_core::masks::sidecar_path(&path).exists());
    assert_eq!(SemanticMask::load(&path, 99).unwrap(), m);
    let fx = fixture_4x4();
    let (identity, hair) = fx.masks();
    let t = build_target_mask(&[identity, hair], &[RegionSpec::new(0, [0, 1]), RegionSpec::new(1, [2])]).unwrap();
    let back = TargetMask::from_pngs(&t.labels_png().unwrap(), &t.provenance_png().unwrap(), 3).unwrap();
    assert_eq!(back, t);
}

fn labels_strategy(h: usize, w: usize, k: u8) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0..k, h * w)
}

proptest! {
    #[test]
    fn build_is_idempotent(labels in labels_strategy(5, 6, 3)) {
        let m = mask(5, 6, &labels, 3);
        let all = [RegionSpec::new(0, [0, 1, 2])];
        let once = build_target_mask(&[m], &all).unwrap();
        let again = build_target_mask(&[once.to_semantic().unwrap()], &all).unwrap();
        prop_assert_eq!(once.labels(), again.labels());
    }

    #[test]
    fn inpainting_leaves_nothing_uncovered_and_keeps_covered_pixels(
        a in labels_strategy(6, 6, 3),
        b in labels_strategy(6, 6, 3),
    ) {
        let (identity, hair) = (mask(6, 6, &a, 3), mask(6, 6, &b, 3));
        let built = build_target_mask(
            &[identity.clone(), hair.clone()],
            &[RegionSpec::new(0, [0, 1]), RegionSpec::new(1, [2])],
        ).unwrap();
        let filled = inpaint_target_mask(&built, &hair, &identity).unwrap();
        prop_assert_eq!(filled.uncovered_count(), 0);
        for (p, &l) in built.labels().iter().enumerate() {
            if l != U {
                prop_assert_eq!(filled.labels()[p], l);
            }
        }
    }

    #[test]
    fn resampling_is_linear_before_clamping(
        x in proptest::collection::vec(0.0f64..1.0, 36),
        y in proptest::collection::vec(0.0f64..1.0, 36),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        oh in 1usize..9,
        ow in 1usize..9,
    ) {
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = resample_values(&mixed, 6, 6, oh, ow);
        let rx = resample_values(&x, 6, 6, oh, ow);
        let ry = resample_values(&y, 6, 6, oh, ow);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * rx[i] + b * ry[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn indicators_are_binary_and_partition(labels in labels_strategy(4, 5, 4), k in 0u8..4) {
        let m = mask(4, 5, &labels, 4);
        prop_assert!(region_indicator(&m, k).values().iter().all(|&v| v == 0.0 || v == 1.0));
        let mut sum = [0.0; 20];
        for c in 0..4 {
            for (s, v) in sum.iter_mut().zip(region_indicator(&m, c).values()) {
                *s += v;
            }
        }
        prop_assert!(sum.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn resampled_masks_stay_in_unit_interval(v in proptest::collection::vec(0.0f64..1.0, 25), oh in 1usize..12) {
        let m = SoftRegionMask::new(5, 5, v).unwrap();
        prop_assert!(resample_mask(&m, oh, oh + 1).values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
