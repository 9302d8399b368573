use proptest::prelude::*;

use mi_cascade::gradcheck::loss_gradcheck;
use mi_cascade::loss::one_hot;
use mi_cascade::metrics::{dice, hausdorff_mm};
use mi_cascade::pipeline::{
    classify, compose_final, compute_roi, crop, paste_back, predict_stage, CaseClass, ClassifierRule, LesionMask,
    StageConfig,
};
use mi_cascade::preprocess::{resample_label, resampled_shape};
use mi_cascade::unet::{init_params, Checkpoint, Tensor4};
use mi_cascade::volume::{
    decode_miv, encode_miv, label_mask, voxel_volume, BBox, LabelMap, Mask, ProbMap, Spacing, Volume,
};

fn spacing() -> impl Strategy<Value = Spacing> {
    (0.1f64..20.0, 0.1f64..5.0, 0.1f64..5.0).prop_map(|(a, b, c)| Spacing::new(a, b, c).unwrap())
}

fn labels(max_side: usize) -> impl Strategy<Value = LabelMap> {
    (1..=3usize, 1..=max_side, 1..=max_side, spacing()).prop_flat_map(|(z, y, x, s)| {
        proptest::collection::vec(0u8..5, z * y * x).prop_map(move |d| LabelMap::new([z, y, x], d, s).unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1..=2usize, 1..=6usize, 1..=6usize, spacing()).prop_flat_map(|(z, y, x, s)| {
        let n = z * y * x;
        (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n))
            .prop_map(move |(a, b)| (Mask::new([z, y, x], a, s).unwrap(), Mask::new([z, y, x], b, s).unwrap()))
    })
}

fn probmap(classes: usize, shape: [usize; 3], raw: &[f32]) -> ProbMap {
    let n: usize = shape.iter().product();
    let mut data = vec![0.0f32; classes * n];
    for v in 0..n {
        let w: Vec<f32> = (0..classes).map(|c| raw[(c * n + v) % raw.len()] + 0.01).collect();
        let s: f32 = w.iter().sum();
        for c in 0..classes {
            data[c * n + v] = w[c] / s;
        }
    }
    ProbMap::new(classes, shape, data, Spacing::TARGET).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn miv_round_trip_labels(l in labels(8)) {
        let back = decode_miv(&encode_miv(&l)).unwrap().into_labels().unwrap();
        prop_assert_eq!(back, l);
    }

    #[test]
    fn miv_round_trip_volume(shape in (1..3usize, 1..8usize, 1..8usize), s in spacing(), seed in any::<u32>()) {
        let [z, y, x] = [shape.0, shape.1, shape.2];
        let v = Volume::from_fn([z, y, x], s, |a, b, c| ((a * 131 + b * 17 + c) as u32 ^ seed) as f32 * 1e-3 - 7.0).unwrap();
        let back = decode_miv(&encode_miv(&v)).unwrap().into_volume().unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn label_mask_of_union_is_union_of_masks(l in labels(6), a in proptest::collection::vec(0u8..5, 0..5), b in proptest::collection::vec(0u8..5, 0..5)) {
        let mut ab = a.clone();
        ab.extend(&b);
        let (ma, mb, mab) = (label_mask(&l, &a), label_mask(&l, &b), label_mask(&l, &ab));
        for i in 0..l.len() {
            prop_assert_eq!(mab.data()[i], ma.data()[i] || mb.data()[i]);
        }
    }

    #[test]
    fn voxel_volume_scales_with_each_axis(s in spacing(), k in 0.1f64..10.0) {
        let base = voxel_volume(s);
        let scaled = voxel_volume(Spacing::new(s.dz * k, s.dy, s.dx).unwrap());
        prop_assert!((scaled - base * k).abs() <= 1e-12 * scaled.abs().max(1.0));
        prop_assert!((voxel_volume(s.scaled(k).unwrap()) - base * k * k * k).abs() <= 1e-9 * base * k * k * k);
    }

    #[test]
    fn label_resampling_keeps_shape_formula_and_label_set(l in labels(10), to in spacing()) {
        let out = resample_label(&l, to).unwrap();
        prop_assert_eq!(out.shape(), resampled_shape(l.shape(), l.spacing(), to));
        prop_assert_eq!(out.spacing(), to);
        for v in out.data() {
            prop_assert!(l.data().contains(v));
        }
    }

    #[test]
    fn dice_and_hausdorff_are_symmetric((a, b) in mask_pair()) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let s = a.spacing();
        prop_assert_eq!(hausdorff_mm(&a, &b, s).unwrap(), hausdorff_mm(&b, &a, s).unwrap());
        let d = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn hausdorff_is_invariant_under_axis_flips((a, b) in mask_pair()) {
        let flip = |m: &Mask| {
            let [nz, ny, nx] = m.shape();
            Mask::from_fn(m.shape(), m.spacing(), |z, y, x| m.get(nz - 1 - z, ny - 1 - y, nx - 1 - x)).unwrap()
        };
        let s = a.spacing();
        let h = hausdorff_mm(&a, &b, s).unwrap();
        let hf = hausdorff_mm(&flip(&a), &flip(&b), s).unwrap();
        match (h, hf) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
            (x, y) => prop_assert_eq!(x, y),
        }
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&flip(&a), &flip(&b)).unwrap());
    }

    #[test]
    fn classify_is_monotone_in_lesion_voxels(l in labels(6), extra in proptest::collection::vec(any::<prop::sample::Index>(), 0..20)) {
        let rule = ClassifierRule { min_voxels: 5, ..ClassifierRule::default() };
        let before = classify(&l, &rule);
        let mut data = l.data().to_vec();
        for i in extra {
            let k = i.index(data.len());
            data[k] = 3;
        }
        let after = classify(&LabelMap::new(l.shape(), data, l.spacing()).unwrap(), &rule);
        prop_assert!(!(before == CaseClass::Pathological && after == CaseClass::Normal));
    }

    #[test]
    fn compose_never_places_lesions_outside_roi_or_lv(
        shape in (1..3usize, 2..9usize, 2..9usize),
        raw1 in proptest::collection::vec(0.0f32..1.0, 7..40),
        raw2 in proptest::collection::vec(0.0f32..1.0, 7..40),
        stage1_mask in proptest::collection::vec(any::<bool>(), 1..50),
        margin in 0usize..3,
        myo_only in any::<bool>(),
    ) {
        let shape = [shape.0, shape.1, shape.2];
        let n: usize = shape.iter().product();
        let s1 = probmap(3, shape, &raw1);
        let pred = LabelMap::new(shape, (0..n).map(|i| stage1_mask[i % stage1_mask.len()] as u8).collect(), Spacing::TARGET).unwrap();
        let roi = compute_roi(&pred, margin);
        let s2 = probmap(3, roi.bbox.extents(), &raw2);
        let mask = if myo_only { LesionMask::Myocardium } else { LesionMask::LvForeground };
        let out = compose_final(&s1, &s2, &roi, mask).unwrap();
        let base = s1.argmax();
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let v = out.get(z, y, x);
                    if matches!(v, 3 | 4) {
                        prop_assert!(roi.bbox.contains(z, y, x));
                        prop_assert!(base.get(z, y, x) != 0);
                    } else {
                        prop_assert_eq!(v, base.get(z, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn crop_paste_round_trip(l in labels(8), lo in (0usize..8, 0usize..8), ext in (1usize..8, 1usize..8)) {
        let [nz, ny, nx] = l.shape();
        let (y0, x0) = (lo.0 % ny, lo.1 % nx);
        let bbox = BBox::new([0, y0, x0], [nz - 1, (y0 + ext.0 - 1).min(ny - 1), (x0 + ext.1 - 1).min(nx - 1)], l.shape()).unwrap();
        let roi = mi_cascade::pipeline::RoiSpec { bbox, margin: 0, source_shape: l.shape() };
        let c = crop(&l, &roi).unwrap();
        prop_assert_eq!(c.shape(), bbox.extents());
        prop_assert_eq!(paste_back(&l, &c, &roi).unwrap(), l);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn loss_gradients_match_finite_differences(
        logits in proptest::collection::vec(-3.0f64..3.0, 12),
        target in proptest::collection::vec(0u8..3, 4),
    ) {
        let logits = Tensor4::new([1, 3, 2, 2], logits).unwrap();
        let target = one_hot::<f64>(&target, 1, 3, 2, 2).unwrap();
        let r = loss_gradcheck(&logits, &target, 1e-5, 1e-5).unwrap();
        prop_assert!(r.dice.max_rel_error < 1e-5, "{:?}", r.dice);
        prop_assert!(r.cross_entropy.max_rel_error < 1e-5, "{:?}", r.cross_entropy);
        prop_assert!(r.total.max_rel_error < 1e-5, "{:?}", r.total);
    }
}

#[test]
fn ensemble_is_invariant_to_member_order() {
    let mut stage = StageConfig::stage2();
    stage.unet.base_channels = 2;
    let members: Vec<Checkpoint> = (0..3)
        .map(|f| Checkpoint {
            stage: 2,
            fold: Some(f),
            params: init_params(stage.unet, 100 + f as u64).unwrap(),
        })
        .collect();
    let image = Volume::from_fn([2, 20, 18], Spacing::TARGET, |z, y, x| ((z * 5 + y * 3 + x) % 11) as f32 / 5.0 - 1.0).unwrap();
    let a = predict_stage(&members, &image, &stage).unwrap();
    let reversed: Vec<Checkpoint> = members.iter().rev().cloned().collect();
    let b = predict_stage(&reversed, &image, &stage).unwrap();
    assert_eq!(a.data(), b.data());
}
