//! Property tests over the public API.

use proptest::prelude::*;
use reggan_core::deformation::{compose, err_def, invert, simulate, DeformationSpec};
use reggan_core::harness::{aggregate, Method, MetricsReport};
use reggan_core::imaging::{load_field, load_image, save_field, save_image, warp};
use reggan_core::metrics::{dice, hd95, mad, mse, nmi, ssim_default, Mask};
use reggan_core::networks::{build_generator, GeneratorArch, NetworkParams};
use reggan_core::training::{AdamOptions, AdamState};
use reggan_core::{BorderPolicy, DeformationField, Image};

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, w * h).prop_map(move |d| Image::new(w, h, d).unwrap())
}

fn mask(w: usize, h: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), w * h)
        .prop_filter("non-empty", |d| d.iter().any(|&b| b))
        .prop_map(move |d| Mask::new(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_field_warp_is_identity(img in image(7, 5)) {
        let out = warp(&img, &DeformationField::zeros(7, 5), BorderPolicy::Clamp).unwrap();
        prop_assert_eq!(out.data(), img.data());
    }

    #[test]
    fn integer_shift_moves_pixels(img in image(9, 6), sx in -3i32..=3, sy in -2i32..=2) {
        let f = DeformationField::constant(9, 6, sx as f64, sy as f64).unwrap();
        let out = warp(&img, &f, BorderPolicy::Clamp).unwrap();
        for y in 0..6usize {
            for x in 0..9usize {
                let xs = (x as i32 + sx).clamp(0, 8) as usize;
                let ys = (y as i32 + sy).clamp(0, 5) as usize;
                prop_assert_eq!(out.get(x, y), img.get(xs, ys));
            }
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in mask(8, 8), b in mask(8, 8)) {
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn surface_metrics_are_symmetric(a in mask(8, 8), b in mask(8, 8)) {
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
        prop_assert!((mad(&a, &b).unwrap() - mad(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn nmi_is_symmetric_and_bounded(a in image(6, 6), b in image(6, 6)) {
        let v = nmi(&a, &b, 8).unwrap();
        prop_assert!((v - nmi(&b, &a, 8).unwrap()).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn self_similarity_is_perfect(a in image(9, 9)) {
        prop_assert_eq!(ssim_default(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn elastic_fields_respect_their_bound(seed in any::<u64>(), max in 0.5f64..12.0) {
        let f = simulate(&DeformationSpec::elastic((4, 4), max, seed), 24, 20).unwrap();
        prop_assert!(f.max_component() <= max + 1e-12);
    }

    #[test]
    fn smooth_fields_compose_with_their_inverse(seed in any::<u64>()) {
        let f = simulate(&DeformationSpec::elastic((4, 4), 3.0, seed), 32, 32).unwrap();
        let id = compose(&f, &invert(&f, 30)).unwrap();
        prop_assert!(err_def(&DeformationField::zeros(32, 32), &id).unwrap() < 0.05);
    }

    #[test]
    fn aggregate_ignores_order(dices in prop::collection::vec(0.0f64..1.0, 1..12), rot in 0usize..12) {
        let reports: Vec<MetricsReport> = dices
            .iter()
            .enumerate()
            .map(|(i, &d)| MetricsReport {
                case_id: format!("c{i}"),
                method: if i % 2 == 0 { Method::Before } else { Method::GanReg },
                dice: d,
                err_def: Some(d * 3.0),
                hd95: d + 1.0,
                mad: d / 2.0,
                mse: None,
                time_s: 0.0,
            })
            .collect();
        let mut shuffled = reports.clone();
        shuffled.rotate_left(rot % reports.len());
        shuffled.reverse();
        prop_assert_eq!(aggregate(&reports).unwrap(), aggregate(&shuffled).unwrap());
    }

    #[test]
    fn adam_with_zero_gradient_is_identity(p in prop::collection::vec(-5.0f64..5.0, 1..20), steps in 1usize..5) {
        let mut state = AdamState::for_sizes([p.len()]);
        let mut q = p.clone();
        let opt = AdamOptions { lr: 0.1, beta1: 0.93, beta2: 0.999, eps: 1e-8 };
        for _ in 0..steps {
            state.update(&mut [&mut q[..]], &[vec![0.0; p.len()]], opt).unwrap();
        }
        prop_assert_eq!(q, p);
    }
}

#[test]
fn containers_round_trip_at_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(5, 4, |x, y| ((x * 7 + y * 3) % 10) as f64 / 9.0).unwrap();
    save_image(&img, dir.path().join("a.rimg")).unwrap();
    let back = load_image(dir.path().join("a.rimg")).unwrap();
    for (a, b) in img.data().iter().zip(back.data()) {
        assert_eq!(*b, *a as f32 as f64);
    }
    let f = DeformationField::from_fn(5, 4, |x, y| (x as f64 * 0.25, -(y as f64) * 0.5)).unwrap();
    save_field(&f, dir.path().join("f.rfld")).unwrap();
    assert_eq!(load_field(dir.path().join("f.rfld")).unwrap(), f);
}

#[test]
fn checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = build_generator(
        GeneratorArch {
            channels: 8,
            blocks: 1,
            down: 1,
            width: 16,
            height: 16,
            max_disp: 5.0,
        },
        3,
    )
    .unwrap();
    let path = dir.path().join("g.rgpt");
    g.save(&path).unwrap();
    let back = NetworkParams::load(&path).unwrap();
    assert_eq!(back.to_bytes(), g.to_bytes());
    assert_eq!(back.fingerprint(), g.fingerprint());
}
