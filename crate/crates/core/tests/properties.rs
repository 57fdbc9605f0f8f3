use proptest::prelude::*;

use evseg::autodiff::Tape;
use evseg::checkpoint;
use evseg::config::{net_echo, parse_net_echo};
use evseg::evidential::{generate, to_field, EvidenceGenerator};
use evseg::io::{decode_f32, encode_f32, labels_to_pgm, pgm_to_labels, Pgm};
use evseg::losses::{loss_total, GroundTruth, LossConfig};
use evseg::metrics::{assd, dice, iou, ueo_max, BinaryMask, LabelMap};
use evseg::network::{NetConfig, Network};
use evseg::synth::{add_noise, gen_blob_sample, noise_field, NoiseSpec};
use evseg::Tensor;

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..=12, 1usize..=12).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| (BinaryMask::new(h, w, a), BinaryMask::new(h, w, b)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn overlap_metrics_are_symmetric_and_bounded((a, b) in mask_pair()) {
        let d = dice(&a, &b).unwrap();
        let j = iou(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(j, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!(j <= d);
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn assd_is_a_symmetric_nonnegative_distance((a, b) in mask_pair()) {
        let d = assd(&a, &b).unwrap();
        prop_assert!((d - assd(&b, &a).unwrap()).abs() < 1e-12 || d.is_infinite());
        prop_assert!(d >= 0.0);
        if a.count() > 0 {
            prop_assert_eq!(assd(&a, &a).unwrap(), 0.0);
            prop_assert!((assd(&a.transposed(), &b.transposed()).unwrap() - d).abs() < 1e-12 || d.is_infinite());
        }
    }

    #[test]
    fn ueo_max_of_error_map_is_one(err in prop::collection::vec(any::<bool>(), 36)) {
        // an uncertainty map equal to the error indicator overlaps it perfectly
        let mask = BinaryMask::new(6, 6, err.clone());
        let u = Tensor::new(&[1, 6, 6], err.iter().map(|&e| if e { 0.9 } else { 0.01 }).collect()).unwrap();
        prop_assert_eq!(ueo_max(&mask, &u).unwrap(), 1.0);
    }

    #[test]
    fn dirichlet_field_is_consistent(
        logits in prop::collection::vec(-40.0f64..40.0, 2..7),
        exp in any::<bool>(),
    ) {
        let c = logits.len();
        let generator = if exp { EvidenceGenerator::Exp } else { EvidenceGenerator::Smooth };
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[c, 1, 1], logits).unwrap());
        let e = generate(&mut t, x, generator).unwrap();
        let f = to_field(&mut t, e).unwrap().values(&t);
        let s: f64 = f.alpha.data().iter().sum();
        prop_assert!((f.prob.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(f.evidence.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!((f.uncertainty.item() - c as f64 / s).abs() < 1e-15);
        prop_assert!(f.uncertainty.item() > 0.0 && f.uncertainty.item() <= 1.0);
    }

    #[test]
    fn total_loss_is_finite_and_nonnegative(
        logits in prop::collection::vec(-30.0f64..30.0, 8),
        labels in prop::collection::vec(0usize..2, 4),
        epoch in 0usize..20,
    ) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[2, 2, 2], logits).unwrap());
        let e = generate(&mut t, x, EvidenceGenerator::Smooth).unwrap();
        let f = to_field(&mut t, e).unwrap();
        let gt = GroundTruth::from_labels(&LabelMap::new(2, 2, labels), 2);
        let parts = loss_total(&mut t, &f, &gt, epoch, &LossConfig::default()).unwrap();
        let total = t.value(parts.total).item();
        prop_assert!(total.is_finite() && total >= 0.0);
        let g = t.backward(parts.total).unwrap();
        prop_assert!(g.get(x).unwrap().all_finite());
    }

    #[test]
    fn f32_files_round_trip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let t = Tensor::from_fn(&[c, h, w], |i| ((i as u64 ^ seed) % 1000) as f32 as f64 / 7.0);
        let back = decode_f32(&encode_f32(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn pgm_round_trip(labels in prop::collection::vec(0usize..3, 20), deep in any::<bool>()) {
        let map = LabelMap::new(4, 5, labels);
        let pgm = labels_to_pgm(&map);
        prop_assert_eq!(pgm_to_labels(&Pgm::decode(&pgm.encode()).unwrap(), 3).unwrap(), map);
        let wide = Pgm { width: 5, height: 4, maxval: if deep { 65535 } else { 255 }, pixels: pgm.pixels.clone() };
        prop_assert_eq!(Pgm::decode(&wide.encode()).unwrap(), wide);
    }

    #[test]
    fn noise_is_replayable_and_clamped(sigma in 0.1f64..=0.4, seed in any::<u64>()) {
        let sample = gen_blob_sample(3, 16, 16, 1.0).unwrap();
        let spec = NoiseSpec::new(sigma, seed).unwrap();
        let a = add_noise(&sample, &spec);
        prop_assert_eq!(&a.image, &add_noise(&sample, &spec).image);
        prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.labels(), sample.labels());
        let n = noise_field(&spec, sample.image.shape());
        for ((x, y), z) in a.image.data().iter().zip(sample.image.data()).zip(n.data()) {
            prop_assert_eq!(*x, (y + z).clamp(0.0, 1.0));
        }
    }
}

#[test]
fn noise_field_has_requested_spread() {
    let spec = NoiseSpec::new(0.3, 11).unwrap();
    let n = noise_field(&spec, &[3, 64, 64]);
    let mean = n.mean();
    let var = n.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.len() as f64;
    assert!(mean.abs() < 0.01, "{mean}");
    assert!((var.sqrt() - 0.3).abs() < 0.01, "{}", var.sqrt());
    assert!(NoiseSpec::new(0.05, 1).is_err() && NoiseSpec::new(0.5, 1).is_err());
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let cfg = NetConfig {
        stage_channels: vec![4, 6, 8],
        seed: 3,
        ..NetConfig::default()
    };
    let net = Network::new(cfg.clone()).unwrap();
    let back = checkpoint::decode(&checkpoint::encode(&net)).unwrap();
    assert_eq!(parse_net_echo(&net_echo(back.config())).unwrap(), cfg);
    let image = Tensor::from_fn(&[3, 16, 16], |i| (i % 13) as f64 / 13.0);
    let prog = Default::default();
    let a = evseg::progressive::progressive_segment(&net, &image, &prog).unwrap();
    let b = evseg::progressive::progressive_segment(&back, &image, &prog).unwrap();
    assert_eq!(a.umap, b.umap);
    assert_eq!(a.mask, b.mask);

    let other = NetConfig {
        use_euga: false,
        ..cfg
    };
    let dir = tempdir();
    let path = dir.join("m.ckpt");
    checkpoint::save(&path, &net).unwrap();
    assert!(matches!(
        checkpoint::load(&path, Some(&other)),
        Err(evseg::Error::Mismatch(_))
    ));
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempdir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("evseg-props-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
