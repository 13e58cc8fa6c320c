use proptest::prelude::*;
use vitfiqa::data::*;
use vitfiqa::Error;

fn decile_energy(spec: &SynthSpec) -> Vec<f64> {
    let mut sums = [0.0; 10];
    let mut counts = [0usize; 10];
    for k in 0..spec.identities {
        let proto = spec.prototype(k);
        for i in 0..spec.per_identity {
            let (img, delta) = spec.sample(k, i, &proto);
            let bin = ((delta * 10.0) as usize).min(9);
            sums[bin] += laplacian_energy(&img);
            counts[bin] += 1;
        }
    }
    assert!(counts.iter().all(|&c| c > 0), "empty decile: {counts:?}");
    sums.iter().zip(counts).map(|(s, c)| s / c as f64).collect()
}

#[test]
fn laplacian_energy_falls_across_severity_deciles() {
    for (seed, per_identity) in [(0, 40), (7, 40), (123, 100)] {
        let spec = SynthSpec {
            identities: 10,
            per_identity,
            seed,
            ..SynthSpec::default()
        };
        let e = decile_energy(&spec);
        for w in e.windows(2) {
            assert!(w[1] < w[0], "seed {seed}: not decreasing {e:?}");
        }
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn prototypes_of_different_identities_are_weakly_correlated() {
    let mut total = 0.0;
    for pair in 0..100u64 {
        let a = SynthSpec {
            seed: 2 * pair,
            ..SynthSpec::default()
        };
        let b = SynthSpec {
            seed: 2 * pair + 1,
            ..SynthSpec::default()
        };
        total += correlation(&a.prototype(0), &b.prototype(1)).abs();
    }
    assert!(total / 100.0 < 0.5, "mean |corr| = {}", total / 100.0);
}

#[test]
fn generate_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        identities: 3,
        per_identity: 4,
        seed: 11,
        ..SynthSpec::default()
    };
    let m = synth_generate(&spec, dir.path()).unwrap();
    assert_eq!(m.len(), 12);
    let back = Manifest::read(&dir.path().join("manifest.csv"), Split::Train).unwrap();
    assert_eq!(back.entries(), m.entries());
    let ppms = std::fs::read_dir(dir.path().join("images"))
        .unwrap()
        .count();
    assert_eq!(ppms, 12);
    let rec = load_record(&back, 5).unwrap();
    assert_eq!(
        (
            rec.pixels.height(),
            rec.pixels.width(),
            rec.pixels.channels()
        ),
        (16, 16, 3)
    );
    assert_eq!(rec.identity, 1);

    let again = tempfile::tempdir().unwrap();
    synth_generate(&spec, again.path()).unwrap();
    for e in m.entries() {
        let a = std::fs::read(dir.path().join(&e.path)).unwrap();
        let b = std::fs::read(again.path().join(&e.path)).unwrap();
        assert_eq!(a, b, "{}", e.path);
    }
}

#[test]
fn unwritable_output_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = synth_generate(&SynthSpec::default(), &blocker).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

fn small_dataset() -> (tempfile::TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        identities: 2,
        per_identity: 3,
        seed: 4,
        ..SynthSpec::default()
    };
    let m = synth_generate(&spec, dir.path()).unwrap();
    (dir, m)
}

#[test]
fn eval_split_bypasses_augmentation() {
    let (_dir, m) = small_dataset();
    let (_, eval) = m.holdout(0.5).unwrap();
    let always = AugmentSpec {
        grayscale_p: 1.0,
        cutout_p: 1.0,
        ..AugmentSpec::default()
    };
    let batch = Sampler::Sequential
        .batches(eval.len(), eval.len())
        .next()
        .unwrap();
    let loaded = load_batch::<f32>(&eval, &batch, &always, 1, 3).unwrap();
    for (i, s) in loaded.iter().enumerate() {
        let rec = load_record(&eval, i).unwrap();
        assert_eq!(s.image, normalize::<f32>(&rec.pixels));
        assert_eq!(s.label, rec.identity);
    }

    let train =
        Manifest::new(eval.entries().to_vec(), Split::Train, eval.base_dir.clone()).unwrap();
    let aug = load_batch::<f32>(&train, &batch, &always, 1, 3).unwrap();
    assert_ne!(aug[0].image, loaded[0].image);
}

#[test]
fn sequential_batch_keeps_manifest_order() {
    let (_dir, m) = small_dataset();
    let batch = Sampler::Sequential.batches(m.len(), 4).next().unwrap();
    let loaded = load_batch::<f64>(&m, &batch, &AugmentSpec::default(), 9, 3).unwrap();
    assert_eq!(loaded.len(), 4);
    let labels: Vec<_> = loaded.iter().map(|s| s.label).collect();
    assert_eq!(labels, vec![0, 0, 0, 1]);
    let again = load_batch::<f64>(&m, &batch, &AugmentSpec::default(), 9, 3).unwrap();
    assert!(loaded.iter().zip(&again).all(|(a, b)| a.image == b.image));
}

#[test]
fn missing_file_names_the_path() {
    let (dir, m) = small_dataset();
    std::fs::remove_file(dir.path().join(&m.entries()[2].path)).unwrap();
    let batch = Sampler::Sequential.batches(m.len(), 3).next().unwrap();
    let err = load_batch::<f32>(&m, &batch, &AugmentSpec::none(), 0, 3).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains(&m.entries()[2].path), "{err}");
}

#[test]
fn gray_files_load_as_rgb() {
    let dir = tempfile::tempdir().unwrap();
    let gray = Image::new(2, 2, 1, vec![0, 64, 128, 255]).unwrap();
    write_ppm_file(&dir.path().join("g.pgm"), &gray).unwrap();
    let m = Manifest::new(
        vec![ManifestEntry {
            path: "g.pgm".into(),
            identity: 0,
            degradation: None,
        }],
        Split::Eval,
        dir.path().to_path_buf(),
    )
    .unwrap();
    let batch = Sampler::Sequential.batches(1, 1).next().unwrap();
    let s = &load_batch::<f64>(&m, &batch, &AugmentSpec::none(), 0, 3).unwrap()[0];
    assert_eq!(s.image.shape(), &[2, 2, 3]);
    assert_eq!(&s.image.data()[..3], &[-1.0, -1.0, -1.0]);
}

fn arb_image() -> impl Strategy<Value = Image> {
    (
        1usize..12,
        1usize..12,
        prop_oneof![Just(1usize), Just(3usize)],
    )
        .prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(any::<u8>(), h * w * c)
                .prop_map(move |data| Image::new(h, w, c, data).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_is_deterministic(img in arb_image(), seed in any::<u64>()) {
        let spec = AugmentSpec {
            affine_p: 0.5,
            crop_p: 0.5,
            cutout_p: 0.5,
            brightness_p: 0.5,
            saturation_p: 0.5,
            contrast_p: 0.5,
            grayscale_p: 0.5,
            blur_p: 0.5,
            lowres_p: 0.5,
            ..AugmentSpec::default()
        };
        let a = augment(&img, &spec, seed);
        prop_assert_eq!(&a, &augment(&img, &spec, seed));
        prop_assert_eq!((a.height(), a.width(), a.channels()), (img.height(), img.width(), img.channels()));
    }

    #[test]
    fn normalize_round_trips_within_half_level(img in arb_image()) {
        let back = denormalize(&normalize::<f32>(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((*a as f64 - *b as f64).abs() <= 0.5);
        }
        let t = normalize::<f64>(&img);
        prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn ppm_round_trip(img in arb_image()) {
        let bytes = write_ppm(&img);
        let parsed = parse_ppm(&bytes).unwrap();
        prop_assert_eq!(&parsed, &img);
        prop_assert_eq!(write_ppm(&parsed), bytes);
    }

    #[test]
    fn truncated_ppm_is_rejected(img in arb_image(), cut in 1usize..4) {
        let bytes = write_ppm(&img);
        let short = &bytes[..bytes.len() - cut.min(img.data().len())];
        let rejected = matches!(parse_ppm(short), Err(Error::Parse { .. }));
        prop_assert!(rejected);
    }
}
