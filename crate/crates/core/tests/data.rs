mod common;

use std::collections::BTreeMap;

use common::{rng, uniform};
use switchaux::data::{
    apply_spatial, augment, color_normalize, generate_dataset, generate_synthetic_sample, lab_stats, load_dataset,
    match_lab, mosaic_target, read_manifest, read_pgm_mask, read_ppm, resize_image, resize_mask, sample_blob_radii,
    stratified_kfold, to_lab, write_dataset, write_pgm_mask, write_ppm, ColorStats, Domain, Organ, Sample, SpatialOp,
    MAX_FOREGROUND, MIN_FOREGROUND,
};
use switchaux::losses::dice_score;
use switchaux::tensor::Tensor;

#[test]
fn generation_is_deterministic() {
    for organ in Organ::ALL {
        for domain in Domain::ALL {
            let a = generate_synthetic_sample(17, organ, domain, 64).unwrap();
            let b = generate_synthetic_sample(17, organ, domain, 64).unwrap();
            assert_eq!(a, b);
        }
    }
    assert_eq!(generate_dataset(3, 4, 64).unwrap(), generate_dataset(3, 4, 64).unwrap());
    assert!(generate_synthetic_sample(1, Organ::Lung, Domain::Hpa, 48).is_err());
    assert!(generate_synthetic_sample(1, Organ::Lung, Domain::Hpa, 0).is_err());
}

#[test]
fn thousand_samples_respect_foreground_range() {
    for i in 0..1000u64 {
        let organ = Organ::ALL[(i % 5) as usize];
        let domain = Domain::ALL[(i / 5 % 2) as usize];
        let s = generate_synthetic_sample(i, organ, domain, 32).unwrap();
        let fg = s.foreground_fraction();
        assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg), "seed {i}: {fg}");
        assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn lung_blobs_are_smaller_than_kidney_blobs() {
    let mean_radius = |organ: Organ| {
        let radii: Vec<f64> = (0..200)
            .flat_map(|seed| sample_blob_radii(seed, organ, 64).unwrap())
            .collect();
        radii.iter().sum::<f64>() / radii.len() as f64
    };
    let (lung, kidney) = (mean_radius(Organ::Lung), mean_radius(Organ::Kidney));
    assert!(lung < kidney, "lung {lung} kidney {kidney}");
}

#[test]
fn dataset_layout() {
    let ds = generate_dataset(5, 3, 32).unwrap();
    assert_eq!(ds.len(), 15);
    for (i, s) in ds.iter().enumerate() {
        assert_eq!(s.id, i);
        assert_eq!(s.organ, Organ::ALL[i / 3]);
        assert_eq!(s.domain, Domain::ALL[i % 3 % 2]);
    }
}

fn organ_list(counts: &[(Organ, usize)]) -> Vec<Organ> {
    counts.iter().flat_map(|&(o, n)| std::iter::repeat_n(o, n)).collect()
}

fn per_fold_counts(items: &[Organ], folds: &[Vec<usize>]) -> BTreeMap<Organ, Vec<usize>> {
    let mut out: BTreeMap<Organ, Vec<usize>> = BTreeMap::new();
    for (f, fold) in folds.iter().enumerate() {
        for &i in fold {
            out.entry(items[i]).or_insert_with(|| vec![0; folds.len()])[f] += 1;
        }
    }
    out
}

#[test]
fn kfold_examples() {
    let even = organ_list(&Organ::ALL.map(|o| (o, 10)));
    let split = stratified_kfold(&even, 5, 1).unwrap();
    for counts in per_fold_counts(&even, &split.folds).values() {
        assert_eq!(counts, &vec![2; 5]);
    }

    let mut uneven = organ_list(&Organ::ALL.map(|o| (o, 10)));
    uneven.push(Organ::Spleen);
    let split = stratified_kfold(&uneven, 5, 2).unwrap();
    let mut spleen = per_fold_counts(&uneven, &split.folds)[&Organ::Spleen].clone();
    spleen.sort_unstable();
    assert_eq!(spleen, vec![2, 2, 2, 2, 3]);

    let short = organ_list(&[(Organ::Kidney, 5), (Organ::Lung, 4)]);
    assert!(stratified_kfold(&short, 5, 0).is_err());
    assert!(stratified_kfold(&even, 1, 0).is_err());
}

#[test]
fn kfold_partitions_and_balances_any_dataset() {
    let mut r = rng(11);
    for trial in 0..200u64 {
        let counts: Vec<(Organ, usize)> = Organ::ALL
            .iter()
            .map(|&o| (o, rand::Rng::random_range(&mut r, 5..40)))
            .collect();
        let items = organ_list(&counts);
        let split = stratified_kfold(&items, 5, trial).unwrap();
        assert_eq!(split, stratified_kfold(&items, 5, trial).unwrap());
        let mut all: Vec<usize> = split.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..items.len()).collect::<Vec<_>>());
        for c in per_fold_counts(&items, &split.folds).values() {
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, "{c:?}");
        }
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let train = split.train(0).unwrap();
        assert_eq!(train.len() + split.val(0).unwrap().len(), items.len());
    }
}

fn marker_sample(r: usize, c: usize) -> Sample {
    let mut image = Tensor::zeros(&[3, 32, 32]);
    let mut mask = Tensor::zeros(&[1, 32, 32]);
    for ch in 0..3 {
        image.values_mut()[ch * 1024 + r * 32 + c] = 1.0;
    }
    mask.values_mut()[r * 32 + c] = 1.0;
    Sample {
        id: 0,
        image,
        mask,
        organ: Organ::Kidney,
        domain: Domain::Hpa,
        seed: 0,
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[test]
fn flipped_marker_lands_on_the_same_pixel_in_image_and_mask() {
    let s = marker_sample(5, 9);
    let mut seen = 0;
    for seed in 0..2000 {
        let (out, rec) = augment(&s, seed).unwrap();
        if rec.spatial.iter().any(|op| matches!(op, SpatialOp::CropResize(..))) {
            continue;
        }
        let mask_pos = argmax(out.mask.values());
        assert_eq!(out.mask.sum(), 1.0);
        assert_eq!(argmax(&out.image.values()[..1024]), mask_pos, "seed {seed}: {rec:?}");
        if rec.spatial == [SpatialOp::FlipH] {
            assert_eq!(mask_pos, 5 * 32 + (31 - 9));
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn spatial_ops_commute_with_mask_supervision() {
    let s = generate_synthetic_sample(3, Organ::Prostate, Domain::Hubmap, 64).unwrap();
    for seed in 0..100 {
        let (out, rec) = augment(&s, seed).unwrap();
        let mut expected = s.mask.clone();
        for &op in &rec.spatial {
            expected = apply_spatial(&expected, op, true).unwrap();
        }
        assert_eq!(dice_score(&out.mask, &expected).unwrap(), 1.0);
        assert_eq!((out.organ, out.domain, out.id), (s.organ, s.domain, s.id));
    }
}

#[test]
fn augmentation_is_seeded_and_keeps_masks_binary() {
    let s = generate_synthetic_sample(9, Organ::Spleen, Domain::Hpa, 64).unwrap();
    assert_eq!(augment(&s, 77).unwrap(), augment(&s, 77).unwrap());
    for seed in 0..500 {
        let (out, rec) = augment(&s, seed).unwrap();
        assert!(out.mask.values().iter().all(|&v| v == 0.0 || v == 1.0), "seed {seed}");
        assert!(out.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
        if let Some(sigma) = rec.noise_sigma {
            assert!((0.0..=0.03).contains(&sigma));
        }
        if let Some((b, c)) = rec.brightness_contrast {
            assert!(b.abs() <= 0.15 && (c - 1.0).abs() <= 0.15);
        }
        if let Some(h) = rec.hue_shift {
            assert!(h.abs() <= 0.05);
        }
    }
}

#[test]
fn normalizing_to_own_statistics_is_a_fixed_point() {
    for seed in 0..10 {
        let s = generate_synthetic_sample(seed, Organ::ALL[seed as usize % 5], Domain::Hubmap, 32).unwrap();
        let own = lab_stats(&to_lab(&s.image).unwrap()).unwrap();
        let out = color_normalize(&s.image, &own).unwrap();
        assert!(out.max_abs_diff(&s.image) < 1e-9);
    }
}

#[test]
fn matched_means_hit_the_target_before_clamping() {
    let target = ColorStats {
        mean: [-0.3, 0.01, -0.02],
        std: [0.2, 0.03, 0.015],
    };
    let mut r = rng(12);
    for _ in 0..20 {
        let image = uniform(&mut r, &[3, 16, 16], 0.05, 0.95);
        let lab = to_lab(&image).unwrap();
        let matched = match_lab(&lab, &lab_stats(&lab).unwrap(), &target).unwrap();
        let got = lab_stats(&matched).unwrap();
        for c in 0..3 {
            assert!((got.mean[c] - target.mean[c]).abs() < 1e-6);
            assert!((got.std[c] - target.std[c]).abs() < 1e-6);
        }
    }
}

#[test]
fn degenerate_channel_only_shifts_mean() {
    let image = Tensor::full(&[3, 8, 8], 0.5);
    let lab = to_lab(&image).unwrap();
    let source = lab_stats(&lab).unwrap();
    let target = ColorStats {
        mean: [source.mean[0] + 0.1, source.mean[1], source.mean[2]],
        std: [0.5, 0.5, 0.5],
    };
    let out = match_lab(&lab, &source, &target).unwrap();
    let stats = lab_stats(&out).unwrap();
    assert!((stats.mean[0] - target.mean[0]).abs() < 1e-12);
    assert!(stats.std.iter().all(|&s| s < 1e-8));
    let bad = ColorStats {
        mean: [0.0; 3],
        std: [0.1, 0.0, 0.1],
    };
    assert!(color_normalize(&image, &bad).is_err());
}

fn channel_means(t: &Tensor) -> [f64; 3] {
    std::array::from_fn(|c| t.channel(c).unwrap().mean())
}

#[test]
fn normalization_shrinks_the_domain_gap() {
    let mut pairs = Vec::new();
    for seed in 0..50u64 {
        let organ = Organ::ALL[seed as usize % 5];
        let hpa = generate_synthetic_sample(seed, organ, Domain::Hpa, 32).unwrap();
        let hub = generate_synthetic_sample(seed, organ, Domain::Hubmap, 32).unwrap();
        assert_eq!(hpa.mask, hub.mask);
        pairs.push((hpa, hub));
    }
    let pooled: Vec<Sample> = pairs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    let target = mosaic_target(&pooled).unwrap();
    let dist = |a: &Tensor, b: &Tensor| {
        let (ma, mb) = (channel_means(a), channel_means(b));
        (0..3).map(|c| (ma[c] - mb[c]).powi(2)).sum::<f64>().sqrt()
    };
    let (mut before, mut after) = (0.0, 0.0);
    for (a, b) in &pairs {
        before += dist(&a.image, &b.image);
        after += dist(
            &color_normalize(&a.image, &target).unwrap(),
            &color_normalize(&b.image, &target).unwrap(),
        );
    }
    assert!(after < before, "before {before} after {after}");
    assert!(mosaic_target(&pooled[..1]).is_err());
}

#[test]
fn resize_examples() {
    let constant = Tensor::full(&[3, 64, 64], 0.37);
    let up = resize_image(&constant, 96).unwrap();
    assert!(up.values().iter().all(|&v| (v - 0.37).abs() < 1e-15));

    let big = uniform(&mut rng(13), &[3, 192, 192], 0.0, 1.0);
    assert_eq!(resize_image(&big, 64).unwrap().shape(), &[3, 64, 64]);

    let smooth = Tensor::from_fn(&[1, 64, 64], |i| {
        let (y, x) = ((i / 64) as f64, (i % 64) as f64);
        0.5 + 0.3 * (x * 0.15).sin() * (y * 0.1).cos()
    });
    let back = resize_image(&resize_image(&smooth, 128).unwrap(), 64).unwrap();
    assert!(back.max_abs_diff(&smooth) < 0.02);

    let mask = generate_synthetic_sample(4, Organ::Kidney, Domain::Hpa, 64).unwrap().mask;
    let small = resize_mask(&mask, 32).unwrap();
    assert!(small.values().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn netpbm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let q = Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
    write_ppm(&dir.path().join("a.ppm"), &q).unwrap();
    let back = read_ppm(&dir.path().join("a.ppm")).unwrap();
    assert_eq!(back.shape(), q.shape());
    assert!(back.max_abs_diff(&q) < 1e-12);

    let mask = Tensor::from_fn(&[1, 6, 4], |i| (i % 3 == 0) as u8 as f64);
    write_pgm_mask(&dir.path().join("m.pgm"), &mask).unwrap();
    assert_eq!(read_pgm_mask(&dir.path().join("m.pgm")).unwrap(), mask);

    std::fs::write(dir.path().join("c.pgm"), b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
    assert_eq!(read_pgm_mask(&dir.path().join("c.pgm")).unwrap().values(), &[0.0, 1.0]);
    std::fs::write(dir.path().join("bad.pgm"), b"P6\n2 1\n255\n\x00\xff").unwrap();
    assert!(read_pgm_mask(&dir.path().join("bad.pgm")).is_err());
    std::fs::write(dir.path().join("short.ppm"), b"P6\n2 2\n255\n\x00").unwrap();
    assert!(read_ppm(&dir.path().join("short.ppm")).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(8, 2, 32).unwrap();
    let rows = write_dataset(dir.path(), &samples).unwrap();
    assert_eq!(read_manifest(&dir.path().join("manifest.csv")).unwrap(), rows);
    let header = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(header.starts_with("id,organ,domain,seed,image_path,mask_path\n"));
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!((a.id, a.organ, a.domain, a.seed), (b.id, b.organ, b.domain, b.seed));
        assert_eq!(a.mask, b.mask);
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
    }
}
