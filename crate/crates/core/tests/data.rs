use std::collections::BTreeSet;

use cdal::data::*;
use image::{GrayImage, Luma};
use proptest::prelude::*;

fn layout() -> FolderLayout {
    FolderLayout {
        resolution: 8,
        image_channels: 1,
        mask: MaskMode::Binary,
    }
}

fn write_pair(root: &std::path::Path, stem: &str) -> GrayImage {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    let image = GrayImage::from_fn(8, 8, |x, y| Luma([(x * 30 + y) as u8]));
    let mask = GrayImage::from_fn(8, 8, |x, y| Luma([if (x + y) % 3 == 0 { 255 } else { 0 }]));
    image.save(root.join("images").join(format!("{stem}.png"))).unwrap();
    mask.save(root.join("masks").join(format!("{stem}.png"))).unwrap();
    mask
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticSpec::default();
    let a = generate_synthetic(&spec, 6).unwrap();
    let b = generate_synthetic(&spec, 6).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }, 6).unwrap();
    assert_ne!(a[0].label, c[0].label);
}

#[test]
fn synthetic_samples_have_model_shapes() {
    for classes in [1, 2] {
        let spec = SyntheticSpec { classes, ..Default::default() };
        for s in generate_synthetic(&spec, 4).unwrap() {
            assert_eq!(s.image.dim(), (1, 64, 64));
            assert_eq!(s.label.dim().0, spec.label_channels());
            assert!(s.image.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(s.label.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}

#[test]
fn foreground_fraction_over_a_hundred_samples() {
    let samples = generate_synthetic(&SyntheticSpec::default(), 100).unwrap();
    let mean = samples.iter().map(|s| foreground_fraction(&s.label)).sum::<f64>() / 100.0;
    assert!((0.05..=0.60).contains(&mean), "mean foreground {mean}");
}

#[test]
fn folder_pair_loads_with_binarized_mask() {
    let dir = tempfile::tempdir().unwrap();
    let mask = write_pair(dir.path(), "case-01");
    let report = load_folder(dir.path(), &layout()).unwrap();
    assert!(report.rejected.is_empty());
    assert_eq!(report.samples.len(), 1);
    let sample = &report.samples[0];
    assert_eq!(sample.id, "case-01");
    for (x, y, p) in mask.enumerate_pixels() {
        let expected = if p[0] == 255 { 1.0 } else { 0.0 };
        assert_eq!(sample.label[[0, y as usize, x as usize]], expected);
    }
}

#[test]
fn empty_folder_gives_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    let report = load_folder(dir.path(), &layout()).unwrap();
    assert!(report.samples.is_empty());
}

#[test]
fn missing_root_is_a_config_error() {
    let err = load_folder(std::path::Path::new("/nonexistent/cdal"), &layout()).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("data.root"));
}

#[test]
fn unmatched_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a");
    GrayImage::new(8, 8).save(dir.path().join("images").join("orphan.png")).unwrap();
    let report = load_folder(dir.path(), &layout()).unwrap();
    assert_eq!(report.samples.len(), 1);
    assert_eq!(report.rejected.len(), 1);
    assert!(report.rejected[0].path.ends_with("orphan.png"));
}

#[test]
fn export_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { resolution: 16, min_radius: 2.0, max_radius: 5.0, ..Default::default() };
    let samples = generate_synthetic(&spec, 3).unwrap();
    export_folder(&samples, dir.path()).unwrap();
    let layout = FolderLayout { resolution: 16, ..layout() };
    let loaded = load_folder(dir.path(), &layout).unwrap().samples;
    assert_eq!(loaded.len(), 3);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert!(a.image.iter().zip(&b.image).all(|(x, y)| (x - y).abs() <= 2.0 / 255.0 + 1e-6));
    }
}

#[test]
fn indexed_masks_keep_class_indices() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { resolution: 16, classes: 2, min_radius: 2.0, max_radius: 5.0, ..Default::default() };
    let samples = generate_synthetic(&spec, 2).unwrap();
    export_folder(&samples, dir.path()).unwrap();
    let layout = FolderLayout { resolution: 16, image_channels: 1, mask: MaskMode::for_classes(2) };
    let loaded = load_folder(dir.path(), &layout).unwrap().samples;
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.class_map(), b.class_map());
    }
}

#[test]
fn three_folds_of_ten() {
    let sizes: Vec<usize> = (0..3).map(|f| kfold_indices(10, 3, f, 0).unwrap().1.len()).collect();
    assert_eq!(sizes, vec![4, 3, 3]);
    let (train, val) = kfold_indices(4, 2, 0, 0).unwrap();
    assert_eq!((train.len(), val.len()), (2, 2));
    assert!(train.iter().all(|i| !val.contains(i)));
}

#[test]
fn bad_fold_arguments_are_config_errors() {
    assert!(kfold_indices(10, 1, 0, 0).unwrap_err().is_config());
    assert!(kfold_indices(10, 3, 3, 0).unwrap_err().is_config());
    assert!(kfold_indices(2, 3, 0, 0).unwrap_err().is_config());
}

proptest! {
    #[test]
    fn folds_partition_the_set(n in 2usize..60, k in 2usize..6, seed in 0u64..100) {
        prop_assume!(n >= k);
        let mut seen = BTreeSet::new();
        for fold in 0..k {
            let (train, val) = kfold_indices(n, k, fold, seed).unwrap();
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert!(val.len() == n / k || val.len() == n / k + 1);
            for i in val {
                prop_assert!(seen.insert(i), "index {} in two folds", i);
            }
            prop_assert_eq!(kfold_indices(n, k, fold, seed).unwrap(), kfold_indices(n, k, fold, seed).unwrap());
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn intensity_round_trip(v in 0u8..=255) {
        prop_assert_eq!(denormalize_intensity(normalize_intensity(v)), v);
    }

    #[test]
    fn label_conversions_invert_on_hard_values(bit in 0u8..2) {
        let p = f64::from(bit);
        prop_assert_eq!(label_from_model(label_to_model(p)), p);
    }
}
