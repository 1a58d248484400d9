mod common;

use std::fs;
use std::path::Path;

use common::{rng, synthetic_records};
use proptest::prelude::*;
use rand::Rng;
use scalenas::data::{
    decode_records, encode_records, hflip, load_cifar, make_splits, pad_crop, toy_dataset, CifarOptions, CifarVariant,
    ImageSet, ToySpec,
};
use scalenas::Error;

#[test]
fn cifar10_round_trip_is_byte_identical() {
    let bytes = synthetic_records(CifarVariant::Cifar10, 7, 1);
    let set = decode_records(&bytes, CifarVariant::Cifar10, "mem").unwrap();
    assert_eq!(set.len(), 7);
    assert_eq!(encode_records(&set, CifarVariant::Cifar10).unwrap(), bytes);
}

#[test]
fn cifar100_round_trip_keeps_both_labels() {
    let bytes = synthetic_records(CifarVariant::Cifar100, 5, 2);
    let set = decode_records(&bytes, CifarVariant::Cifar100, "mem").unwrap();
    assert_eq!(set.labels[3], usize::from(bytes[3 * 3074 + 1]));
    assert_eq!(set.coarse_labels.as_ref().unwrap()[3], usize::from(bytes[3 * 3074]));
    assert_eq!(encode_records(&set, CifarVariant::Cifar100).unwrap(), bytes);
}

#[test]
fn planes_are_red_green_blue_row_major() {
    let mut bytes = vec![0u8; 3073];
    bytes[0] = 4;
    bytes[1 + 5 * 32 + 7] = 11;
    bytes[1 + 1024 + 31] = 22;
    bytes[1 + 2048 + 32 * 32 - 1] = 33;
    let set = decode_records(&bytes, CifarVariant::Cifar10, "mem").unwrap();
    let img = set.image(0);
    assert_eq!(set.labels, vec![4]);
    assert_eq!(img[5 * 32 + 7], 11);
    assert_eq!(img[1024 + 31], 22);
    assert_eq!(img[3 * 1024 - 1], 33);
}

#[test]
fn bad_labels_and_partial_records_are_format_errors() {
    let mut bytes = synthetic_records(CifarVariant::Cifar10, 2, 3);
    bytes[3073] = 10;
    assert!(matches!(decode_records(&bytes, CifarVariant::Cifar10, "x"), Err(Error::Format { .. })));
    let bytes = synthetic_records(CifarVariant::Cifar100, 2, 3);
    assert!(matches!(decode_records(&bytes[..5000], CifarVariant::Cifar100, "x"), Err(Error::Format { .. })));
    let mut bytes = synthetic_records(CifarVariant::Cifar100, 1, 3);
    bytes[0] = 20;
    assert!(matches!(decode_records(&bytes, CifarVariant::Cifar100, "x"), Err(Error::Format { .. })));
}

fn write_cifar10(dir: &Path, per_file: usize) {
    for (i, name) in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"]
        .iter()
        .enumerate()
    {
        fs::write(dir.join(name), synthetic_records(CifarVariant::Cifar10, per_file, 10 + i as u64)).unwrap();
    }
}

fn fixture_opts(per_file: usize) -> CifarOptions {
    CifarOptions {
        records_per_file: Some(per_file),
        checksums: None,
    }
}

#[test]
fn loads_a_directory_of_batches() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10(dir.path(), 4);
    let ds = load_cifar(dir.path(), CifarVariant::Cifar10, &fixture_opts(4)).unwrap();
    assert_eq!((ds.train.len(), ds.test.len(), ds.num_classes), (20, 4, 10));
    assert_eq!(ds.provenance.len(), 6);
    let first = fs::read(dir.path().join("data_batch_1.bin")).unwrap();
    assert_eq!(encode_records(&ds.train.subset(&[0, 1, 2, 3]), CifarVariant::Cifar10).unwrap(), first);
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10(dir.path(), 3);
    let path = dir.path().join("data_batch_4.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes.pop();
    fs::write(&path, &bytes).unwrap();
    match load_cifar(dir.path(), CifarVariant::Cifar10, &fixture_opts(3)) {
        Err(Error::Format { path, msg }) => {
            assert!(path.ends_with("data_batch_4.bin"));
            assert!(msg.contains("expected 9219 bytes"), "{msg}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn standard_sizes_are_enforced_without_override() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10(dir.path(), 2);
    assert!(matches!(
        load_cifar(dir.path(), CifarVariant::Cifar10, &CifarOptions::default()),
        Err(Error::Format { .. })
    ));
}

#[test]
fn checksums_are_verified() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10(dir.path(), 2);
    let ds = load_cifar(dir.path(), CifarVariant::Cifar10, &fixture_opts(2)).unwrap();
    let good = ds.provenance.iter().map(|d| (d.file.clone(), d.sha256.clone())).collect();
    let opts = CifarOptions {
        records_per_file: Some(2),
        checksums: Some(good),
    };
    load_cifar(dir.path(), CifarVariant::Cifar10, &opts).unwrap();
    let mut bad = opts.clone();
    bad.checksums.as_mut().unwrap().insert("test_batch.bin".into(), "00".repeat(32));
    assert!(matches!(load_cifar(dir.path(), CifarVariant::Cifar10, &bad), Err(Error::Format { .. })));
}

#[test]
fn cifar100_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.bin"), synthetic_records(CifarVariant::Cifar100, 6, 1)).unwrap();
    fs::write(dir.path().join("test.bin"), synthetic_records(CifarVariant::Cifar100, 6, 2)).unwrap();
    let ds = load_cifar(dir.path(), CifarVariant::Cifar100, &fixture_opts(6)).unwrap();
    assert_eq!((ds.train.len(), ds.test.len(), ds.num_classes), (6, 6, 100));
}

#[test]
fn toy_dataset_is_balanced_and_reproducible() {
    let spec = ToySpec::default();
    let a = toy_dataset(&spec);
    let b = toy_dataset(&spec);
    assert_eq!(a.train, b.train);
    assert_eq!((a.train.len(), a.test.len()), (800, 200));
    assert_eq!((a.train.channels, a.train.height), (3, 8));
    let ones = a.train.labels.iter().filter(|&&l| l == 1).count();
    assert_eq!(ones, 400);
    let other = toy_dataset(&ToySpec { seed: 8, ..spec });
    assert_ne!(a.train.pixels, other.train.pixels);
}

fn labels_strategy() -> impl Strategy<Value = Vec<usize>> {
    (2usize..=10).prop_flat_map(|k| prop::collection::vec(0..k, 10..400))
}

proptest! {
    #[test]
    fn stratified_split_counts_within_one(labels in labels_strategy(), f in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, val) = make_splits(&labels, f, seed).unwrap();
        prop_assert_eq!(val.len(), (labels.len() as f64 * f).round() as usize);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        let classes = labels.iter().max().unwrap() + 1;
        for c in 0..classes {
            let n = labels.iter().filter(|&&l| l == c).count() as f64;
            let v = val.iter().filter(|&&i| labels[i] == c).count() as f64;
            prop_assert!((v - n * f).abs() <= 1.0, "class {} has {} of {}", c, v, n);
        }
        prop_assert_eq!(make_splits(&labels, f, seed).unwrap(), (train, val));
    }

    #[test]
    fn flip_is_an_involution(c in 1usize..=3, h in 1usize..=6, w in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let img: Vec<f32> = (0..c * h * w).map(|_| r.gen()).collect();
        prop_assert_eq!(hflip(&hflip(&img, [c, h, w]), [c, h, w]), img);
    }

    #[test]
    fn centered_crop_is_identity(c in 1usize..=3, h in 1usize..=6, pad in 0usize..=4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let img: Vec<f32> = (0..c * h * h).map(|_| r.gen()).collect();
        prop_assert_eq!(pad_crop(&img, [c, h, h], pad, pad, pad), img);
    }
}

#[test]
fn split_rejects_degenerate_fractions() {
    assert!(make_splits(&[0, 1, 0, 1], 0.0, 1).is_err());
    assert!(make_splits(&[0, 1, 0, 1], 1.0, 1).is_err());
}

#[test]
fn subset_keeps_pixels_and_labels() {
    let set = ImageSet::new(1, 1, 2, vec![1, 2, 3, 4, 5, 6], vec![0, 1, 0]).unwrap();
    let s = set.subset(&[2, 0]);
    assert_eq!(s.pixels, vec![5, 6, 1, 2]);
    assert_eq!(s.labels, vec![0, 0]);
}
