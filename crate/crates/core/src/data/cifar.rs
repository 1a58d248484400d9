use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, ImageSet};
use crate::error::{Error, Result};

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Training files and their standard record counts, then the test file.
    fn files(self) -> (Vec<(String, usize)>, (String, usize)) {
        match self {
            CifarVariant::Cifar10 => (
                (1..=5).map(|i| (format!("data_batch_{i}.bin"), 10_000)).collect(),
                ("test_batch.bin".to_string(), 10_000),
            ),
            CifarVariant::Cifar100 => (vec![("train.bin".to_string(), 50_000)], ("test.bin".to_string(), 10_000)),
        }
    }
}

/// SHA-256 of one input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of_bytes(file: impl Into<String>, bytes: &[u8]) -> Self {
        FileDigest {
            file: file.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CifarOptions {
    /// Overrides the standard per-file record count (useful for small fixtures).
    pub records_per_file: Option<usize>,
    /// Expected SHA-256 per file name; mismatches are rejected.
    pub checksums: Option<BTreeMap<String, String>>,
}

fn format_err(path: &str, msg: String) -> Error {
    Error::Format {
        path: path.into(),
        msg,
    }
}

/// Decodes a whole file of records. `origin` names the source in errors.
pub fn decode_records(bytes: &[u8], variant: CifarVariant, origin: &str) -> Result<ImageSet> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(format_err(
            origin,
            format!("{} bytes is not a whole number of {rec}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    let classes = variant.num_classes();
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = usize::from(r[variant.label_bytes() - 1]);
        if label >= classes {
            return Err(format_err(origin, format!("record {i} has label {label}, expected < {classes}")));
        }
        if variant == CifarVariant::Cifar100 {
            let c = usize::from(r[0]);
            if c >= 20 {
                return Err(format_err(origin, format!("record {i} has coarse label {c}, expected < 20")));
            }
            coarse.push(c);
        }
        labels.push(label);
        pixels.extend_from_slice(&r[variant.label_bytes()..]);
    }
    let mut set = ImageSet::new(3, SIDE, SIDE, pixels, labels)?;
    if variant == CifarVariant::Cifar100 {
        set.coarse_labels = Some(coarse);
    }
    Ok(set)
}

/// Inverse of [`decode_records`]. CIFAR-100 sets without coarse labels
/// write 0 in that byte.
pub fn encode_records(set: &ImageSet, variant: CifarVariant) -> Result<Vec<u8>> {
    if (set.channels, set.height, set.width) != (3, SIDE, SIDE) {
        return Err(Error::Argument(format!(
            "CIFAR records hold 3x32x32 images, got {}x{}x{}",
            set.channels, set.height, set.width
        )));
    }
    let mut out = Vec::with_capacity(set.len() * variant.record_len());
    for i in 0..set.len() {
        let label = u8::try_from(set.labels[i])
            .ok()
            .filter(|&l| usize::from(l) < variant.num_classes())
            .ok_or_else(|| Error::Argument(format!("label {} does not fit the format", set.labels[i])))?;
        if variant == CifarVariant::Cifar100 {
            let c = set.coarse_labels.as_ref().map_or(0, |c| c[i]);
            out.push(u8::try_from(c).map_err(|_| Error::Argument(format!("coarse label {c} too large")))?);
        }
        out.push(label);
        out.extend_from_slice(set.image(i));
    }
    Ok(out)
}

fn read_checked(dir: &Path, name: &str, records: usize, variant: CifarVariant, opts: &CifarOptions) -> Result<(ImageSet, FileDigest)> {
    let path = dir.join(name);
    let shown = path.display().to_string();
    let bytes = fs::read(&path).map_err(|e| format_err(&shown, format!("cannot read: {e}")))?;
    let expected = records * variant.record_len();
    if bytes.len() != expected {
        return Err(format_err(
            &shown,
            format!("expected {expected} bytes ({records} records), found {}", bytes.len()),
        ));
    }
    let digest = FileDigest::of_bytes(name, &bytes);
    if let Some(want) = opts.checksums.as_ref().and_then(|m| m.get(name)) {
        if !want.eq_ignore_ascii_case(&digest.sha256) {
            return Err(format_err(&shown, format!("checksum {} does not match expected {want}", digest.sha256)));
        }
    }
    let set = decode_records(&bytes, variant, &shown)?;
    Ok((set, digest))
}

fn concat(sets: Vec<ImageSet>) -> ImageSet {
    let mut it = sets.into_iter();
    let mut acc = it.next().expect("at least one file");
    for s in it {
        acc.pixels.extend(s.pixels);
        acc.labels.extend(s.labels);
        if let (Some(a), Some(b)) = (acc.coarse_labels.as_mut(), s.coarse_labels) {
            a.extend(b);
        }
    }
    acc
}

/// Loads the standard binary distribution from `dir`. Every file is checked
/// before anything is returned.
pub fn load_cifar(dir: &Path, variant: CifarVariant, opts: &CifarOptions) -> Result<Dataset> {
    let (train_files, (test_name, test_records)) = variant.files();
    let mut provenance = Vec::new();
    let mut parts = Vec::new();
    for (name, records) in &train_files {
        let (set, d) = read_checked(dir, name, opts.records_per_file.unwrap_or(*records), variant, opts)?;
        parts.push(set);
        provenance.push(d);
    }
    let (test, d) = read_checked(dir, &test_name, opts.records_per_file.unwrap_or(test_records), variant, opts)?;
    provenance.push(d);
    let name = match variant {
        CifarVariant::Cifar10 => "cifar10",
        CifarVariant::Cifar100 => "cifar100",
    };
    Ok(Dataset::new(name, variant.num_classes(), concat(parts), test, provenance))
}
