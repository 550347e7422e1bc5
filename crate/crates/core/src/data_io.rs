//! Dataset ingestion and preprocessing.
//!
//! Pixel convention: raw pixels live in `[0, 1]`, are mapped to `[-1, 1]`
//! via `2v - 1`, and the per-subset mean image is subtracted afterwards.
//! The stored `mean_image` makes the mapping reversible:
//! `x + mean_image` recovers the `[-1, 1]` representation exactly.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    /// Binary label in {-1, +1}.
    Sign(f64),
    /// Class index.
    Class(usize),
    /// Regression target.
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Sign(Vec<f64>),
    Class { indices: Vec<usize>, classes: usize },
    Value(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Sign(v) => v.len(),
            Labels::Class { indices, .. } => indices.len(),
            Labels::Value(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Label {
        match self {
            Labels::Sign(v) => Label::Sign(v[i]),
            Labels::Class { indices, .. } => Label::Class(indices[i]),
            Labels::Value(v) => Label::Value(v[i]),
        }
    }

    /// Number of classes for class-indexed labels.
    pub fn class_count(&self) -> Option<usize> {
        match self {
            Labels::Class { classes, .. } => Some(*classes),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    /// (class label as text, sample count) pairs.
    pub per_class: Vec<(String, usize)>,
}

/// Mean-subtracted sample matrix with labels and the stored mean image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Tensor,
    labels: Labels,
    mean_image: Vec<f64>,
    /// (channels, height, width); `(1, 1, d)` for unstructured vectors.
    image_shape: (usize, usize, usize),
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        x: Tensor,
        labels: Labels,
        mean_image: Vec<f64>,
        image_shape: (usize, usize, usize),
        provenance: Provenance,
    ) -> Self {
        assert_eq!(x.rank(), 2);
        assert_eq!(x.shape()[0], labels.len());
        assert_eq!(x.shape()[1], mean_image.len());
        assert_eq!(image_shape.0 * image_shape.1 * image_shape.2, mean_image.len());
        Dataset { x, labels, mean_image, image_shape, provenance }
    }

    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.x.data()[i * self.d()..(i + 1) * self.d()]
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels.get(i)
    }

    pub fn mean_image(&self) -> &[f64] {
        &self.mean_image
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// SHA-256 over samples, labels, and mean image; identifies the dataset
    /// in checkpoint manifests.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.x.iter() {
            h.update(v.to_le_bytes());
        }
        match &self.labels {
            Labels::Sign(v) | Labels::Value(v) => {
                for y in v {
                    h.update(y.to_le_bytes());
                }
            }
            Labels::Class { indices, classes } => {
                h.update((*classes as u64).to_le_bytes());
                for y in indices {
                    h.update((*y as u64).to_le_bytes());
                }
            }
        }
        for v in &self.mean_image {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// -- raw little-endian f64 files -----------------------------------------

pub(crate) fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_f64_le(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::CorruptCheckpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

// -- raw image corpora ------------------------------------------------------

/// Parsed image corpus with pixels already scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct RawImages {
    pub source: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major per sample: channel planes, each `height x width`.
    pub pixels: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.into() }
}

fn parse_cifar_records(
    path: &Path,
    bytes: &[u8],
    label_bytes: usize,
    classes: usize,
    out: &mut RawImages,
) -> Result<()> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(format_err(
            path,
            format!("length {} is not a multiple of the {record}-byte record size", bytes.len()),
        ));
    }
    for rec in bytes.chunks_exact(record) {
        // the class label is the last label byte (fine label for the
        // two-byte variant)
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(format_err(path, format!("label byte {label} out of range 0..{classes}")));
        }
        out.labels.push(label);
        out.pixels.push(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0).collect());
    }
    Ok(())
}

fn load_cifar_dir(dir: &Path, names: &[&str], label_bytes: usize, classes: usize) -> Result<RawImages> {
    let mut raw = RawImages {
        source: dir.display().to_string(),
        channels: 3,
        height: 32,
        width: 32,
        pixels: Vec::new(),
        labels: Vec::new(),
        classes,
    };
    let mut found = false;
    for name in names {
        let path = dir.join(name);
        if path.exists() {
            found = true;
            let bytes = fs::read(&path)?;
            parse_cifar_records(&path, &bytes, label_bytes, classes, &mut raw)?;
        }
    }
    if !found {
        return Err(format_err(dir, format!("no batch files found (looked for {names:?})")));
    }
    Ok(raw)
}

/// Loads the standard CIFAR-10 training batches (`data_batch_{1..5}.bin`,
/// one label byte + 3072 pixel bytes per record, R/G/B planes row-major).
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<RawImages> {
    load_cifar_dir(
        dir.as_ref(),
        &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
        1,
        10,
    )
}

/// Loads the CIFAR-100 training batch (`train.bin`, two label bytes per
/// record; the fine label is used).
pub fn load_cifar100(dir: impl AsRef<Path>) -> Result<RawImages> {
    load_cifar_dir(dir.as_ref(), &["train.bin"], 2, 100)
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated header"))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads the MNIST training pair (`train-images-idx3-ubyte` +
/// `train-labels-idx1-ubyte`) from a directory.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<RawImages> {
    let dir = dir.as_ref();
    let images_path = dir.join("train-images-idx3-ubyte");
    let labels_path = dir.join("train-labels-idx1-ubyte");

    let bytes = fs::read(&images_path)?;
    let mut cur = std::io::Cursor::new(&bytes);
    let magic = read_u32_be(&mut cur, &images_path)?;
    if magic != 0x0000_0803 {
        return Err(format_err(&images_path, format!("bad magic {magic:#010x}, expected 0x00000803")));
    }
    let n = read_u32_be(&mut cur, &images_path)? as usize;
    let rows = read_u32_be(&mut cur, &images_path)? as usize;
    let cols = read_u32_be(&mut cur, &images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(&images_path, format!("length {} != header-implied {expected}", bytes.len())));
    }
    let pixels: Vec<Vec<f64>> = bytes[16..]
        .chunks_exact(rows * cols)
        .map(|img| img.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();

    let lbytes = fs::read(&labels_path)?;
    let mut cur = std::io::Cursor::new(&lbytes);
    let magic = read_u32_be(&mut cur, &labels_path)?;
    if magic != 0x0000_0801 {
        return Err(format_err(&labels_path, format!("bad magic {magic:#010x}, expected 0x00000801")));
    }
    let ln = read_u32_be(&mut cur, &labels_path)? as usize;
    if ln != n {
        return Err(format_err(&labels_path, format!("{ln} labels for {n} images")));
    }
    if lbytes.len() != 8 + ln {
        return Err(format_err(&labels_path, format!("length {} != header-implied {}", lbytes.len(), 8 + ln)));
    }
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(format_err(&labels_path, format!("label {bad} out of range 0..10")));
    }

    Ok(RawImages {
        source: dir.display().to_string(),
        channels: 1,
        height: rows,
        width: cols,
        pixels,
        labels,
        classes: 10,
    })
}

// -- label schemes -----------------------------------------------------------

/// CIFAR-10 animals {bird, cat, deer, dog, frog, horse} -> +1,
/// vehicles {airplane, automobile, ship, truck} -> -1.
pub fn binarize_animals_vehicles(class: usize) -> Result<f64> {
    match class {
        0 | 1 | 8 | 9 => Ok(-1.0),
        2..=7 => Ok(1.0),
        _ => Err(Error::InvalidLabel(format!("CIFAR-10 class {class} out of range 0..10"))),
    }
}

/// How raw class labels map onto training labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClassScheme {
    /// Pooled binary labels from CIFAR-10 classes; `per_class` samples are
    /// drawn from each pooled side.
    AnimalsVsVehicles,
    /// Subset of raw classes, remapped to indices `0..C`.
    Classes(Vec<usize>),
}

/// Deterministic per-class subsample, `[-1, 1]` mapping, and mean
/// subtraction.
pub fn preprocess(raw: &RawImages, scheme: &ClassScheme, per_class: usize, seed: u64) -> Result<Dataset> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    // pools of raw indices per output class, in raw order
    let (pools, pool_names): (Vec<Vec<usize>>, Vec<String>) = match scheme {
        ClassScheme::AnimalsVsVehicles => {
            let mut animals = Vec::new();
            let mut vehicles = Vec::new();
            for (i, &c) in raw.labels.iter().enumerate() {
                match binarize_animals_vehicles(c)? {
                    v if v > 0.0 => animals.push(i),
                    _ => vehicles.push(i),
                }
            }
            (vec![animals, vehicles], vec!["animals(+1)".into(), "vehicles(-1)".into()])
        }
        ClassScheme::Classes(classes) => {
            if classes.is_empty() {
                return Err(Error::InvalidConfig("class subset is empty".into()));
            }
            if let Some(&bad) = classes.iter().find(|&&c| c >= raw.classes) {
                return Err(Error::InvalidLabel(format!(
                    "class {bad} out of range for a {}-class corpus",
                    raw.classes
                )));
            }
            let pools = classes
                .iter()
                .map(|&c| {
                    raw.labels
                        .iter()
                        .enumerate()
                        .filter(|(_, &l)| l == c)
                        .map(|(i, _)| i)
                        .collect::<Vec<_>>()
                })
                .collect();
            (pools, classes.iter().map(|c| c.to_string()).collect())
        }
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(usize, usize)> = Vec::new(); // (raw index, output class)
    for (class, pool) in pools.iter().enumerate() {
        if pool.len() < per_class {
            return Err(Error::InvalidConfig(format!(
                "class pool {} holds {} samples, {per_class} requested",
                pool_names[class],
                pool.len()
            )));
        }
        let mut pool = pool.clone();
        pool.shuffle(&mut rng);
        chosen.extend(pool[..per_class].iter().map(|&i| (i, class)));
    }

    let d = raw.channels * raw.height * raw.width;
    let n = chosen.len();
    // map to [-1, 1], accumulate the subset mean
    let mut x = vec![0.0; n * d];
    let mut mean = vec![0.0; d];
    for (row, &(i, _)) in chosen.iter().enumerate() {
        if raw.pixels[i].len() != d {
            return Err(Error::ShapeMismatch(format!("sample {i} has {} pixels, expected {d}", raw.pixels[i].len())));
        }
        for (k, &v) in raw.pixels[i].iter().enumerate() {
            let s = 2.0 * v - 1.0;
            x[row * d + k] = s;
            mean[k] += s;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for row in 0..n {
        for k in 0..d {
            x[row * d + k] -= mean[k];
        }
    }

    let labels = match scheme {
        ClassScheme::AnimalsVsVehicles => {
            Labels::Sign(chosen.iter().map(|&(_, class)| if class == 0 { 1.0 } else { -1.0 }).collect())
        }
        ClassScheme::Classes(classes) => Labels::Class {
            indices: chosen.iter().map(|&(_, class)| class).collect(),
            classes: classes.len(),
        },
    };

    let provenance = Provenance {
        source: raw.source.clone(),
        seed,
        per_class: pool_names.iter().map(|n| (n.clone(), per_class)).collect(),
    };
    Ok(Dataset::new(
        Tensor::new(vec![n, d], x),
        labels,
        mean,
        (raw.channels, raw.height, raw.width),
        provenance,
    ))
}

// -- synthetic generators ------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Smooth per-class blobs with jittered position and amplitude;
    /// classes occupy separated regions, so the class-mean difference is a
    /// separating linear probe.
    GaussianBlobs,
    /// Random ±0.5 pixel patterns with balanced ±1 labels.
    BinaryPatterns,
}

fn near_square(d: usize) -> (usize, usize) {
    let mut h = (d as f64).sqrt().floor() as usize;
    while h > 1 && d % h != 0 {
        h -= 1;
    }
    (h.max(1), d / h.max(1))
}

fn image_shape_for(d: usize) -> (usize, usize, usize) {
    let side3 = ((d / 3) as f64).sqrt().round() as usize;
    if d % 3 == 0 && 3 * side3 * side3 == d {
        return (3, side3, side3);
    }
    let (h, w) = near_square(d);
    (1, h, w)
}

/// Balanced binary synthetic dataset in `[-1, 1]^d` with a stored mean.
pub fn synthetic(kind: SyntheticKind, n: usize, d: usize, seed: u64) -> Result<Dataset> {
    match kind {
        SyntheticKind::GaussianBlobs => {
            let per = n / 2;
            if per == 0 || n % 2 != 0 {
                return Err(Error::InvalidConfig(format!("blob generator needs an even n >= 2, got {n}")));
            }
            synthetic_blobs(per, 2, d, seed, true)
        }
        SyntheticKind::BinaryPatterns => binary_patterns(n, d, seed),
    }
}

/// Multiclass variant of the blob generator: `per_class` samples for each of
/// `classes` classes with class-anchored blob centers.
pub fn synthetic_blobs_multiclass(per_class: usize, classes: usize, d: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    synthetic_blobs(per_class, classes, d, seed, false)
}

fn synthetic_blobs(per_class: usize, classes: usize, d: usize, seed: u64, sign_labels: bool) -> Result<Dataset> {
    use rand::Rng;
    use rand::SeedableRng;

    if d < 4 {
        return Err(Error::InvalidConfig("blob generator needs d >= 4".into()));
    }
    let (c, h, w) = image_shape_for(d);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * classes;
    let mut x = vec![0.0; n * d];

    // class anchors on a circle inside the image
    let cx0 = (w as f64 - 1.0) / 2.0;
    let cy0 = (h as f64 - 1.0) / 2.0;
    let ring = 0.30 * (w.min(h) as f64);
    for class in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        let (ax, ay) = (cx0 + ring * angle.cos(), cy0 + ring * angle.sin());
        for s in 0..per_class {
            let row = class * per_class + s;
            // jitter keeps samples of a class distinct but in-region
            let jx: f64 = rng.random_range(-0.12..0.12) * w as f64;
            let jy: f64 = rng.random_range(-0.12..0.12) * h as f64;
            let sigma: f64 = rng.random_range(0.08..0.16) * w.min(h) as f64;
            let amp: f64 = rng.random_range(0.30..0.45);
            for ch in 0..c {
                let chan_gain = 1.0 - 0.15 * ch as f64;
                for i in 0..h {
                    for j in 0..w {
                        let dy = i as f64 - (ay + jy);
                        let dx = j as f64 - (ax + jx);
                        let bump = amp * chan_gain * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let noise: f64 = rng.random_range(-0.04..0.04);
                        let v: f64 = (bump + noise).clamp(-0.5, 0.5);
                        x[row * d + (ch * h + i) * w + j] = v;
                    }
                }
            }
        }
    }

    // subtract the subset mean; |pattern| <= 0.5 keeps the result in [-1, 1]
    let mut mean = vec![0.0; d];
    for row in 0..n {
        for k in 0..d {
            mean[k] += x[row * d + k];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for row in 0..n {
        for k in 0..d {
            x[row * d + k] -= mean[k];
        }
    }

    let labels = if sign_labels && classes == 2 {
        Labels::Sign(
            (0..n).map(|row| if row / per_class == 0 { 1.0 } else { -1.0 }).collect(),
        )
    } else {
        Labels::Class { indices: (0..n).map(|row| row / per_class).collect(), classes }
    };
    let provenance = Provenance {
        source: format!("synthetic:blobs(classes={classes},d={d})"),
        seed,
        per_class: (0..classes).map(|c| (c.to_string(), per_class)).collect(),
    };
    Ok(Dataset::new(Tensor::new(vec![n, d], x), labels, mean, (c, h, w), provenance))
}

fn binary_patterns(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    use rand::Rng;
    use rand::SeedableRng;

    if n == 0 || d == 0 {
        return Err(Error::InvalidConfig("need n, d >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; n * d];
    for v in &mut x {
        *v = if rng.random::<bool>() { 0.5 } else { -0.5 };
    }
    let mut mean = vec![0.0; d];
    for row in 0..n {
        for k in 0..d {
            mean[k] += x[row * d + k];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for row in 0..n {
        for k in 0..d {
            x[row * d + k] -= mean[k];
        }
    }
    let labels = Labels::Sign((0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
    let provenance = Provenance {
        source: format!("synthetic:patterns(d={d})"),
        seed,
        per_class: vec![("+1".into(), n - n / 2), ("-1".into(), n / 2)],
    };
    Ok(Dataset::new(Tensor::new(vec![n, d], x), labels, mean, image_shape_for(d), provenance))
}

// -- dataset persistence ------------------------------------------------

const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    n: usize,
    d: usize,
    image_shape: (usize, usize, usize),
    labels: Labels,
    provenance: Provenance,
}

/// Writes `manifest.json`, `x.f64`, and `mean.f64` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        n: ds.n(),
        d: ds.d(),
        image_shape: ds.image_shape,
        labels: ds.labels.clone(),
        provenance: ds.provenance.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_f64_le(&dir.join("x.f64"), ds.x.data())?;
    write_f64_le(&dir.join("mean.f64"), &ds.mean_image)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: DATASET_VERSION });
    }
    if manifest.labels.len() != manifest.n {
        return Err(Error::Schema(format!(
            "{} labels for n = {}",
            manifest.labels.len(),
            manifest.n
        )));
    }
    let x = read_f64_le(&dir.join("x.f64"), manifest.n * manifest.d)?;
    let mean = read_f64_le(&dir.join("mean.f64"), manifest.d)?;
    Ok(Dataset::new(
        Tensor::new(vec![manifest.n, manifest.d], x),
        manifest.labels,
        mean,
        manifest.image_shape,
        manifest.provenance,
    ))
}

/// Serializes images back into the CIFAR-10 binary batch layout
/// (1 label byte + 3 x 32 x 32 pixel bytes per record). Used to fabricate
/// format-faithful fixtures.
pub fn write_cifar10_batch(path: impl AsRef<Path>, images: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    if images.len() != labels.len() {
        return Err(Error::InvalidConfig("one label per image required".into()));
    }
    let mut bytes = Vec::with_capacity(images.len() * (1 + CIFAR_PIXELS));
    for (img, &label) in images.iter().zip(labels) {
        if label > 9 {
            return Err(Error::InvalidLabel(format!("CIFAR-10 label {label} out of range")));
        }
        if img.len() != CIFAR_PIXELS {
            return Err(Error::ShapeMismatch(format!("image has {} pixels, expected {CIFAR_PIXELS}", img.len())));
        }
        bytes.push(label as u8);
        bytes.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// CIFAR-like synthetic corpus written as a real binary batch file:
/// class-dependent blob images rendered at 3 x 32 x 32 and pushed through
/// [`write_cifar10_batch`]. Returns the batch path.
pub fn fabricate_cifar10_dir(dir: impl AsRef<Path>, per_class: usize, seed: u64) -> Result<PathBuf> {
    use rand::Rng;
    use rand::SeedableRng;

    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (32usize, 32usize);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..10usize {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / 10.0;
        let (ax, ay) = (15.5 + 9.0 * angle.cos(), 15.5 + 9.0 * angle.sin());
        for _ in 0..per_class {
            let jx: f64 = rng.random_range(-3.0..3.0);
            let jy: f64 = rng.random_range(-3.0..3.0);
            let sigma: f64 = rng.random_range(2.5..5.0);
            let amp: f64 = rng.random_range(0.14..0.24);
            let mut img = vec![0.0; CIFAR_PIXELS];
            for ch in 0..3usize {
                let gain = 1.0 - 0.2 * ch as f64;
                for i in 0..h {
                    for j in 0..w {
                        let dy = i as f64 - (ay + jy);
                        let dx = j as f64 - (ax + jx);
                        let bump = amp * gain * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let noise: f64 = rng.random_range(-0.02..0.02);
                        img[(ch * h + i) * w + j] = (0.5 + bump + noise).clamp(0.26, 0.74);
                    }
                }
            }
            images.push(img);
            labels.push(class);
        }
    }
    let path = dir.join("data_batch_1.bin");
    write_cifar10_batch(&path, &images, &labels)?;
    Ok(path)
}
