//! CIFAR-10 binary loading, the train/val/test split, augmentation and batching.
//!
//! A record is 3073 bytes: one label byte followed by the red, green and blue
//! 32x32 planes, each row-major. Pixels stay as bytes in memory and are
//! converted to `[0, 1]` floats when a batch is built.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const CROP: usize = 24;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
pub const DEFAULT_SPLIT_SEED: u64 = 42;

pub const MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Class index from a name (`"dog"`) or a number (`"5"`).
pub fn class_id(name: &str) -> Result<usize> {
    if let Ok(i) = name.parse::<usize>() {
        if i < NUM_CLASSES {
            return Ok(i);
        }
    }
    CLASS_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Config(format!("unknown class {name:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    /// Position of each sample in the file set it was read from.
    origin: Vec<usize>,
    pub split: Split,
}

/// Decoded records: `(pixels, labels)` with `IMAGE_BYTES` pixels per label.
pub fn parse_records(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Decode(format!(
            "length {} is not a positive multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(Error::Decode(format!("record {i} has label {}", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

pub fn load_batch_file(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Reads the five training files and the test file, then holds out a tenth of
/// the training records as validation.
pub fn load_cifar10(dir: &Path) -> Result<Splits> {
    load_cifar10_with_seed(dir, DEFAULT_SPLIT_SEED)
}

pub fn load_cifar10_with_seed(dir: &Path, split_seed: u64) -> Result<Splits> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in TRAIN_FILES {
        let (p, l) = load_batch_file(&dir.join(name))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let all = Dataset::from_parts(pixels, labels, Split::Train)?;
    let (train_idx, val_idx) = split_indices(all.len(), split_seed);
    let mut train = all.select(&train_idx);
    let mut val = all.select(&val_idx);
    train.split = Split::Train;
    val.split = Split::Val;
    let (p, l) = load_batch_file(&dir.join(TEST_FILE))?;
    let test = Dataset::from_parts(p, l, Split::Test)?;
    Ok(Splits { train, val, test })
}

/// Seeded Fisher–Yates permutation of `0..n`; the last `n / 10` positions are
/// validation. Both index lists are returned sorted.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = Rng::for_component(seed, "split").permutation(n);
    let cut = n - n / 10;
    let mut train = perm[..cut].to_vec();
    let mut val = perm[cut..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// SHA-256 over the indices as little-endian `u32`, hex encoded.
pub fn index_digest(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in indices {
        h.update((i as u32).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub fn from_parts(pixels: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::dim(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Domain(format!("label {l}")));
        }
        let origin = (0..labels.len()).collect();
        Ok(Dataset { pixels, labels, origin, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Index of sample `i` in the file set it came from.
    pub fn origin(&self, i: usize) -> usize {
        self.origin[i]
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// `[3, 32, 32]` in `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let raw = self.raw_image(i);
        Tensor::from_fn(&[CHANNELS, SIDE, SIDE], |j| raw[j] as f32 / 255.0)
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            pixels.extend_from_slice(self.raw_image(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
            split: self.split,
        }
    }

    /// A seeded subset of `n` samples (all of them if `n >= len`), original order kept.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx = Rng::new(derive_seed(seed, "subset")).permutation(self.len());
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Center-cropped, normalized `[len, 3, 24, 24]` batch of `indices`.
    pub fn eval_batch(&self, indices: &[usize]) -> Tensor<f32> {
        let off = (SIDE - CROP) / 2;
        let mut out = Vec::with_capacity(indices.len() * CHANNELS * CROP * CROP);
        for &i in indices {
            crop_bytes_into(self.raw_image(i), off, off, false, &mut out);
        }
        let mut t = Tensor::new(vec![indices.len(), CHANNELS, CROP, CROP], out)
            .expect("batch shape");
        normalize(&mut t);
        t
    }
}

/// All and only the samples labelled `class_id`, in their original order.
pub fn subset_by_class(dataset: &Dataset, class_id: usize) -> Dataset {
    let idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.label(i) == class_id)
        .collect();
    dataset.select(&idx)
}

fn crop_bytes_into(raw: &[u8], oy: usize, ox: usize, flip: bool, out: &mut Vec<f32>) {
    for c in 0..CHANNELS {
        for y in 0..CROP {
            let row = &raw[(c * SIDE + oy + y) * SIDE + ox..][..CROP];
            if flip {
                out.extend(row.iter().rev().map(|&b| b as f32 / 255.0));
            } else {
                out.extend(row.iter().map(|&b| b as f32 / 255.0));
            }
        }
    }
}

/// The 24x24 window at `(oy, ox)` of a `[3, 32, 32]` image, optionally mirrored left-right.
pub fn crop_flip(image: &Tensor<f32>, oy: usize, ox: usize, flip: bool) -> Result<Tensor<f32>> {
    if image.shape() != [CHANNELS, SIDE, SIDE] {
        return Err(Error::dim(format!("expected [3, 32, 32], got {:?}", image.shape())));
    }
    if oy > SIDE - CROP || ox > SIDE - CROP {
        return Err(Error::dim(format!("crop offset ({oy}, {ox}) out of range")));
    }
    let src = image.data();
    Ok(Tensor::from_fn(&[CHANNELS, CROP, CROP], |i| {
        let (c, y, x) = (i / (CROP * CROP), (i / CROP) % CROP, i % CROP);
        let x = if flip { CROP - 1 - x } else { x };
        src[(c * SIDE + oy + y) * SIDE + ox + x]
    }))
}

/// Random crop position and horizontal flip drawn from `rng`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub oy: usize,
    pub ox: usize,
    pub flip: bool,
}

impl Augmentation {
    pub fn draw(rng: &mut Rng) -> Self {
        let span = (SIDE - CROP + 1) as u64;
        let oy = rng.below(span) as usize;
        let ox = rng.below(span) as usize;
        let flip = rng.coin();
        Augmentation { oy, ox, flip }
    }
}

pub fn augment_crop_flip(image: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
    let a = Augmentation::draw(rng);
    crop_flip(image, a.oy, a.ox, a.flip)
}

/// Per-channel `(x - mean) / std` on `[N, 3, H, W]`, in place.
pub fn normalize(batch: &mut Tensor<f32>) {
    per_channel(batch, |v, c| (v - MEAN[c]) / STD[c]);
}

/// Inverse of [`normalize`].
pub fn denormalize(batch: &mut Tensor<f32>) {
    per_channel(batch, |v, c| v * STD[c] + MEAN[c]);
}

fn per_channel(batch: &mut Tensor<f32>, f: impl Fn(f32, usize) -> f32) {
    let s = batch.shape().to_vec();
    assert!(s.len() == 4 && s[1] == CHANNELS, "expected [N, 3, H, W], got {s:?}");
    let plane = s[2] * s[3];
    for (i, v) in batch.data_mut().iter_mut().enumerate() {
        *v = f(*v, (i / plane) % CHANNELS);
    }
}

/// Mini-batches over a dataset. With a seed the order is a seeded shuffle,
/// otherwise it is sequential; the final batch may be short.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<Rng>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, augment: bool, epoch_seed: Option<u64>) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        let order = match epoch_seed {
            Some(s) => Rng::new(derive_seed(s, "shuffle")).permutation(dataset.len()),
            None => (0..dataset.len()).collect(),
        };
        let augment = augment.then(|| Rng::new(derive_seed(epoch_seed.unwrap_or(0), "augment")));
        BatchIterator { dataset, order, pos: 0, batch_size, augment }
    }

    pub fn eval(dataset: &'a Dataset, batch_size: usize) -> Self {
        Self::new(dataset, batch_size, false, None)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

/// A batch: inputs, labels, and the dataset indices they came from.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let labels = indices.iter().map(|&i| self.dataset.label(i)).collect();
        let images = match &mut self.augment {
            None => self.dataset.eval_batch(&indices),
            Some(rng) => {
                let mut out = Vec::with_capacity(indices.len() * CHANNELS * CROP * CROP);
                for &i in &indices {
                    let a = Augmentation::draw(rng);
                    crop_bytes_into(self.dataset.raw_image(i), a.oy, a.ox, a.flip, &mut out);
                }
                let mut t = Tensor::new(vec![indices.len(), CHANNELS, CROP, CROP], out)
                    .expect("batch shape");
                normalize(&mut t);
                t
            }
        };
        Some(Batch { images, labels, indices })
    }
}

/// Learnable stand-in data in the CIFAR binary layout, for tests and demos.
///
/// Class `c` paints a 12x12 patch with a class-specific colour at a
/// class-specific position over uniform noise.
pub mod synthetic {
    use super::*;

    pub fn record(label: u8, rng: &mut Rng) -> Vec<u8> {
        let c = label as usize;
        let (py, px) = (4 + (c % 3) * 6, 4 + (c / 3 % 3) * 6);
        let colour = [(c * 97) % 256, (c * 53 + 80) % 256, (c * 29 + 160) % 256];
        let mut r = Vec::with_capacity(RECORD_BYTES);
        r.push(label);
        for &col in &colour {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let noise = rng.below(96) as usize;
                    let inside = (py..py + 12).contains(&y) && (px..px + 12).contains(&x);
                    r.push(if inside { ((col + noise) / 2 + 48).min(255) } else { noise } as u8);
                }
            }
        }
        r
    }

    /// `n` records with labels cycling through the classes.
    pub fn records(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = Rng::for_component(seed, "synthetic");
        (0..n).flat_map(|i| record((i % NUM_CLASSES) as u8, &mut rng)).collect()
    }

    pub fn dataset(n: usize, seed: u64, split: Split) -> Dataset {
        let (p, l) = parse_records(&records(n, seed)).expect("well-formed records");
        Dataset::from_parts(p, l, split).expect("consistent parts")
    }

    /// Writes the five training files and the test file into `dir`, creating it if needed.
    pub fn write_cifar_dir(dir: &Path, per_train_file: usize, test: usize, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, name) in TRAIN_FILES.iter().enumerate() {
            let p = dir.join(name);
            std::fs::write(&p, records(per_train_file, seed + i as u64)).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join(TEST_FILE);
        std::fs::write(&p, records(test, seed + 100)).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        synthetic::dataset(n, seed, Split::Test)
    }

    /// Record whose pixel at (c, y, x) is `(c * 7 + y * 3 + x + seed) % 256`.
    pub(crate) fn record(label: u8, seed: usize) -> Vec<u8> {
        let mut r = vec![label];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    r.push(((c * 7 + y * 3 + x + seed) % 256) as u8);
                }
            }
        }
        r
    }

    #[test]
    fn two_record_fixture() {
        let mut bytes = record(3, 0);
        bytes.extend(record(7, 100));
        let (pixels, labels) = parse_records(&bytes).unwrap();
        assert_eq!(labels, vec![3, 7]);
        let ds = Dataset::from_parts(pixels, labels, Split::Test).unwrap();
        // byte 1 is red (0,0), byte 1025 is green (0,0), byte 2049 blue (0,0)
        let img = ds.image(1);
        assert_eq!(img.data()[0], 100.0 / 255.0);
        assert_eq!(img.data()[1024], 107.0 / 255.0);
        assert_eq!(img.data()[2048], 114.0 / 255.0);
        assert_eq!(img.data()[32 + 5], ((3 + 5 + 100) % 256) as f32 / 255.0);
    }

    #[test]
    fn bad_lengths_and_labels_rejected() {
        assert!(parse_records(&[]).is_err());
        assert!(parse_records(&vec![0u8; RECORD_BYTES + 1]).is_err());
        assert!(parse_records(&record(10, 0)).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
        std::fs::write(dir.path().join("data_batch_1.bin"), [1u8; 10]).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("data_batch_1.bin"));
    }

    #[test]
    fn split_is_ninety_ten_and_disjoint() {
        let (train, val) = split_indices(50_000, 42);
        assert_eq!(train.len(), 45_000);
        assert_eq!(val.len(), 5_000);
        let mut all: Vec<_> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50_000).collect::<Vec<_>>());
        assert_eq!(split_indices(50_000, 42).1, val);
        assert_ne!(split_indices(50_000, 43).1, val);
    }

    fn tiny(labels: &[u8]) -> Dataset {
        let mut bytes = vec![];
        for (i, &l) in labels.iter().enumerate() {
            bytes.extend(record(l, i * 11));
        }
        let (p, l) = parse_records(&bytes).unwrap();
        Dataset::from_parts(p, l, Split::Test).unwrap()
    }

    #[test]
    fn crop_at_origin_without_flip() {
        let img = tiny(&[0]).image(0);
        let c = crop_flip(&img, 0, 0, false).unwrap();
        for ch in 0..3 {
            for y in 0..24 {
                for x in 0..24 {
                    assert_eq!(c.data()[(ch * 24 + y) * 24 + x], img.data()[(ch * 32 + y) * 32 + x]);
                }
            }
        }
    }

    #[test]
    fn flip_is_involution() {
        let img = tiny(&[0]).image(0);
        let once = crop_flip(&img, 3, 5, true).unwrap();
        let plain = crop_flip(&img, 3, 5, false).unwrap();
        let twice = Tensor::from_fn(once.shape(), |i| {
            let (r, x) = (i / 24, i % 24);
            once.data()[r * 24 + 23 - x]
        });
        assert_eq!(twice, plain);
    }

    #[test]
    fn batch_crop_matches_tensor_crop() {
        let ds = tiny(&[1, 2, 3]);
        let mut it = BatchIterator::new(&ds, 3, true, Some(9));
        let batch = it.next().unwrap();
        let mut rng = Rng::new(derive_seed(9, "augment"));
        for (row, &i) in batch.indices.iter().enumerate() {
            let mut want = augment_crop_flip(&ds.image(i), &mut rng).unwrap().reshape(&[1, 3, 24, 24]).unwrap();
            normalize(&mut want);
            assert_eq!(batch.images.row(row), want.data());
        }
    }

    #[test]
    fn offsets_are_uniform() {
        // Chi-square over the 81 (oy, ox) cells; 3 sigma above 80 dof is ~118.
        let mut rng = Rng::new(42);
        let mut counts = [0usize; 81];
        let draws = 10_000;
        let mut flips = 0;
        for _ in 0..draws {
            let a = Augmentation::draw(&mut rng);
            assert!(a.oy <= 8 && a.ox <= 8);
            counts[a.oy * 9 + a.ox] += 1;
            flips += a.flip as usize;
        }
        let expected = draws as f64 / 81.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 80.0 + 3.0 * (160f64).sqrt(), "chi2 {chi2}");
        assert!((flips as f64 - 5000.0).abs() < 3.0 * 50.0);
    }

    #[test]
    fn normalization_arithmetic() {
        let mut t = Tensor::from_fn(&[1, 3, 1, 2], |i| match i {
            0 => 1.0,
            1 => MEAN[0],
            2 | 3 => MEAN[1],
            _ => MEAN[2],
        });
        let orig = t.clone();
        normalize(&mut t);
        assert!((t.data()[0] - 2.0591).abs() < 1e-4);
        assert!(t.data()[1..].iter().all(|v| v.abs() < 1e-7));
        denormalize(&mut t);
        for (a, b) in t.data().iter().zip(orig.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn class_subsets_partition() {
        let ds = tiny(&[5, 1, 5, 2, 9, 5]);
        let dogs = subset_by_class(&ds, class_id("dog").unwrap());
        assert_eq!(dogs.len(), 3);
        assert_eq!((0..3).map(|i| dogs.origin(i)).collect::<Vec<_>>(), vec![0, 2, 5]);
        assert!(subset_by_class(&ds, 0).is_empty());
        let total: usize = (0..10).map(|c| subset_by_class(&ds, c).len()).sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn shuffle_depends_only_on_seed() {
        let ds = tiny(&[0; 20]);
        let a = BatchIterator::new(&ds, 4, false, Some(3)).order().to_vec();
        let b = BatchIterator::new(&ds, 4, false, Some(3)).order().to_vec();
        let c = BatchIterator::new(&ds, 4, false, Some(4)).order().to_vec();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let sizes: Vec<_> = BatchIterator::eval(&ds, 8).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![8, 8, 4]);
    }

    #[test]
    fn loaded_pixels_are_unit_range() {
        let ds = tiny(&[0, 1]);
        assert!(ds.image(1).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
