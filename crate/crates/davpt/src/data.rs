//! Synthetic datasets and the on-disk sample format.
//!
//! Dataset files are little-endian throughout:
//!
//! ```text
//! magic   4 bytes  "DAVT"
//! version u32      1
//! samples u32
//! height  u32
//! width   u32
//! channels u32
//! classes u32
//! then per sample: label u16, height*width*channels pixel bytes
//!                  (row-major, channel-interleaved)
//! ```
//!
//! Total file length is exactly `28 + samples * (2 + height*width*channels)`.

use crate::streams::{rng, Stream};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: [u8; 4] = *b"DAVT";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic {0:?}, expected {DATASET_MAGIC:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}, expected {DATASET_VERSION}")]
    Version(u32),
    #[error("dataset length mismatch: expected {expected} bytes, got {actual}")]
    Length { expected: u64, actual: u64 },
    #[error("dataset header field {field} must be at least 1, got 0")]
    ZeroField { field: &'static str },
    #[error("sample {index} has label {label} outside 0..{num_classes}")]
    LabelRange { index: usize, label: u16, num_classes: u32 },
    #[error("invalid synthesis spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An in-memory labeled image dataset. Pixels are stored exactly as on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub labels: Vec<u16>,
    pub pixels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_bytes(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Pixel bytes and label of sample `i`.
    pub fn sample(&self, i: usize) -> (&[u8], usize) {
        let sb = self.sample_bytes();
        (&self.pixels[i * sb..(i + 1) * sb], self.labels[i] as usize)
    }

    /// Samples at `indices`, in order, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let sb = self.sample_bytes();
        let mut labels = Vec::with_capacity(indices.len());
        let mut pixels = Vec::with_capacity(indices.len() * sb);
        for &i in indices {
            labels.push(self.labels[i]);
            pixels.extend_from_slice(&self.pixels[i * sb..(i + 1) * sb]);
        }
        Dataset { labels, pixels, ..*self }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sb = self.sample_bytes();
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (2 + sb));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            out.extend_from_slice(&self.pixels[i * sb..(i + 1) * sb]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, DataError> {
        if bytes.len() < HEADER_LEN {
            return Err(DataError::Length { expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != DATASET_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != DATASET_VERSION {
            return Err(DataError::Version(version));
        }
        let samples = word(8) as u64;
        let height = word(12);
        let width = word(16);
        let channels = word(20);
        let num_classes = word(24);
        for (field, v) in [("height", height), ("width", width), ("channels", channels), ("classes", num_classes)] {
            if v == 0 {
                return Err(DataError::ZeroField { field });
            }
        }
        let sb = height as u64 * width as u64 * channels as u64;
        let expected = HEADER_LEN as u64 + samples * (2 + sb);
        if bytes.len() as u64 != expected {
            return Err(DataError::Length { expected, actual: bytes.len() as u64 });
        }
        let sb = sb as usize;
        let mut labels = Vec::with_capacity(samples as usize);
        let mut pixels = Vec::with_capacity(samples as usize * sb);
        let mut at = HEADER_LEN;
        for index in 0..samples as usize {
            let label = u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap());
            if label as u32 >= num_classes {
                return Err(DataError::LabelRange { index, label, num_classes });
            }
            labels.push(label);
            pixels.extend_from_slice(&bytes[at + 2..at + 2 + sb]);
            at += 2 + sb;
        }
        Ok(Dataset {
            height: height as usize,
            width: width as usize,
            channels: channels as usize,
            num_classes: num_classes as usize,
            labels,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Dataset, DataError> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

/// Recipe for a synthetic dataset: each class gets a fixed
/// frequency-and-orientation sinusoid prototype, scaled by `separability`,
/// with per-pixel Gaussian noise on top.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// In `[0, 1]`; scales the prototype amplitude and therefore the
    /// inter-class pattern distance.
    pub separability: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The dataset every shipped experiment uses: 8 classes, 64 samples
    /// each, 32x32 grayscale, strongly separable.
    pub fn fixture() -> Self {
        SynthSpec {
            num_classes: 8,
            per_class: 64,
            image_size: 32,
            channels: 1,
            separability: 1.0,
            noise_std: 8.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize + 1 {
            return Err(DataError::BadSpec(format!("num_classes {} out of range", self.num_classes)));
        }
        if self.per_class == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(DataError::BadSpec("per_class, image_size, channels must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return Err(DataError::BadSpec(format!("separability {} not in [0, 1]", self.separability)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(DataError::BadSpec(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }

    /// Noise-free prototype of one class, in pixel units before quantization.
    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let s = self.image_size;
        let amplitude = 100.0 * self.separability;
        let theta = std::f64::consts::PI * class as f64 / self.num_classes as f64;
        let freq = 1.0 + class as f64;
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let mut out = Vec::with_capacity(s * s * self.channels);
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 * cos_t + y as f64 * sin_t) / s as f64;
                for ch in 0..self.channels {
                    let phase = 0.7 * ch as f64;
                    let v = 127.5
                        + amplitude * (2.0 * std::f64::consts::PI * freq * u + phase).sin();
                    out.push(v);
                }
            }
        }
        out
    }
}

/// Generate the dataset described by `spec`. Samples are grouped by class
/// (sample `i` has class `i / per_class`); every pixel draws its noise from
/// a per-sample stream, so the output is a pure function of the spec.
pub fn generate(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let sb = spec.image_size * spec.image_size * spec.channels;
    let n = spec.num_classes * spec.per_class;
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * sb);
    let prototypes: Vec<Vec<f64>> =
        (0..spec.num_classes).map(|c| spec.prototype(c)).collect();
    for i in 0..n {
        let class = i / spec.per_class;
        labels.push(class as u16);
        let mut r = rng(spec.seed, Stream::DataGen(i as u64));
        for &p in &prototypes[class] {
            let v = if spec.noise_std > 0.0 { p + noise.sample(&mut r) } else { p };
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(Dataset {
        height: spec.image_size,
        width: spec.image_size,
        channels: spec.channels,
        num_classes: spec.num_classes,
        labels,
        pixels,
    })
}

/// Deterministic 80/10/10 split: shuffle indices with the split stream of
/// `seed`, then take the first 80% as train, the next 10% as validation,
/// and the remainder as test.
pub fn split(ds: &Dataset, seed: u64) -> (Dataset, Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng(seed, Stream::Split));
    let n_train = ds.len() * 8 / 10;
    let n_val = ds.len() / 10;
    (
        ds.subset(&idx[..n_train]),
        ds.subset(&idx[n_train..n_train + n_val]),
        ds.subset(&idx[n_train + n_val..]),
    )
}

/// Batch index lists for one epoch: a Fisher-Yates shuffle keyed by
/// `(seed, epoch)`, chunked; a final short batch is kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be >= 1");
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng(seed, Stream::Shuffle(epoch)));
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Mean pixel value per class in `[0, 1]` units, for quick sanity checks.
pub fn class_pixel_means(ds: &Dataset) -> Vec<f64> {
    let mut sums = vec![0.0; ds.num_classes];
    let mut counts = vec![0usize; ds.num_classes];
    for i in 0..ds.len() {
        let (px, label) = ds.sample(i);
        sums[label] += px.iter().map(|&b| b as f64 / 255.0).sum::<f64>() / px.len() as f64;
        counts[label] += 1;
    }
    sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_classes: 4,
            per_class: 8,
            image_size: 16,
            channels: 1,
            separability: 1.0,
            noise_std: 8.0,
            seed: 3,
        }
    }

    fn nearest_prototype_accuracy(spec: &SynthSpec, ds: &Dataset) -> f64 {
        let protos: Vec<Vec<f64>> = (0..spec.num_classes).map(|c| spec.prototype(c)).collect();
        let mut hits = 0;
        for i in 0..ds.len() {
            let (px, label) = ds.sample(i);
            let best = (0..spec.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 =
                        px.iter().zip(&protos[a]).map(|(&p, q)| (p as f64 - q) * (p as f64 - q)).sum();
                    let db: f64 =
                        px.iter().zip(&protos[b]).map(|(&p, q)| (p as f64 - q) * (p as f64 - q)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == label {
                hits += 1;
            }
        }
        hits as f64 / ds.len() as f64
    }

    #[test]
    fn generation_is_a_pure_function_of_the_spec() {
        let spec = small_spec();
        let a = generate(&spec).unwrap().to_bytes();
        let b = generate(&spec).unwrap().to_bytes();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 4;
        assert_ne!(generate(&other).unwrap().to_bytes(), a);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ds = generate(&small_spec()).unwrap();
        let bytes = ds.to_bytes();
        let reloaded = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(reloaded.to_bytes(), bytes);
        assert_eq!(reloaded, ds);
    }

    #[test]
    fn file_length_follows_the_header_formula() {
        let ds = generate(&small_spec()).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), 28 + ds.len() * (2 + ds.sample_bytes()));
    }

    #[test]
    fn nearest_prototype_oracle_agrees_with_labels() {
        let spec = SynthSpec::fixture();
        let ds = generate(&spec).unwrap();
        let acc = nearest_prototype_accuracy(&spec, &ds);
        assert!(acc >= 0.99, "nearest-prototype accuracy {acc}");
    }

    #[test]
    fn separability_monotonically_widens_prototypes_and_accuracy() {
        let mut last_dist = 0.0;
        let mut last_acc = 0.0;
        for sep in [0.25, 0.5, 0.75, 1.0] {
            let spec = SynthSpec { separability: sep, ..small_spec() };
            let p0 = spec.prototype(0);
            let p1 = spec.prototype(1);
            let dist: f64 = p0.iter().zip(&p1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(dist > last_dist, "prototype distance not increasing at sep {sep}");
            last_dist = dist;
            let acc = nearest_prototype_accuracy(&spec, &generate(&spec).unwrap());
            assert!(acc >= last_acc, "accuracy decreased at sep {sep}");
            last_acc = acc;
        }
    }

    #[test]
    fn bad_magic_version_and_truncation_give_distinct_errors() {
        let good = generate(&small_spec()).unwrap().to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad).unwrap_err(), DataError::BadMagic(_)));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bad).unwrap_err(), DataError::Version(9)));

        let err = Dataset::from_bytes(&good[..good.len() - 3]).unwrap_err();
        match err {
            DataError::Length { expected, actual } => {
                assert_eq!(expected, good.len() as u64);
                assert_eq!(actual, good.len() as u64 - 3);
            }
            other => panic!("expected Length, got {other}"),
        }

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(Dataset::from_bytes(&bad).unwrap_err(), DataError::Length { .. }));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut ds = generate(&small_spec()).unwrap();
        ds.labels[5] = 200;
        let err = Dataset::from_bytes(&ds.to_bytes()).unwrap_err();
        match err {
            DataError::LabelRange { index, label, num_classes } => {
                assert_eq!((index, label, num_classes), (5, 200, 4));
            }
            other => panic!("expected LabelRange, got {other}"),
        }
    }

    #[test]
    fn batches_cover_every_index_once_and_keep_the_short_tail() {
        let bs = batches(10, 4, 1, 0);
        assert_eq!(bs.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = bs.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(batches(10, 4, 1, 0), batches(10, 4, 1, 1));
        assert_eq!(batches(10, 4, 1, 3), batches(10, 4, 1, 3));
    }

    #[test]
    fn split_is_80_10_10_and_deterministic() {
        let ds = generate(&small_spec()).unwrap();
        let (train, val, test) = split(&ds, 0);
        assert_eq!((train.len(), val.len(), test.len()), (25, 3, 4));
        let (train2, ..) = split(&ds, 0);
        assert_eq!(train.to_bytes(), train2.to_bytes());
        let (train3, ..) = split(&ds, 1);
        assert_ne!(train.to_bytes(), train3.to_bytes());
    }
}
