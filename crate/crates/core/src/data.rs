//! Datasets: CIFAR-10 binary ingestion, a synthetic low-frequency template
//! task, flip/crop augmentation and seeded batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
pub const CROP_PADDING: usize = 4;

/// Per-channel affine map from `[0,1]` pixels to model inputs:
/// `x = (pixel − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Normalization { mean: vec![0.4914, 0.4822, 0.4465], std: vec![0.2470, 0.2435, 0.2616] }
    }

    pub fn normalize(&self, channel: usize, pixel: f64) -> f64 {
        (pixel - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, value: f64) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::cifar10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Immutable labelled image set, stored normalized as `[N, C, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub num_classes: usize,
    pub split: Split,
    pub norm: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_len();
        &self.images[i * d..(i + 1) * d]
    }

    /// Gathers the given samples into an image tensor and label list.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.side, self.side], data).expect("non-empty batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples.
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Pixel values in `[0,1]` space.
    pub fn denormalized(&self) -> Vec<f64> {
        let plane = self.side * self.side;
        self.images.iter().enumerate().map(|(i, &v)| self.norm.denormalize((i / plane) % self.channels, v)).collect()
    }

    /// Serializes to CIFAR-10 binary records, quantizing pixels to bytes.
    pub fn to_cifar_bytes(&self) -> Result<Vec<u8>> {
        if self.channels != 3 || self.side != CIFAR_SIDE {
            return Err(Error::Input(format!(
                "CIFAR layout needs 3x32x32 images, dataset has {}x{}x{}",
                self.channels, self.side, self.side
            )));
        }
        let pixels = self.denormalized();
        let mut out = Vec::with_capacity(self.len() * CIFAR_RECORD);
        for (i, &label) in self.labels.iter().enumerate() {
            let label = u8::try_from(label)
                .ok()
                .filter(|&l| l <= 9)
                .ok_or_else(|| Error::Input(format!("label {label} does not fit the CIFAR-10 format")))?;
            out.push(label);
            out.extend(pixels[i * 3072..(i + 1) * 3072].iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        Ok(out)
    }
}

/// Parses concatenated 3073-byte CIFAR-10 records: one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32×32.
pub fn parse_cifar_records(bytes: &[u8], path: &Path, split: Split, norm: &Normalization) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(path, format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(path, format!("record {r} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        for (j, &b) in rec[1..].iter().enumerate() {
            images.push(norm.normalize(j / 1024, f64::from(b) / 255.0));
        }
    }
    Ok(Dataset { images, labels, channels: 3, side: CIFAR_SIDE, num_classes: 10, split, norm: norm.clone() })
}

pub fn read_cifar_file(path: &Path, split: Split, norm: &Normalization) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, path, split, norm)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, norm: &Normalization) -> Result<(Dataset, Dataset)> {
    let mut train = read_cifar_file(&dir.join(CIFAR_TRAIN_FILES[0]), Split::Train, norm)?;
    for name in &CIFAR_TRAIN_FILES[1..] {
        let part = read_cifar_file(&dir.join(name), Split::Train, norm)?;
        train.images.extend(part.images);
        train.labels.extend(part.labels);
    }
    let test = read_cifar_file(&dir.join(CIFAR_TEST_FILE), Split::Test, norm)?;
    Ok((train, test))
}

/// Synthetic classification task: each class owns a fixed random
/// low-frequency template, and every sample is its template plus
/// i.i.d. Gaussian noise (all in normalized units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Seeds the class templates; the data seed only drives the noise.
    pub frequency_seed: u64,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub noise_std: f64,
    /// Root-mean-square of every class template.
    pub template_rms: f64,
    /// Spatial frequencies `0..=max_frequency` along each axis.
    pub max_frequency: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_classes: 10,
            image_size: 16,
            channels: 3,
            frequency_seed: 0,
            samples_per_class: 50,
            test_samples_per_class: 20,
            noise_std: 0.5,
            template_rms: 0.3,
            max_frequency: 2,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config(format!("synthetic task needs >= 2 classes and non-empty images, got {self:?}")));
        }
        if self.samples_per_class == 0 || self.test_samples_per_class == 0 {
            return Err(Error::Config("synthetic task needs samples in both splits".into()));
        }
        if !(self.noise_std >= 0.0 && self.template_rms >= 0.0) {
            return Err(Error::Config("noise_std and template_rms must be >= 0".into()));
        }
        Ok(())
    }

    /// Synthetic data is generated directly in normalized units; this
    /// mapping (`pixel = 0.5 + 0.25·x`) is used only for byte export.
    pub fn normalization(&self) -> Normalization {
        Normalization { mean: vec![0.5; self.channels], std: vec![0.25; self.channels] }
    }

    pub fn templates(&self) -> Vec<Vec<f64>> {
        let mut rng = seed::stream(self.frequency_seed, "synthetic-templates");
        let s = self.image_size;
        let freqs = self.max_frequency + 1;
        (0..self.num_classes)
            .map(|_| {
                let mut t = vec![0.0; self.channels * s * s];
                for ch in 0..self.channels {
                    for fy in 0..freqs {
                        for fx in 0..freqs {
                            let amp: f64 = StandardNormal.sample(&mut rng);
                            let phase = rng.random_range(0.0..2.0 * PI);
                            for y in 0..s {
                                for x in 0..s {
                                    let arg = 2.0 * PI * (fx * x + fy * y) as f64 / s as f64 + phase;
                                    t[(ch * s + y) * s + x] += amp * arg.cos();
                                }
                            }
                        }
                    }
                }
                let rms = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
                if rms > 0.0 {
                    t.iter_mut().for_each(|v| *v *= self.template_rms / rms);
                }
                t
            })
            .collect()
    }
}

/// Balanced train/test sets for `spec`; identical for identical `(spec, seed)`.
pub fn make_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let templates = spec.templates();
    let data_seed = seed::derive_seed(seed, seed::DATA);
    let build = |split: Split, per_class: usize, tag: &str| {
        let mut rng = seed::stream(data_seed, tag);
        let mut images = Vec::with_capacity(per_class * spec.num_classes * templates[0].len());
        let mut labels = Vec::with_capacity(per_class * spec.num_classes);
        // interleaved classes: 0, 1, .., C-1, 0, 1, ..
        for _ in 0..per_class {
            for (c, t) in templates.iter().enumerate() {
                labels.push(c);
                images.extend(t.iter().map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + spec.noise_std * z
                }));
            }
        }
        Dataset {
            images,
            labels,
            channels: spec.channels,
            side: spec.image_size,
            num_classes: spec.num_classes,
            split,
            norm: spec.normalization(),
        }
    };
    Ok((build(Split::Train, spec.samples_per_class, "train"), build(Split::Test, spec.test_samples_per_class, "test")))
}

/// Mirrors an image `[C, S, S]` left-right when `flip`, then takes the
/// `S×S` window at `(dy, dx)` of its zero-padded (by [`CROP_PADDING`]) copy.
pub fn flip_and_crop(img: &[f64], channels: usize, side: usize, flip: bool, dy: usize, dx: usize) -> Vec<f64> {
    let pad = CROP_PADDING as isize;
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                let sy = y as isize + dy as isize - pad;
                let sx = x as isize + dx as isize - pad;
                if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize {
                    continue;
                }
                let sx = if flip { side - 1 - sx as usize } else { sx as usize };
                out[(c * side + y) * side + x] = img[(c * side + sy as usize) * side + sx];
            }
        }
    }
    out
}

/// In-place random horizontal flip (p = 0.5) and padded random crop of
/// every image in a `[B, C, S, S]` batch.
pub fn augment<R: Rng>(batch: &mut Tensor, rng: &mut R) {
    let s = batch.shape().to_vec();
    let (c, side) = (s[1], s[2]);
    let d = c * side * side;
    for img in batch.data_mut().chunks_mut(d) {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(0..=2 * CROP_PADDING);
        let dx = rng.random_range(0..=2 * CROP_PADDING);
        let out = flip_and_crop(img, c, side, flip, dy, dx);
        img.copy_from_slice(&out);
    }
}

/// Sample order for one epoch, derived from `(shuffle_seed, epoch)`.
pub fn epoch_order(len: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = seed::stream(shuffle_seed, &format!("epoch-{epoch}"));
    order.shuffle(&mut rng);
    order
}

/// Index batches for one epoch; the last batch may be partial.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    Ok(epoch_order(len, shuffle_seed, epoch).chunks(batch_size).map(<[usize]>::to_vec).collect())
}
