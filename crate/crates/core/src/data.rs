//! Synthetic classification sets and a CIFAR binary loader.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One `(1, c, h, w)` image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    /// Class-specific constant colour per channel plus pixel noise.
    GaussianBlobs,
    /// Sinusoidal stripes whose orientation and frequency depend on the class.
    StripedTextures,
}

impl Generator {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian-blobs" => Some(Generator::GaussianBlobs),
            "striped-textures" => Some(Generator::StripedTextures),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub resolution: (usize, usize),
    pub channels: usize,
    pub per_class: usize,
    pub generator: Generator,
    pub seed: u64,
    /// Distance between neighbouring class means, in noise standard deviations.
    pub separation: f64,
}

impl SyntheticSpec {
    pub fn two_class(resolution: usize, per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes: 2,
            resolution: (resolution, resolution),
            channels: 3,
            per_class,
            generator: Generator::GaussianBlobs,
            seed,
            separation: 3.0,
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(samples: &[Sample]) -> Self {
        let c = samples.first().map_or(0, |s| s.image.shape()[1]);
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for s in samples {
            let [_, _, h, w] = s.image.shape();
            for ch in 0..c {
                for v in &s.image.data()[ch * h * w..(ch + 1) * h * w] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += h * w;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = q / n - m * m;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, samples: &mut [Sample]) {
        for s in samples {
            let [_, c, h, w] = s.image.shape();
            let data = s.image.data_mut();
            for ch in 0..c {
                for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
    }
}

/// Deterministic dataset, labels balanced and interleaved, normalized per channel.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    let mut out = generate_raw(spec)?;
    Normalizer::fit(&out).apply(&mut out);
    Ok(out)
}

/// Training set of `spec.per_class` and evaluation set of `eval_per_class`
/// samples per class, both normalized with the training statistics.
pub fn generate_split(
    spec: &SyntheticSpec,
    eval_per_class: usize,
) -> Result<(Vec<Sample>, Vec<Sample>, Normalizer)> {
    let mut all = generate_raw(&SyntheticSpec {
        per_class: spec.per_class + eval_per_class,
        ..spec.clone()
    })?;
    let mut eval = all.split_off(spec.per_class * spec.classes);
    let norm = Normalizer::fit(&all);
    norm.apply(&mut all);
    norm.apply(&mut eval);
    Ok((all, eval, norm))
}

/// As [`generate`] without normalization.
pub fn generate_raw(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.classes < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    let (h, w) = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    // Class means sit on a line along a random unit direction in channel space,
    // `separation` apart.
    let dir: Vec<f64> = {
        let v: Vec<f64> = (0..spec.channels).map(|_| noise.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    };
    let phases: Vec<f64> = (0..spec.classes)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for _ in 0..spec.per_class {
        for label in 0..spec.classes {
            let image = match spec.generator {
                Generator::GaussianBlobs => {
                    let offset = label as f64 * spec.separation;
                    Tensor::from_fn([1, spec.channels, h, w], |[_, c, _, _]| {
                        offset * dir[c] + noise.sample(&mut rng)
                    })
                }
                Generator::StripedTextures => {
                    let freq = 1.0 + label as f64;
                    let vertical = label % 2 == 0;
                    Tensor::from_fn([1, spec.channels, h, w], |[_, _, y, x]| {
                        let t = if vertical { x } else { y } as f64 / w.max(1) as f64;
                        (std::f64::consts::TAU * freq * t + phases[label]).sin()
                            + 0.3 * noise.sample(&mut rng)
                    })
                }
            };
            out.push(Sample { image, label });
        }
    }
    Ok(out)
}

/// Seeded permutation of sample indices.
pub fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Records of one label byte followed by 3072 channel-planar pixel bytes,
/// scaled to `[0, 1]` (not normalized).
pub fn parse_cifar(bytes: &[u8]) -> Result<Vec<Sample>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Format(format!(
            "CIFAR data is {} bytes, not a multiple of {CIFAR_RECORD}; record {whole} starting at byte offset {} is incomplete",
            bytes.len(),
            whole * CIFAR_RECORD
        )));
    }
    Ok(bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| Sample {
            label: rec[0] as usize,
            image: Tensor::new(
                [1, 3, 32, 32],
                rec[1..].iter().map(|&b| b as f64 / 255.0).collect(),
            )
            .expect("3072 pixels"),
        })
        .collect())
}

/// Loads and normalizes with statistics from this file.
pub fn load_cifar_binary(path: &Path) -> Result<Vec<Sample>> {
    let mut samples = parse_cifar(&std::fs::read(path)?)?;
    Normalizer::fit(&samples).apply(&mut samples);
    Ok(samples)
}

/// Stacks samples into one `(n, c, h, w)` batch.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>)> {
    let Some(first) = samples.first() else {
        return Err(Error::Argument("empty batch".into()));
    };
    let [_, c, h, w] = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.image.shape() != [1, c, h, w] {
            return Err(Error::dim(
                "stack",
                format!(
                    "sample {:?} in batch of {:?}",
                    s.image.shape(),
                    [1, c, h, w]
                ),
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    Ok((
        Tensor::new([samples.len(), c, h, w], data)?,
        samples.iter().map(|s| s.label).collect(),
    ))
}
