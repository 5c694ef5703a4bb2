//! Synthetic token-grid classification data and the `SBPD` feature file format.
//!
//! Features file: magic `SBPD`, then little-endian `u32` version, sample
//! count and the per-sample dims `T, H, W, C`, then `count·T·H·W·C`
//! little-endian `f32` values. Labels live in a separate text file, one
//! integer per line.

use crate::engine::{Batch, Target};
use crate::error::{config_err, Error, Result};
use crate::tensor::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"SBPD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Class-dependent channel offsets and smooth spatial patterns plus smooth noise.
    Synthetic {
        n_classes: usize,
        /// `[H, W]` or `[T, H, W]`
        grid: Vec<usize>,
        channels: usize,
        samples: usize,
        noise: f64,
        /// Scale of the class-specific spatial pattern.
        #[serde(default = "default_pattern")]
        pattern: f64,
        seed: u64,
    },
    File {
        features: PathBuf,
        labels: PathBuf,
    },
}

fn default_pattern() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `T, H, W, C`
    pub dims: [usize; 4],
    /// `count × (T·H·W) × C`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    /// Token grid without a unit time axis.
    pub fn grid(&self) -> Result<Shape> {
        let [t, h, w, _] = self.dims;
        Shape::new(if t == 1 { vec![h, w] } else { vec![t, h, w] })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let (n, c) = (self.tokens(), self.channels());
        let mut data = Vec::with_capacity(idx.len() * n * c);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.features.data()[i * n * c..(i + 1) * n * c]);
        }
        Ok(Batch { x: Tensor::new([idx.len(), n, c], data)?, target: Target::Labels(idx.iter().map(|&i| self.labels[i]).collect()) })
    }

    /// Consecutive batches of a seeded permutation (the last partial batch is dropped).
    pub fn epoch_batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        if batch_size == 0 || batch_size > self.len() {
            return Err(config_err!("batch size {batch_size} for {} samples", self.len()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks_exact(batch_size).map(|c| self.batch(c)).collect()
    }
}

/// 3×3 (per frame) box blur with edge clamping, applied per channel.
fn blur(field: &mut [f64], dims: [usize; 4]) {
    let [t, h, w, c] = dims;
    let src = field.to_vec();
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for yy in y.saturating_sub(1)..(y + 2).min(h) {
                        for xx in x.saturating_sub(1)..(x + 2).min(w) {
                            acc += src[((ti * h + yy) * w + xx) * c + ch];
                            cnt += 1.0;
                        }
                    }
                    field[((ti * h + y) * w + x) * c + ch] = acc / cnt;
                }
            }
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let DatasetSpec::Synthetic { n_classes, grid, channels, samples, noise, pattern, seed } = spec else {
        return Err(config_err!("generate_dataset needs a synthetic dataset spec"));
    };
    let (k, c, count) = (*n_classes, *channels, *samples);
    if k < 2 || c == 0 || count == 0 {
        return Err(config_err!("synthetic data needs ≥ 2 classes, ≥ 1 channel and ≥ 1 sample"));
    }
    if !(*noise >= 0.0 && noise.is_finite() && pattern.is_finite()) {
        return Err(config_err!("noise must be finite and nonnegative"));
    }
    let dims = match grid.as_slice() {
        &[h, w] if h > 0 && w > 0 => [1, h, w, c],
        &[t, h, w] if t > 0 && h > 0 && w > 0 => [t, h, w, c],
        other => return Err(config_err!("grid must be [H, W] or [T, H, W] with positive entries, got {other:?}")),
    };
    let per = dims.iter().product::<usize>();
    let std = Normal::new(0.0, 1.0).map_err(|e| config_err!("{e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
    // class offsets: unit vectors in channel space
    let offsets: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..c).map(|_| std.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let patterns: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut f: Vec<f64> = (0..per).map(|_| std.sample(&mut rng)).collect();
            blur(&mut f, dims);
            blur(&mut f, dims);
            f.iter().map(|v| v * pattern).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..count).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(count * per);
    for &label in &labels {
        let mut eps: Vec<f64> = (0..per).map(|_| std.sample(&mut rng)).collect();
        blur(&mut eps, dims);
        for (i, e) in eps.iter().enumerate() {
            let v = offsets[label][i % c] + patterns[label][i] + noise * e;
            // stored at f32 precision, as in the file format
            features.push(v as f32 as f64);
        }
    }
    Ok(Dataset { dims, features: Tensor::new([count, per / c, c], features)?, labels, n_classes: k })
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic { .. } => generate_dataset(spec),
        DatasetSpec::File { features, labels } => read_dataset(features, labels),
    }
}

pub fn write_features<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    w.write_all(MAGIC)?;
    let header = [FORMAT_VERSION, ds.len() as u32, ds.dims[0] as u32, ds.dims[1] as u32, ds.dims[2] as u32, ds.dims[3] as u32];
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    for &v in ds.features.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_labels<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    for l in &ds.labels {
        writeln!(w, "{l}")?;
    }
    Ok(())
}

pub fn write_dataset(ds: &Dataset, features: &Path, labels: &Path) -> Result<()> {
    write_features(std::io::BufWriter::new(std::fs::File::create(features)?), ds)?;
    write_labels(std::io::BufWriter::new(std::fs::File::create(labels)?), ds)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).ok_or_else(|| config_err!("feature file truncated in header"))
}

pub fn read_features<R: Read>(mut r: R) -> Result<([usize; 4], Vec<f64>, usize)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 28 || &bytes[..4] != MAGIC {
        return Err(config_err!("not an SBPD feature file"));
    }
    let version = read_u32(&bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(config_err!("unsupported SBPD version {version}"));
    }
    let count = read_u32(&bytes, 8)? as usize;
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = read_u32(&bytes, 12 + 4 * i)? as usize;
    }
    if dims.contains(&0) {
        return Err(config_err!("SBPD dims {dims:?} contain a zero"));
    }
    let n = count * dims.iter().product::<usize>();
    let body = &bytes[28..];
    if body.len() != 4 * n {
        return Err(config_err!("SBPD body holds {} bytes, header implies {}", body.len(), 4 * n));
    }
    let values = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    Ok((dims, values, count))
}

pub fn read_dataset(features: &Path, labels: &Path) -> Result<Dataset> {
    let (dims, values, count) = read_features(std::fs::File::open(features)?)?;
    let text = std::fs::read_to_string(labels)?;
    let labels: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|_| config_err!("labels line {}: {l:?} is not a class index", i + 1)))
        .collect::<Result<_>>()?;
    if labels.len() != count {
        return Err(config_err!("{} labels for {count} samples", labels.len()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let tokens = dims[0] * dims[1] * dims[2];
    Ok(Dataset { dims, features: Tensor::new([count, tokens, dims[3]], values)?, labels, n_classes })
}
