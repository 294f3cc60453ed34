//! Class-conditional synthetic images and their on-disk form.
//!
//! Each class owns a grating orientation and frequency, a colour mix, and a blob
//! position. Samples draw a random grating phase, jitter the blob, and add
//! Gaussian noise, so the grating is only recognisable through products of
//! pixels while the blob gives a weak linear cue.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nas::Examples;
use crate::tensor::{Tape, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"PSVD";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub samples: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    /// Percentage of samples hashed into the validation split.
    pub val_percent: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_classes: 10,
            samples: 200,
            image_size: 32,
            channels: 3,
            noise: 0.5,
            val_percent: 20,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.samples == 0
            || !self.samples.is_multiple_of(self.num_classes)
            || self.image_size < 4
            || self.channels == 0
            || !(self.noise >= 0.0 && self.noise.is_finite())
            || self.val_percent >= 100
        {
            return Err(Error::Contract(format!(
                "dataset spec needs samples divisible by classes, image >= 4, finite noise, val% < 100: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Rendering parameters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPattern {
    pub orientation: f64,
    /// Grating cycles across the image.
    pub frequency: f64,
    pub grating_colour: Vec<f64>,
    pub blob_centre: (f64, f64),
    pub blob_colour: Vec<f64>,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Whether sample `index` belongs to the validation split.
pub fn is_val(seed: u64, index: usize, val_percent: u64) -> bool {
    splitmix64(seed ^ splitmix64(index as u64)) % 100 < val_percent
}

fn class_patterns(spec: &DatasetSpec) -> Vec<ClassPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes;
    (0..k)
        .map(|c| {
            let colour = |rng: &mut ChaCha8Rng| {
                let v: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.iter().map(|x| x / n).collect()
            };
            ClassPattern {
                orientation: PI * c as f64 / k as f64 + rng.random_range(-0.1..0.1),
                frequency: [2.0, 3.0, 4.0][c % 3] + rng.random_range(-0.25..0.25),
                grating_colour: colour(&mut rng),
                blob_centre: (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)),
                blob_colour: colour(&mut rng),
            }
        })
        .collect()
}

fn render(spec: &DatasetSpec, p: &ClassPattern, index: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let s = spec.image_size as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.8..1.2);
    let cx = (p.blob_centre.0 + rng.random_range(-0.08..0.08)) * s;
    let cy = (p.blob_centre.1 + rng.random_range(-0.08..0.08)) * s;
    let radius = 0.15 * s;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let (cos, sin) = (p.orientation.cos(), p.orientation.sin());
    let c = spec.channels;
    let n = spec.image_size;
    let mut data = Vec::with_capacity(n * n * c);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let g = amp * (2.0 * PI * p.frequency * (xf * cos + yf * sin) / s + phase).sin();
            let b = (-((xf - cx).powi(2) + (yf - cy).powi(2)) / (2.0 * radius * radius)).exp();
            for ch in 0..c {
                let e = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(g * p.grating_colour[ch] + 0.8 * b * p.blob_colour[ch] + e);
            }
        }
    }
    Tensor::new([n, n, c], data).expect("consistent image shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: DatasetSpec,
    pub class_counts: Vec<usize>,
    pub train_count: usize,
    pub val_count: usize,
    pub val_indices: Vec<usize>,
    pub data_file: String,
    pub patterns: Vec<ClassPattern>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub patterns: Vec<ClassPattern>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// One split, materialized as contiguous images and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn examples(&self) -> Result<Examples<'_>> {
        Examples::new(&self.images, &self.labels)
    }
}

impl SyntheticDataset {
    /// Renders every sample; sample `i` has label `i mod classes`.
    pub fn generate(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let patterns = class_patterns(&spec);
        let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.num_classes).collect();
        let images = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| render(&spec, &patterns[l], i))
            .collect();
        let (val, train): (Vec<usize>, Vec<usize>) =
            (0..spec.samples).partition(|&i| is_val(spec.seed, i, spec.val_percent));
        Ok(Self {
            spec,
            patterns,
            images,
            labels,
            train,
            val,
        })
    }

    fn split(&self, idx: &[usize]) -> Split {
        Split {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn train_split(&self) -> Split {
        self.split(&self.train)
    }

    pub fn val_split(&self) -> Split {
        self.split(&self.val)
    }

    pub fn all(&self) -> Split {
        Split {
            images: self.images.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut class_counts = vec![0; self.spec.num_classes];
        for &l in &self.labels {
            class_counts[l] += 1;
        }
        Manifest {
            format: "psvit-dataset".into(),
            version: DATASET_VERSION,
            spec: self.spec,
            class_counts,
            train_count: self.train.len(),
            val_count: self.val.len(),
            val_indices: self.val.clone(),
            data_file: DATA_FILE.into(),
            patterns: self.patterns.clone(),
        }
    }

    /// Binary tensor file: magic, version, count, H, W, C, then per sample a
    /// label and the row-major pixels, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [s.samples, s.image_size, s.image_size, s.channels] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for (img, &l) in self.images.iter().zip(&self.labels) {
            out.extend_from_slice(&(l as u64).to_le_bytes());
            for v in img.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes `manifest.json` and the binary file into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join(DATA_FILE))?;
        f.write_all(&self.to_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    /// Reads a dataset directory, checking the binary file against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Version {
                what: "dataset manifest",
                found: manifest.version,
                expected: DATASET_VERSION,
            });
        }
        let spec = manifest.spec;
        spec.validate()?;
        let mut bytes = Vec::new();
        fs::File::open(dir.join(&manifest.data_file))?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("dataset file lacks the PSVD magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != DATASET_VERSION {
            return Err(Error::Version {
                what: "dataset file",
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let header = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        let want = [spec.samples, spec.image_size, spec.image_size, spec.channels].map(|v| v as u64);
        if header != want {
            return Err(Error::DatasetMismatch(format!(
                "binary header {header:?} disagrees with manifest {want:?}"
            )));
        }
        let n = spec.image_size;
        let mut images = Vec::with_capacity(spec.samples);
        let mut labels = Vec::with_capacity(spec.samples);
        for _ in 0..spec.samples {
            let l = r.u64()? as usize;
            if l >= spec.num_classes {
                return Err(Error::DatasetMismatch(format!("label {l} out of range")));
            }
            labels.push(l);
            let data = (0..n * n * spec.channels)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            images.push(Tensor::new([n, n, spec.channels], data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last sample".into()));
        }
        let (val, train): (Vec<usize>, Vec<usize>) =
            (0..spec.samples).partition(|&i| is_val(spec.seed, i, spec.val_percent));
        if val != manifest.val_indices {
            return Err(Error::DatasetMismatch("validation indices disagree with the split hash".into()));
        }
        Ok(Self {
            spec,
            patterns: manifest.patterns,
            images,
            labels,
            train,
            val,
        })
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Accuracy on `eval` of a softmax-regression classifier trained on raw pixels
/// of `train` by full-batch gradient descent.
pub fn linear_baseline(train: &Split, eval: &Split, classes: usize, steps: usize, lr: f64) -> Result<f64> {
    let features = train.images[0].numel();
    let flat = |s: &Split| -> Result<Tensor> {
        let data = s.images.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new([s.images.len(), features], data)
    };
    let (xt, xe) = (flat(train)?, flat(eval)?);
    let mut w = Tensor::zeros([features, classes]);
    let mut b = Tensor::zeros([classes]);
    for _ in 0..steps {
        let tape = Tape::new();
        let (wv, bv) = (tape.param(w.clone()), tape.param(b.clone()));
        let loss = tape.constant(xt.clone()).linear(wv, bv)?.cross_entropy(&train.labels, 0.0)?;
        loss.backward()?;
        let (gw, gb) = (wv.grad().expect("reached"), bv.grad().expect("reached"));
        for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= lr * g;
        }
        for (p, g) in b.data_mut().iter_mut().zip(gb.data()) {
            *p -= lr * g;
        }
    }
    let tape = Tape::new();
    let logits = tape
        .constant(xe)
        .linear(tape.constant(w), tape.constant(b))?
        .value();
    let hits = logits
        .data()
        .chunks(classes)
        .zip(&eval.labels)
        .filter(|(row, &l)| crate::nas::argmax(row) == l)
        .count();
    Ok(hits as f64 / eval.labels.len() as f64)
}
