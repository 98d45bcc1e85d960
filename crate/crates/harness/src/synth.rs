//! Class-conditional multimodal images.
//!
//! Sample `i` has label `i mod K`. Even modalities render the class's
//! oriented grating, odd modalities its Gaussian blob; each modality applies
//! its own contrast and additive Gaussian noise. Every sample draws from its
//! own ChaCha stream, so any subset regenerates identically.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use hypca::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 8] = b"HYPCADS\0";
const VERSION: u32 = 1;

/// Generative pattern of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPattern {
    /// Grating orientation in radians.
    pub angle: f64,
    /// Grating frequency in cycles per image side.
    pub frequency: f64,
    pub phase: f64,
    /// Blob centre as fractions of the image side.
    pub blob_center: [f64; 2],
    /// Blob standard deviation as a fraction of the image side.
    pub blob_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub modalities: usize,
    pub image_size: usize,
    /// Channels per modality image.
    pub channels: usize,
    /// Additive noise standard deviation per modality.
    pub noise: Vec<f64>,
    /// Pattern amplitude per modality.
    pub contrast: Vec<f64>,
    /// One entry per class; `None` derives them from the class index.
    pub patterns: Option<Vec<ClassPattern>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            samples: 1000,
            classes: 4,
            modalities: 2,
            image_size: 32,
            channels: 3,
            noise: vec![1.0, 1.0],
            contrast: vec![1.0, 0.8],
            patterns: None,
        }
    }
}

/// Default patterns: orientations spread over a half turn, frequencies
/// rising with the class index, blobs placed on a circle.
pub fn default_patterns(classes: usize) -> Vec<ClassPattern> {
    (0..classes)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / classes as f64;
            ClassPattern {
                angle: PI * k as f64 / classes as f64,
                frequency: 2.0 + k as f64,
                phase: 0.0,
                blob_center: [0.5 + 0.28 * t.cos(), 0.5 + 0.28 * t.sin()],
                blob_width: 0.12,
            }
        })
        .collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Spec(msg));
        if self.classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.modalities < 2 {
            return bad("at least two modalities are required".into());
        }
        if self.samples < 10 {
            return bad("at least ten samples are needed for an 80/10/10 split".into());
        }
        if self.image_size == 0 || self.channels == 0 {
            return bad("image size and channels must be positive".into());
        }
        if self.noise.len() != self.modalities || self.contrast.len() != self.modalities {
            return bad("noise and contrast need one entry per modality".into());
        }
        if self.noise.iter().chain(&self.contrast).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise and contrast must be finite and non-negative".into());
        }
        if let Some(p) = &self.patterns {
            if p.len() != self.classes {
                return bad(format!("{} patterns for {} classes", p.len(), self.classes));
            }
            if p.iter().any(|c| !(c.blob_width > 0.0)) {
                return bad("blob widths must be positive".into());
            }
        }
        Ok(())
    }

    pub fn resolved_patterns(&self) -> Vec<ClassPattern> {
        self.patterns.clone().unwrap_or_else(|| default_patterns(self.classes))
    }

    /// `(train, val, test)` index ranges: the first 80%, the next 10%, the rest.
    pub fn split(&self) -> (Range<usize>, Range<usize>, Range<usize>) {
        let n = self.samples;
        let a = n * 8 / 10;
        let b = n * 9 / 10;
        (0..a, a..b, b..n)
    }
}

/// Noise-free image of `pattern` for modality `modality`, channel-major.
fn render(spec: &SynthSpec, pattern: &ClassPattern, modality: usize) -> Vec<f64> {
    let s = spec.image_size;
    let contrast = spec.contrast[modality];
    let (sin, cos) = pattern.angle.sin_cos();
    let mut plane = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (u, v) = ((x as f64 + 0.5) / s as f64, (y as f64 + 0.5) / s as f64);
            plane[y * s + x] = if modality % 2 == 0 {
                (2.0 * PI * pattern.frequency * (u * cos + v * sin) + pattern.phase).cos()
            } else {
                let (dx, dy) = (u - pattern.blob_center[0], v - pattern.blob_center[1]);
                let w2 = pattern.blob_width * pattern.blob_width;
                2.0 * (-(dx * dx + dy * dy) / (2.0 * w2)).exp() - 0.5
            };
        }
    }
    (0..spec.channels)
        .flat_map(|c| {
            let gain = contrast * (1.0 - 0.25 * c as f64 / spec.channels as f64);
            plane.iter().map(move |v| gain * v)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SynthSpec,
    pub labels: Vec<usize>,
    /// Per modality, `samples × channels × size × size` values.
    pub images: Vec<Vec<f64>>,
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let patterns = spec.resolved_patterns();
    let templates: Vec<Vec<Vec<f64>>> = patterns
        .iter()
        .map(|p| (0..spec.modalities).map(|j| render(spec, p, j)).collect())
        .collect();
    let per = spec.channels * spec.image_size * spec.image_size;
    let mut images = vec![Vec::with_capacity(spec.samples * per); spec.modalities];
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    for (i, &k) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        for (j, out) in images.iter_mut().enumerate() {
            let sigma = spec.noise[j];
            let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
            out.extend(templates[k][j].iter().map(|&t| {
                if sigma == 0.0 {
                    t
                } else {
                    t + normal.sample(&mut rng)
                }
            }));
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        labels,
        images,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.spec.channels * self.spec.image_size * self.spec.image_size
    }

    /// Raw values of sample `i` in modality `j`.
    pub fn sample(&self, i: usize, j: usize) -> &[f64] {
        let per = self.sample_len();
        &self.images[j][i * per..(i + 1) * per]
    }

    /// One `B × C × S × S` tensor per modality for the given sample indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Vec<Tensor<T>> {
        let s = self.spec.image_size;
        let shape = [indices.len(), self.spec.channels, s, s];
        (0..self.spec.modalities)
            .map(|j| {
                let data = indices
                    .iter()
                    .flat_map(|&i| self.sample(i, j).iter().map(|&v| T::of(v)))
                    .collect();
                Tensor::new(shape, data).expect("batch shape matches data")
            })
            .collect()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Little-endian binary container: magic, version, spec as JSON, labels,
    /// then each modality's values.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let spec = serde_json::to_vec(&self.spec)?;
        w.write_all(&(spec.len() as u64).to_le_bytes())?;
        w.write_all(&spec)?;
        for &l in &self.labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
        for m in &self.images {
            for v in m {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| HarnessError::Spec(format!("dataset file: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b)?;
        if u32::from_le_bytes(u32b) != VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut u64b)?;
        let mut spec = vec![0u8; u64::from_le_bytes(u64b) as usize];
        r.read_exact(&mut spec)?;
        let spec: SynthSpec = serde_json::from_slice(&spec)?;
        spec.validate()?;
        let mut labels = Vec::with_capacity(spec.samples);
        for _ in 0..spec.samples {
            r.read_exact(&mut u32b)?;
            labels.push(u32::from_le_bytes(u32b) as usize);
        }
        let per = spec.samples * spec.channels * spec.image_size * spec.image_size;
        let mut images = Vec::with_capacity(spec.modalities);
        for _ in 0..spec.modalities {
            let mut m = Vec::with_capacity(per);
            for _ in 0..per {
                r.read_exact(&mut u64b)?;
                m.push(f64::from_le_bytes(u64b));
            }
            images.push(m);
        }
        Ok(Self { spec, labels, images })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
