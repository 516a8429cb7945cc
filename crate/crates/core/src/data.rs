//! Byte-image datasets: procedural grating classes and the `CILB` file format.
//!
//! `CILB` layout, little-endian:
//!
//! ```text
//! "CILB" | u16 version=1 | u32 C | u32 n_samples | u16 H | u16 W | u8 channels
//!        | n_samples × { u16 label | u8 split (0 train, 1 test) | H·W·channels bytes }
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::Reader;

pub const CILB_MAGIC: &[u8; 4] = b"CILB";
pub const CILB_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub label: usize,
    pub split: Split,
    /// `channels × H × W`, channel-major.
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid("dataset has no samples"));
        }
        let px = self.height * self.width * self.channels;
        let mut train = vec![0usize; self.num_classes];
        let mut test = vec![0usize; self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(Error::invalid(format!("sample {i}: label {} ≥ C={}", s.label, self.num_classes)));
            }
            if s.pixels.len() != px {
                return Err(Error::invalid(format!("sample {i}: {} pixels, expected {px}", s.pixels.len())));
            }
            match s.split {
                Split::Train => train[s.label] += 1,
                Split::Test => test[s.label] += 1,
            }
        }
        if let Some(c) = (0..self.num_classes).find(|&c| train[c] == 0 || test[c] == 0) {
            return Err(Error::invalid(format!("class {c} lacks train or test samples")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pixels mapped from `[0, 255]` to `[−1, 1]`, shape `channels×H×W`.
    pub fn image(&self, index: usize) -> Tensor {
        let s = &self.samples[index];
        let data = s.pixels.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
        Tensor::new(&[self.channels, self.height, self.width], data).expect("validated pixel count")
    }

    pub fn images(&self) -> Vec<Tensor> {
        (0..self.samples.len()).map(|i| self.image(i)).collect()
    }

    pub fn indices(&self, class: usize, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class && s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let c = u32::try_from(self.num_classes).map_err(|_| Error::invalid("too many classes"))?;
        if self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::invalid("labels must fit in u16"));
        }
        let n = u32::try_from(self.samples.len()).map_err(|_| Error::invalid("too many samples"))?;
        let h = u16::try_from(self.height).map_err(|_| Error::invalid("height exceeds u16"))?;
        let w = u16::try_from(self.width).map_err(|_| Error::invalid("width exceeds u16"))?;
        let ch = u8::try_from(self.channels).map_err(|_| Error::invalid("channels exceed u8"))?;
        let px = self.height * self.width * self.channels;
        let mut out = Vec::with_capacity(19 + self.samples.len() * (3 + px));
        out.extend_from_slice(CILB_MAGIC);
        out.extend_from_slice(&CILB_VERSION.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.push(ch);
        for s in &self.samples {
            out.extend_from_slice(&(s.label as u16).to_le_bytes());
            out.push(match s.split {
                Split::Train => 0,
                Split::Test => 1,
            });
            out.extend_from_slice(&s.pixels);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CILB_MAGIC)?;
        let version = r.u16()?;
        if version != CILB_VERSION {
            return Err(Error::Parse {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let num_classes = r.u32()? as usize;
        let n = r.u32()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let channels = r.u8()? as usize;
        let px = height * width * channels;
        let need = n
            .checked_mul(3 + px)
            .ok_or_else(|| r.fail("dimension overflow"))?;
        if need > r.remaining() {
            return Err(r.fail(format!("truncated: header promises {need} bytes, {} left", r.remaining())));
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let label_at = r.position();
            let label = r.u16()? as usize;
            if label >= num_classes {
                return Err(Error::Parse {
                    offset: label_at,
                    detail: format!("label {label} ≥ C={num_classes}"),
                });
            }
            let split = match r.u8()? {
                0 => Split::Train,
                1 => Split::Test,
                other => return Err(r.fail(format!("split tag {other}"))),
            };
            let pixels = r.take(px)?.to_vec();
            samples.push(Sample { label, split, pixels });
        }
        if r.remaining() != 0 {
            return Err(r.fail("trailing bytes after last sample"));
        }
        let ds = Dataset {
            num_classes,
            height,
            width,
            channels,
            samples,
        };
        ds.validate().map_err(|e| Error::Parse {
            offset: bytes.len(),
            detail: e.to_string(),
        })?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        crate::io::write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&crate::io::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Scales per-sample orientation, frequency and phase perturbation.
    pub jitter: f64,
    /// Std of additive pixel noise in `[−1, 1]` units.
    pub noise: f64,
    /// Classes come in families of `family_size` near-identical gratings.
    pub fine_grained: bool,
    pub family_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            train_per_class: 16,
            test_per_class: 8,
            image_size: 16,
            channels: 1,
            jitter: 1.0,
            noise: 0.3,
            fine_grained: false,
            family_size: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Grating {
    orientation: f64,
    frequency: f64,
    phase: f64,
    center: (f64, f64),
}

fn draw_grating(rng: &mut ChaCha8Rng) -> Grating {
    Grating {
        orientation: rng.random_range(0.0..std::f64::consts::PI),
        frequency: rng.random_range(1.0..4.0),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
        center: (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)),
    }
}

fn class_gratings(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Grating> {
    if !spec.fine_grained {
        return (0..spec.classes).map(|_| draw_grating(rng)).collect();
    }
    let k = spec.family_size.max(1);
    let families = spec.classes.div_ceil(k);
    let mut out = Vec::with_capacity(spec.classes);
    for _ in 0..families {
        let base = draw_grating(rng);
        for j in 0..k {
            if out.len() == spec.classes {
                break;
            }
            out.push(Grating {
                orientation: base.orientation + 0.12 * j as f64,
                frequency: base.frequency * (1.0 + 0.06 * j as f64),
                ..base
            });
        }
    }
    out
}

fn render(g: &Grating, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = spec.image_size;
    let j = spec.jitter;
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let theta = g.orientation + j * 0.15 * normal();
    let freq = g.frequency * (1.0 + j * 0.08 * normal());
    let phase = g.phase + j * 0.6 * normal();
    let (cx, cy) = (g.center.0 + j * 0.05 * normal(), g.center.1 + j * 0.05 * normal());
    let (s, c) = theta.sin_cos();
    let mut px = Vec::with_capacity(n * n * spec.channels);
    for ch in 0..spec.channels {
        let ch_phase = ch as f64 * std::f64::consts::FRAC_PI_3;
        for y in 0..n {
            for x in 0..n {
                let u = (x as f64 + 0.5) / n as f64 - cx;
                let v = (y as f64 + 0.5) / n as f64 - cy;
                let along = u * c + v * s;
                let val = (std::f64::consts::TAU * freq * along + phase + ch_phase).sin();
                let noisy = val + spec.noise * normal();
                let b = (127.5 + 127.5 * noisy.clamp(-1.0, 1.0)).round();
                px.push(b as u8);
            }
        }
    }
    px
}

/// Deterministic in `spec.seed`. Samples are ordered by class, train before
/// test.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::invalid("every class needs train and test samples"));
    }
    if spec.channels == 0 || spec.image_size == 0 {
        return Err(Error::invalid("empty image geometry"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gratings = class_gratings(spec, &mut rng);
    let mut samples = Vec::with_capacity(spec.classes * (spec.train_per_class + spec.test_per_class));
    for (label, g) in gratings.iter().enumerate() {
        for (split, count) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
            for _ in 0..count {
                samples.push(Sample {
                    label,
                    split,
                    pixels: render(g, spec, &mut rng),
                });
            }
        }
    }
    let ds = Dataset {
        num_classes: spec.classes,
        height: spec.image_size,
        width: spec.image_size,
        channels: spec.channels,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}
