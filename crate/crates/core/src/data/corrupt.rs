//! Deterministic image corruptions with fixed five-level severity schedules.
//!
//! | kind             | parameter                       | severities 1..5                  |
//! |------------------|---------------------------------|----------------------------------|
//! | `gaussian_noise` | noise std                       | 0.04, 0.08, 0.12, 0.18, 0.26     |
//! | `blur`           | Gaussian kernel std (pixels)    | 0.5, 0.8, 1.1, 1.5, 2.0          |
//! | `contrast`       | contrast factor                 | 0.75, 0.6, 0.45, 0.3, 0.2        |
//! | `fog`            | fog strength                    | 0.2, 0.3, 0.45, 0.6, 0.8         |
//! | `pixelate`       | downsampled side / side         | 0.75, 0.6, 0.5, 0.4, 0.3         |
//! | `jpeg`           | JPEG quality (8x8 DCT)          | 40, 25, 15, 10, 7                |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Image, LabeledExample};
use crate::codec::derive_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
    Fog,
    Pixelate,
    Jpeg,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Fog,
        CorruptionKind::Pixelate,
        CorruptionKind::Jpeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Jpeg => "jpeg",
        }
    }

    /// The documented parameter for a severity in `1..=5`.
    pub fn parameter(self, severity: u8) -> Result<f64> {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::Blur => [0.5, 0.8, 1.1, 1.5, 2.0],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.2],
            CorruptionKind::Fog => [0.2, 0.3, 0.45, 0.6, 0.8],
            CorruptionKind::Pixelate => [0.75, 0.6, 0.5, 0.4, 0.3],
            CorruptionKind::Jpeg => [40.0, 25.0, 15.0, 10.0, 7.0],
        };
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        Ok(table[severity as usize - 1])
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" | "noise" => Ok(CorruptionKind::GaussianNoise),
            "blur" | "gaussian_blur" => Ok(CorruptionKind::Blur),
            "contrast" => Ok(CorruptionKind::Contrast),
            "fog" => Ok(CorruptionKind::Fog),
            "pixelate" => Ok(CorruptionKind::Pixelate),
            "jpeg" | "jpeg-like" | "jpeg_like" => Ok(CorruptionKind::Jpeg),
            other => Err(Error::UnknownCorruption(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        kind.parameter(severity)?;
        Ok(Self { kind, severity, seed })
    }
}

/// Applies a corruption. Output has the input's shape and lies in `[0, 1]`.
pub fn corrupt(image: &Image, spec: &CorruptionSpec) -> Result<Image> {
    if !image.in_unit_range() {
        return Err(Error::InvalidArgument("image values outside [0, 1]".into()));
    }
    let p = spec.kind.parameter(spec.severity)?;
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => return add_gaussian_noise(image, p, spec.seed),
        CorruptionKind::Blur => gaussian_blur(image, p),
        CorruptionKind::Contrast => contrast(image, p),
        CorruptionKind::Fog => fog(image, p, spec.seed),
        CorruptionKind::Pixelate => pixelate(image, p),
        CorruptionKind::Jpeg => jpeg(image, p),
    };
    Image::from_f64(image.shape(), &out)
}

/// Additive i.i.d. Gaussian noise followed by clipping. `sigma = 0` is the identity.
pub fn add_gaussian_noise(image: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise std {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid std");
    let out: Vec<f64> = image.data.iter().map(|&v| v as f64 + normal.sample(&mut rng)).collect();
    Image::from_f64(image.shape(), &out)
}

fn gaussian_blur(image: &Image, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (c, h, w) = (image.channels, image.height as isize, image.width as isize);
    let src = image.to_f64();
    // separable, edge-replicated
    let clampi = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = clampi(x + k as isize - radius, w);
                    acc += kv * src[(ch * h as usize + y as usize) * w as usize + xx];
                }
                tmp[(ch * h as usize + y as usize) * w as usize + x as usize] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = clampi(y + k as isize - radius, h);
                    acc += kv * tmp[(ch * h as usize + yy) * w as usize + x as usize];
                }
                out[(ch * h as usize + y as usize) * w as usize + x as usize] = acc;
            }
        }
    }
    out
}

fn contrast(image: &Image, factor: f64) -> Vec<f64> {
    let plane = image.height * image.width;
    let mut out = image.to_f64();
    for ch in out.chunks_mut(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        for v in ch {
            *v = (*v - mean) * factor + mean;
        }
    }
    out
}

/// Low-frequency random field in roughly `[0, 1]` built from a few random
/// sinusoids whose amplitude decays with frequency.
fn fog_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0; h * w];
    let mut total_amp = 0.0;
    for octave in 1..=4 {
        let amp = 1.0 / octave as f64;
        for _ in 0..2 {
            let fx = rng.random_range(0.5..1.5) * octave as f64 / w as f64;
            let fy = rng.random_range(0.5..1.5) * octave as f64 / h as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for y in 0..h {
                for x in 0..w {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase;
                    field[y * w + x] += amp * arg.sin();
                }
            }
            total_amp += amp;
        }
    }
    field.iter().map(|v| 0.5 + 0.5 * v / total_amp).collect()
}

fn fog(image: &Image, strength: f64, seed: u64) -> Vec<f64> {
    let plane = image.height * image.width;
    let field = fog_field(image.height, image.width, seed);
    let max = image.data.iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
    let mut out = image.to_f64();
    for ch in out.chunks_mut(plane) {
        for (v, f) in ch.iter_mut().zip(&field) {
            *v = (*v + strength * f) * max / (max + strength);
        }
    }
    out
}

/// Area-averaging resize of one plane.
fn resize_area(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let overlap = |a0: f64, a1: f64, i: usize| (a1.min(i as f64 + 1.0) - a0.max(i as f64)).max(0.0);
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
        for ox in 0..ow {
            let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
            let mut acc = 0.0;
            for y in y0.floor() as usize..(y1.ceil() as usize).min(h) {
                let wy = overlap(y0, y1, y);
                for x in x0.floor() as usize..(x1.ceil() as usize).min(w) {
                    acc += wy * overlap(x0, x1, x) * src[y * w + x];
                }
            }
            out[oy * ow + ox] = acc / (sy * sx);
        }
    }
    out
}

fn pixelate(image: &Image, ratio: f64) -> Vec<f64> {
    let (h, w) = (image.height, image.width);
    let oh = ((h as f64 * ratio).round() as usize).max(1);
    let ow = ((w as f64 * ratio).round() as usize).max(1);
    let src = image.to_f64();
    let mut out = Vec::with_capacity(src.len());
    for ch in src.chunks(h * w) {
        let small = resize_area(ch, h, w, oh, ow);
        for y in 0..h {
            let sy = (y * oh / h).min(oh - 1);
            for x in 0..w {
                let sx = (x * ow / w).min(ow - 1);
                out.push(small[sy * ow + sx]);
            }
        }
    }
    out
}

const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Per-channel 8x8 DCT quantisation with the standard luminance table scaled
/// by quality; blocks at the border are edge-padded.
fn jpeg(image: &Image, quality: f64) -> Vec<f64> {
    let scale = if quality < 50.0 { 5000.0 / quality } else { 200.0 - 2.0 * quality };
    let table: Vec<f64> = JPEG_LUMA.iter().map(|q| ((q * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0)).collect();
    let basis: Vec<f64> = (0..64)
        .map(|i| {
            let (u, x) = (i / 8, i % 8);
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            cu * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()
        })
        .collect();
    let (h, w) = (image.height, image.width);
    let src = image.to_f64();
    let mut out = vec![0.0; src.len()];
    for (ci, ch) in src.chunks(h * w).enumerate() {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0f64; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (yy, xx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * 8 + x] = ch[yy * w + xx] * 255.0 - 128.0;
                    }
                }
                let mut coef = [0.0f64; 64];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                acc += basis[u * 8 + y] * basis[v * 8 + x] * block[y * 8 + x];
                            }
                        }
                        let q = table[u * 8 + v];
                        coef[u * 8 + v] = (acc / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += basis[u * 8 + y] * basis[v * 8 + x] * coef[u * 8 + v];
                            }
                        }
                        out[ci * h * w + (by + y) * w + bx + x] = (acc + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    out
}

/// Corrupts every example; per-sample seeds are derived from `(seed, id, kind, severity)`.
pub fn corrupt_dataset(ds: &Dataset, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Dataset> {
    let examples = ds
        .examples
        .iter()
        .map(|e| {
            let s = derive_seed(&[seed, e.id, kind as u64, severity as u64]);
            Ok(LabeledExample {
                image: corrupt(&e.image, &CorruptionSpec::new(kind, severity, s)?)?,
                label: e.label,
                id: e.id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(ds.class_names.clone(), examples)
}

/// Parses a corruption suite manifest: one `<kind> <severity>` pair per
/// line, `#` comments and blank lines ignored.
pub fn parse_corruption_manifest(text: &str) -> Result<Vec<(CorruptionKind, u8)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [kind, sev] = fields.as_slice() else {
            return Err(Error::Config(format!("line {}: expected `<kind> <severity>`", n + 1)));
        };
        let kind: CorruptionKind = kind.parse()?;
        let sev: u8 = sev
            .parse()
            .map_err(|_| Error::Config(format!("line {}: bad severity `{sev}`", n + 1)))?;
        kind.parameter(sev)?;
        out.push((kind, sev));
    }
    Ok(out)
}
