//! Labeled image datasets, deterministic corruptions and mixed clean/augmented
//! batch iteration.
//!
//! On disk a split is a directory with one sub-directory per class; class
//! directories are sorted by name to assign labels and files inside each
//! class are sorted by name. Sample ids are assigned in that order.

mod batches;
mod corrupt;
pub mod synth;

use std::fs;
use std::path::Path;

pub use batches::{mixed_batches, BatchEntry, MixedBatches, Origin};
pub use corrupt::{
    add_gaussian_noise, corrupt, corrupt_dataset, parse_corruption_manifest, CorruptionKind, CorruptionSpec,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[channels, height, width]` image with values in `[0, 1]`.
///
/// Pixels are stored as `f32` so every image the toolkit produces survives a
/// round trip through the cache format unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Rounds to `f32` and clips into `[0, 1]`.
    pub fn from_f64(shape: [usize; 3], values: &[f64]) -> Result<Self> {
        let data = values.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect();
        Self::new(shape[0], shape[1], shape[2], data)
    }

    pub fn checksum(&self) -> crate::codec::Fingerprint {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        crate::codec::sha256(&bytes)
    }
}

/// Stacks images into a `[N, C, H, W]` batch.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut shape: Option<[usize; 3]> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        match shape {
            None => shape = Some(img.shape()),
            Some(s) if s != img.shape() => return Err(Error::shape(s, img.shape())),
            _ => {}
        }
        data.extend(img.data.iter().map(|&v| v as f64));
        n += 1;
    }
    let [c, h, w] = shape.unwrap_or([0, 0, 0]);
    Tensor::new(vec![n, c, h, w], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        let ds = Self { class_names, examples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.examples.first().map(|e| e.image.shape())
    }

    pub fn ids(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.id).collect()
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        // ids are assigned densely by the loaders; fall back to a scan otherwise
        match self.examples.get(id as usize) {
            Some(e) if e.id == id => Some(id as usize),
            _ => self.examples.iter().position(|e| e.id == id),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let shape = self.image_shape();
        for e in &self.examples {
            let name = format!("id {}", e.id);
            if !seen.insert(e.id) {
                return Err(Error::MalformedRecord { record: name, reason: "duplicate id".into() });
            }
            if e.label >= self.num_classes() {
                return Err(Error::LabelOutOfRange { label: e.label, num_classes: self.num_classes() });
            }
            if Some(e.image.shape()) != shape {
                return Err(Error::MalformedRecord { record: name, reason: "inconsistent image shape".into() });
            }
            if !e.image.in_unit_range() {
                return Err(Error::MalformedRecord { record: name, reason: "pixel outside [0, 1]".into() });
            }
        }
        Ok(())
    }

    /// Concatenates datasets with identical classes, re-assigning dense ids.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let class_names = parts.first().map(|d| d.class_names.clone()).unwrap_or_default();
        let mut examples = Vec::new();
        for p in parts {
            if p.class_names != class_names {
                return Err(Error::InvalidArgument("datasets have different classes".into()));
            }
            for e in &p.examples {
                examples.push(LabeledExample { image: e.image.clone(), label: e.label, id: examples.len() as u64 });
            }
        }
        Dataset::new(class_names, examples)
    }
}

/// Loads `<root>/<split>/<class>/<image files>`.
pub fn load_dataset(root: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    let dir = root.as_ref().join(split);
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir));
    }
    let mut classes: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    let mut examples = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for path in files {
            let record = path.display().to_string();
            let img = image::open(&path)
                .map_err(|e| Error::MalformedRecord { record: record.clone(), reason: e.to_string() })?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = vec![0f32; 3 * h * w];
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
                }
            }
            let image = Image::new(3, h, w, data)?;
            if let Some(first) = examples.first().map(|e: &LabeledExample| e.image.shape()) {
                if first != image.shape() {
                    return Err(Error::MalformedRecord {
                        record,
                        reason: format!("shape {:?} differs from {:?}", image.shape(), first),
                    });
                }
            }
            examples.push(LabeledExample { image, label, id: examples.len() as u64 });
        }
    }
    Dataset::new(classes, examples)
}

/// Writes a dataset in the class-per-folder layout as 8-bit PNG files.
pub fn save_dataset(ds: &Dataset, root: impl AsRef<Path>, split: &str) -> Result<()> {
    let dir = root.as_ref().join(split);
    for class in &ds.class_names {
        fs::create_dir_all(dir.join(class))?;
    }
    for e in &ds.examples {
        let img = &e.image;
        if img.channels != 3 {
            return Err(Error::Unsupported("only 3-channel images can be written".into()));
        }
        let (h, w) = (img.height, img.width);
        let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (img.data[(c * h + y as usize) * w + x as usize] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        buf.save(dir.join(&ds.class_names[e.label]).join(format!("{:06}.png", e.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), "train"), Err(Error::MissingPath(_))));
    }

    #[test]
    fn empty_split_has_no_examples() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("train")).unwrap();
        let ds = load_dataset(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn malformed_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("train").join("cat");
        fs::create_dir_all(&class).unwrap();
        fs::write(class.join("broken.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path(), "train").unwrap_err().to_string();
        assert!(err.contains("broken.png"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let img = Image::filled(1, 2, 2, 0.5);
        let e = LabeledExample { image: img, label: 0, id: 3 };
        assert!(Dataset::new(vec!["a".into()], vec![e.clone(), e]).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_stable() {
        let ds = synth::generate(&synth::SynthConfig { per_class: 3, size: 16, seed: 4 });
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path(), "train").unwrap();
        let a = load_dataset(dir.path(), "train").unwrap();
        let b = load_dataset(dir.path(), "train").unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.ids(), b.ids());
        assert_eq!(a.examples[0].image.checksum(), b.examples[0].image.checksum());
        for (x, y) in a.examples.iter().zip(&ds.examples) {
            assert_eq!(x.label, y.label);
            for (p, q) in x.image.data.iter().zip(&y.image.data) {
                assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
