//! Differentiable classifiers shared by students and teachers.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::codec::{sha256, Decoder, Encoder, Fingerprint};
use crate::data::{batch_tensor, Image};
use crate::error::{Error, Result};
use crate::nn::{Arch, Sequential};
use crate::tensor::Tensor;

/// Anything that maps an image batch to logits and can differentiate the
/// logits with respect to its input.
pub trait Classifier {
    /// `[channels, height, width]` of a single input.
    fn input_shape(&self) -> [usize; 3];

    fn num_classes(&self) -> usize;

    /// Eval-mode logits, `[batch, num_classes]`.
    fn logits(&self, images: &Tensor) -> Result<Tensor>;

    /// Vector-Jacobian product: gradient of `sum(grad_logits * logits(images))`
    /// with respect to `images`.
    fn input_grad(&self, images: &Tensor, grad_logits: &Tensor) -> Result<Tensor>;

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        let [c, h, w] = self.input_shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(format!("[N, {c}, {h}, {w}]"), s));
        }
        Ok(())
    }
}

/// A [`Sequential`] network with its architecture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub net: Sequential,
    frozen: bool,
}

const MODEL_MAGIC: &[u8; 8] = b"DADMODEL";
const MODEL_VERSION: u16 = 1;

impl Model {
    pub fn new(arch: Arch, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            arch: arch.name().to_string(),
            input_shape,
            num_classes,
            net: arch.build(input_shape, num_classes, seed)?,
            frozen: false,
        })
    }

    pub fn from_network(arch: &str, input_shape: [usize; 3], num_classes: usize, net: Sequential) -> Self {
        Self { arch: arch.to_string(), input_shape, num_classes, net, frozen: false }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access for training; refused once frozen.
    pub fn net_mut(&mut self) -> Result<&mut Sequential> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.net)
    }

    fn config_string(&self) -> String {
        let [c, h, w] = self.input_shape;
        format!("arch={};input={c}x{h}x{w};classes={};layers={}", self.arch, self.num_classes, self.net.describe())
    }

    pub fn config_hash(&self) -> Fingerprint {
        sha256(self.config_string().as_bytes())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut enc = Encoder::new(Vec::new());
        enc.bytes(MODEL_MAGIC)?;
        enc.u16(MODEL_VERSION)?;
        enc.str(&self.arch)?;
        for d in self.input_shape {
            enc.u32(d as u32)?;
        }
        enc.u32(self.num_classes as u32)?;
        enc.str(&self.net.describe())?;
        enc.bytes(&self.config_hash())?;
        enc.f64s(&self.net.state_vector())?;
        Ok(enc.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(Cursor::new(bytes));
        if &dec.array::<8>()? != MODEL_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = dec.u16()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model checkpoint version {version}")));
        }
        let arch = dec.str()?;
        let input_shape = [dec.u32()? as usize, dec.u32()? as usize, dec.u32()? as usize];
        let num_classes = dec.u32()? as usize;
        let mut net = Sequential::parse(&dec.str()?)?;
        let hash: Fingerprint = dec.array()?;
        let state = dec.f64s(1 << 28)?;
        net.load_state_vector(&state)?;
        let model = Self { arch, input_shape, num_classes, net, frozen: false };
        if model.config_hash() != hash {
            return Err(Error::Format("config hash mismatch".into()));
        }
        Ok(model)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> Result<Fingerprint> {
        Ok(sha256(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingPath(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

impl Classifier for Model {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        if images.batch() == 0 {
            return Ok(Tensor::zeros(vec![0, self.num_classes]));
        }
        self.net.forward(images)
    }

    fn input_grad(&self, images: &Tensor, grad_logits: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let (out, tape) = self.net.forward_tape(images)?;
        if out.shape() != grad_logits.shape() {
            return Err(Error::shape(out.shape(), grad_logits.shape()));
        }
        let (dx, _) = self.net.backward(&tape, grad_logits, true);
        Ok(dx.expect("input gradient requested"))
    }
}

/// Row-wise softmax of `logits / t`.
pub fn temp_softmax(logits: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    let k = logits.shape().get(1).copied().unwrap_or(0);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        softmax_in_place(row, t);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], t: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / t).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_logits(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(0).max(1);
    logits.data().chunks(k).map(argmax).collect()
}

pub fn predict<C: Classifier + ?Sized>(model: &C, images: &Tensor) -> Result<Vec<usize>> {
    Ok(predict_logits(&model.logits(images)?))
}

/// Logits for a list of images, evaluated in chunks.
pub fn logits_for<C: Classifier + ?Sized>(model: &C, images: &[&Image], chunk: usize) -> Result<Tensor> {
    let k = model.num_classes();
    let mut data = Vec::with_capacity(images.len() * k);
    for part in images.chunks(chunk.max(1)) {
        let x = batch_tensor(part.iter().copied())?;
        data.extend_from_slice(model.logits(&x)?.data());
    }
    Tensor::new(vec![images.len(), k], data)
}
