use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Cache, Conv2d, Layer, Linear, PatchExpand};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A feed-forward stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Intermediate values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// Parameter gradients, one vector per trainable parameter tensor in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.layers
                .iter()
                .flat_map(|l| l.params().into_iter().map(|p| vec![0.0; p.len()]))
                .collect(),
        )
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.len()).sum()
    }

    /// Eval-mode forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?.0;
        }
        Ok(cur)
    }

    /// Eval-mode forward pass that keeps a tape for differentiation.
    pub fn forward_tape(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (out, cache) = l.forward(&cur)?;
            caches.push(cache);
            cur = out;
        }
        Ok((cur, Tape { caches }))
    }

    /// Train-mode forward pass: batch-norm layers use batch statistics and
    /// update their running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Tape)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &mut self.layers {
            let (out, cache) = l.forward_train(&cur)?;
            caches.push(cache);
            cur = out;
        }
        Ok((cur, Tape { caches }))
    }

    /// Eval-mode forward pass that reports the input of every layer to `visit`.
    pub fn forward_visit(&self, x: &Tensor, mut visit: impl FnMut(usize, &Layer, &Tensor)) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            visit(i, l, &cur);
            cur = l.forward(&cur)?.0;
        }
        Ok(cur)
    }

    /// Reverse pass. Returns the input gradient when `need_input` is set.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor, need_input: bool) -> (Option<Tensor>, Grads) {
        let mut grads = self.zero_grads();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.params().len();
        }
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let n = self.layers[i].params().len();
            let slot = &mut grads.0[offsets[i]..offsets[i] + n];
            let need = need_input || i > 0;
            match self.layers[i].backward(&tape.caches[i], &g, slot, need) {
                Some(dx) => g = dx,
                None => return (None, grads),
            }
        }
        (need_input.then_some(g), grads)
    }

    pub fn describe(&self) -> String {
        self.layers.iter().map(Layer::describe).collect::<Vec<_>>().join(";")
    }

    pub fn parse(desc: &str) -> Result<Self> {
        if desc.is_empty() {
            return Ok(Self::new(Vec::new()));
        }
        Ok(Self::new(desc.split(';').map(Layer::parse).collect::<Result<_>>()?))
    }

    /// All parameters and running statistics flattened in layer order.
    pub fn state_vector(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.state()).flatten().copied().collect()
    }

    pub fn load_state_vector(&mut self, values: &[f64]) -> Result<()> {
        let expected: usize = self.layers.iter().flat_map(|l| l.state()).map(|p| p.len()).sum();
        if expected != values.len() {
            return Err(Error::Format(format!(
                "parameter blob has {} values, architecture needs {expected}",
                values.len()
            )));
        }
        let mut i = 0;
        for l in &mut self.layers {
            for p in l.state_mut() {
                let n = p.len();
                p.copy_from_slice(&values[i..i + n]);
                i += n;
            }
        }
        Ok(())
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm2d(_)))
    }
}

/// Architectures used by the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Two conv blocks, 8 and 16 channels.
    SmallCnn,
    /// Three conv blocks, 16/32/32 channels.
    WideCnn,
    /// Tanh MLP with two hidden layers; handy for gradient checks.
    Mlp,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::SmallCnn => "small-cnn",
            Arch::WideCnn => "wide-cnn",
            Arch::Mlp => "mlp",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "small-cnn" | "student" => Ok(Arch::SmallCnn),
            "wide-cnn" | "teacher" => Ok(Arch::WideCnn),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn build(self, input: [usize; 3], num_classes: usize, seed: u64) -> Result<Sequential> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = input;
        let layers = match self {
            Arch::SmallCnn => {
                check_divisible(h, w, 4)?;
                vec![
                    Layer::Conv2d(Conv2d::new(&mut rng, c, 8, 3, 1, 1)),
                    Layer::BatchNorm2d(BatchNorm2d::new(8)),
                    Layer::Relu,
                    Layer::AvgPool2,
                    Layer::Conv2d(Conv2d::new(&mut rng, 8, 16, 3, 1, 1)),
                    Layer::BatchNorm2d(BatchNorm2d::new(16)),
                    Layer::Relu,
                    Layer::AvgPool2,
                    Layer::Flatten,
                    Layer::Linear(Linear::new(&mut rng, 16 * (h / 4) * (w / 4), num_classes)),
                ]
            }
            Arch::WideCnn => {
                check_divisible(h, w, 8)?;
                vec![
                    Layer::Conv2d(Conv2d::new(&mut rng, c, 16, 3, 1, 1)),
                    Layer::BatchNorm2d(BatchNorm2d::new(16)),
                    Layer::Relu,
                    Layer::AvgPool2,
                    Layer::Conv2d(Conv2d::new(&mut rng, 16, 32, 3, 1, 1)),
                    Layer::BatchNorm2d(BatchNorm2d::new(32)),
                    Layer::Relu,
                    Layer::AvgPool2,
                    Layer::Conv2d(Conv2d::new(&mut rng, 32, 32, 3, 1, 1)),
                    Layer::BatchNorm2d(BatchNorm2d::new(32)),
                    Layer::Relu,
                    Layer::AvgPool2,
                    Layer::Flatten,
                    Layer::Linear(Linear::new(&mut rng, 32 * (h / 8) * (w / 8), num_classes)),
                ]
            }
            Arch::Mlp => {
                let d = c * h * w;
                vec![
                    Layer::Flatten,
                    Layer::Linear(Linear::new(&mut rng, d, 16)),
                    Layer::Tanh,
                    Layer::Linear(Linear::new(&mut rng, 16, 16)),
                    Layer::Tanh,
                    Layer::Linear(Linear::new(&mut rng, 16, num_classes)),
                ]
            }
        };
        Ok(Sequential::new(layers))
    }
}

fn check_divisible(h: usize, w: usize, f: usize) -> Result<()> {
    if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "spatial size {h}x{w} must be a positive multiple of {f}"
        )));
    }
    Ok(())
}

/// Convenience constructor for a depth-to-space decoder head.
pub fn patch_expand(seed: u64, in_channels: usize, out_channels: usize, factor: usize) -> Layer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Layer::PatchExpand(PatchExpand::new(&mut rng, in_channels, out_channels, factor))
}
