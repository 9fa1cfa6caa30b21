//! Vector-quantized autoencoder used to project images onto a learned
//! discrete manifold.
//!
//! `Q(x) = decode(quantize(encode(x)))`. Gradients pass through the
//! quantization step unchanged (straight-through), which lets attacks
//! differentiate through `Q`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{derive_seed, sha256, Decoder, Encoder, Fingerprint};
use crate::data::{batch_tensor, Dataset, Image};
use crate::error::{Error, Result};
use crate::nn::{patch_expand, AdamVec, Conv2d, Layer, Optimizer, OptimizerKind, Sequential};
use crate::tensor::Tensor;

/// `K` codewords of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Vec<f64>,
    pub k: usize,
    pub d: usize,
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, entries: Vec<f64>) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(Error::InvalidArgument(format!("codebook needs K >= 2 and d >= 1, got K={k}, d={d}")));
        }
        if entries.len() != k * d {
            return Err(Error::shape([k, d], entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        Ok(Self { entries, k, d, usage_counts: vec![0; k] })
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }

    /// Nearest codeword by squared Euclidean distance; ties go to the lowest index.
    pub fn quantize(&self, v: &[f64]) -> Result<(usize, &[f64])> {
        if v.len() != self.d {
            return Err(Error::shape(self.d, v.len()));
        }
        let i = self.nearest(v);
        Ok((i, self.entry(i)))
    }

    fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, e) in self.entries.chunks_exact(self.d).enumerate() {
            let mut dist = 0.0;
            for (a, b) in e.iter().zip(v) {
                let t = a - b;
                dist += t * t;
            }
            if dist < best_d {
                best_d = dist;
                best = i;
            }
        }
        best
    }

    /// `exp(entropy)` of the usage distribution; 0 when nothing was counted.
    pub fn perplexity(&self) -> f64 {
        let total: u64 = self.usage_counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let h: f64 = self
            .usage_counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        h.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizerConfig {
    /// Spatial downsampling factor `f`.
    pub factor: usize,
    /// Latent channel dimension `d`.
    pub latent_dim: usize,
    /// Codebook size `K`.
    pub codebook_size: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub commitment: f64,
    /// Fraction of the data held out for the reconstruction report.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for DiscretizerConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            latent_dim: 16,
            codebook_size: 512,
            hidden: 32,
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            commitment: 0.25,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discretizer {
    pub factor: usize,
    pub channels: usize,
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizerReport {
    /// Mean squared reconstruction error per training epoch.
    pub epoch_recon: Vec<f64>,
    pub heldout_mae: f64,
    pub heldout_mse: f64,
    pub heldout_size: usize,
    pub perplexity: f64,
    pub dead_codes_reseeded: usize,
}

const DISC_MAGIC: &[u8; 8] = b"DADQUANT";
const DISC_VERSION: u16 = 1;

impl Discretizer {
    /// Randomly initialised discretizer with a uniform `[-1, 1]` codebook.
    pub fn new(channels: usize, cfg: &DiscretizerConfig) -> Result<Self> {
        let (f, h, d) = (cfg.factor, cfg.hidden, cfg.latent_dim);
        if f == 0 || h < 2 || d == 0 {
            return Err(Error::InvalidArgument("factor, hidden and latent_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xd15c]));
        let encoder = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(&mut rng, channels, h / 2, 3, 1, 1)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(&mut rng, h / 2, h, f, f, 0)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(&mut rng, h, d, 1, 1, 0)),
        ]);
        let decoder = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(&mut rng, d, h, 1, 1, 0)),
            Layer::Relu,
            patch_expand(rng.random(), h, h / 2, f),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(&mut rng, h / 2, channels, 3, 1, 1)),
            Layer::Sigmoid,
        ]);
        let entries = (0..cfg.codebook_size * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(Self { factor: f, channels, encoder, decoder, codebook: Codebook::new(cfg.codebook_size, d, entries)? })
    }

    pub fn latent_dim(&self) -> usize {
        self.codebook.d
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(format!("[N, {}, H, W]", self.channels), s));
        }
        let f = self.factor;
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial size {}x{} is not divisible by factor {f}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.latent_dim() {
            return Err(Error::shape(format!("[N, {}, h, w]", self.latent_dim()), s));
        }
        Ok(())
    }

    /// `[N, c, h, w] -> [N, d, h/f, w/f]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let z = self.encoder.forward(images)?;
        if !z.is_finite() {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(z)
    }

    /// Gradient of `sum(grad_latent * encode(images))` with respect to the images.
    pub fn encode_vjp(&self, images: &Tensor, grad_latent: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let (z, tape) = self.encoder.forward_tape(images)?;
        if z.shape() != grad_latent.shape() {
            return Err(Error::shape(z.shape(), grad_latent.shape()));
        }
        Ok(self.encoder.backward(&tape, grad_latent, true).0.expect("input gradient"))
    }

    /// Snaps every latent position to its nearest codeword.
    pub fn quantize_grid(&self, z: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        self.check_latent(z)?;
        let d = self.latent_dim();
        let (n, hw) = (z.batch(), z.shape()[2] * z.shape()[3]);
        let mut out = z.clone();
        let mut indices = Vec::with_capacity(n * hw);
        let mut v = vec![0.0; d];
        for b in 0..n {
            let sample = out.sample_mut(b);
            for p in 0..hw {
                for c in 0..d {
                    v[c] = sample[c * hw + p];
                }
                let i = self.codebook.nearest(&v);
                let e = self.codebook.entry(i);
                for c in 0..d {
                    sample[c * hw + p] = e[c];
                }
                indices.push(i);
            }
        }
        Ok((out, indices))
    }

    /// `[N, d, h', w'] -> [N, c, h'f, w'f]`, values in `[0, 1]`.
    pub fn decode(&self, zq: &Tensor) -> Result<Tensor> {
        self.check_latent(zq)?;
        let mut x = self.decoder.forward(zq)?;
        clamp_unit(&mut x);
        Ok(x)
    }

    pub fn discretize(&self, images: &Tensor) -> Result<Tensor> {
        let z = self.encode(images)?;
        let (zq, _) = self.quantize_grid(&z)?;
        self.decode(&zq)
    }

    /// `Q(x)` together with the straight-through gradient of
    /// `sum(grad_out * Q(x))` with respect to `x`.
    pub fn discretize_vjp(&self, images: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_images(images)?;
        let (z, enc_tape) = self.encoder.forward_tape(images)?;
        if !z.is_finite() {
            return Err(Error::NonFinite("latent".into()));
        }
        let (zq, _) = self.quantize_grid(&z)?;
        let (mut out, dec_tape) = self.decoder.forward_tape(&zq)?;
        if out.shape() != grad_out.shape() {
            return Err(Error::shape(out.shape(), grad_out.shape()));
        }
        clamp_unit(&mut out);
        let dzq = self.decoder.backward(&dec_tape, grad_out, true).0.expect("latent gradient");
        let dx = self.encoder.backward(&enc_tape, &dzq, true).0.expect("input gradient");
        Ok((out, dx))
    }

    pub fn discretize_image(&self, image: &Image) -> Result<Image> {
        let x = batch_tensor([image])?;
        let q = self.discretize(&x)?;
        Image::from_f64(image.shape(), q.data())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut enc = Encoder::new(Vec::new());
        enc.bytes(DISC_MAGIC)?;
        enc.u16(DISC_VERSION)?;
        enc.u32(self.factor as u32)?;
        enc.u32(self.channels as u32)?;
        enc.u32(self.codebook.d as u32)?;
        enc.u32(self.codebook.k as u32)?;
        for net in [&self.encoder, &self.decoder] {
            enc.str(&net.describe())?;
            enc.f64s(&net.state_vector())?;
        }
        enc.f64s(&self.codebook.entries)?;
        for &c in &self.codebook.usage_counts {
            enc.u64(c)?;
        }
        Ok(enc.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(Cursor::new(bytes));
        if &dec.array::<8>()? != DISC_MAGIC {
            return Err(Error::Format("not a discretizer checkpoint (bad magic)".into()));
        }
        let version = dec.u16()?;
        if version != DISC_VERSION {
            return Err(Error::Format(format!("unsupported discretizer version {version}")));
        }
        let factor = dec.u32()? as usize;
        let channels = dec.u32()? as usize;
        let d = dec.u32()? as usize;
        let k = dec.u32()? as usize;
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut net = Sequential::parse(&dec.str()?)?;
            net.load_state_vector(&dec.f64s(1 << 28)?)?;
            nets.push(net);
        }
        let decoder = nets.pop().expect("two networks");
        let encoder = nets.pop().expect("two networks");
        let entries = dec.f64s(1 << 28)?;
        let mut codebook = Codebook::new(k, d, entries)?;
        for c in codebook.usage_counts.iter_mut() {
            *c = dec.u64()?;
        }
        if !dec.at_end()? {
            return Err(Error::Format("trailing bytes after discretizer checkpoint".into()));
        }
        Ok(Self { factor, channels, encoder, decoder, codebook })
    }

    pub fn fingerprint(&self) -> Result<Fingerprint> {
        Ok(sha256(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

fn clamp_unit(x: &mut Tensor) {
    for v in x.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Copies the `d`-vector at every latent position into a flat list.
fn latent_vectors(z: &Tensor) -> Vec<Vec<f64>> {
    let d = z.shape()[1];
    let hw = z.shape()[2] * z.shape()[3];
    let mut out = Vec::with_capacity(z.batch() * hw);
    for b in 0..z.batch() {
        let s = z.sample(b);
        for p in 0..hw {
            out.push((0..d).map(|c| s[c * hw + p]).collect());
        }
    }
    out
}

/// Trains a discretizer with the usual VQ objective: reconstruction MSE plus
/// codebook and commitment terms. Unused codewords are re-seeded from encoder
/// outputs at the end of every epoch.
pub fn train_discretizer(dataset: &Dataset, cfg: &DiscretizerConfig) -> Result<(Discretizer, DiscretizerReport)> {
    let shape = dataset.image_shape().ok_or_else(|| Error::Empty("training set for the discretizer".into()))?;
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::InvalidArgument("batch_size must be positive and holdout in [0, 1)".into()));
    }
    let mut disc = Discretizer::new(shape[0], cfg)?;
    disc.check_images(&Tensor::zeros(vec![1, shape[0], shape[1], shape[2]]))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x7a1]));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((dataset.len() as f64) * cfg.holdout).floor() as usize;
    let (held, train) = if n_hold > 0 && n_hold < dataset.len() { order.split_at(n_hold) } else { (&order[..0], &order[..]) };
    let held = held.to_vec();
    let mut train = train.to_vec();

    let (k, d) = (disc.codebook.k, disc.codebook.d);
    let kind = OptimizerKind::adam();
    let mut enc_opt = Optimizer::new(kind, &disc.encoder);
    let mut dec_opt = Optimizer::new(kind, &disc.decoder);
    let mut cb_opt = AdamVec::new(k * d);
    let mut initialized = false;
    let mut epoch_recon = Vec::with_capacity(cfg.epochs);
    let mut reseeded = 0;
    let beta = cfg.commitment;

    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut usage = vec![0u64; k];
        let mut recon_sum = 0.0;
        let mut recon_count = 0usize;
        let mut last_latents: Vec<Vec<f64>> = Vec::new();
        for (bi, chunk) in train.chunks(cfg.batch_size).enumerate() {
            let x = batch_tensor(chunk.iter().map(|&i| &dataset.examples[i].image))?;
            let (z, enc_tape) = disc.encoder.forward_train(&x)?;
            if !initialized {
                let lo = z.data().iter().copied().fold(f64::INFINITY, f64::min);
                let hi = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1e-3, lo + 1e-3) };
                for e in disc.codebook.entries.iter_mut() {
                    *e = rng.random_range(lo..hi);
                }
                initialized = true;
            }
            let (zq, idx) = disc.quantize_grid(&z)?;
            let (xh, dec_tape) = disc.decoder.forward_train(&zq)?;
            let n_pix = x.len() as f64;
            let mut dxh = xh.clone();
            let mut recon = 0.0;
            for (g, &t) in dxh.data_mut().iter_mut().zip(x.data()) {
                let r = *g - t;
                recon += r * r;
                *g = 2.0 * r / n_pix;
            }
            recon /= n_pix;
            if !recon.is_finite() {
                return Err(Error::NonFinite(format!("discretizer loss at epoch {epoch}, batch {bi}")));
            }
            recon_sum += recon * x.batch() as f64;
            recon_count += x.batch();

            let (dzq, dec_grads) = disc.decoder.backward(&dec_tape, &dxh, true);
            let mut dz = dzq.expect("latent gradient");
            let n_lat = z.len() as f64;
            let hw = z.shape()[2] * z.shape()[3];
            let mut cb_grad = vec![0.0; k * d];
            for b in 0..z.batch() {
                let zs = z.sample(b);
                let qs = zq.sample(b);
                let gs = dz.sample_mut(b);
                for p in 0..hw {
                    let code = idx[b * hw + p];
                    usage[code] += 1;
                    for c in 0..d {
                        let diff = zs[c * hw + p] - qs[c * hw + p];
                        gs[c * hw + p] += 2.0 * beta * diff / n_lat;
                        cb_grad[code * d + c] -= 2.0 * diff / n_lat;
                    }
                }
            }
            let (_, enc_grads) = disc.encoder.backward(&enc_tape, &dz, false);
            if !enc_grads.is_finite() || !dec_grads.is_finite() {
                return Err(Error::NonFinite(format!("discretizer gradient at epoch {epoch}, batch {bi}")));
            }
            enc_opt.step(&mut disc.encoder, &enc_grads, cfg.lr);
            dec_opt.step(&mut disc.decoder, &dec_grads, cfg.lr);
            cb_opt.step(&mut disc.codebook.entries, &cb_grad, cfg.lr);
            last_latents = latent_vectors(&z);
        }
        let epoch_mse = recon_sum / recon_count.max(1) as f64;
        log::debug!("discretizer epoch {epoch}: recon mse {epoch_mse:.5}");
        epoch_recon.push(epoch_mse);
        if epoch + 1 < cfg.epochs && !last_latents.is_empty() {
            for code in (0..k).filter(|&c| usage[c] == 0) {
                let v = &last_latents[rng.random_range(0..last_latents.len())];
                disc.codebook.entries[code * d..(code + 1) * d].copy_from_slice(v);
                cb_opt.reset(code * d..(code + 1) * d);
                reseeded += 1;
            }
        }
    }

    // final usage counts over the training split
    let mut usage = vec![0u64; k];
    for chunk in train.chunks(cfg.batch_size.max(64)) {
        let x = batch_tensor(chunk.iter().map(|&i| &dataset.examples[i].image))?;
        for i in disc.quantize_grid(&disc.encode(&x)?)?.1 {
            usage[i] += 1;
        }
    }
    disc.codebook.usage_counts = usage;

    let eval_idx = if held.is_empty() { &train } else { &held };
    let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
    for chunk in eval_idx.chunks(64) {
        let x = batch_tensor(chunk.iter().map(|&i| &dataset.examples[i].image))?;
        let q = disc.discretize(&x)?;
        for (a, b) in q.data().iter().zip(x.data()) {
            abs += (a - b).abs();
            sq += (a - b) * (a - b);
        }
        count += x.len();
    }
    let report = DiscretizerReport {
        epoch_recon,
        heldout_mae: abs / count.max(1) as f64,
        heldout_mse: sq / count.max(1) as f64,
        heldout_size: held.len(),
        perplexity: disc.codebook.perplexity(),
        dead_codes_reseeded: reseeded,
    };
    Ok((disc, report))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::data::{synth, LabeledExample};

    fn tiny_cfg() -> DiscretizerConfig {
        DiscretizerConfig { factor: 2, latent_dim: 3, codebook_size: 6, hidden: 4, ..Default::default() }
    }

    fn random_images(n: usize, c: usize, h: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, c, h, h], (0..n * c * h * h).map(|_| rng.random()).collect()).unwrap()
    }

    fn brute_nearest(cb: &Codebook, v: &[f64]) -> usize {
        let dists: Vec<f64> =
            (0..cb.k).map(|i| cb.entry(i).iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&x| x == min).unwrap()
    }

    #[test]
    fn codebook_validation() {
        assert!(Codebook::new(1, 2, vec![0.0; 2]).is_err());
        assert!(Codebook::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Codebook::new(2, 1, vec![0.0, f64::NAN]).is_err());
        let cb = Codebook::new(3, 2, vec![0.0; 6]).unwrap();
        assert!(cb.quantize(&[1.0]).is_err());
        // ties go to the lowest index
        assert_eq!(cb.quantize(&[0.5, 0.5]).unwrap().0, 0);
    }

    #[test]
    fn self_nearest_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cb = Codebook::new(16, 4, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(cb.quantize(cb.entry(7)).unwrap().0, 7);
        let v: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let (i, w) = cb.quantize(&v).unwrap();
        assert_eq!(cb.quantize(&w.to_vec()).unwrap().0, i);
    }

    proptest! {
        #[test]
        fn quantize_matches_exhaustive_scan(
            k in 2usize..20,
            d in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::new(k, d, (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            for _ in 0..20 {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                prop_assert_eq!(cb.quantize(&v).unwrap().0, brute_nearest(&cb, &v));
            }
            for i in 0..k {
                let (j, e) = cb.quantize(cb.entry(i)).unwrap();
                prop_assert_eq!(e, cb.entry(j));
                prop_assert_eq!(cb.entry(j), cb.entry(i));
            }
        }
    }

    #[test]
    fn shapes_and_range() {
        let disc = Discretizer::new(3, &DiscretizerConfig { codebook_size: 8, ..Default::default() }).unwrap();
        let x = random_images(2, 3, 32, 0);
        let z = disc.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 16, 8, 8]);
        assert_eq!(disc.encode(&x).unwrap(), z);
        let q = disc.discretize(&x).unwrap();
        assert_eq!(q.shape(), x.shape());
        assert!(q.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(disc.discretize(&x).unwrap(), q);
        assert!(disc.encode(&random_images(1, 3, 30, 0)).is_err());
        assert!(disc.decode(&Tensor::zeros(vec![1, 3, 8, 8])).is_err());
    }

    #[test]
    fn quantized_latent_is_a_fixed_point() {
        let disc = Discretizer::new(3, &tiny_cfg()).unwrap();
        let z = disc.encode(&random_images(2, 3, 4, 3)).unwrap();
        let (zq, idx) = disc.quantize_grid(&z).unwrap();
        let (zq2, idx2) = disc.quantize_grid(&zq).unwrap();
        assert_eq!(idx, idx2);
        assert_eq!(zq, zq2);
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let disc = Discretizer::new(2, &tiny_cfg()).unwrap();
        let x = random_images(1, 2, 4, 5);
        let z = disc.encode(&x).unwrap();
        let w = random_images(1, 3, 2, 6).reshape(z.shape().to_vec()).unwrap();
        let g = disc.encode_vjp(&x, &w).unwrap();
        let f = |x: &Tensor| -> f64 { disc.encode(x).unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(rel_close(g.data()[i], fd, 1e-4), "{i}: {} vs {fd}", g.data()[i]);
        }
    }

    #[test]
    fn discretize_gradient_is_straight_through() {
        let disc = Discretizer::new(2, &tiny_cfg()).unwrap();
        let x = random_images(1, 2, 4, 8);
        let w = random_images(1, 2, 4, 9);
        let (_, g) = disc.discretize_vjp(&x, &w).unwrap();
        // quantization replaced by identity at the latent: zq + (enc(x) - enc(x0))
        let z0 = disc.encode(&x).unwrap();
        let (zq0, _) = disc.quantize_grid(&z0).unwrap();
        let f = |xx: &Tensor| -> f64 {
            let z = disc.encode(xx).unwrap();
            let mut lat = zq0.clone();
            for ((l, a), b) in lat.data_mut().iter_mut().zip(z.data()).zip(z0.data()) {
                *l += a - b;
            }
            let out = disc.decoder.forward(&lat).unwrap();
            out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(rel_close(g.data()[i], fd, 1e-4), "{i}: {} vs {fd}", g.data()[i]);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let disc = Discretizer::new(3, &tiny_cfg()).unwrap();
        let bytes = disc.to_bytes().unwrap();
        assert_eq!(Discretizer::from_bytes(&bytes).unwrap(), disc);
        assert!(Discretizer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Discretizer::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = Dataset::new(vec!["a".into()], vec![]).unwrap();
        assert!(matches!(train_discretizer(&ds, &tiny_cfg()), Err(Error::Empty(_))));
    }

    #[test]
    fn constant_image_is_reconstructed() {
        let img = Image::filled(3, 8, 8, 0.3);
        let examples = (0..8).map(|id| LabeledExample { image: img.clone(), label: 0, id }).collect();
        let ds = Dataset::new(vec!["c".into()], examples).unwrap();
        let cfg = DiscretizerConfig {
            factor: 4,
            latent_dim: 4,
            codebook_size: 8,
            hidden: 8,
            epochs: 400,
            batch_size: 8,
            lr: 1e-2,
            holdout: 0.0,
            ..Default::default()
        };
        let (disc, report) = train_discretizer(&ds, &cfg).unwrap();
        assert_eq!(disc.codebook.k, 8);
        assert!(report.heldout_mae < 1e-2, "mae {}", report.heldout_mae);
    }

    #[test]
    fn training_reduces_reconstruction_and_uses_codes() {
        let ds = synth::generate(&synth::SynthConfig { per_class: 50, size: 16, seed: 2 });
        let mut runs = Vec::new();
        for seed in 0..3 {
            let cfg = DiscretizerConfig { epochs: 5, codebook_size: 64, seed, ..Default::default() };
            let (disc, report) = train_discretizer(&ds, &cfg).unwrap();
            assert_eq!(disc.codebook.k, 64);
            assert!(report.perplexity > 1.0);
            assert_eq!(disc.codebook.usage_counts.iter().sum::<u64>() as usize, (500 - 50) * 16);
            runs.push(report.epoch_recon);
        }
        let median: Vec<f64> = (0..5)
            .map(|e| {
                let mut v = [runs[0][e], runs[1][e], runs[2][e]];
                v.sort_by(f64::total_cmp);
                v[1]
            })
            .collect();
        assert!(median.windows(2).all(|w| w[1] < w[0]), "{runs:?}");
    }
}
