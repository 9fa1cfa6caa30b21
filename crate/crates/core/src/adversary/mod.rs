//! Projected-gradient attacks, discretized adversarial example generation
//! and the offline augmentation cache.

mod cache;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use cache::{build_cache, verify_cache, CacheFile, CacheHeader, CACHE_VERSION};

use crate::data::{batch_tensor, Image};
use crate::discretizer::Discretizer;
use crate::error::{Error, Result};
use crate::model::{argmax, softmax_in_place, Classifier};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    fn code(self) -> u8 {
        match self {
            Norm::Linf => 0,
            Norm::L2 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Norm::Linf),
            2 => Ok(Norm::L2),
            c => Err(Error::Format(format!("unknown norm code {c}"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" | "inf" => Ok(Norm::Linf),
            "l2" | "2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm `{other}` (expected linf or l2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// Perturbation budget in `[0, 1]` pixel units.
    pub epsilon: f64,
    pub steps: u32,
    pub step_size: f64,
    pub norm: Norm,
    /// Extra random-start attempts for samples the teacher rejects.
    pub retries: u32,
    /// Whether rejected samples are written to the cache (flagged as such).
    pub keep_rejected: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilon: 8.0 / 255.0, steps: 1, step_size: 0.1, norm: Norm::Linf, retries: 0, keep_rejected: true }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// One cached augmented sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialRecord {
    pub sample_id: u64,
    pub label: usize,
    /// `Q(x')`.
    pub image: Image,
    pub teacher_logits_aug: Vec<f32>,
    pub teacher_logits_clean: Vec<f32>,
    /// Teacher still predicts the true label on `Q(x')`.
    pub accepted: bool,
    pub seed: u64,
}

/// Gradient of the summed cross-entropy with respect to the logits.
pub(crate) fn ce_logit_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let k = logits.shape()[1];
    let mut g = logits.clone();
    for (row, &y) in g.data_mut().chunks_mut(k).zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, num_classes: k });
        }
        softmax_in_place(row, 1.0);
        row[y] -= 1.0;
    }
    Ok(g)
}

fn check_labels(x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.shape().len() != 4 || x.batch() != labels.len() {
        return Err(Error::shape(format!("{} labels", x.batch()), labels.len()));
    }
    if !x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("attack input must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Projects `v` onto the ℓ∞ ball of radius `eps` around `center` and clips to
/// `[0, 1]`. The result satisfies `|v - center| <= eps` in floating point.
fn project_linf(v: &mut [f64], center: &[f64], eps: f64) {
    for (a, &c) in v.iter_mut().zip(center) {
        let mut lo = c - eps;
        while c - lo > eps {
            lo = lo.next_up();
        }
        let mut hi = c + eps;
        while hi - c > eps {
            hi = hi.next_down();
        }
        *a = a.clamp(lo, hi).clamp(0.0, 1.0);
    }
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn project_l2(v: &mut [f64], center: &[f64], eps: f64) {
    let mut scale = 1.0;
    loop {
        let n = l2_dist(v, center);
        if n <= eps {
            break;
        }
        // shrink the perturbation; the extra factor absorbs rounding
        scale = if scale == 1.0 { eps / n } else { 1.0 - 1e-12 };
        for (a, &c) in v.iter_mut().zip(center) {
            *a = c + (*a - c) * scale;
        }
    }
    for a in v.iter_mut() {
        *a = a.clamp(0.0, 1.0);
    }
}

/// Generic projected ascent. `grad` returns the loss gradient at the current
/// iterate; `start` optionally replaces the centre as the first iterate.
fn projected_ascent(
    center: &Tensor,
    start: Option<Tensor>,
    cfg: &AttackConfig,
    mut grad: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut x = start.unwrap_or_else(|| center.clone());
    let n = center.batch();
    for step in 0..cfg.steps {
        let g = grad(&x)?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("attack gradient at step {step}")));
        }
        for b in 0..n {
            let gs = g.sample(b);
            let c = center.sample(b);
            let xs = x.sample_mut(b);
            match cfg.norm {
                Norm::Linf => {
                    for (a, &gi) in xs.iter_mut().zip(gs) {
                        // sign(0) = 0 keeps pixels with no gradient in place
                        let s = if gi > 0.0 { 1.0 } else if gi < 0.0 { -1.0 } else { 0.0 };
                        *a += cfg.step_size * s;
                    }
                    project_linf(xs, c, cfg.epsilon);
                }
                Norm::L2 => {
                    let gn = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gn > 0.0 {
                        for (a, &gi) in xs.iter_mut().zip(gs) {
                            *a += cfg.step_size * gi / gn;
                        }
                    }
                    project_l2(xs, c, cfg.epsilon);
                }
            }
        }
    }
    Ok(x)
}

/// Maximizes the cross-entropy of `model` inside the ε-ball around `x`.
pub fn attack<C: Classifier + ?Sized>(model: &C, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check_labels(x, labels)?;
    model.check_input(x)?;
    projected_ascent(x, None, cfg, |xi| {
        let g = ce_logit_grad(&model.logits(xi)?, labels)?;
        model.input_grad(xi, &g)
    })
}

/// Output of an attack through the discretizer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteAttack {
    /// `Q(x)`, the attack centre.
    pub center: Tensor,
    /// `x'` before the final discretization.
    pub perturbed: Tensor,
    /// `Q(x')`.
    pub discretized: Tensor,
}

/// Attacks `model ∘ Q` around `Q(x)` with straight-through gradients and
/// discretizes the result again.
fn discrete_attack<C: Classifier + ?Sized>(
    model: &C,
    disc: &Discretizer,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    start_seed: Option<u64>,
) -> Result<DiscreteAttack> {
    check_labels(x, labels)?;
    model.check_input(x)?;
    let center = disc.discretize(x)?;
    let start = start_seed.map(|seed| random_start(&center, cfg, seed));
    let perturbed = projected_ascent(&center, start, cfg, |xi| {
        let q = disc.discretize(xi)?;
        let g = ce_logit_grad(&model.logits(&q)?, labels)?;
        let gq = model.input_grad(&q, &g)?;
        Ok(disc.discretize_vjp(xi, &gq)?.1)
    })?;
    let discretized = disc.discretize(&perturbed)?;
    Ok(DiscreteAttack { center, perturbed, discretized })
}

fn random_start(center: &Tensor, cfg: &AttackConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = center.clone();
    for b in 0..x.batch() {
        let xs = x.sample_mut(b);
        match cfg.norm {
            Norm::Linf => {
                for a in xs.iter_mut() {
                    *a += rng.random_range(-1.0..=1.0) * cfg.epsilon;
                }
                project_linf(xs, center.sample(b), cfg.epsilon);
            }
            Norm::L2 => {
                let dir: Vec<f64> = xs.iter().map(|_| rng.random_range(-1.0..=1.0)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let r = rng.random_range(0.0..=1.0) * cfg.epsilon;
                for (a, d) in xs.iter_mut().zip(&dir) {
                    *a += r * d / n;
                }
                project_l2(xs, center.sample(b), cfg.epsilon);
            }
        }
    }
    x
}

/// The student-driven variant used for online discrete adversarial training:
/// no oracle filter, the true label drives the attack.
pub fn student_attack<C: Classifier + ?Sized>(
    student: &C,
    disc: &Discretizer,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<DiscreteAttack> {
    discrete_attack(student, disc, x, labels, cfg, None)
}

/// Per-sample generation seed for a given attempt.
pub fn generation_seed(global_seed: u64, sample_id: u64, attempt: u32) -> u64 {
    crate::codec::derive_seed(&[global_seed, sample_id, attempt as u64])
}

/// Teacher-driven discretized adversarial examples with the oracle filter,
/// for a batch of samples. Rejected samples are retried from random starts
/// up to `cfg.retries` times.
pub fn dad_generate_batch<C: Classifier + ?Sized>(
    teacher: &C,
    disc: &Discretizer,
    images: &[&Image],
    labels: &[usize],
    ids: &[u64],
    cfg: &AttackConfig,
    global_seed: u64,
) -> Result<Vec<AdversarialRecord>> {
    cfg.validate()?;
    if images.len() != labels.len() || images.len() != ids.len() {
        return Err(Error::InvalidArgument("images, labels and ids must have equal length".into()));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let x = batch_tensor(images.iter().copied())?;
    let clean_logits = teacher.logits(&x)?;
    let k = teacher.num_classes();
    let mut records: Vec<Option<AdversarialRecord>> = vec![None; images.len()];
    let mut pending: Vec<usize> = (0..images.len()).collect();
    for attempt in 0..=cfg.retries {
        if pending.is_empty() {
            break;
        }
        let xs = x.select(&pending);
        let ys: Vec<usize> = pending.iter().map(|&i| labels[i]).collect();
        // attempt 0 starts at Q(x); retries start at a random point drawn per
        // sample so results do not depend on batching
        let discretized = if attempt == 0 {
            discrete_attack(teacher, disc, &xs, &ys, cfg, None)?.discretized
        } else {
            let mut out = Vec::with_capacity(pending.len());
            for (j, &i) in pending.iter().enumerate() {
                let seed = generation_seed(global_seed, ids[i], attempt);
                out.push(discrete_attack(teacher, disc, &xs.select(&[j]), &ys[j..j + 1], cfg, Some(seed))?.discretized);
            }
            Tensor::stack(&x.shape()[1..], out.iter().map(|t| t.data()))?
        };
        let shape = images[0].shape();
        let q_images: Vec<Image> =
            (0..pending.len()).map(|j| Image::from_f64(shape, discretized.sample(j))).collect::<Result<_>>()?;
        // teacher verdict on the stored (f32) image so re-verification is exact
        let aug_logits = teacher.logits(&batch_tensor(q_images.iter())?)?;
        let mut still = Vec::new();
        for (j, (&i, img)) in pending.iter().zip(q_images).enumerate() {
            let row = aug_logits.sample(j);
            let accepted = argmax(row) == labels[i];
            let rec = AdversarialRecord {
                sample_id: ids[i],
                label: labels[i],
                image: img,
                teacher_logits_aug: row.iter().map(|&v| v as f32).collect(),
                teacher_logits_clean: clean_logits.sample(i)[..k].iter().map(|&v| v as f32).collect(),
                accepted,
                seed: generation_seed(global_seed, ids[i], attempt),
            };
            if !accepted {
                still.push(i);
            }
            records[i] = Some(rec);
        }
        pending = still;
    }
    Ok(records.into_iter().map(|r| r.expect("every sample attempted")).collect())
}

pub fn dad_generate<C: Classifier + ?Sized>(
    teacher: &C,
    disc: &Discretizer,
    image: &Image,
    label: usize,
    sample_id: u64,
    cfg: &AttackConfig,
    global_seed: u64,
) -> Result<AdversarialRecord> {
    let mut v = dad_generate_batch(teacher, disc, &[image], &[label], &[sample_id], cfg, global_seed)?;
    Ok(v.pop().expect("one record"))
}

#[cfg(test)]
mod tests;
