//! Training loop for every objective, with pass accounting.
//!
//! Costs are counted in per-sample passes through the student or teacher:
//! a forward pass over a batch of `n` images adds `n` forward passes, a
//! backward pass adds `n` backward passes, and each attack iteration adds
//! `n` attack steps on top of the forward and backward passes it performs.
//! Discretizer passes and the offline cache build are not counted.

use std::fmt::Write as _;
use std::time::Instant;

use crate::adversary::{attack, student_attack, AttackConfig, CacheFile};
use crate::codec::derive_seed;
use crate::data::{batch_tensor, mixed_batches, Dataset, Origin};
use crate::discretizer::Discretizer;
use crate::error::{Error, Result};
use crate::model::{logits_for, Classifier, Model};
use crate::nn::{Optimizer, OptimizerKind, Schedule};
use crate::objectives::{compute, DistillConfig, LossInputs, Objective};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub distill: DistillConfig,
    /// Online student attacks (AT, DAT, ARD, RSLAD, DAT+DAD).
    pub attack: AttackConfig,
    /// Compute teacher logits on clean data once before training instead of
    /// once per batch.
    pub precompute_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerKind::sgd(),
            lr: 0.05,
            schedule: Schedule::Cosine,
            seed: 0,
            distill: DistillConfig::default(),
            attack: AttackConfig::default(),
            precompute_teacher: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.lr)));
        }
        self.distill.validate()?;
        if self.distill.objective.needs_pixel_attack() || self.distill.objective.needs_discrete_attack() {
            self.attack.validate()?;
        }
        Ok(())
    }
}

/// Cumulative counters at the end of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub forward: u64,
    pub backward: u64,
    pub attack_steps: u64,
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub objective: String,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn forward(&self) -> u64 {
        self.epochs.last().map_or(0, |e| e.forward)
    }

    pub fn backward(&self) -> u64 {
        self.epochs.last().map_or(0, |e| e.backward)
    }

    pub fn attack_steps(&self) -> u64 {
        self.epochs.last().map_or(0, |e| e.attack_steps)
    }

    pub fn cost(&self) -> u64 {
        self.forward() + self.backward() + self.attack_steps()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Columns: `epoch,loss,forward,backward,attack_steps,wall_clock_s`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,forward,backward,attack_steps,wall_clock_s\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                e.epoch, e.loss, e.forward, e.backward, e.attack_steps, e.wall_clock
            );
        }
        s
    }

    pub fn from_csv(text: &str, objective: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty training log".into()))?;
        if header.trim() != "epoch,loss,forward,backward,attack_steps,wall_clock_s" {
            return Err(Error::Format(format!("unexpected training log header `{header}`")));
        }
        let mut epochs = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("training log line {}: `{line}`", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            epochs.push(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                forward: f[2].parse().map_err(|_| bad())?,
                backward: f[3].parse().map_err(|_| bad())?,
                attack_steps: f[4].parse().map_err(|_| bad())?,
                wall_clock: f[5].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { objective: objective.to_string(), epochs })
    }
}

/// Everything a training run may draw on besides the student.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub dataset: &'a Dataset,
    pub teacher: Option<&'a Model>,
    pub cache: Option<&'a CacheFile>,
    pub discretizer: Option<&'a Discretizer>,
}

impl<'a> TrainInputs<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self { dataset, teacher: None, cache: None, discretizer: None }
    }
}

#[derive(Default)]
struct Counters {
    forward: u64,
    backward: u64,
    attack: u64,
}

fn to_f64_rows(rows: &[&[f32]], k: usize) -> Result<Tensor> {
    Tensor::new(vec![rows.len(), k], rows.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect())
}

fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let sample: Vec<usize> = parts[0].shape()[1..].to_vec();
    Tensor::stack(&sample, parts.iter().flat_map(|t| (0..t.batch()).map(move |i| t.sample(i))))
}

/// Online student attack; pixel space or through the discretizer.
fn online_attack(
    student: &Model,
    disc: Option<&Discretizer>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    discrete: bool,
    counters: &mut Counters,
) -> Result<Tensor> {
    let n = x.batch() as u64;
    let steps = cfg.steps as u64;
    counters.forward += n * steps;
    counters.backward += n * steps;
    counters.attack += n * steps;
    if discrete {
        let disc = disc.expect("checked before training");
        Ok(student_attack(student, disc, x, labels, cfg)?.discretized)
    } else {
        attack(student, x, labels, cfg)
    }
}

/// Trains `student` in place. The teacher is only ever read.
pub fn train(student: &mut Model, inputs: &TrainInputs<'_>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let obj = cfg.distill.objective;
    let ds = inputs.dataset;
    if ds.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let teacher = match (obj.needs_teacher(), inputs.teacher) {
        (true, None) => return Err(Error::InvalidArgument(format!("objective {obj} requires a teacher"))),
        (_, t) => t,
    };
    let records = match (obj.needs_cache(), inputs.cache) {
        (true, None) => return Err(Error::InvalidArgument(format!("objective {obj} requires an augmentation cache"))),
        (true, Some(c)) => &c.records[..],
        (false, _) => &[][..],
    };
    if obj.needs_discrete_attack() && inputs.discretizer.is_none() {
        return Err(Error::InvalidArgument(format!("objective {obj} requires a discretizer")));
    }
    if student.input_shape != ds.image_shape().expect("non-empty") {
        return Err(Error::shape(student.input_shape, ds.image_shape()));
    }
    student.net_mut()?;

    let mut counters = Counters::default();
    let start = Instant::now();
    let teacher_table = match teacher {
        Some(t) if obj.needs_teacher() && cfg.precompute_teacher => {
            let images: Vec<_> = ds.examples.iter().map(|e| &e.image).collect();
            counters.forward += images.len() as u64;
            Some(logits_for(t, &images, 128)?)
        }
        _ => None,
    };

    let mut opt = Optimizer::new(cfg.optimizer, &student.net);
    let steps_per_epoch = {
        let accepted = records.iter().filter(|r| r.accepted).count();
        (ds.len() + accepted).div_ceil(cfg.batch_size)
    };
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut log = TrainLog { objective: obj.to_string(), epochs: Vec::with_capacity(cfg.epochs) };

    for epoch in 0..cfg.epochs {
        let batches = mixed_batches(ds, records, cfg.batch_size, derive_seed(&[cfg.seed, epoch as u64]))?;
        let mut loss_sum = 0.0;
        let mut loss_weight = 0usize;
        for (bi, batch) in batches.enumerate() {
            let clean: Vec<usize> = batch.iter().filter(|e| e.origin == Origin::Clean).map(|e| e.index).collect();
            let aug: Vec<usize> = batch.iter().filter(|e| e.origin == Origin::Augmented).map(|e| e.index).collect();
            let labels: Vec<usize> = clean.iter().map(|&i| ds.examples[i].label).collect();
            let x_clean = batch_tensor(clean.iter().map(|&i| &ds.examples[i].image))?;
            let x_aug = batch_tensor(aug.iter().map(|&i| &records[i].image))?;

            let teacher_clean = match (teacher, &teacher_table) {
                (_, Some(table)) => Some(table.select(&clean)),
                (Some(t), None) if obj.needs_teacher() => {
                    counters.forward += clean.len() as u64;
                    Some(t.logits(&x_clean)?)
                }
                _ => None,
            };
            let teacher_aug = if obj.needs_cache() {
                Some(to_f64_rows(&aug.iter().map(|&i| &records[i].teacher_logits_aug[..]).collect::<Vec<_>>(), student.num_classes)?)
            } else {
                None
            };
            let x_adv = if obj.needs_pixel_attack() || obj.needs_discrete_attack() {
                if clean.is_empty() {
                    Some(x_clean.clone())
                } else {
                    let discrete = obj.needs_discrete_attack();
                    Some(online_attack(student, inputs.discretizer, &x_clean, &labels, &cfg.attack, discrete, &mut counters)?)
                }
            } else {
                None
            };

            // one train-mode pass over [clean; aug; adv]
            let (nc, na) = (clean.len(), aug.len());
            let mut parts = vec![&x_clean];
            if obj.needs_cache() {
                parts.push(&x_aug);
            }
            if let Some(a) = &x_adv {
                parts.push(a);
            }
            let parts: Vec<&Tensor> = parts.into_iter().filter(|t| t.batch() > 0).collect();
            if parts.is_empty() {
                continue;
            }
            let x_all = concat(&parts)?;
            let n_all = x_all.batch();
            let net = student.net_mut()?;
            let (logits, tape) = net.forward_train(&x_all)?;
            counters.forward += n_all as u64;
            let k = logits.shape()[1];
            let rows = |from: usize, len: usize| -> Tensor {
                let idx: Vec<usize> = (from..from + len).collect();
                let mut t = logits.select(&idx);
                if len == 0 {
                    t = Tensor::zeros(vec![0, k]);
                }
                t
            };
            let s_clean = rows(0, nc);
            let s_aug = obj.needs_cache().then(|| rows(nc, na));
            let na_eff = if obj.needs_cache() { na } else { 0 };
            let s_adv = x_adv.as_ref().map(|a| rows(nc + na_eff, a.batch().min(nc)));

            let loss = compute(
                &cfg.distill,
                &LossInputs {
                    labels: &labels,
                    student_clean: &s_clean,
                    teacher_clean: teacher_clean.as_ref(),
                    student_aug: s_aug.as_ref(),
                    teacher_aug: teacher_aug.as_ref(),
                    student_adv: s_adv.as_ref(),
                },
            )?;
            if !loss.value.is_finite() {
                return Err(Error::NonFinite(format!("{obj} loss at epoch {epoch}, batch {bi}")));
            }
            let mut grad = Vec::with_capacity(logits.len());
            grad.extend_from_slice(loss.clean.data());
            if let Some(g) = &loss.aug {
                grad.extend_from_slice(g.data());
            }
            if let Some(g) = &loss.adv {
                grad.extend_from_slice(g.data());
            }
            let grad = Tensor::new(logits.shape().to_vec(), grad)?;
            let (_, grads) = net.backward(&tape, &grad, false);
            counters.backward += n_all as u64;
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("{obj} gradient at epoch {epoch}, batch {bi}")));
            }
            let lr = cfg.schedule.rate(cfg.lr, step, total_steps);
            opt.step(net, &grads, lr);
            step += 1;
            loss_sum += loss.value * batch.len() as f64;
            loss_weight += batch.len();
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / loss_weight.max(1) as f64,
            forward: counters.forward,
            backward: counters.backward,
            attack_steps: counters.attack,
            wall_clock: start.elapsed().as_secs_f64(),
        };
        log::info!("{obj} epoch {epoch}: loss {:.4}", entry.loss);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// One row of the relative-cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub name: String,
    pub forward: u64,
    pub backward: u64,
    pub attack_steps: u64,
    /// Cost relative to the first (baseline) run.
    pub relative: f64,
}

/// Relative training cost of each run against the first one.
pub fn budget_report(runs: &[(&str, &TrainLog)]) -> Result<Vec<BudgetRow>> {
    let (_, base) = runs.first().ok_or_else(|| Error::Empty("budget report needs at least one run".into()))?;
    let epochs = base.epochs.len();
    if base.cost() == 0 {
        return Err(Error::InvalidArgument("baseline run has zero cost".into()));
    }
    runs.iter()
        .map(|(name, l)| {
            if l.epochs.len() != epochs {
                return Err(Error::InvalidArgument(format!(
                    "run `{name}` has {} epochs, baseline has {epochs}",
                    l.epochs.len()
                )));
            }
            Ok(BudgetRow {
                name: name.to_string(),
                forward: l.forward(),
                backward: l.backward(),
                attack_steps: l.attack_steps(),
                relative: l.cost() as f64 / base.cost() as f64,
            })
        })
        .collect()
}

pub fn budget_csv(rows: &[BudgetRow]) -> String {
    let mut s = String::from("run,forward,backward,attack_steps,relative_cost\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.4}", r.name, r.forward, r.backward, r.attack_steps, r.relative);
    }
    s
}

/// Objective-level sanity check used by the CLI before loading artifacts.
pub fn required_inputs(obj: Objective) -> Vec<&'static str> {
    let mut v = Vec::new();
    if obj.needs_teacher() {
        v.push("teacher");
    }
    if obj.needs_cache() {
        v.push("cache");
    }
    if obj.needs_discrete_attack() {
        v.push("discretizer");
    }
    v
}

#[cfg(test)]
mod tests;
