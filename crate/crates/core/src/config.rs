//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Later assignments override
//! earlier ones, which is how command-line flags are layered on top of a file.

use std::fmt::Display;
use std::str::FromStr;

use crate::adversary::{AttackConfig, Norm};
use crate::discretizer::DiscretizerConfig;
use crate::error::{Error, Result};
use crate::nn::{OptimizerKind, Schedule};
use crate::objectives::{DistillConfig, Objective};
use crate::trainer::TrainConfig;

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// A configuration settable from `key = value` pairs.
pub trait KvConfig {
    /// Returns `Ok(false)` when the key is not recognised.
    fn try_set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every key with its current value, in documentation order.
    fn entries(&self) -> Vec<(String, String)>;

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.try_set(key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config key `{key}`")))
        }
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

impl KvConfig for AttackConfig {
    fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epsilon" => self.epsilon = parse_epsilon(value)?,
            "attack_steps" => self.steps = parse_value(key, value)?,
            "step_size" => self.step_size = parse_value(key, value)?,
            "norm" => self.norm = value.parse::<Norm>()?,
            "retries" => self.retries = parse_value(key, value)?,
            "keep_rejected" => self.keep_rejected = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("epsilon", self.epsilon),
            kv("attack_steps", self.steps),
            kv("step_size", self.step_size),
            kv("norm", self.norm),
            kv("retries", self.retries),
            kv("keep_rejected", self.keep_rejected),
        ]
    }
}

/// Accepts plain reals and fractions such as `8/255`.
fn parse_epsilon(value: &str) -> Result<f64> {
    if let Some((a, b)) = value.split_once('/') {
        let a: f64 = parse_value("epsilon", a.trim())?;
        let b: f64 = parse_value("epsilon", b.trim())?;
        if b == 0.0 {
            return Err(Error::Config("epsilon denominator is zero".into()));
        }
        Ok(a / b)
    } else {
        parse_value("epsilon", value)
    }
}

impl KvConfig for DistillConfig {
    fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "objective" => self.objective = value.parse::<Objective>()?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "weight" => self.weight = parse_value(key, value)?,
            "weight_first_kl" => self.weight_first_kl = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("objective", self.objective),
            kv("temperature", self.temperature),
            kv("weight", self.weight),
            kv("weight_first_kl", self.weight_first_kl),
        ]
    }
}

impl KvConfig for DiscretizerConfig {
    fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "factor" => self.factor = parse_value(key, value)?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            "codebook_size" => self.codebook_size = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "commitment" => self.commitment = parse_value(key, value)?,
            "holdout" => self.holdout = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("factor", self.factor),
            kv("latent_dim", self.latent_dim),
            kv("codebook_size", self.codebook_size),
            kv("hidden", self.hidden),
            kv("epochs", self.epochs),
            kv("batch_size", self.batch_size),
            kv("lr", self.lr),
            kv("commitment", self.commitment),
            kv("holdout", self.holdout),
            kv("seed", self.seed),
        ]
    }
}

impl KvConfig for TrainConfig {
    fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "optimizer" => self.optimizer = value.parse::<OptimizerKind>()?,
            "momentum" | "weight_decay" => match &mut self.optimizer {
                OptimizerKind::Sgd { momentum, weight_decay } => {
                    let v = parse_value(key, value)?;
                    if key == "momentum" {
                        *momentum = v;
                    } else {
                        *weight_decay = v;
                    }
                }
                _ => return Err(Error::Config(format!("`{key}` only applies to the sgd optimizer"))),
            },
            "lr" => self.lr = parse_value(key, value)?,
            "schedule" => self.schedule = value.parse::<Schedule>()?,
            "seed" => self.seed = parse_value(key, value)?,
            "precompute_teacher" => self.precompute_teacher = parse_bool(key, value)?,
            _ => return Ok(self.distill.try_set(key, value)? || self.attack.try_set(key, value)?),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut v = vec![
            kv("epochs", self.epochs),
            kv("batch_size", self.batch_size),
            kv("optimizer", self.optimizer),
        ];
        if let OptimizerKind::Sgd { momentum, weight_decay } = self.optimizer {
            v.push(kv("momentum", momentum));
            v.push(kv("weight_decay", weight_decay));
        }
        v.extend([
            kv("lr", self.lr),
            kv("schedule", self.schedule),
            kv("seed", self.seed),
            kv("precompute_teacher", self.precompute_teacher),
        ]);
        v.extend(self.distill.entries());
        v.extend(self.attack.entries());
        v
    }
}
