//! Wasserstein estimates from batch-norm statistics.
//!
//! # Chart CSV
//!
//! Header `model,suite,wasserstein,accuracy`, one row per (model, suite),
//! sorted by model then suite.

use std::fmt::Write as _;

use crate::data::{batch_tensor, Dataset};
use crate::error::{Error, Result};
use crate::evaluator::top1;
use crate::model::Model;
use crate::nn::Layer;

/// Number of mini-batches used for a statistics pass by default.
pub const BN_STATS_BATCHES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel statistics of the inputs to each normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub layers: Vec<LayerStats>,
    pub batches: usize,
}

impl GaussianStats {
    pub fn new(layers: Vec<LayerStats>, batches: usize) -> Result<Self> {
        if batches == 0 {
            return Err(Error::InvalidArgument("statistics need at least one batch".into()));
        }
        for l in &layers {
            if l.mean.len() != l.var.len() {
                return Err(Error::shape(l.mean.len(), l.var.len()));
            }
            if l.var.iter().any(|v| !(*v >= 0.0)) || l.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidArgument("variances must be non-negative and means finite".into()));
            }
        }
        Ok(Self { layers, batches })
    }
}

/// Diagonal-Gaussian W2 per layer, averaged over layers.
pub fn wasserstein_gaussian(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.layers.len() != b.layers.len()
        || a.layers.iter().zip(&b.layers).any(|(x, y)| x.mean.len() != y.mean.len())
    {
        return Err(Error::InvalidArgument("statistics have different layer layouts".into()));
    }
    if a.layers.is_empty() {
        return Err(Error::Empty("statistics without layers".into()));
    }
    let total: f64 = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| {
            (0..x.mean.len())
                .map(|c| {
                    let dm = x.mean[c] - y.mean[c];
                    let ds = x.var[c].sqrt() - y.var[c].sqrt();
                    dm * dm + ds * ds
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / a.layers.len() as f64)
}

/// Running (count, mean, M2) per channel, merged batch by batch.
#[derive(Clone)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn merge_batch(&mut self, x: &crate::Tensor) {
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let nb = (n * hw) as f64;
        if nb == 0.0 {
            return;
        }
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                sum += x.data()[base..base + hw].iter().sum::<f64>();
            }
            let mb = sum / nb;
            let mut m2b = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                m2b += x.data()[base..base + hw].iter().map(|v| (v - mb) * (v - mb)).sum::<f64>();
            }
            let delta = mb - self.mean[ch];
            let tot = self.count + nb;
            self.mean[ch] += delta * nb / tot;
            self.m2[ch] += m2b + delta * delta * self.count * nb / tot;
        }
        self.count += nb;
    }
}

/// Statistics over exactly `n_batches` batches of `batch_size` examples,
/// taken cyclically in dataset order.
pub fn bn_stats(model: &Model, ds: &Dataset, n_batches: usize, batch_size: usize) -> Result<GaussianStats> {
    if !model.net.has_batch_norm() {
        return Err(Error::Unsupported(format!("model `{}` has no normalization layers", model.arch)));
    }
    if ds.is_empty() || n_batches == 0 || batch_size == 0 {
        return Err(Error::Empty("statistics need data, batches and a batch size".into()));
    }
    let bn_layers: Vec<(usize, usize)> = model
        .net
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::BatchNorm2d(b) => Some((i, b.channels)),
            _ => None,
        })
        .collect();
    let mut moments: Vec<Moments> = bn_layers
        .iter()
        .map(|&(_, c)| Moments { count: 0.0, mean: vec![0.0; c], m2: vec![0.0; c] })
        .collect();
    let mut cursor = 0;
    for _ in 0..n_batches {
        let idx: Vec<usize> = (0..batch_size).map(|k| (cursor + k) % ds.len()).collect();
        cursor = (cursor + batch_size) % ds.len();
        let x = batch_tensor(idx.iter().map(|&i| &ds.examples[i].image))?;
        model.net.forward_visit(&x, |i, _, input| {
            if let Some(k) = bn_layers.iter().position(|&(j, _)| j == i) {
                moments[k].merge_batch(input);
            }
        })?;
    }
    let layers = moments
        .into_iter()
        .map(|m| LayerStats { var: m.m2.iter().map(|v| v / m.count).collect(), mean: m.mean })
        .collect();
    GaussianStats::new(layers, n_batches)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartRow {
    pub model: String,
    pub suite: String,
    pub wasserstein: f64,
    pub accuracy: f64,
}

/// Distance between clean and suite statistics against suite accuracy.
pub fn chart_data(
    models: &[(String, &Model)],
    clean: &Dataset,
    suites: &[(String, Dataset)],
    n_batches: usize,
    batch_size: usize,
) -> Result<Vec<ChartRow>> {
    let mut rows = Vec::new();
    for (name, m) in models {
        let reference = bn_stats(m, clean, n_batches, batch_size)?;
        for (suite, ds) in suites {
            let s = bn_stats(m, ds, n_batches, batch_size)?;
            rows.push(ChartRow {
                model: name.clone(),
                suite: suite.clone(),
                wasserstein: wasserstein_gaussian(&reference, &s)?,
                accuracy: top1(*m, ds)?,
            });
        }
    }
    rows.sort_by(|a, b| (&a.model, &a.suite).cmp(&(&b.model, &b.suite)));
    Ok(rows)
}

pub fn chart_csv(rows: &[ChartRow]) -> String {
    let mut s = String::from("model,suite,wasserstein,accuracy\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.model, r.suite, r.wasserstein, r.accuracy).unwrap();
    }
    s
}

pub fn parse_chart_csv(text: &str) -> Result<Vec<ChartRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some("model,suite,wasserstein,accuracy") {
        return Err(Error::Format("chart header must be `model,suite,wasserstein,accuracy`".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let [model, suite, w, a] = f.as_slice() else {
                return Err(Error::Format(format!("bad chart row `{l}`")));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
            Ok(ChartRow { model: model.to_string(), suite: suite.to_string(), wasserstein: num(w)?, accuracy: num(a)? })
        })
        .collect()
}
