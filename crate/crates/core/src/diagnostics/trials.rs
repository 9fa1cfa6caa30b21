//! Randomized instance suites for the lemma checks and the Gaussian
//! estimator, used by the `diagnose` command.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::*;
use crate::codec::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Smallest margin observed (slack, `rhs - lhs`, or `2% - relative error`).
    pub worst_margin: f64,
}

impl TrialSummary {
    pub fn all_passed(&self) -> bool {
        self.passed == self.total
    }
}

impl fmt::Display for TrialSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}/{} passed, worst margin {:.6e}", self.name, self.passed, self.total, self.worst_margin)
    }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn random_linear(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> LinearHypothesis {
    LinearHypothesis {
        weights: (0..classes * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect(),
    }
}

/// Random points of dimension `dim` with labels below `classes`.
pub fn random_support(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<SupportPoint> {
    (0..n)
        .map(|_| SupportPoint::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0..classes)))
        .collect()
}

/// `P` and `P'` drawn from a shared 16-point pool so supports overlap partially.
pub fn lemma31_instance(seed: u64) -> (LinearHypothesis, EmpiricalDistribution, EmpiricalDistribution) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<SupportPoint> = (0..16)
        .map(|i| SupportPoint::new(vec![(i % 4) as f64, (i / 4) as f64], rng.random_range(0..3)))
        .collect();
    let pick = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(1..=16);
        let pts: Vec<SupportPoint> = sample(rng, 16, k).into_iter().map(|i| pool[i].clone()).collect();
        let probs = random_probs(rng, k);
        EmpiricalDistribution::new(pts, probs).expect("valid by construction")
    };
    let p = pick(&mut rng);
    let q = if rng.random_bool(0.1) { p.clone() } else { pick(&mut rng) };
    (random_linear(&mut rng, 3, 2), p, q)
}

pub fn lemma31_trials(trials: usize, seed: u64) -> Result<TrialSummary> {
    let mut s = TrialSummary { name: "lemma31", passed: 0, total: trials, worst_margin: f64::INFINITY };
    for t in 0..trials {
        let (h, p, q) = lemma31_instance(derive_seed(&[seed, t as u64]));
        let rm = RiskModel::new(&h, LossKind::ZeroOne);
        let out = lemma31_check(&rm, &p, &q, &GroundMetric::scaled_to(&[&p, &q]))?;
        s.passed += out.holds as usize;
        s.worst_margin = s.worst_margin.min(out.slack);
    }
    Ok(s)
}

pub struct Lemma33Instance {
    pub hypothesis: LinearHypothesis,
    pub p: EmpiricalDistribution,
    pub perturbations: Vec<Vec<Vec<f64>>>,
    pub eps_b: f64,
}

/// 8 support points, 4 perturbations each inside a ball of radius `eps_b`.
pub fn lemma33_instance(seed: u64) -> Lemma33Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_support(&mut rng, 8, 2, 3);
    let probs = random_probs(&mut rng, 8);
    let eps_b = rng.random_range(0.05..1.0);
    let perturbations = pts
        .iter()
        .map(|pt| {
            (0..4)
                .map(|_| {
                    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = eps_b * rng.random_range(0.0..1.0f64);
                    vec![pt.features[0] + r * angle.cos(), pt.features[1] + r * angle.sin()]
                })
                .collect()
        })
        .collect();
    Lemma33Instance {
        hypothesis: random_linear(&mut rng, 3, 2),
        p: EmpiricalDistribution::new(pts, probs).expect("valid by construction"),
        perturbations,
        eps_b,
    }
}

pub fn lemma33_trials(trials: usize, seed: u64) -> Result<TrialSummary> {
    let mut s = TrialSummary { name: "lemma33", passed: 0, total: trials, worst_margin: f64::INFINITY };
    for t in 0..trials {
        let inst = lemma33_instance(derive_seed(&[seed, t as u64]));
        let rm = RiskModel::new(&inst.hypothesis, LossKind::ZeroOne);
        let out = lemma33_check(&rm, &inst.p, &inst.perturbations, inst.eps_b, &GroundMetric::new(1.0))?;
        s.passed += out.holds as usize;
        s.worst_margin = s.worst_margin.min(inst.eps_b - out.distance);
    }
    Ok(s)
}

pub struct Lemma34Instance {
    pub set1: Vec<EmpiricalDistribution>,
    pub set2: Vec<EmpiricalDistribution>,
    pub p_prime: EmpiricalDistribution,
}

/// Two sets sharing one distribution, all on 6-point supports.
pub fn lemma34_instance(seed: u64) -> Lemma34Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = |rng: &mut ChaCha8Rng| {
        let pts = random_support(rng, 6, 2, 2);
        let probs = random_probs(rng, 6);
        EmpiricalDistribution::new(pts, probs).expect("valid by construction")
    };
    let shared = dist(&mut rng);
    let n1 = rng.random_range(0..3);
    let n2 = rng.random_range(0..3);
    let mut set1 = vec![shared.clone()];
    set1.extend((0..n1).map(|_| dist(&mut rng)));
    let mut set2: Vec<_> = (0..n2).map(|_| dist(&mut rng)).collect();
    set2.push(shared);
    Lemma34Instance { set1, set2, p_prime: dist(&mut rng) }
}

pub fn lemma34_trials(trials: usize, seed: u64) -> Result<TrialSummary> {
    let mut s = TrialSummary { name: "lemma34", passed: 0, total: trials, worst_margin: f64::INFINITY };
    for t in 0..trials {
        let inst = lemma34_instance(derive_seed(&[seed, t as u64]));
        let out = lemma34_check(&inst.set1, &inst.set2, &inst.p_prime, mixture_map, &GroundMetric::new(1.0))?;
        s.passed += out.holds as usize;
        s.worst_margin = s.worst_margin.min(out.rhs - out.lhs);
    }
    Ok(s)
}

/// `n` equal-mass points at the conditional means of the quantile bins of
/// `N(mu, sigma^2)`.
pub fn discretized_gaussian(mu: f64, sigma: f64, n: usize) -> Result<EmpiricalDistribution> {
    let std = Normal::standard();
    let pdf = |z: f64| if z.is_finite() { (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() } else { 0.0 };
    let edges: Vec<f64> = (0..=n)
        .map(|i| match i {
            0 => f64::NEG_INFINITY,
            i if i == n => f64::INFINITY,
            i => std.inverse_cdf(i as f64 / n as f64),
        })
        .collect();
    let points = (0..n)
        .map(|i| {
            let z = n as f64 * (pdf(edges[i]) - pdf(edges[i + 1]));
            SupportPoint::new(vec![mu + sigma * z], 0)
        })
        .collect();
    EmpiricalDistribution::uniform(points)
}

/// Closed-form W2 against the transport LP on discretized Gaussians; a
/// trial passes when the relative gap is within 2%.
pub fn gaussian_trials(trials: usize, seed: u64, grid: usize) -> Result<TrialSummary> {
    let mut s = TrialSummary { name: "wasserstein", passed: 0, total: trials, worst_margin: f64::INFINITY };
    let w2 = GroundMetric { label_cost: 0.0, order: 2 };
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, t as u64]));
        let params: [(f64, f64); 2] =
            std::array::from_fn(|_| (rng.random_range(-3.0..3.0), rng.random_range(0.2..2.0)));
        let stats = params.map(|(m, sd)| {
            GaussianStats::new(vec![LayerStats { mean: vec![m], var: vec![sd * sd] }], 1).expect("valid")
        });
        let closed = wasserstein_gaussian(&stats[0], &stats[1])?;
        let p = discretized_gaussian(params[0].0, params[0].1, grid)?;
        let q = discretized_gaussian(params[1].0, params[1].1, grid)?;
        let lp = wasserstein_lp(&p, &q, &w2)?;
        let rel = (closed - lp).abs() / closed.max(f64::MIN_POSITIVE);
        s.passed += (rel <= 0.02) as usize;
        s.worst_margin = s.worst_margin.min(0.02 - rel);
    }
    Ok(s)
}
