//! Executable checks of the distribution-shift arguments behind the method:
//! risk functionals over finite distributions, exact total-variation and
//! Wasserstein distances, the finite-hypothesis generalization term, the
//! lemma checks, and Wasserstein estimates from batch-norm statistics.
//!
//! # Distribution text format
//!
//! One support point per line: `<probability> <label> <feature>...`.
//! Blank lines and `#` comments are ignored.

mod bn;
mod ot;
pub mod trials;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub use bn::{bn_stats, chart_csv, chart_data, parse_chart_csv, wasserstein_gaussian, ChartRow, GaussianStats, LayerStats, BN_STATS_BATCHES};
pub use ot::{transport, Transport, MASS_TOLERANCE};

use crate::error::{Error, Result};
use crate::model::argmax;

/// Tolerance on the probability simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Slack below zero tolerated when an inequality is checked in floating point.
pub const CHECK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoint {
    pub features: Vec<f64>,
    pub label: usize,
}

impl SupportPoint {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }

    fn key(&self) -> (usize, Vec<u64>) {
        // +0.0 and -0.0 are the same point
        (self.label, self.features.iter().map(|v| (v + 0.0).to_bits()).collect())
    }
}

/// A finite distribution over labeled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    points: Vec<SupportPoint>,
    probs: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(points: Vec<SupportPoint>, probs: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("distribution support".into()));
        }
        if points.len() != probs.len() {
            return Err(Error::shape(points.len(), probs.len()));
        }
        let dim = points[0].features.len();
        if points.iter().any(|p| p.features.len() != dim || p.features.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("support points need finite features of one dimension".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { points, probs })
    }

    pub fn uniform(points: Vec<SupportPoint>) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn points(&self) -> &[SupportPoint] {
        &self.points
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].features.len()
    }

    /// Weighted mixture; weights are normalized.
    pub fn mixture(parts: &[&EmpiricalDistribution], weights: &[f64]) -> Result<Self> {
        if parts.is_empty() || parts.len() != weights.len() {
            return Err(Error::InvalidArgument("mixture needs one weight per component".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
            return Err(Error::InvalidArgument("mixture weights must be non-negative with positive sum".into()));
        }
        let mut points = Vec::new();
        let mut probs = Vec::new();
        for (p, w) in parts.iter().zip(weights) {
            points.extend(p.points.iter().cloned());
            probs.extend(p.probs.iter().map(|q| q * w / total));
        }
        Self::new(points, probs)
    }

    /// Mass per distinct support point.
    fn masses(&self) -> BTreeMap<(usize, Vec<u64>), f64> {
        let mut m = BTreeMap::new();
        for (pt, p) in self.points.iter().zip(&self.probs) {
            *m.entry(pt.key()).or_insert(0.0) += p;
        }
        m
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut probs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::MalformedRecord { record: format!("line {}", n + 1), reason: what.into() };
            let mut f = line.split_whitespace();
            let p: f64 = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad probability"))?;
            let label: usize = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad label"))?;
            let features = f.map(|s| s.parse::<f64>().map_err(|_| bad("bad feature"))).collect::<Result<Vec<_>>>()?;
            points.push(SupportPoint { features, label });
            probs.push(p);
        }
        Self::new(points, probs)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (pt, p) in self.points.iter().zip(&self.probs) {
            write!(s, "{p} {}", pt.label).unwrap();
            for v in &pt.features {
                write!(s, " {v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingPath(path.to_path_buf()))?;
        Self::parse(&text)
    }
}

/// A hypothesis mapping feature vectors to class scores.
pub trait Hypothesis {
    fn scores(&self, features: &[f64]) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> Vec<f64>> Hypothesis for F {
    fn scores(&self, features: &[f64]) -> Vec<f64> {
        self(features)
    }
}

/// Affine scores `W x + b` with `W` stored row-major, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHypothesis {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Hypothesis for LinearHypothesis {
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(k, b)| b + self.weights[k * d..(k + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    ZeroOne,
    CrossEntropy,
}

pub struct RiskModel<'a> {
    pub hypothesis: &'a dyn Hypothesis,
    pub loss: LossKind,
}

impl<'a> RiskModel<'a> {
    pub fn new(hypothesis: &'a dyn Hypothesis, loss: LossKind) -> Self {
        Self { hypothesis, loss }
    }

    pub fn loss_at(&self, point: &SupportPoint) -> Result<f64> {
        let s = self.hypothesis.scores(&point.features);
        if point.label >= s.len() {
            return Err(Error::LabelOutOfRange { label: point.label, num_classes: s.len() });
        }
        Ok(match self.loss {
            LossKind::ZeroOne => (argmax(&s) != point.label) as u8 as f64,
            LossKind::CrossEntropy => {
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - s[point.label]
            }
        })
    }
}

/// Expected loss under `p`.
pub fn empirical_risk(rm: &RiskModel, p: &EmpiricalDistribution) -> Result<f64> {
    let mut r = 0.0;
    for (pt, w) in p.points.iter().zip(&p.probs) {
        r += w * rm.loss_at(pt)?;
    }
    Ok(r)
}

/// Ground metric `||x - x'||_2 + label_cost * [y != y']`, raised to `order`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundMetric {
    /// May be infinite to forbid moving mass across labels.
    pub label_cost: f64,
    pub order: u32,
}

impl GroundMetric {
    pub fn new(label_cost: f64) -> Self {
        Self { label_cost, order: 1 }
    }

    /// Label distance equal to the feature-space diameter of the given
    /// supports, or 1 when every point coincides.
    pub fn scaled_to(dists: &[&EmpiricalDistribution]) -> Self {
        let pts: Vec<&SupportPoint> = dists.iter().flat_map(|d| d.points.iter()).collect();
        let mut diam: f64 = 0.0;
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                diam = diam.max(euclidean(&a.features, &b.features));
            }
        }
        Self::new(if diam > 0.0 { diam } else { 1.0 })
    }

    pub fn distance(&self, a: &SupportPoint, b: &SupportPoint) -> f64 {
        let label = if a.label == b.label { 0.0 } else { self.label_cost };
        euclidean(&a.features, &b.features) + label
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact Wasserstein distance of order `metric.order` between finite distributions.
pub fn wasserstein_lp(p: &EmpiricalDistribution, q: &EmpiricalDistribution, metric: &GroundMetric) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape(p.dim(), q.dim()));
    }
    if metric.order == 0 {
        return Err(Error::InvalidArgument("Wasserstein order must be at least 1".into()));
    }
    let cost: Vec<Vec<f64>> = p
        .points
        .iter()
        .map(|a| q.points.iter().map(|b| metric.distance(a, b).powi(metric.order as i32)).collect())
        .collect();
    let t = transport(&p.probs, &q.probs, &cost)?;
    Ok(t.cost.max(0.0).powf(1.0 / metric.order as f64))
}

/// `sum |p_i - q_i|` over the union of supports (twice the largest event gap).
pub fn tv_distance(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> f64 {
    let mp = p.masses();
    let mut mq = q.masses();
    let mut total = 0.0;
    for (k, a) in mp {
        let b = mq.remove(&k).unwrap_or(0.0);
        total += (a - b).abs();
    }
    total + mq.values().sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCase {
    pub risk: f64,
    /// Candidates inside the ball.
    pub feasible: usize,
    /// Set when no candidate was feasible and the risk of `p` itself is reported.
    pub fell_back: bool,
}

fn feasible_risks(
    rm: &RiskModel,
    p: &EmpiricalDistribution,
    eps: f64,
    candidates: &[EmpiricalDistribution],
    metric: &GroundMetric,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for c in candidates {
        if wasserstein_lp(p, c, metric)? <= eps {
            out.push(empirical_risk(rm, c)?);
        }
    }
    Ok(out)
}

/// Largest risk over candidates within Wasserstein distance `eps` of `p`.
pub fn worst_case_risk(
    rm: &RiskModel,
    p: &EmpiricalDistribution,
    eps: f64,
    candidates: &[EmpiricalDistribution],
    metric: &GroundMetric,
) -> Result<WorstCase> {
    let risks = feasible_risks(rm, p, eps, candidates, metric)?;
    if risks.is_empty() {
        return Ok(WorstCase { risk: empirical_risk(rm, p)?, feasible: 0, fell_back: true });
    }
    let risk = risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(WorstCase { risk, feasible: risks.len(), fell_back: false })
}

/// Mean risk over candidates within the ball, the average-case counterpart.
pub fn expected_risk(
    rm: &RiskModel,
    p: &EmpiricalDistribution,
    eps: f64,
    candidates: &[EmpiricalDistribution],
    metric: &GroundMetric,
) -> Result<WorstCase> {
    let risks = feasible_risks(rm, p, eps, candidates, metric)?;
    if risks.is_empty() {
        return Ok(WorstCase { risk: empirical_risk(rm, p)?, feasible: 0, fell_back: true });
    }
    Ok(WorstCase { risk: risks.iter().sum::<f64>() / risks.len() as f64, feasible: risks.len(), fell_back: false })
}

/// `sqrt((ln |H| + ln(1/beta)) / 2n)` for a finite hypothesis class.
///
/// `beta = 1` is accepted so the degenerate limit evaluates to zero.
pub fn generalization_term(hypothesis_count: u64, n: u64, beta: f64) -> Result<f64> {
    if hypothesis_count == 0 || n == 0 || !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need |H| >= 1, n >= 1 and 0 < beta <= 1 (got {hypothesis_count}, {n}, {beta})"
        )));
    }
    Ok((((hypothesis_count as f64).ln() + (1.0 / beta).ln()) / (2.0 * n as f64)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma31 {
    pub holds: bool,
    /// `r(P) + tv(P, P') - r(P')`.
    pub slack: f64,
    /// Same with the Wasserstein distance in place of tv; reported only.
    pub w_slack: f64,
}

/// Checks `r(P') <= r(P) + tv(P, P')` for the zero-one loss.
pub fn lemma31_check(
    rm: &RiskModel,
    p: &EmpiricalDistribution,
    p_prime: &EmpiricalDistribution,
    metric: &GroundMetric,
) -> Result<Lemma31> {
    if rm.loss != LossKind::ZeroOne {
        return Err(Error::InvalidArgument("the tv bound is checked for the zero-one loss only".into()));
    }
    let (r, rp) = (empirical_risk(rm, p)?, empirical_risk(rm, p_prime)?);
    let slack = r + tv_distance(p, p_prime) - rp;
    let w_slack = r + wasserstein_lp(p, p_prime, metric)? - rp;
    Ok(Lemma31 { holds: slack >= -CHECK_TOLERANCE, slack, w_slack })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma33 {
    pub holds: bool,
    pub p_star: EmpiricalDistribution,
    pub adversarial_risk: f64,
    pub p_star_risk: f64,
    pub distance: f64,
}

/// Builds the pushforward `P*` that moves each support point to its
/// loss-maximizing perturbation, then checks that its risk equals the
/// adversarial risk and that `w(P, P*) <= eps_b`.
///
/// `perturbations[i]` lists candidate feature vectors for support point `i`
/// (the label is kept); ties go to the first candidate.
pub fn lemma33_check(
    rm: &RiskModel,
    p: &EmpiricalDistribution,
    perturbations: &[Vec<Vec<f64>>],
    eps_b: f64,
    metric: &GroundMetric,
) -> Result<Lemma33> {
    if perturbations.len() != p.len() {
        return Err(Error::shape(p.len(), perturbations.len()));
    }
    let mut adversarial_risk = 0.0;
    let mut moved = Vec::with_capacity(p.len());
    for ((pt, w), cands) in p.points.iter().zip(&p.probs).zip(perturbations) {
        if cands.is_empty() {
            return Err(Error::Empty("perturbation set".into()));
        }
        let mut best: Option<(f64, &Vec<f64>)> = None;
        for c in cands {
            let d = euclidean(c, &pt.features);
            if c.len() != pt.features.len() || d > eps_b {
                return Err(Error::InvalidArgument(format!("perturbation at distance {d} exceeds radius {eps_b}")));
            }
            let l = rm.loss_at(&SupportPoint::new(c.clone(), pt.label))?;
            if best.is_none_or(|(b, _)| l > b) {
                best = Some((l, c));
            }
        }
        let (l, x) = best.expect("non-empty");
        adversarial_risk += w * l;
        moved.push(SupportPoint::new(x.clone(), pt.label));
    }
    let p_star = EmpiricalDistribution::new(moved, p.probs.clone())?;
    let p_star_risk = empirical_risk(rm, &p_star)?;
    let distance = wasserstein_lp(p, &p_star, metric)?;
    let holds = (adversarial_risk - p_star_risk).abs() <= CHECK_TOLERANCE && distance <= eps_b + CHECK_TOLERANCE;
    Ok(Lemma33 { holds, p_star, adversarial_risk, p_star_risk, distance })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma34 {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Compares `|w(D(S1), P') - w(D(S2), P')|` against
/// `2 (sup_{S1} w(P, P') + sup_{S2} w(P, P'))`.
pub fn lemma34_check<D>(
    set1: &[EmpiricalDistribution],
    set2: &[EmpiricalDistribution],
    p_prime: &EmpiricalDistribution,
    augment: D,
    metric: &GroundMetric,
) -> Result<Lemma34>
where
    D: Fn(&[EmpiricalDistribution]) -> Result<EmpiricalDistribution>,
{
    let shared = set1.iter().any(|a| set2.iter().any(|b| tv_distance(a, b) <= CHECK_TOLERANCE));
    if !shared {
        return Err(Error::InvalidArgument("the two distribution sets do not intersect".into()));
    }
    let sup = |set: &[EmpiricalDistribution]| -> Result<f64> {
        set.iter().try_fold(0.0f64, |m, p| Ok(m.max(wasserstein_lp(p, p_prime, metric)?)))
    };
    let lhs = (wasserstein_lp(&augment(set1)?, p_prime, metric)? - wasserstein_lp(&augment(set2)?, p_prime, metric)?)
        .abs();
    let rhs = 2.0 * (sup(set1)? + sup(set2)?);
    Ok(Lemma34 { lhs, rhs, holds: lhs <= rhs + CHECK_TOLERANCE })
}

/// Uniform mixture of a distribution set; the synthetic stand-in for an
/// augmentation map.
pub fn mixture_map(set: &[EmpiricalDistribution]) -> Result<EmpiricalDistribution> {
    let parts: Vec<&EmpiricalDistribution> = set.iter().collect();
    EmpiricalDistribution::mixture(&parts, &vec![1.0; parts.len()])
}
