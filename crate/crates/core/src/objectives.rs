//! Training objectives as pure functions of logits and labels.
//!
//! Every loss returns its value together with the gradient with respect to
//! each student-logit argument, in argument order. Terms are means over
//! their own batch; a term over an empty batch contributes 0.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::softmax_in_place;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Cross-entropy on clean data.
    Ce,
    /// Cross-entropy plus tempered KL to the teacher on clean data.
    Kd,
    /// KD plus tempered KL on cached discretized adversarial samples.
    Dad,
    /// Adversarial training with pixel-space student attacks.
    At,
    /// Adversarial training with discretized student attacks.
    Dat,
    /// Adversarially robust distillation.
    Ard,
    /// Robust soft-label adversarial distillation.
    Rslad,
    /// DAD plus a cross-entropy term on discretized student attacks.
    DatDad,
}

impl Objective {
    pub const ALL: [Objective; 8] = [
        Objective::Ce,
        Objective::Kd,
        Objective::Dad,
        Objective::At,
        Objective::Dat,
        Objective::Ard,
        Objective::Rslad,
        Objective::DatDad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Kd => "kd",
            Objective::Dad => "dad",
            Objective::At => "at",
            Objective::Dat => "dat",
            Objective::Ard => "ard",
            Objective::Rslad => "rslad",
            Objective::DatDad => "dat_dad",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Objective::Kd | Objective::Dad | Objective::Ard | Objective::Rslad | Objective::DatDad)
    }

    pub fn needs_cache(self) -> bool {
        matches!(self, Objective::Dad | Objective::DatDad)
    }

    /// Online attack on the student through the discretizer.
    pub fn needs_discrete_attack(self) -> bool {
        matches!(self, Objective::Dat | Objective::DatDad)
    }

    /// Online pixel-space attack on the student.
    pub fn needs_pixel_attack(self) -> bool {
        matches!(self, Objective::At | Objective::Ard | Objective::Rslad)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['+', '-'], "_");
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub weight: f64,
    pub objective: Objective,
    /// Multiply the clean-sample KL term of DAD by `weight` as well.
    pub weight_first_kl: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 4.0, weight: 0.5, objective: Objective::Dad, weight_first_kl: true }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::InvalidArgument(format!("weight must lie in [0, 1], got {}", self.weight)));
        }
        Ok(())
    }

    fn first_kl_weight(&self) -> f64 {
        if self.weight_first_kl {
            self.weight
        } else {
            1.0
        }
    }
}

/// A loss value and its gradients, one per student-logit argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

impl Loss {
    fn single(value: f64, grad: Tensor) -> Self {
        Self { value, grads: vec![grad] }
    }

    fn scaled(mut self, w: f64) -> Self {
        self.value *= w;
        self.scaled_grad(w)
    }

    fn scaled_grad(mut self, w: f64) -> Self {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= w;
            }
        }
        self
    }
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

fn classes(logits: &Tensor) -> Result<usize> {
    match logits.shape() {
        [_, k] if *k > 0 => Ok(*k),
        s => Err(Error::shape("[batch, classes]", s)),
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

fn log_softmax_row(row: &[f64], t: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|&v| ((v - max) / t).exp()).sum::<f64>().ln();
    row.iter().map(|&v| (v - max) / t - lse).collect()
}

/// Mean over the batch of `-log softmax(logits)[y]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Loss> {
    let k = classes(logits)?;
    let n = logits.batch();
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    let mut grad = logits.clone();
    let mut value = 0.0;
    for (row, (g, &y)) in logits.data().chunks(k).zip(grad.data_mut().chunks_mut(k).zip(labels)) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, num_classes: k });
        }
        value -= log_softmax_row(row, 1.0)[y];
        softmax_in_place(g, 1.0);
        g[y] -= 1.0;
    }
    if n == 0 {
        return Ok(Loss::single(0.0, grad));
    }
    Ok(Loss::single(value / n as f64, grad).scaled_grad(1.0 / n as f64))
}

/// `t^2 * KL(softmax(teacher / t) || softmax(student / t))`, batch mean.
pub fn kl_temp(student: &Tensor, teacher: &Tensor, t: f64) -> Result<Loss> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {t}")));
    }
    let k = classes(student)?;
    same_shape(student, teacher)?;
    let n = student.batch();
    let mut grad = student.clone();
    let mut value = 0.0;
    for ((s, tr), g) in student.data().chunks(k).zip(teacher.data().chunks(k)).zip(grad.data_mut().chunks_mut(k)) {
        let ls = log_softmax_row(s, t);
        let lt = log_softmax_row(tr, t);
        let mut kl = 0.0;
        for i in 0..k {
            let pt = lt[i].exp();
            if pt > 0.0 {
                kl += pt * (lt[i] - ls[i]);
            }
            g[i] = t * (ls[i].exp() - pt);
        }
        // KL is non-negative; clamp away rounding noise
        value += t * t * kl.max(0.0);
    }
    if n == 0 {
        return Ok(Loss::single(0.0, grad));
    }
    Ok(Loss::single(value / n as f64, grad).scaled_grad(1.0 / n as f64))
}

/// `CE(student, y) + a * KL_t(student, teacher)`.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, labels: &[usize], cfg: &DistillConfig) -> Result<Loss> {
    cfg.validate()?;
    let mut ce = cross_entropy(student, labels)?;
    let kl = kl_temp(student, teacher, cfg.temperature)?.scaled(cfg.weight);
    ce.value += kl.value;
    add_into(&mut ce.grads[0], &kl.grads[0]);
    Ok(ce)
}

/// `CE(θ_clean, y) + a * KL_t(θ_clean, φ_clean) + a * KL_t(θ_aug, φ_aug)`.
///
/// Gradients: `[clean, aug]`. No label term touches the augmented samples.
pub fn dad_loss(
    student_clean: &Tensor,
    teacher_clean: &Tensor,
    student_aug: &Tensor,
    teacher_aug: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Loss> {
    cfg.validate()?;
    let mut clean = cross_entropy(student_clean, labels)?;
    let kl1 = kl_temp(student_clean, teacher_clean, cfg.temperature)?.scaled(cfg.first_kl_weight());
    let kl2 = kl_temp(student_aug, teacher_aug, cfg.temperature)?.scaled(cfg.weight);
    add_into(&mut clean.grads[0], &kl1.grads[0]);
    Ok(Loss { value: clean.value + kl1.value + kl2.value, grads: vec![clean.grads.remove(0), kl2.grads[0].clone()] })
}

/// `CE(θ_clean, y) + CE(θ_adv, y)`. Gradients: `[clean, adv]`.
pub fn at_loss(student_clean: &Tensor, student_adv: &Tensor, labels: &[usize]) -> Result<Loss> {
    let a = cross_entropy(student_clean, labels)?;
    let b = cross_entropy(student_adv, labels)?;
    Ok(Loss { value: a.value + b.value, grads: vec![a.grads[0].clone(), b.grads[0].clone()] })
}

/// Same algebraic form as [`at_loss`] with discretized adversarial logits.
pub fn dat_loss(student_clean: &Tensor, student_disc_adv: &Tensor, labels: &[usize]) -> Result<Loss> {
    at_loss(student_clean, student_disc_adv, labels)
}

/// `CE(θ_clean, y) + a * KL_t(θ_aug, φ_clean)`. Gradients: `[aug, clean]`.
pub fn ard_loss(
    student_aug: &Tensor,
    teacher_clean: &Tensor,
    student_clean: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Loss> {
    cfg.validate()?;
    let ce = cross_entropy(student_clean, labels)?;
    let kl = kl_temp(student_aug, teacher_clean, cfg.temperature)?.scaled(cfg.weight);
    Ok(Loss { value: ce.value + kl.value, grads: vec![kl.grads[0].clone(), ce.grads[0].clone()] })
}

/// `KL_t(θ_clean, φ_clean) + a * KL_t(θ_aug, φ_clean)`. Gradients: `[clean, aug]`.
pub fn rslad_loss(
    student_clean: &Tensor,
    student_aug: &Tensor,
    teacher_clean: &Tensor,
    cfg: &DistillConfig,
) -> Result<Loss> {
    cfg.validate()?;
    let a = kl_temp(student_clean, teacher_clean, cfg.temperature)?;
    let b = kl_temp(student_aug, teacher_clean, cfg.temperature)?.scaled(cfg.weight);
    Ok(Loss { value: a.value + b.value, grads: vec![a.grads[0].clone(), b.grads[0].clone()] })
}

/// DAD plus `a * CE(θ(Q(x'_student)), y)`. Gradients: `[clean, aug, student_adv]`.
#[allow(clippy::too_many_arguments)]
pub fn dat_dad_loss(
    student_clean: &Tensor,
    teacher_clean: &Tensor,
    student_aug: &Tensor,
    teacher_aug: &Tensor,
    student_adv: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Loss> {
    let mut dad = dad_loss(student_clean, teacher_clean, student_aug, teacher_aug, labels, cfg)?;
    let adv = cross_entropy(student_adv, labels)?.scaled(cfg.weight);
    dad.value += adv.value;
    dad.grads.push(adv.grads[0].clone());
    Ok(dad)
}

/// Logit sets available for one batch. Which fields are required depends on
/// the objective.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub labels: &'a [usize],
    pub student_clean: &'a Tensor,
    pub teacher_clean: Option<&'a Tensor>,
    /// Student logits on cached augmented samples.
    pub student_aug: Option<&'a Tensor>,
    pub teacher_aug: Option<&'a Tensor>,
    /// Student logits on its own (pixel or discretized) adversarial examples.
    pub student_adv: Option<&'a Tensor>,
}

/// Gradients routed back to the inputs that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedLoss {
    pub value: f64,
    pub clean: Tensor,
    pub aug: Option<Tensor>,
    pub adv: Option<Tensor>,
}

fn need<'a>(v: Option<&'a Tensor>, what: &str, obj: Objective) -> Result<&'a Tensor> {
    v.ok_or_else(|| Error::InvalidArgument(format!("objective {obj} needs {what}")))
}

/// Dispatches on `cfg.objective`.
pub fn compute(cfg: &DistillConfig, inp: &LossInputs<'_>) -> Result<RoutedLoss> {
    cfg.validate()?;
    let o = cfg.objective;
    let y = inp.labels;
    let sc = inp.student_clean;
    let routed = |value, clean, aug, adv| RoutedLoss { value, clean, aug, adv };
    Ok(match o {
        Objective::Ce => {
            let mut l = cross_entropy(sc, y)?;
            routed(l.value, l.grads.remove(0), None, None)
        }
        Objective::Kd => {
            let mut l = kd_loss(sc, need(inp.teacher_clean, "teacher logits", o)?, y, cfg)?;
            routed(l.value, l.grads.remove(0), None, None)
        }
        Objective::Dad => {
            let mut l = dad_loss(
                sc,
                need(inp.teacher_clean, "teacher logits", o)?,
                need(inp.student_aug, "augmented student logits", o)?,
                need(inp.teacher_aug, "augmented teacher logits", o)?,
                y,
                cfg,
            )?;
            let aug = l.grads.pop();
            routed(l.value, l.grads.remove(0), aug, None)
        }
        Objective::At | Objective::Dat => {
            let mut l = at_loss(sc, need(inp.student_adv, "adversarial student logits", o)?, y)?;
            let adv = l.grads.pop();
            routed(l.value, l.grads.remove(0), None, adv)
        }
        Objective::Ard => {
            let mut l = ard_loss(
                need(inp.student_adv, "adversarial student logits", o)?,
                need(inp.teacher_clean, "teacher logits", o)?,
                sc,
                y,
                cfg,
            )?;
            let clean = l.grads.pop().expect("two gradients");
            routed(l.value, clean, None, l.grads.pop())
        }
        Objective::Rslad => {
            let mut l = rslad_loss(
                sc,
                need(inp.student_adv, "adversarial student logits", o)?,
                need(inp.teacher_clean, "teacher logits", o)?,
                cfg,
            )?;
            let adv = l.grads.pop();
            routed(l.value, l.grads.remove(0), None, adv)
        }
        Objective::DatDad => {
            let mut l = dat_dad_loss(
                sc,
                need(inp.teacher_clean, "teacher logits", o)?,
                need(inp.student_aug, "augmented student logits", o)?,
                need(inp.teacher_aug, "augmented teacher logits", o)?,
                need(inp.student_adv, "adversarial student logits", o)?,
                y,
                cfg,
            )?;
            let adv = l.grads.pop();
            let aug = l.grads.pop();
            routed(l.value, l.grads.remove(0), aug, adv)
        }
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        Tensor::new(vec![rows.len(), k], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn cross_entropy_basic_cases() {
        let peaked = t(&[&[50.0, 0.0, 0.0]]);
        assert!(cross_entropy(&peaked, &[0]).unwrap().value < 1e-6);
        let uniform = t(&[&[1.5; 7], &[1.5; 7]]);
        assert_eq!(cross_entropy(&uniform, &[3, 6]).unwrap().value, 7f64.ln());
        assert!(matches!(cross_entropy(&uniform, &[7, 0]), Err(Error::LabelOutOfRange { .. })));
        assert!(cross_entropy(&uniform, &[0]).is_err());
        let empty = Tensor::zeros(vec![0, 3]);
        assert_eq!(cross_entropy(&empty, &[]).unwrap().value, 0.0);
    }

    #[test]
    fn two_class_kl_closed_form() {
        let p = [2f64.exp() / (2f64.exp() + 1.0), 1.0 / (2f64.exp() + 1.0)];
        let q = [p[1], p[0]];
        let want = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        let got = kl_temp(&t(&[&[0.0, 2.0]]), &t(&[&[2.0, 0.0]]), 1.0).unwrap().value;
        assert!((got - want).abs() < 1e-12);
        assert!((got - 2.0 * (2f64.exp() - 1.0) / (2f64.exp() + 1.0)).abs() < 1e-12);
        let same = t(&[&[0.3, -1.0, 2.0]]);
        assert_eq!(kl_temp(&same, &same, 4.0).unwrap().value, 0.0);
        assert!(kl_temp(&same, &same, 0.0).is_err());
    }

    #[test]
    fn weight_validation() {
        let x = t(&[&[0.0, 1.0]]);
        let bad = DistillConfig { weight: 1.5, ..Default::default() };
        assert!(kd_loss(&x, &x, &[0], &bad).is_err());
        let bad_t = DistillConfig { temperature: -1.0, ..Default::default() };
        assert!(kd_loss(&x, &x, &[0], &bad_t).is_err());
    }

    #[test]
    fn objective_names_roundtrip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        assert_eq!("DAT+DAD".parse::<Objective>().unwrap(), Objective::DatDad);
        assert!("dist".parse::<Objective>().is_err());
    }

    #[test]
    fn compute_requires_inputs() {
        let x = t(&[&[0.0, 1.0]]);
        let inp = LossInputs {
            labels: &[0],
            student_clean: &x,
            teacher_clean: None,
            student_aug: None,
            teacher_aug: None,
            student_adv: None,
        };
        assert!(compute(&DistillConfig { objective: Objective::Ce, ..Default::default() }, &inp).is_ok());
        assert!(compute(&DistillConfig { objective: Objective::Kd, ..Default::default() }, &inp).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_non_negative_and_shift_invariant(
            s in proptest::collection::vec(-20.0f64..20.0, 8),
            tt in proptest::collection::vec(-20.0f64..20.0, 8),
            shift in -100.0f64..100.0,
            temp in 0.5f64..8.0,
        ) {
            let a = Tensor::new(vec![2, 4], s.clone()).unwrap();
            let b = Tensor::new(vec![2, 4], tt).unwrap();
            let v = kl_temp(&a, &b, temp).unwrap().value;
            prop_assert!(v >= 0.0 && v.is_finite());
            let shifted = Tensor::new(vec![2, 4], s.iter().map(|x| x + shift).collect()).unwrap();
            prop_assert!((kl_temp(&shifted, &b, temp).unwrap().value - v).abs() < 1e-6);
        }
    }
}
