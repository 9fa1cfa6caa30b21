use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Dataset, LabeledExample};
use crate::discretizer::DiscretizerConfig;
use crate::model::Model;
use crate::nn::Arch;

/// Two-class logistic model: logits `(0, w.x + b)`.
struct Logistic {
    w: Vec<f64>,
    b: f64,
    shape: [usize; 3],
}

impl Classifier for Logistic {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.batch();
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let s: f64 = images.sample(i).iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b;
            out.extend([0.0, s]);
        }
        Tensor::new(vec![n, 2], out)
    }

    fn input_grad(&self, images: &Tensor, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = Tensor::zeros(images.shape().to_vec());
        for i in 0..images.batch() {
            let gs = grad_logits.sample(i)[1];
            for (o, w) in g.sample_mut(i).iter_mut().zip(&self.w) {
                *o = gs * w;
            }
        }
        Ok(g)
    }
}

fn logistic(seed: u64, shape: [usize; 3]) -> Logistic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Logistic { w: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), b: rng.random_range(-0.5..0.5), shape }
}

fn random_batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], (0..len).map(|_| rng.random()).collect()).unwrap()
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_gradient_and_zero_budget_leave_input_unchanged() {
    let shape = [1, 4, 4];
    let flat = Logistic { w: vec![0.0; 16], b: 0.3, shape };
    let x = random_batch(3, shape, 1);
    let cfg = AttackConfig::default();
    assert_eq!(attack(&flat, &x, &[0, 1, 0], &cfg).unwrap(), x);
    let m = logistic(2, shape);
    let zero = AttackConfig { epsilon: 0.0, ..cfg };
    assert_eq!(attack(&m, &x, &[0, 1, 0], &zero).unwrap(), x);
    let l2 = AttackConfig { norm: Norm::L2, ..cfg };
    assert_eq!(attack(&flat, &x, &[0, 1, 0], &l2).unwrap(), x);
}

#[test]
fn single_linf_step_matches_closed_form() {
    let shape = [1, 3, 3];
    let m = logistic(5, shape);
    let x = random_batch(20, shape, 6);
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    for eps in [0.01, 8.0 / 255.0, 0.5] {
        let cfg = AttackConfig { epsilon: eps, ..Default::default() };
        let adv = attack(&m, &x, &labels, &cfg).unwrap();
        for i in 0..20 {
            let xs = x.sample(i);
            let s: f64 = xs.iter().zip(&m.w).map(|(a, b)| a * b).sum::<f64>() + m.b;
            let p1 = 1.0 / (1.0 + (-s).exp());
            let coef = p1 - labels[i] as f64;
            for (j, &xj) in xs.iter().enumerate() {
                let g = coef * m.w[j];
                let want = (xj + 0.1 * g.signum()).clamp(xj - eps, xj + eps).clamp(0.0, 1.0);
                assert!((adv.sample(i)[j] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn attack_rejects_bad_inputs() {
    let shape = [1, 2, 2];
    let m = logistic(0, shape);
    let x = random_batch(1, shape, 0);
    assert!(attack(&m, &x, &[0, 1], &AttackConfig::default()).is_err());
    assert!(attack(&m, &x, &[0], &AttackConfig { steps: 0, ..Default::default() }).is_err());
    assert!(attack(&m, &x, &[0], &AttackConfig { step_size: 0.0, ..Default::default() }).is_err());
    assert!(attack(&m, &x, &[0], &AttackConfig { epsilon: -1.0, ..Default::default() }).is_err());
    let mut outside = x.clone();
    outside.data_mut()[0] = 1.5;
    assert!(attack(&m, &outside, &[0], &AttackConfig::default()).is_err());
}

proptest! {
    #[test]
    fn budget_is_respected_exactly(
        eps in 0.0f64..0.3,
        step in 0.001f64..0.5,
        steps in 1u32..4,
        seed in any::<u64>(),
        l2 in any::<bool>(),
    ) {
        let shape = [1, 3, 3];
        let m = logistic(seed, shape);
        let x = random_batch(4, shape, seed ^ 1);
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: step,
            steps,
            norm: if l2 { Norm::L2 } else { Norm::Linf },
            ..Default::default()
        };
        let adv = attack(&m, &x, &[0, 1, 1, 0], &cfg).unwrap();
        for i in 0..4 {
            let (a, b) = (adv.sample(i), x.sample(i));
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            if l2 {
                prop_assert!(l2_dist(a, b) <= eps);
            } else {
                prop_assert!(linf(a, b) <= eps);
            }
        }
    }
}

fn toy_disc(seed: u64) -> Discretizer {
    Discretizer::new(1, &DiscretizerConfig { factor: 2, latent_dim: 3, codebook_size: 16, hidden: 4, seed, ..Default::default() })
        .unwrap()
}

#[test]
fn student_attack_properties() {
    let shape = [1, 4, 4];
    let disc = toy_disc(0);
    let x = random_batch(3, shape, 2);
    let flat = Logistic { w: vec![0.0; 16], b: 0.0, shape };
    let cfg = AttackConfig { epsilon: 0.05, ..Default::default() };
    let out = student_attack(&flat, &disc, &x, &[0, 1, 0], &cfg).unwrap();
    let qq = disc.discretize(&disc.discretize(&x).unwrap()).unwrap();
    assert_eq!(out.discretized, qq);

    let m = logistic(3, shape);
    let out = student_attack(&m, &disc, &x, &[0, 1, 0], &cfg).unwrap();
    for i in 0..3 {
        assert!(linf(out.perturbed.sample(i), out.center.sample(i)) <= cfg.epsilon);
    }
}

#[test]
fn opposite_models_give_different_examples() {
    let shape = [1, 4, 4];
    let disc = toy_disc(1);
    let teacher = logistic(4, shape);
    let student = Logistic { w: teacher.w.iter().map(|v| -v).collect(), b: -teacher.b, shape };
    let x = random_batch(1, shape, 7);
    let cfg = AttackConfig { epsilon: 0.1, ..Default::default() };
    let t = discrete_attack(&teacher, &disc, &x, &[1], &cfg, None).unwrap();
    let s = student_attack(&student, &disc, &x, &[1], &cfg).unwrap();
    assert_ne!(t.perturbed, s.perturbed);
}

fn toy_dataset(n: usize, shape: [usize; 3], seed: u64) -> Dataset {
    let x = random_batch(n, shape, seed);
    let examples = (0..n)
        .map(|i| LabeledExample { image: Image::from_f64(shape, x.sample(i)).unwrap(), label: i % 2, id: 10 + i as u64 })
        .collect();
    Dataset::new(vec!["a".into(), "b".into()], examples).unwrap()
}

#[test]
fn misclassifying_teacher_rejects_everything() {
    let shape = [1, 4, 4];
    let disc = toy_disc(2);
    // logit for class 1 is always hugely negative and every label is 1
    let teacher = Logistic { w: vec![0.0; 16], b: -100.0, shape };
    let ds = toy_dataset(6, shape, 3);
    for ex in &ds.examples {
        let r = dad_generate(&teacher, &disc, &ex.image, 1, ex.id, &AttackConfig::default(), 0).unwrap();
        assert!(!r.accepted);
        assert!(r.image.in_unit_range());
    }
}

#[test]
fn zero_budget_generates_double_discretization() {
    let shape = [1, 4, 4];
    let disc = toy_disc(3);
    let teacher = logistic(8, shape);
    let ds = toy_dataset(4, shape, 4);
    let cfg = AttackConfig { epsilon: 0.0, ..Default::default() };
    for ex in &ds.examples {
        let r = dad_generate(&teacher, &disc, &ex.image, ex.label, ex.id, &cfg, 0).unwrap();
        let x = batch_tensor([&ex.image]).unwrap();
        let qq = disc.discretize(&disc.discretize(&x).unwrap()).unwrap();
        assert_eq!(r.image, Image::from_f64(shape, qq.data()).unwrap());
        let pred = predict_one(&teacher, &r.image);
        assert_eq!(r.accepted, pred == ex.label);
    }
}

fn predict_one<C: Classifier>(m: &C, img: &Image) -> usize {
    crate::model::predict(m, &batch_tensor([img]).unwrap()).unwrap()[0]
}

fn toy_artifacts() -> (Dataset, Model, Discretizer) {
    let shape = [3, 8, 8];
    let ds = toy_dataset(30, shape, 11);
    let teacher = Model::new(Arch::SmallCnn, shape, 2, 5).unwrap();
    let disc =
        Discretizer::new(3, &DiscretizerConfig { factor: 4, latent_dim: 4, codebook_size: 8, hidden: 8, ..Default::default() })
            .unwrap();
    (ds, teacher, disc)
}

#[test]
fn cache_is_deterministic_and_reverifies() {
    let (ds, teacher, disc) = toy_artifacts();
    let cfg = AttackConfig { retries: 1, ..Default::default() };
    let a = build_cache(&ds, &teacher, &disc, &cfg, 9, 1).unwrap();
    let b = build_cache(&ds, &teacher, &disc, &cfg, 9, 3).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.records.len(), ds.len());
    assert!(a.records.windows(2).all(|w| w[0].sample_id < w[1].sample_id));
    let back = CacheFile::from_bytes(&a.to_bytes().unwrap()).unwrap();
    assert_eq!(back, a);
    assert_eq!(verify_cache(&back, &teacher).unwrap(), 0);
    for r in back.records.iter().filter(|r| r.accepted) {
        let row: Vec<f64> = r.teacher_logits_aug.iter().map(|&v| v as f64).collect();
        assert_eq!(argmax(&row), r.label);
    }
    back.check_fingerprints(&teacher.fingerprint().unwrap(), &disc.fingerprint().unwrap()).unwrap();
    assert!(back.check_fingerprints(&disc.fingerprint().unwrap(), &disc.fingerprint().unwrap()).is_err());
}

#[test]
fn dropping_rejected_records() {
    let (ds, teacher, disc) = toy_artifacts();
    let cfg = AttackConfig { keep_rejected: false, ..Default::default() };
    let c = build_cache(&ds, &teacher, &disc, &cfg, 1, 1).unwrap();
    assert!(c.records.iter().all(|r| r.accepted));
    assert!(c.records.len() <= ds.len());
}

#[test]
fn malformed_cache_bytes_are_rejected() {
    let (ds, teacher, disc) = toy_artifacts();
    let c = build_cache(&ds, &teacher, &disc, &AttackConfig::default(), 1, 1).unwrap();
    let bytes = c.to_bytes().unwrap();
    assert!(CacheFile::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(CacheFile::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[1] = b'?';
    assert!(CacheFile::from_bytes(&magic).is_err());
}
