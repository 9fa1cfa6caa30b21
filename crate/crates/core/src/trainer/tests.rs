use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adversary::build_cache;
use crate::data::{Image, LabeledExample};
use crate::discretizer::DiscretizerConfig;
use crate::model::predict;
use crate::nn::Arch;
use crate::objectives::cross_entropy;

/// Two classes separated by mean brightness with a wide margin.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let label = i % 2;
            let base = if label == 0 { 0.2 } else { 0.8 };
            let data = (0..3 * 4 * 4).map(|_| (base + rng.random_range(-0.15..0.15)) as f32).collect();
            LabeledExample { image: Image::new(3, 4, 4, data).unwrap(), label, id: i as u64 }
        })
        .collect();
    Dataset::new(vec!["dark".into(), "bright".into()], examples).unwrap()
}

fn cfg(obj: Objective, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 0.05,
        distill: DistillConfig { objective: obj, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn ce_with_empty_cache_matches_plain_loop() {
    let ds = separable(30, 1);
    let mut a = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 3).unwrap();
    let mut b = a.clone();
    let empty = CacheFile {
        header: crate::adversary::CacheHeader {
            version: 1,
            teacher: [0; 32],
            discretizer: [0; 32],
            attack: AttackConfig::default(),
            seed: 0,
        },
        records: vec![],
    };
    let c = cfg(Objective::Ce, 3);
    let log = train(&mut a, &TrainInputs { cache: Some(&empty), ..TrainInputs::new(&ds) }, &c).unwrap();

    // independent ERM loop
    let mut opt = Optimizer::new(c.optimizer, &b.net);
    let total = 3 * ds.len().div_ceil(8);
    let mut step = 0;
    let mut last = 0.0;
    for epoch in 0..3u64 {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[c.seed, epoch])));
        let (mut sum, mut cnt) = (0.0, 0);
        for chunk in order.chunks(8) {
            let x = batch_tensor(chunk.iter().map(|&i| &ds.examples[i].image)).unwrap();
            let y: Vec<usize> = chunk.iter().map(|&i| ds.examples[i].label).collect();
            let (logits, tape) = b.net.forward_train(&x).unwrap();
            let l = cross_entropy(&logits, &y).unwrap();
            let (_, g) = b.net.backward(&tape, &l.grads[0], false);
            opt.step(&mut b.net, &g, c.schedule.rate(c.lr, step, total));
            step += 1;
            sum += l.value * chunk.len() as f64;
            cnt += chunk.len();
        }
        last = sum / cnt as f64;
    }
    assert!((log.epochs.last().unwrap().loss - last).abs() < 1e-6);
    assert_eq!(a.net, b.net);
}

#[test]
fn separable_toy_problem_is_learned() {
    let ds = separable(100, 2);
    let mut m = Model::new(Arch::Mlp, [3, 4, 4], 2, 0).unwrap();
    train(&mut m, &TrainInputs::new(&ds), &cfg(Objective::Ce, 50)).unwrap();
    let x = batch_tensor(ds.examples.iter().map(|e| &e.image)).unwrap();
    let pred = predict(&m, &x).unwrap();
    let correct = pred.iter().zip(&ds.examples).filter(|(p, e)| **p == e.label).count();
    assert!(correct as f64 / ds.len() as f64 >= 0.99, "{correct}");
}

#[test]
fn runs_are_reproducible() {
    let ds = separable(20, 3);
    let mut a = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 1).unwrap();
    let mut b = a.clone();
    let la = train(&mut a, &TrainInputs::new(&ds), &cfg(Objective::Ce, 2)).unwrap();
    let lb = train(&mut b, &TrainInputs::new(&ds), &cfg(Objective::Ce, 2)).unwrap();
    assert_eq!(la.losses(), lb.losses());
}

fn artifacts(ds: &Dataset) -> (Model, Discretizer, CacheFile) {
    let mut teacher = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 9).unwrap();
    teacher.freeze();
    let disc = Discretizer::new(
        3,
        &DiscretizerConfig { factor: 2, latent_dim: 3, codebook_size: 8, hidden: 4, ..Default::default() },
    )
    .unwrap();
    let cache = build_cache(ds, &teacher, &disc, &AttackConfig::default(), 0, 1).unwrap();
    (teacher, disc, cache)
}

#[test]
fn missing_inputs_are_reported() {
    let ds = separable(10, 4);
    let (teacher, _, _) = artifacts(&ds);
    let mut s = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 0).unwrap();
    assert!(train(&mut s, &TrainInputs::new(&ds), &cfg(Objective::Kd, 1)).is_err());
    let with_teacher = TrainInputs { teacher: Some(&teacher), ..TrainInputs::new(&ds) };
    assert!(train(&mut s, &with_teacher, &cfg(Objective::Dad, 1)).is_err());
    assert!(train(&mut s, &with_teacher, &cfg(Objective::Dat, 1)).is_err());
    s.freeze();
    assert!(matches!(train(&mut s, &TrainInputs::new(&ds), &cfg(Objective::Ce, 1)), Err(Error::Frozen)));
}

#[test]
fn dad_leaves_teacher_untouched_and_counts_passes() {
    let ds = separable(24, 5);
    let (teacher, disc, cache) = artifacts(&ds);
    let before = teacher.fingerprint().unwrap();
    let accepted = cache.accepted() as u64;
    let inputs =
        TrainInputs { teacher: Some(&teacher), cache: Some(&cache), discretizer: Some(&disc), ..TrainInputs::new(&ds) };
    let mut s = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 0).unwrap();
    let log = train(&mut s, &inputs, &cfg(Objective::Dad, 3)).unwrap();
    assert_eq!(teacher.fingerprint().unwrap(), before);
    let n = ds.len() as u64;
    for (e, entry) in log.epochs.iter().enumerate() {
        let e = e as u64 + 1;
        assert_eq!(entry.forward, n + e * (n + accepted));
        assert_eq!(entry.backward, e * (n + accepted));
        assert_eq!(entry.attack_steps, 0);
    }

    let online = TrainConfig { precompute_teacher: false, ..cfg(Objective::Kd, 2) };
    let mut s = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 0).unwrap();
    let log = train(&mut s, &inputs, &online).unwrap();
    assert_eq!(log.forward(), 2 * 2 * n);
    assert_eq!(log.backward(), 2 * n);

    let mut s = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 0).unwrap();
    let log = train(&mut s, &inputs, &cfg(Objective::Dat, 2)).unwrap();
    assert_eq!(log.forward(), 2 * 3 * n);
    assert_eq!(log.backward(), 2 * 3 * n);
    assert_eq!(log.attack_steps(), 2 * n);
}

#[test]
fn every_objective_trains() {
    let ds = separable(16, 6);
    let (teacher, disc, cache) = artifacts(&ds);
    let inputs =
        TrainInputs { teacher: Some(&teacher), cache: Some(&cache), discretizer: Some(&disc), ..TrainInputs::new(&ds) };
    for obj in Objective::ALL {
        let mut s = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 0).unwrap();
        let log = train(&mut s, &inputs, &cfg(obj, 1)).unwrap();
        assert!(log.losses()[0].is_finite(), "{obj}");
    }
}

#[test]
fn budget_report_normalizes_and_checks_epochs() {
    let ds = separable(16, 7);
    let mut s = Model::new(Arch::SmallCnn, [3, 4, 4], 2, 0).unwrap();
    let base = train(&mut s, &TrainInputs::new(&ds), &cfg(Objective::Ce, 2)).unwrap();
    let rows = budget_report(&[("baseline", &base), ("again", &base)]).unwrap();
    assert_eq!(rows[0].relative, 1.0);
    assert_eq!(rows[1].relative, 1.0);
    let short = TrainLog { objective: "ce".into(), epochs: base.epochs[..1].to_vec() };
    assert!(budget_report(&[("baseline", &base), ("short", &short)]).is_err());
    let csv = base.to_csv();
    let back = TrainLog::from_csv(&csv, "ce").unwrap();
    assert_eq!(back.losses(), base.losses());
    assert_eq!(back.cost(), base.cost());
}
