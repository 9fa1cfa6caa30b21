use std::ffi::{c_char, CString};
use std::ptr;

use dad_core::adversary::{build_cache, AttackConfig};
use dad_core::data::{batch_tensor, Dataset, Image, LabeledExample};
use dad_core::discretizer::{Discretizer, DiscretizerConfig};
use dad_core::model::{predict, Classifier, Model};
use dad_core::nn::Arch;
use dad_ffi::*;

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { dad_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn tiny_dataset() -> Dataset {
    let examples = (0..6)
        .map(|i| {
            let v = (i as f32 + 1.0) / 8.0;
            LabeledExample { image: Image::filled(3, 8, 8, v), label: i % 2, id: i as u64 }
        })
        .collect();
    Dataset::new(vec!["a".into(), "b".into()], examples).unwrap()
}

#[test]
fn model_roundtrip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let model = Model::new(Arch::SmallCnn, [3, 8, 8], 2, 4).unwrap();
    model.save(&path).unwrap();

    let mut h: *mut DadModel = ptr::null_mut();
    assert_eq!(unsafe { dad_model_load(cpath(&path).as_ptr(), &mut h) }, DadStatus::Ok);
    let mut shape = [0usize; 3];
    let mut k = 0usize;
    unsafe {
        assert_eq!(dad_model_input_shape(h, shape.as_mut_ptr()), DadStatus::Ok);
        assert_eq!(dad_model_num_classes(h, &mut k), DadStatus::Ok);
    }
    assert_eq!((shape, k), ([3, 8, 8], 2));

    let ds = tiny_dataset();
    let pixels: Vec<f32> = ds.examples.iter().flat_map(|e| e.image.data.clone()).collect();
    let mut labels = vec![9usize; 6];
    let mut logits = vec![0.0f64; 12];
    unsafe {
        assert_eq!(dad_model_predict(h, pixels.as_ptr(), 6, labels.as_mut_ptr()), DadStatus::Ok);
        assert_eq!(dad_model_logits(h, pixels.as_ptr(), 6, logits.as_mut_ptr(), 12), DadStatus::Ok);
        assert_eq!(dad_model_logits(h, pixels.as_ptr(), 6, logits.as_mut_ptr(), 11), DadStatus::Shape);
    }
    let x = batch_tensor(ds.examples.iter().map(|e| &e.image)).unwrap();
    assert_eq!(labels, predict(&model, &x).unwrap());
    assert_eq!(logits, model.logits(&x).unwrap().into_data());
    unsafe { dad_model_free(h) };
}

#[test]
fn errors_are_reported() {
    let mut h: *mut DadModel = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.bin").unwrap();
    assert_eq!(unsafe { dad_model_load(missing.as_ptr(), &mut h) }, DadStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nonexistent"));
    assert_eq!(unsafe { dad_model_load(ptr::null(), &mut h) }, DadStatus::NullPointer);
    let mut k = 0usize;
    assert_eq!(unsafe { dad_model_num_classes(ptr::null(), &mut k) }, DadStatus::NullPointer);
    assert!(last_error().contains("model"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a model").unwrap();
    let status = unsafe { dad_model_load(cpath(&junk).as_ptr(), &mut h) };
    assert_ne!(status, DadStatus::Ok);

    let mut g = 0.0;
    assert_eq!(unsafe { dad_generalization_term(0, 1, 0.5, &mut g) }, DadStatus::InvalidArgument);
    unsafe {
        dad_model_free(ptr::null_mut());
        dad_discretizer_free(ptr::null_mut());
        dad_cache_free(ptr::null_mut());
    }
}

#[test]
fn discretizer_and_cache_handles() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset();
    let mut teacher = Model::new(Arch::SmallCnn, [3, 8, 8], 2, 1).unwrap();
    teacher.freeze();
    let disc = Discretizer::new(
        3,
        &DiscretizerConfig { factor: 2, latent_dim: 3, codebook_size: 8, hidden: 4, ..Default::default() },
    )
    .unwrap();
    let cache = build_cache(&ds, &teacher, &disc, &AttackConfig::default(), 0, 1).unwrap();
    let (tp, dp, cp) = (dir.path().join("t.bin"), dir.path().join("d.bin"), dir.path().join("c.bin"));
    teacher.save(&tp).unwrap();
    disc.save(&dp).unwrap();
    cache.save(&cp).unwrap();

    let mut th: *mut DadModel = ptr::null_mut();
    let mut dh: *mut DadDiscretizer = ptr::null_mut();
    let mut ch: *mut DadCache = ptr::null_mut();
    unsafe {
        assert_eq!(dad_model_load(cpath(&tp).as_ptr(), &mut th), DadStatus::Ok);
        assert_eq!(dad_discretizer_load(cpath(&dp).as_ptr(), &mut dh), DadStatus::Ok);
        assert_eq!(dad_cache_load(cpath(&cp).as_ptr(), &mut ch), DadStatus::Ok);
    }
    let img = &ds.examples[0].image;
    let mut out = vec![0f32; img.data.len()];
    assert_eq!(unsafe { dad_discretize(dh, img.data.as_ptr(), 1, 3, 8, 8, out.as_mut_ptr()) }, DadStatus::Ok);
    assert_eq!(out, disc.discretize_image(img).unwrap().data);

    let (mut records, mut accepted, mut mismatches) = (0, 0, 99);
    unsafe {
        assert_eq!(dad_cache_counts(ch, &mut records, &mut accepted), DadStatus::Ok);
        assert_eq!(dad_cache_verify(ch, th, &mut mismatches), DadStatus::Ok);
    }
    assert_eq!((records, accepted, mismatches), (cache.records.len(), cache.accepted(), 0));
    unsafe {
        dad_cache_free(ch);
        dad_discretizer_free(dh);
        dad_model_free(th);
    }
}

#[test]
fn numeric_helpers() {
    let (a, b) = ([0.5, 0.5], [0.5, 0.5]);
    let cost = [0.0, 1.0, 1.0, 10.0];
    let mut w = 0.0;
    assert_eq!(unsafe { dad_transport_cost(a.as_ptr(), 2, b.as_ptr(), 2, cost.as_ptr(), &mut w) }, DadStatus::Ok);
    assert!((w - 1.0).abs() < 1e-15);
    let unbalanced = [1.0, 0.5];
    assert_eq!(
        unsafe { dad_transport_cost(unbalanced.as_ptr(), 2, b.as_ptr(), 2, cost.as_ptr(), &mut w) },
        DadStatus::InvalidArgument
    );
    let mut g = 0.0;
    assert_eq!(unsafe { dad_generalization_term(1, 5, 1.0, &mut g) }, DadStatus::Ok);
    assert_eq!(g, 0.0);
    let v = unsafe { std::ffi::CStr::from_ptr(dad_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dad.h")).unwrap();
    for sym in [
        "typedef struct DadModel DadModel",
        "DAD_STATUS_NULL_POINTER",
        "dad_model_load",
        "dad_model_predict",
        "dad_discretize",
        "dad_cache_verify",
        "dad_transport_cost",
        "dad_last_error_message",
    ] {
        assert!(header.contains(sym), "{sym}");
    }
}
