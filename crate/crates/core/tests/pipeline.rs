use std::fs;

use pgseg::pipeline::{
    checkpoint, gen_synthetic, stack_images, train, SegSample, TrainConfig, Trainer, METRICS_LOG, SNAPSHOT_DIR,
};
use pgseg::{Error, ORGANS};

fn data() -> Vec<SegSample> {
    gen_synthetic(21, 4, &ORGANS, 224).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, eval_every: 0, ..TrainConfig::default() }
}

#[test]
fn checkpoint_round_trip_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = data();
    let t = train(cfg(1), &d, &[], dir.path()).unwrap();
    let m = checkpoint::read_manifest(dir.path()).unwrap();
    assert_eq!(m.step, 1);
    assert_eq!(m.epoch, 1);
    assert_eq!(m.dtype, "f32");
    assert_eq!(m.config_hash, t.config.hash());
    assert_eq!(m.trainable_params, t.store.trainable_count());
    assert!(m.lambda_step.is_some());
    for s in ["backbone", "adapters", "decoder", "optimizer"] {
        assert!(m.digests.contains_key(s), "{s}");
        assert!(dir.path().join(format!("{s}.bin")).is_file());
    }
    assert!(m.tensors.iter().filter(|e| e.section == "adapters").all(|e| e.name.contains("lora")));

    let ck = checkpoint::load::<f32>(dir.path()).unwrap();
    let x = stack_images(&[&d[0]]);
    let a = t.model.predict(&t.store, &x).unwrap().logits;
    let b = ck.model.predict(&ck.store, &x).unwrap().logits;
    assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    for (id, p) in t.store.iter() {
        assert_eq!(t.optimizer.moments(id).is_some(), ck.optimizer.moments(id).is_some(), "{}", p.name);
    }
}

#[test]
fn tampered_or_truncated_sections_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    train(cfg(1), &data(), &[], dir.path()).unwrap();
    let path = dir.path().join("decoder.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 1;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load::<f32>(dir.path()), Err(Error::Load { .. })));
    bytes.truncate(bytes.len() / 2);
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load::<f32>(dir.path()), Err(Error::Load { .. })));
    assert!(matches!(checkpoint::load::<f64>(tempfile::tempdir().unwrap().path()), Err(Error::Load { .. })));
}

#[test]
fn resume_extends_and_refuses_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = data();
    train(cfg(1), &d, &[], dir.path()).unwrap();
    let t = train(cfg(2), &d, &[], dir.path()).unwrap();
    assert_eq!(t.epoch, 2);
    assert_eq!(t.optimizer.step, 2);
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap().lines().count(), 2);

    let mut other = cfg(3);
    other.seed = 99;
    match train(other, &d, &[], dir.path()) {
        Err(Error::Config(msg)) => assert!(msg.contains("refusing"), "{msg}"),
        r => panic!("expected a refusal, got {:?}", r.map(|_| ())),
    }
}

#[test]
fn non_finite_parameters_abort_with_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::from_config(cfg(1)).unwrap();
    let id = t.store.find("head.out.weight").unwrap();
    t.store.value_mut(id).fill(f32::NAN);
    let err = t.fit(&data(), &[], Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let snap = dir.path().join(SNAPSHOT_DIR);
    assert!(checkpoint::exists(&snap));
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(snap.join("diagnostic.json")).unwrap()).unwrap();
    assert_eq!(diag["step"], 0);
    assert!(diag["nonfinite_params"].as_array().unwrap().iter().any(|v| v == "head.out.weight"));
    assert_eq!(t.optimizer.step, 0);
}

#[test]
fn wrong_image_size_is_a_shape_error() {
    let mut t = Trainer::from_config(cfg(1)).unwrap();
    let small = gen_synthetic(1, 1, &ORGANS, 64).unwrap();
    assert!(matches!(t.fit(&small, &[], None), Err(Error::Shape(_))));
}

#[test]
fn few_shot_subset_is_seeded() {
    let d = gen_synthetic(5, 10, &ORGANS, 32).unwrap();
    let t = Trainer::from_config(TrainConfig { train_fraction: 0.3, ..cfg(1) }).unwrap();
    let a: Vec<&str> = t.training_subset(&d).iter().map(|s| s.case_id.as_str()).collect();
    let b: Vec<&str> = t.training_subset(&d).iter().map(|s| s.case_id.as_str()).collect();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
}
