use std::fs;
use std::path::Path;

use robustnet::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use robustnet::cifar::{load_cifar, CifarVariant};
use robustnet::config::ExperimentConfig;
use robustnet::fsutil::sha256_hex;
use robustnet::spec_doc::{spec_from_json, spec_to_json};
use robustnet::tables::{merge_records, parse_records_csv, records_csv, StoredRecord};
use robustnet::IoError;
use robustnet_core::arch::{build_network, robust_resnet, wrn, Preset};
use robustnet_core::data::make_synthetic;
use robustnet_core::data::SyntheticConfig;
use robustnet_core::evaluation::RobustRunRecord;
use robustnet_core::training::Trainer;
use std::collections::BTreeMap;

mod common;

#[test]
fn spec_documents_roundtrip() {
    let mut specs: Vec<_> = Preset::ALL.iter().map(|p| robust_resnet(p.depths(), p.widths(), 10, 32)).collect();
    specs.push(wrn(28, 10, 100).unwrap());
    specs.push(robust_resnet([2, 3, 1], [1, 2, 3], 7, 16));
    for s in specs {
        let back = spec_from_json(&spec_to_json(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}

#[test]
fn spec_document_rejects_other_schema_versions() {
    let text = spec_to_json(&robust_resnet([1, 1, 1], [1, 1, 1], 2, 8)).unwrap();
    let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
    assert_ne!(bumped, text);
    assert!(spec_from_json(&bumped).is_err());
}

fn c10_records(n: usize, label_of: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * 3073);
    for i in 0..n {
        out.push(label_of(i));
        out.extend((0..3072).map(|p| ((i + p) % 256) as u8));
    }
    out
}

fn write_c10(root: &Path, per_file: usize) {
    let dir = root.join("cifar-10-batches-bin");
    fs::create_dir_all(&dir).unwrap();
    for b in 1..=5 {
        fs::write(dir.join(format!("data_batch_{b}.bin")), c10_records(per_file, |i| (i % 10) as u8)).unwrap();
    }
    fs::write(dir.join("test_batch.bin"), c10_records(per_file, |i| (9 - i % 10) as u8)).unwrap();
}

#[test]
fn cifar10_layout_loads() {
    let tmp = tempfile::tempdir().unwrap();
    write_c10(tmp.path(), 4);
    let load = load_cifar(tmp.path(), CifarVariant::C10).unwrap();
    let ds = load.dataset;
    assert!(load.warnings.is_empty());
    assert_eq!((ds.train.len(), ds.test.len(), ds.classes, ds.resolution), (20, 4, 10, 32));
    assert_eq!(&ds.train.labels[..5], &[0, 1, 2, 3, 0]);
    assert_eq!(ds.test.labels[0], 9);
    // byte 255 of record 0 is pixel index 255 -> value 1.0
    assert_eq!(ds.train.images[255], 1.0);
    assert_eq!(ds.train.images[0], 0.0);
}

#[test]
fn cifar100_uses_fine_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rec = Vec::new();
    for i in 0..3u8 {
        rec.extend([i, 50 + i]);
        rec.extend(std::iter::repeat(128u8).take(3072));
    }
    fs::write(tmp.path().join("train.bin"), &rec).unwrap();
    fs::write(tmp.path().join("test.bin"), &rec[..3074]).unwrap();
    let ds = load_cifar(tmp.path(), CifarVariant::C100).unwrap().dataset;
    assert_eq!(ds.train.labels, [50, 51, 52]);
    assert_eq!(ds.classes, 100);
}

#[test]
fn truncated_cifar_file_reports_offset() {
    let tmp = tempfile::tempdir().unwrap();
    write_c10(tmp.path(), 3);
    let p = tmp.path().join("cifar-10-batches-bin/data_batch_3.bin");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..3073 * 2 + 17]).unwrap();
    match load_cifar(tmp.path(), CifarVariant::C10) {
        Err(IoError::Integrity { path, offset, .. }) => {
            assert_eq!(path, p);
            assert_eq!(offset, 3073 * 2);
        }
        other => panic!("expected integrity error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn checksum_mismatch_warns_without_failing() {
    let tmp = tempfile::tempdir().unwrap();
    write_c10(tmp.path(), 2);
    let dir = tmp.path().join("cifar-10-batches-bin");
    let good = sha256_hex(&fs::read(dir.join("data_batch_1.bin")).unwrap());
    fs::write(dir.join("data_batch_1.bin.sha256"), format!("{good}  data_batch_1.bin\n")).unwrap();
    fs::write(dir.join("test_batch.bin.sha256"), "00".repeat(32)).unwrap();
    let load = load_cifar(tmp.path(), CifarVariant::C10).unwrap();
    assert_eq!(load.warnings.len(), 1);
    assert!(load.warnings[0].contains("test_batch.bin"));
}

fn trained_checkpoint() -> robustnet_core::training::Checkpoint<f32> {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(tmp.path(), &[3], 1);
    let spec = cfg.resolve_spec().unwrap();
    let data = make_synthetic(&SyntheticConfig::new(2, 8), 64, 16, 0).unwrap();
    let mut t = Trainer::new(build_network::<f32>(&spec, 3).unwrap(), cfg.recipe.clone(), 3).unwrap();
    t.run_epoch(&data).unwrap();
    t.checkpoint()
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let ck = trained_checkpoint();
    let bytes = encode(&ck, Some("abc")).unwrap();
    let back = decode::<f32>(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.config_hash.as_deref(), Some("abc"));
    assert_eq!(back.checkpoint, ck);
    assert!(back.checkpoint.ema_params.is_some());

    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.rbn");
    save_checkpoint(&p, &ck, None).unwrap();
    assert_eq!(fs::read(&p).unwrap(), encode(&ck, None).unwrap());
    assert_eq!(load_checkpoint::<f32>(&p).unwrap().checkpoint, ck);
}

#[test]
fn damaged_checkpoints_are_integrity_errors() {
    let ck = trained_checkpoint();
    let bytes = encode(&ck, None).unwrap();
    let flipped = {
        let mut b = bytes.clone();
        let last = b.len() - 3;
        b[last] ^= 0x40;
        b
    };
    for bad in [&bytes[..bytes.len() - 5], &bytes[..10], &flipped[..], b"NOTACKPT0000000000"] {
        assert!(matches!(decode::<f32>(bad, Path::new("m")), Err(IoError::Integrity { .. })));
    }
    let wide = decode::<f64>(&bytes, Path::new("m")).unwrap().checkpoint;
    assert_eq!(wide.params[0].value, ck.params[0].value.cast::<f64>());
}

fn record(hash: &str, spec: &str, seed: u64, acc: f64) -> StoredRecord {
    let mut robust_acc = BTreeMap::new();
    robust_acc.insert("pgd20".to_string(), acc);
    robust_acc.insert("cw40".to_string(), acc - 1.0);
    StoredRecord {
        config_hash: hash.into(),
        record: RobustRunRecord {
            spec_id: spec.into(),
            recipe_id: "baseline-sat-e100-wd5e-4".into(),
            seed,
            clean_acc: 80.125,
            robust_acc,
            params: 1234,
            flops: 56789,
            wall_time: 1.5,
            depths: [2, 3, 1],
            widths: [4, 5, 6],
        },
    }
}

#[test]
fn records_csv_roundtrip() {
    let rs = vec![record("h1", "a", 0, 50.0), record("h1", "a", 1, 51.25), record("h2", "b", 0, 40.0)];
    assert_eq!(parse_records_csv(&records_csv(&rs).unwrap()).unwrap(), rs);
}

#[test]
fn records_with_different_hashes_never_merge_silently() {
    let a = vec![record("h1", "a", 0, 50.0)];
    let same = vec![record("h1", "a", 0, 50.0), record("h1", "a", 1, 52.0)];
    assert_eq!(merge_records(&[a.clone(), same]).unwrap().len(), 2);
    let clash = vec![record("h9", "a", 0, 50.0)];
    assert!(matches!(merge_records(&[a, clash]), Err(IoError::Conflict(_))));
}

#[test]
fn config_toml_roundtrip_and_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(tmp.path(), &[0, 1], 2);
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let mut moved = cfg.clone();
    moved.output_dir = "/elsewhere".into();
    assert_eq!(moved.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.recipe.weight_decay = 2e-4;
    assert_ne!(other.hash(), cfg.hash());
    let mut dup = cfg.clone();
    dup.seeds = vec![1, 1];
    assert!(dup.validate().is_err());
}

#[test]
fn preset_divisor_shrinks_a1() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(tmp.path(), &[0], 1);
    cfg.model = robustnet::config::ModelRef::Preset { preset: "a1".into(), divisor: 7 };
    let spec = cfg.resolve_spec().unwrap();
    let depths: Vec<usize> = spec.stages.iter().map(|s| s.depth).collect();
    assert_eq!(depths, [2, 2, 1]);
}
