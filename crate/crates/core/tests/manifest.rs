use std::path::{Path, PathBuf};

use awh::toyhands::{read_manifest, write_manifest, Split, ToyConfig};
use awh::AwhError;

fn golden_config() -> ToyConfig {
    ToyConfig {
        seed: 5,
        image_size: 16,
        depth_size: 4,
        source_train: 2,
        target_train: 2,
        target_test: 2,
        ..ToyConfig::default()
    }
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

/// Set `AWH_BLESS=1` to rewrite the fixture after an intended generator change.
#[test]
fn generator_matches_golden_manifest() {
    let cfg = golden_config();
    let samples = cfg.generate_split(Split::TargetTest, 1).unwrap();
    let fixture = golden_dir().join(Split::TargetTest.manifest_file());
    if std::env::var_os("AWH_BLESS").is_some() {
        write_manifest(&samples, &fixture, &cfg, Split::TargetTest).unwrap();
    }
    let golden = read_manifest(&fixture).unwrap();
    assert_eq!(golden.len(), samples.len());
    assert_eq!(golden.header.image_size, 16);
    let loaded = golden.load_all().unwrap();
    for (g, s) in loaded.iter().zip(&samples) {
        for (a, b) in g.kp3d.0.iter().flatten().zip(s.kp3d.0.iter().flatten()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for (a, b) in g.kp2d.iter().flatten().zip(s.kp2d.iter().flatten()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(g.image, s.image);
        assert_eq!(g.domain, s.domain);
    }
}

#[test]
fn write_then_read_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config();
    let samples = cfg.generate_split(Split::SourceTrain, 1).unwrap();
    let path = dir.path().join("m.jsonl");
    let written = write_manifest(&samples, &path, &cfg, Split::SourceTrain).unwrap();
    let read = read_manifest(&path).unwrap();
    assert_eq!(written.header, read.header);
    assert_eq!(written.records, read.records);
    let back = read.load_all().unwrap();
    for (a, b) in back.iter().zip(&samples) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.kp3d, b.kp3d);
    }
}

#[test]
fn truncated_record_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config();
    let samples = cfg.generate_split(Split::TargetTrain, 1).unwrap();
    let path = dir.path().join("m.jsonl");
    write_manifest(&samples, &path, &cfg, Split::TargetTrain).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.len() - 40;
    std::fs::write(&path, &text[..cut]).unwrap();
    match read_manifest(&path) {
        Err(AwhError::Manifest { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a manifest error, got {other:?}"),
    }
}

#[test]
fn record_count_must_match_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config();
    let samples = cfg.generate_split(Split::TargetTrain, 1).unwrap();
    let path = dir.path().join("m.jsonl");
    write_manifest(&samples, &path, &cfg, Split::TargetTrain).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let first_two: Vec<&str> = text.lines().take(2).collect();
    std::fs::write(&path, first_two.join("\n") + "\n").unwrap();
    assert!(matches!(read_manifest(&path), Err(AwhError::Manifest { .. })));
}

#[test]
fn missing_image_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config();
    let samples = cfg.generate_split(Split::TargetTrain, 1).unwrap();
    let path = dir.path().join("m.jsonl");
    let m = write_manifest(&samples, &path, &cfg, Split::TargetTrain).unwrap();
    std::fs::remove_file(dir.path().join(&m.records[1].image_path)).unwrap();
    match read_manifest(&path) {
        Err(AwhError::Manifest { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("missing"), "{message}");
        }
        other => panic!("expected a manifest error, got {other:?}"),
    }
}
