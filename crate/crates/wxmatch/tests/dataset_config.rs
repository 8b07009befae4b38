use wxmatch::config::{parse_config_str, ExperimentConfig, Profile};
use wxmatch::dataset::{build_dataset, load_task, read_manifest, MANIFEST_FILE};
use wxmatch::Error;
use wxmatch_core::degrade::WeatherSpec;
use wxmatch_core::episodes::Split;

#[test]
fn build_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&WeatherSpec::rain_fog(4), 10, 7, dir.path(), 16).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    let pngs = files.iter().filter(|f| f.to_string_lossy().ends_with(".png")).count();
    assert_eq!(pngs, 20);
    assert_eq!(files.len(), 21);
    assert_eq!(m.condition_id, "rain+fog");
    assert_eq!(m.pairs[0].split, Split::MetaTestSupport);
    assert!(m.pairs[1..].iter().all(|p| p.split == Split::Eval));
    assert_eq!(read_manifest(dir.path()).unwrap(), m);
}

#[test]
fn split_is_first_tenth_rounded_up() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&WeatherSpec::rain(0), 25, 0, dir.path(), 8).unwrap();
    let support = m.pairs.iter().filter(|p| p.split == Split::MetaTestSupport).count();
    assert_eq!(support, 3);
    assert!(m.pairs[..3].iter().all(|p| p.split == Split::MetaTestSupport));
}

#[test]
fn rebuild_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&WeatherSpec::fog(1), 4, 9, a.path(), 8).unwrap();
    build_dataset(&WeatherSpec::fog(1), 4, 9, b.path(), 8).unwrap();
    for f in std::fs::read_dir(a.path()).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn too_few_pairs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(build_dataset(&WeatherSpec::rain(0), 1, 0, dir.path(), 8).is_err());
}

#[test]
fn load_task_keeps_splits_and_detects_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&WeatherSpec::rain(2), 12, 3, dir.path(), 8).unwrap();
    let t = load_task(dir.path()).unwrap();
    assert_eq!(t.pairs.len(), 12);
    assert_eq!(t.support_pool().len(), 2);
    assert_eq!(t.eval_pairs().len(), 10);
    std::fs::remove_file(dir.path().join("0003_clean.png")).unwrap();
    assert!(load_task(dir.path()).is_err());
    std::fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(read_manifest(dir.path()).is_err());
}

fn config_err(text: &str) -> String {
    match parse_config_str(text) {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn empty_config_gives_desk_defaults() {
    assert_eq!(parse_config_str("").unwrap(), ExperimentConfig::desk());
    assert_eq!(parse_config_str("{}").unwrap(), ExperimentConfig::desk());
}

#[test]
fn paper_profile_values_and_lock() {
    let c = parse_config_str(r#"{"profile": "paper"}"#).unwrap();
    assert_eq!(c.profile, Profile::Paper);
    assert_eq!(c.model.input_size, 224);
    assert_eq!(c.model.heads, [4, 8, 16, 16]);
    assert_eq!((c.train.iterations, c.adapt.iterations), (300_000, 20_000));
    assert_eq!(
        (c.train.lr_encoder, c.train.lr_other, c.adapt.lr_bias),
        (1e-5, 1e-4, 1e-6)
    );
    assert_eq!(c.train.batch_size, 8);
    let msg = config_err(r#"{"profile": "paper", "train": {"batch_size": 4}}"#);
    assert!(msg.contains("train.batch_size") && msg.contains("locked"), "{msg}");
    // Restating a locked value is not an override.
    assert!(parse_config_str(r#"{"profile": "paper", "train": {"batch_size": 8}}"#).is_ok());
    // Unlocked keys remain free.
    assert!(parse_config_str(r#"{"profile": "paper", "seeds": [5]}"#).is_ok());
}

#[test]
fn unknown_keys_are_named() {
    assert!(config_err(r#"{"modle": {}}"#).contains("modle"));
    assert!(config_err(r#"{"train": {"lr": 1}}"#).contains("train.lr"));
}

#[test]
fn invariant_errors_carry_paths() {
    assert!(config_err(r#"{"model": {"heads": [2, 4]}}"#).starts_with("model.heads"));
    assert!(config_err(r#"{"model": {"input_size": 32}}"#).starts_with("train.input_size"));
    assert!(config_err(r#"{"train": {"lr_other": 0}}"#).starts_with("train.lr_other"));
    assert!(config_err(r#"{"datasets": {"target": {"count": 1}}}"#).starts_with("datasets.target.count"));
    assert!(config_err(r#"{"shots": 0}"#).starts_with("shots"));
}

#[test]
fn partial_overrides_merge() {
    let c = parse_config_str(r#"{"train": {"iterations": 5}, "datasets": {"target": {"count": 30}}}"#).unwrap();
    assert_eq!(c.train.iterations, 5);
    assert_eq!(c.train.batch_size, 8);
    assert_eq!(c.datasets.target.count, 30);
    assert_eq!(c.datasets.target.spec, ExperimentConfig::desk().datasets.target.spec);
}
