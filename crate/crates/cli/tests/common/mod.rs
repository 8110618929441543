#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use jsonschema::{Registry, Validator};
use ppn_cli::service::{router, AppState};
use ppn_core::archive::ModelArchive;
use ppn_core::data::{default_subtypes, generate_synthetic, split, Dataset, SynthConfig};
use ppn_core::training::{train, TrainConfig};
use serde_json::Value;

pub struct Fixture {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub archive: ModelArchive,
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        epochs: 6,
        refresh_epochs: vec![2, 4],
        freeze_epochs: 1,
        learning_rate: 5e-3,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = SynthConfig { n_patients: 300, t_min: 3, t_max: 12, seed: 5, ..SynthConfig::default() };
        let ds = generate_synthetic(&default_subtypes(), &cfg).unwrap();
        let (train_set, val, test) = split(&ds, [0.6, 0.2, 0.2], 5).unwrap();
        let tc = small_config();
        let out = train(&tc, &train_set, &val).unwrap();
        let archive = ModelArchive::new(out.model, Some(tc)).with_sources(&train_set).unwrap();
        Fixture { train: train_set, val, test, archive }
    })
}

pub fn app(with_dataset: bool) -> axum::Router {
    let f = fixture();
    let ds = with_dataset.then(|| f.test.clone());
    router(Arc::new(AppState::new(f.archive.clone(), ds).unwrap()))
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

const SCHEMA_BASE: &str = "https://ppn.invalid/schemas/";

/// Validator for one published schema, with the others available to `$ref`.
pub fn validator(name: &str) -> Validator {
    let mut docs = Vec::new();
    for entry in std::fs::read_dir(schema_dir()).unwrap() {
        let path = entry.unwrap().path();
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        docs.push((format!("{SCHEMA_BASE}{}", path.file_name().unwrap().to_str().unwrap()), doc));
    }
    let root = docs.iter().find(|(uri, _)| uri.ends_with(name)).expect("schema exists").1.clone();
    let registry = Registry::new().extend(docs).unwrap().prepare().unwrap();
    jsonschema::options().with_base_uri(SCHEMA_BASE).with_registry(&registry).build(&root).unwrap()
}

pub fn assert_valid(name: &str, instance: &Value) {
    let v = validator(name);
    let errors: Vec<String> = v.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{instance}");
}
