mod common;

use nirm::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use nirm::config::ExperimentConfig;
use nirm::core::data::{Dataset, Split};
use nirm::core::losses::RiskConfig;
use nirm::core::models::{init_params, ArchitectureConfig};
use nirm::core::train::{Predictor, Variant};
use nirm::datafile::{load_dataset, make_dataset, read_manifest};
use nirm::Error;

fn smoke() -> ExperimentConfig {
    ExperimentConfig::load(&common::smoke_config(), &[]).unwrap()
}

fn meta(arch: &ArchitectureConfig) -> CheckpointMeta {
    CheckpointMeta {
        seed: 17,
        variant: Some(Variant::TrajIrm),
        architecture: arch.clone(),
        risk: RiskConfig::default(),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let arch = smoke().architecture;
    let mut enc = init_params(&arch.encoder(), 3);
    // Values that decimal formats tend to lose.
    enc.iter_mut().next().unwrap().1.data_mut()[0] = f64::from_bits(0x3FF0_0000_0000_0001);
    enc.iter_mut().next().unwrap().1.data_mut()[1] = -0.0;
    let dec = init_params(&arch.decoder(), 4);
    let m = save_checkpoint(
        dir.path(),
        "model",
        &meta(&arch),
        &[("encoder", &enc), ("decoder", &dec)],
    )
    .unwrap();
    let c = load_checkpoint(&dir.path().join("model.json")).unwrap();
    assert_eq!(c.manifest, m);
    assert_eq!(
        c.part("encoder")
            .unwrap()
            .flatten()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>(),
        enc.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(c.part("decoder"), Some(&dec));
    assert_eq!(
        c.predictor(),
        Some(Predictor::EncoderDecoder {
            encoder: enc.clone(),
            decoder: dec.clone()
        })
    );
    assert_eq!(c.manifest.meta.seed, 17);
    assert_eq!(c.manifest.meta.variant, Some(Variant::TrajIrm));
    let blob = std::fs::read(dir.path().join("model.bin")).unwrap();
    assert_eq!(blob.len(), 8 * (enc.num_values() + dec.num_values()));
    assert_eq!(
        f64::from_le_bytes(blob[..8].try_into().unwrap()).to_bits(),
        0x3FF0_0000_0000_0001
    );
}

#[test]
fn flipped_byte_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let arch = smoke().architecture;
    let enc = init_params(&arch.encoder(), 3);
    let dec = init_params(&arch.decoder(), 4);
    let m = save_checkpoint(
        dir.path(),
        "model",
        &meta(&arch),
        &[("encoder", &enc), ("decoder", &dec)],
    )
    .unwrap();
    let victim = &m.tensors[m.tensors.len() - 1];
    common::flip_byte(&dir.path().join("model.bin"), victim.offset as usize + 3);
    match load_checkpoint(&dir.path().join("model.json")) {
        Err(e @ Error::TensorChecksum { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains(&format!("{}/{}", victim.role, victim.name)), "{msg}");
        }
        other => panic!("expected a tensor checksum error, got {other:?}"),
    }
}

#[test]
fn checkpoint_schema_and_truncation_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let arch = smoke().architecture;
    let enc = init_params(&arch.encoder(), 3);
    save_checkpoint(dir.path(), "enc", &meta(&arch), &[("encoder", &enc)]).unwrap();
    let path = dir.path().join("enc.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"schema_version\": 1", "\"schema_version\": 2")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Schema { found: 2, .. })));
    std::fs::write(&path, &text).unwrap();
    let blob = dir.path().join("enc.bin");
    let b = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &b[..b.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    // An encoder alone is not a model.
    std::fs::write(&blob, &b).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().predictor(), None);
}

#[test]
fn dataset_round_trip_preserves_every_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let manifest = make_dataset(&cfg.dataset, &cfg.architecture, dir.path()).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    let generated = Dataset::generate(&cfg.dataset, &cfg.architecture).unwrap();
    assert_eq!(loaded, generated);
    for (env, spec) in loaded.environments.iter().zip(&cfg.dataset.environments) {
        assert_eq!(env.samples.len(), spec.sample_count);
    }
    let m = read_manifest(&manifest).unwrap();
    assert_eq!(m.seed, cfg.seed);
    assert_eq!(m.record_values, 3 + 3 + 1 + 2 * 4);
    assert_eq!(loaded.split(Split::Ood).len(), 1);
}

#[test]
fn dataset_files_are_byte_identical_across_generations() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = smoke();
    make_dataset(&cfg.dataset, &cfg.architecture, a.path()).unwrap();
    make_dataset(&cfg.dataset, &cfg.architecture, b.path()).unwrap();
    assert_eq!(common::tree(a.path()), common::tree(b.path()));
    let other = cfg.with_seed(1);
    let c = tempfile::tempdir().unwrap();
    make_dataset(&other.dataset, &other.architecture, c.path()).unwrap();
    assert_ne!(common::tree(a.path()), common::tree(c.path()));
}

#[test]
fn corrupted_or_truncated_data_is_rejected_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let manifest = make_dataset(&cfg.dataset, &cfg.architecture, dir.path()).unwrap();
    let file = dir.path().join("env_1.bin");
    let original = std::fs::read(&file).unwrap();
    common::flip_byte(&file, 100);
    let err = load_dataset(&manifest).unwrap_err();
    assert!(matches!(err, Error::Checksum { .. }));
    assert!(err.to_string().contains("env_1.bin"), "{err}");
    std::fs::write(&file, &original[..original.len() - 5]).unwrap();
    let err = load_dataset(&manifest).unwrap_err();
    assert!(
        err.to_string().contains("env_1.bin") && err.to_string().contains("truncated"),
        "{err}"
    );
}

#[test]
fn config_defaults_and_resolution() {
    let cfg = ExperimentConfig::parse("schema_version = 1\nseed = 7\n[risk]\nlambda_irm = 0.25\n", &[]).unwrap();
    assert_eq!(cfg.risk.alpha, 5.0);
    assert_eq!(cfg.dataset.seed, 7);
    assert_eq!(cfg.train.seed, 7);
    assert_eq!(cfg.train.risk.lambda_irm, 0.25);
    assert_eq!(cfg.architecture, ArchitectureConfig::default());
    assert_eq!(cfg.train.steps.gan_generator, 20_000);
    assert_eq!(cfg.train.batch_size, 32);
}

#[test]
fn config_rejects_unknown_and_shadowed_keys() {
    let err = |text: &str| ExperimentConfig::parse(text, &[]).unwrap_err().to_string();
    assert!(err("schema_version = 1\nsede = 1\n").contains("sede"));
    assert!(err("schema_version = 1\n[train]\nbatchsize = 3\n").contains("batchsize"));
    assert!(err("schema_version = 1\n[train]\nseed = 3\n").contains("train.seed"));
    assert!(err("schema_version = 1\n[dataset]\nseed = 3\n").contains("dataset.seed"));
    assert!(err("schema_version = 1\n[train.risk]\nalpha = 3\n").contains("train.risk"));
    assert!(err("schema_version = 9\n").contains("schema_version"));
    assert!(err("seed = 1\n").contains("schema_version"));
}

#[test]
fn config_validation_names_the_field() {
    let text = std::fs::read_to_string(common::smoke_config()).unwrap();
    let e = ExperimentConfig::parse(
        &text.replacen("spurious_correlation = 0.9", "spurious_correlation = 1.5", 1),
        &[],
    )
    .unwrap_err()
    .to_string();
    assert!(e.contains("environments[0].spurious_correlation"), "{e}");
    let e = ExperimentConfig::parse(&text, &["risk.alpha=-1".into()])
        .unwrap_err()
        .to_string();
    assert!(e.contains("alpha"), "{e}");
    let e = ExperimentConfig::parse(&text, &["train.batch_size=0".into()])
        .unwrap_err()
        .to_string();
    assert!(e.contains("batch_size"), "{e}");
}

#[test]
fn overrides_and_dump_round_trip() {
    let text = std::fs::read_to_string(common::smoke_config()).unwrap();
    let cfg = ExperimentConfig::parse(
        &text,
        &[
            "train.steps.joint=11".into(),
            "train.variant=traj_irm".into(),
            "seed=4".into(),
            "output_dir=some/where".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.train.steps.joint, 11);
    assert_eq!(cfg.train.variant, Variant::TrajIrm);
    assert_eq!(cfg.train.seed, 4);
    assert_eq!(cfg.output_dir.as_deref(), Some(std::path::Path::new("some/where")));
    let again = ExperimentConfig::parse(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(again, cfg);
    assert!(ExperimentConfig::parse(&text, &["noequals".into()]).is_err());
}

#[test]
fn shipped_configs_parse() {
    for name in ["smoke.toml", "benchmark.toml"] {
        let path = common::workspace().join("configs").join(name);
        ExperimentConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
