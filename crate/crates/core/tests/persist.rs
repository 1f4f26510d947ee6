use fhseg::data::generate_patches;
use fhseg::net::{ModelConfig, SkipMode};
use fhseg::persist::{parse_train_config, train_config_text, Checkpoint, RunConfig};
use fhseg::train::{TrainConfig, Trainer};
use fhseg::Error;

fn tiny() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            depth: 3,
            base_channels: 2,
            skip_branch_channels: 4,
            ..ModelConfig::default()
        },
        epochs: 1,
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn trained() -> Trainer {
    let data = generate_patches(&Default::default(), 4, 1).unwrap();
    let mut t = Trainer::new(tiny()).unwrap();
    t.fit(&data, |_, _| Ok(())).unwrap();
    t
}

#[test]
fn config_defaults_and_overrides() {
    let c = RunConfig::parse("# run\nseed = 7\nout_dir = runs/a\n\nskip_mode = fullscale_all  # trailing\nlr = 0.0005\ngates = false\n").unwrap();
    assert_eq!(c.seed, Some(7));
    assert_eq!(c.train.seed, 7);
    assert_eq!(c.train.model.skip_mode, SkipMode::FullScaleAll);
    assert!(!c.train.model.gates);
    assert_eq!(c.train.adam.lr, 5e-4);
    assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    assert_eq!(c.require_out_dir().unwrap().to_str(), Some("runs/a"));
    assert!(c.manifest_path().unwrap().ends_with("manifest.tsv"));
}

#[test]
fn config_requires_seed_and_out_dir() {
    let c = RunConfig::parse("epochs = 2\n").unwrap();
    assert!(matches!(c.require_seed(), Err(Error::Config(_))));
    assert!(matches!(c.require_out_dir(), Err(Error::Config(_))));
    assert_eq!(c.with_seed(4).require_seed().unwrap(), 4);
}

#[test]
fn config_rejects_unknown_duplicate_and_malformed() {
    for bad in [
        "colour = red\n",
        "seed = 1\nseed = 2\n",
        "epochs two\n",
        "epochs = two\n",
        "gates = maybe\n",
        "skip_mode = dense\n",
    ] {
        assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn config_text_round_trips() {
    let mut c = RunConfig::parse("seed = 11\nout_dir = x\nnoise = 0.125\nmedia_max = 5.5\n").unwrap();
    c.train.adam.lr = 0.1 + 0.2;
    let back = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn train_echo_round_trips_and_rejects_other_keys() {
    let t = tiny();
    assert_eq!(parse_train_config(&train_config_text(&t)).unwrap(), t);
    assert!(parse_train_config("seed = 1\nout_dir = x\n").is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let t = trained();
    let a = Checkpoint::of(&t).encode();
    let back = Checkpoint::decode(&a, "mem").unwrap();
    assert_eq!(back.encode(), a);
    assert_eq!(back.iteration, t.iteration);
    assert_eq!(back.rng, t.rng_state());
    assert_eq!(back.model.store(), t.model.store());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/run.ckpt");
    let ck = Checkpoint::of(&trained());
    ck.save(&path).unwrap();
    let again = Checkpoint::load(&path).unwrap();
    assert_eq!(again.encode(), ck.encode());
}

#[test]
fn resumed_training_matches_unbroken_run() {
    let data = generate_patches(&Default::default(), 6, 2).unwrap();
    let mut cfg = tiny();
    cfg.epochs = 3;
    let mut full = Trainer::new(cfg.clone()).unwrap();
    let full_log = full.fit(&data, |_, _| Ok(())).unwrap();

    let mut first = cfg.clone();
    first.epochs = 1;
    let mut part = Trainer::new(first).unwrap();
    let mut log = part.fit(&data, |_, _| Ok(())).unwrap();
    let bytes = Checkpoint::of(&part).encode();
    let mut resumed = Checkpoint::decode(&bytes, "mem").unwrap().into_trainer(cfg).unwrap();
    log.extend(resumed.fit(&data, |_, _| Ok(())).unwrap());

    assert_eq!(log, full_log);
    assert_eq!(Checkpoint::of(&resumed).encode(), Checkpoint::of(&full).encode());
}

#[test]
fn checkpoint_rejects_mismatched_model() {
    let ck = Checkpoint::of(&trained());
    let mut other = tiny();
    other.model.skip_branch_channels = 8;
    assert!(matches!(ck.check_model(&other.model), Err(Error::Config(_))));
    assert!(matches!(ck.into_trainer(other), Err(Error::Config(_))));
}

#[test]
fn checkpoint_rejects_newer_version_and_corruption() {
    let bytes = Checkpoint::of(&trained()).encode();
    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&2u32.to_le_bytes());
    match Checkpoint::decode(&newer, "mem") {
        Err(Error::Data(m)) => assert!(m.contains("newer"), "{m}"),
        other => panic!("{other:?}"),
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::decode(&magic, "mem"), Err(Error::Data(_))));
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3], "mem"), Err(Error::Data(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::decode(&long, "mem"), Err(Error::Data(_))));
}

#[test]
fn zero_epoch_checkpoint_equals_initialization() {
    let mut cfg = tiny();
    cfg.epochs = 0;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.fit(&[], |_, _| Ok(())).unwrap();
    let init = fhseg::net::build_model(&cfg.model, cfg.seed).unwrap();
    let ck = Checkpoint::decode(&Checkpoint::of(&t).encode(), "mem").unwrap();
    assert_eq!(ck.model.store(), init.store());
    assert_eq!((ck.epoch, ck.iteration, ck.adam.t), (0, 0, 0));
}
