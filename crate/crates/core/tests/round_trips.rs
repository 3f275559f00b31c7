use std::fs;

use z2fsl::backbones::{generate_rows, Backbone};
use z2fsl::config::{preset, Config, Stage};
use z2fsl::data::{make_toy_dataset, Dataset, Mode, ToySpec};
use z2fsl::fsl::ProtoNet;
use z2fsl::nn::Checkpoint;
use z2fsl::pipeline;
use z2fsl::rng::stream_rng;
use z2fsl::{Error, ErrorKind};

fn small_gzsl_toy() -> Dataset {
    make_toy_dataset(&ToySpec {
        seen: 5,
        unseen: 3,
        attr_dim: 6,
        feat_dim: 10,
        per_class: 20,
        mode: Mode::Gzsl,
        seed: 3,
        ..ToySpec::default()
    })
    .unwrap()
}

fn toy_config(stage: Stage) -> Config {
    let mut cfg = Config::from_text(preset("toy-gzsl").unwrap(), "toy-gzsl", stage).unwrap();
    cfg.apply_overrides(&["N=30", "N_h=30", "n_S_test=20", "n_W=4", "gen_hidden=16", "enc_hidden=16"])
        .unwrap();
    cfg
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = small_gzsl_toy();
    ds.set_metadata("note", "kept".into());
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.metadata("note"), Some("kept"));
}

#[test]
fn corrupted_matrix_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    small_gzsl_toy().save(dir.path()).unwrap();
    let path = dir.path().join("labels.z2fd");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    assert_eq!(err.kind(), ErrorKind::Data);

    bytes[0] = b'Z';
    bytes.truncate(bytes.len() - 3);
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Truncated { .. })));
}

#[test]
fn trained_models_survive_checkpoint_files() {
    let ds = small_gzsl_toy();
    let (mut pn, _) = pipeline::pretrain(&ds, &toy_config(Stage::Pretrain)).unwrap();
    let cfg = toy_config(Stage::Train);
    let mut bb = Backbone::new(cfg.backbone, ds.attr_dim(), ds.feat_dim(), &cfg.architecture(), cfg.seed);
    pipeline::train_z2fsl(&mut bb, &mut pn, &ds, &cfg, &mut |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    bb.to_checkpoint().save(&dir.path().join("b.z2fm")).unwrap();
    pn.to_checkpoint().save(&dir.path().join("p.z2fm")).unwrap();
    let bb2 = Backbone::from_checkpoint(&Checkpoint::load(&dir.path().join("b.z2fm")).unwrap()).unwrap();
    let pn2 = ProtoNet::from_checkpoint(&Checkpoint::load(&dir.path().join("p.z2fm")).unwrap()).unwrap();
    assert_eq!(bb2, bb);
    assert_eq!(pn2, pn);
    let a = generate_rows(&bb, &ds.attributes, &mut stream_rng(1, 0)).unwrap();
    let b = generate_rows(&bb2, &ds.attributes, &mut stream_rng(1, 0)).unwrap();
    assert_eq!(a, b);

    let ecfg = toy_config(Stage::Eval);
    let r = pipeline::evaluate_protonet(&pn2, &bb2, &ds, &ecfg).unwrap();
    assert!(r.acc.is_none());
    let (u, s, h) = (r.u.unwrap(), r.s.unwrap(), r.h.unwrap());
    assert_eq!(h, pipeline::harmonic_mean(u, s));
    assert_eq!(r.per_class.len(), 8);
}

#[test]
fn zero_shot_config_on_generalized_data_scores_unseen_samples_only() {
    let ds = small_gzsl_toy();
    let mut cfg = toy_config(Stage::Eval);
    cfg.mode = Mode::Zsl;
    let bb = Backbone::new(cfg.backbone, ds.attr_dim(), ds.feat_dim(), &cfg.architecture(), 0);
    let pn = pipeline::new_protonet(&ds, &cfg);
    let r = pipeline::evaluate_protonet(&pn, &bb, &ds, &cfg).unwrap();
    assert_eq!(r.per_class.iter().map(|t| t.class).collect::<Vec<_>>(), vec![5, 6, 7]);
    assert!(r.acc.is_some() && r.h.is_none());
}
