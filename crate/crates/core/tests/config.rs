use sphdiff::config::{RunConfig, CONFIG_HASH_FILE, RESOLVED_CONFIG_FILE};
use sphdiff::Error;

#[test]
fn empty_document_is_the_default() {
    assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
}

#[test]
fn unknown_keys_are_rejected_with_their_name() {
    match RunConfig::from_toml_str("epochs = 3\nlearning_rate = 0.1\n") {
        Err(Error::Config { path, .. }) => assert_eq!(path, "learning_rate"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn type_errors_name_the_key() {
    match RunConfig::from_toml_str("demos = 10\nepochs = \"many\"\n") {
        Err(Error::Config { path, .. }) => assert_eq!(path, "epochs"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn invalid_values_are_config_errors() {
    for doc in ["lr = -1.0", "action_horizon = 40", "x0_max_norm = -2.0", "horizon = 12", "widths = []", "rot_threshold_deg = 0.0"] {
        assert!(matches!(RunConfig::from_toml_str(doc), Err(Error::Config { .. })), "{doc}");
    }
}

#[test]
fn resolved_document_round_trips() {
    let cfg = RunConfig { epochs: 7, lr: 1e-3, demo_rotations: "tilt:15".parse().unwrap(), ..Default::default() };
    let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(RunConfig::default().hash(), cfg.hash());
}

#[test]
fn resolved_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { epochs: 2, ..Default::default() };
    cfg.write_resolved(dir.path()).unwrap();
    let loaded = RunConfig::load(&dir.path().join(RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(loaded, cfg);
    let hash = std::fs::read_to_string(dir.path().join(CONFIG_HASH_FILE)).unwrap();
    assert_eq!(hash.trim(), cfg.hash());
}

#[test]
fn derived_configs_follow_the_flat_keys() {
    let cfg = RunConfig { band_limit: 1, history: 3, absolute_actions: true, x0_max_norm: 0.0, ..Default::default() };
    let p = cfg.policy_config();
    assert_eq!(p.sdtu.band_limit, 1);
    assert_eq!(p.encoder.band_limit, 1);
    assert_eq!(p.encoder.history, 3);
    assert!(p.absolute);
    assert_eq!(p.x0_max_norm, None);
    assert_eq!(cfg.train_config(9).seed, 9);
}

#[test]
fn baseline_is_flat_with_a_matched_budget() {
    let cfg = RunConfig::default();
    let base = cfg.baseline();
    assert!(base.flat);
    let eq = sphdiff::bench::Policy::new(cfg.policy_config()).unwrap().init(0).unwrap().num_scalars() as f64;
    let flat = sphdiff::bench::Policy::new(base.policy_config()).unwrap().init(0).unwrap().num_scalars() as f64;
    assert!((flat / eq - 1.0).abs() < 0.25, "equivariant {eq}, flat {flat}");
}

#[test]
fn task_file_is_overridden_by_flat_keys() {
    let dir = tempfile::tempdir().unwrap();
    let task = dir.path().join("task.toml");
    let spec = sphdiff::bench::TaskSpec { episode_steps: 24, ..Default::default() };
    std::fs::write(&task, spec.to_toml()).unwrap();
    let doc = format!("task_file = {:?}\nyaw_range_deg = 10.0\n", task.to_str().unwrap());
    let cfg = RunConfig::from_toml_str(&doc).unwrap();
    let t = cfg.task_spec().unwrap();
    assert_eq!(t.yaw_range_deg, 10.0);
    // flat keys always win, including their defaults
    assert_eq!(t.episode_steps, cfg.episode_steps);
    assert_eq!(t.template, spec.template);
}
