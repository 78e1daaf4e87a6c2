use semimatch::config::ExperimentConfig;
use semimatch::signal::{split_dataset, synth_generate, Protocol};
use semimatch::ssl::{Method, SslMethodConfig};
use semimatch::train::{train, GridCell, TrainConfig};

fn quick(method: Method, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(SslMethodConfig::defaults(method, Protocol::Seed), 2, seed);
    cfg.epochs = 2;
    cfg.max_steps_per_epoch = Some(3);
    cfg
}

#[test]
fn repeated_cells_give_identical_reports() {
    let ds = synth_generate(3, 40, 3.0, 0).unwrap();
    for method in Method::ALL {
        let split = split_dataset(&ds, 2, 7, Protocol::Seed).unwrap();
        let a = train(&quick(method, 7), &split, &ds, "synth").unwrap();
        let b = train(&quick(method, 7), &split, &ds, "synth").unwrap();
        assert_eq!(
            a.deterministic_json().unwrap(),
            b.deterministic_json().unwrap(),
            "{method}"
        );
    }
}

#[test]
fn separable_data_is_learned() {
    let ds = synth_generate(3, 300, 8.0, 1).unwrap();
    let split = split_dataset(&ds, 25, 0, Protocol::Seed).unwrap();
    let mut cfg = TrainConfig::new(
        SslMethodConfig::defaults(Method::SupervisedOnly, Protocol::Seed),
        25,
        0,
    );
    cfg.epochs = 10;
    let report = train(&cfg, &split, &ds, "synth").unwrap();
    assert!(report.test_accuracy > 0.95, "{}", report.test_accuracy);
}

#[test]
fn indistinguishable_classes_stay_near_chance() {
    let ds = synth_generate(3, 1000, 0.0, 2).unwrap();
    let split = split_dataset(&ds, 5, 0, Protocol::Seed).unwrap();
    let mut cfg = TrainConfig::new(
        SslMethodConfig::defaults(Method::SupervisedOnly, Protocol::Seed),
        5,
        0,
    );
    cfg.epochs = 3;
    cfg.max_steps_per_epoch = Some(20);
    let report = train(&cfg, &split, &ds, "synth").unwrap();
    assert!(
        (report.test_accuracy - 1.0 / 3.0).abs() < 0.05,
        "{}",
        report.test_accuracy
    );
}

#[test]
fn config_cells_resolve_to_train_configs() {
    let cfg = ExperimentConfig::default();
    let cells = cfg.cells();
    assert_eq!(cells.len(), 9 * 6 * 5);
    let tc = cfg
        .train_config(GridCell {
            method: Method::AdaMatch,
            m: 7,
            seed: 3,
        })
        .unwrap();
    assert_eq!((tc.m, tc.seed, tc.method.method), (7, 3, Method::AdaMatch));
}

#[test]
fn default_config_matches_golden_file() {
    let cfg = ExperimentConfig::default();
    assert_eq!(
        cfg.to_toml().unwrap(),
        include_str!("data/default_config.toml")
    );
    let back = ExperimentConfig::from_toml(include_str!("data/default_config.toml")).unwrap();
    assert_eq!(back.to_toml().unwrap(), cfg.to_toml().unwrap());
    for (protocol, tau) in [(Protocol::Seed, 0.6), (Protocol::SeedIv, 0.5)] {
        let mut c = cfg.clone();
        c.dataset.protocol = protocol;
        assert_eq!(c.method_config(Method::AdaMatch).unwrap().tau, tau);
    }
    let fix = cfg.method_config(Method::FixMatch).unwrap();
    assert_eq!(
        (fix.tau, fix.weak.sigma, fix.strong.sigma, fix.weak.mu),
        (0.9, 0.2, 0.8, 0.5)
    );
}
