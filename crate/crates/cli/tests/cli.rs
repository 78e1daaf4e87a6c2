use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semimatch(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_semimatch"));
    cmd.args(args)
        .env_remove("SEMIMATCH_OUT")
        .env("RUST_LOG", "info");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const TINY: [&str; 12] = [
    "--set",
    "dataset.n_per_class=40",
    "--method",
    "fixmatch,supervised_only",
    "--m",
    "1,2",
    "--seeds",
    "0",
    "--epochs",
    "2",
    "--max-steps",
    "2",
];

#[test]
fn quick_selftest_passes() {
    let o = semimatch(&["selftest", "--quick"], &[]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("PASS grad/conv1d_input"));
    assert!(out.contains("PASS oracle/sharpen"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn run_then_resume_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res");
    let out_s = out.to_str().unwrap();
    let mut args = vec!["run", "--out", out_s];
    args.extend(TINY);
    let o = semimatch(&args, &[]);
    assert!(o.status.success(), "{}", text(&o));
    let report = out.join("reports/fixmatch_m1_s0.json");
    assert!(report.is_file());
    assert_eq!(fs::read_dir(out.join("reports")).unwrap().count(), 4);
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(csv.starts_with("method,m=1,m=2"), "{csv}");
    assert!(out.join("config.toml").is_file());

    let before = fs::read(&report).unwrap();
    let o = semimatch(&["resume", "--out", out_s], &[]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("trained 0, kept 4"), "{}", text(&o));
    assert_eq!(fs::read(&report).unwrap(), before);

    fs::write(out.join("reports/supervised_only_m2_s0.json"), "{ not json").unwrap();
    let o = semimatch(&["summarize", "--out", out_s], &[]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(
        text(&o).contains("supervised_only_m2_s0.json"),
        "{}",
        text(&o)
    );
}

#[test]
fn env_sets_output_dir_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from_env");
    let mut args = vec!["run", "--method", "supervised_only", "--m", "1"];
    args.extend(&TINY[..2]);
    args.extend(&TINY[6..]);
    let o = semimatch(&args, &[("SEMIMATCH_OUT", &env_out)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(env_out.join("reports/supervised_only_m1_s0.json").is_file());

    let flag_out = dir.path().join("from_flag");
    let mut args = args.clone();
    let flag_s = flag_out.to_str().unwrap().to_string();
    args.extend(["--out", &flag_s]);
    let o = semimatch(&args, &[("SEMIMATCH_OUT", &env_out)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(flag_out
        .join("reports/supervised_only_m1_s0.json")
        .is_file());
    assert!(text(&o).contains("overrides env"), "{}", text(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = semimatch(&["run", "--out", out, "--set", "train.epohcs=3"], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("epohcs") && t.contains("epochs"), "{t}");
}

#[test]
fn bad_config_file_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[ssl]\nalpha = \"high\"\n").unwrap();
    let o = semimatch(&["run", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("ssl.alpha"), "{}", text(&o));
}

#[test]
fn missing_output_dir_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = semimatch(&["summarize", "--out", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    let o = semimatch(&["resume", "--out", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn gen_synth_and_convert_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let bin = dir.path().join("s.smde");
    let back = dir.path().join("back.csv");
    let o = semimatch(
        &[
            "gen-synth",
            csv.to_str().unwrap(),
            "--k",
            "4",
            "--n-per-class",
            "6",
            "--seed",
            "3",
        ],
        &[],
    );
    assert!(o.status.success(), "{}", text(&o));
    let o = semimatch(
        &[
            "convert-features",
            csv.to_str().unwrap(),
            bin.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("24 samples"), "{}", text(&o));
    let o = semimatch(
        &[
            "convert-features",
            bin.to_str().unwrap(),
            back.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&back).unwrap());
}

#[test]
fn corrupt_feature_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.smde");
    fs::write(&bad, b"not a feature file").unwrap();
    let out = dir.path().join("o.csv");
    let o = semimatch(
        &[
            "convert-features",
            bad.to_str().unwrap(),
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn run_on_a_feature_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.smde");
    let o = semimatch(
        &["gen-synth", data.to_str().unwrap(), "--n-per-class", "40"],
        &[],
    );
    assert!(o.status.success(), "{}", text(&o));
    let out = dir.path().join("res");
    let o = semimatch(
        &[
            "run",
            "--dataset",
            data.to_str().unwrap(),
            "--method",
            "pseudo_label",
            "--m",
            "1",
            "--seeds",
            "1",
            "--epochs",
            "1",
            "--max-steps",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", text(&o));
    let report = fs::read_to_string(out.join("reports/pseudo_label_m1_s1.json")).unwrap();
    assert!(report.contains("d.smde"), "{report}");
}
