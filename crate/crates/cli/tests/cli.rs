use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gap_cli::reproduce::{self, SUMMARY_FILE};

const TINY: &str = "\
data.episodes = 40
train.steps = 60
train.quota = 10
model.hidden = 16,16
model.dyn_hidden = 16
fuzz.trials = 200
noise.trials = 20
profile.sequences = 100
profile.cohorts = 100,10
profile.seeds = 2
eval.seeds = 1
eval.trials = 4
harness.trials = 4
cem.candidates = 100
";

fn gap(args: &[&str], data_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gap"))
        .args(args)
        .env(gap_cli::DATA_DIR_VAR, data_root)
        .output()
        .expect("run gap")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn manifest_field(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_default()
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(code(&gap(&["no-such-verb"], root)), 2);
    assert_eq!(code(&gap(&["collect", "--bogus"], root)), 2);
    assert_eq!(
        code(&gap(&["--set", "train.nope=3", "theorem-fuzz"], root)),
        2
    );
    assert_eq!(
        code(&gap(&["--set", "train.steps=many", "theorem-fuzz"], root)),
        2
    );
    let cfg = root.join("bad.cfg");
    fs::write(&cfg, "train.steps = 5\ntrain.steps = 6\n").unwrap();
    let o = gap(&["--config", cfg.to_str().unwrap(), "theorem-fuzz"], root);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn collect_then_train_writes_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let o = gap(
        &[
            "--seed",
            "3",
            "--out",
            data.to_str().unwrap(),
            "collect",
            "--env",
            "pointnav",
            "--episodes",
            "12",
            "--length",
            "10",
        ],
        root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest_field(&data, "status"), "ok");
    assert!(data.join("dataset.gapd").exists());

    let model = root.join("model");
    let train = [
        "--out",
        model.to_str().unwrap(),
        "--set",
        "model.hidden=8",
        "--set",
        "model.dyn_hidden=8",
        "--set",
        "data.window=5",
        "train",
        "--variant",
        "gap",
        "--data",
        data.to_str().unwrap(),
        "--steps",
        "20",
    ];
    let o = gap(&train, root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest_field(&model, "status"), "ok");
    assert!(!manifest_field(&model, "input_hash").is_empty());
    assert!(model.join("params.gapw").exists());

    // rerunning with the same inputs reproduces the hash and the weights
    let hash = manifest_field(&model, "input_hash");
    let params = fs::read(model.join("params.gapw")).unwrap();
    let o = gap(&train, root);
    assert_eq!(code(&o), 0);
    assert_eq!(manifest_field(&model, "input_hash"), hash);
    assert_eq!(fs::read(model.join("params.gapw")).unwrap(), params);
}

#[test]
fn dataset_falls_back_to_data_root() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let o = gap(
        &[
            "--seed",
            "4",
            "collect",
            "--env",
            "pointnav",
            "--episodes",
            "3",
            "--length",
            "5",
        ],
        root,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("pointnav-s4").join("dataset.gapd").exists());
}

#[test]
fn tiny_reproduce_resumes_and_lists_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = |dir: &Path| {
        gap(
            &[
                "--seed",
                "5",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                dir.to_str().unwrap(),
                "reproduce",
            ],
            root,
        )
    };
    let a = root.join("a");
    let first = run(&a);
    // tiny settings are not expected to meet every criterion
    assert!(
        matches!(code(&first), 0 | 1),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    assert!(reproduce::orphans(&a).unwrap().is_empty());
    let summary = fs::read(a.join(SUMMARY_FILE)).unwrap();

    let resumed = run(&a);
    assert_eq!(code(&resumed), code(&first));
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("already done"));
    assert_eq!(fs::read(a.join(SUMMARY_FILE)).unwrap(), summary);
    assert!(reproduce::orphans(&a).unwrap().is_empty());

    let b = root.join("b");
    assert_eq!(code(&run(&b)), code(&first));
    reproduce::compare_summaries(&a, &b).unwrap();

    // a different seed may not reuse the directory
    let o = gap(
        &[
            "--seed",
            "6",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            a.to_str().unwrap(),
            "reproduce",
        ],
        root,
    );
    assert_eq!(code(&o), 2);
}
