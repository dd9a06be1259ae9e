use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn cca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cca"))
        .args(args)
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) -> Value {
    let out = cca(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn exit_code(args: &[&str]) -> i32 {
    cca(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn spec_json(seed: u64, latent: usize) -> Value {
    json!({
        "generative": {
            "n_latents": 8,
            "ambient_dim": 16,
            "latent_dists": ["laplace"],
            "latent_scales": [0.7, 0.7, 1.2, 1.2, 1.2, 1.2, 1.2, 1.2],
            "offset_norm": 2.0,
            "label_rule": {"latents": [latent, 1], "weights": [1.0, 1.0], "thresholds": [-0.56, 0.0, 0.56]},
            "seed": seed
        },
        "shots": 16,
        "val_per_class": 30,
        "test_per_class": 40,
        "source_samples": 3000
    })
}

/// Synthetic task, ICA model and working directory shared by most tests.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("spec.json"), spec_json(11, 0).to_string()).unwrap();
        run_ok(&[
            "synth",
            "--spec",
            s(&ws.path("spec.json")),
            "--out",
            s(&ws.path("task")),
        ]);
        run_ok(&[
            "fit-ica",
            "--source",
            s(&ws.path("task/source.ccaf")),
            "--components",
            "8",
            "--out",
            s(&ws.path("ica")),
        ]);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn manifest(&self) -> PathBuf {
        self.path("task/manifest.json")
    }
}

fn assert_report_header(report: &Value, command: &str) {
    assert_eq!(report["command"], command);
    assert_eq!(report["tool_version"], env!("CARGO_PKG_VERSION"));
    assert!(report["seed"].is_u64());
    assert!(report["wall_time_secs"].as_f64().unwrap() >= 0.0);
    assert!(report["config"].is_object());
    assert!(report["result"].is_object());
}

fn read_f32_pack(path: &Path) -> (usize, usize, Vec<f32>) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[..4], b"CCAF");
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let data = bytes[28..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    (rows, cols, data)
}

#[test]
fn synth_is_reproducible_and_validated() {
    let ws = Workspace::new();
    let report = run_ok(&[
        "synth",
        "--spec",
        s(&ws.path("spec.json")),
        "--out",
        s(&ws.path("again")),
    ]);
    assert_report_header(&report, "synth");
    assert_eq!(report["result"]["n_classes"], 4);
    for entry in fs::read_dir(ws.path("task")).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "manifest.json" {
            continue;
        }
        assert_eq!(
            fs::read(ws.path("task").join(&name)).unwrap(),
            fs::read(ws.path("again").join(&name)).unwrap(),
            "{name:?}"
        );
    }

    run_ok(&[
        "synth",
        "--spec",
        s(&ws.path("spec.json")),
        "--out",
        s(&ws.path("reseeded")),
        "--seed",
        "12",
    ]);
    assert_ne!(
        fs::read(ws.path("task/cache_features.ccaf")).unwrap(),
        fs::read(ws.path("reseeded/cache_features.ccaf")).unwrap()
    );

    fs::write(ws.path("bad.json"), spec_json(11, 9).to_string()).unwrap();
    assert_eq!(
        exit_code(&[
            "synth",
            "--spec",
            s(&ws.path("bad.json")),
            "--out",
            s(&ws.path("bad"))
        ]),
        2
    );
    assert_eq!(exit_code(&["synth", "--out", s(&ws.path("bad"))]), 2);
}

#[test]
fn fit_ica_is_deterministic_and_validated() {
    let ws = Workspace::new();
    let source = ws.path("task/source.ccaf");
    let report = run_ok(&[
        "fit-ica",
        "--source",
        s(&source),
        "--components",
        "8",
        "--out",
        s(&ws.path("ica2")),
    ]);
    assert_report_header(&report, "fit-ica");
    assert_eq!(report["result"]["converged"], true);
    for file in ["mean.ccaf", "whitening.ccaf", "rotation.ccaf", "ica.json"] {
        assert_eq!(
            fs::read(ws.path("ica").join(file)).unwrap(),
            fs::read(ws.path("ica2").join(file)).unwrap(),
            "{file}"
        );
    }

    assert_eq!(
        exit_code(&[
            "fit-ica",
            "--source",
            s(&source),
            "--components",
            "17",
            "--out",
            s(&ws.path("x"))
        ]),
        2
    );
    assert_eq!(
        exit_code(&[
            "fit-ica",
            "--source",
            s(&ws.path("missing.ccaf")),
            "--out",
            s(&ws.path("x"))
        ]),
        2
    );
    assert_eq!(
        exit_code(&["fit-ica", "--source", s(&source), "--nonlinearity", "tanh"]),
        2
    );
}

#[test]
fn train_writes_checkpoint_and_honours_ablations() {
    let ws = Workspace::new();
    let manifest = ws.manifest();
    let report = run_ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ws.path("ica")),
        "--out",
        s(&ws.path("ckpt")),
        "--seed",
        "4",
    ]);
    assert_report_header(&report, "train");
    assert_eq!(report["seed"], 4);
    assert_eq!(report["config"]["train"]["epochs"], 20);
    assert_eq!(report["result"]["loss_trace"].as_array().unwrap().len(), 20);
    assert!(ws.path("ckpt/train_log.json").exists());

    run_ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ws.path("ica")),
        "--out",
        s(&ws.path("fixed")),
        "--fix-cache-adapter",
    ]);
    let (rows, cols, w) = read_f32_pack(&ws.path("fixed/cache_adapter.ccaf"));
    assert_eq!((rows, cols), (8, 8));
    for i in 0..rows {
        for j in 0..cols {
            assert_eq!(w[i * cols + j], if i == j { 1.0 } else { 0.0 });
        }
    }

    assert_eq!(
        exit_code(&[
            "train",
            "--manifest",
            s(&manifest),
            "--out",
            s(&ws.path("x"))
        ]),
        2
    );
    assert_eq!(
        exit_code(&[
            "train",
            "--manifest",
            s(&manifest),
            "--no-ica",
            "--out",
            s(&ws.path("x")),
            "--epochs",
            "0"
        ]),
        2
    );
}

#[test]
fn config_file_is_overridden_by_flags() {
    let ws = Workspace::new();
    let config = json!({
        "manifest": ws.manifest(),
        "no_ica": true,
        "out": ws.path("from_config"),
        "epochs": 2,
        "lr_cache": 0.01
    });
    fs::write(ws.path("train.json"), config.to_string()).unwrap();
    let report = run_ok(&[
        "train",
        "--config",
        s(&ws.path("train.json")),
        "--epochs",
        "3",
    ]);
    assert_eq!(report["config"]["train"]["epochs"], 3);
    assert_eq!(report["config"]["train"]["lr_cache"], 0.01);
    assert_eq!(report["result"]["feature_space"], "identity");

    fs::write(ws.path("typo.json"), r#"{"epohcs": 3}"#).unwrap();
    assert_eq!(
        exit_code(&["train", "--config", s(&ws.path("typo.json"))]),
        2
    );
}

#[test]
fn eval_is_batch_independent_and_self_consistent() {
    let ws = Workspace::new();
    let manifest = ws.manifest();
    let ica = ws.path("ica");
    let base = ["eval", "--manifest", s(&manifest), "--ica", s(&ica)];
    let one = run_ok(&[&base[..], &["--batch-size", "1"]].concat());
    let many = run_ok(&[&base[..], &["--batch-size", "64"]].concat());
    assert_report_header(&one, "eval");
    assert_eq!(one["result"]["mode"], "training-free");
    assert_eq!(one["result"]["splits"], many["result"]["splits"]);

    for (name, split) in one["result"]["splits"].as_object().unwrap() {
        let confusion: Vec<Vec<u64>> = serde_json::from_value(split["confusion"].clone()).unwrap();
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        assert_eq!(total, split["n_samples"].as_u64().unwrap(), "{name}");
        let acc = split["accuracy"].as_f64().unwrap();
        assert!((acc - correct as f64 / total as f64).abs() < 1e-9, "{name}");
    }

    let only_test = run_ok(&[&base[..], &["--split", "test"]].concat());
    assert_eq!(only_test["result"]["splits"].as_object().unwrap().len(), 1);
    assert_eq!(exit_code(&[&base[..], &["--split", "train"]].concat()), 2);
    assert_eq!(exit_code(&[&base[..], &["--batch-size", "0"]].concat()), 2);
    assert_eq!(exit_code(&["eval", "--manifest", s(&manifest)]), 2);
}

#[test]
fn eval_uses_the_checkpoint_feature_space() {
    let ws = Workspace::new();
    let manifest = ws.manifest();
    run_ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ws.path("ica")),
        "--out",
        s(&ws.path("ckpt")),
    ]);
    let report = run_ok(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ws.path("ckpt")),
    ]);
    assert_eq!(report["result"]["mode"], "checkpoint");
    assert_ne!(report["result"]["feature_space"], "identity");

    // A checkpoint trained in the ICA space does not fit raw features.
    let mismatch = exit_code(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ws.path("ckpt")),
        "--no-ica",
    ]);
    assert_eq!(mismatch, 2);
}

#[test]
fn search_rows_and_reevaluation_agree() {
    let ws = Workspace::new();
    let manifest = ws.manifest();
    let ica = ws.path("ica");
    let single = run_ok(&[
        "search",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ica),
        "--alpha-values",
        "2",
        "--beta-values",
        "3",
        "--gamma-values",
        "0.25",
        "--eta-values",
        "0.75",
        "--full",
    ]);
    assert_report_header(&single, "search");
    assert_eq!(single["result"]["table"].as_array().unwrap().len(), 1);

    let report = run_ok(&[
        "search",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ica),
        "--alpha-values",
        "0.5,1,4",
        "--beta-values",
        "2,5.5",
    ]);
    let best = &report["result"]["best"];
    let reeval = run_ok(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ica),
        "--split",
        "val",
        "--alpha",
        &best["alpha"].to_string(),
        "--beta",
        &best["beta"].to_string(),
        "--gamma",
        &best["gamma"].to_string(),
        "--eta",
        &best["eta"].to_string(),
    ]);
    assert_eq!(
        reeval["result"]["splits"]["val"]["accuracy"],
        report["result"]["best_accuracy"]
    );

    assert_eq!(
        exit_code(&[
            "search",
            "--manifest",
            s(&manifest),
            "--ica",
            s(&ica),
            "--alpha-values",
            "1,x"
        ]),
        2
    );
    assert_eq!(
        exit_code(&[
            "search",
            "--manifest",
            s(&manifest),
            "--ica",
            s(&ica),
            "--beta-values",
            "3,2"
        ]),
        2
    );
}

#[test]
fn no_fusion_checkpoint_pins_fusion_grids() {
    let ws = Workspace::new();
    let manifest = ws.manifest();
    run_ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--no-ica",
        "--no-fusion",
        "--out",
        s(&ws.path("plain")),
    ]);
    let report = run_ok(&[
        "search",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ws.path("plain")),
        "--alpha-values",
        "1,2",
        "--beta-values",
        "5",
        "--full",
    ]);
    assert_eq!(report["result"]["feature_space"], "identity");
    assert_eq!(report["result"]["table"].as_array().unwrap().len(), 2);
    assert_eq!(report["result"]["best"]["gamma"], 0.0);
    assert_eq!(report["result"]["best"]["eta"], 0.0);
}

#[test]
fn check_grads_passes_at_init_and_after_training() {
    let ws = Workspace::new();
    let manifest = ws.manifest();
    let report = run_ok(&[
        "check-grads",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ws.path("ica")),
    ]);
    assert_report_header(&report, "check-grads");
    assert_eq!(report["result"]["pass"], true);

    run_ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ws.path("ica")),
        "--out",
        s(&ws.path("ckpt")),
    ]);
    let trained = run_ok(&[
        "check-grads",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ws.path("ckpt")),
    ]);
    assert_eq!(trained["result"]["pass"], true);

    // An absurdly tight tolerance is reported as a numeric failure.
    let strict = cca(&[
        "check-grads",
        "--manifest",
        s(&manifest),
        "--ica",
        s(&ws.path("ica")),
        "--tolerance",
        "1e-300",
    ]);
    assert_eq!(strict.status.code(), Some(3));
    let body: Value = serde_json::from_slice(&strict.stdout).unwrap();
    assert_eq!(body["result"]["pass"], false);
}

#[test]
fn help_and_unknown_commands() {
    assert_eq!(exit_code(&["--help"]), 0);
    assert_eq!(exit_code(&["frobnicate"]), 2);
    assert_eq!(exit_code(&[]), 2);
}
