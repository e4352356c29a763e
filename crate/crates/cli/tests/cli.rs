use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set",
    "data.n_samples=120",
    "--set",
    "data.patch_grid=2",
    "--set",
    "data.patch_dim=4",
    "--set",
    "encoder.d_model=8",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sticker-select"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, seed: &str) -> Output {
    let mut args = vec!["gen-data", "--seed", seed, "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    run(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_creates_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a/nested"), tmp.path().join("b"));
    let oa = gen(&a, "42");
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(gen(&b, "42").status.success());
    assert!(stdout(&oa).contains("train.jsonl\t80"));
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = json(&a.join("run_manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["data_seed"], 42);
    assert_eq!(m["config"]["data"]["n_samples"], 120);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn n_samples_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "gen-data",
        "--n-samples",
        "60",
        "--set",
        "data.n_samples=600",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("train.jsonl\t40"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[data]\nn_samples = 60\nseed = 3\npatch_grid = 2\n").unwrap();
    let out = tmp.path().join("d");
    let o = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&out.join("run_manifest.json"));
    assert_eq!(m["config"]["data"]["n_samples"], 60);
    assert_eq!(m["config"]["data"]["patch_grid"], 2);
    assert_eq!(m["data_seed"], 9);
}

#[test]
fn usage_and_config_errors_exit_2_and_io_errors_exit_3() {
    let o = run(&["gen-data", "--n-samples", "lots"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("invalid value"));
    let o = run(&["gen-data", "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["gen-data", "--set", "nosuch.key=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["--threads", "0", "gradcheck"]);
    assert_eq!(o.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run(&["gen-data", "--n-samples", "30", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("file"), "{}", stderr(&o));
}

#[test]
fn eval_with_a_missing_checkpoint_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "1").status.success());
    let missing = tmp.path().join("nowhere/checkpoint.json");
    let o = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere/checkpoint.json"), "{}", stderr(&o));
    let o = run(&["eval", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("run");
    assert!(gen(&data, "5").status.success());
    let d = data.to_str().unwrap();
    let r = runs.to_str().unwrap();
    let train = |extra: &[&str]| {
        let mut args = vec![
            "train",
            "--data",
            d,
            "--out",
            r,
            "--set",
            "encoder.d_model=8",
            "--set",
            "encoder.n_layers=1",
            "--lr",
            "1e-3",
        ];
        args.extend(extra);
        run(&args)
    };
    let o = train(&["--epochs", "1", "--max-steps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = runs.join("checkpoint.json");
    let log = fs::read_to_string(runs.join("steps.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("step\tepoch\ttotal"));
    let m = json(&runs.join("run_manifest.json"));
    assert_eq!(m["config"]["train"]["max_steps"], 2);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);

    let o = train(&["--epochs", "1", "--max-steps", "4", "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(runs.join("steps.tsv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3"]);

    let o = run(&["eval", "--data", d, "--checkpoint", ckpt.to_str().unwrap(), "--split", "val", "--out", r]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let header = text.lines().next().unwrap();
    assert!(header.contains("MAP") && header.contains("R10@1") && header.contains("R10@5"));
    let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row[0], "val");
    let map: f64 = row[1].parse().unwrap();
    assert!((0.0..=100.0).contains(&map));
    assert_eq!(row[1].split('.').nth(1).map(str::len), Some(1));
    let metrics = json(&runs.join("metrics.json"));
    assert!((metrics["map"].as_f64().unwrap() * 100.0 - map).abs() <= 0.05 + 1e-9);
}

#[test]
fn gradcheck_passes_on_the_tiny_model() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "gradcheck",
        "--dim",
        "8",
        "--batch",
        "2",
        "--coords",
        "5",
        "--set",
        "encoder.n_layers=1",
        "--set",
        "data.patch_grid=2",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    assert!(tmp.path().join("gradcheck.tsv").exists());
}

#[test]
fn gradcheck_with_an_impossible_tolerance_exits_4() {
    let o = run(&[
        "gradcheck",
        "--dim",
        "8",
        "--batch",
        "1",
        "--coords",
        "3",
        "--tol",
        "1e-300",
        "--set",
        "encoder.n_layers=1",
        "--set",
        "data.patch_grid=2",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn ablate_table4_emits_six_records_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "2").status.success());
    let out = tmp.path().join("abl");
    let o = run(&[
        "ablate",
        "--preset",
        "table4",
        "--seeds",
        "1,2",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "encoder.d_model=8",
        "--set",
        "encoder.n_layers=1",
        "--set",
        "train.max_steps=1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = json(&out.join("ablation.json"));
    let recs = recs.as_array().unwrap();
    assert_eq!(recs.len(), 12);
    assert_eq!(recs[0]["name"], "full");
    assert_eq!(recs[6]["seed"], 2);
    let o = run(&["ablate", "--preset", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}
