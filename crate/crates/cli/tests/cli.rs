use std::path::Path;
use std::process::{Command, Output};

fn exbridge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exbridge"))
        .args(args)
        .output()
        .expect("spawn exbridge")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn schedule_csv_for_four_steps() {
    let out = exbridge(&["schedule", "--T", "4", "--s", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == "delta")
        .expect("delta column");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    let delta: Vec<f64> = rows.iter().map(|r| r[col]).collect();
    for (d, want) in delta.iter().zip([0.0, 0.375, 0.5, 0.375, 0.0]) {
        assert!((d - want).abs() < 1e-12, "{delta:?}");
    }
}

#[test]
fn schedule_rejects_degenerate_length() {
    let out = exbridge(&["schedule", "--T", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schedule_suite_passes() {
    let out = exbridge(&["verify", "--suite", "schedule", "--seed", "3"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["failures"], 0);
}

#[test]
fn unknown_suite_is_a_config_error() {
    assert_eq!(
        exbridge(&["verify", "--suite", "bogus"]).status.code(),
        Some(2)
    );
}

#[test]
fn unknown_config_key_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = exbridge(&["train", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn gen_data_writes_triples_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = exbridge(&[
        "gen-data",
        "--n",
        "10",
        "--grid",
        "6",
        "--seed",
        "2",
        "--out-dir",
        path(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    let samples = manifest["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 10);
    assert_eq!(samples.iter().filter(|s| s["split"] == "val").count(), 1);
    let t = exbridge::tensor::read_bkt(dir.path().join("sample_00003_exemplar.bkt")).unwrap();
    assert_eq!(t.shape(), &[3, 6, 6]);
}

#[test]
fn train_then_sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("run.txt");
    std::fs::write(
        &cfg,
        "seed = 5\ntimesteps = 20\nsample_steps = 5\ngrid = 4\nwidth = 4\nheads = 1\ntoken_dim = 4\n\
         time_dim = 4\nenc_dim = 4\nbatch = 2\naccumulation = 1\nstage1_steps = 3\nstage2_steps = 2\n\
         dataset_size = 16\nval_every = 2\nval_size = 2\nlr = 0.001\n",
    )
    .unwrap();
    let out = exbridge(&["train", "--config", path(&cfg), "--out-dir", path(&run)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 5);
    assert_eq!(records[3]["stage"], 2);

    let data = dir.path().join("data");
    assert!(exbridge(&[
        "gen-data",
        "--n",
        "2",
        "--grid",
        "4",
        "--out-dir",
        path(&data)
    ])
    .status
    .success());
    let ckpt = run.join("stage2");
    let control = data.join("sample_00000_control.bkt");
    let exemplar = data.join("sample_00001_exemplar.bkt");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let o = dir.path().join(format!("out{k}.bkt"));
        let args = [
            "sample",
            "--checkpoint",
            path(&ckpt),
            "--control",
            path(&control),
            "--exemplar",
            path(&exemplar),
            "--seed",
            "9",
            "--out",
            path(&o),
            "--dump-every",
            "2",
        ];
        let res = exbridge(&args);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        outputs.push(std::fs::read(&o).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(dir.path().join("out0_t0012.bkt").exists());
}

#[test]
fn resume_continues_into_stage_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("run.txt");
    std::fs::write(
        &cfg,
        "timesteps = 10\nsample_steps = 2\ngrid = 4\nwidth = 4\nheads = 1\ntoken_dim = 4\ntime_dim = 4\n\
         enc_dim = 4\nbatch = 2\naccumulation = 1\nstage1_steps = 2\nstage2_steps = 2\ndataset_size = 8\n",
    )
    .unwrap();
    let s1 = exbridge(&[
        "train",
        "--config",
        path(&cfg),
        "--stage",
        "1",
        "--out-dir",
        path(&run),
    ]);
    assert!(
        s1.status.success(),
        "{}",
        String::from_utf8_lossy(&s1.stderr)
    );
    assert!(!run.join("stage2").exists());
    let s2 = exbridge(&[
        "train",
        "--stage",
        "2",
        "--resume",
        path(&run.join("stage1")),
        "--out-dir",
        path(&run),
    ]);
    assert!(
        s2.status.success(),
        "{}",
        String::from_utf8_lossy(&s2.stderr)
    );
    let state: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("stage2/state.json")).unwrap())
            .unwrap();
    assert_eq!(state["step"], 4);
}
