use std::path::Path;
use std::process::{Command, Output};

use cadiff::datagen::Dataset;
use cadiff::denoiser::init_params;
use cadiff::diffusion::Checkpoint;
use cadiff::rng::derive_seed;
use cadiff::sampler::{SampleRecord, SampleSet};

fn cadiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cadiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "data.n=48",
    "--set",
    "data.l=4",
    "--set",
    "data.d_token=3",
    "--set",
    "model.d_model=8",
    "--set",
    "model.n_blocks=1",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.d_ff=16",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.timesteps=20",
    "--set",
    "sample.steps=5",
    "--set",
    "seed=3",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn mask_dump_matches_hand_derived_grid() {
    let out = ok(&[
        "mask-dump", "--l", "7", "--cl", "2", "--sizes", "2,2,3", "--variant", "partial",
    ]);
    let mut parts = out.split("\n\n");
    let ascii = parts.next().unwrap();
    let csv = parts.next().unwrap();
    let grid: Vec<&str> = ascii.lines().skip(1).collect();
    assert_eq!(
        grid,
        [
            "..###########",
            "..###########",
            "....#########",
            "....#########",
            "......#######",
            "......#######",
            "..####..#####",
            "..####..#####",
            "....####..###",
            "....####..###",
            "......####...",
            "......####...",
            "......####...",
        ]
    );
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 13);
    assert_eq!(rows[6], "0,0,1,1,1,1,0,0,1,1,1,1,1");
}

#[test]
fn mask_dump_rejects_sizes_that_do_not_cover_l() {
    let out = cadiff(&["mask-dump", "--l", "6", "--sizes", "2,2,3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "config");
}

#[test]
fn plan_dump_reports_histogram() {
    let out = ok(&["plan-dump", "--l", "5", "--gamma", "1.0", "--n", "40", "--seed", "2"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["plans"].as_array().unwrap().len(), 40);
    let counts: u64 = v["step_counts"]
        .as_object()
        .unwrap()
        .values()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(counts, 40);
    let first = &v["plans"][0];
    let sizes: Vec<u64> = serde_json::from_value(first["sizes"].clone()).unwrap();
    assert_eq!(sizes.iter().sum::<u64>(), 5);
    assert_eq!(out, ok(&["plan-dump", "--l", "5", "--gamma", "1.0", "--n", "40", "--seed", "2"]));
}

#[test]
fn schedule_dump_is_csv() {
    let out = ok(&["schedule-dump", "--set", "train.timesteps=10", "--set", "sample.steps=10"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "t,beta,alpha_bar");
    assert_eq!(lines.len(), 11);
}

#[test]
fn grad_check_passes_on_tiny_model() {
    let out = ok(&["grad-check", "--seed", "1"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["pass"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-5);
}

#[test]
fn config_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = cadiff(&["gen-data", "--set", "data.nn=3", "--out", &path(dir.path(), "d.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("nn"), "{e}");

    let out = cadiff(&["gen-data", "--set", "train.gamma=0", "--out", &path(dir.path(), "d.jsonl")]);
    assert!(error_line(&out)["message"].as_str().unwrap().contains("train.gamma"));
    assert!(!dir.path().join("d.jsonl").exists());

    let out = cadiff(&["eval", "--samples", "missing.jsonl", "--data", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "io");
}

#[test]
fn thread_cap_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_cadiff"))
        .args(["schedule-dump"])
        .env("CADIFF_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["message"]
        .as_str()
        .unwrap()
        .contains("CADIFF_THREADS"));
}

#[test]
fn zero_epochs_leaves_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "d.jsonl");
    let ckpt = path(dir.path(), "m.ckpt");
    ok(&with_small(&["gen-data", "--out", &data]));
    ok(&with_small(&[
        "train", "--data", &data, "--out", &ckpt, "--set", "train.epochs=0",
    ]));
    let c = Checkpoint::load(&ckpt).unwrap();
    let init = init_params::<f32>(&c.header.model, derive_seed(3, "init")).unwrap();
    assert_eq!(c.params, init);
    let log = std::fs::read_to_string(path(dir.path(), "m.ckpt.loss.csv")).unwrap();
    assert_eq!(log, "step,epoch,loss\n");
}

#[test]
fn eval_of_references_against_themselves_is_perfectly_similar() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "d.jsonl");
    ok(&with_small(&["gen-data", "--out", &data]));
    let ds = Dataset::load(&data).unwrap();
    let set = SampleSet {
        config: serde_json::json!({}),
        records: ds
            .records
            .iter()
            .take(12)
            .map(|r| SampleRecord {
                tokens: r.x0.to_rows(),
                cond_mode: Some(r.mode),
                seed: 0,
                plan: vec![ds.config.l],
                reference: Some(r.x0.to_rows()),
            })
            .collect(),
    };
    let samples = path(dir.path(), "s.jsonl");
    set.save(&samples).unwrap();
    let report = path(dir.path(), "r.json");
    ok(&["eval", "--samples", &samples, "--data", &data, "--out", &report]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["similarity"], 1.0);
    assert_eq!(v["mode_accuracy"], 1.0);
    assert_eq!(v["n"], 12);
    assert!(v["config"]["data"]["n"] == 48);
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let data = path(d, &format!("{run}.jsonl"));
        let ckpt = path(d, &format!("{run}.ckpt"));
        let cond = path(d, &format!("{run}.cond.jsonl"));
        let uncond = path(d, &format!("{run}.uncond.jsonl"));
        ok(&with_small(&["gen-data", "--out", &data]));
        ok(&with_small(&[
            "train", "--data", &data, "--out", &ckpt, "--set", "train.epochs=2",
        ]));
        ok(&["sample", "--checkpoint", &ckpt, "--data", &data, "--n", "8", "--out", &cond]);
        ok(&[
            "sample", "--checkpoint", &ckpt, "--unconditional", "--n", "6", "--set",
            "sample.mode=\"ar\"", "--out", &uncond,
        ]);
        files.push([data, ckpt.clone(), format!("{ckpt}.loss.csv"), cond, uncond]);
    }
    for (a, b) in files[0].iter().zip(&files[1]) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{a} vs {b}");
    }

    let [data, ckpt, log, cond, uncond] = &files[0];
    let c = Checkpoint::load(ckpt).unwrap();
    let echoed = c.header.run_config.as_ref().unwrap();
    assert_eq!(echoed["train"]["epochs"], 2);
    assert_eq!(std::fs::read_to_string(log).unwrap().lines().count(), 1 + 2 * 3);

    let s = SampleSet::load(cond).unwrap();
    assert_eq!(s.records.len(), 8);
    let modes: Vec<Option<usize>> = s.records.iter().map(|r| r.cond_mode).collect();
    assert_eq!(modes[..4], [Some(0), Some(1), Some(2), Some(3)]);
    assert!(s.records.iter().all(|r| r.reference.is_some() && r.tokens.len() == 4));
    assert_eq!(s.config["sample"]["steps"], 5);

    let u = SampleSet::load(uncond).unwrap();
    assert!(u.records.iter().all(|r| r.cond_mode.is_none() && r.reference.is_none()));
    assert_eq!(u.config["unconditional"], true);
    assert!(u.records.iter().any(|r| r.plan.len() > 1));
    assert!(Path::new(&format!("{uncond}.meta.json")).exists());

    let report = ok(&["eval", "--samples", cond, "--data", data]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["validity"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["mode_shares"].as_array().unwrap().len(), 4);
}

#[test]
fn shipped_config_loads() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let out = ok(&["schedule-dump", "--config", cfg]);
    let last: Vec<f64> = out
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(last[..2], [100.0, 0.2]);
    assert!(last[2] < 1e-4);
}
