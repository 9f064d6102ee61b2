mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use bwrfn::cli::{decode_embedding, encode_embedding};
use bwrfn::metrics::{compute_eer, compute_min_dcf, parse_trials_str, DcfParams, Label};
use tempfile::TempDir;

use common::{eer_oracle, min_dcf_oracle, scored};

const TOY: &str = r#"{"version": 1, "seed": 5,
    "synth": {"num_speakers": 4, "num_domains": 2, "utts_per_pair": 3, "n_freq": 16, "n_frames": 12, "num_trials": 8},
    "network": {"norm_variant": "bwrfn", "insertion_points": ["pre-conv", "L1", "L2"], "widths": [4, 8], "embedding_dim": 8},
    "train": {"epochs": 2, "batch_size": 4}}"#;

fn bwrfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bwrfn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bwrfn(args);
    assert!(out.status.success(), "bwrfn {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.json"), TOY).unwrap();
        Toy { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> String {
        let cfg = self.path("run.json");
        let mut all = vec!["--config", s(&cfg)];
        all.extend_from_slice(args);
        ok(&all)
    }

    fn run_status(&self, args: &[&str]) -> Option<i32> {
        let cfg = self.path("run.json");
        let mut all = vec!["--config", s(&cfg)];
        all.extend_from_slice(args);
        bwrfn(&all).status.code()
    }

    fn synth(&self) {
        self.run(&["synth", "--out", s(&self.path("data"))]);
    }

    fn train(&self, out: &str) {
        self.run(&["train", "--data", s(&self.path("data/train_manifest.tsv")), "--out", s(&self.path(out))]);
    }
}

#[test]
fn synth_default_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = ok(&["synth", "--out", s(&a)]);
    ok(&["synth", "--out", s(&b)]);
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 20 * 4 * 5);
    assert!(report.contains("400"), "{report}");
    for name in ["manifest.tsv", "train_manifest.tsv", "trials_seen.txt", "trials_unseen.txt", "trials_overall.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let first = manifest.lines().next().unwrap().split('\t').nth(3).unwrap().to_string();
    assert_eq!(fs::read(a.join(&first)).unwrap(), fs::read(b.join(&first)).unwrap());
}

#[test]
fn synth_seed_flag_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--seed", "1", "synth", "--out", s(&a)]);
    ok(&["--seed", "2", "synth", "--out", s(&b)]);
    assert_ne!(fs::read(a.join("trials_seen.txt")).unwrap(), fs::read(b.join("trials_seen.txt")).unwrap());
}

#[test]
fn invalid_out_path_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let out = bwrfn(&["synth", "--out", s(&file.join("data"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bwrfn(&[]).status.code(), Some(1));
    assert_eq!(bwrfn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bwrfn(&["extract", "--mode", "mean"]).status.code(), Some(1));
    assert_eq!(bwrfn(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"version": 1, "bogus": true}"#).unwrap();
    let out = bwrfn(&["--config", s(&cfg), "gradcheck"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_log_and_reproducible_checkpoint() {
    let toy = Toy::new();
    toy.synth();
    let t0 = Instant::now();
    toy.train("a.bwn");
    assert!(t0.elapsed().as_secs() < 60);
    toy.train("b.bwn");
    assert_eq!(fs::read(toy.path("a.bwn")).unwrap(), fs::read(toy.path("b.bwn")).unwrap());
    let log = fs::read_to_string(toy.path("a.bwn.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (e, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 5, "{line}");
        assert_eq!(fields[0], e.to_string());
        assert!(fields[1..].iter().all(|f| f.parse::<f64>().unwrap().is_finite()));
    }
    let net = bwrfn::checkpoint::load(toy.path("a.bwn")).unwrap();
    assert_eq!(net.config().num_speakers, 4);
    assert_eq!(net.config().n_freq, 16);
}

fn read_embeddings(dir: &Path) -> Vec<(String, Vec<f64>)> {
    let mut v: Vec<(String, Vec<f64>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| decode_embedding(&fs::read(e.unwrap().path()).unwrap()).unwrap())
        .collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

#[test]
fn extract_modes() {
    let toy = Toy::new();
    toy.synth();
    toy.train("m.bwn");
    let ckpt = toy.path("m.bwn");
    let manifest = toy.path("data/manifest.tsv");
    let extract = |out: &str, mode: &str| {
        toy.run(&["extract", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--mode", mode, "--out", s(&toy.path(out))]);
        read_embeddings(&toy.path(out))
    };
    let mean_a = extract("mean_a", "mean");
    let mean_b = extract("mean_b", "mean");
    assert_eq!(mean_a.len(), 4 * 2 * 3);
    assert!(mean_a.iter().all(|(_, e)| e.len() == 8));
    assert_eq!(mean_a, mean_b);
    assert_eq!(extract("mc1_a", "mc:1"), extract("mc1_b", "mc:1"));
    let mc = extract("mc64", "mc:64");
    let dist: f64 = mc
        .iter()
        .zip(&mean_a)
        .flat_map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)))
        .sum();
    assert!(dist > 0.0);

    let bad = toy.run_status(&["extract", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--mode", "mc:0"]);
    assert_eq!(bad, Some(1));
}

#[test]
fn extract_rejects_mismatched_features() {
    let toy = Toy::new();
    toy.synth();
    toy.train("m.bwn");
    let other = tempfile::tempdir().unwrap();
    // same layout, different frequency resolution
    ok(&["synth", "--out", s(&other.path().join("d"))]);
    let code = toy.run_status(&[
        "extract",
        "--checkpoint",
        s(&toy.path("m.bwn")),
        "--manifest",
        s(&other.path().join("d/manifest.tsv")),
        "--out",
        s(&toy.path("e")),
    ]);
    assert_eq!(code, Some(2));
}

fn write_embedding(dir: &Path, id: &str, v: &[f64]) {
    fs::write(dir.join(format!("{id}.emb")), encode_embedding(id, v)).unwrap();
}

fn hand_built(dir: &Path) {
    let emb = dir.join("emb");
    fs::create_dir_all(&emb).unwrap();
    write_embedding(&emb, "a1", &[1.0, 0.0]);
    write_embedding(&emb, "a2", &[0.9, 0.1]);
    write_embedding(&emb, "b1", &[0.0, 1.0]);
    write_embedding(&emb, "b2", &[0.2, 1.0]);
    fs::write(dir.join("good.txt"), "a1 a2 target\nb1 b2 target\na1 b1 nontarget\na2 b2 nontarget\n").unwrap();
    fs::write(dir.join("swapped.txt"), "a1 a2 nontarget\nb1 b2 nontarget\na1 b1 target\na2 b2 target\n").unwrap();
}

fn report_value<'a>(report: &'a str, key: &str) -> &'a str {
    report.lines().find_map(|l| l.strip_prefix(&format!("{key}\t"))).unwrap()
}

#[test]
fn eval_separable_and_swapped() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    hand_built(d);
    let emb = d.join("emb");
    let good = ok(&["eval", "--embeddings", s(&emb), "--trials", s(&d.join("good.txt")), "--out", s(&d.join("g.txt"))]);
    assert_eq!(report_value(&good, "eer_percent"), "0.00");
    assert_eq!(report_value(&good, "trials"), "4");
    let bad = ok(&["eval", "--embeddings", s(&emb), "--trials", s(&d.join("swapped.txt")), "--out", s(&d.join("b.txt"))]);
    assert_eq!(report_value(&bad, "eer_percent"), "100.00");
    let scores = fs::read_to_string(d.join("g.txt")).unwrap();
    assert_eq!(scores.lines().count(), 4);
    assert!(scores.lines().next().unwrap().starts_with("a1 a2 0.99"), "{scores}");
}

#[test]
fn eval_matches_oracles_on_pipeline_scores() {
    let toy = Toy::new();
    toy.synth();
    toy.train("m.bwn");
    let emb = toy.path("emb");
    toy.run(&["extract", "--checkpoint", s(&toy.path("m.bwn")), "--manifest", s(&toy.path("data/manifest.tsv")), "--out", s(&emb)]);
    let trials = toy.path("data/trials_overall.txt");
    let scores_path = toy.path("scores.txt");
    let report = toy.run(&["eval", "--embeddings", s(&emb), "--trials", s(&trials), "--out", s(&scores_path)]);

    let labels = parse_trials_str(&fs::read_to_string(&trials).unwrap()).unwrap();
    let raw: Vec<(f64, bool)> = fs::read_to_string(&scores_path)
        .unwrap()
        .lines()
        .zip(&labels)
        .map(|(line, t)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            assert_eq!((f[0], f[1]), (t.enroll_id.as_str(), t.test_id.as_str()));
            (f[2].parse().unwrap(), t.label == Label::Target)
        })
        .collect();
    let p = DcfParams::default();
    let eer = eer_oracle(&raw);
    let dcf = min_dcf_oracle(&raw, &p);
    assert_eq!(report_value(&report, "eer_percent"), format!("{:.2}", 100.0 * eer));
    assert_eq!(report_value(&report, "min_dcf"), format!("{dcf:.4}"));
    let lib = scored(&raw);
    assert!((compute_eer(&lib).unwrap().0 - eer).abs() < 1e-9);
    assert!((compute_min_dcf(&lib, &p).unwrap().0 - dcf).abs() < 1e-9);
}

#[test]
fn eval_missing_id_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    hand_built(d);
    fs::write(d.join("t.txt"), "a1 zz9 target\na1 b1 nontarget\n").unwrap();
    let out = bwrfn(&["eval", "--embeddings", s(&d.join("emb")), "--trials", s(&d.join("t.txt")), "--out", s(&d.join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zz9"));
}

#[test]
fn gradcheck_reports_every_site() {
    let out = bwrfn(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().all(|l| l.starts_with("PASS")));

    let strict = bwrfn(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(strict.status.code(), Some(3));
    let text = String::from_utf8(strict.stdout).unwrap();
    assert_eq!(text.lines().count(), 9);
    let fail = text.lines().find(|l| l.starts_with("FAIL")).unwrap();
    assert!(fail.contains("analytic") && fail.contains("numeric"), "{fail}");

    assert_eq!(bwrfn(&["gradcheck", "--tolerance", "-1"]).status.code(), Some(1));
}

#[test]
fn features_from_wav() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<f64> = (0..16_000).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
    let w = bwrfn::frontend::Waveform::new(samples, 16_000).unwrap();
    let wav = dir.path().join("x.wav");
    bwrfn::frontend::write_wav(&wav, &w).unwrap();
    let out = dir.path().join("x.bwf");
    let report = ok(&["features", "--wav", s(&wav), "--out", s(&out)]);
    assert!(report.contains("frames\t98"), "{report}");
    let f = bwrfn::frontend::read_feature_cache(&out).unwrap();
    assert_eq!((f.n_mels, f.n_frames), (40, 98));
}
