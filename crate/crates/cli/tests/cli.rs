use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cffma_core::embeddings::{provider_load, provider_save, provider_synthetic};
use cffma_core::model::{save_checkpoint, Model, ModelConfig};
use cffma_core::signal::read_wav;
use tempfile::TempDir;

fn cffma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cffma")).args(args).output().expect("spawn cffma")
}

fn ok(args: &[&str]) -> String {
    let out = cffma(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synthdata", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("manifest.tsv")
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split('\t').map(String::from).collect()).collect()
}

/// Log lines with the wall-clock column removed.
fn log_without_wall(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

fn kv(stdout: &str, key: &str) -> f64 {
    let prefix = format!("{key}=");
    stdout.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap_or_else(|| panic!("no {key} in {stdout}")).parse().unwrap()
}

#[test]
fn synthdata_writes_the_snr_grid_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let manifest = synth(&a, &["--n-utts", "4", "--snr", "0,5,10,15"]);
    synth(&b, &["--n-utts", "4", "--snr", "0,5,10,15"]);
    synth(&c, &["--n-utts", "4", "--snr", "0,5,10,15", "--seed", "9"]);
    let entries = rows(&manifest);
    assert_eq!(entries.len(), 16);
    assert_eq!(fs::read(&manifest).unwrap(), fs::read(b.join("manifest.tsv")).unwrap());
    let mut differs = false;
    for e in &entries {
        assert_eq!(e.len(), 3);
        for rel in &e[..2] {
            assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
        }
        differs |= fs::read(a.join(&e[1])).unwrap() != fs::read(c.join(&e[1])).unwrap();
        let clean = read_wav(a.join(&e[0])).unwrap();
        let noisy = read_wav(a.join(&e[1])).unwrap();
        let pc: f64 = clean.samples.iter().map(|&v| (v as f64).powi(2)).sum();
        let pn: f64 = clean.samples.iter().zip(&noisy.samples).map(|(&c, &n)| (n as f64 - c as f64).powi(2)).sum();
        let measured = 10.0 * (pc / pn).log10();
        let want: f64 = e[2].parse().unwrap();
        assert!((measured - want).abs() < 0.01, "{}: {measured} vs {want}", e[1]);
    }
    assert!(differs, "seed had no effect");
}

#[test]
fn synthdata_embedding_stubs_match_the_config() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(tmp.path(), &["--n-utts", "1", "--snr", "5", "--embeddings"]);
    let entries = rows(&manifest);
    assert_eq!(entries[0].len(), 4);
    let stack = provider_load(tmp.path().join(&entries[0][3])).unwrap();
    let cfg = ModelConfig::tiny();
    assert_eq!((stack.n_layers(), stack.dim()), (cfg.n_layers, cfg.d));
}

#[test]
fn training_log_is_deterministic_and_resumable() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let manifest = synth(&d.join("data"), &["--n-utts", "2", "--snr", "5,10"]);
    let m = s(&manifest);
    let full = |name: &str| {
        let ck = d.join(name);
        ok(&["train", "--manifest", m, "--out", s(&ck), "--steps", "12"]);
        d.join(format!("{name}.csv"))
    };
    let (a, b) = (full("a.ckpt"), full("b.ckpt"));
    let la = log_without_wall(&a);
    assert_eq!(la.len(), 13);
    assert_eq!(la[0], "step,loss,lr,grad_norm");
    assert_eq!(la, log_without_wall(&b));

    let half = d.join("half.ckpt");
    let log = d.join("resumed.csv");
    ok(&["train", "--manifest", m, "--out", s(&half), "--log", s(&log), "--steps", "6"]);
    let rest = d.join("rest.ckpt");
    ok(&["train", "--manifest", m, "--resume", s(&half), "--out", s(&rest), "--log", s(&log), "--steps", "12"]);
    let resumed = log_without_wall(&log);
    assert_eq!(resumed.len(), 13);
    for (x, y) in resumed[1..].iter().zip(&la[1..]) {
        let loss = |l: &str| l.split(',').nth(1).unwrap().parse::<f64>().unwrap();
        assert!((loss(x) - loss(y)).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn overfit_model_enhances_its_training_utterance() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let manifest = synth(&d.join("data"), &["--n-utts", "4", "--snr", "0"]);
    let ck = d.join("m.ckpt");
    let start = std::time::Instant::now();
    ok(&["train", "--manifest", s(&manifest), "--out", s(&ck)]);
    assert!(start.elapsed().as_secs() < 600);
    assert_eq!(fs::read_to_string(d.join("m.ckpt.csv")).unwrap().lines().count(), 301);

    let e = &rows(&manifest)[0];
    let (clean, noisy) = (d.join("data").join(&e[0]), d.join("data").join(&e[1]));
    let (out1, out2) = (d.join("e1.wav"), d.join("e2.wav"));
    let report = ok(&["enhance", "--checkpoint", s(&ck), "--input", s(&noisy), "--output", s(&out1), "--ref", s(&clean)]);
    let (before, after) = (kv(&report, "noisy_si_snr_db"), kv(&report, "si_snr_db"));
    assert!(after >= before + 5.0, "{before} -> {after}");
    ok(&["enhance", "--checkpoint", s(&ck), "--input", s(&out1), "--output", s(&out2)]);
    let n = read_wav(&noisy).unwrap().len();
    assert_eq!(read_wav(&out1).unwrap().len(), n);
    assert_eq!(read_wav(&out2).unwrap().len(), n);
}

#[test]
fn identity_checkpoint_leaves_si_snr_unchanged() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let manifest = synth(&d.join("data"), &["--n-utts", "2", "--snr", "0,10"]);
    let mut model = Model::build(&ModelConfig::tiny(), 0).unwrap();
    model.force_identity_mask();
    let ck = d.join("id.ckpt");
    save_checkpoint(&ck, &model, None).unwrap();
    let csv = d.join("eval.csv");
    let table = ok(&["evaluate", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--csv", s(&csv)]);
    assert!(table.lines().next().unwrap().starts_with("file"));
    let rtf = table.lines().find_map(|l| l.strip_prefix("rtf_avg=")).unwrap();
    assert_eq!(rtf.split('.').nth(1).unwrap().len(), 4);
    assert!(rtf.parse::<f64>().unwrap() > 0.0);

    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(lines[0], ["file", "snr_db", "noisy_si_snr_db", "enhanced_si_snr_db", "delta_db", "rtf"]);
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert_eq!(lines[5][0], "mean");
    for l in &lines[1..] {
        let v: Vec<f64> = l[1..].iter().map(|c| c.parse().unwrap()).collect();
        assert!((v[1] - v[2]).abs() <= 0.01, "{l:?}");
        assert!(v[4] > 0.0);
    }
}

#[test]
fn evaluate_reports_partial_results_for_missing_files() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let manifest = synth(d, &["--n-utts", "1", "--snr", "0,5"]);
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push_str("clean/gone.wav\tnoisy/gone.wav\t5\n");
    fs::write(&manifest, text).unwrap();
    let ck = d.join("m.ckpt");
    save_checkpoint(&ck, &Model::build(&ModelConfig::tiny(), 0).unwrap(), None).unwrap();
    let out = cffma(&["evaluate", "--checkpoint", s(&ck), "--manifest", s(&manifest)]);
    assert_eq!(code(&out), 2);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("u000_white_0dB") && stdout.contains("mean"), "{stdout}");
    assert!(String::from_utf8(out.stderr).unwrap().contains("gone.wav"));

    fs::write(&manifest, "").unwrap();
    assert_eq!(code(&cffma(&["evaluate", "--checkpoint", s(&ck), "--manifest", s(&manifest)])), 1);
}

#[test]
fn contract_and_io_errors_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let manifest = synth(d, &["--n-utts", "1", "--snr", "5"]);
    let e = &rows(&manifest)[0];
    let noisy = d.join(&e[1]);
    let ck = d.join("m.ckpt");
    save_checkpoint(&ck, &Model::build(&ModelConfig::tiny(), 0).unwrap(), None).unwrap();
    let out = d.join("o.wav");

    let wav = read_wav(&noisy).unwrap();
    let wrong = d.join("wrong.ssle");
    provider_save(&wrong, &provider_synthetic(&wav, 3, 16, 0).unwrap()).unwrap();
    let r = cffma(&["enhance", "--checkpoint", s(&ck), "--input", s(&noisy), "--output", s(&out), "--embeddings", s(&wrong)]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("dimension"));

    let missing = d.join("missing.wav");
    assert_eq!(code(&cffma(&["enhance", "--checkpoint", s(&ck), "--input", s(&missing), "--output", s(&out)])), 2);
    let nodir = d.join("no/such/dir/o.wav");
    assert_eq!(code(&cffma(&["enhance", "--checkpoint", s(&ck), "--input", s(&noisy), "--output", s(&nodir)])), 2);

    let cfg = d.join("bad.cfg");
    fs::write(&cfg, "preset = tiny\nwidth = 3\n").unwrap();
    let r = cffma(&["--config", s(&cfg), "train", "--manifest", s(&manifest), "--out", s(&d.join("x.ckpt"))]);
    assert_eq!(code(&r), 1);
    assert_eq!(code(&cffma(&["train", "--manifest", s(&manifest)])), 1);

    let r = Command::new(env!("CARGO_BIN_EXE_cffma"))
        .args(["evaluate", "--checkpoint", s(&ck), "--manifest", s(&manifest)])
        .env("CFFMA_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&r), 1);
}

#[test]
fn gradcheck_lists_each_op_once_and_names_faults() {
    let report = ok(&["gradcheck", "--seeds", "3"]);
    let names: Vec<&str> = report.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for op in ["matmul", "softmax", "layer_norm", "conv1d", "overlap_add", "mscff", "rhma", "pipeline"] {
        assert!(names.contains(&op), "{op} missing");
    }
    assert!(report.lines().all(|l| l.ends_with(" ok")));

    let r = cffma(&["gradcheck", "--seeds", "2", "--inject-fault", "sigmoid"]);
    assert_eq!(code(&r), 1);
    let stdout = String::from_utf8(r.stdout).unwrap();
    let line = stdout.lines().find(|l| l.starts_with("sigmoid ")).unwrap();
    assert!(line.ends_with("FAIL"));
    assert!(stdout.lines().filter(|l| l.starts_with("matmul ") || l.starts_with("softmax ")).all(|l| l.ends_with(" ok")));
    assert!(String::from_utf8(r.stderr).unwrap().contains("sigmoid"));

    assert_eq!(code(&cffma(&["gradcheck", "--inject-fault", "nonsense"])), 1);
}
