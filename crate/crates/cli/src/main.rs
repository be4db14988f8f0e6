//! `cffma`: dataset synthesis, training, enhancement, evaluation and
//! gradient self-checks.
//!
//! Exit codes: 0 success, 1 contract or validation error, 2 I/O error.

mod manifest;
mod report;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cffma_core::embeddings::{provider_load, provider_save, provider_synthetic, EmbeddingStack};
use cffma_core::model::{enhance, load_checkpoint, save_checkpoint, LogRow, Model, ModelConfig, TrainData, Trainer, Utterance};
use cffma_core::numerics::OpKind;
use cffma_core::selfcheck::SelfCheck;
use cffma_core::signal::{mix_at_snr, read_wav, si_snr, synth, write_wav, Waveform, SAMPLE_RATE};
use log::info;
use rayon::prelude::*;

use manifest::Entry;
use report::Row;

#[derive(Parser)]
#[command(name = "cffma", version, about = "Speech enhancement with fused spectral and SSL features")]
struct Cli {
    /// Model config file ("key = value" lines); defaults to the tiny preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic clean/noisy WAV pairs and a manifest.
    Synthdata(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Enhance one WAV file.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Compare autodiff gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_utts: usize,
    /// Utterance length in seconds.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,15", allow_hyphen_values = true)]
    snr: Vec<f64>,
    /// Also write synthetic SSLE embedding stubs sized by the config.
    #[arg(long)]
    embeddings: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path, rewritten after every epoch and at the end.
    #[arg(long)]
    out: PathBuf,
    /// CSV log path; defaults to the checkpoint path with `.csv` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Overrides the config step count.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// SSLE file; synthetic embeddings are used when absent.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Clean reference; prints SI-SNR lines.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Corrupt the backward rule of this op (e.g. `sigmoid`).
    #[arg(long)]
    inject_fault: Option<String>,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure { code: 2, msg: format!("{}: {e}", path.display()) }
    }
}

impl From<cffma_core::Error> for Failure {
    fn from(e: cffma_core::Error) -> Self {
        let code = if matches!(e, cffma_core::Error::Io(_)) { 2 } else { 1 };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Attach the path to I/O errors; other errors pass through.
fn at<T>(path: &Path, r: cffma_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        cffma_core::Error::Io(io) => Failure::io(path, io),
        other => Failure { code: 1, msg: format!("{}: {other}", path.display()) },
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn model_config(cli: &Cli) -> CliResult<ModelConfig> {
    let mut cfg = match &cli.config {
        Some(p) => at(p, ModelConfig::from_text(&read_text(p)?))?,
        None => ModelConfig::tiny(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(Failure { code: 2, msg: format!("{}: directory does not exist", dir.display()) })
        }
        _ => Ok(()),
    }
}

fn read_manifest(path: &Path) -> CliResult<Vec<Entry>> {
    let entries = manifest::parse(&read_text(path)?).map_err(|m| Failure::invalid(format!("{}: {m}", path.display())))?;
    if entries.is_empty() {
        return Err(Failure::invalid(format!("{}: manifest is empty", path.display())));
    }
    Ok(entries)
}

fn embeddings_for(noisy: &Waveform, file: Option<&Path>, cfg: &ModelConfig) -> CliResult<EmbeddingStack> {
    match file {
        Some(p) => at(p, provider_load(p)),
        None => Ok(provider_synthetic(noisy, cfg.n_layers, cfg.d, cfg.seed)?),
    }
}

fn load_utterance(base: &Path, e: &Entry, cfg: &ModelConfig) -> CliResult<Utterance> {
    let clean_path = base.join(&e.clean);
    let noisy_path = base.join(&e.noisy);
    let clean = at(&clean_path, read_wav(&clean_path))?;
    let noisy = at(&noisy_path, read_wav(&noisy_path))?;
    let emb_path = e.embeddings.as_ref().map(|p| base.join(p));
    let embeddings = embeddings_for(&noisy, emb_path.as_deref(), cfg)?;
    Ok(Utterance { noisy, clean, embeddings })
}

fn cmd_synthdata(cli: &Cli, a: &SynthArgs) -> CliResult {
    let seed = cli.seed.unwrap_or(0);
    if a.n_utts == 0 || a.snr.is_empty() {
        return Err(Failure::invalid("need at least one utterance and one SNR"));
    }
    if !(a.duration > 0.0 && a.duration.is_finite()) {
        return Err(Failure::invalid(format!("duration {} s is not positive", a.duration)));
    }
    let cfg = if a.embeddings { Some(model_config(cli)?) } else { None };
    let len = (a.duration * SAMPLE_RATE as f64).round() as usize;
    let mut subdirs = vec!["clean", "noisy"];
    if a.embeddings {
        subdirs.push("ssl");
    }
    for d in subdirs {
        let p = a.out.join(d);
        fs::create_dir_all(&p).map_err(|e| Failure::io(&p, e))?;
    }
    let mut entries = Vec::new();
    for u in 0..a.n_utts {
        let clean = synth::clean_utterance(len, seed.wrapping_mul(1000).wrapping_add(u as u64));
        for (j, &snr) in a.snr.iter().enumerate() {
            let k = u * a.snr.len() + j;
            let kind = synth::NoiseKind::ALL[k % synth::NoiseKind::ALL.len()];
            let noise = synth::noise(kind, len, seed.wrapping_mul(1000).wrapping_add(500 + k as u64));
            let mix = mix_at_snr(&clean, &noise, snr)?;
            let stem = format!("u{u:03}_{}_{snr}dB", kind.name());
            let entry = Entry {
                clean: format!("clean/{stem}.wav"),
                noisy: format!("noisy/{stem}.wav"),
                snr_db: snr,
                embeddings: cfg.as_ref().map(|_| format!("ssl/{stem}.ssle")),
            };
            for (rel, w) in [(&entry.clean, &mix.clean), (&entry.noisy, &mix.noisy)] {
                let p = a.out.join(rel);
                at(&p, write_wav(&p, w))?;
            }
            if let (Some(c), Some(rel)) = (&cfg, &entry.embeddings) {
                let p = a.out.join(rel);
                let stack = provider_synthetic(&mix.noisy, c.n_layers, c.d, c.seed)?;
                at(&p, provider_save(&p, &stack))?;
            }
            entries.push(entry);
        }
    }
    let mpath = a.out.join("manifest.tsv");
    fs::write(&mpath, manifest::render(&entries)).map_err(|e| Failure::io(&mpath, e))?;
    println!("wrote {} pairs, manifest {}", entries.len(), mpath.display());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CliResult {
    let entries = read_manifest(&a.manifest)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".csv");
        PathBuf::from(s)
    });
    ensure_parent(&a.out)?;
    ensure_parent(&log_path)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = at(p, load_checkpoint(p))?;
            let adam = ck.adam.ok_or_else(|| Failure::invalid(format!("{}: no optimizer state", p.display())))?;
            Trainer { model: ck.model, adam }
        }
        None => {
            let cfg = model_config(cli)?;
            Trainer::new(Model::build(&cfg, cfg.seed)?)
        }
    };
    let until = a.steps.unwrap_or(trainer.model.config.steps);
    let base = manifest::base_dir(&a.manifest);
    let utts =
        entries.iter().map(|e| load_utterance(&base, e, &trainer.model.config)).collect::<CliResult<Vec<_>>>()?;
    let data = TrainData::new(&trainer.model, utts)?;

    let append = a.resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Failure::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let write_err = |e: std::io::Error| cffma_core::Error::Io(e);
    if !append {
        writeln!(log, "{}", LogRow::CSV_HEADER).map_err(|e| Failure::io(&log_path, e))?;
    }
    info!(
        "training {} utterances, {} params, steps {} -> {until}",
        data.len(),
        trainer.model.param_count(),
        trainer.step_count()
    );
    let out = &a.out;
    let rows = trainer.run(
        &data,
        until,
        |row| {
            writeln!(log, "{}", row.to_csv()).and_then(|_| log.flush()).map_err(write_err)?;
            info!("step {} loss {:.5} lr {:.3e}", row.step, row.loss, row.lr);
            Ok(())
        },
        |t, epoch| {
            info!("epoch {epoch} done, checkpoint {}", out.display());
            save_checkpoint(out, &t.model, Some(&t.adam))
        },
    );
    let rows = rows?;
    at(out, save_checkpoint(out, &trainer.model, Some(&trainer.adam)))?;
    match rows.last() {
        Some(r) => println!("trained to step {} (loss {:.5}), checkpoint {}", trainer.step_count(), r.loss, out.display()),
        None => println!("already at step {}, checkpoint {}", trainer.step_count(), out.display()),
    }
    Ok(())
}

fn cmd_enhance(a: &EnhanceArgs) -> CliResult {
    let model = at(&a.checkpoint, load_checkpoint(&a.checkpoint))?.model;
    let noisy = at(&a.input, read_wav(&a.input))?;
    let reference = match &a.reference {
        Some(p) => Some(at(p, read_wav(p))?),
        None => None,
    };
    ensure_parent(&a.output)?;
    let emb = embeddings_for(&noisy, a.embeddings.as_deref(), &model.config)?;
    let out = enhance(&model, &noisy, &emb)?;
    at(&a.output, write_wav(&a.output, &out.wav))?;
    if let Some(r) = &reference {
        println!("noisy_si_snr_db={:.4}", si_snr(&noisy, r)?);
        println!("si_snr_db={:.4}", si_snr(&out.wav, r)?);
    }
    Ok(())
}

fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var("CFFMA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::invalid(format!("CFFMA_THREADS={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

fn evaluate_one(model: &Model, base: &Path, e: &Entry) -> CliResult<Row> {
    let u = load_utterance(base, e, &model.config)?;
    let start = Instant::now();
    let out = enhance(model, &u.noisy, &u.embeddings)?;
    let rtf = start.elapsed().as_secs_f64() / u.noisy.duration_secs();
    Ok(Row {
        file: e.noisy.clone(),
        snr_db: e.snr_db,
        noisy_si_snr_db: si_snr(&u.noisy, &u.clean)?,
        enhanced_si_snr_db: si_snr(&out.wav, &u.clean)?,
        rtf,
    })
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult {
    let entries = read_manifest(&a.manifest)?;
    let model = at(&a.checkpoint, load_checkpoint(&a.checkpoint))?.model;
    if let Some(p) = &a.csv {
        ensure_parent(p)?;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::invalid(e.to_string()))?;
    let base = manifest::base_dir(&a.manifest);
    let results: Vec<CliResult<Row>> =
        pool.install(|| entries.par_iter().map(|e| evaluate_one(&model, &base, e)).collect());

    let mut rows = Vec::new();
    let mut worst: Option<Failure> = None;
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(f) => {
                eprintln!("error: {}", f.msg);
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    print!("{}", report::table(&rows));
    if let Some(m) = report::mean_row(&rows) {
        println!("rtf_avg={:.4}", m.rtf);
    }
    if let Some(p) = &a.csv {
        let f = File::create(p).map_err(|e| Failure::io(p, e))?;
        report::write_csv(f, &rows).map_err(|e| Failure::io(p, e))?;
    }
    match worst {
        Some(w) => Err(Failure { code: w.code, msg: format!("{} of {} files failed", entries.len() - rows.len(), entries.len()) }),
        None => Ok(()),
    }
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> CliResult {
    let cfg = model_config(cli)?;
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Failure::invalid(format!("unknown op {name:?}; known ops: {}", known.join(", ")))
        })?),
        None => None,
    };
    let base = cli.seed.unwrap_or(0);
    let check = SelfCheck { seeds: (base..base + a.seeds).collect(), fault, ..SelfCheck::default() };
    let outcomes = check.run(&cfg)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<12} {:<9} max_rel_err={:.3e} threshold={:.0e} checked={} skipped={} {verdict}",
            o.name,
            format!("{:?}", o.group).to_lowercase(),
            o.max_rel_err,
            o.threshold,
            o.checked,
            o.skipped
        );
        if !o.passed() {
            failed.push(o.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::invalid(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = match &cli.command {
        Command::Synthdata(a) => cmd_synthdata(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
