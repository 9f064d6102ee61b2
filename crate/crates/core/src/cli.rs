//! Command-line pipeline: synth, train, extract, eval, gradcheck, features.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::frontend::{logmel, read_feature_cache, read_wav, write_feature_cache, FbankConfig, FeatureMatrix, FrontendError};
use crate::metrics::{
    compute_eer, compute_min_dcf, cosine_score, format_trials, parse_trials, write_scores, MetricError, ScoredTrial,
};
use crate::net::{EmbedMode, NetError};
use crate::rng::{stream, Stream};
use crate::synth::{gen_dataset, make_trials, Split, SynthError};
use crate::tensor::Tensor;
use crate::train::{train, Example, TrainError};
use crate::verify::run_suite;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<FrontendError> for CliError {
    fn from(e: FrontendError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => CliError::Usage(m),
            SynthError::Data(m) => CliError::Data(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Data(m) => CliError::Data(m),
            TrainError::Numeric(m) => CliError::Numeric(m),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(m) => CliError::Usage(m),
            NetError::Tensor(crate::tensor::TensorError::NonFinite(op)) => {
                CliError::Numeric(format!("non-finite value in {op}"))
            }
            NetError::Tensor(t) => CliError::Data(t.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Net(n) => n.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "bwrfn", version, about = "Speaker embeddings with Bayesian weighted relaxed frequency-wise normalization")]
pub struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (directory or file, depending on the command)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset with trial lists
    Synth,
    /// Train a network on a manifest and write a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write one embedding file per manifest utterance
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `mean` or `mc:K`
        #[arg(long, default_value = "mean")]
        mode: String,
    },
    /// Score a trial list and report EER and minDCF
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
    },
    /// Finite-difference check of every layer and a tiny network
    Gradcheck {
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Convert a PCM-16 WAV file into a log-mel feature cache
    Features {
        #[arg(long)]
        wav: PathBuf,
    },
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &out("data")),
        Command::Train { data } => cmd_train(&cfg, data, &out("model.bwn")),
        Command::Extract { checkpoint, manifest, mode } => {
            cmd_extract(&cfg, checkpoint, manifest, &out("embeddings"), mode)
        }
        Command::Eval { embeddings, trials } => cmd_eval(&cfg, embeddings, trials, &out("scores.txt")),
        Command::Gradcheck { tolerance } => cmd_gradcheck(&cfg, *tolerance, cli.out.as_deref()),
        Command::Features { wav } => cmd_features(wav, &out("features.bwf")),
    }
}

/// One manifest row: `utt_id \t speaker_id \t domain_id \t feature path`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker: String,
    pub domain: String,
    pub path: PathBuf,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\t{}\n", e.utt_id, e.speaker, e.domain, e.path.display()))
        .collect()
}

/// Read a manifest; relative feature paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 || f.iter().any(|s| s.is_empty()) {
            return Err(CliError::Data(format!(
                "{} line {}: expected 4 tab-separated fields",
                path.display(),
                i + 1
            )));
        }
        let p = PathBuf::from(f[3]);
        out.push(ManifestEntry {
            utt_id: f[0].into(),
            speaker: f[1].into(),
            domain: f[2].into(),
            path: if p.is_absolute() { p } else { base.join(p) },
        });
    }
    Ok(out)
}

fn feature_tensor(f: &FeatureMatrix) -> Tensor {
    Tensor::new(vec![1, f.n_mels, f.n_frames], f.values.clone()).expect("matrix dims match")
}

fn tensor_features(t: &Tensor) -> FeatureMatrix {
    let s = t.shape();
    FeatureMatrix::new(s[1], s[2], t.data().to_vec(), 0.010).expect("tensor dims match")
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = gen_dataset(&cfg.synth, cfg.seed)?;
    let feats = out.join("feats");
    fs::create_dir_all(&feats).map_err(io_err(&feats))?;
    let mut all = Vec::new();
    for u in &data.utterances {
        let rel = PathBuf::from("feats").join(format!("{}.bwf", u.utt_id));
        write_feature_cache(out.join(&rel), &tensor_features(&u.features))?;
        all.push(ManifestEntry {
            utt_id: u.utt_id.clone(),
            speaker: format!("spk{:03}", u.speaker),
            domain: u.domain.to_string(),
            path: rel,
        });
    }
    let seen: Vec<ManifestEntry> = all
        .iter()
        .zip(&data.utterances)
        .filter(|(_, u)| data.seen_domains.contains(&u.domain))
        .map(|(e, _)| e.clone())
        .collect();
    write_text(&out.join("manifest.tsv"), &format_manifest(&all))?;
    write_text(&out.join("train_manifest.tsv"), &format_manifest(&seen))?;
    let seen_trials = make_trials(&data, Split::Seen, cfg.synth.num_trials, cfg.seed)?;
    let unseen_trials = make_trials(&data, Split::Unseen, cfg.synth.num_trials, cfg.seed)?;
    let overall: Vec<_> = seen_trials.iter().chain(&unseen_trials).cloned().collect();
    write_text(&out.join("trials_seen.txt"), &format_trials(&seen_trials))?;
    write_text(&out.join("trials_unseen.txt"), &format_trials(&unseen_trials))?;
    write_text(&out.join("trials_overall.txt"), &format_trials(&overall))?;
    println!(
        "utterances\t{}\ntrain_utterances\t{}\nspeakers\t{}\ndomains\t{}\nunseen_domains\t{}\ntrials_seen\t{}\ntrials_unseen\t{}",
        all.len(),
        seen.len(),
        data.num_speakers,
        data.domains.len(),
        data.unseen_domains.len(),
        seen_trials.len(),
        unseen_trials.len()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!("{} lists no utterances", manifest.display())));
    }
    let speakers: BTreeSet<&str> = entries.iter().map(|e| e.speaker.as_str()).collect();
    let label_of: HashMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut examples = Vec::with_capacity(entries.len());
    for e in &entries {
        let f = read_feature_cache(&e.path)?;
        examples.push(Example { features: feature_tensor(&f), label: label_of[e.speaker.as_str()] });
    }
    let mut net_cfg = cfg.network.clone();
    net_cfg.num_speakers = speakers.len();
    net_cfg.n_freq = examples[0].features.shape()[1];
    if let Some(bad) = entries.iter().zip(&examples).find(|(_, x)| x.features.shape()[1] != net_cfg.n_freq) {
        return Err(CliError::Data(format!(
            "{} has {} frequency bins, expected {}",
            bad.0.utt_id,
            bad.1.features.shape()[1],
            net_cfg.n_freq
        )));
    }
    let train_cfg = cfg.train_config();
    let mut net = crate::net::Network::build(&net_cfg, &mut stream(cfg.seed, Stream::Init))?;
    let log_path = log_path(out);
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log_err = None;
    train(&mut net, &examples, &train_cfg, |l| {
        println!("{l}");
        if let Err(e) = writeln!(log, "{l}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path)(e));
    }
    checkpoint::save(out, &net)?;
    Ok(())
}

/// Epoch log written next to a checkpoint.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

/// Embedding file: `u32 id_len | id | u32 dim | f64 values`, little-endian.
pub fn encode_embedding(utt_id: &str, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + utt_id.len() + 8 * values.len());
    out.extend_from_slice(&(utt_id.len() as u32).to_le_bytes());
    out.extend_from_slice(utt_id.as_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8]) -> Option<(String, Vec<f64>)> {
    let u32_at = |p: usize| bytes.get(p..p + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize);
    let n = u32_at(0)?;
    let id = std::str::from_utf8(bytes.get(4..4 + n)?).ok()?.to_string();
    let dim = u32_at(4 + n)?;
    let body = bytes.get(8 + n..)?;
    if body.len() != 8 * dim {
        return None;
    }
    Some((id, body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()))
}

fn parse_mode(mode: &str) -> Result<Option<usize>> {
    if mode == "mean" {
        return Ok(None);
    }
    match mode.strip_prefix("mc:").map(str::parse::<usize>) {
        Some(Ok(k)) if k > 0 => Ok(Some(k)),
        _ => Err(CliError::Usage(format!("mode must be mean or mc:K with K >= 1, got {mode:?}"))),
    }
}

pub fn cmd_extract(cfg: &RunConfig, ckpt: &Path, manifest: &Path, out: &Path, mode: &str) -> Result<()> {
    let mc = parse_mode(mode)?;
    let net = checkpoint::load(ckpt)?;
    let entries = read_manifest(manifest)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rng = stream(cfg.seed, Stream::Inference);
    for e in &entries {
        let f = read_feature_cache(&e.path)?;
        if f.n_mels != net.config().n_freq {
            return Err(CliError::Data(format!(
                "{}: {} frequency bins, checkpoint expects {}",
                e.utt_id,
                f.n_mels,
                net.config().n_freq
            )));
        }
        let x = feature_tensor(&f);
        let emb = match mc {
            None => net.extract_embedding(&x, EmbedMode::Mean)?,
            Some(samples) => net.extract_embedding(&x, EmbedMode::MonteCarlo { samples, rng: &mut rng })?,
        };
        let path = out.join(format!("{}.emb", e.utt_id));
        fs::write(&path, encode_embedding(&e.utt_id, &emb)).map_err(io_err(&path))?;
    }
    println!("embeddings\t{}", entries.len());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, emb_dir: &Path, trials_path: &Path, out: &Path) -> Result<()> {
    let trials = parse_trials(trials_path)?;
    let mut cache: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut scored = Vec::with_capacity(trials.len());
    for t in &trials {
        for id in [&t.enroll_id, &t.test_id] {
            if !cache.contains_key(id.as_str()) {
                let path = emb_dir.join(format!("{id}.emb"));
                let bytes = fs::read(&path).map_err(|_| CliError::Data(format!("no embedding for utterance {id}")))?;
                let (_, v) = decode_embedding(&bytes)
                    .ok_or_else(|| CliError::Data(format!("{}: malformed embedding file", path.display())))?;
                cache.insert(id.clone(), v);
            }
        }
        let score = cosine_score(&cache[t.enroll_id.as_str()], &cache[t.test_id.as_str()])?;
        scored.push(ScoredTrial { trial: t.clone(), score });
    }
    write_scores(out, &scored)?;
    let (eer, eer_thr) = compute_eer(&scored)?;
    let (dcf, dcf_thr) = compute_min_dcf(&scored, &cfg.dcf)?;
    print!("{}", format_report(scored.len(), eer, eer_thr, dcf, dcf_thr, cfg.dcf.p_target));
    Ok(())
}

pub fn format_report(n: usize, eer: f64, eer_thr: f64, dcf: f64, dcf_thr: f64, p_target: f64) -> String {
    format!(
        "trials\t{n}\neer_percent\t{:.2}\neer_threshold\t{eer_thr:.6}\nmin_dcf\t{dcf:.4}\nmin_dcf_threshold\t{dcf_thr:.6}\np_target\t{p_target}\n",
        100.0 * eer
    )
}

pub fn cmd_gradcheck(cfg: &RunConfig, tolerance: Option<f64>, out: Option<&Path>) -> Result<()> {
    let tol = tolerance.unwrap_or(cfg.gradcheck_tolerance);
    if !(tol > 0.0) {
        return Err(CliError::Usage(format!("tolerance must be positive, got {tol}")));
    }
    let lines = run_suite(tol, cfg.seed);
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    print!("{text}");
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    let failed = lines.iter().filter(|l| !l.passed()).count();
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} gradient checks failed", lines.len())));
    }
    Ok(())
}

pub fn cmd_features(wav: &Path, out: &Path) -> Result<()> {
    let w = read_wav(wav)?;
    let f = logmel(&w, &FbankConfig::default())?;
    write_feature_cache(out, &f)?;
    println!("frames\t{}\nmels\t{}", f.n_frames, f.n_mels);
    Ok(())
}
