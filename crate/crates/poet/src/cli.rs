//! Command-line pipeline: synthesize datasets, train, generate, evaluate,
//! run the variant ablation, and run the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime/data error. Options may
//! come from a flat `key = value` config file; command-line flags win.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::dataio::{self, HighlightMode, SynthConfig};
use crate::decoder::DecodeMode;
use crate::encoder::Variant;
use crate::gradcheck;
use crate::kvconfig::KvConfig;
use crate::metrics::{self, CorpusEntry};
use crate::training::{self, TrainConfig};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    dataio::DataError,
    training::TrainError,
    crate::ModelError,
    serde_json::Error
);

impl From<crate::kvconfig::ConfigError> for CliError {
    fn from(e: crate::kvconfig::ConfigError) -> Self {
        // bad config contents are a usage problem, unreadable files are not
        match e {
            crate::kvconfig::ConfigError::Io(io) => CliError::Runtime(io.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "poet",
    about = "Product-part graph video captioner: synthetic data, training, \
             generation, evaluation, ablations, and gradient checks",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonOpts {
    /// Flat key = value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic dataset as JSON Lines.
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a captioner; writes per-epoch checkpoints, best.bin, loss.csv.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Training dataset (JSON Lines).
        #[arg(long)]
        data: PathBuf,
        /// Optional validation dataset used to pick the best checkpoint.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Encoder variant: poet, poet-kl, or gcn.
        #[arg(long)]
        variant: Option<String>,
        /// Stacked reasoning layers.
        #[arg(long)]
        layers: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode captions for a dataset with a trained checkpoint.
    Generate {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset to caption (JSON Lines).
        #[arg(long)]
        data: PathBuf,
        /// Beam width; omitted or 1 means greedy.
        #[arg(long)]
        beam: Option<usize>,
        /// Output candidates file (JSON Lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a candidates file and emit a JSON report plus a text table.
    Eval {
        /// Candidates file from `generate`.
        #[arg(long)]
        cand: PathBuf,
        /// Report output path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the poet / poet-kl / gcn variants on one dataset.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        /// Full dataset; split 65/5/30 internally.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the comparison table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference suite and print per-module max errors.
    Gradcheck {
        /// Seed for the randomized instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.cmd {
        Cmd::Synth { common, n, out } => cmd_synth(common, n, &out),
        Cmd::Train {
            common,
            data,
            val,
            variant,
            layers,
            out,
        } => cmd_train(common, &data, val.as_deref(), variant, layers, &out),
        Cmd::Generate {
            common,
            ckpt,
            data,
            beam,
            out,
        } => cmd_generate(common, &ckpt, &data, beam, &out),
        Cmd::Eval { cand, out } => cmd_eval(&cand, &out),
        Cmd::Ablate { common, data, out } => cmd_ablate(common, &data, &out),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn load_config(common: &CommonOpts) -> Result<KvConfig, CliError> {
    match &common.config {
        Some(path) => Ok(KvConfig::load(path)?),
        None => Ok(KvConfig::empty()),
    }
}

const SYNTH_KEYS: &[&str] = &[
    "n",
    "seed",
    "n_f",
    "n_p",
    "d_f",
    "d_p",
    "aspect_alphabet",
    "part_names",
    "min_aspects",
    "max_aspects",
    "relevant_prob",
    "highlight_mean",
    "signature_scale",
    "highlight_mode",
    "spike_mean",
];

fn synth_config_from(kv: &KvConfig) -> Result<SynthConfig, CliError> {
    kv.ensure_known(SYNTH_KEYS)?;
    let mut cfg = SynthConfig::default();
    if let Some(v) = kv.get("n_f")? {
        cfg.n_f = v;
    }
    if let Some(v) = kv.get("n_p")? {
        cfg.n_p = v;
    }
    if let Some(v) = kv.get("d_f")? {
        cfg.d_f = v;
    }
    if let Some(v) = kv.get("d_p")? {
        cfg.d_p = v;
    }
    if let Some(list) = kv.get_list("aspect_alphabet") {
        cfg.aspect_alphabet = list;
    }
    if let Some(list) = kv.get_list("part_names") {
        cfg.part_names = list;
    } else if cfg.n_p != SynthConfig::default().n_p {
        // generate stable names when only the count was changed
        cfg.part_names = (0..cfg.n_p).map(|j| format!("part{j}")).collect();
    }
    if let Some(v) = kv.get("min_aspects")? {
        cfg.min_aspects = v;
    }
    if let Some(v) = kv.get("max_aspects")? {
        cfg.max_aspects = v;
    }
    if let Some(v) = kv.get("relevant_prob")? {
        cfg.relevant_prob = v;
    }
    if let Some(v) = kv.get("highlight_mean")? {
        cfg.highlight_mean = v;
    }
    if let Some(v) = kv.get("signature_scale")? {
        cfg.signature_scale = v;
    }
    if let Some(mode) = kv.get_str("highlight_mode") {
        cfg.highlight_mode =
            HighlightMode::parse(mode).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = kv.get("spike_mean")? {
        cfg.spike_mean = v;
    }
    Ok(cfg)
}

fn cmd_synth(common: CommonOpts, n: Option<usize>, out: &Path) -> Result<i32, CliError> {
    let kv = load_config(&common)?;
    let cfg = synth_config_from(&kv)?;
    let n = n.or(kv.get("n")?).unwrap_or(200);
    let seed = common.seed.or(kv.get("seed")?).unwrap_or(0);
    let samples = dataio::synth_generate(seed, n, &cfg)?;
    dataio::write_jsonl(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(0)
}

const TRAIN_KEYS: &[&str] = &[
    "lr",
    "clip",
    "batch_size",
    "epochs",
    "seed",
    "variant",
    "layers",
    "max_caption_len",
    "min_freq",
    "d_pf",
    "d_a",
    "d_w",
];

fn train_config_from(
    kv: &KvConfig,
    common: &CommonOpts,
    variant: Option<String>,
    layers: Option<usize>,
) -> Result<TrainConfig, CliError> {
    kv.ensure_known(TRAIN_KEYS)?;
    let mut cfg = TrainConfig::default();
    if let Some(v) = kv.get("lr")? {
        cfg.lr = v;
    }
    if let Some(v) = kv.get("clip")? {
        cfg.clip = v;
    }
    if let Some(v) = kv.get("batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = kv.get("epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = kv.get("seed")? {
        cfg.seed = v;
    }
    if let Some(name) = kv.get_str("variant") {
        cfg.variant = Variant::from_str(name).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = kv.get("layers")? {
        cfg.layers = v;
    }
    if let Some(v) = kv.get("max_caption_len")? {
        cfg.max_caption_len = v;
    }
    if let Some(v) = kv.get("min_freq")? {
        cfg.min_freq = v;
    }
    if let Some(v) = kv.get("d_pf")? {
        cfg.d_pf = v;
    }
    if let Some(v) = kv.get("d_a")? {
        cfg.d_a = v;
    }
    if let Some(v) = kv.get("d_w")? {
        cfg.d_w = v;
    }
    // flags win
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(name) = variant {
        cfg.variant = Variant::from_str(&name).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(l) = layers {
        cfg.layers = l;
    }
    Ok(cfg)
}

fn cmd_train(
    common: CommonOpts,
    data: &Path,
    val: Option<&Path>,
    variant: Option<String>,
    layers: Option<usize>,
    out: &Path,
) -> Result<i32, CliError> {
    let kv = load_config(&common)?;
    let cfg = train_config_from(&kv, &common, variant, layers)?;
    let train_set = dataio::load_jsonl(data)?;
    let val_set = match val {
        Some(p) => dataio::load_jsonl(p)?,
        None => Vec::new(),
    };
    let outcome = training::train(&train_set, &val_set, &cfg, Some(out))?;
    println!(
        "trained {} epochs on {} samples (variant {}, vocab {})",
        outcome.curve.len(),
        train_set.len(),
        cfg.variant.name(),
        outcome.vocab.len()
    );
    println!(
        "final train loss {:.6}, best checkpoint from epoch {}",
        outcome.curve.last().copied().unwrap_or(f64::NAN),
        outcome.best_epoch
    );
    println!("checkpoints and loss.csv in {}", out.display());
    Ok(0)
}

fn cmd_generate(
    common: CommonOpts,
    ckpt: &Path,
    data: &Path,
    beam: Option<usize>,
    out: &Path,
) -> Result<i32, CliError> {
    let kv = load_config(&common)?;
    kv.ensure_known(&["beam"])?;
    let beam = beam.or(kv.get("beam")?).unwrap_or(1);
    let mode = if beam <= 1 {
        DecodeMode::Greedy
    } else {
        DecodeMode::Beam(beam)
    };
    let loaded = training::load_checkpoint(ckpt)?;
    let samples = dataio::load_jsonl(data)?;
    let corpus = training::generate_corpus(
        &loaded.params,
        &loaded.cfg,
        loaded.variant,
        &loaded.vocab,
        &samples,
        mode,
        loaded.max_caption_len,
    )?;
    let mut w = std::io::BufWriter::new(File::create(out)?);
    for entry in &corpus {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("wrote {} candidates to {}", corpus.len(), out.display());
    Ok(0)
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusEntry>, CliError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        out.push(entry);
    }
    if out.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} holds no candidate records",
            path.display()
        )));
    }
    Ok(out)
}

fn cmd_eval(cand: &Path, out: &Path) -> Result<i32, CliError> {
    let corpus = read_corpus(cand)?;
    let report = metrics::evaluate(&corpus);
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(out, json)?;
    print!("{}", report.to_table());
    Ok(0)
}

fn cmd_ablate(common: CommonOpts, data: &Path, out: &Path) -> Result<i32, CliError> {
    let kv = load_config(&common)?;
    let cfg = train_config_from(&kv, &common, None, None)?;
    let samples = dataio::load_jsonl(data)?;
    let split = dataio::split_dataset(samples, dataio::DEFAULT_SPLIT, cfg.seed)?;
    let variants = [Variant::Poet, Variant::PoetMinusKl, Variant::GcnMinusKl];
    let rows = training::run_ablation(&split.train, &split.val, &split.test, &cfg, &variants)?;
    std::fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(&rows)?;
    json.push('\n');
    std::fs::write(out.join("ablation.json"), json)?;
    let table = training::ablation_table(&rows);
    std::fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(0)
}

fn cmd_gradcheck(seed: u64) -> Result<i32, CliError> {
    let entries = gradcheck::run_suite(seed)?;
    let mut all_ok = true;
    for e in &entries {
        let status = if e.passed() { "PASS" } else { "FAIL" };
        println!("{:<12} max_rel_err={:.3e}  {status}", e.module, e.max_rel_err);
        all_ok &= e.passed();
    }
    if all_ok {
        Ok(0)
    } else {
        Err(CliError::Runtime(format!(
            "gradient check exceeded tolerance {:.0e}",
            gradcheck::SUITE_TOL
        )))
    }
}
