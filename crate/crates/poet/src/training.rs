//! Optimization loop (plain SGD with global-norm gradient clipping),
//! parameter initialization glue, versioned binary checkpoints, and the
//! ablation harness that trains and scores encoder variants side by side.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataio::{DataError, VideoSample, Vocabulary};
use crate::decoder::DecodeMode;
use crate::encoder::Variant;
use crate::metrics::{self, CorpusEntry, EvalReport};
use crate::model::{self, ModelInput};
use crate::params::{init_params, ModelConfig, PoetParams};
use crate::vidgraph::GraphConfig;
use crate::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training split is empty")]
    EmptyTrainSet,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub layers: usize,
    pub max_caption_len: usize,
    pub min_freq: usize,
    pub d_pf: usize,
    pub d_a: usize,
    pub d_w: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            clip: 5.0,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            variant: Variant::Poet,
            layers: 2,
            max_caption_len: 30,
            min_freq: 1,
            d_pf: 64,
            d_a: 32,
            d_w: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Best parameters by validation loss; final-epoch parameters when no
    /// validation split was given.
    pub params: PoetParams,
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    /// Mean train loss per epoch.
    pub curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub best_epoch: usize,
}

/// One SGD update from the gradients currently stored in `params`:
/// `p -= lr * scale * g` with `scale = min(1, clip / ||g||)`.
pub fn sgd_step(params: &mut PoetParams, lr: f64, clip: f64) {
    let mut sq = 0.0;
    for t in params.flatten() {
        if let Some(g) = &t.grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    let scale = if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    };
    for t in params.flatten_mut() {
        if let Some(g) = t.grad.take() {
            for (p, gi) in t.data.iter_mut().zip(&g) {
                *p -= lr * scale * gi;
            }
            t.grad = Some(g);
        }
    }
}

fn graph_config_of(sample: &VideoSample, cfg: &TrainConfig) -> Result<GraphConfig, TrainError> {
    let dims = crate::dataio::DimSpec::of(sample).ok_or_else(|| {
        TrainError::Model(ModelError::Dim("first sample has empty features".into()))
    })?;
    Ok(GraphConfig {
        n_f: dims.n_f,
        n_p: dims.n_p,
        d_f: dims.d_f,
        d_p: dims.d_p,
        d_pf: cfg.d_pf,
        d_a: cfg.d_a,
    })
}

/// Trains from scratch. Per batch the per-sample gradients are computed in
/// parallel, reduced in sample order (so runs are bit-reproducible), and
/// averaged before one clipped SGD step. Checkpoints land in `ckpt_dir`
/// after every epoch along with a `loss.csv` curve.
pub fn train(
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let vocab = Vocabulary::build(train_set, cfg.min_freq)?;
    let graph = graph_config_of(&train_set[0], cfg)?;
    let mcfg = ModelConfig {
        graph,
        d_w: cfg.d_w,
        vocab: vocab.len(),
        layers: cfg.layers,
    };
    let inputs: Vec<ModelInput> = train_set
        .iter()
        .map(|s| ModelInput::prepare(s, &vocab))
        .collect();
    let val_inputs: Vec<ModelInput> = val_set
        .iter()
        .map(|s| ModelInput::prepare(s, &vocab))
        .collect();

    let mut params = init_params(&mcfg, cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::new();
    let mut best: Option<(f64, usize, PoetParams)> = None;

    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let results: Result<Vec<(f64, Vec<Vec<f64>>)>, ModelError> = batch
                .par_iter()
                .map(|&i| model::loss_and_grads(&params, &mcfg, cfg.variant, &inputs[i]))
                .collect();
            let results = results.map_err(|source| TrainError::Batch {
                epoch,
                batch: bi,
                source,
            })?;
            let inv = 1.0 / batch.len() as f64;
            params.zero_grads();
            {
                let mut flat = params.flatten_mut();
                for (loss, grads) in &results {
                    epoch_loss += loss;
                    for (t, g) in flat.iter_mut().zip(grads) {
                        if let Some(buf) = &mut t.grad {
                            for (b, gi) in buf.iter_mut().zip(g) {
                                *b += inv * gi;
                            }
                        }
                    }
                }
            }
            sgd_step(&mut params, cfg.lr, cfg.clip);
        }
        curve.push(epoch_loss / inputs.len() as f64);

        if !val_inputs.is_empty() {
            let losses: Result<Vec<f64>, ModelError> = val_inputs
                .par_iter()
                .map(|inp| model::loss_value(&params, &mcfg, cfg.variant, inp))
                .collect();
            let val_loss =
                losses?.iter().sum::<f64>() / val_inputs.len() as f64;
            val_curve.push(val_loss);
            let better = best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true);
            if better {
                best = Some((val_loss, epoch, params.clone()));
            }
        }

        if let Some(dir) = ckpt_dir {
            save_checkpoint(
                &dir.join(format!("ckpt_epoch_{epoch}.bin")),
                &params,
                &mcfg,
                &vocab,
                cfg.variant,
                cfg.max_caption_len,
            )?;
        }
    }

    let (best_epoch, final_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (cfg.epochs.saturating_sub(1), params),
    };
    if let Some(dir) = ckpt_dir {
        save_checkpoint(
            &dir.join("best.bin"),
            &final_params,
            &mcfg,
            &vocab,
            cfg.variant,
            cfg.max_caption_len,
        )?;
        write_loss_csv(&dir.join("loss.csv"), &curve)?;
    }
    Ok(TrainOutput {
        params: final_params,
        cfg: mcfg,
        vocab,
        curve,
        val_curve,
        best_epoch,
    })
}

pub fn write_loss_csv(path: &Path, curve: &[f64]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,mean_loss")?;
    for (e, l) in curve.iter().enumerate() {
        writeln!(w, "{e},{l}")?;
    }
    w.flush()
}

/// Decodes every sample and pairs it with its reference and aspects.
pub fn generate_corpus(
    params: &PoetParams,
    cfg: &ModelConfig,
    variant: Variant,
    vocab: &Vocabulary,
    samples: &[VideoSample],
    mode: DecodeMode,
    max_len: usize,
) -> Result<Vec<CorpusEntry>, ModelError> {
    samples
        .par_iter()
        .map(|s| {
            let input = ModelInput::prepare(s, vocab);
            let (ids, _) = model::generate_ids(params, cfg, variant, &input, mode, max_len)?;
            Ok(CorpusEntry {
                video_id: s.video_id.clone(),
                candidate: vocab.decode(&ids),
                reference: s.caption[1..s.caption.len() - 1].to_vec(),
                aspects: s.aspects.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

/// Trains each variant with identical data, seed, and decoding settings,
/// then scores them on the test split.
pub fn run_ablation(
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    test_set: &[VideoSample],
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut vcfg = cfg.clone();
        vcfg.variant = variant;
        let out = train(train_set, val_set, &vcfg, None)?;
        let corpus = generate_corpus(
            &out.params,
            &out.cfg,
            variant,
            &out.vocab,
            test_set,
            DecodeMode::Greedy,
            cfg.max_caption_len,
        )?;
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            report: metrics::evaluate(&corpus),
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "variant   bleu1   meteor  rouge_l cider   aspect  uniq4  uniq5\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{:<9} {:<7.4} {:<7.4} {:<7.4} {:<7.4} {:<7.4} {:<6} {:<6}\n",
            r.variant,
            r.report.bleu1,
            r.report.meteor_lite,
            r.report.rouge_l,
            r.report.cider,
            r.report.aspect_capture,
            r.report.unique_4grams,
            r.report.unique_5grams
        ));
    }
    s
}

// ---- checkpoint format -------------------------------------------------
//
// magic "POETCKPT", u32 version, graph dims (6 x u64), d_w, layers,
// variant byte, max_caption_len, vocabulary payload tokens, then named
// tensors as (name, shape, little-endian f64 payload).

const CKPT_MAGIC: &[u8; 8] = b"POETCKPT";
const CKPT_VERSION: u32 = 1;

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Poet => 0,
        Variant::PoetMinusKl => 1,
        Variant::GcnMinusKl => 2,
        Variant::GcnPlusKl => 3,
    }
}

fn variant_from_code(c: u8) -> Result<Variant, TrainError> {
    Ok(match c {
        0 => Variant::Poet,
        1 => Variant::PoetMinusKl,
        2 => Variant::GcnMinusKl,
        3 => Variant::GcnPlusKl,
        other => return Err(TrainError::Checkpoint(format!("bad variant code {other}"))),
    })
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn get_u64(r: &mut impl Read) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_usize(r: &mut impl Read) -> Result<usize, TrainError> {
    Ok(get_u64(r)? as usize)
}

fn get_str(r: &mut impl Read) -> Result<String, TrainError> {
    let len = get_usize(r)?;
    if len > 1 << 20 {
        return Err(TrainError::Checkpoint("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| TrainError::Checkpoint("non-utf8 string".into()))
}

pub fn save_checkpoint(
    path: &Path,
    params: &PoetParams,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    variant: Variant,
    max_caption_len: usize,
) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let g = cfg.graph;
    for v in [g.n_f, g.n_p, g.d_f, g.d_p, g.d_pf, g.d_a, cfg.d_w, cfg.layers] {
        put_u64(&mut w, v as u64)?;
    }
    w.write_all(&[variant_code(variant)])?;
    put_u64(&mut w, max_caption_len as u64)?;
    let payload = vocab.payload_tokens();
    put_u64(&mut w, payload.len() as u64)?;
    for tok in payload {
        put_str(&mut w, tok)?;
    }
    let named = params.named();
    put_u64(&mut w, named.len() as u64)?;
    for (name, t) in named {
        put_str(&mut w, &name)?;
        put_u64(&mut w, t.shape.len() as u64)?;
        for &d in &t.shape {
            put_u64(&mut w, d as u64)?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub params: PoetParams,
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub variant: Variant,
    pub max_caption_len: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    if u32::from_le_bytes(ver) != CKPT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {}",
            u32::from_le_bytes(ver)
        )));
    }
    let n_f = get_usize(&mut r)?;
    let n_p = get_usize(&mut r)?;
    let d_f = get_usize(&mut r)?;
    let d_p = get_usize(&mut r)?;
    let d_pf = get_usize(&mut r)?;
    let d_a = get_usize(&mut r)?;
    let d_w = get_usize(&mut r)?;
    let layers = get_usize(&mut r)?;
    let mut vb = [0u8; 1];
    r.read_exact(&mut vb)?;
    let variant = variant_from_code(vb[0])?;
    let max_caption_len = get_usize(&mut r)?;
    let n_tokens = get_usize(&mut r)?;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(get_str(&mut r)?);
    }
    let vocab = Vocabulary::from_tokens(tokens);
    let cfg = ModelConfig {
        graph: GraphConfig {
            n_f,
            n_p,
            d_f,
            d_p,
            d_pf,
            d_a,
        },
        d_w,
        vocab: vocab.len(),
        layers,
    };
    let mut params = init_params(&cfg, 0);
    let n_tensors = get_usize(&mut r)?;
    let mut seen = std::collections::BTreeSet::new();
    {
        let mut by_name: std::collections::BTreeMap<String, &mut Tensor> =
            params.named_mut().into_iter().collect();
        for _ in 0..n_tensors {
            let name = get_str(&mut r)?;
            let rank = get_usize(&mut r)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_usize(&mut r)?);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            for v in data.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let slot = by_name.get_mut(&name).ok_or_else(|| {
                TrainError::Checkpoint(format!("unknown tensor `{name}`"))
            })?;
            if slot.shape != shape {
                return Err(TrainError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    shape, slot.shape
                )));
            }
            slot.data = data;
            seen.insert(name);
        }
        if seen.len() != by_name.len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint holds {} tensors, model wants {}",
                seen.len(),
                by_name.len()
            )));
        }
    }
    Ok(Checkpoint {
        params,
        cfg,
        vocab,
        variant,
        max_caption_len,
    })
}
