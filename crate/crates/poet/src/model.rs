//! End-to-end glue: turns a dataset record into model inputs, runs the
//! encoder and decoder on one tape, and exposes per-sample loss/gradient
//! and generation entry points for the trainer and the CLI.

use crate::autodiff::Tape;
use crate::dataio::{VideoSample, Vocabulary};
use crate::decoder::{self, DecodeMode};
use crate::encoder::{self, FilterReport, Variant};
use crate::params::{bind, collect_grads, ModelConfig, PoetParams};
use crate::ModelError;

/// A sample with tokens resolved against a vocabulary.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub video_id: String,
    pub frames: Vec<Vec<f64>>,
    pub parts: Vec<Vec<Vec<f64>>>,
    pub aspect_ids: Vec<usize>,
    pub caption_ids: Vec<usize>,
}

impl ModelInput {
    pub fn prepare(sample: &VideoSample, vocab: &Vocabulary) -> ModelInput {
        ModelInput {
            video_id: sample.video_id.clone(),
            frames: sample.frame_feats.clone(),
            parts: sample.part_feats.clone(),
            aspect_ids: vocab.encode(&sample.aspects),
            caption_ids: vocab.encode(&sample.caption),
        }
    }
}

/// Teacher-forced loss for one sample plus gradients for every parameter,
/// aligned with `PoetParams::flatten` order.
pub fn loss_and_grads(
    params: &PoetParams,
    cfg: &ModelConfig,
    variant: Variant,
    input: &ModelInput,
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let tape = Tape::new();
    let vars = bind(&tape, params);
    let (nodes, _) = encoder::encode(
        &tape,
        &input.frames,
        &input.parts,
        &input.aspect_ids,
        &vars,
        &cfg.graph,
        variant,
    )?;
    let loss = decoder::teacher_forced_loss(&tape, &nodes, &input.caption_ids, &vars.dec)?;
    let value = loss.scalar();
    tape.backward(loss)?;
    Ok((value, collect_grads(&vars)))
}

/// Loss value only (validation, curves).
pub fn loss_value(
    params: &PoetParams,
    cfg: &ModelConfig,
    variant: Variant,
    input: &ModelInput,
) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let vars = bind(&tape, params);
    let (nodes, _) = encoder::encode(
        &tape,
        &input.frames,
        &input.parts,
        &input.aspect_ids,
        &vars,
        &cfg.graph,
        variant,
    )?;
    let loss = decoder::teacher_forced_loss(&tape, &nodes, &input.caption_ids, &vars.dec)?;
    Ok(loss.scalar())
}

/// Decodes a caption body (no `<sos>`/`<eos>`) for one sample, returning the
/// first-layer filter report when the variant filters.
pub fn generate_ids(
    params: &PoetParams,
    cfg: &ModelConfig,
    variant: Variant,
    input: &ModelInput,
    mode: DecodeMode,
    max_len: usize,
) -> Result<(Vec<usize>, Option<FilterReport>), ModelError> {
    let tape = Tape::new();
    let vars = bind(&tape, params);
    let (nodes, report) = encoder::encode(
        &tape,
        &input.frames,
        &input.parts,
        &input.aspect_ids,
        &vars,
        &cfg.graph,
        variant,
    )?;
    let ids = decoder::generate(&tape, &nodes, &vars.dec, mode, max_len)?;
    Ok((ids, report))
}
