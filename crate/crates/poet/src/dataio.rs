//! Dataset schema, JSON Lines IO, vocabulary construction, splits, and a
//! synthetic-data generator whose latent state doubles as a test oracle.
//!
//! A dataset is one JSON object per line:
//! `{"video_id", "frame_feats", "part_feats", "aspects", "caption"}` with
//! `frame_feats: [n_f][d_f]`, `part_feats: [n_f][n_p][d_p]`, captions
//! wrapped in `<sos>`/`<eos>`, and dimensions implied by the arrays
//! themselves (validated across records and against any expected dims).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: invalid JSON: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("alphabet too small: need {needed} entries, have {have}")]
    AlphabetTooSmall { needed: usize, have: usize },
    #[error("config: {0}")]
    Config(String),
}

pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const SOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;

const RESERVED: [&str; 4] = [SOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN];

/// One video: per-frame features, per-frame-per-part features, the seller's
/// aspect tokens, and an `<sos>`-/`<eos>`-wrapped reference caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub video_id: String,
    pub frame_feats: Vec<Vec<f64>>,
    pub part_feats: Vec<Vec<Vec<f64>>>,
    pub aspects: Vec<String>,
    pub caption: Vec<String>,
}

/// Frame/part counts and feature widths of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimSpec {
    pub n_f: usize,
    pub n_p: usize,
    pub d_f: usize,
    pub d_p: usize,
}

impl DimSpec {
    pub fn of(sample: &VideoSample) -> Option<DimSpec> {
        let n_f = sample.frame_feats.len();
        let d_f = sample.frame_feats.first()?.len();
        let n_p = sample.part_feats.first()?.len();
        let d_p = sample.part_feats.first()?.first()?.len();
        Some(DimSpec { n_f, n_p, d_f, d_p })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Expected dims; when `None` the first record sets them.
    pub expect: Option<DimSpec>,
    /// Captions longer than this (excluding `<sos>`/`<eos>`) are shortened.
    pub max_caption_len: usize,
    /// Records with more aspects than this are rejected.
    pub max_aspects: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            expect: None,
            max_caption_len: 30,
            max_aspects: 12,
        }
    }
}

fn validate_sample(
    sample: &mut VideoSample,
    dims: &DimSpec,
    opts: &LoadOptions,
    line: usize,
) -> Result<(), DataError> {
    let fail = |msg: String| DataError::Invalid { line, msg };
    if sample.frame_feats.len() != dims.n_f {
        return Err(fail(format!(
            "expected {} frame vectors, got {}",
            dims.n_f,
            sample.frame_feats.len()
        )));
    }
    for (i, f) in sample.frame_feats.iter().enumerate() {
        if f.len() != dims.d_f {
            return Err(fail(format!(
                "frame {} has dim {}, expected {}",
                i,
                f.len(),
                dims.d_f
            )));
        }
        if !f.iter().all(|v| v.is_finite()) {
            return Err(fail(format!("frame {i} contains a non-finite value")));
        }
    }
    if sample.part_feats.len() != dims.n_f {
        return Err(fail(format!(
            "expected part features for {} frames, got {}",
            dims.n_f,
            sample.part_feats.len()
        )));
    }
    for (i, frame) in sample.part_feats.iter().enumerate() {
        if frame.len() != dims.n_p {
            return Err(fail(format!(
                "frame {} has {} part vectors, expected {}",
                i,
                frame.len(),
                dims.n_p
            )));
        }
        for (j, p) in frame.iter().enumerate() {
            if p.len() != dims.d_p {
                return Err(fail(format!(
                    "part ({i},{j}) has dim {}, expected {}",
                    p.len(),
                    dims.d_p
                )));
            }
            if !p.iter().all(|v| v.is_finite()) {
                return Err(fail(format!("part ({i},{j}) contains a non-finite value")));
            }
        }
    }
    if sample.aspects.len() > opts.max_aspects {
        return Err(fail(format!(
            "{} aspects exceed the cap of {}",
            sample.aspects.len(),
            opts.max_aspects
        )));
    }
    if sample.caption.len() < 2
        || sample.caption.first().map(String::as_str) != Some(SOS_TOKEN)
        || sample.caption.last().map(String::as_str) != Some(EOS_TOKEN)
    {
        return Err(fail(format!(
            "caption must be wrapped in {SOS_TOKEN}/{EOS_TOKEN}"
        )));
    }
    // Over-long captions are shortened before <eos>, not rejected.
    if sample.caption.len() > opts.max_caption_len + 2 {
        sample.caption.truncate(opts.max_caption_len + 1);
        sample.caption.push(EOS_TOKEN.to_string());
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<VideoSample>, DataError> {
    load_jsonl_with(path, &LoadOptions::default())
}

pub fn load_jsonl_with(path: &Path, opts: &LoadOptions) -> Result<Vec<VideoSample>, DataError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut dims = opts.expect;
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let mut sample: VideoSample =
            serde_json::from_str(&text).map_err(|source| DataError::Json {
                line: line_no,
                source,
            })?;
        let d = match dims {
            Some(d) => d,
            None => {
                let d = DimSpec::of(&sample).ok_or(DataError::Invalid {
                    line: line_no,
                    msg: "record has empty feature arrays".into(),
                })?;
                dims = Some(d);
                d
            }
        };
        validate_sample(&mut sample, &d, opts, line_no)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[VideoSample]) -> Result<(), DataError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| DataError::Config(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Token table with four reserved slots at ids 0..=3. Non-reserved tokens
/// are stored alphabetically, which makes ids reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Counts caption and aspect tokens over the training split and keeps
    /// those seen at least `min_freq` times. The two sources share one table.
    pub fn build(samples: &[VideoSample], min_freq: usize) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in samples {
            for tok in s.caption.iter().chain(s.aspects.iter()) {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let kept: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .map(|(t, _)| t.to_string())
            .collect();
        Ok(Self::from_tokens(kept))
    }

    /// Rebuilds a vocabulary from its non-reserved tokens in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Non-reserved tokens in id order.
    pub fn payload_tokens(&self) -> &[String] {
        &self.id_to_token[RESERVED.len()..]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

/// Random split with the given ratios (default 65/5/30). Samples are
/// shuffled by a seeded RNG; every `video_id` lands in exactly one split.
pub fn split_dataset(
    mut samples: Vec<VideoSample>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut ids: Vec<&str> = samples.iter().map(|s| s.video_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(DataError::Config("duplicate video_id in dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..samples.len()).rev() {
        let j = rng.gen_range(0..=i);
        samples.swap(i, j);
    }
    let n = samples.len();
    let n_train = (n as f64 * a).floor() as usize;
    let n_val = (n as f64 * b).floor() as usize;
    let mut it = samples.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    Ok(DatasetSplit { train, val, test })
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.65, 0.05, 0.30);

/// Where the highlighted part's activation signal lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HighlightMode {
    /// Highlight part carries a higher mean in every frame.
    Mean,
    /// Highlight part spikes in a single frame; all parts share the same
    /// per-frame mean, so only a cross-frame max separates them.
    Spike,
}

impl HighlightMode {
    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "mean" => Ok(HighlightMode::Mean),
            "spike" => Ok(HighlightMode::Spike),
            other => Err(DataError::Config(format!(
                "highlight_mode must be mean or spike, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_f: usize,
    pub n_p: usize,
    pub d_f: usize,
    pub d_p: usize,
    pub aspect_alphabet: Vec<String>,
    pub part_names: Vec<String>,
    pub min_aspects: usize,
    pub max_aspects: usize,
    /// Chance that a drawn aspect is actually depicted (and captioned).
    pub relevant_prob: f64,
    /// Mean offset of the highlight part's features (mean mode).
    pub highlight_mean: f64,
    /// Scale applied to each relevant aspect's signature vector.
    pub signature_scale: f64,
    pub highlight_mode: HighlightMode,
    /// Total activation mass of the highlight part (spike mode).
    pub spike_mean: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_f: 30,
            n_p: 8,
            d_f: 32,
            d_p: 16,
            aspect_alphabet: [
                "beige", "black", "blue", "cotton", "denim", "floral", "green", "linen", "red",
                "silk", "white", "wool",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            part_names: [
                "collar",
                "cuff",
                "hem",
                "lapel",
                "pocket",
                "sleeve",
                "waistline",
                "zipper",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            min_aspects: 2,
            max_aspects: 6,
            relevant_prob: 0.5,
            highlight_mean: 2.0,
            signature_scale: 1.0,
            highlight_mode: HighlightMode::Mean,
            spike_mean: 6.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.part_names.len() != self.n_p {
            return Err(DataError::Config(format!(
                "part_names has {} entries but n_p = {}",
                self.part_names.len(),
                self.n_p
            )));
        }
        if self.min_aspects == 0 || self.min_aspects > self.max_aspects {
            return Err(DataError::Config(format!(
                "bad aspect draw range {}..={}",
                self.min_aspects, self.max_aspects
            )));
        }
        if self.max_aspects > self.aspect_alphabet.len() {
            return Err(DataError::AlphabetTooSmall {
                needed: self.max_aspects,
                have: self.aspect_alphabet.len(),
            });
        }
        if self.n_f == 0 || self.n_p == 0 || self.d_f == 0 || self.d_p == 0 {
            return Err(DataError::Config("all dims must be positive".into()));
        }
        Ok(())
    }
}

/// Generator-side truth for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLatent {
    pub highlight_part: usize,
    /// Sorted relevant aspect tokens, exactly the captioned set.
    pub relevant: Vec<String>,
    pub spike_frame: Option<usize>,
}

/// The generator's caption rule: `<sos> this <part> is <sorted relevant> <eos>`.
pub fn oracle_caption(cfg: &SynthConfig, latent: &SynthLatent) -> Vec<String> {
    let mut caption = vec![
        SOS_TOKEN.to_string(),
        "this".to_string(),
        cfg.part_names[latent.highlight_part].clone(),
        "is".to_string(),
    ];
    caption.extend(latent.relevant.iter().cloned());
    caption.push(EOS_TOKEN.to_string());
    caption
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fixed unit vector identifying one aspect token, independent of the
/// dataset seed so train and test sets agree on it.
pub fn aspect_signature(token: &str, d_f: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()) ^ d_f as u64);
    let mut v: Vec<f64> = (0..d_f).map(|_| gaussian(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub fn synth_generate(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<VideoSample>, DataError> {
    Ok(synth_generate_with_latents(seed, n, cfg)?.0)
}

/// Deterministic synthetic dataset plus its latent truth.
///
/// Per sample: a uniformly drawn highlight part marked in the part features,
/// 2..=6 drawn aspects of which a random subset is "relevant", relevant
/// aspect signatures added to every frame feature, and a caption produced by
/// [`oracle_caption`]. Irrelevant aspects appear only in the aspect list.
pub fn synth_generate_with_latents(
    seed: u64,
    n: usize,
    cfg: &SynthConfig,
) -> Result<(Vec<VideoSample>, Vec<SynthLatent>), DataError> {
    cfg.validate()?;
    let signatures: Vec<Vec<f64>> = cfg
        .aspect_alphabet
        .iter()
        .map(|t| aspect_signature(t, cfg.d_f))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for idx in 0..n {
        let highlight = rng.gen_range(0..cfg.n_p);
        let spike_frame = match cfg.highlight_mode {
            HighlightMode::Spike => Some(rng.gen_range(0..cfg.n_f)),
            HighlightMode::Mean => None,
        };
        let n_aspects = rng.gen_range(cfg.min_aspects..=cfg.max_aspects);
        // partial Fisher-Yates draw of distinct alphabet indices
        let mut pool: Vec<usize> = (0..cfg.aspect_alphabet.len()).collect();
        let mut drawn = Vec::with_capacity(n_aspects);
        for k in 0..n_aspects {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
            drawn.push(pool[k]);
        }
        let relevant_mask: Vec<bool> = drawn
            .iter()
            .map(|_| rng.gen::<f64>() < cfg.relevant_prob)
            .collect();

        let mut part_feats = vec![vec![vec![0.0; cfg.d_p]; cfg.n_p]; cfg.n_f];
        for (i, frame) in part_feats.iter_mut().enumerate() {
            for (j, part) in frame.iter_mut().enumerate() {
                let offset = match cfg.highlight_mode {
                    HighlightMode::Mean => {
                        if j == highlight {
                            cfg.highlight_mean
                        } else {
                            0.0
                        }
                    }
                    HighlightMode::Spike => {
                        if j == highlight {
                            if Some(i) == spike_frame {
                                cfg.spike_mean
                            } else {
                                0.0
                            }
                        } else {
                            // same total mass, spread flat across frames
                            cfg.spike_mean / cfg.n_f as f64
                        }
                    }
                };
                for v in part.iter_mut() {
                    *v = gaussian(&mut rng) + offset;
                }
            }
        }

        let mut frame_feats = vec![vec![0.0; cfg.d_f]; cfg.n_f];
        for frame in frame_feats.iter_mut() {
            for v in frame.iter_mut() {
                *v = gaussian(&mut rng);
            }
            for (pos, &ai) in drawn.iter().enumerate() {
                if relevant_mask[pos] {
                    for (v, s) in frame.iter_mut().zip(&signatures[ai]) {
                        *v += cfg.signature_scale * s;
                    }
                }
            }
        }

        let aspects: Vec<String> = drawn
            .iter()
            .map(|&ai| cfg.aspect_alphabet[ai].clone())
            .collect();
        let mut relevant: Vec<String> = drawn
            .iter()
            .zip(&relevant_mask)
            .filter(|(_, &m)| m)
            .map(|(&ai, _)| cfg.aspect_alphabet[ai].clone())
            .collect();
        relevant.sort();
        let latent = SynthLatent {
            highlight_part: highlight,
            relevant,
            spike_frame,
        };
        samples.push(VideoSample {
            video_id: format!("v{idx:06}"),
            frame_feats,
            part_feats,
            aspects,
            caption: oracle_caption(cfg, &latent),
        });
        latents.push(latent);
    }
    Ok((samples, latents))
}
