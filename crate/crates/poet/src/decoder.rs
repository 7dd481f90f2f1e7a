//! Attentional GRU decoder over the final graph nodes. The hidden state
//! starts at the graph mean, each step attends additively over all nodes,
//! and the cell consumes `[word embedding, attention context]`.
//!
//! Gate convention: `h' = (1 - z) * h + z * h_cand` with `z = sigmoid`,
//! `h_cand = tanh`, so zero parameters halve the hidden state each step.

use crate::autodiff::{Tape, Var};
use crate::dataio::{EOS_ID, PAD_ID, SOS_ID};
use crate::params::DecoderP;
use crate::ModelError;

/// Initial decoder state: the mean of all node rows.
pub fn init_state<'t>(tape: &'t Tape, nodes: &[Var<'t>]) -> Result<Var<'t>, ModelError> {
    if nodes.is_empty() {
        return Err(ModelError::Structure("decoder needs at least one node".into()));
    }
    Ok(tape.mean_of(nodes)?)
}

/// Additive attention: score each node with `w_score . tanh(W [v, h] + b)`,
/// softmax over nodes, return the weighted node sum.
pub fn attend<'t>(
    tape: &'t Tape,
    nodes: &[Var<'t>],
    h: Var<'t>,
    dec: &DecoderP<Var<'t>>,
) -> Result<Var<'t>, ModelError> {
    let mut scores = Vec::with_capacity(nodes.len());
    for v in nodes {
        let hidden = dec.attn_hidden.apply(tape.concat(&[*v, h])?)?.tanh()?;
        scores.push(hidden.matmul(dec.attn_score)?);
    }
    let weights = tape.concat(&scores)?.softmax(1)?;
    Ok(tape.weighted_sum(weights, nodes)?)
}

fn gru_cell<'t>(x: Var<'t>, h: Var<'t>, dec: &DecoderP<Var<'t>>) -> Result<Var<'t>, ModelError> {
    let g = &dec.gru;
    let z = x
        .matmul(g.wx_update)?
        .add(h.matmul(g.wh_update)?)?
        .add(g.b_update)?
        .sigmoid()?;
    let r = x
        .matmul(g.wx_reset)?
        .add(h.matmul(g.wh_reset)?)?
        .add(g.b_reset)?
        .sigmoid()?;
    let cand = x
        .matmul(g.wx_cand)?
        .add(r.mul(h)?.matmul(g.wh_cand)?)?
        .add(g.b_cand)?
        .tanh()?;
    Ok(z.affine(-1.0, 1.0)?.mul(h)?.add(z.mul(cand)?)?)
}

/// One decode step: embed the previous word, attend over the nodes, advance
/// the GRU, and project to vocabulary logits.
pub fn step<'t>(
    tape: &'t Tape,
    h: Var<'t>,
    prev_word: usize,
    nodes: &[Var<'t>],
    dec: &DecoderP<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>), ModelError> {
    let vocab = dec.embed.shape()[0];
    if prev_word >= vocab {
        return Err(ModelError::Caption(format!(
            "token id {prev_word} out of vocabulary range {vocab}"
        )));
    }
    let w = dec.embed.embed_row(prev_word)?;
    let ctx = attend(tape, nodes, h, dec)?;
    let x = tape.concat(&[w, ctx])?;
    let h_next = gru_cell(x, h, dec)?;
    let logits = dec.out.apply(h_next)?;
    Ok((h_next, logits))
}

/// Negative log-likelihood of `gold` under the softmax of `logits`,
/// computed as `logsumexp(logits) - logits[gold]` so extreme logit gaps
/// cannot underflow.
fn nll_of_logits<'t>(logits: Var<'t>, gold: usize) -> Result<Var<'t>, ModelError> {
    let lse = logits.logsumexp()?;
    Ok(lse.add(logits.index_last(gold)?.affine(-1.0, 0.0)?)?)
}

/// Teacher-forced cross-entropy, summed over the gold tokens after `<sos>`
/// through `<eos>` inclusive. Pad positions contribute nothing.
pub fn teacher_forced_loss<'t>(
    tape: &'t Tape,
    nodes: &[Var<'t>],
    caption_ids: &[usize],
    dec: &DecoderP<Var<'t>>,
) -> Result<Var<'t>, ModelError> {
    if caption_ids.len() < 2 {
        return Err(ModelError::Caption("caption too short".into()));
    }
    if caption_ids[0] != SOS_ID || *caption_ids.last().unwrap() != EOS_ID {
        return Err(ModelError::Caption(
            "caption must start with <sos> and end with <eos>".into(),
        ));
    }
    let mut h = init_state(tape, nodes)?;
    let mut terms = Vec::with_capacity(caption_ids.len() - 1);
    for t in 0..caption_ids.len() - 1 {
        let (h_next, logits) = step(tape, h, caption_ids[t], nodes, dec)?;
        h = h_next;
        let gold = caption_ids[t + 1];
        if gold == PAD_ID {
            continue;
        }
        terms.push(nll_of_logits(logits, gold)?);
    }
    if terms.is_empty() {
        return Err(ModelError::Caption("caption has no gold tokens".into()));
    }
    Ok(tape.add_n(&terms)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Argmax with lowest-id tie-breaking.
fn argmax(vals: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in vals.iter().enumerate().skip(1) {
        if v > vals[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Decodes a caption body: the emitted tokens between `<sos>` and `<eos>`,
/// at most `max_len` of them. Greedy takes the argmax each step; beam keeps
/// `k` hypotheses by summed log-probability and picks the best finished one
/// after normalizing by length. All ties break toward the lowest token id,
/// so `Beam(1)` reproduces greedy exactly.
pub fn generate<'t>(
    tape: &'t Tape,
    nodes: &[Var<'t>],
    dec: &DecoderP<Var<'t>>,
    mode: DecodeMode,
    max_len: usize,
) -> Result<Vec<usize>, ModelError> {
    match mode {
        DecodeMode::Greedy => {
            let mut h = init_state(tape, nodes)?;
            let mut prev = SOS_ID;
            let mut out = Vec::new();
            for _ in 0..max_len {
                let (h_next, logits) = step(tape, h, prev, nodes, dec)?;
                h = h_next;
                let tok = argmax(&logits.data());
                if tok == EOS_ID {
                    break;
                }
                out.push(tok);
                prev = tok;
            }
            Ok(out)
        }
        DecodeMode::Beam(k) => {
            if k < 1 {
                return Err(ModelError::Decode("beam width must be at least 1".into()));
            }
            beam_search(tape, nodes, dec, k, max_len)
        }
    }
}

struct Hyp<'t> {
    tokens: Vec<usize>,
    h: Var<'t>,
    logp: f64,
}

fn beam_search<'t>(
    tape: &'t Tape,
    nodes: &[Var<'t>],
    dec: &DecoderP<Var<'t>>,
    k: usize,
    max_len: usize,
) -> Result<Vec<usize>, ModelError> {
    let h0 = init_state(tape, nodes)?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        h: h0,
        logp: 0.0,
    }];
    // (body tokens, normalized score) for finished hypotheses
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        // candidate = (total logp, token, parent index)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut advanced: Vec<Var> = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(SOS_ID);
            let (h_next, logits) = step(tape, hyp.h, prev, nodes, dec)?;
            advanced.push(h_next);
            for (tok, lp) in log_softmax(&logits.data()).into_iter().enumerate() {
                candidates.push((hyp.logp + lp, tok, hi));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_live = Vec::with_capacity(k);
        for &(logp, tok, hi) in candidates.iter().take(k) {
            let mut tokens = live[hi].tokens.clone();
            if tok == EOS_ID {
                // normalize by emitted length including <eos>
                let t = (tokens.len() + 1) as f64;
                finished.push((tokens, logp / t));
            } else {
                tokens.push(tok);
                next_live.push(Hyp {
                    tokens,
                    h: advanced[hi],
                    logp,
                });
            }
        }
        live = next_live;
    }
    for hyp in live {
        let t = hyp.tokens.len().max(1) as f64;
        finished.push((hyp.tokens, hyp.logp / t));
    }
    finished.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(finished.into_iter().next().map(|(t, _)| t).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Tensor};
    use crate::params::{bind, init_params, zero_params, ModelConfig};
    use crate::vidgraph::GraphConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mcfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            graph: GraphConfig {
                n_f: 2,
                n_p: 2,
                d_f: 4,
                d_p: 3,
                d_pf: 4,
                d_a: 3,
            },
            d_w: 3,
            vocab,
            layers: 1,
        }
    }

    fn random_nodes<'t>(tape: &'t Tape, n: usize, d: usize, seed: u64) -> Vec<Var<'t>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                tape.constant_row(&data).unwrap()
            })
            .collect()
    }

    #[test]
    fn init_state_of_equal_rows_is_that_row() {
        let tape = Tape::new();
        let v = tape.constant_row(&[1.0, -2.0, 3.0]).unwrap();
        let h = init_state(&tape, &[v, v, v]).unwrap();
        assert_eq!(h.data(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn init_state_is_mean_of_270_rows() {
        let tape = Tape::new();
        let nodes = random_nodes(&tape, 270, 4, 1);
        let h = init_state(&tape, &nodes).unwrap();
        let mut expect = vec![0.0; 4];
        for n in &nodes {
            for (e, v) in expect.iter_mut().zip(n.data()) {
                *e += v / 270.0;
            }
        }
        for (a, e) in h.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn init_state_of_zero_rows_is_zero() {
        let tape = Tape::new();
        let z = tape.constant_row(&[0.0, 0.0]).unwrap();
        let h = init_state(&tape, &[z, z]).unwrap();
        assert_eq!(h.data(), vec![0.0, 0.0]);
    }

    #[test]
    fn attend_identical_rows_returns_that_row() {
        let params = init_params(&mcfg(9), 2);
        let tape = Tape::new();
        let dec = bind(&tape, &params).dec;
        let row = tape.constant_row(&[0.4, -0.1, 0.9, 0.0]).unwrap();
        let h = tape.constant_row(&[1.0, 1.0, -1.0, 0.5]).unwrap();
        let ctx = attend(&tape, &[row, row, row], h, &dec).unwrap();
        for (a, e) in ctx.data().iter().zip(row.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_single_node_is_that_node() {
        let params = init_params(&mcfg(9), 3);
        let tape = Tape::new();
        let dec = bind(&tape, &params).dec;
        let row = tape.constant_row(&[2.0, 3.0, -1.0, 0.1]).unwrap();
        let h = tape.constant_row(&[0.0; 4]).unwrap();
        let ctx = attend(&tape, &[row], h, &dec).unwrap();
        assert_eq!(ctx.data(), row.data());
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let params = init_params(&mcfg(9), 4);
        let tape = Tape::new();
        let dec = bind(&tape, &params).dec;
        let nodes = random_nodes(&tape, 7, 4, 5);
        let h = tape.constant_row(&[0.3, -0.2, 0.8, 0.0]).unwrap();
        let mut scores = Vec::new();
        for v in &nodes {
            let hidden = dec
                .attn_hidden
                .apply(tape.concat(&[*v, h]).unwrap())
                .unwrap()
                .tanh()
                .unwrap();
            scores.push(hidden.matmul(dec.attn_score).unwrap());
        }
        let weights = tape.concat(&scores).unwrap().softmax(1).unwrap().data();
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_step_halves_hidden_state() {
        let params = zero_params(&mcfg(9));
        let tape = Tape::new();
        let dec = bind(&tape, &params).dec;
        let nodes = random_nodes(&tape, 3, 4, 6);
        let h = tape.constant_row(&[1.0, -0.5, 2.0, 0.8]).unwrap();
        let (h_next, logits) = step(&tape, h, SOS_ID, &nodes, &dec).unwrap();
        for (a, e) in h_next.data().iter().zip(h.data()) {
            assert!((a - 0.5 * e).abs() < 1e-12, "{a} vs 0.5*{e}");
        }
        assert_eq!(logits.shape(), vec![1, 9]);
    }

    #[test]
    fn step_rejects_out_of_range_token() {
        let params = init_params(&mcfg(9), 7);
        let tape = Tape::new();
        let dec = bind(&tape, &params).dec;
        let nodes = random_nodes(&tape, 2, 4, 7);
        let h = init_state(&tape, &nodes).unwrap();
        assert!(matches!(
            step(&tape, h, 9, &nodes, &dec),
            Err(ModelError::Caption(_))
        ));
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        let params = init_params(&mcfg(8), 8);
        let flat: Vec<Tensor> = params.flatten().into_iter().cloned().collect();
        let err = finite_diff_check(
            |tape, vars| {
                let mut it = vars.iter().copied();
                let bound = params
                    .try_map::<Var, crate::autodiff::AdError>(&mut |_| Ok(it.next().unwrap()))
                    .unwrap();
                let nodes = random_nodes(tape, 4, 4, 9);
                let h = init_state(tape, &nodes)
                    .map_err(|_| crate::autodiff::AdError::EmptyNeighbors)?;
                let (h_next, logits) = step(tape, h, 5, &nodes, &bound.dec)
                    .map_err(|_| crate::autodiff::AdError::EmptyNeighbors)?;
                let state_term = h_next.tanh()?.mean_all()?;
                let token_term = logits.softmax(1)?.index_last(2)?.log()?.affine(-1.0, 0.0)?;
                state_term.add(token_term)?.affine(1e-3, 0.0)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "step fd err {err}");
    }

    #[test]
    fn uniform_logits_loss_is_t_ln_v() {
        // zero parameters give all-equal logits, hence uniform softmax
        for (vocab, caption_len) in [(10usize, 4usize), (25, 7)] {
            let params = zero_params(&mcfg(vocab));
            let tape = Tape::new();
            let dec = bind(&tape, &params).dec;
            let nodes = random_nodes(&tape, 3, 4, 10);
            let mut ids = vec![SOS_ID];
            ids.extend(std::iter::repeat(4).take(caption_len));
            ids.push(EOS_ID);
            let loss = teacher_forced_loss(&tape, &nodes, &ids, &dec).unwrap();
            let t = (caption_len + 1) as f64; // golds: caption tokens + <eos>
            let expect = t * (vocab as f64).ln();
            assert!(
                (loss.scalar() - expect).abs() < 1e-9,
                "{} vs {expect}",
                loss.scalar()
            );
        }
    }

    #[test]
    fn near_one_hot_gold_logits_give_tiny_loss() {
        // logit 30 on gold, 0 elsewhere, V=100: loss ~ T*ln(1+99e^-30)
        let tape = Tape::new();
        let golds = [7usize, 3, 42];
        let mut terms = Vec::new();
        for &gold in &golds {
            let mut logits_data = vec![0.0; 100];
            logits_data[gold] = 30.0;
            let logits = tape.leaf(&[1, 100], logits_data, false).unwrap();
            terms.push(super::nll_of_logits(logits, gold).unwrap());
        }
        let loss = tape.add_n(&terms).unwrap().scalar();
        assert!(loss > 0.0);
        assert!(loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn loss_rejects_bad_captions() {
        let params = init_params(&mcfg(9), 11);
        let tape = Tape::new();
        let dec = bind(&tape, &params).dec;
        let nodes = random_nodes(&tape, 2, 4, 11);
        assert!(teacher_forced_loss(&tape, &nodes, &[SOS_ID], &dec).is_err());
        assert!(teacher_forced_loss(&tape, &nodes, &[4, 5, EOS_ID], &dec).is_err());
        assert!(teacher_forced_loss(&tape, &nodes, &[SOS_ID, 5, 4], &dec).is_err());
    }

    #[test]
    fn loss_descends_monotonically_on_one_sample() {
        // 50 full-batch steps with a small tuned lr on a fixed micro sample
        let cfg = mcfg(8);
        let mut params = init_params(&cfg, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let node_data: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ids = vec![SOS_ID, 4, 6, 5, 7, EOS_ID];
        let mut losses = Vec::new();
        for _ in 0..50 {
            let tape = Tape::new();
            let vars = bind(&tape, &params);
            let nodes: Vec<Var> = node_data
                .iter()
                .map(|d| tape.constant_row(d).unwrap())
                .collect();
            let loss = teacher_forced_loss(&tape, &nodes, &ids, &vars.dec).unwrap();
            losses.push(loss.scalar());
            tape.backward(loss).unwrap();
            let grads = crate::params::collect_grads(&vars);
            for (t, g) in params.flatten_mut().into_iter().zip(&grads) {
                for (p, gi) in t.data.iter_mut().zip(g) {
                    *p -= 0.01 * gi;
                }
            }
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0] + 1e-12, "loss went up: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..6u64 {
            let params = init_params(&mcfg(9), 100 + seed);
            let tape = Tape::new();
            let vars = bind(&tape, &params);
            let nodes = random_nodes(&tape, 5, 4, 200 + seed);
            let g = generate(&tape, &nodes, &vars.dec, DecodeMode::Greedy, 12).unwrap();
            let b = generate(&tape, &nodes, &vars.dec, DecodeMode::Beam(1), 12).unwrap();
            assert_eq!(g, b, "seed {seed}");
        }
    }

    #[test]
    fn beam_one_equals_greedy_under_ties() {
        // zero params: every step's logits are all equal, pure tie-break
        let params = zero_params(&mcfg(9));
        let tape = Tape::new();
        let vars = bind(&tape, &params);
        let nodes = random_nodes(&tape, 3, 4, 14);
        let g = generate(&tape, &nodes, &vars.dec, DecodeMode::Greedy, 6).unwrap();
        let b = generate(&tape, &nodes, &vars.dec, DecodeMode::Beam(1), 6).unwrap();
        assert_eq!(g, b);
        // lowest id is <sos>=0; ties argmax to token 0 each step, never <eos>
        assert_eq!(g, vec![SOS_ID; 6]);
    }

    #[test]
    fn generation_halts_at_max_len() {
        let mut params = init_params(&mcfg(9), 15);
        // make <eos> unreachable
        params.dec.out.b.data[EOS_ID] = -1e3;
        let tape = Tape::new();
        let vars = bind(&tape, &params);
        let nodes = random_nodes(&tape, 4, 4, 15);
        let out = generate(&tape, &nodes, &vars.dec, DecodeMode::Greedy, 9).unwrap();
        assert_eq!(out.len(), 9);
        let out = generate(&tape, &nodes, &vars.dec, DecodeMode::Beam(3), 9).unwrap();
        assert_eq!(out.len(), 9);
    }

    #[test]
    fn beam_width_zero_is_rejected() {
        let params = init_params(&mcfg(9), 16);
        let tape = Tape::new();
        let vars = bind(&tape, &params);
        let nodes = random_nodes(&tape, 2, 4, 16);
        assert!(matches!(
            generate(&tape, &nodes, &vars.dec, DecodeMode::Beam(0), 5),
            Err(ModelError::Decode(_))
        ));
    }

    #[test]
    fn greedy_is_deterministic() {
        let params = init_params(&mcfg(9), 17);
        let run = || {
            let tape = Tape::new();
            let vars = bind(&tape, &params);
            let nodes = random_nodes(&tape, 4, 4, 17);
            generate(&tape, &nodes, &vars.dec, DecodeMode::Greedy, 10).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn per_step_distribution_normalizes() {
        let params = init_params(&mcfg(12), 18);
        let tape = Tape::new();
        let vars = bind(&tape, &params);
        let nodes = random_nodes(&tape, 4, 4, 18);
        let h = init_state(&tape, &nodes).unwrap();
        let (_, logits) = step(&tape, h, SOS_ID, &nodes, &vars.dec).unwrap();
        let probs = logits.softmax(1).unwrap().data();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
