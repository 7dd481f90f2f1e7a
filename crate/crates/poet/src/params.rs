//! The full learnable parameter set, generic over the tensor handle so the
//! same structure serves persistent storage (`Tensor`) and per-tape bindings
//! (`Var`). Traversal order is fixed by field declaration order; binding,
//! gradient collection, SGD, and checkpoints all rely on it.

use rand::distributions::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdResult, Tape, Tensor, Var};
use crate::vidgraph::GraphConfig;

/// Affine map `y = x . w + b` with `w: [d_in, d_out]`, `b: [1, d_out]`.
#[derive(Debug, Clone)]
pub struct LinearP<T> {
    pub w: T,
    pub b: T,
}

/// Node construction parameters: order/type tables, the two projections into
/// the common node space, and the edge scorer.
#[derive(Debug, Clone)]
pub struct GraphP<T> {
    /// Per-frame order embedding added to part features, `[n_f, d_p]`.
    pub order_part: T,
    /// Per-frame order embedding added to frame features, `[n_f, d_f]`.
    pub order_frame: T,
    /// Part-type embeddings, `[n_p, d_p]`.
    pub type_part: T,
    /// The frame node's type embedding, `[1, d_f]`.
    pub type_frame: T,
    pub proj_part: LinearP<T>,
    pub proj_frame: LinearP<T>,
    /// Edge scorer over concatenated endpoints, `[2*d_pf] -> [1]`.
    pub edge: LinearP<T>,
}

/// One spatial-temporal inference stage: separate neighbor/root transforms
/// plus their gate counterparts.
#[derive(Debug, Clone)]
pub struct StiP<T> {
    pub neigh: LinearP<T>,
    pub root: LinearP<T>,
    pub gate_neigh: LinearP<T>,
    pub gate_root: LinearP<T>,
}

/// The graph-convolution ablation stage: a single weight matrix.
#[derive(Debug, Clone)]
pub struct GcnP<T> {
    pub w: T,
}

/// One knowledge-leveraging stage: aspect filter, memory writer, and the
/// memory attention scorer.
#[derive(Debug, Clone)]
pub struct KlP<T> {
    /// `[d_a + d_pf] -> [1]` importance scorer.
    pub filter: LinearP<T>,
    /// `[d_a] -> [d_pf]` aspect projection for memory rows.
    pub write_aspect: LinearP<T>,
    /// `[d_pf] -> [d_pf]` global-context projection for memory rows.
    pub write_global: LinearP<T>,
    /// `[2*d_pf] -> [d_pf]` pre-tanh attention transform.
    pub attn_hidden: LinearP<T>,
    /// `[d_pf, 1]` attention output vector (no bias).
    pub attn_score: T,
}

/// One stacked reasoning layer. The GCN stage is only exercised by the
/// ablation variants but is always allocated so every variant shares one
/// parameter layout.
#[derive(Debug, Clone)]
pub struct LayerP<T> {
    pub sti: StiP<T>,
    pub gcn: GcnP<T>,
    pub kl: KlP<T>,
}

/// GRU cell with update/reset/candidate gates. Convention:
/// `h' = (1 - z) * h + z * h_cand`.
#[derive(Debug, Clone)]
pub struct GruP<T> {
    pub wx_update: T,
    pub wh_update: T,
    pub b_update: T,
    pub wx_reset: T,
    pub wh_reset: T,
    pub b_reset: T,
    pub wx_cand: T,
    pub wh_cand: T,
    pub b_cand: T,
}

#[derive(Debug, Clone)]
pub struct DecoderP<T> {
    /// Word embedding table, `[vocab, d_w]`.
    pub embed: T,
    pub gru: GruP<T>,
    pub attn_hidden: LinearP<T>,
    /// `[d_pf, 1]` attention output vector (no bias).
    pub attn_score: T,
    /// Output projection `[d_pf] -> [vocab]`.
    pub out: LinearP<T>,
}

/// Every learned weight of the model.
#[derive(Debug, Clone)]
pub struct PoetP<T> {
    pub graph: GraphP<T>,
    /// Aspect embedding table shared by all layers, `[vocab, d_a]`.
    pub aspect_embed: T,
    pub layers: Vec<LayerP<T>>,
    pub dec: DecoderP<T>,
}

pub type PoetParams = PoetP<Tensor>;
pub type PoetVars<'t> = PoetP<Var<'t>>;

impl<T> LinearP<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<LinearP<U>, E> {
        Ok(LinearP {
            w: f(&self.w)?,
            b: f(&self.b)?,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{name}.w"), &self.w));
        out.push((format!("{name}.b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{name}.w"), &mut self.w));
        out.push((format!("{name}.b"), &mut self.b));
    }
}

impl<'t> LinearP<Var<'t>> {
    pub fn apply(&self, x: Var<'t>) -> AdResult<Var<'t>> {
        x.matmul(self.w)?.add(self.b)
    }
}

impl<T> GraphP<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<GraphP<U>, E> {
        Ok(GraphP {
            order_part: f(&self.order_part)?,
            order_frame: f(&self.order_frame)?,
            type_part: f(&self.type_part)?,
            type_frame: f(&self.type_frame)?,
            proj_part: self.proj_part.try_map(f)?,
            proj_frame: self.proj_frame.try_map(f)?,
            edge: self.edge.try_map(f)?,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{name}.order_part"), &self.order_part));
        out.push((format!("{name}.order_frame"), &self.order_frame));
        out.push((format!("{name}.type_part"), &self.type_part));
        out.push((format!("{name}.type_frame"), &self.type_frame));
        self.proj_part.visit(&format!("{name}.proj_part"), out);
        self.proj_frame.visit(&format!("{name}.proj_frame"), out);
        self.edge.visit(&format!("{name}.edge"), out);
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{name}.order_part"), &mut self.order_part));
        out.push((format!("{name}.order_frame"), &mut self.order_frame));
        out.push((format!("{name}.type_part"), &mut self.type_part));
        out.push((format!("{name}.type_frame"), &mut self.type_frame));
        self.proj_part.visit_mut(&format!("{name}.proj_part"), out);
        self.proj_frame.visit_mut(&format!("{name}.proj_frame"), out);
        self.edge.visit_mut(&format!("{name}.edge"), out);
    }
}

impl<T> StiP<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<StiP<U>, E> {
        Ok(StiP {
            neigh: self.neigh.try_map(f)?,
            root: self.root.try_map(f)?,
            gate_neigh: self.gate_neigh.try_map(f)?,
            gate_root: self.gate_root.try_map(f)?,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a T)>) {
        self.neigh.visit(&format!("{name}.neigh"), out);
        self.root.visit(&format!("{name}.root"), out);
        self.gate_neigh.visit(&format!("{name}.gate_neigh"), out);
        self.gate_root.visit(&format!("{name}.gate_root"), out);
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.neigh.visit_mut(&format!("{name}.neigh"), out);
        self.root.visit_mut(&format!("{name}.root"), out);
        self.gate_neigh.visit_mut(&format!("{name}.gate_neigh"), out);
        self.gate_root.visit_mut(&format!("{name}.gate_root"), out);
    }
}

impl<T> KlP<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<KlP<U>, E> {
        Ok(KlP {
            filter: self.filter.try_map(f)?,
            write_aspect: self.write_aspect.try_map(f)?,
            write_global: self.write_global.try_map(f)?,
            attn_hidden: self.attn_hidden.try_map(f)?,
            attn_score: f(&self.attn_score)?,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a T)>) {
        self.filter.visit(&format!("{name}.filter"), out);
        self.write_aspect.visit(&format!("{name}.write_aspect"), out);
        self.write_global.visit(&format!("{name}.write_global"), out);
        self.attn_hidden.visit(&format!("{name}.attn_hidden"), out);
        out.push((format!("{name}.attn_score"), &self.attn_score));
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.filter.visit_mut(&format!("{name}.filter"), out);
        self.write_aspect.visit_mut(&format!("{name}.write_aspect"), out);
        self.write_global.visit_mut(&format!("{name}.write_global"), out);
        self.attn_hidden.visit_mut(&format!("{name}.attn_hidden"), out);
        out.push((format!("{name}.attn_score"), &mut self.attn_score));
    }
}

impl<T> LayerP<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<LayerP<U>, E> {
        Ok(LayerP {
            sti: self.sti.try_map(f)?,
            gcn: GcnP { w: f(&self.gcn.w)? },
            kl: self.kl.try_map(f)?,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a T)>) {
        self.sti.visit(&format!("{name}.sti"), out);
        out.push((format!("{name}.gcn.w"), &self.gcn.w));
        self.kl.visit(&format!("{name}.kl"), out);
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.sti.visit_mut(&format!("{name}.sti"), out);
        out.push((format!("{name}.gcn.w"), &mut self.gcn.w));
        self.kl.visit_mut(&format!("{name}.kl"), out);
    }
}

impl<T> GruP<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<GruP<U>, E> {
        Ok(GruP {
            wx_update: f(&self.wx_update)?,
            wh_update: f(&self.wh_update)?,
            b_update: f(&self.b_update)?,
            wx_reset: f(&self.wx_reset)?,
            wh_reset: f(&self.wh_reset)?,
            b_reset: f(&self.b_reset)?,
            wx_cand: f(&self.wx_cand)?,
            wh_cand: f(&self.wh_cand)?,
            b_cand: f(&self.b_cand)?,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{name}.wx_update"), &self.wx_update));
        out.push((format!("{name}.wh_update"), &self.wh_update));
        out.push((format!("{name}.b_update"), &self.b_update));
        out.push((format!("{name}.wx_reset"), &self.wx_reset));
        out.push((format!("{name}.wh_reset"), &self.wh_reset));
        out.push((format!("{name}.b_reset"), &self.b_reset));
        out.push((format!("{name}.wx_cand"), &self.wx_cand));
        out.push((format!("{name}.wh_cand"), &self.wh_cand));
        out.push((format!("{name}.b_cand"), &self.b_cand));
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{name}.wx_update"), &mut self.wx_update));
        out.push((format!("{name}.wh_update"), &mut self.wh_update));
        out.push((format!("{name}.b_update"), &mut self.b_update));
        out.push((format!("{name}.wx_reset"), &mut self.wx_reset));
        out.push((format!("{name}.wh_reset"), &mut self.wh_reset));
        out.push((format!("{name}.b_reset"), &mut self.b_reset));
        out.push((format!("{name}.wx_cand"), &mut self.wx_cand));
        out.push((format!("{name}.wh_cand"), &mut self.wh_cand));
        out.push((format!("{name}.b_cand"), &mut self.b_cand));
    }
}

impl<T> DecoderP<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<DecoderP<U>, E> {
        Ok(DecoderP {
            embed: f(&self.embed)?,
            gru: self.gru.try_map(f)?,
            attn_hidden: self.attn_hidden.try_map(f)?,
            attn_score: f(&self.attn_score)?,
            out: self.out.try_map(f)?,
        })
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{name}.embed"), &self.embed));
        self.gru.visit(&format!("{name}.gru"), out);
        self.attn_hidden.visit(&format!("{name}.attn_hidden"), out);
        out.push((format!("{name}.attn_score"), &self.attn_score));
        self.out.visit(&format!("{name}.out"), out);
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{name}.embed"), &mut self.embed));
        self.gru.visit_mut(&format!("{name}.gru"), out);
        self.attn_hidden.visit_mut(&format!("{name}.attn_hidden"), out);
        out.push((format!("{name}.attn_score"), &mut self.attn_score));
        self.out.visit_mut(&format!("{name}.out"), out);
    }
}

impl<T> PoetP<T> {
    pub fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<PoetP<U>, E> {
        Ok(PoetP {
            graph: self.graph.try_map(f)?,
            aspect_embed: f(&self.aspect_embed)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(f))
                .collect::<Result<_, E>>()?,
            dec: self.dec.try_map(f)?,
        })
    }

    /// Every tensor with its canonical name, in traversal order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.graph.visit("graph", &mut out);
        out.push(("aspect_embed".to_string(), &self.aspect_embed));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layer{i}"), &mut out);
        }
        self.dec.visit("dec", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.graph.visit_mut("graph", &mut out);
        out.push(("aspect_embed".to_string(), &mut self.aspect_embed));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layer{i}"), &mut out);
        }
        self.dec.visit_mut("dec", &mut out);
        out
    }

    /// Tensors in traversal order, no names.
    pub fn flatten(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut T> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }
}

impl PoetParams {
    /// Resets every gradient buffer to zero.
    pub fn zero_grads(&mut self) {
        for t in self.flatten_mut() {
            t.zero_grad();
        }
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.flatten().iter().map(|t| t.numel()).sum()
    }
}

/// Model-level shape configuration: graph dimensions plus the decoder's word
/// embedding width, vocabulary size, and reasoning depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub graph: GraphConfig,
    pub d_w: usize,
    pub vocab: usize,
    pub layers: usize,
}

/// Binds every parameter onto `tape` as a differentiable leaf. Traversal
/// order matches `flatten`, so gradients collected from the returned
/// structure line up with `flatten_mut` on the source.
pub fn bind<'t>(tape: &'t Tape, params: &PoetParams) -> PoetVars<'t> {
    params
        .try_map::<Var<'t>, std::convert::Infallible>(&mut |t| Ok(tape.var(t)))
        .unwrap_or_else(|e| match e {})
}

/// Per-sample gradient vectors in traversal order; zeros where no gradient
/// flowed.
pub fn collect_grads(vars: &PoetVars<'_>) -> Vec<Vec<f64>> {
    vars.flatten()
        .into_iter()
        .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect()
}

fn uniform_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = 1.0 / (rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(&[rows, cols], data, true).expect("finite init")
}

fn normal_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = rand::distributions::Uniform::new(0.0f64, 1.0);
    // Box-Muller on ChaCha output keeps the init reproducible across rand
    // versions' changing Normal internals.
    let mut sample = || {
        let u1: f64 = 1.0 - dist.sample(rng);
        let u2: f64 = dist.sample(rng);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let data: Vec<f64> = (0..rows * cols).map(|_| std * sample()).collect();
    Tensor::new(&[rows, cols], data, true).expect("finite init")
}

fn zero_bias(cols: usize) -> Tensor {
    Tensor::zeros(&[1, cols], true)
}

fn linear(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> LinearP<Tensor> {
    LinearP {
        w: uniform_weight(rng, d_in, d_out),
        b: zero_bias(d_out),
    }
}

/// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero,
/// embedding-style tables normal with std 0.02. Deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> PoetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = cfg.graph;
    let graph = GraphP {
        order_part: normal_table(&mut rng, g.n_f, g.d_p, 0.02),
        order_frame: normal_table(&mut rng, g.n_f, g.d_f, 0.02),
        type_part: normal_table(&mut rng, g.n_p, g.d_p, 0.02),
        type_frame: normal_table(&mut rng, 1, g.d_f, 0.02),
        proj_part: linear(&mut rng, g.d_p, g.d_pf),
        proj_frame: linear(&mut rng, g.d_f, g.d_pf),
        edge: linear(&mut rng, 2 * g.d_pf, 1),
    };
    let aspect_embed = normal_table(&mut rng, cfg.vocab, g.d_a, 0.02);
    let layers = (0..cfg.layers)
        .map(|_| LayerP {
            sti: StiP {
                neigh: linear(&mut rng, g.d_pf, g.d_pf),
                root: linear(&mut rng, g.d_pf, g.d_pf),
                gate_neigh: linear(&mut rng, g.d_pf, g.d_pf),
                gate_root: linear(&mut rng, g.d_pf, g.d_pf),
            },
            gcn: GcnP {
                w: uniform_weight(&mut rng, g.d_pf, g.d_pf),
            },
            kl: KlP {
                filter: linear(&mut rng, g.d_a + g.d_pf, 1),
                write_aspect: linear(&mut rng, g.d_a, g.d_pf),
                write_global: linear(&mut rng, g.d_pf, g.d_pf),
                attn_hidden: linear(&mut rng, 2 * g.d_pf, g.d_pf),
                attn_score: uniform_weight(&mut rng, g.d_pf, 1),
            },
        })
        .collect();
    let d_in = cfg.d_w + g.d_pf;
    let dec = DecoderP {
        embed: normal_table(&mut rng, cfg.vocab, cfg.d_w, 0.02),
        gru: GruP {
            wx_update: uniform_weight(&mut rng, d_in, g.d_pf),
            wh_update: uniform_weight(&mut rng, g.d_pf, g.d_pf),
            b_update: zero_bias(g.d_pf),
            wx_reset: uniform_weight(&mut rng, d_in, g.d_pf),
            wh_reset: uniform_weight(&mut rng, g.d_pf, g.d_pf),
            b_reset: zero_bias(g.d_pf),
            wx_cand: uniform_weight(&mut rng, d_in, g.d_pf),
            wh_cand: uniform_weight(&mut rng, g.d_pf, g.d_pf),
            b_cand: zero_bias(g.d_pf),
        },
        attn_hidden: linear(&mut rng, 2 * g.d_pf, g.d_pf),
        attn_score: uniform_weight(&mut rng, g.d_pf, 1),
        out: linear(&mut rng, g.d_pf, cfg.vocab),
    };
    PoetP {
        graph,
        aspect_embed,
        layers,
        dec,
    }
}

/// Builds parameters where every tensor is zero-filled. Used by tests that
/// pin closed-form behaviors of the zero-parameter model.
pub fn zero_params(cfg: &ModelConfig) -> PoetParams {
    let mut p = init_params(cfg, 0);
    for t in p.flatten_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    p
}
