//! Spatial-temporal product-part graph: typed nodes with order/type
//! embeddings projected into a common space, a fixed connectivity rule, and
//! a learned scorer over directed neighbor pairs.
//!
//! Node layout is frame-major: for frame `i`, part nodes `0..n_p` then the
//! frame node at slot `n_p`. Within a frame all nodes are pairwise
//! connected; across frames, nodes of equal slot are pairwise connected.

use crate::autodiff::{AdResult, Tape, Var};
use crate::params::{GraphP, LinearP};
use crate::ModelError;

/// Graph dimensions: frame/part counts, raw feature widths, the common node
/// width `d_pf`, and the aspect embedding width `d_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphConfig {
    pub n_f: usize,
    pub n_p: usize,
    pub d_f: usize,
    pub d_p: usize,
    pub d_pf: usize,
    pub d_a: usize,
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_f == 0 || self.n_p == 0 || self.d_f == 0 || self.d_p == 0 || self.d_pf == 0
            || self.d_a == 0
        {
            return Err(ModelError::Dim(format!(
                "all graph dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Total nodes: `n_f * (n_p + 1)`.
    pub fn node_count(&self) -> usize {
        self.n_f * (self.n_p + 1)
    }

    /// Flat index of frame `i`, slot `j` (`j == n_p` is the frame node).
    pub fn node_index(&self, frame: usize, slot: usize) -> usize {
        debug_assert!(frame < self.n_f && slot <= self.n_p);
        frame * (self.n_p + 1) + slot
    }
}

/// Static neighbor lists from the connectivity rule. Every node of slot `j`
/// in frame `i` is adjacent to the other `n_p` nodes of frame `i` and to the
/// `n_f - 1` slot-`j` nodes of the other frames: degree `n_p + n_f - 1`.
/// Within-frame neighbors come first (ascending slot), then cross-frame
/// (ascending frame); the order fixes masked-max tie-breaking downstream.
pub fn neighbor_rule(cfg: &GraphConfig) -> Vec<Vec<usize>> {
    let mut lists = Vec::with_capacity(cfg.node_count());
    for i in 0..cfg.n_f {
        for j in 0..=cfg.n_p {
            let mut neigh = Vec::with_capacity(cfg.n_p + cfg.n_f - 1);
            for j2 in 0..=cfg.n_p {
                if j2 != j {
                    neigh.push(cfg.node_index(i, j2));
                }
            }
            for i2 in 0..cfg.n_f {
                if i2 != i {
                    neigh.push(cfg.node_index(i2, j));
                }
            }
            lists.push(neigh);
        }
    }
    lists
}

/// Builds the projected node rows for one sample, frame-major with parts
/// before the frame node:
/// part rows `(p + o_i + t_j) . W_p + b_p`, frame rows
/// `(f + o_i + t_frame) . W_f + b_f`.
pub fn build_nodes<'t>(
    tape: &'t Tape,
    frames: &[Vec<f64>],
    parts: &[Vec<Vec<f64>>],
    gp: &GraphP<Var<'t>>,
    cfg: &GraphConfig,
) -> Result<Vec<Var<'t>>, ModelError> {
    cfg.validate()?;
    if frames.len() != cfg.n_f || parts.len() != cfg.n_f {
        return Err(ModelError::Dim(format!(
            "sample has {} frames / {} part frames, config wants {}",
            frames.len(),
            parts.len(),
            cfg.n_f
        )));
    }
    let mut nodes = Vec::with_capacity(cfg.node_count());
    for i in 0..cfg.n_f {
        if parts[i].len() != cfg.n_p {
            return Err(ModelError::Dim(format!(
                "frame {i} has {} parts, config wants {}",
                parts[i].len(),
                cfg.n_p
            )));
        }
        let order_p = gp.order_part.embed_row(i)?;
        let order_f = gp.order_frame.embed_row(i)?;
        for j in 0..cfg.n_p {
            if parts[i][j].len() != cfg.d_p {
                return Err(ModelError::Dim(format!(
                    "part ({i},{j}) has dim {}, config wants {}",
                    parts[i][j].len(),
                    cfg.d_p
                )));
            }
            let raw = tape.constant_row(&parts[i][j])?;
            let typed = raw.add(order_p)?.add(gp.type_part.embed_row(j)?)?;
            nodes.push(gp.proj_part.apply(typed)?);
        }
        if frames[i].len() != cfg.d_f {
            return Err(ModelError::Dim(format!(
                "frame {i} has dim {}, config wants {}",
                frames[i].len(),
                cfg.d_f
            )));
        }
        let raw = tape.constant_row(&frames[i])?;
        let typed = raw.add(order_f)?.add(gp.type_frame.embed_row(0)?)?;
        nodes.push(gp.proj_frame.apply(typed)?);
    }
    Ok(nodes)
}

/// Scores every directed neighbor pair: `e[i][k] = [v_i, v_nbr] . W_e + b_e`
/// aligned with `neighbors[i]`. Callers re-run this before each propagation
/// step so scores track the current node features.
pub fn edge_scores<'t>(
    tape: &'t Tape,
    nodes: &[Var<'t>],
    neighbors: &[Vec<usize>],
    edge: &LinearP<Var<'t>>,
) -> AdResult<Vec<Vec<Var<'t>>>> {
    let mut all = Vec::with_capacity(nodes.len());
    for (root, neigh) in neighbors.iter().enumerate() {
        let mut scores = Vec::with_capacity(neigh.len());
        for &k in neigh {
            let pair = tape.concat(&[nodes[root], nodes[k]])?;
            scores.push(edge.apply(pair)?);
        }
        all.push(scores);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::params::{init_params, zero_params, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(n_f: usize, n_p: usize) -> GraphConfig {
        GraphConfig {
            n_f,
            n_p,
            d_f: 4,
            d_p: 3,
            d_pf: 3,
            d_a: 2,
        }
    }

    fn mcfg(g: GraphConfig) -> ModelConfig {
        ModelConfig {
            graph: g,
            d_w: 2,
            vocab: 6,
            layers: 1,
        }
    }

    fn zero_features(g: &GraphConfig) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        (
            vec![vec![0.0; g.d_f]; g.n_f],
            vec![vec![vec![0.0; g.d_p]; g.n_p]; g.n_f],
        )
    }

    #[test]
    fn zero_everything_gives_zero_rows() {
        let g = GraphConfig {
            d_pf: 3,
            d_p: 3,
            d_f: 3,
            ..cfg(2, 2)
        };
        let mut params = zero_params(&mcfg(g));
        // identity projections
        for t in [&mut params.graph.proj_part.w, &mut params.graph.proj_frame.w] {
            for r in 0..3 {
                t.data[r * 3 + r] = 1.0;
            }
        }
        let (frames, parts) = zero_features(&g);
        let tape = Tape::new();
        let vars = crate::params::bind(&tape, &params);
        let nodes = build_nodes(&tape, &frames, &parts, &vars.graph, &g).unwrap();
        assert_eq!(nodes.len(), g.node_count());
        for n in nodes {
            assert!(n.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn default_scale_has_270_rows() {
        let g = GraphConfig {
            n_f: 30,
            n_p: 8,
            d_f: 4,
            d_p: 3,
            d_pf: 3,
            d_a: 2,
        };
        let params = init_params(&mcfg(g), 0);
        let (frames, parts) = zero_features(&g);
        let tape = Tape::new();
        let vars = crate::params::bind(&tape, &params);
        let nodes = build_nodes(&tape, &frames, &parts, &vars.graph, &g).unwrap();
        assert_eq!(nodes.len(), 270);
    }

    #[test]
    fn node_row_gradient_wrt_order_table() {
        let g = cfg(2, 2);
        let params = init_params(&mcfg(g), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<Vec<f64>> = (0..g.n_f)
            .map(|_| (0..g.d_f).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let parts: Vec<Vec<Vec<f64>>> = (0..g.n_f)
            .map(|_| {
                (0..g.n_p)
                    .map(|_| (0..g.d_p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let inputs = [
            params.graph.order_part.clone(),
            params.graph.order_frame.clone(),
        ];
        let err = finite_diff_check(
            |tape, vars| {
                let bound = crate::params::bind(tape, &params);
                let mut gp = bound.graph.clone();
                gp.order_part = vars[0];
                gp.order_frame = vars[1];
                let nodes = build_nodes(tape, &frames, &parts, &gp, &g)
                    .map_err(|_| crate::autodiff::AdError::EmptyNeighbors)?;
                tape.mean_of(&nodes)?.mean_all()
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "order table fd err {err}");
    }

    #[test]
    fn degrees_match_closed_form() {
        let g = cfg(30, 8);
        let lists = neighbor_rule(&g);
        assert_eq!(lists.len(), g.node_count());
        for l in &lists {
            assert_eq!(l.len(), 8 + 29);
        }
    }

    #[test]
    fn single_frame_single_part_neighbor_is_frame_node() {
        let g = cfg(1, 1);
        let lists = neighbor_rule(&g);
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0], vec![1]); // part node sees only its frame node
        assert_eq!(lists[1], vec![0]);
    }

    #[test]
    fn adjacency_is_symmetric_and_loop_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let g = cfg(rng.gen_range(1..7), rng.gen_range(1..6));
            let lists = neighbor_rule(&g);
            for (i, l) in lists.iter().enumerate() {
                assert!(!l.contains(&i), "self loop at {i}");
                for &k in l {
                    assert!(lists[k].contains(&i), "asymmetric edge {i}->{k}");
                }
            }
        }
    }

    #[test]
    fn constant_edge_scorer_gives_constant_scores() {
        let g = cfg(2, 1);
        let mut params = zero_params(&mcfg(g));
        params.graph.edge.b.data[0] = 0.7;
        let (frames, parts) = zero_features(&g);
        let tape = Tape::new();
        let vars = crate::params::bind(&tape, &params);
        let nodes = build_nodes(&tape, &frames, &parts, &vars.graph, &g).unwrap();
        let lists = neighbor_rule(&g);
        let scores = edge_scores(&tape, &nodes, &lists, &vars.graph.edge).unwrap();
        for per_node in scores {
            for s in per_node {
                assert_eq!(s.scalar(), 0.7);
            }
        }
    }

    #[test]
    fn edge_scores_are_direction_sensitive() {
        let g = cfg(2, 1);
        let params = init_params(&mcfg(g), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames: Vec<Vec<f64>> = (0..g.n_f)
            .map(|_| (0..g.d_f).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let parts: Vec<Vec<Vec<f64>>> = (0..g.n_f)
            .map(|_| {
                (0..g.n_p)
                    .map(|_| (0..g.d_p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let tape = Tape::new();
        let vars = crate::params::bind(&tape, &params);
        let nodes = build_nodes(&tape, &frames, &parts, &vars.graph, &g).unwrap();
        let e01 = vars
            .graph
            .edge
            .apply(tape.concat(&[nodes[0], nodes[1]]).unwrap())
            .unwrap();
        let e10 = vars
            .graph
            .edge
            .apply(tape.concat(&[nodes[1], nodes[0]]).unwrap())
            .unwrap();
        assert_ne!(e01.scalar(), e10.scalar());
    }

    #[test]
    fn edge_score_gradient_wrt_scorer() {
        let g = cfg(2, 1);
        let params = init_params(&mcfg(g), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<Vec<f64>> = (0..g.n_f)
            .map(|_| (0..g.d_f).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let parts: Vec<Vec<Vec<f64>>> = (0..g.n_f)
            .map(|_| {
                (0..g.n_p)
                    .map(|_| (0..g.d_p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let inputs = [params.graph.edge.w.clone(), params.graph.edge.b.clone()];
        let err = finite_diff_check(
            |tape, vars| {
                let bound = crate::params::bind(tape, &params);
                let edge = crate::params::LinearP {
                    w: vars[0],
                    b: vars[1],
                };
                let nodes = build_nodes(tape, &frames, &parts, &bound.graph, &g)
                    .map_err(|_| crate::autodiff::AdError::EmptyNeighbors)?;
                edge.apply(tape.concat(&[nodes[0], nodes[2]])?)?.mean_all()
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "edge scorer fd err {err}");
    }

    #[test]
    fn equal_order_rows_make_frames_interchangeable() {
        // with both order tables constant across frames, permuting frames
        // permutes node rows correspondingly
        let g = cfg(3, 2);
        let mut params = init_params(&mcfg(g), 6);
        for table in [&mut params.graph.order_part, &mut params.graph.order_frame] {
            let cols = table.shape[1];
            let first: Vec<f64> = table.data[..cols].to_vec();
            for r in 1..table.shape[0] {
                table.data[r * cols..(r + 1) * cols].copy_from_slice(&first);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames: Vec<Vec<f64>> = (0..g.n_f)
            .map(|_| (0..g.d_f).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let parts: Vec<Vec<Vec<f64>>> = (0..g.n_f)
            .map(|_| {
                (0..g.n_p)
                    .map(|_| (0..g.d_p).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let perm = [2usize, 0, 1];
        let frames_p: Vec<Vec<f64>> = perm.iter().map(|&i| frames[i].clone()).collect();
        let parts_p: Vec<Vec<Vec<f64>>> = perm.iter().map(|&i| parts[i].clone()).collect();

        let tape = Tape::new();
        let vars = crate::params::bind(&tape, &params);
        let a = build_nodes(&tape, &frames, &parts, &vars.graph, &g).unwrap();
        let b = build_nodes(&tape, &frames_p, &parts_p, &vars.graph, &g).unwrap();
        let stride = g.n_p + 1;
        for (new_f, &old_f) in perm.iter().enumerate() {
            for s in 0..stride {
                assert_eq!(
                    a[old_f * stride + s].data(),
                    b[new_f * stride + s].data()
                );
            }
        }
    }
}
