//! Learned relevance filter over program arguments: graph featurisation, a
//! small message-passing scorer, dataset generation and training.

mod data;
mod model;

use std::collections::HashMap;

use serde::Serialize;

use crate::ir::{Program, ValueId};
use crate::tiled::{TilingError, TilingState};

pub use data::{generate_dataset, label_program, sample_variant, TrainingExample};
pub use model::{ranking_loss, train, RankerError, RankerModel, TrainConfig, TrainReport};

/// One-hot width for node kinds: 18 op kinds, one slot for arguments, and
/// spare slots that unknown kinds hash into.
pub const KIND_SLOTS: usize = 24;
const ARG_SLOT: usize = 18;
const MAX_RANK: usize = 4;

/// Feature width for a mesh with `axes` axes.
pub fn feature_width(axes: usize) -> usize {
    KIND_SLOTS + MAX_RANK + 1 + axes
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphEncoding {
    /// Row-major `[num_nodes, width]`; arguments first, then ops.
    pub features: Vec<f64>,
    pub width: usize,
    /// Undirected neighbour lists (dataflow and scope-sibling links).
    pub neighbors: Vec<Vec<usize>>,
    /// Candidate nodes (the arguments), by node index.
    pub candidates: Vec<usize>,
    pub ids: Vec<ValueId>,
}

impl GraphEncoding {
    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

/// Encodes a (possibly already tiled) program.
pub fn featurize(p: &Program) -> Result<GraphEncoding, TilingError> {
    Ok(featurize_state(&TilingState::from_program(p)?))
}

pub fn featurize_state(s: &TilingState) -> GraphEncoding {
    let info = s.info();
    let axes = info.mesh().axes().len();
    let width = feature_width(axes);
    let n = info.num_values();
    let mut features = vec![0.0; n * width];
    for v in 0..n {
        let row = &mut features[v * width..(v + 1) * width];
        let slot = match info.producer(v) {
            Some(op) => s.kind_of(op).ordinal() % KIND_SLOTS,
            None => ARG_SLOT,
        };
        row[slot] = 1.0;
        let shape = &info.types[v].shape;
        for (i, &d) in shape.iter().take(MAX_RANK).enumerate() {
            row[KIND_SLOTS + i] = (d as f64).ln_1p() / 8.0;
        }
        row[KIND_SLOTS + MAX_RANK] = shape.len() as f64 / MAX_RANK as f64;
        for a in 0..axes {
            if s.is_tiled_on(v, a) {
                row[KIND_SLOTS + MAX_RANK + 1 + a] = 1.0;
            }
        }
    }

    let mut neighbors = vec![Vec::new(); n];
    let mut link = |a: usize, b: usize| {
        if a != b && !neighbors[a].contains(&b) {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
    };
    for (k, op) in info.ops.iter().enumerate() {
        for &o in &op.operands {
            link(o, info.op_value(k));
        }
    }
    // Scope siblings: chain the values of each scope in program order.
    let mut last_in_scope: HashMap<&str, usize> = HashMap::new();
    for v in 0..n {
        if let Some(scope) = info.scope(v) {
            if let Some(prev) = last_in_scope.insert(scope, v) {
                link(prev, v);
            }
        }
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
    }
    GraphEncoding { features, width, neighbors, candidates: (0..info.num_args).collect(), ids: info.ids.clone() }
}

/// Scores every candidate and keeps the `k` best (ties by node order).
pub fn score_and_filter(g: &GraphEncoding, m: &RankerModel, k: usize) -> Vec<(ValueId, f64)> {
    let scores = m.scores(g);
    let mut ranked: Vec<(usize, f64)> = g.candidates.iter().map(|&c| (c, scores[c])).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k.max(1));
    ranked.into_iter().map(|(c, s)| (g.ids[c].clone(), s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgen::linear;
    use crate::tiled::apply_tile_action;

    #[test]
    fn linear_graph() {
        let g = featurize(&linear()).unwrap();
        assert_eq!(g.num_nodes(), 5);
        assert_eq!(g.candidates, [0, 1, 2]);
        // x, w -> y; y, b -> z
        assert_eq!(g.neighbors[3], [0, 1, 4]);
        assert_eq!(g.neighbors[4], [2, 3]);
        assert_eq!(g.row(0)[ARG_SLOT], 1.0);
        assert_eq!(g.row(3)[10], 1.0);
    }

    #[test]
    fn tiling_sets_indicator() {
        let p = apply_tile_action(&linear(), "w", 1, "shard").unwrap();
        let g = featurize(&p).unwrap();
        let ind = KIND_SLOTS + MAX_RANK + 1;
        assert_eq!(g.row(1)[ind], 1.0);
        assert_eq!(g.row(0)[ind], 0.0);
        assert_eq!(featurize(&linear()).unwrap().row(1)[ind], 0.0);
    }

    #[test]
    fn filter_orders_and_truncates() {
        let g = featurize(&linear()).unwrap();
        let m = RankerModel::init(g.width, 8, 3);
        let all = score_and_filter(&g, &m, 10);
        assert_eq!(all.len(), 3);
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        assert_eq!(score_and_filter(&g, &m, 1), all[..1]);
    }
}
