//! Automated partitioning: worklist, grouping, actions and MCTS.

mod mcts;
pub mod oracle;
mod plan;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cost::{memory_and_comm, peak_liveness, reward, CostParams, CostReport};
use crate::ir::{Program, ValueId};
use crate::propagation::{infer_rest_state, propagate_state, stuck_ops};
use crate::ranker::{featurize, score_and_filter, RankerModel};
use crate::spmd::lower_state;
use crate::tiled::{TilingError, TilingState};

pub use mcts::{mcts_search, Improvement, MctsStats};
pub use plan::{emit_plan, is_megatron_like, parse_plan, replay, replay_state, PartitionPlan, PlanError, PlanFile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Mesh axes the search may tile over; empty means all.
    pub auto_axes: Vec<String>,
    pub episodes: usize,
    pub max_decisions: usize,
    pub uct_c: f64,
    pub seed: u64,
    pub top_k: usize,
    pub group_scopes: bool,
    pub use_ranker: bool,
    /// Run `infer_rest` after every tiling action instead of exposing it.
    pub infer_every_step: bool,
    /// Use the replicated plan's peak memory as the budget, ignoring
    /// `cost.memory_budget_bytes`.
    pub relative_budget: bool,
    pub cost: CostParams,
}

/// Reward weights used by search: memory dominates so that fully sharded
/// parameters win, and a small per-collective latency breaks ties between
/// plans moving the same bytes in more collectives.
pub fn search_cost_params() -> CostParams {
    CostParams { w_mem: 2.0, per_collective_latency_seconds: 1e-9, ..CostParams::default() }
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            auto_axes: Vec::new(),
            episodes: 100,
            max_decisions: 32,
            uct_c: 1.414,
            seed: 0,
            top_k: 25,
            group_scopes: true,
            use_ranker: false,
            infer_every_step: false,
            relative_budget: true,
            cost: search_cost_params(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error("axis \"{0}\" is not declared in the mesh")]
    UnknownAxis(String),
    #[error("illegal action {0}")]
    IllegalAction(String),
    #[error("ranker: {0}")]
    Ranker(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Tile every listed value on `dim` over `axis`.
    Tile {
        values: Vec<ValueId>,
        dim: usize,
        axis: String,
    },
    InferRest,
    Stop,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Tile { values, dim, axis } => {
                let vs: Vec<String> = values.iter().map(|v| format!("%{}", v)).collect();
                write!(f, "tile({}, dim={}, \"{}\")", vs.join(","), dim, axis)
            }
            Action::InferRest => f.write_str("infer_rest"),
            Action::Stop => f.write_str("stop"),
        }
    }
}

/// Scope key shared by repeated layers: digit-only path segments are
/// dropped and `_<digits>` suffixes stripped.
pub fn normalize_scope(scope: &str) -> String {
    scope
        .split('/')
        .filter(|seg| !seg.is_empty() && !seg.bytes().all(|b| b.is_ascii_digit()))
        .map(|seg| match seg.rfind('_') {
            Some(i) if i + 1 < seg.len() && seg[i + 1..].bytes().all(|b| b.is_ascii_digit()) => &seg[..i],
            _ => seg,
        })
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Group {
    pub key: String,
    pub members: Vec<usize>,
}

/// Problem-wide data shared by every search state.
pub struct SearchContext {
    pub base: TilingState,
    pub axes: Vec<usize>,
    pub cfg: SearchConfig,
    /// Arguments eligible for the worklist (ranker filter), by value index.
    pub arg_filter: Option<BTreeSet<usize>>,
    pub baseline_bytes: u64,
    memo: std::cell::RefCell<HashMap<crate::tiled::StateKey, CostReport>>,
}

impl SearchContext {
    pub fn new(p: &Program, mut cfg: SearchConfig, arg_filter: Option<BTreeSet<ValueId>>) -> Result<Self, SearchError> {
        // A loop-form input starts the search from its existing tiling.
        let base = TilingState::from_program(p)?;
        let axes = if cfg.auto_axes.is_empty() {
            (0..p.mesh.axes().len()).collect()
        } else {
            cfg.auto_axes
                .iter()
                .map(|a| p.mesh.axis_index(a).ok_or_else(|| SearchError::UnknownAxis(a.clone())))
                .collect::<Result<_, _>>()?
        };
        let arg_filter = arg_filter.map(|ids| ids.iter().filter_map(|id| base.info().index.get(id).copied()).collect());
        let baseline_bytes = peak_liveness(&lower_state(&TilingState::from_info(base.info().clone())));
        if cfg.relative_budget {
            cfg.cost.memory_budget_bytes = baseline_bytes.max(1) as f64;
        }
        Ok(SearchContext { base, axes, cfg, arg_filter, baseline_bytes, memo: Default::default() })
    }

    fn group_key(&self, s: &TilingState, v: usize) -> String {
        let info = s.info();
        match (self.cfg.group_scopes, info.scope(v)) {
            (true, Some(scope)) => {
                let kind = info.producer(v).map_or("arg", |op| s.kind_of(op).name());
                format!("{}#{}#{:?}", normalize_scope(scope), kind, info.types[v].shape)
            }
            _ => info.ids[v].clone(),
        }
    }

    /// Undecided on some axis: not tiled, not atomic, and no consumer
    /// already loops over the axis (which would slice or replicate it).
    fn open_on_some_axis(&self, s: &TilingState, v: usize) -> bool {
        let info = s.info();
        self.axes.iter().any(|&a| {
            !s.is_tiled_on(v, a)
                && !s.is_atomic(v, a)
                && info.uses[v].iter().all(|&(op, _)| s.nest_axis(op, a).is_none())
        })
    }

    /// Candidate values grouped by scope: open arguments in argument order,
    /// then results of stuck ops in discovery order.
    pub fn worklist(&self, s: &TilingState) -> Vec<Group> {
        let info = s.info();
        let mut order: Vec<usize> = (0..info.num_args)
            .filter(|&v| self.arg_filter.as_ref().is_none_or(|f| f.contains(&v)))
            .filter(|&v| !s.is_tiled(v) && self.open_on_some_axis(s, v))
            .collect();
        for st in stuck_ops(s) {
            let v = info.index[&st.op];
            if !order.contains(&v) && self.open_on_some_axis(s, v) {
                order.push(v);
            }
        }
        let mut groups: Vec<Group> = Vec::new();
        let mut by_key: HashMap<String, usize> = HashMap::new();
        for v in order {
            let key = self.group_key(s, v);
            match by_key.get(&key) {
                Some(&g) => groups[g].members.push(v),
                None => {
                    by_key.insert(key.clone(), groups.len());
                    groups.push(Group { key, members: vec![v] });
                }
            }
        }
        groups
    }

    pub fn legal_actions(&self, st: &SearchState) -> Vec<Action> {
        if st.terminal {
            return Vec::new();
        }
        let s = &st.tiling;
        let info = s.info();
        let mut out = Vec::new();
        if st.decisions() < self.cfg.max_decisions {
            for g in self.worklist(s) {
                let rank = info.types[g.members[0]].rank();
                for d in 0..rank {
                    for &a in &self.axes {
                        if g.members.iter().all(|&v| s.tile_blocker(v, d, a).is_none()) {
                            out.push(Action::Tile {
                                values: g.members.iter().map(|&v| info.ids[v].clone()).collect(),
                                dim: d,
                                axis: info.axis_name(a).to_string(),
                            });
                        }
                    }
                }
            }
            let any_untiled = (0..info.num_args).any(|v| !s.is_tiled(v));
            if !self.cfg.infer_every_step && any_untiled && st.actions.last() != Some(&Action::InferRest) {
                out.push(Action::InferRest);
            }
        }
        out.push(Action::Stop);
        out
    }

    pub fn apply(&self, st: &SearchState, a: &Action) -> Result<SearchState, SearchError> {
        let mut next = st.clone();
        apply_action(&mut next, a, self.cfg.infer_every_step)?;
        if next.decisions() >= self.cfg.max_decisions {
            next.terminal = true;
        }
        Ok(next)
    }

    /// Memory and communication of `s` (no flop count), memoized.
    pub fn report(&self, s: &TilingState) -> CostReport {
        let key = s.key();
        if let Some(r) = self.memo.borrow().get(&key) {
            return r.clone();
        }
        let r = memory_and_comm(&lower_state(s), &self.cfg.cost);
        self.memo.borrow_mut().insert(key, r.clone());
        r
    }

    pub fn reward(&self, st: &SearchState) -> f64 {
        reward(&self.report(&st.tiling), &self.cfg.cost, st.decisions(), self.baseline_bytes)
    }

    pub fn initial(&self) -> SearchState {
        SearchState { tiling: self.base.clone(), actions: Vec::new(), terminal: false }
    }
}

#[derive(Clone, Debug)]
pub struct SearchState {
    pub tiling: TilingState,
    pub actions: Vec<Action>,
    pub terminal: bool,
}

impl SearchState {
    /// Decisions taken, not counting the final stop.
    pub fn decisions(&self) -> usize {
        self.actions.iter().filter(|a| **a != Action::Stop).count()
    }
}

/// Applies one action in place, propagating its consequences.
pub fn apply_action(st: &mut SearchState, a: &Action, infer_every_step: bool) -> Result<(), SearchError> {
    match a {
        Action::Tile { values, dim, axis } => {
            let info = st.tiling.info().clone();
            let ax = info.axis(axis).map_err(|_| SearchError::UnknownAxis(axis.clone()))?;
            for v in values {
                let v = info.value(v)?;
                st.tiling.tile(v, *dim, ax).map_err(|e| SearchError::IllegalAction(format!("{}: {}", a, e)))?;
            }
            if infer_every_step {
                infer_rest_state(&mut st.tiling);
            } else {
                propagate_state(&mut st.tiling);
            }
        }
        Action::InferRest => {
            infer_rest_state(&mut st.tiling);
        }
        Action::Stop => st.terminal = true,
    }
    st.actions.push(a.clone());
    Ok(())
}

/// Runs the search, restricting the argument worklist to the model's
/// top-k when a ranker is given.
pub fn search_program(
    p: &Program,
    cfg: &SearchConfig,
    ranker: Option<&RankerModel>,
) -> Result<(PartitionPlan, MctsStats), SearchError> {
    let filter = match ranker {
        Some(m) => {
            let g = featurize(p)?;
            m.check_width(&g).map_err(|e| SearchError::Ranker(e.to_string()))?;
            Some(score_and_filter(&g, m, cfg.top_k).into_iter().map(|(id, _)| id).collect())
        }
        None => None,
    };
    let ctx = SearchContext::new(p, cfg.clone(), filter)?;
    mcts_search(&ctx)
}
