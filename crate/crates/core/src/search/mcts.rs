use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Action, PartitionPlan, SearchContext, SearchError, SearchState};
use crate::cost::{cost_report, reward};
use crate::spmd::{collective_stats, lower_state};
use crate::tiled::StateKey;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MctsStats {
    pub episodes: usize,
    pub nodes: usize,
    pub root_actions: usize,
    /// Episode at which the returned plan was first reached.
    pub best_episode: usize,
    /// Every improvement of the best plan, in order.
    pub improvements: Vec<Improvement>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Improvement {
    pub episode: usize,
    pub reward: f64,
    /// Reward without the decision-count penalty.
    pub cost_reward: f64,
}

struct Node {
    state: SearchState,
    /// `(ordinal, node)`: position of the action in this node's legal list
    /// and the node it leads to. Nodes may be shared between parents.
    children: Vec<(usize, usize)>,
    /// Legal actions not yet expanded, with their ordinals.
    untried: Vec<(usize, Action)>,
    visits: u32,
    total: f64,
    /// Best reward seen below this node.
    best: f64,
}

impl Node {
    fn new(ctx: &SearchContext, state: SearchState) -> Self {
        let untried = ctx.legal_actions(&state).into_iter().enumerate().collect();
        Node { state, children: Vec::new(), untried, visits: 0, total: 0.0, best: 0.0 }
    }
}

/// UCT child selection. Rewards are deterministic and only the best plan is
/// returned, so a child's value is the best reward seen below it, rescaled
/// to `(lo, hi)` (replicated reward, best so far). Ties go to the lowest
/// ordinal.
fn select(arena: &[Node], node: usize, c: f64, (lo, hi): (f64, f64)) -> usize {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let parent = &arena[node];
    let ln_n = (parent.visits.max(1) as f64).ln();
    let mut best = parent.children[0].1;
    let mut best_score = f64::NEG_INFINITY;
    for &(_, ch) in &parent.children {
        let n = &arena[ch];
        let score =
            if n.visits == 0 { f64::INFINITY } else { (n.best - lo) / span + c * (ln_n / n.visits as f64).sqrt() };
        if score > best_score {
            best_score = score;
            best = ch;
        }
    }
    best
}

/// Uniform random playout; stopping is twice as likely once a decision has
/// been made. Since stopping is always legal, the playout is worth its best
/// prefix: returns that prefix (stopped) and its reward.
fn rollout(ctx: &SearchContext, mut st: SearchState, rng: &mut ChaCha8Rng) -> Result<(f64, SearchState), SearchError> {
    let mut best: Option<(f64, SearchState)> = None;
    loop {
        let stopped = if st.terminal { st.clone() } else { ctx.apply(&st, &Action::Stop)? };
        let r = ctx.reward(&stopped);
        if best.as_ref().is_none_or(|(b, _)| r > *b) {
            best = Some((r, stopped));
        }
        if st.terminal {
            break;
        }
        let acts = ctx.legal_actions(&st);
        let weights: Vec<u32> =
            acts.iter().map(|a| if *a == Action::Stop && st.decisions() > 0 { 2 } else { 1 }).collect();
        let i = WeightedIndex::new(&weights).expect("stop is always legal").sample(rng);
        st = ctx.apply(&st, &acts[i])?;
    }
    Ok(best.expect("at least one state visited"))
}

/// Monte Carlo tree search over partitioning decisions. Returns the best
/// terminal state seen across all episodes (first found wins ties).
pub fn mcts_search(ctx: &SearchContext) -> Result<(PartitionPlan, MctsStats), SearchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let mut arena = vec![Node::new(ctx, ctx.initial())];
    // Different orders of the same decisions meet in one node.
    let mut table: HashMap<(StateKey, usize, bool), usize> = HashMap::new();
    let mut stats = MctsStats { root_actions: arena[0].untried.len(), ..Default::default() };

    let stop_root = ctx.apply(&ctx.initial(), &Action::Stop)?;
    let mut best = (ctx.reward(&stop_root), stop_root, 0usize);
    let mut range = (best.0, best.0);

    for episode in 0..ctx.cfg.episodes {
        let mut path = vec![0usize];
        let mut node = 0usize;
        // Progressive widening: a node with N visits keeps at most
        // ceil(sqrt(N)) children before further actions are tried.
        let widen =
            |n: &Node| !n.untried.is_empty() && (n.children.len() as f64) < (n.visits as f64).sqrt().ceil().max(1.0);
        while !arena[node].state.terminal && !widen(&arena[node]) && !arena[node].children.is_empty() {
            node = select(&arena, node, ctx.cfg.uct_c, range);
            path.push(node);
        }
        if !arena[node].state.terminal && !arena[node].untried.is_empty() {
            let n = arena[node].untried.len();
            let (ord, action) = arena[node].untried.remove(rng.gen_range(0..n));
            let next = ctx.apply(&arena[node].state, &action)?;
            let key = (next.tiling.key(), next.decisions(), next.terminal);
            let id = match table.get(&key) {
                Some(&id) => id,
                None => {
                    arena.push(Node::new(ctx, next));
                    table.insert(key, arena.len() - 1);
                    arena.len() - 1
                }
            };
            // Children stay sorted by ordinal so UCT ties pick the lowest.
            let at = arena[node].children.iter().position(|&(o, _)| o > ord).unwrap_or(arena[node].children.len());
            arena[node].children.insert(at, (ord, id));
            node = id;
            path.push(node);
        }
        let (r, terminal) = rollout(ctx, arena[node].state.clone(), &mut rng)?;
        range.1 = range.1.max(r);
        if r > best.0 {
            let cost_reward = reward(&ctx.report(&terminal.tiling), &ctx.cfg.cost, 0, ctx.baseline_bytes);
            stats.improvements.push(Improvement { episode: episode + 1, reward: r, cost_reward });
            best = (r, terminal, episode + 1);
        }
        for &i in &path {
            arena[i].visits += 1;
            arena[i].total += r;
            arena[i].best = arena[i].best.max(r);
        }
        stats.episodes = episode + 1;
    }
    stats.nodes = arena.len();
    stats.best_episode = best.2;
    let (reward, st, _) = best;
    Ok((plan_from_state(ctx, &st, reward), stats))
}

pub(crate) fn plan_from_state(ctx: &SearchContext, st: &SearchState, reward: f64) -> PartitionPlan {
    let sp = lower_state(&st.tiling);
    PartitionPlan {
        program: ctx.base.base().name.clone(),
        seed: ctx.cfg.seed,
        episodes: ctx.cfg.episodes,
        infer_every_step: ctx.cfg.infer_every_step,
        relative_budget: ctx.cfg.relative_budget,
        actions: st.actions.clone(),
        args: st.tiling.arg_specs(),
        output: st.tiling.output_spec(),
        cost: cost_report(&sp, &ctx.cfg.cost),
        collectives: collective_stats(&sp),
        reward,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::SearchConfig;

    /// Two-arm bandit: the better arm must collect most visits with c = 0.
    #[test]
    fn greedy_uct_prefers_dominating_arm() {
        let mut arena = Vec::new();
        let ctx = SearchContext::new(&crate::modelgen::linear(), SearchConfig::default(), None).unwrap();
        let mk = |visits, total| Node {
            state: ctx.initial(),
            children: vec![],
            untried: vec![],
            visits,
            total,
            best: total / visits as f64,
        };
        arena.push(mk(2, 1.0));
        arena.push(mk(1, 0.9));
        arena.push(mk(1, 0.1));
        arena[0].children = vec![(0, 1), (1, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let ch = select(&arena, 0, 0.0, (0.0, 1.0));
            let r = if ch == 1 { 0.9 } else { 0.1 } + rng.gen_range(-0.05..0.05);
            arena[ch].visits += 1;
            arena[ch].total += r;
            arena[ch].best = arena[ch].best.max(r);
            arena[0].visits += 1;
        }
        assert!(arena[1].visits > 40);
    }

    #[test]
    fn ties_break_to_lowest_ordinal() {
        let ctx = SearchContext::new(&crate::modelgen::linear(), SearchConfig::default(), None).unwrap();
        let mk = || Node { state: ctx.initial(), children: vec![], untried: vec![], visits: 1, total: 0.5, best: 0.5 };
        let mut arena = vec![mk(), mk(), mk()];
        arena[0].children = vec![(0, 1), (1, 2)];
        assert_eq!(select(&arena, 0, 1.0, (0.0, 1.0)), 1);
    }

    #[test]
    fn linear_search_beats_replicated_and_is_deterministic() {
        let cfg = SearchConfig { episodes: 50, seed: 7, ..Default::default() };
        let ctx = SearchContext::new(&crate::modelgen::linear(), cfg.clone(), None).unwrap();
        let (plan, stats) = mcts_search(&ctx).unwrap();
        let replicated = ctx.reward(&ctx.apply(&ctx.initial(), &Action::Stop).unwrap());
        assert!(plan.reward > replicated, "{} vs {}", plan.reward, replicated);
        assert_eq!(stats.episodes, 50);
        let ctx2 = SearchContext::new(&crate::modelgen::linear(), cfg, None).unwrap();
        let (again, _) = mcts_search(&ctx2).unwrap();
        assert_eq!(again.actions, plan.actions);
        assert_eq!(again.reward, plan.reward);
    }
}
