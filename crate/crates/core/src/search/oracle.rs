//! Brute-force enumeration of grouped argument shardings, used to check
//! search results and to label ranker training data.

use serde::Serialize;

use super::Group;
use crate::cost::{memory_and_comm, reward, CostParams, CostReport};
use crate::propagation::{infer_rest_state, propagate_state};
use crate::spmd::{collective_stats, lower_state, CollectiveStats};
use crate::tiled::TilingState;

/// Per group: `None` (left replicated) or `(dim, axis)`.
pub type Assignment = Vec<Option<(usize, usize)>>;

#[derive(Clone, Debug, Serialize)]
pub struct OracleEntry {
    pub assignment: Assignment,
    /// Memory and communication only (see `memory_and_comm`).
    pub cost: CostReport,
    pub collectives: CollectiveStats,
    /// Number of groups given a tiling; the search would need as many steps.
    pub steps: usize,
    pub reward: f64,
}

/// Options per group on the untouched program.
pub fn group_options(base: &TilingState, groups: &[Group], axes: &[usize]) -> Vec<Vec<Option<(usize, usize)>>> {
    groups
        .iter()
        .map(|g| {
            let rank = base.info().types[g.members[0]].rank();
            let mut opts = vec![None];
            for d in 0..rank {
                for &a in axes {
                    if g.members.iter().all(|&v| base.tile_blocker(v, d, a).is_none()) {
                        opts.push(Some((d, a)));
                    }
                }
            }
            opts
        })
        .collect()
}

/// Full cartesian product of the options, first group varying slowest.
pub fn all_assignments(options: &[Vec<Option<(usize, usize)>>]) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = vec![Vec::new()];
    for opts in options {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                opts.iter().map(move |o| {
                    let mut next = prefix.clone();
                    next.push(*o);
                    next
                })
            })
            .collect();
    }
    out
}

/// Applies the assignment (all tiles at once, then propagation, then
/// `infer_rest` if `infer`). Returns `None` if two choices conflict.
pub fn evaluate(
    base: &TilingState,
    groups: &[Group],
    assignment: &Assignment,
    cp: &CostParams,
    baseline_bytes: u64,
    infer: bool,
) -> Option<OracleEntry> {
    let mut s = base.clone();
    for (g, choice) in groups.iter().zip(assignment) {
        if let Some((d, a)) = *choice {
            for &v in &g.members {
                s.tile(v, d, a).ok()?;
            }
        }
    }
    if infer {
        infer_rest_state(&mut s);
    } else {
        propagate_state(&mut s);
    }
    let sp = lower_state(&s);
    let cost = memory_and_comm(&sp, cp);
    let steps = assignment.iter().filter(|c| c.is_some()).count();
    let reward = reward(&cost, cp, steps, baseline_bytes);
    Some(OracleEntry { assignment: assignment.clone(), collectives: collective_stats(&sp), cost, steps, reward })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgen::linear;
    use crate::search::{SearchConfig, SearchContext};

    #[test]
    fn linear_enumeration() {
        let ctx = SearchContext::new(&linear(), SearchConfig::default(), None).unwrap();
        let groups = ctx.worklist(&ctx.base);
        let opts = group_options(&ctx.base, &groups, &ctx.axes);
        assert_eq!(opts.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3]);
        let all = all_assignments(&opts);
        assert_eq!(all.len(), 27);
        let entries: Vec<_> = all
            .iter()
            .filter_map(|a| evaluate(&ctx.base, &groups, a, &ctx.cfg.cost, ctx.baseline_bytes, false))
            .collect();
        assert_eq!(entries.len(), 27);
        // Column-sharded w with b to match: no communication at all.
        let golden = entries.iter().find(|e| e.assignment == [None, Some((1, 0)), Some((1, 0))]).unwrap();
        assert_eq!(golden.collectives.collectives(), 0);
        assert!(golden.cost.peak_memory_bytes < entries[0].cost.peak_memory_bytes);
    }
}
