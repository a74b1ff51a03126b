use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::mcts::plan_from_state;
use super::{apply_action, Action, SearchConfig, SearchContext, SearchError};
use crate::cost::{CostParams, CostReport};
use crate::ir::{Program, ValueId};
use crate::mesh::ShardingSpec;
use crate::spmd::CollectiveStats;
use crate::tiled::TilingState;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("malformed plan: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("replay diverged: argument %{value} is {got:?}, plan records {want:?}")]
    Diverged { value: ValueId, got: Vec<Option<String>>, want: Vec<Option<String>> },
}

/// Outcome of a search: the decisions taken and what they cost.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub program: String,
    pub seed: u64,
    pub episodes: usize,
    pub infer_every_step: bool,
    pub relative_budget: bool,
    pub actions: Vec<Action>,
    pub args: Vec<(ValueId, ShardingSpec)>,
    pub output: ShardingSpec,
    pub cost: CostReport,
    pub collectives: CollectiveStats,
    pub reward: f64,
}

impl PartitionPlan {
    pub fn decisions(&self) -> usize {
        self.actions.iter().filter(|a| **a != Action::Stop).count()
    }
}

fn dims_json(s: &ShardingSpec) -> Value {
    json!({ "dims": s.dims })
}

/// Pretty JSON with a stable key order.
pub fn emit_plan(plan: &PartitionPlan) -> String {
    let mut args = Map::new();
    for (id, spec) in &plan.args {
        args.insert(id.clone(), dims_json(spec));
    }
    let v = json!({
        "program": plan.program,
        "args": args,
        "output": dims_json(&plan.output),
        "actions": plan.actions,
        "infer_every_step": plan.infer_every_step,
        "relative_budget": plan.relative_budget,
        "cost": plan.cost,
        "collectives": plan.collectives,
        "reward": plan.reward,
        "seed": plan.seed,
        "episodes": plan.episodes,
    });
    serde_json::to_string_pretty(&v).expect("plan serializes") + "\n"
}

#[derive(Deserialize)]
struct Recorded {
    dims: Vec<Option<String>>,
}

#[derive(Deserialize)]
pub struct PlanFile {
    #[serde(default)]
    pub actions: Vec<Action>,
    #[serde(default)]
    pub infer_every_step: bool,
    #[serde(default = "yes")]
    pub relative_budget: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub episodes: usize,
    #[serde(default)]
    args: serde_json::Map<String, Value>,
}

fn yes() -> bool {
    true
}

pub fn parse_plan(text: &str) -> Result<PlanFile, PlanError> {
    Ok(serde_json::from_str(text)?)
}

/// Re-applies a plan's actions to `p` and checks the resulting argument
/// shardings against those recorded in the plan.
pub fn replay(p: &Program, text: &str, cost: &CostParams) -> Result<PartitionPlan, PlanError> {
    replay_state(p, text, cost).map(|(plan, _)| plan)
}

/// As [`replay`], also returning the final tiling state.
pub fn replay_state(p: &Program, text: &str, cost: &CostParams) -> Result<(PartitionPlan, TilingState), PlanError> {
    let file = parse_plan(text)?;
    let cfg = SearchConfig {
        relative_budget: file.relative_budget,
        seed: file.seed,
        episodes: file.episodes,
        infer_every_step: file.infer_every_step,
        cost: cost.clone(),
        ..Default::default()
    };
    let ctx = SearchContext::new(p, cfg, None)?;
    let mut st = ctx.initial();
    for a in &file.actions {
        apply_action(&mut st, a, file.infer_every_step)?;
    }
    let plan = plan_from_state(&ctx, &st, ctx.reward(&st));
    for (id, spec) in &plan.args {
        if let Some(rec) = file.args.get(id) {
            let rec: Recorded = serde_json::from_value(rec.clone())?;
            if rec.dims != spec.dims {
                return Err(PlanError::Diverged { value: id.clone(), got: spec.dims.clone(), want: rec.dims });
            }
        }
    }
    Ok((plan, st.tiling))
}

/// Megatron-style outcome: every parameter is tiled and no all_gather is
/// needed. Parameters are the arguments not scoped `input` (without scopes,
/// all but the first argument).
pub fn is_megatron_like(p: &Program, plan: &PartitionPlan) -> bool {
    let scoped = p.args.iter().any(|a| a.scope.is_some());
    let params =
        p.args.iter().enumerate().filter(|(i, a)| if scoped { a.scope.as_deref() != Some("input") } else { *i > 0 });
    let tiled = |id: &str| plan.args.iter().any(|(v, s)| v == id && s.dims.iter().any(Option::is_some));
    plan.collectives.all_gather == 0 && params.clone().count() > 0 && params.into_iter().all(|(_, a)| tiled(&a.id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgen::linear;
    use crate::search::mcts_search;

    #[test]
    fn emit_and_replay_round_trip() {
        let ctx = SearchContext::new(&linear(), SearchConfig { episodes: 30, ..Default::default() }, None).unwrap();
        let (plan, _) = mcts_search(&ctx).unwrap();
        let text = emit_plan(&plan);
        let v: Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys[..3], ["program", "args", "output"]);
        let again = replay(&linear(), &text, &ctx.cfg.cost).unwrap();
        assert_eq!(again, plan);
    }

    #[test]
    fn golden_action_json() {
        let a = Action::Tile { values: vec!["w".into()], dim: 1, axis: "shard".into() };
        let s = serde_json::to_string(&vec![a, Action::InferRest, Action::Stop]).unwrap();
        assert_eq!(s, r#"[{"tile":{"values":["w"],"dim":1,"axis":"shard"}},"infer_rest","stop"]"#);
    }

    #[test]
    fn tampered_plan_is_rejected() {
        let text = r#"{"args": {"w": {"dims": [null, "shard"]}}, "actions": ["stop"]}"#;
        let err = replay(&linear(), text, &CostParams::default()).unwrap_err();
        assert!(matches!(err, PlanError::Diverged { .. }), "{err}");
        let bad = r#"{"actions": [{"tile": {"values": ["x"], "dim": 7, "axis": "shard"}}]}"#;
        assert!(matches!(replay(&linear(), bad, &CostParams::default()), Err(PlanError::Search(_))));
    }
}
