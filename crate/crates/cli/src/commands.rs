use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use partir_core::cost::CostParams;
use partir_core::interp::{check_equivalence, check_equivalence_on, EquivReport};
use partir_core::ir::{parse_program, print_program, Program};
use partir_core::mesh::Mesh;
use partir_core::modelgen::{build_mlp, build_transformer, linear, random_program, MlpConfig, TransformerConfig};
use partir_core::propagation::{infer_rest_state, propagate_state};
use partir_core::ranker::{featurize, generate_dataset, score_and_filter, train, RankerModel, TrainConfig};
use partir_core::search::{
    emit_plan, is_megatron_like, replay_state, search_cost_params, search_program, PartitionPlan, SearchConfig,
};
use partir_core::spmd::{collective_stats, lower_state, print_spmd};
use partir_core::tensor::DenseTensor;
use partir_core::tiled::TilingState;

use crate::{
    CostArgs, GenArgs, InputArgs, Internal, LowerArgs, ModelKind, PlannedArgs, PropagateArgs, ReplayArgs, ScoreArgs,
    SearchArgs, TrainArgs, VerifyArgs,
};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes to `path`, or prints when no path is given.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_mesh(text: &str) -> Result<Vec<(String, usize)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').with_context(|| format!("mesh axis `{kv}` is not name=size"))?;
            let size = v.trim().parse().with_context(|| format!("mesh axis `{kv}` has a bad size"))?;
            Ok((k.trim().to_string(), size))
        })
        .collect()
}

fn load_program(a: &InputArgs) -> Result<Program> {
    let text = read(&a.input)?;
    let mut p = parse_program(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    if let Some(m) = &a.mesh {
        // Loop-form programs carry local shapes for the original mesh.
        if TilingState::from_program(&p)?.base() != &p {
            bail!("--mesh needs an untiled program");
        }
        p.mesh = Mesh::new(parse_mesh(m)?)?;
        // Re-parse so the new mesh is validated against the program.
        p = parse_program(&print_program(&p)).context("program does not fit the new mesh")?;
    }
    Ok(p)
}

fn load_cost(a: &CostArgs) -> Result<CostParams> {
    let mut cp = match &a.cost_params {
        Some(path) => CostParams::load(path)?,
        None => search_cost_params(),
    };
    if let Some(b) = a.budget_bytes {
        cp.memory_budget_bytes = b as f64;
        cp.validate()?;
    }
    Ok(cp)
}

/// Replays `plan` (or the empty plan) on `p`. An explicit budget overrides
/// the plan's relative budget.
fn planned(p: &Program, plan: Option<&Path>, cost: &CostArgs) -> Result<(PartitionPlan, TilingState)> {
    let mut v: Value = match plan {
        Some(path) => serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => json!({}),
    };
    if cost.budget_bytes.is_some() {
        v["relative_budget"] = json!(false);
    }
    let cp = load_cost(cost)?;
    Ok(replay_state(p, &v.to_string(), &cp)?)
}

fn spec_lines(plan: &PartitionPlan) -> String {
    let mut s = String::new();
    for (id, spec) in &plan.args {
        let _ = writeln!(s, "  %{id}: {}", json!(spec.dims));
    }
    let _ = writeln!(s, "  result: {}", json!(plan.output.dims));
    s
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mesh = parse_mesh(&a.mesh)?;
    let p = match a.model {
        ModelKind::Linear => linear(),
        ModelKind::Random => random_program(a.seed, a.size),
        ModelKind::Transformer => build_transformer(&TransformerConfig {
            layers: a.layers,
            d_model: a.d_model,
            d_ff: a.d_ff,
            heads: a.heads,
            seq: a.seq,
            batch: a.batch,
            mlp_bias: a.mlp_bias,
            ln_gain: a.ln_gain,
            mesh,
        })?,
        ModelKind::Mlp => build_mlp(&MlpConfig { widths: a.widths.clone(), batch: a.batch, grads: a.grads, mesh })?,
    };
    emit(a.out.as_deref(), &print_program(&p))?;
    if a.out.is_some() {
        println!("{}: {} args, {} ops, seed {}", p.name, p.args.len(), p.num_ops(), a.seed);
    }
    Ok(())
}

fn parse_tile(text: &str) -> Result<(String, usize, String)> {
    let parts: Vec<&str> = text.split(':').collect();
    let [v, d, ax] = parts[..] else { bail!("tile `{text}` is not value:dim:axis") };
    let dim = d.parse().with_context(|| format!("tile `{text}` has a bad dim"))?;
    Ok((v.trim_start_matches('%').to_string(), dim, ax.to_string()))
}

pub fn propagate(a: PropagateArgs) -> Result<()> {
    let p = load_program(&a.input)?;
    let mut s = TilingState::from_program(&p)?;
    for t in &a.tiles {
        let (v, dim, axis) = parse_tile(t)?;
        let (v, axis) = (s.info().value(&v)?, s.info().axis(&axis)?);
        s.tile(v, dim, axis)?;
    }
    for v in &a.atomic {
        let v = s.info().value(v.trim_start_matches('%'))?;
        let axes: Vec<usize> = (0..s.info().mesh().axes().len()).collect();
        s.wrap_atomic(v, &axes)?;
    }
    let stuck = if a.infer_rest { infer_rest_state(&mut s) } else { propagate_state(&mut s) };
    emit(a.out.as_deref(), &print_program(&s.materialize()))?;
    if a.out.is_some() {
        println!("stuck ops: {}", stuck.len());
        for n in &stuck {
            println!("  %{} on {}: {}", n.op, n.axis, n.reason);
        }
    }
    Ok(())
}

pub fn lower(a: LowerArgs) -> Result<()> {
    let p = load_program(&a.input)?;
    let (_, s) = planned(&p, a.plan.as_deref(), &CostArgs { cost_params: None, budget_bytes: None })?;
    let sp = lower_state(&s);
    emit(a.out.as_deref(), &print_spmd(&sp))?;
    if a.out.is_some() {
        print!("{}", collective_stats(&sp).table());
    }
    Ok(())
}

pub fn cost(a: PlannedArgs) -> Result<()> {
    let p = load_program(&a.input)?;
    let (plan, _) = planned(&p, a.plan.as_deref(), &a.cost)?;
    print!("{}", plan.cost.table());
    print!("{}", plan.collectives.table());
    if let Some(out) = &a.out {
        let v = json!({"cost": plan.cost, "collectives": plan.collectives, "reward": plan.reward});
        fs::write(out, serde_json::to_string_pretty(&v)? + "\n")?;
    }
    Ok(())
}

/// Reads consecutive tensors; every `n` of them form one input set.
fn read_input_sets(path: &Path, p: &Program) -> Result<Vec<Vec<DenseTensor>>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cur = Cursor::new(&bytes[..]);
    let mut tensors = Vec::new();
    while (cur.position() as usize) < bytes.len() {
        tensors.push(DenseTensor::read_from(&mut cur).context("malformed tensor file")?);
    }
    let n = p.args.len();
    if n == 0 || tensors.is_empty() || tensors.len() % n != 0 {
        bail!("{} tensors do not form sets of {n} arguments", tensors.len());
    }
    for set in tensors.chunks(n) {
        for (t, arg) in set.iter().zip(&p.args) {
            if t.shape != arg.ty.shape {
                bail!("tensor for %{} has shape {:?}, expected {:?}", arg.id, t.shape, arg.ty.shape);
            }
        }
    }
    Ok(tensors.chunks(n).map(<[_]>::to_vec).collect())
}

fn print_equiv(r: &EquivReport, seed: Option<u64>) {
    println!("verify: {}", if r.pass { "pass" } else { "FAIL" });
    println!("  trials: {}", r.trials);
    if let Some(seed) = seed {
        println!("  seed: {seed}");
    }
    println!("  exact: {}", r.exact);
    match r.tolerance {
        Some(t) => println!("  tolerance: {t:e} relative"),
        None => println!("  tolerance: none (bitwise)"),
    }
    println!("  max_abs_diff: {:e}", r.max_abs_diff);
    if let Some(d) = &r.first_divergence {
        println!("  first divergence: %{d}");
    }
    if let Some(e) = &r.error {
        println!("  error: {e}");
    }
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let p = load_program(&a.input)?;
    let (_, s) = planned(&p, a.plan.as_deref(), &CostArgs { cost_params: None, budget_bytes: None })?;
    let sp = lower_state(&s);
    // Compare against the untiled program.
    let base = s.base();
    let rep = match &a.inputs {
        Some(path) => {
            let sets = read_input_sets(path, base)?;
            let rep = check_equivalence_on(base, &sp, &sets);
            print_equiv(&rep, None);
            rep
        }
        None => {
            let rep = check_equivalence(base, &sp, a.trials, a.seed);
            print_equiv(&rep, Some(a.seed));
            rep
        }
    };
    if !rep.pass {
        bail!("SPMD program diverges from the reference");
    }
    Ok(())
}

fn search_config(a: &SearchArgs, seed: u64) -> Result<SearchConfig> {
    Ok(SearchConfig {
        auto_axes: a.auto_axes.clone(),
        episodes: a.episodes,
        max_decisions: a.max_decisions,
        uct_c: a.uct_c,
        seed,
        top_k: a.top_k,
        group_scopes: a.group_scopes,
        use_ranker: a.ranker.is_some() && !a.no_ranker,
        infer_every_step: a.infer_every_step,
        relative_budget: a.cost.budget_bytes.is_none(),
        cost: load_cost(&a.cost)?,
    })
}

fn load_ranker(path: &Path) -> Result<RankerModel> {
    RankerModel::from_text(&read(path)?).with_context(|| format!("loading ranker {}", path.display()))
}

pub fn search(a: SearchArgs) -> Result<()> {
    let p = load_program(&a.input)?;
    let ranker = match (&a.ranker, a.no_ranker) {
        (Some(path), false) => Some(load_ranker(path)?),
        _ => None,
    };
    if let Some(n) = a.repeat {
        let mut table = String::from("seed\tepisodes\tbest_reward\treduction_bytes\tmegatron_hit\n");
        for seed in a.seed..a.seed + n as u64 {
            let (plan, _) = search_program(&p, &search_config(&a, seed)?, ranker.as_ref())?;
            let _ = writeln!(
                table,
                "{seed}\t{}\t{:.6}\t{}\t{}",
                a.episodes,
                plan.reward,
                plan.cost.reduction_bytes,
                is_megatron_like(&p, &plan)
            );
        }
        print!("{table}");
        if let Some(out) = &a.out {
            fs::write(out, &table)?;
        }
        return Ok(());
    }

    let (plan, stats) = search_program(&p, &search_config(&a, a.seed)?, ranker.as_ref())?;
    let (_, s) = replay_state(&p, &emit_plan(&plan), &load_cost(&a.cost)?)?;
    if s.arg_specs() != plan.args {
        return Err(Internal("search plan does not replay to itself".into()).into());
    }
    println!("search {}: seed {}, {} episodes, {} nodes", p.name, a.seed, stats.episodes, stats.nodes);
    println!("best reward {:.6} (episode {}), {} decisions", plan.reward, stats.best_episode, plan.decisions());
    println!("megatron pattern: {}", is_megatron_like(&p, &plan));
    for act in &plan.actions {
        println!("  {act}");
    }
    print!("{}", spec_lines(&plan));
    print!("{}", plan.cost.table());
    print!("{}", plan.collectives.table());
    if let Some(out) = &a.out {
        fs::write(out, emit_plan(&plan))?;
    }
    if let Some(out) = &a.spmd_out {
        fs::write(out, print_spmd(&lower_state(&s)))?;
    }
    Ok(())
}

pub fn replay(a: ReplayArgs) -> Result<()> {
    let p = load_program(&a.input)?;
    let (plan, s) = planned(&p, Some(&a.plan), &a.cost)?;
    println!("replay {}: seed {}, {} decisions, reward {:.6}", p.name, plan.seed, plan.decisions(), plan.reward);
    print!("{}", spec_lines(&plan));
    print!("{}", plan.cost.table());
    print!("{}", plan.collectives.table());
    if let Some(out) = &a.out {
        fs::write(out, print_program(&s.materialize()))?;
    }
    if let Some(out) = &a.spmd_out {
        fs::write(out, print_spmd(&lower_state(&s)))?;
    }
    Ok(())
}

pub fn train_ranker(a: TrainArgs) -> Result<()> {
    let all = generate_dataset(a.programs + a.held_out, a.seed)?;
    let (data, held) = all.split_at(a.programs);
    let cfg = TrainConfig { epochs: a.epochs, learning_rate: a.lr, hidden: a.hidden, seed: a.seed };
    let (model, rep) = train(data, &cfg)?;
    fs::write(&a.out, model.to_text()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("trained on {} programs, seed {}, {} epochs", data.len(), a.seed, rep.epochs);
    println!("  loss {:.4} -> {:.4}", rep.initial_loss, rep.final_loss);
    if !held.is_empty() {
        let kept = held
            .iter()
            .filter(|ex| {
                let top: Vec<_> = score_and_filter(&ex.graph, &model, a.top_k).into_iter().map(|(id, _)| id).collect();
                ex.labels.iter().all(|&l| top.contains(&ex.graph.ids[l]))
            })
            .count();
        println!("  held-out top-{} retention: {kept}/{}", a.top_k, held.len());
    }
    Ok(())
}

pub fn score(a: ScoreArgs) -> Result<()> {
    let p = load_program(&a.input)?;
    let model = load_ranker(&a.model)?;
    let g = featurize(&p)?;
    model.check_width(&g)?;
    for (rank, (id, s)) in score_and_filter(&g, &model, a.top_k).iter().enumerate() {
        println!("{:>3}  %{id}\t{s:.4}", rank + 1);
    }
    Ok(())
}
