//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use partir_core::cost::{reward, CostParams, CostReport};
use partir_core::interp::check_equivalence;
use partir_core::ir::{print_program, Program};
use partir_core::modelgen::{build_mlp, build_transformer, linear, random_program, MlpConfig, TransformerConfig};
use partir_core::propagation::{infer_rest_state, propagate_state};
use partir_core::ranker::{generate_dataset, score_and_filter, train, RankerModel, TrainConfig, TrainingExample};
use partir_core::search::oracle::{all_assignments, evaluate, group_options, OracleEntry};
use partir_core::search::{is_megatron_like, search_program, SearchConfig, SearchContext};
use partir_core::spmd::{collective_stats, lower_state, print_dist_type, SpmdProgram};
use partir_core::tiled::TilingState;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn transformer(layers: usize, ln_gain: bool) -> Program {
    build_transformer(&TransformerConfig { layers, ln_gain, ..Default::default() }).unwrap()
}

/// Reward-best grouped assignment, exhaustively.
fn oracle(p: &Program) -> (OracleEntry, usize) {
    let ctx = SearchContext::new(p, SearchConfig::default(), None).unwrap();
    let groups = ctx.worklist(&ctx.base);
    let all = all_assignments(&group_options(&ctx.base, &groups, &ctx.axes));
    let best = all
        .iter()
        .filter_map(|a| evaluate(&ctx.base, &groups, a, &ctx.cfg.cost, ctx.baseline_bytes, false))
        .fold(None::<OracleEntry>, |b, e| match b {
            Some(b) if b.reward >= e.reward => Some(b),
            _ => Some(e),
        })
        .unwrap();
    (best, all.len())
}

// ---------------------------------------------------------------------------

fn golden_pipeline() -> Outcome {
    let p = linear();
    let mut s = TilingState::new(p.clone()).unwrap();
    let (w, shard) = (s.info().value("w").unwrap(), s.info().axis("shard").unwrap());
    s.tile(w, 1, shard).unwrap();
    let stuck = propagate_state(&mut s);
    let text = print_program(&s.materialize());

    let mut fails = Vec::new();
    // The loop that produces the result holds the dot and slices %b.
    let result_loop = text.split("%z.t = tile \"shard\" dim 1").nth(1).and_then(|rest| rest.split("yield %z").next());
    match result_loop {
        Some(body) => {
            if !body.contains("= dot(%x.a") {
                fails.push("dot not inside the tile loop");
            }
            if !body.contains("slice_axis(%b, dim=1") {
                fails.push("%b not consumed via slice_axis");
            }
        }
        None => fails.push("no result tile loop"),
    }
    if !text.contains("%x.a = atomic { yield %x }") {
        fails.push("%x not atomic");
    }
    if !stuck.is_empty() {
        fails.push("stuck ops remain");
    }

    let sp = lower_state(&s);
    let wt = &sp.args.iter().find(|(id, _)| id == "w").unwrap().1;
    if print_dist_type(wt) != "f32[16,64{\"shard\"}]" {
        fails.push("w type");
    }
    if wt.local_shape(&sp.mesh) != [16, 32] {
        fails.push("w local shape");
    }
    if print_dist_type(sp.result_type()) != "f32[8,64{\"shard\"}]" {
        fails.push("result type");
    }
    if collective_stats(&sp).collectives() != 0 {
        fails.push("collectives present");
    }
    outcome(fails.is_empty(), if fails.is_empty() { "structure and SPMD types match".into() } else { fails.join("; ") })
}

/// Up to `n` random legal tilings with interleaved propagation.
fn random_plan(p: &Program, n: usize, rng: &mut ChaCha8Rng) -> TilingState {
    let mut s = TilingState::new(p.clone()).unwrap();
    let axes = p.mesh.axes().len();
    for _ in 0..n {
        let info = s.info().clone();
        let mut legal = Vec::new();
        for v in 0..info.num_values() {
            for d in 0..info.types[v].rank() {
                for a in 0..axes {
                    if s.tile_blocker(v, d, a).is_none() {
                        legal.push((v, d, a));
                    }
                }
            }
        }
        let Some(&(v, d, a)) = legal.choose(rng) else { break };
        s.tile(v, d, a).unwrap();
        match rng.gen_range(0..10) {
            0 => {}
            1 => {
                infer_rest_state(&mut s);
            }
            _ => {
                propagate_state(&mut s);
            }
        }
    }
    s
}

fn zoo() -> Vec<Program> {
    vec![
        linear(),
        transformer(2, false),
        build_transformer(&TransformerConfig { layers: 1, mlp_bias: true, ln_gain: true, ..Default::default() })
            .unwrap(),
        build_mlp(&MlpConfig::default()).unwrap(),
        build_mlp(&MlpConfig { grads: true, ..Default::default() }).unwrap(),
    ]
}

fn semantics() -> Outcome {
    let mut cases: Vec<Program> = (0..170).map(|seed| random_program(seed, 3 + seed as usize % 12)).collect();
    let zoo = zoo();
    for i in 0..40 {
        cases.push(zoo[i % zoo.len()].clone());
    }
    let (mut pass, mut exact, mut reducing) = (0, 0, 0);
    let mut first_fail = None;
    for (i, p) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let n = rng.gen_range(1..=8);
        let s = random_plan(p, n, &mut rng);
        let sp = lower_state(&s);
        let rep = check_equivalence(p, &sp, 20, i as u64);
        if rep.pass {
            pass += 1;
        } else if first_fail.is_none() {
            first_fail = Some(format!("case {i} ({}): {:?}", p.name, rep.first_divergence));
        }
        if rep.tolerance.is_some() {
            reducing += 1;
        } else if rep.exact {
            exact += 1;
        }
    }
    let detail = format!(
        "{pass}/{} pairs pass (20 inputs each; {exact} bit-exact, {reducing} with pending sums){}",
        cases.len(),
        first_fail.map(|f| format!("; first failure {f}")).unwrap_or_default()
    );
    outcome(pass == cases.len() && cases.len() >= 200, detail)
}

struct Recovery {
    outcome: Outcome,
    decisions: Vec<usize>,
}

fn megatron_recovery() -> Recovery {
    let p = transformer(2, false);
    let (best, n) = oracle(&p);
    let (ar, ag) = (best.collectives.all_reduce, best.collectives.all_gather);
    let mut hits = 0;
    let mut decisions = Vec::new();
    for seed in 0..20 {
        let cfg = SearchConfig { episodes: 500, seed, group_scopes: true, ..Default::default() };
        let (plan, _) = search_program(&p, &cfg, None).unwrap();
        if plan.collectives.all_reduce == ar && plan.collectives.all_gather == ag && is_megatron_like(&p, &plan) {
            hits += 1;
            decisions.push(plan.decisions());
        }
    }
    let pass = ar == 4 && ag == 0 && hits >= 16;
    let detail = format!("oracle over {n} assignments: {ar} all_reduce, {ag} all_gather; search hit {hits}/20");
    Recovery { outcome: outcome(pass, detail), decisions }
}

fn grouping_effect() -> Outcome {
    let p = transformer(8, false);
    let (best, _) = oracle(&p);
    let target = best.cost.reduction_bytes;
    let mut hits = [0, 0];
    for (i, grouped) in [true, false].into_iter().enumerate() {
        for seed in 0..20 {
            let cfg = SearchConfig { episodes: 1000, seed, group_scopes: grouped, ..Default::default() };
            let (plan, _) = search_program(&p, &cfg, None).unwrap();
            if plan.cost.reduction_bytes == target && plan.collectives.all_gather == 0 && is_megatron_like(&p, &plan) {
                hits[i] += 1;
            }
        }
    }
    let pass = hits[0] >= 10 && hits[1] < 2;
    outcome(pass, format!("oracle reduction {target} B; grouped {}/20, ungrouped {}/20", hits[0], hits[1]))
}

fn retention(model: &RankerModel, ex: &TrainingExample, k: usize) -> bool {
    let top: Vec<_> = score_and_filter(&ex.graph, model, k).into_iter().map(|(id, _)| id).collect();
    ex.labels.iter().all(|&l| top.contains(&ex.graph.ids[l]))
}

/// Episode at which the search first matches the oracle's cost, or
/// `episodes + 1` if it never does.
fn episodes_to_oracle(p: &Program, target: f64, seed: u64, ranker: Option<&RankerModel>) -> usize {
    let cfg = SearchConfig { episodes: 1000, seed, ..Default::default() };
    let (_, stats) = search_program(p, &cfg, ranker).unwrap();
    stats.improvements.iter().find(|i| i.cost_reward >= target - 1e-12).map_or(cfg.episodes + 1, |i| i.episode)
}

fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn ranker_quality() -> Outcome {
    let all = generate_dataset(70, 0).unwrap();
    let (data, held) = all.split_at(50);
    let (model, rep) = train(data, &TrainConfig::default()).unwrap();
    let kept = held.iter().filter(|ex| retention(&model, ex, 25)).count();

    let p = transformer(4, true);
    let ctx = SearchContext::new(&p, SearchConfig::default(), None).unwrap();
    let (best, _) = oracle(&p);
    let target = reward(&best.cost, &ctx.cfg.cost, 0, ctx.baseline_bytes);
    let on: Vec<usize> = (0..20).map(|s| episodes_to_oracle(&p, target, s, Some(&model))).collect();
    let off: Vec<usize> = (0..20).map(|s| episodes_to_oracle(&p, target, s, None)).collect();
    let (m_on, m_off) = (median(on.clone()), median(off.clone()));
    let missed = |v: &[usize]| v.iter().filter(|&&e| e > 1000).count();
    let pass = kept * 10 >= held.len() * 9 && m_on <= m_off;
    let detail = format!(
        "train loss {:.3}->{:.3}; held-out retention {kept}/{}; 4-layer median episodes-to-oracle on {m_on} vs off {m_off} (misses {} vs {})",
        rep.initial_loss,
        rep.final_loss,
        held.len(),
        missed(&on),
        missed(&off)
    );
    outcome(pass, detail)
}

/// Live set at each step, enumerated directly: a value is live at step t
/// if defined at or before t and used (or returned) at or after t.
fn brute_force_peak(sp: &SpmdProgram) -> u64 {
    let args: u64 = sp.args.iter().map(|(_, t)| t.local_bytes(&sp.mesh)).sum();
    let mut peak = 0;
    for t in 0..sp.ops.len() {
        let live: u64 = sp.ops[..=t]
            .iter()
            .enumerate()
            .filter(|(j, op)| *j == t || op.id == sp.result || sp.ops[t..].iter().any(|u| u.operands.contains(&op.id)))
            .map(|(_, op)| op.ty.local_bytes(&sp.mesh))
            .sum();
        peak = peak.max(live);
    }
    args + peak
}

fn cost_oracles() -> Outcome {
    let mut fails = Vec::new();
    let mut programs = zoo();
    programs.push(transformer(4, true));
    let mut checked = 0;
    for (i, p) in programs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for k in 0..10 {
            let s = if k == 0 { TilingState::new(p.clone()).unwrap() } else { random_plan(p, k % 6 + 1, &mut rng) };
            let sp = lower_state(&s);
            checked += 1;
            if partir_core::cost::peak_liveness(&sp) != brute_force_peak(&sp) {
                fails.push(format!("{} plan {k}: peak mismatch", p.name));
            }
        }
    }

    // Sharding one parameter on an axis of size s divides its bytes by s.
    let mut shards = 0;
    for size in [2, 4] {
        let mesh = vec![("model".to_string(), size)];
        let p = build_transformer(&TransformerConfig { mesh: mesh.clone(), mlp_bias: true, ..Default::default() });
        for p in [p.unwrap(), build_mlp(&MlpConfig { mesh, ..Default::default() }).unwrap()] {
            let base = TilingState::new(p.clone()).unwrap();
            let bytes =
                |sp: &SpmdProgram, id: &str| sp.args.iter().find(|(a, _)| a == id).unwrap().1.local_bytes(&sp.mesh);
            let rep = lower_state(&base);
            for (v, arg) in p.args.iter().enumerate() {
                for d in 0..arg.ty.rank() {
                    if base.tile_blocker(v, d, 0).is_some() {
                        continue;
                    }
                    let mut s = base.clone();
                    s.tile(v, d, 0).unwrap();
                    let sp = lower_state(&s);
                    shards += 1;
                    if bytes(&sp, &arg.id) * size as u64 != bytes(&rep, &arg.id) {
                        fails.push(format!("{} %{} dim {d} on {size}", p.name, arg.id));
                    }
                }
            }
        }
    }

    // Dominated reports never earn more reward.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..1000 {
        let cp = CostParams {
            w_mem: rng.gen_range(0.0..4.0),
            w_comm: rng.gen_range(0.0..4.0),
            w_steps: rng.gen_range(0.0..0.1),
            memory_budget_bytes: rng.gen_range(1e3..1e6),
            ..CostParams::default()
        };
        let baseline = rng.gen_range(1..100_000);
        let mut a = CostReport {
            peak_memory_bytes: rng.gen_range(0..1_000_000),
            reduction_bytes: rng.gen_range(0..100_000),
            all_gather_bytes: rng.gen_range(0..100_000),
            num_collectives: rng.gen_range(0..20),
            ..Default::default()
        };
        a.feasible = a.peak_memory_bytes as f64 <= cp.memory_budget_bytes;
        let mut b = a.clone();
        b.peak_memory_bytes += rng.gen_range(0..1000);
        b.reduction_bytes += rng.gen_range(0..1000);
        b.all_gather_bytes += rng.gen_range(0..1000);
        b.num_collectives += rng.gen_range(0..3);
        b.feasible = b.peak_memory_bytes as f64 <= cp.memory_budget_bytes;
        let steps = rng.gen_range(0..20);
        let (ra, rb) = (reward(&a, &cp, steps, baseline), reward(&b, &cp, steps + rng.gen_range(0..3), baseline));
        if rb > ra || !(0.0..=1.0).contains(&ra) || (!a.feasible && ra != 0.0) {
            violations += 1;
        }
    }
    if violations > 0 {
        fails.push(format!("{violations} reward monotonicity violations"));
    }
    let detail = format!(
        "{checked} liveness comparisons, {shards} single-parameter shardings, 1000 reward pairs{}",
        if fails.is_empty() { String::new() } else { format!("; {}", fails.join("; ")) }
    );
    outcome(fails.is_empty(), detail)
}

fn gradient_check() -> Outcome {
    let ex = &generate_dataset(1, 77).unwrap()[0];
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for draw in 0..10 {
        let mut m = RankerModel::init(ex.graph.width, 16, draw);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        for p in &mut m.params {
            *p += rng.gen_range(-0.2..0.2);
        }
        let (_, grad) = m.loss_and_grad(ex);
        for i in 0..m.params.len() {
            let mut plus = m.clone();
            plus.params[i] += eps;
            let mut minus = m.clone();
            minus.params[i] -= eps;
            let fd = (plus.loss_and_grad(ex).0 - minus.loss_and_grad(ex).0) / (2.0 * eps);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            worst = worst.max(err);
            if err > 1e-4 {
                bad += 1;
            }
        }
    }
    outcome(bad == 0, format!("10 draws, worst relative error {worst:.2e}, {bad} parameters over 1e-4"))
}

fn partirc(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_partirc")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Each invocation writes `{tag}` into its outputs; run twice and diff.
    let runs: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("gen_t", vec!["gen", "--model", "transformer", "--out", "t_{tag}.pir"], vec!["t_{tag}.pir"]),
        (
            "gen_r",
            vec!["gen", "--model", "random", "--seed", "9", "--size", "14", "--out", "r_{tag}.pir"],
            vec!["r_{tag}.pir"],
        ),
        (
            "search",
            vec![
                "search",
                "--input",
                "t_a.pir",
                "--auto-axes",
                "model",
                "--episodes",
                "200",
                "--seed",
                "4",
                "--group-scopes",
                "--out",
                "plan_{tag}.json",
                "--spmd-out",
                "plan_{tag}.spmd",
            ],
            vec!["plan_{tag}.json", "plan_{tag}.spmd"],
        ),
        (
            "repeat",
            vec![
                "search",
                "--input",
                "t_a.pir",
                "--episodes",
                "30",
                "--seed",
                "2",
                "--repeat",
                "3",
                "--out",
                "rows_{tag}.tsv",
            ],
            vec!["rows_{tag}.tsv"],
        ),
        (
            "replay",
            vec![
                "replay",
                "--input",
                "t_a.pir",
                "--plan",
                "plan_a.json",
                "--out",
                "tiled_{tag}.pir",
                "--spmd-out",
                "re_{tag}.spmd",
            ],
            vec!["tiled_{tag}.pir", "re_{tag}.spmd"],
        ),
        ("gen_l", vec!["gen", "--model", "linear", "--out", "lin_{tag}.pir"], vec!["lin_{tag}.pir"]),
        (
            "propagate",
            vec!["propagate", "--input", "lin_a.pir", "--tile", "w:1:shard", "--infer-rest", "--out", "p_{tag}.pir"],
            vec!["p_{tag}.pir"],
        ),
        ("verify_r", vec!["verify", "--input", "r_a.pir", "--trials", "5", "--seed", "8"], vec![]),
        ("lower", vec!["lower", "--input", "tiled_a.pir", "--out", "l_{tag}.spmd"], vec!["l_{tag}.spmd"]),
        (
            "cost",
            vec!["cost", "--input", "t_a.pir", "--plan", "plan_a.json", "--out", "c_{tag}.json"],
            vec!["c_{tag}.json"],
        ),
        (
            "verify",
            vec!["verify", "--input", "t_a.pir", "--plan", "plan_a.json", "--trials", "5", "--seed", "3"],
            vec![],
        ),
        (
            "train",
            vec!["train-ranker", "--programs", "2", "--epochs", "3", "--seed", "5", "--out", "m_{tag}.txt"],
            vec!["m_{tag}.txt"],
        ),
        ("score", vec!["score", "--input", "t_a.pir", "--model", "m_a.txt"], vec![]),
    ];
    let mut differing = Vec::new();
    for (name, args, files) in &runs {
        let mut stdouts = Vec::new();
        for tag in ["a", "b"] {
            let args: Vec<String> = args.iter().map(|a| a.replace("{tag}", tag)).collect();
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            stdouts.push(partirc(d, &argv));
        }
        let same_files = files.iter().all(|f| {
            let a = fs::read(d.join(f.replace("{tag}", "a"))).unwrap();
            a == fs::read(d.join(f.replace("{tag}", "b"))).unwrap()
        });
        // Stdout mentions the output path, which differs by tag.
        let strip = |s: &[u8]| String::from_utf8_lossy(s).replace("_a.", "_x.").replace("_b.", "_x.");
        if !same_files || strip(&stdouts[0]) != strip(&stdouts[1]) {
            differing.push(*name);
        }
    }
    let detail = if differing.is_empty() {
        format!("{} invocations repeated byte-identically", runs.len())
    } else {
        format!("differing: {}", differing.join(", "))
    };
    outcome(differing.is_empty(), detail)
}

fn decision_economy(decisions: &[usize]) -> Outcome {
    let ok = !decisions.is_empty() && decisions.iter().all(|d| (2..=20).contains(d));
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for d in decisions {
        *counts.entry(*d).or_default() += 1;
    }
    let mut hist: Vec<_> = counts.into_iter().collect();
    hist.sort_unstable();
    outcome(ok, format!("{} accepted plans; decisions (count): {hist:?}", decisions.len()))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let el = t.elapsed();
        let pass = o.pass && el <= limit;
        failed += usize::from(!pass);
        let timing = if el <= limit { String::new() } else { format!(" OVER LIMIT {limit:?}") };
        println!(
            "criterion {n}: {} — {} [{:.1}s{timing}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64()
        );
    };
    let min = |m: u64| Duration::from_secs(60 * m);

    report(1, Duration::from_secs(1), &mut golden_pipeline);
    report(2, min(5), &mut semantics);
    let mut decisions = Vec::new();
    report(3, min(10), &mut || {
        let r = megatron_recovery();
        decisions = r.decisions;
        r.outcome
    });
    report(4, min(30), &mut grouping_effect);
    report(5, min(20), &mut ranker_quality);
    report(6, min(10), &mut cost_oracles);
    report(7, min(5), &mut gradient_check);
    report(8, min(5), &mut determinism);
    report(9, Duration::from_secs(1), &mut || decision_economy(&decisions));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
