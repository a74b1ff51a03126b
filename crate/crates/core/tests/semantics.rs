//! Differential tests: partitioned programs compute what the base program does.

use partir_core::interp::{check_equivalence, eval_base, random_inputs, within_tolerance, REDUCTION_RTOL};
use partir_core::ir::{parse_program, print_program};
use partir_core::modelgen::{build_mlp, build_transformer, random_program, MlpConfig, TransformerConfig};
use partir_core::propagation::{infer_rest_state, propagate_state};
use partir_core::spmd::lower_state;
use partir_core::tiled::TilingState;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Applies up to `n` random legal tilings, propagating after each.
fn random_plan(p: &partir_core::ir::Program, n: usize, seed: u64) -> TilingState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
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
        let Some(&(v, d, a)) = legal.choose(&mut rng) else { break };
        s.tile(v, d, a).unwrap();
        if rng.gen_bool(0.8) {
            propagate_state(&mut s);
        }
    }
    if rng.gen_bool(0.3) {
        infer_rest_state(&mut s);
    }
    s
}

fn check(p: &partir_core::ir::Program, seed: u64, trials: usize) {
    let s = random_plan(p, 1 + (seed as usize % 8), seed);
    let tiled = s.materialize();
    let text = print_program(&tiled);
    let reparsed = parse_program(&text).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
    let back = TilingState::from_program(&reparsed).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
    assert_eq!(back, s, "seed {seed}: round trip\n{text}");
    let sp = lower_state(&s);
    let rep = check_equivalence(p, &sp, trials, seed);
    assert!(rep.pass, "seed {seed}: {rep:?}\n{text}");
    // The loop-form program itself evaluates to the same result.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = random_inputs(p, &mut rng);
    let want = eval_base(p, &inputs).unwrap();
    let got = eval_base(&tiled, &inputs).unwrap();
    assert!(got.bit_eq(&want) || within_tolerance(&got, &want, REDUCTION_RTOL), "seed {seed}: tiled eval\n{text}");
}

#[test]
fn random_programs_survive_random_plans() {
    for seed in 0..150 {
        let p = random_program(seed, 3 + seed as usize % 12);
        check(&p, seed, 5);
    }
}

#[test]
fn zoo_programs_survive_random_plans() {
    let t = build_transformer(&TransformerConfig { mlp_bias: true, ln_gain: true, ..Default::default() }).unwrap();
    let m = build_mlp(&MlpConfig { grads: true, ..Default::default() }).unwrap();
    for seed in 0..20 {
        check(&t, seed, 3);
        check(&m, seed, 3);
    }
}
