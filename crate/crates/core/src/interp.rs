//! Reference executors: single-device evaluation of base and tiled programs,
//! and lockstep simulation of SPMD programs over every device of the mesh.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ir::{LoopKind, Program, Stmt, ValueId};
use crate::mesh::{DeviceCoord, Mesh};
use crate::spmd::{DistType, SpmdKind, SpmdProgram};
use crate::tensor::{eval_op, DenseTensor};

/// Relative tolerance for results that went through an all-reduce.
pub const REDUCTION_RTOL: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpError {
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input %{id}: expected shape {expected:?}, got {got:?}")]
    InputShape { id: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("unknown value %{0}")]
    UnknownValue(String),
    #[error("devices diverge at %{id}: {msg}")]
    Divergence { id: String, msg: String },
}

fn check_inputs(ids_shapes: &[(&str, &[usize])], inputs: &[DenseTensor]) -> Result<(), InterpError> {
    if ids_shapes.len() != inputs.len() {
        return Err(InterpError::InputCount { expected: ids_shapes.len(), got: inputs.len() });
    }
    for ((id, shape), t) in ids_shapes.iter().zip(inputs) {
        if t.shape != *shape {
            return Err(InterpError::InputShape { id: id.to_string(), expected: shape.to_vec(), got: t.shape.clone() });
        }
    }
    Ok(())
}

struct Scopes {
    frames: Vec<HashMap<ValueId, DenseTensor>>,
    /// Loop index variable -> (parts, index).
    indices: HashMap<ValueId, (usize, usize)>,
}

impl Scopes {
    fn get(&self, id: &str) -> Result<&DenseTensor, InterpError> {
        self.frames.iter().rev().find_map(|f| f.get(id)).ok_or_else(|| InterpError::UnknownValue(id.to_string()))
    }

    fn set(&mut self, id: &str, t: DenseTensor) {
        self.frames.last_mut().unwrap().insert(id.to_string(), t);
    }
}

fn eval_block(body: &[Stmt], mesh: &Mesh, sc: &mut Scopes) -> Result<(), InterpError> {
    for stmt in body {
        match stmt {
            Stmt::Op(op) => {
                let args: Vec<&DenseTensor> = op.operands.iter().map(|o| sc.get(o)).collect::<Result<_, _>>()?;
                let out = eval_op(&op.kind, &args, &op.ty.shape);
                sc.set(&op.id, out);
            }
            Stmt::SliceAxis(s) => {
                let &(parts, i) = sc.indices.get(&s.index).ok_or_else(|| InterpError::UnknownValue(s.index.clone()))?;
                let out = sc.get(&s.operand)?.chunk(s.dim, parts, i);
                sc.set(&s.id, out);
            }
            Stmt::Atomic(a) => {
                let v = sc.get(&a.value)?.clone();
                sc.set(&a.id, v);
            }
            Stmt::Loop(l) => {
                let parts = mesh.axis_size(&l.axis).expect("validated axis");
                let mut results = Vec::with_capacity(parts);
                for i in 0..parts {
                    sc.indices.insert(l.index_var.clone(), (parts, i));
                    sc.frames.push(HashMap::new());
                    eval_block(&l.body, mesh, sc)?;
                    results.push(sc.get(&l.yield_value)?.clone());
                    sc.frames.pop();
                }
                sc.indices.remove(&l.index_var);
                let out = match l.kind {
                    LoopKind::Tile { dim } => DenseTensor::concat(&results, dim),
                    LoopKind::Sum => {
                        let mut acc = results[0].clone();
                        for r in &results[1..] {
                            acc.add_assign(r);
                        }
                        acc
                    }
                };
                sc.set(&l.id, out);
            }
        }
    }
    Ok(())
}

/// Evaluates a base or tiled program, returning every top-level value.
pub fn eval_base_values(p: &Program, inputs: &[DenseTensor]) -> Result<HashMap<ValueId, DenseTensor>, InterpError> {
    let sig: Vec<(&str, &[usize])> = p.args.iter().map(|a| (a.id.as_str(), a.ty.shape.as_slice())).collect();
    check_inputs(&sig, inputs)?;
    let mut frame = HashMap::new();
    for (a, t) in p.args.iter().zip(inputs) {
        frame.insert(a.id.clone(), t.clone());
    }
    let mut sc = Scopes { frames: vec![frame], indices: HashMap::new() };
    eval_block(&p.body, &p.mesh, &mut sc)?;
    sc.get(&p.result)?;
    Ok(sc.frames.pop().unwrap())
}

pub fn eval_base(p: &Program, inputs: &[DenseTensor]) -> Result<DenseTensor, InterpError> {
    let mut env = eval_base_values(p, inputs)?;
    Ok(env.remove(&p.result).expect("checked"))
}

pub struct DeviceState {
    pub coord: DeviceCoord,
    pub env: HashMap<ValueId, DenseTensor>,
}

fn shard(t: &DenseTensor, ty: &DistType, mesh: &Mesh, coord: &DeviceCoord) -> DenseTensor {
    let mut out = t.clone();
    for (d, a) in ty.spec.dims.iter().enumerate() {
        if let Some(a) = a {
            out = out.chunk(d, mesh.axis_size(a).unwrap(), coord.get(mesh, a));
        }
    }
    out
}

/// Devices sharing every coordinate but `axis`, ascending along it.
fn axis_group(mesh: &Mesh, devices: &[DeviceCoord], me: &DeviceCoord, axis: &str) -> Vec<usize> {
    let k = mesh.axis_index(axis).unwrap();
    (0..mesh.axes()[k].1)
        .map(|i| {
            let mut c = me.clone();
            c.0[k] = i;
            mesh.linear_index(&c)
        })
        .filter(|&d| d < devices.len())
        .collect()
}

/// Runs every device in lockstep, returning the final device states.
pub fn eval_spmd_devices(sp: &SpmdProgram, inputs: &[DenseTensor]) -> Result<Vec<DeviceState>, InterpError> {
    let sig: Vec<(&str, &[usize])> = sp.args.iter().map(|(id, t)| (id.as_str(), t.global.shape.as_slice())).collect();
    check_inputs(&sig, inputs)?;
    let mesh = &sp.mesh;
    let coords = mesh.devices();
    let mut devs: Vec<DeviceState> = coords
        .iter()
        .map(|c| {
            let env = sp.args.iter().zip(inputs).map(|((id, ty), t)| (id.clone(), shard(t, ty, mesh, c))).collect();
            DeviceState { coord: c.clone(), env }
        })
        .collect();
    for op in &sp.ops {
        let expect = op.ty.local_shape(mesh);
        let mut outs = Vec::with_capacity(devs.len());
        for dev in &devs {
            let arg = |i: usize| {
                dev.env.get(&op.operands[i]).ok_or_else(|| InterpError::UnknownValue(op.operands[i].clone()))
            };
            let out = match &op.kind {
                SpmdKind::Base(kind) => {
                    let args: Vec<&DenseTensor> = (0..op.operands.len()).map(arg).collect::<Result<_, _>>()?;
                    eval_op(kind, &args, &expect)
                }
                SpmdKind::SliceByCoord { axis, dim } => {
                    arg(0)?.chunk(*dim, mesh.axis_size(axis).unwrap(), dev.coord.get(mesh, axis))
                }
                SpmdKind::AllReduce { axis } => {
                    let group = axis_group(mesh, &coords, &dev.coord, axis);
                    let mut acc = devs[group[0]].env[&op.operands[0]].clone();
                    for &g in &group[1..] {
                        acc.add_assign(&devs[g].env[&op.operands[0]]);
                    }
                    acc
                }
                SpmdKind::AllGather { axis, dim } => {
                    let group = axis_group(mesh, &coords, &dev.coord, axis);
                    let parts: Vec<DenseTensor> = group.iter().map(|&g| devs[g].env[&op.operands[0]].clone()).collect();
                    DenseTensor::concat(&parts, *dim)
                }
            };
            if out.shape != expect {
                return Err(InterpError::Divergence {
                    id: op.id.clone(),
                    msg: format!("local shape {:?}, expected {:?}", out.shape, expect),
                });
            }
            outs.push(out);
        }
        for (dev, out) in devs.iter_mut().zip(outs) {
            dev.env.insert(op.id.clone(), out);
        }
    }
    Ok(devs)
}

/// Reassembles a global tensor from per-device shards, checking that
/// replicas agree bit-for-bit.
pub fn unshard(id: &str, ty: &DistType, mesh: &Mesh, devs: &[DeviceState]) -> Result<DenseTensor, InterpError> {
    if !ty.spec.pending_sum.is_empty() {
        return Err(InterpError::Divergence { id: id.to_string(), msg: "value holds unreduced partial sums".into() });
    }
    let local = ty.local_shape(mesh);
    let mut out = DenseTensor::zeros(&ty.global.shape);
    let mut seen: HashMap<Vec<usize>, &DenseTensor> = HashMap::new();
    for dev in devs {
        let block = dev.env.get(id).ok_or_else(|| InterpError::UnknownValue(id.to_string()))?;
        let offset: Vec<usize> = ty
            .spec
            .dims
            .iter()
            .zip(&local)
            .map(|(a, l)| a.as_ref().map_or(0, |a| dev.coord.get(mesh, a) * l))
            .collect();
        match seen.get(&offset) {
            Some(prev) if !prev.bit_eq(block) => {
                return Err(InterpError::Divergence {
                    id: id.to_string(),
                    msg: format!("replicas differ at device {:?}", dev.coord.0),
                })
            }
            Some(_) => {}
            None => {
                out.write_block(&offset, block);
                seen.insert(offset, block);
            }
        }
    }
    Ok(out)
}

pub fn eval_spmd(sp: &SpmdProgram, inputs: &[DenseTensor]) -> Result<DenseTensor, InterpError> {
    let devs = eval_spmd_devices(sp, inputs)?;
    unshard(&sp.result, sp.result_type(), &sp.mesh, &devs)
}

/// `|a - b| <= rtol * max(1, |b|)` elementwise, NaNs equal only to NaNs.
pub fn within_tolerance(a: &DenseTensor, b: &DenseTensor, rtol: f32) -> bool {
    a.shape == b.shape
        && a.data.iter().zip(&b.data).all(|(&x, &y)| {
            if x.is_nan() || y.is_nan() {
                x.is_nan() && y.is_nan()
            } else {
                x == y || (x - y).abs() <= rtol * y.abs().max(1.0)
            }
        })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EquivReport {
    pub trials: usize,
    pub pass: bool,
    /// Every trial matched bit-for-bit.
    pub exact: bool,
    /// Relative tolerance applied, when the program all-reduces.
    pub tolerance: Option<f32>,
    pub max_abs_diff: f32,
    /// First value (in SPMD program order) that differed, on failure.
    pub first_divergence: Option<String>,
    pub error: Option<String>,
}

pub fn random_inputs(p: &Program, rng: &mut ChaCha8Rng) -> Vec<DenseTensor> {
    p.args.iter().map(|a| DenseTensor::random(&a.ty.shape, rng)).collect()
}

/// Compares `sp` against the single-device program on `trials` random inputs.
pub fn check_equivalence(p: &Program, sp: &SpmdProgram, trials: usize, seed: u64) -> EquivReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<_> = (0..trials).map(|_| random_inputs(p, &mut rng)).collect();
    check_equivalence_on(p, sp, &sets)
}

/// Compares `sp` against the single-device program on the given input sets,
/// stopping at the first mismatch.
pub fn check_equivalence_on(p: &Program, sp: &SpmdProgram, input_sets: &[Vec<DenseTensor>]) -> EquivReport {
    let reduces = sp.ops.iter().any(|o| matches!(o.kind, SpmdKind::AllReduce { .. }));
    let tol = reduces.then_some(REDUCTION_RTOL);
    let mut rep =
        EquivReport { trials: input_sets.len(), pass: true, exact: true, tolerance: tol, ..Default::default() };
    for inputs in input_sets {
        let (reference, devs) = match (eval_base_values(p, inputs), eval_spmd_devices(sp, inputs)) {
            (Ok(r), Ok(d)) => (r, d),
            (Err(e), _) | (_, Err(e)) => {
                rep.pass = false;
                rep.exact = false;
                if let InterpError::Divergence { id, .. } = &e {
                    rep.first_divergence = Some(id.clone());
                }
                rep.error = Some(e.to_string());
                return rep;
            }
        };
        let out = match unshard(&sp.result, sp.result_type(), &sp.mesh, &devs) {
            Ok(o) => o,
            Err(e) => {
                rep.pass = false;
                rep.exact = false;
                rep.first_divergence = Some(sp.result.clone());
                rep.error = Some(e.to_string());
                return rep;
            }
        };
        let want = &reference[&p.result];
        rep.max_abs_diff = rep.max_abs_diff.max(out.max_abs_diff(want));
        let exact = out.bit_eq(want);
        rep.exact &= exact;
        let ok = exact || tol.is_some_and(|t| within_tolerance(&out, want, t));
        if !ok {
            rep.pass = false;
            rep.first_divergence = first_divergence(sp, &reference, &devs, tol);
            return rep;
        }
    }
    rep
}

fn first_divergence(
    sp: &SpmdProgram,
    reference: &HashMap<ValueId, DenseTensor>,
    devs: &[DeviceState],
    tol: Option<f32>,
) -> Option<String> {
    for op in &sp.ops {
        let Some(want) = reference.get(&op.id) else { continue };
        let got = match unshard(&op.id, &op.ty, &sp.mesh, devs) {
            Ok(g) => g,
            Err(_) => return Some(op.id.clone()),
        };
        let ok = got.bit_eq(want) || tol.is_some_and(|t| within_tolerance(&got, want, t));
        if !ok {
            return Some(op.id.clone());
        }
    }
    Some(sp.result.clone())
}
