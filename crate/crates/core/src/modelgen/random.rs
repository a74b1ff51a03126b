use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Builder;
use crate::ir::{DotDims, OpKind, Program};
use crate::mesh::Mesh;

const SIZES: [usize; 3] = [2, 4, 8];
/// Values whose magnitude bound exceeds this are not fed to growing ops.
const MAX_BOUND: f32 = 1e4;

#[derive(Clone)]
struct Val {
    id: String,
    shape: Vec<usize>,
    /// Upper bound on |x|.
    bound: f32,
    /// Lower bound when the value is known positive.
    pos: Option<f32>,
}

fn rand_shape(rng: &mut ChaCha8Rng, max_rank: usize) -> Vec<usize> {
    let r = rng.gen_range(1..=max_rank);
    (0..r).map(|_| *SIZES.choose(rng).unwrap()).collect()
}

struct Gen {
    b: Builder,
    vals: Vec<Val>,
    rng: ChaCha8Rng,
}

impl Gen {
    fn pick(&mut self, pred: impl Fn(&Val) -> bool) -> Option<Val> {
        let c: Vec<&Val> = self.vals.iter().filter(|v| pred(v)).collect();
        c.choose(&mut self.rng).map(|v| (*v).clone())
    }

    fn push(&mut self, kind: OpKind, ops: &[&Val], bound: f32, pos: Option<f32>) -> bool {
        let ids: Vec<&str> = ops.iter().map(|v| v.id.as_str()).collect();
        let n = self.b.num_ops();
        match self.b.try_op(&format!("v{}", n), kind, &ids, None, None) {
            Ok(id) => {
                let shape = self.b.shape(&id);
                self.vals.push(Val { id, shape, bound, pos });
                true
            }
            Err(_) => false,
        }
    }

    fn step(&mut self) -> bool {
        let choice = self.rng.gen_range(0..17);
        let ok = |v: &Val| v.bound <= MAX_BOUND;
        match choice {
            0 => {
                let shape = rand_shape(&mut self.rng, 3);
                let value = *[0.5f32, 1.0, 2.0].choose(&mut self.rng).unwrap();
                let n = self.b.num_ops();
                let id = self.b.constant(&format!("v{}", n), value, &shape, None);
                self.vals.push(Val { id, shape, bound: value, pos: Some(value) });
                true
            }
            1..=3 | 9 => {
                let Some(a) = self.pick(ok) else { return false };
                let Some(c) = self.pick(|v| ok(v) && v.shape == a.shape) else { return false };
                let (kind, bound, pos) = match choice {
                    1 => (OpKind::Add, a.bound + c.bound, a.pos.zip(c.pos).map(|(x, y)| x + y)),
                    2 => (OpKind::Sub, a.bound + c.bound, None),
                    3 => (OpKind::Mul, a.bound * c.bound, a.pos.zip(c.pos).map(|(x, y)| x * y)),
                    _ => (OpKind::Maximum, a.bound.max(c.bound), a.pos.or(c.pos)),
                };
                self.push(kind, &[&a, &c], bound, pos)
            }
            4 => {
                let Some(d) = self.pick(|v| v.pos.is_some_and(|p| p >= 0.1)) else { return false };
                let Some(a) = self.pick(|v| ok(v) && v.shape == d.shape) else { return false };
                let bound = a.bound / d.pos.unwrap();
                self.push(OpKind::Div, &[&a, &d], bound, None)
            }
            5 => {
                let Some(a) = self.pick(|_| true) else { return false };
                self.push(OpKind::Neg, &[&a], a.bound, None)
            }
            6 => {
                let Some(a) = self.pick(|v| v.bound <= 3.0) else { return false };
                self.push(OpKind::Exp, &[&a], a.bound.exp(), Some((-a.bound).exp()))
            }
            7 => {
                let Some(a) = self.pick(|_| true) else { return false };
                self.push(OpKind::Tanh, &[&a], 1.0, None)
            }
            8 => {
                let Some(a) = self.pick(|v| v.pos.is_some_and(|p| p >= 0.01) && v.bound <= MAX_BOUND) else {
                    return false;
                };
                let lo = a.pos.unwrap();
                self.push(OpKind::Rsqrt, &[&a], 1.0 / lo.sqrt(), Some(1.0 / a.bound.sqrt()))
            }
            10 => self.dot(),
            11 | 12 => {
                let Some(a) = self.pick(|v| v.shape.len() >= 2 && ok(v)) else { return false };
                let r = a.shape.len();
                let k = self.rng.gen_range(1..r);
                let mut dims: Vec<usize> = (0..r).collect();
                dims.shuffle(&mut self.rng);
                let mut dims = dims[..k].to_vec();
                dims.sort();
                let n: usize = dims.iter().map(|&d| a.shape[d]).product();
                if choice == 11 {
                    self.push(OpKind::ReduceSum { dims }, &[&a], a.bound * n as f32, None)
                } else {
                    self.push(OpKind::ReduceMax { dims }, &[&a], a.bound, a.pos)
                }
            }
            13 => {
                let Some(a) = self.pick(|v| v.shape.len() >= 2) else { return false };
                let mut perm: Vec<usize> = (0..a.shape.len()).collect();
                perm.shuffle(&mut self.rng);
                self.push(OpKind::Transpose { perm }, &[&a], a.bound, a.pos)
            }
            14 => {
                let Some(a) = self.pick(|_| true) else { return false };
                let mut shape = a.shape.clone();
                let r = shape.len();
                if r >= 2 && (r == 4 || self.rng.gen_bool(0.5)) {
                    let i = self.rng.gen_range(0..r - 1);
                    let m = shape[i] * shape[i + 1];
                    shape.splice(i..i + 2, [m]);
                } else {
                    let i = self.rng.gen_range(0..r);
                    if shape[i] < 4 {
                        return false;
                    }
                    let s = shape[i];
                    shape.splice(i..=i, [2, s / 2]);
                }
                self.push(OpKind::Reshape { shape }, &[&a], a.bound, a.pos)
            }
            15 => {
                let Some(a) = self.pick(|v| v.shape.len() < 4) else { return false };
                let r = a.shape.len();
                let at = self.rng.gen_range(0..=r);
                let mut shape = a.shape.clone();
                shape.insert(at, *SIZES.choose(&mut self.rng).unwrap());
                let dims: Vec<usize> = (0..r).map(|d| if d < at { d } else { d + 1 }).collect();
                self.push(OpKind::BroadcastInDim { shape, dims }, &[&a], a.bound, a.pos)
            }
            _ => {
                if self.rng.gen_bool(0.5) {
                    let Some(a) = self.pick(|v| v.shape.iter().any(|&s| s >= 4)) else { return false };
                    let cands: Vec<usize> = (0..a.shape.len()).filter(|&d| a.shape[d] >= 4).collect();
                    let d = *cands.choose(&mut self.rng).unwrap();
                    let half = a.shape[d] / 2;
                    let mut start = vec![0; a.shape.len()];
                    let mut limit = a.shape.clone();
                    if self.rng.gen_bool(0.5) {
                        start[d] = half;
                    } else {
                        limit[d] = half;
                    }
                    self.push(OpKind::Slice { start, limit }, &[&a], a.bound, a.pos)
                } else {
                    let Some(a) = self.pick(|v| v.shape.iter().all(|&s| s <= 4)) else { return false };
                    let Some(c) = self.pick(|v| v.shape == a.shape) else { return false };
                    let dim = self.rng.gen_range(0..a.shape.len());
                    let pos = a.pos.zip(c.pos).map(|(x, y)| x.min(y));
                    self.push(OpKind::Concatenate { dim }, &[&a, &c], a.bound.max(c.bound), pos)
                }
            }
        }
    }

    fn dot(&mut self) -> bool {
        let Some(a) = self.pick(|v| v.bound <= 100.0) else { return false };
        let Some(c) = self.pick(|v| v.bound <= 100.0 && v.shape.iter().any(|s| a.shape.contains(s))) else {
            return false;
        };
        let pairs: Vec<(usize, usize)> = (0..a.shape.len())
            .flat_map(|i| (0..c.shape.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| a.shape[i] == c.shape[j])
            .collect();
        let &(ci, cj) = pairs.choose(&mut self.rng).unwrap();
        let mut dims = DotDims::contract(&[ci], &[cj]);
        let batch: Vec<&(usize, usize)> = pairs.iter().filter(|&&(i, j)| i != ci && j != cj).collect();
        if !batch.is_empty() && self.rng.gen_bool(0.5) {
            let &&(bi, bj) = batch.choose(&mut self.rng).unwrap();
            dims = dims.with_batch(&[bi], &[bj]);
        }
        let nb = dims.lhs_batch.len();
        if a.shape.len() + c.shape.len() - 2 - nb == 0 {
            return false;
        }
        let k = a.shape[ci];
        self.push(OpKind::Dot(dims), &[&a, &c], a.bound * c.bound * k as f32, None)
    }
}

/// Random well-typed program with exactly `size` ops (at least one) on a
/// 2x2 mesh. Magnitudes are tracked so evaluation stays finite on inputs
/// in [-1, 1).
pub fn random_program(seed: u64, size: usize) -> Program {
    let size = size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = Mesh::new([("a", 2), ("b", 2)]).unwrap();
    let mut b = Builder::new(&format!("random_{}", seed), mesh);
    let mut vals = Vec::new();
    for i in 0..rng.gen_range(1..=3) {
        let shape = rand_shape(&mut rng, 3);
        let id = b.arg(&format!("a{}", i), &shape, None);
        vals.push(Val { id, shape, bound: 1.0, pos: None });
    }
    let mut g = Gen { b, vals, rng };
    while g.b.num_ops() < size {
        if !g.step() {
            // Always applicable fallback.
            let a = g.vals[g.rng.gen_range(0..g.vals.len())].clone();
            g.push(OpKind::Tanh, &[&a], 1.0, None);
        }
    }
    let result = g.vals.last().unwrap().id.clone();
    g.b.finish(&result)
}
