//! Row-major f32 tensors and the reference kernels for every base op.
//!
//! All reductions accumulate in ascending index order starting from zero,
//! which is what lets the interpreter compare partitioned and unpartitioned
//! runs bit-for-bit on order-preserving paths.

use std::io::{self, Read, Write};

use rand::Rng;

use crate::ir::{DotDims, OpKind};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f` with every multi-index of `shape` in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut idx = vec![0; shape.len()];
    loop {
        f(&idx);
        let mut k = shape.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "payload length must match shape");
        DenseTensor { shape, data }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        DenseTensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// Uniform samples in [-1, 1).
    pub fn random(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        DenseTensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect() }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, idx: &[usize]) -> usize {
        let st = strides(&self.shape);
        idx.iter().zip(&st).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        DenseTensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// In-place elementwise sum, used for sum loops and all-reduce.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulation shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Contiguous range `[start, start+len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Self {
        let mut shape = self.shape.clone();
        shape[dim] = len;
        let mut data = Vec::with_capacity(shape.iter().product());
        for_each_index(&shape, |idx| {
            let mut src = idx.to_vec();
            src[dim] += start;
            data.push(self.get(&src));
        });
        DenseTensor { shape, data }
    }

    /// Chunk `index` of `parts` equal chunks along `dim`.
    pub fn chunk(&self, dim: usize, parts: usize, index: usize) -> Self {
        let len = self.shape[dim] / parts;
        self.narrow(dim, index * len, len)
    }

    pub fn concat(parts: &[DenseTensor], dim: usize) -> Self {
        let mut shape = parts[0].shape.clone();
        shape[dim] = parts.iter().map(|p| p.shape[dim]).sum();
        let mut out = DenseTensor::zeros(&shape);
        let st = strides(&shape);
        let mut base = 0;
        for p in parts {
            for_each_index(&p.shape, |idx| {
                let mut dst = idx.to_vec();
                dst[dim] += base;
                let off: usize = dst.iter().zip(&st).map(|(i, s)| i * s).sum();
                out.data[off] = p.get(idx);
            });
            base += p.shape[dim];
        }
        out
    }

    /// Copies `block` into `self` at per-dim `offset`.
    pub fn write_block(&mut self, offset: &[usize], block: &DenseTensor) {
        let st = strides(&self.shape);
        for_each_index(&block.shape, |idx| {
            let off: usize = idx.iter().zip(offset).zip(&st).map(|((i, o), s)| (i + o) * s).sum();
            self.data[off] = block.get(idx);
        });
    }

    /// Bitwise equality, treating NaNs with equal payloads as equal.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    /// Binary format: u32 rank, u32 dims, then f32 payload, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        let rank = u32::from_le_bytes(buf) as usize;
        if rank > crate::ir::MAX_RANK {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("rank {} too large", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut buf)?;
            shape.push(u32::from_le_bytes(buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        Ok(DenseTensor { shape, data })
    }
}

fn dot(lhs: &DenseTensor, rhs: &DenseTensor, d: &DotDims, out_shape: &[usize]) -> DenseTensor {
    let lhs_free = d.lhs_free(lhs.rank());
    let rhs_free = d.rhs_free(rhs.rank());
    let contract_shape: Vec<usize> = d.lhs_contract.iter().map(|&i| lhs.shape[i]).collect();
    let nb = d.lhs_batch.len();
    let nl = lhs_free.len();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    let mut li = vec![0; lhs.rank()];
    let mut ri = vec![0; rhs.rank()];
    let (ls, rs) = (strides(&lhs.shape), strides(&rhs.shape));
    for_each_index(out_shape, |o| {
        for (k, (&a, &b)) in d.lhs_batch.iter().zip(&d.rhs_batch).enumerate() {
            li[a] = o[k];
            ri[b] = o[k];
        }
        for (k, &a) in lhs_free.iter().enumerate() {
            li[a] = o[nb + k];
        }
        for (k, &b) in rhs_free.iter().enumerate() {
            ri[b] = o[nb + nl + k];
        }
        let mut acc = 0.0f32;
        if contract_shape.is_empty() {
            let lo: usize = li.iter().zip(&ls).map(|(i, s)| i * s).sum();
            let ro: usize = ri.iter().zip(&rs).map(|(i, s)| i * s).sum();
            acc += lhs.data[lo] * rhs.data[ro];
        } else {
            for_each_index(&contract_shape, |c| {
                for (k, (&a, &b)) in d.lhs_contract.iter().zip(&d.rhs_contract).enumerate() {
                    li[a] = c[k];
                    ri[b] = c[k];
                }
                let lo: usize = li.iter().zip(&ls).map(|(i, s)| i * s).sum();
                let ro: usize = ri.iter().zip(&rs).map(|(i, s)| i * s).sum();
                acc += lhs.data[lo] * rhs.data[ro];
            });
        }
        data.push(acc);
    });
    DenseTensor { shape: out_shape.to_vec(), data }
}

fn reduce(x: &DenseTensor, dims: &[usize], init: f32, f: impl Fn(f32, f32) -> f32) -> DenseTensor {
    let kept: Vec<usize> = (0..x.rank()).filter(|i| !dims.contains(i)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&i| x.shape[i]).collect();
    let mut sorted = dims.to_vec();
    sorted.sort_unstable();
    let red_sorted: Vec<usize> = sorted.iter().map(|&i| x.shape[i]).collect();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    let mut idx = vec![0; x.rank()];
    for_each_index(&out_shape, |o| {
        for (k, &d) in kept.iter().enumerate() {
            idx[d] = o[k];
        }
        let mut acc = init;
        for_each_index(&red_sorted, |r| {
            for (k, &d) in sorted.iter().enumerate() {
                idx[d] = r[k];
            }
            acc = f(acc, x.get(&idx));
        });
        data.push(acc);
    });
    DenseTensor { shape: out_shape, data }
}

/// Evaluates one base op on concrete operands. `out_shape` is the result
/// shape (local shape when running on a device).
pub fn eval_op(kind: &OpKind, args: &[&DenseTensor], out_shape: &[usize]) -> DenseTensor {
    match kind {
        OpKind::Constant { value } => DenseTensor::full(out_shape, *value),
        OpKind::Add => args[0].zip(args[1], |a, b| a + b),
        OpKind::Sub => args[0].zip(args[1], |a, b| a - b),
        OpKind::Mul => args[0].zip(args[1], |a, b| a * b),
        OpKind::Div => args[0].zip(args[1], |a, b| a / b),
        OpKind::Maximum => args[0].zip(args[1], f32::max),
        OpKind::Neg => args[0].map(|a| -a),
        OpKind::Exp => args[0].map(f32::exp),
        OpKind::Tanh => args[0].map(f32::tanh),
        OpKind::Rsqrt => args[0].map(|a| 1.0 / a.sqrt()),
        OpKind::Dot(d) => dot(args[0], args[1], d, out_shape),
        OpKind::ReduceSum { dims } => reduce(args[0], dims, 0.0, |a, b| a + b),
        OpKind::ReduceMax { dims } => reduce(args[0], dims, f32::NEG_INFINITY, f32::max),
        OpKind::Transpose { perm } => {
            let x = args[0];
            let mut data = Vec::with_capacity(x.len());
            let mut src = vec![0; x.rank()];
            for_each_index(out_shape, |o| {
                for (k, &p) in perm.iter().enumerate() {
                    src[p] = o[k];
                }
                data.push(x.get(&src));
            });
            DenseTensor { shape: out_shape.to_vec(), data }
        }
        OpKind::Reshape { .. } => DenseTensor { shape: out_shape.to_vec(), data: args[0].data.clone() },
        OpKind::BroadcastInDim { dims, .. } => {
            let x = args[0];
            let mut data = Vec::with_capacity(out_shape.iter().product());
            let mut src = vec![0; x.rank()];
            for_each_index(out_shape, |o| {
                for (k, &d) in dims.iter().enumerate() {
                    src[k] = if x.shape[k] == 1 { 0 } else { o[d] };
                }
                data.push(x.get(&src));
            });
            DenseTensor { shape: out_shape.to_vec(), data }
        }
        OpKind::Slice { start, .. } => {
            let x = args[0];
            let mut data = Vec::with_capacity(out_shape.iter().product());
            let mut src = vec![0; x.rank()];
            for_each_index(out_shape, |o| {
                for k in 0..o.len() {
                    src[k] = o[k] + start[k];
                }
                data.push(x.get(&src));
            });
            DenseTensor { shape: out_shape.to_vec(), data }
        }
        OpKind::Concatenate { dim } => {
            let parts: Vec<DenseTensor> = args.iter().map(|a| (*a).clone()).collect();
            DenseTensor::concat(&parts, *dim)
        }
    }
}
