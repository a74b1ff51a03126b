use serde::{Deserialize, Serialize};

use super::{Builder, ModelgenError};
use crate::ir::{DotDims, OpKind, Program};
use crate::mesh::Mesh;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Layer widths; `widths.len() - 1` dense layers.
    pub widths: Vec<usize>,
    pub batch: usize,
    /// Append gradients of `0.5 * sum(y^2)` and return them flattened after
    /// the loss.
    pub grads: bool,
    pub mesh: Vec<(String, usize)>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { widths: vec![16, 64, 16], batch: 8, grads: false, mesh: vec![("model".into(), 2)] }
    }
}

/// Chain of `tanh(dot(h, w_i) + b_i)`; `b_i` is `[batch, width]` as in the
/// linear golden program.
pub fn build_mlp(cfg: &MlpConfig) -> Result<Program, ModelgenError> {
    if cfg.widths.len() < 2 || cfg.widths.contains(&0) || cfg.batch == 0 {
        return Err(ModelgenError::Config("need at least two non-zero widths and a non-zero batch".into()));
    }
    let mesh =
        Mesh::new(cfg.mesh.iter().map(|(n, s)| (n.clone(), *s))).map_err(|e| ModelgenError::Config(e.to_string()))?;
    let depth = cfg.widths.len() - 1;
    let bt = cfg.batch;
    let mut b = Builder::new("mlp", mesh);
    let x = b.arg("x", &[bt, cfg.widths[0]], Some("input"));
    let mut params = Vec::new();
    for i in 0..depth {
        let w = b.arg(&format!("w{i}"), &[cfg.widths[i], cfg.widths[i + 1]], Some(&format!("layer_{i}/dense/w")));
        let bias = b.arg(&format!("b{i}"), &[bt, cfg.widths[i + 1]], Some(&format!("layer_{i}/dense/b")));
        params.push((w, bias));
    }
    let mut hs = vec![x];
    for (i, (w, bias)) in params.iter().enumerate() {
        let sw = format!("layer_{i}/dense/w");
        let y = b.op(&format!("y{i}"), OpKind::Dot(DotDims::matmul()), &[&hs[i], w], Some(&sw));
        let z = b.op(&format!("z{i}"), OpKind::Add, &[&y, bias], Some(&format!("layer_{i}/dense/b")));
        let h = b.op(&format!("h{i}"), OpKind::Tanh, &[&z], Some(&format!("layer_{i}/act")));
        hs.push(h);
    }
    if !cfg.grads {
        let out = hs.last().unwrap().clone();
        return Ok(b.finish(&out));
    }

    let out = hs[depth].clone();
    let sq = b.op("sq", OpKind::Mul, &[&out, &out], Some("loss"));
    let total = b.op("sumsq", OpKind::ReduceSum { dims: vec![0, 1] }, &[&sq], Some("loss"));
    let half = b.constant("half", 0.5, &[], Some("loss"));
    let loss = b.op("loss", OpKind::Mul, &[&total, &half], Some("loss"));
    let loss1 = b.op("loss_flat", OpKind::Reshape { shape: vec![1] }, &[&loss], Some("loss"));

    // d loss / d h_L = h_L.
    let mut g = out;
    let mut grads = vec![Vec::new(); depth];
    for i in (0..depth).rev() {
        let (w, _) = &params[i];
        let sw = format!("layer_{i}/dense/w");
        let sb = format!("layer_{i}/dense/b");
        let width = cfg.widths[i + 1];
        let h = hs[i + 1].clone();
        let one = b.constant(&format!("one{i}"), 1.0, &[bt, width], Some(&format!("layer_{i}/act")));
        let hh = b.op(&format!("hh{i}"), OpKind::Mul, &[&h, &h], Some(&format!("layer_{i}/act")));
        let dt = b.op(&format!("dtanh{i}"), OpKind::Sub, &[&one, &hh], Some(&format!("layer_{i}/act")));
        let gz = b.op(&format!("gz{i}"), OpKind::Mul, &[&g, &dt], Some(&sb));
        let gw = b.op(&format!("gw{i}"), OpKind::Dot(DotDims::contract(&[0], &[0])), &[&hs[i], &gz], Some(&sw));
        let n_w = cfg.widths[i] * width;
        let gw_flat = b.op(&format!("gw{i}_flat"), OpKind::Reshape { shape: vec![n_w] }, &[&gw], Some(&sw));
        let gb_flat = b.op(&format!("gb{i}_flat"), OpKind::Reshape { shape: vec![bt * width] }, &[&gz], Some(&sb));
        grads[i] = vec![gw_flat, gb_flat];
        if i > 0 {
            g = b.op(&format!("gh{i}"), OpKind::Dot(DotDims::contract(&[1], &[1])), &[&gz, w], Some(&sw));
        }
    }
    let mut parts = vec![loss1];
    parts.extend(grads.into_iter().flatten());
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    let all = b.op("loss_and_grads", OpKind::Concatenate { dim: 0 }, &refs, Some("loss"));
    Ok(b.finish(&all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{eval_base, random_inputs};
    use crate::ir::validate_and_infer;
    use crate::tensor::DenseTensor;
    use rand::SeedableRng;

    #[test]
    fn forward_only() {
        let p = build_mlp(&MlpConfig::default()).unwrap();
        validate_and_infer(&p).unwrap();
        assert_eq!(p.args.iter().filter(|a| a.id.starts_with('w')).count(), 2);
        assert_eq!(p.num_ops(), 6);
    }

    #[test]
    fn one_layer_is_linear_plus_tanh() {
        let cfg = MlpConfig { widths: vec![16, 64], ..Default::default() };
        let p = build_mlp(&cfg).unwrap();
        let lin = crate::modelgen::linear();
        let shapes = |p: &Program| p.args.iter().map(|a| a.ty.shape.clone()).collect::<Vec<_>>();
        assert_eq!(shapes(&p), shapes(&lin));
        let kinds: Vec<&str> = p.base_ops().map(|o| o.kind.name()).collect();
        assert_eq!(kinds, ["dot", "add", "tanh"]);
        for (a, b) in p.base_ops().zip(lin.base_ops()) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.ty, b.ty);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = MlpConfig { widths: vec![3, 4, 2], batch: 2, grads: true, ..Default::default() };
        let p = build_mlp(&cfg).unwrap();
        validate_and_infer(&p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let inputs = random_inputs(&p, &mut rng);
        let out = eval_base(&p, &inputs).unwrap();
        let loss_at = |inputs: &[DenseTensor]| eval_base(&p, inputs).unwrap().data[0] as f64;
        // Flattened gradient layout: [loss, gw0, gb0, gw1, gb1].
        let mut offset = 1;
        for arg in 1..p.args.len() {
            let n = inputs[arg].len();
            for j in 0..n {
                let eps = 1e-2f32;
                let mut plus = inputs.clone();
                plus[arg].data[j] += eps;
                let mut minus = inputs.clone();
                minus[arg].data[j] -= eps;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps as f64);
                let g = out.data[offset + j] as f64;
                assert!((fd - g).abs() <= 1e-3 * g.abs().max(1.0), "arg {} elem {}: fd {} vs {}", arg, j, fd, g);
            }
            offset += n;
        }
        assert_eq!(offset, out.len());
    }
}
