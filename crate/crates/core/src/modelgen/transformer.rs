use serde::{Deserialize, Serialize};

use super::{Builder, ModelgenError};
use crate::ir::{DotDims, OpKind, Program};
use crate::mesh::Mesh;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub seq: usize,
    pub batch: usize,
    /// Bias vectors on the MLP matmuls.
    pub mlp_bias: bool,
    /// Learned gains on both layer norms.
    pub ln_gain: bool,
    /// Mesh axes as (name, size).
    pub mesh: Vec<(String, usize)>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            d_model: 8,
            d_ff: 32,
            heads: 2,
            seq: 4,
            batch: 2,
            mlp_bias: false,
            ln_gain: false,
            mesh: vec![("model".into(), 2)],
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ModelgenError> {
        let dims = [self.d_model, self.d_ff, self.heads, self.seq, self.batch];
        if dims.contains(&0) {
            return Err(ModelgenError::Config("all dims must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelgenError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// LayerNorm over the last dim from primitives (no max subtraction needed).
fn layer_norm(b: &mut Builder, x: &str, gain: Option<&str>, prefix: &str, scope: &str) -> String {
    let s = Some(scope);
    let shape = b.shape(x);
    let (bs, d) = (&shape[..2], shape[2]);
    let inv_d = b.constant(&format!("{prefix}_invd"), 1.0 / d as f32, bs, s);
    let sum = b.op(&format!("{prefix}_sum"), OpKind::ReduceSum { dims: vec![2] }, &[x], s);
    let mean = b.op(&format!("{prefix}_mean"), OpKind::Mul, &[&sum, &inv_d], s);
    let bcast = OpKind::BroadcastInDim { shape: shape.clone(), dims: vec![0, 1] };
    let mean_b = b.op(&format!("{prefix}_meanb"), bcast.clone(), &[&mean], s);
    let c = b.op(&format!("{prefix}_c"), OpKind::Sub, &[x, &mean_b], s);
    let sq = b.op(&format!("{prefix}_sq"), OpKind::Mul, &[&c, &c], s);
    let vsum = b.op(&format!("{prefix}_vsum"), OpKind::ReduceSum { dims: vec![2] }, &[&sq], s);
    let var = b.op(&format!("{prefix}_var"), OpKind::Mul, &[&vsum, &inv_d], s);
    let eps = b.constant(&format!("{prefix}_eps"), 1e-5, bs, s);
    let ve = b.op(&format!("{prefix}_ve"), OpKind::Add, &[&var, &eps], s);
    let r = b.op(&format!("{prefix}_rstd"), OpKind::Rsqrt, &[&ve], s);
    let rb = b.op(&format!("{prefix}_rstdb"), bcast, &[&r], s);
    let y = b.op(&format!("{prefix}_norm"), OpKind::Mul, &[&c, &rb], s);
    match gain {
        Some(g) => {
            let gb = b.op(&format!("{prefix}_gainb"), OpKind::BroadcastInDim { shape, dims: vec![2] }, &[g], s);
            b.op(&format!("{prefix}_out"), OpKind::Mul, &[&y, &gb], s)
        }
        None => y,
    }
}

/// Pre-LN transformer forward pass: per layer, multi-head attention and a
/// tanh MLP, each behind a residual add. Parameters are scoped
/// `layer_<i>/<block>/<name>`.
pub fn build_transformer(cfg: &TransformerConfig) -> Result<Program, ModelgenError> {
    cfg.validate()?;
    let mesh =
        Mesh::new(cfg.mesh.iter().map(|(n, s)| (n.clone(), *s))).map_err(|e| ModelgenError::Config(e.to_string()))?;
    let (bt, sq, d, ff, h) = (cfg.batch, cfg.seq, cfg.d_model, cfg.d_ff, cfg.heads);
    let dh = d / h;
    let mut b = Builder::new("transformer", mesh);
    let mut x = b.arg("x", &[bt, sq, d], Some("input"));

    // Parameters first, in layer order, so argument order is stable.
    struct Layer {
        ln1: Option<String>,
        wq: String,
        wk: String,
        wv: String,
        wo: String,
        ln2: Option<String>,
        w1: String,
        b1: Option<String>,
        w2: String,
        b2: Option<String>,
    }
    let mut layers = Vec::new();
    for i in 0..cfg.layers {
        let sc = |blk: &str, n: &str| format!("layer_{i}/{blk}/{n}");
        let ln1 = cfg.ln_gain.then(|| b.arg(&format!("l{i}_ln1_g"), &[d], Some(&sc("ln1", "gain"))));
        let wq = b.arg(&format!("l{i}_wq"), &[d, h, dh], Some(&sc("attention", "q_proj")));
        let wk = b.arg(&format!("l{i}_wk"), &[d, h, dh], Some(&sc("attention", "k_proj")));
        let wv = b.arg(&format!("l{i}_wv"), &[d, h, dh], Some(&sc("attention", "v_proj")));
        let wo = b.arg(&format!("l{i}_wo"), &[h, dh, d], Some(&sc("attention", "o_proj")));
        let ln2 = cfg.ln_gain.then(|| b.arg(&format!("l{i}_ln2_g"), &[d], Some(&sc("ln2", "gain"))));
        let w1 = b.arg(&format!("l{i}_w1"), &[d, ff], Some(&sc("mlp", "fc1")));
        let b1 = cfg.mlp_bias.then(|| b.arg(&format!("l{i}_b1"), &[ff], Some(&sc("mlp", "fc1_bias"))));
        let w2 = b.arg(&format!("l{i}_w2"), &[ff, d], Some(&sc("mlp", "fc2")));
        let b2 = cfg.mlp_bias.then(|| b.arg(&format!("l{i}_b2"), &[d], Some(&sc("mlp", "fc2_bias"))));
        layers.push(Layer { ln1, wq, wk, wv, wo, ln2, w1, b1, w2, b2 });
    }

    let proj = OpKind::Dot(DotDims::contract(&[2], &[0]));
    for (i, l) in layers.iter().enumerate() {
        let sc = |blk: &str, n: &str| format!("layer_{i}/{blk}/{n}");
        let p = |n: &str| format!("l{i}_{n}");

        let a = layer_norm(&mut b, &x, l.ln1.as_deref(), &p("ln1"), &format!("layer_{i}/ln1"));
        let s_q = sc("attention", "q_proj");
        let q = b.op(&p("q"), proj.clone(), &[&a, &l.wq], Some(&s_q));
        let s_k = sc("attention", "k_proj");
        let k = b.op(&p("k"), proj.clone(), &[&a, &l.wk], Some(&s_k));
        let s_v = sc("attention", "v_proj");
        let v = b.op(&p("v"), proj.clone(), &[&a, &l.wv], Some(&s_v));

        let s_att = sc("attention", "scores");
        let att = Some(s_att.as_str());
        let scores_kind = OpKind::Dot(DotDims::contract(&[3], &[3]).with_batch(&[0, 2], &[0, 2]));
        let scores = b.op(&p("scores"), scores_kind, &[&q, &k], att);
        let scale = b.constant(&p("scale"), 1.0 / (dh as f32).sqrt(), &[bt, h, sq, sq], att);
        let scaled = b.op(&p("scaled"), OpKind::Mul, &[&scores, &scale], att);
        let e = b.op(&p("exp"), OpKind::Exp, &[&scaled], att);
        let den = b.op(&p("den"), OpKind::ReduceSum { dims: vec![3] }, &[&e], att);
        let denb =
            b.op(&p("denb"), OpKind::BroadcastInDim { shape: vec![bt, h, sq, sq], dims: vec![0, 1, 2] }, &[&den], att);
        let probs = b.op(&p("probs"), OpKind::Div, &[&e, &denb], att);
        let ctx_kind = OpKind::Dot(DotDims::contract(&[3], &[1]).with_batch(&[0, 1], &[0, 2]));
        let ctx = b.op(&p("ctx"), ctx_kind, &[&probs, &v], att);
        let s_o = sc("attention", "o_proj");
        let out = b.op(&p("attn_out"), OpKind::Dot(DotDims::contract(&[1, 3], &[0, 1])), &[&ctx, &l.wo], Some(&s_o));
        let x1 = b.op(&p("res1"), OpKind::Add, &[&x, &out], Some(&format!("layer_{i}/attention/residual")));

        let m = layer_norm(&mut b, &x1, l.ln2.as_deref(), &p("ln2"), &format!("layer_{i}/ln2"));
        let s_fc1 = sc("mlp", "fc1");
        let mut hdn = b.op(&p("fc1"), proj.clone(), &[&m, &l.w1], Some(&s_fc1));
        if let Some(b1) = &l.b1 {
            let bb = b.op(
                &p("fc1_biasb"),
                OpKind::BroadcastInDim { shape: vec![bt, sq, ff], dims: vec![2] },
                &[b1],
                Some(&s_fc1),
            );
            hdn = b.op(&p("fc1_bias"), OpKind::Add, &[&hdn, &bb], Some(&s_fc1));
        }
        let act = b.op(&p("act"), OpKind::Tanh, &[&hdn], Some(&s_fc1));
        let s_fc2 = sc("mlp", "fc2");
        let mut o = b.op(&p("fc2"), proj.clone(), &[&act, &l.w2], Some(&s_fc2));
        if let Some(b2) = &l.b2 {
            let bb = b.op(
                &p("fc2_biasb"),
                OpKind::BroadcastInDim { shape: vec![bt, sq, d], dims: vec![2] },
                &[b2],
                Some(&s_fc2),
            );
            o = b.op(&p("fc2_bias"), OpKind::Add, &[&o, &bb], Some(&s_fc2));
        }
        x = b.op(&p("res2"), OpKind::Add, &[&x1, &o], Some(&format!("layer_{i}/mlp/residual")));
    }
    Ok(b.finish(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{eval_base, random_inputs};
    use crate::ir::{parse_program, print_program, validate_and_infer};
    use rand::SeedableRng;

    #[test]
    fn toy_transformer_shapes() {
        let p = build_transformer(&TransformerConfig::default()).unwrap();
        validate_and_infer(&p).unwrap();
        assert_eq!(p.args.len(), 1 + 2 * 6);
        assert_eq!(p.result_type().unwrap().shape, vec![2, 4, 8]);
        assert_eq!(p.args[1].scope.as_deref(), Some("layer_0/attention/q_proj"));
        assert_eq!(parse_program(&print_program(&p)).unwrap(), p);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = eval_base(&p, &random_inputs(&p, &mut rng)).unwrap();
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn variants() {
        let cfg = TransformerConfig { mlp_bias: true, ln_gain: true, layers: 1, ..Default::default() };
        let p = build_transformer(&cfg).unwrap();
        assert_eq!(p.args.len(), 1 + 10);
        validate_and_infer(&p).unwrap();
    }

    #[test]
    fn zero_layers_is_identity() {
        let p = build_transformer(&TransformerConfig { layers: 0, ..Default::default() }).unwrap();
        assert!(p.body.is_empty());
        assert_eq!(p.result, "x");
    }

    #[test]
    fn heads_must_divide() {
        let cfg = TransformerConfig { heads: 3, ..Default::default() };
        assert!(build_transformer(&cfg).is_err());
    }
}
