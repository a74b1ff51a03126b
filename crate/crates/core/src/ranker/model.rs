use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphEncoding, TrainingExample};

const HEADER: &str = "partir-ranker v1";
const MARGIN: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum RankerError {
    #[error("model file: {0}")]
    Format(String),
    #[error("feature width {got} does not match model width {want}")]
    Width { got: usize, want: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Two rounds of mean-aggregation message passing followed by a linear
/// scorer:
///
/// `h1 = tanh(W1 [x, mean_nbr x] + b1)`, `h2 = tanh(W2 [h1, mean_nbr h1] + b2)`,
/// `score = u . h2 + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankerModel {
    pub width: usize,
    pub hidden: usize,
    /// Flat parameters: W1 (hidden x 2*width), b1, W2 (hidden x 2*hidden),
    /// b2, u, c.
    pub params: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    u: usize,
    c: usize,
    len: usize,
}

fn layout(f: usize, h: usize) -> Layout {
    let w1 = 0;
    let b1 = w1 + h * 2 * f;
    let w2 = b1 + h;
    let b2 = w2 + h * 2 * h;
    let u = b2 + h;
    let c = u + h;
    Layout { w1, b1, w2, b2, u, c, len: c + 1 }
}

/// Row-wise mean over neighbours; isolated nodes aggregate to zero.
fn aggregate(g: &GraphEncoding, x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (i, nb) in g.neighbors.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let inv = 1.0 / nb.len() as f64;
        for &j in nb {
            for k in 0..d {
                out[i * d + k] += inv * x[j * d + k];
            }
        }
    }
    out
}

/// Transpose of `aggregate`: scatters each row's gradient to its neighbours.
fn aggregate_t(g: &GraphEncoding, dy: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; dy.len()];
    for (i, nb) in g.neighbors.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let inv = 1.0 / nb.len() as f64;
        for &j in nb {
            for k in 0..d {
                out[j * d + k] += inv * dy[i * d + k];
            }
        }
    }
    out
}

struct Forward {
    m0: Vec<f64>,
    h1: Vec<f64>,
    m1: Vec<f64>,
    h2: Vec<f64>,
    scores: Vec<f64>,
}

impl RankerModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(width: usize, hidden: usize, seed: u64) -> Self {
        let l = layout(width, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; l.len];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.gen_range(-a..a);
            }
        };
        fill(l.w1..l.b1, 2 * width, hidden);
        fill(l.w2..l.b2, 2 * hidden, hidden);
        fill(l.u..l.c, hidden, 1);
        RankerModel { width, hidden, params }
    }

    fn dense(&self, w: usize, b: usize, x: &[f64], m: &[f64], d: usize, n: usize) -> Vec<f64> {
        let h = self.hidden;
        let p = &self.params;
        let mut out = vec![0.0; n * h];
        for i in 0..n {
            let (xi, mi) = (&x[i * d..(i + 1) * d], &m[i * d..(i + 1) * d]);
            for r in 0..h {
                let row = &p[w + r * 2 * d..w + (r + 1) * 2 * d];
                let mut z = p[b + r];
                for k in 0..d {
                    z += row[k] * xi[k] + row[d + k] * mi[k];
                }
                out[i * h + r] = z.tanh();
            }
        }
        out
    }

    fn forward(&self, g: &GraphEncoding) -> Forward {
        let l = layout(self.width, self.hidden);
        let (n, f, h) = (g.num_nodes(), self.width, self.hidden);
        let m0 = aggregate(g, &g.features, f);
        let h1 = self.dense(l.w1, l.b1, &g.features, &m0, f, n);
        let m1 = aggregate(g, &h1, h);
        let h2 = self.dense(l.w2, l.b2, &h1, &m1, h, n);
        let u = &self.params[l.u..l.c];
        let scores = (0..n).map(|i| self.params[l.c] + (0..h).map(|k| u[k] * h2[i * h + k]).sum::<f64>()).collect();
        Forward { m0, h1, m1, h2, scores }
    }

    pub fn scores(&self, g: &GraphEncoding) -> Vec<f64> {
        self.forward(g).scores
    }

    /// Gradient of `sum_i dscore[i] * score[i]` with respect to the params.
    fn backward(&self, g: &GraphEncoding, fw: &Forward, dscore: &[f64]) -> Vec<f64> {
        let l = layout(self.width, self.hidden);
        let (n, f, h) = (g.num_nodes(), self.width, self.hidden);
        let p = &self.params;
        let mut grad = vec![0.0; l.len];
        let mut dz2 = vec![0.0; n * h];
        for i in 0..n {
            grad[l.c] += dscore[i];
            for k in 0..h {
                let y = fw.h2[i * h + k];
                grad[l.u + k] += dscore[i] * y;
                dz2[i * h + k] = dscore[i] * p[l.u + k] * (1.0 - y * y);
            }
        }
        let (dh1, dm1) = dense_backward(p, l.w2, l.b2, &fw.h1, &fw.m1, &dz2, h, h, n, &mut grad);
        let dh1_total: Vec<f64> = dh1.iter().zip(aggregate_t(g, &dm1, h)).map(|(a, b)| a + b).collect();
        let dz1: Vec<f64> = dh1_total.iter().zip(&fw.h1).map(|(d, y)| d * (1.0 - y * y)).collect();
        dense_backward(p, l.w1, l.b1, &g.features, &fw.m0, &dz1, f, h, n, &mut grad);
        grad
    }

    /// Pairwise hinge loss over one example and its parameter gradient.
    pub fn loss_and_grad(&self, ex: &TrainingExample) -> (f64, Vec<f64>) {
        let fw = self.forward(&ex.graph);
        let (loss, dscore) = hinge(&fw.scores, &ex.graph.candidates, &ex.labels);
        let grad = if loss > 0.0 { self.backward(&ex.graph, &fw, &dscore) } else { vec![0.0; self.params.len()] };
        (loss, grad)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\nwidth {}\nhidden {}\nparams {}\n", self.width, self.hidden, self.params.len());
        for chunk in self.params.chunks(8) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:e}")).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RankerError> {
        let bad = |m: &str| RankerError::Format(m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(bad("missing or unsupported version header"));
        }
        let mut field = |name: &str| -> Result<usize, RankerError> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing {name}")))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next().and_then(|v| v.parse().ok())) {
                (Some(n), Some(v)) if n == name => Ok(v),
                _ => Err(bad(&format!("expected `{name} <n>`"))),
            }
        };
        let (width, hidden, count) = (field("width")?, field("hidden")?, field("params")?);
        let params: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad number `{t}`"))))
            .collect::<Result<_, _>>()?;
        if params.len() != count || count != layout(width, hidden).len {
            return Err(bad("parameter count does not match dimensions"));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(RankerModel { width, hidden, params })
    }

    pub fn check_width(&self, g: &GraphEncoding) -> Result<(), RankerError> {
        if g.width != self.width {
            return Err(RankerError::Width { got: g.width, want: self.width });
        }
        Ok(())
    }
}

/// Backprop through `y = tanh(W [x, m] + b)` given `dz = dL/d(pre-activation)`.
/// Accumulates weight and bias gradients, returns `(dx, dm)`.
#[allow(clippy::too_many_arguments)]
fn dense_backward(
    p: &[f64],
    w: usize,
    b: usize,
    x: &[f64],
    m: &[f64],
    dz: &[f64],
    d: usize,
    h: usize,
    n: usize,
    grad: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * d];
    let mut dm = vec![0.0; n * d];
    for i in 0..n {
        for r in 0..h {
            let g = dz[i * h + r];
            if g == 0.0 {
                continue;
            }
            grad[b + r] += g;
            let base = w + r * 2 * d;
            for k in 0..d {
                grad[base + k] += g * x[i * d + k];
                grad[base + d + k] += g * m[i * d + k];
                dx[i * d + k] += g * p[base + k];
                dm[i * d + k] += g * p[base + d + k];
            }
        }
    }
    (dx, dm)
}

/// Mean over (labelled, unlabelled) candidate pairs of
/// `max(0, margin - (s_pos - s_neg))`, with d loss / d score.
fn hinge(scores: &[f64], candidates: &[usize], labels: &[usize]) -> (f64, Vec<f64>) {
    let mut d = vec![0.0; scores.len()];
    let pos: Vec<usize> = candidates.iter().copied().filter(|c| labels.contains(c)).collect();
    let neg: Vec<usize> = candidates.iter().copied().filter(|c| !labels.contains(c)).collect();
    let pairs = pos.len() * neg.len();
    if pairs == 0 {
        return (0.0, d);
    }
    let inv = 1.0 / pairs as f64;
    let mut loss = 0.0;
    for &i in &pos {
        for &j in &neg {
            let l = MARGIN - (scores[i] - scores[j]);
            if l > 0.0 {
                loss += l * inv;
                d[i] -= inv;
                d[j] += inv;
            }
        }
    }
    (loss, d)
}

/// Mean hinge loss over a dataset.
pub fn ranking_loss(m: &RankerModel, data: &[TrainingExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().map(|ex| hinge(&m.scores(&ex.graph), &ex.graph.candidates, &ex.labels).0).sum::<f64>()
        / data.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, learning_rate: 0.05, hidden: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

/// Plain per-example gradient descent on the pairwise hinge loss, visiting
/// examples in a seeded shuffled order each epoch.
pub fn train(data: &[TrainingExample], cfg: &TrainConfig) -> Result<(RankerModel, TrainReport), RankerError> {
    use rand::seq::SliceRandom;
    let first = data.first().ok_or(RankerError::EmptyDataset)?;
    let mut m = RankerModel::init(first.graph.width, cfg.hidden, cfg.seed);
    for ex in data {
        m.check_width(&ex.graph)?;
    }
    let initial_loss = ranking_loss(&m, data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (loss, grad) = m.loss_and_grad(&data[i]);
            if loss == 0.0 {
                continue;
            }
            for (p, g) in m.params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }
    let final_loss = ranking_loss(&m, data);
    Ok((m, TrainReport { initial_loss, final_loss, epochs: cfg.epochs }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgen::linear;
    use crate::ranker::featurize;

    fn linear_example() -> TrainingExample {
        let graph = featurize(&linear()).unwrap();
        TrainingExample { program: "linear".into(), graph, labels: vec![1] }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ex = linear_example();
        let mut m = RankerModel::init(ex.graph.width, 6, 11);
        // Random biases too, so every block is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in &mut m.params {
            *p += rng.gen_range(-0.3..0.3);
        }
        // Smooth objective: weighted sum of scores.
        let weights: Vec<f64> = (0..ex.graph.num_nodes()).map(|i| 0.5 + i as f64).collect();
        let obj = |m: &RankerModel| m.scores(&ex.graph).iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>();
        let grad = m.backward(&ex.graph, &m.forward(&ex.graph), &weights);
        let eps = 1e-4;
        for i in 0..m.params.len() {
            let mut plus = m.clone();
            plus.params[i] += eps;
            let mut minus = m.clone();
            minus.params[i] -= eps;
            let fd = (obj(&plus) - obj(&minus)) / (2.0 * eps);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1.0), "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn singleton_converges() {
        let data = vec![linear_example()];
        let (m, rep) = train(&data, &TrainConfig { epochs: 200, ..Default::default() }).unwrap();
        assert!(rep.final_loss < 0.1, "{rep:?}");
        let s = m.scores(&data[0].graph);
        assert!(s[1] > s[0] && s[1] > s[2]);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = vec![linear_example()];
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (m, _) = train(&data, &cfg).unwrap();
        assert_eq!(m, RankerModel::init(data[0].graph.width, cfg.hidden, cfg.seed));
    }

    #[test]
    fn text_round_trip() {
        let m = RankerModel::init(30, 5, 1);
        assert_eq!(RankerModel::from_text(&m.to_text()).unwrap(), m);
        assert!(RankerModel::from_text("partir-ranker v9\n").is_err());
        let truncated: String = m.to_text().lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(RankerModel::from_text(&truncated).is_err());
    }

    #[test]
    fn hinge_counts_violations() {
        let (l, d) = hinge(&[0.0, 2.0, 0.5], &[0, 1, 2], &[1]);
        assert_eq!(l, 0.0);
        assert!(d.iter().all(|&x| x == 0.0));
        let (l, d) = hinge(&[1.0, 0.0, 0.0], &[0, 1, 2], &[1]);
        assert!((l - 1.5).abs() < 1e-12);
        assert_eq!(d, [0.5, -1.0, 0.5]);
    }
}
