//! Break-location / break-size diagnosis on top of a frozen encoder, the
//! end-to-end comparator, k-NN, and the evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::datagen::{BreakLocation, MAX_BREAK_CM};
use crate::error::{PaeError, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng;
use crate::training::{nadam_step, NadamConfig, OptimizerState};

const CLASSES: usize = 2;

/// Softmax cross-entropy summed over the batch; `one_hot` is `[batch × C]`.
pub fn cross_entropy(logits: &Tensor, one_hot: &Tensor) -> Result<f64> {
    if logits.shape() != one_hot.shape() || logits.shape().len() != 2 {
        return Err(PaeError::shape("cross_entropy", logits.shape(), one_hot.shape()));
    }
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let y = one_hot.row(r);
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(PaeError::Parameter(format!("label row {r} is not one-hot")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let target = y.iter().position(|&v| v == 1.0).expect("one entry set");
        total += lse - row[target];
    }
    Ok(total)
}

pub fn joint_loss(cls_loss: f64, reg_loss: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PaeError::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * cls_loss + (1.0 - alpha) * reg_loss)
}

/// `confusion[true][predicted]`.
pub type Confusion = [[usize; CLASSES]; CLASSES];

pub fn confusion(truth: &[usize], pred: &[usize]) -> Result<Confusion> {
    if truth.len() != pred.len() {
        return Err(PaeError::shape("confusion", &[truth.len()], &[pred.len()]));
    }
    let mut c = [[0; CLASSES]; CLASSES];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= CLASSES || p >= CLASSES {
            return Err(PaeError::Parameter(format!("class index out of range: {t}/{p}")));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: &Confusion, class: usize) -> f64 {
    ratio(c[class][class], (0..CLASSES).map(|t| c[t][class]).sum())
}

pub fn recall(c: &Confusion, class: usize) -> f64 {
    ratio(c[class][class], c[class].iter().sum())
}

/// Harmonic mean of precision and recall; 0 when both vanish.
pub fn f1(c: &Confusion, class: usize) -> f64 {
    let (p, r) = (precision(c, class), recall(c, class));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unweighted mean of per-class F1. Every class needs at least one sample.
pub fn macro_f1(c: &Confusion) -> Result<f64> {
    for class in 0..CLASSES {
        if c[class].iter().sum::<usize>() == 0 {
            return Err(PaeError::Metric(format!(
                "class {} ({}) has no samples",
                class,
                BreakLocation::from_class_index(class).as_str()
            )));
        }
    }
    Ok((0..CLASSES).map(|k| f1(c, k)).sum::<f64>() / CLASSES as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(PaeError::shape("rmse", &[pred.len()], &[truth.len()]));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Labelled feature rows (latents or flattened windows).
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sizes_cm: Vec<f64>,
}

impl Samples {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, sizes_cm: Vec<f64>) -> Result<Self> {
        if features.len() != labels.len() || features.len() != sizes_cm.len() {
            return Err(PaeError::shape("samples", &[features.len()], &[labels.len(), sizes_cm.len()]));
        }
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != dim) {
            return Err(PaeError::Parameter("feature rows differ in length".into()));
        }
        if labels.iter().any(|&l| l >= CLASSES) {
            return Err(PaeError::Parameter("label out of range".into()));
        }
        Ok(Self {
            features,
            labels,
            sizes_cm,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

/// Feature-wise z-score fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn matrix(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let dim = self.mean.len();
        let data = rows.iter().flat_map(|r| self.apply(r)).collect();
        Tensor::matrix(rows.len(), dim, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    /// Weight on the classification loss.
    pub alpha: f64,
    pub iterations: usize,
    pub optimizer: NadamConfig,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64, 32],
            alpha: 0.5,
            iterations: 256,
            optimizer: NadamConfig::default(),
            seed: 0,
        }
    }
}

/// Shared MLP trunk with a 2-logit classification branch and a scalar
/// regression branch predicting size / 35.5 cm.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosisHead {
    pub standardizer: Standardizer,
    /// `[W, b]` per trunk layer, then classifier `[W, b]`, then regressor.
    pub params: Vec<Tensor>,
}

struct HeadNodes {
    logits: NodeId,
    size: NodeId,
}

impl DiagnosisHead {
    fn init(input_dim: usize, hidden: &[usize], standardizer: Standardizer, seed: u64) -> Self {
        let mut rng = rng::substream(seed, &[0x4ead]);
        let mut params = Vec::new();
        let mut layer = |fan_in: usize, fan_out: usize, rng: &mut rng::Stream| {
            let std = (1.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng::truncated_normal(rng, std)).collect();
            params.push(Tensor::matrix(fan_in, fan_out, w).expect("sized"));
            params.push(Tensor::zeros(&[fan_out]));
        };
        let mut fan_in = input_dim;
        for &h in hidden {
            layer(fan_in, h, &mut rng);
            fan_in = h;
        }
        layer(fan_in, CLASSES, &mut rng);
        layer(fan_in, 1, &mut rng);
        Self { standardizer, params }
    }

    fn forward(&self, g: &mut Graph<'_>, x: NodeId, nodes: &[NodeId]) -> Result<HeadNodes> {
        let trunk = (nodes.len() - 4) / 2;
        let mut h = x;
        for l in 0..trunk {
            h = g.affine(h, nodes[2 * l], nodes[2 * l + 1])?;
            h = g.gelu(h);
        }
        let logits = g.affine(h, nodes[2 * trunk], nodes[2 * trunk + 1])?;
        let size = g.affine(h, nodes[2 * trunk + 2], nodes[2 * trunk + 3])?;
        Ok(HeadNodes { logits, size })
    }

    /// (class index, size in cm) per row.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.standardizer.matrix(features)?;
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = self.params.iter().map(|t| g.leaf(t)).collect();
        let xn = g.leaf(&x);
        let out = self.forward(&mut g, xn, &nodes)?;
        let logits = g.value(out.logits);
        let size = g.value(out.size);
        Ok((0..features.len())
            .map(|r| {
                let row = &logits[r * CLASSES..(r + 1) * CLASSES];
                // ties go to the lower class index
                let class = if row[1] > row[0] { 1 } else { 0 };
                (class, size[r] * MAX_BREAK_CM)
            })
            .collect())
    }
}

/// Full-batch joint training: `alpha · CE + (1 − alpha) · SSE(size / 35.5)`.
pub fn train_heads(train: &Samples, cfg: &HeadConfig) -> Result<DiagnosisHead> {
    if train.is_empty() {
        return Err(PaeError::Contract("no training samples".into()));
    }
    if (0..CLASSES).any(|k| !train.labels.contains(&k)) {
        return Err(PaeError::Contract("training labels contain a single class".into()));
    }
    joint_loss(0.0, 0.0, cfg.alpha)?;
    cfg.optimizer.validate()?;
    let standardizer = Standardizer::fit(&train.features);
    let x = standardizer.matrix(&train.features)?;
    let targets = Tensor::matrix(train.len(), 1, train.sizes_cm.iter().map(|s| s / MAX_BREAK_CM).collect())?;
    let mut head = DiagnosisHead::init(train.dim(), &cfg.hidden, standardizer, cfg.seed);
    let mut state = OptimizerState::new(&head.params);

    for _ in 0..cfg.iterations {
        let grads = {
            let mut g = Graph::new();
            let nodes: Vec<NodeId> = head.params.iter().map(|t| g.param(t)).collect();
            let xn = g.leaf(&x);
            let yn = g.leaf(&targets);
            let out = head.forward(&mut g, xn, &nodes)?;
            let ce = g.softmax_cross_entropy(out.logits, &train.labels)?;
            let se = g.sse(out.size, yn)?;
            let ce = g.scale(ce, cfg.alpha);
            let se = g.scale(se, 1.0 - cfg.alpha);
            let loss = g.add(ce, se)?;
            if !g.scalar(loss).is_finite() {
                return Err(PaeError::Numeric {
                    stage: "diagnosis head loss".into(),
                });
            }
            g.backward(loss)?;
            nodes
                .iter()
                .zip(&head.params)
                .map(|(&id, t)| g.grad(id).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect::<Vec<_>>()
        };
        for (p, gr) in head.params.iter_mut().zip(&grads) {
            p.zero_grad();
            p.accumulate_grad(gr)?;
        }
        nadam_step(&mut head.params, &mut state, &cfg.optimizer)?;
        head.params.iter_mut().for_each(Tensor::zero_grad);
    }
    Ok(head)
}

/// Majority vote (ties → lower class) and mean neighbour size among the `k`
/// Euclidean-nearest training rows; distance ties keep training order.
pub fn knn_predict(train: &Samples, query: &[f64], k: usize) -> Result<(usize, f64)> {
    if k == 0 || k > train.len() {
        return Err(PaeError::Parameter(format!("k = {k} outside 1..={}", train.len())));
    }
    if query.len() != train.dim() {
        return Err(PaeError::shape("knn_predict", &[query.len()], &[train.dim()]));
    }
    let mut dist: Vec<(f64, usize)> = train
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = [0usize; CLASSES];
    let mut size = 0.0;
    for &(_, i) in &dist[..k] {
        votes[train.labels[i]] += 1;
        size += train.sizes_cm[i];
    }
    let class = if votes[1] > votes[0] { 1 } else { 0 };
    Ok((class, size / k as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TwoStage,
    EndToEnd,
    Knn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionInfo {
    pub snr_db: f64,
    pub mask_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cold_precision: f64,
    pub hot_precision: f64,
    pub macro_f1: f64,
    pub rmse_cm: f64,
    pub confusion: Confusion,
    pub mode: Mode,
    pub corruption: CorruptionInfo,
}

pub fn report(test: &Samples, predictions: &[(usize, f64)], mode: Mode, corruption: CorruptionInfo) -> Result<EvalReport> {
    let pred_class: Vec<usize> = predictions.iter().map(|p| p.0).collect();
    let pred_size: Vec<f64> = predictions.iter().map(|p| p.1).collect();
    let c = confusion(&test.labels, &pred_class)?;
    Ok(EvalReport {
        cold_precision: precision(&c, BreakLocation::ColdLeg.class_index()),
        hot_precision: precision(&c, BreakLocation::HotLeg.class_index()),
        macro_f1: macro_f1(&c)?,
        rmse_cm: rmse(&pred_size, &test.sizes_cm)?,
        confusion: c,
        mode,
        corruption,
    })
}

/// Heads trained on latents of the training split, scored on the test split.
pub fn two_stage(train: &Samples, test: &Samples, cfg: &HeadConfig, corruption: CorruptionInfo) -> Result<EvalReport> {
    let head = train_heads(train, cfg)?;
    report(test, &head.predict(&test.features)?, Mode::TwoStage, corruption)
}

/// Same head shape trained directly on flattened corrupted windows.
pub fn end_to_end_baseline(train: &Samples, test: &Samples, cfg: &HeadConfig, corruption: CorruptionInfo) -> Result<EvalReport> {
    let head = train_heads(train, cfg)?;
    report(test, &head.predict(&test.features)?, Mode::EndToEnd, corruption)
}

/// k-NN on standardized features.
pub fn knn_baseline(train: &Samples, test: &Samples, k: usize, corruption: CorruptionInfo) -> Result<EvalReport> {
    let s = Standardizer::fit(&train.features);
    let scaled = Samples {
        features: train.features.iter().map(|f| s.apply(f)).collect(),
        ..train.clone()
    };
    let preds = test
        .features
        .iter()
        .map(|f| knn_predict(&scaled, &s.apply(f), k))
        .collect::<Result<Vec<_>>>()?;
    report(test, &preds, Mode::Knn, corruption)
}
