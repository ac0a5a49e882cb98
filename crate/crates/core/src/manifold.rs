//! Exact t-SNE and neighbourhood-purity scoring of 2-D embeddings.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PaeError, Result};
use crate::rng;

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;
const MIN_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

fn validate(n: usize, perplexity: f64) -> Result<()> {
    if n < 4 {
        return Err(PaeError::Parameter(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(perplexity > 0.0 && perplexity < (n - 1) as f64 / 3.0) {
        return Err(PaeError::Parameter(format!(
            "perplexity {perplexity} must lie in (0, {}) for {n} points",
            (n - 1) as f64 / 3.0
        )));
    }
    Ok(())
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect()
        })
        .collect();
    rows.concat()
}

/// Conditional row `p_{j|i}` at precision `beta` and its entropy in bits.
fn conditional_row(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let d_min = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (o, &dj)) in out.iter_mut().zip(d).enumerate() {
        *o = if j == i { 0.0 } else { (-beta * (dj - d_min)).exp() };
        sum += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= sum;
        if *o > 0.0 {
            h -= *o * o.log2();
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affinities {
    pub n: usize,
    /// Symmetric joint probabilities, row-major `[n × n]`.
    pub p: Vec<f64>,
    /// Entropy (bits) of each calibrated conditional row.
    pub row_entropy: Vec<f64>,
}

/// Per-row Gaussian bandwidths by bisection on the precision so each
/// conditional row has entropy `log2(perplexity)`, then symmetrized.
/// Rows whose neighbours are all equidistant carry no bandwidth information
/// and stay uniform.
pub fn calibrate_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    let n = x.len();
    validate(n, perplexity)?;
    let d = squared_distances(x);
    let target = perplexity.log2();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| calibrate_row(&d[i * n..(i + 1) * n], i, target))
        .collect::<Result<_>>()?;

    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (rows[i].0[j] + rows[j].0[i]) / (2.0 * n as f64);
        }
    }
    Ok(Affinities {
        n,
        p,
        row_entropy: rows.into_iter().map(|r| r.1).collect(),
    })
}

fn calibrate_row(d: &[f64], i: usize, target: f64) -> Result<(Vec<f64>, f64)> {
    let n = d.len();
    let mut row = vec![0.0; n];
    let others = || d.iter().enumerate().filter(move |&(j, _)| j != i).map(|(_, &v)| v);
    let (lo_d, hi_d) = others().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    if hi_d - lo_d <= 1e-12 * hi_d.max(f64::MIN_POSITIVE) {
        let h = conditional_row(d, i, 0.0, &mut row);
        return Ok((row, h));
    }
    // bisection in log-precision, starting from the spread of the row
    let mut log_beta = -(hi_d - lo_d).ln();
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for _ in 0..MAX_BISECTIONS {
        let h = conditional_row(d, i, log_beta.exp(), &mut row);
        if (h - target).abs() < ENTROPY_TOL {
            return Ok((row, h));
        }
        // entropy falls as precision rises
        if h > target {
            lo = log_beta;
            log_beta = if hi.is_finite() { 0.5 * (lo + hi) } else { log_beta + 2.0 };
        } else {
            hi = log_beta;
            log_beta = if lo.is_finite() { 0.5 * (lo + hi) } else { log_beta - 2.0 };
        }
    }
    Err(PaeError::Numeric {
        stage: format!("perplexity calibration of row {i}"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P ‖ Q) after every iteration, against the unexaggerated P.
    pub kl_trace: Vec<f64>,
}

/// Student-t affinities `Q` (row-major) and their normaliser.
pub fn low_dim_affinities(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let kernel: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..n).map(move |j| {
                if i == j {
                    0.0
                } else {
                    let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                    1.0 / (1.0 + dx * dx + dy * dy)
                }
            })
        })
        .collect();
    let z: f64 = kernel.chunks(n).map(|r| r.iter().sum::<f64>()).sum();
    (kernel.iter().map(|k| k / z).collect(), z)
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Embeds rows of `x` with point `i` keyed by its row index.
pub fn tsne_embed(x: &[Vec<f64>], cfg: &EmbeddingConfig) -> Result<EmbeddingResult> {
    let keys: Vec<u64> = (0..x.len() as u64).collect();
    tsne_embed_keyed(x, &keys, cfg)
}

/// Each point's initial position comes from a stream keyed by `keys[i]`,
/// and the computation runs in key order, so permuting rows together with
/// their keys permutes the output identically.
pub fn tsne_embed_keyed(x: &[Vec<f64>], keys: &[u64], cfg: &EmbeddingConfig) -> Result<EmbeddingResult> {
    if keys.len() != x.len() {
        return Err(PaeError::shape("tsne keys", &[keys.len()], &[x.len()]));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    if order.windows(2).any(|w| keys[w[0]] == keys[w[1]]) {
        return Err(PaeError::Parameter("t-SNE keys must be unique".into()));
    }
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
    let sorted_keys: Vec<u64> = order.iter().map(|&i| keys[i]).collect();
    let res = embed_sorted(&sorted, &sorted_keys, cfg)?;
    let mut coords = vec![[0.0; 2]; x.len()];
    for (pos, &i) in order.iter().enumerate() {
        coords[i] = res.coords[pos];
    }
    Ok(EmbeddingResult {
        coords,
        kl_trace: res.kl_trace,
    })
}

fn embed_sorted(x: &[Vec<f64>], keys: &[u64], cfg: &EmbeddingConfig) -> Result<EmbeddingResult> {
    let n = x.len();
    let aff = calibrate_affinities(x, cfg.perplexity)?;
    let p = aff.p;

    let mut y: Vec<[f64; 2]> = keys
        .iter()
        .map(|&k| {
            let mut r = rng::substream(cfg.seed, &[0x75e, k]);
            [1e-4 * rng::normal(&mut r), 1e-4 * rng::normal(&mut r)]
        })
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let exaggerate = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { cfg.initial_momentum } else { cfg.final_momentum };
        let (q, z) = low_dim_affinities(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    // q_ij · Z recovers the unnormalised kernel
                    let w = (exaggerate * p[i * n + j] - q[i * n + j]) * q[i * n + j] * z;
                    g[0] += w * (y[i][0] - y[j][0]);
                    g[1] += w * (y[i][1] - y[j][1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(MIN_GAIN);
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        // recentre
        for k in 0..2 {
            let mean = y.iter().map(|c| c[k]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|c| c[k] -= mean);
        }
        if y.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(PaeError::Numeric {
                stage: format!("t-SNE iteration {it}"),
            });
        }
        let (q, _) = low_dim_affinities(&y);
        kl_trace.push(kl_divergence(&p, &q));
    }
    Ok(EmbeddingResult { coords: y, kl_trace })
}

/// Mean fraction of each point's `k` nearest neighbours (self excluded)
/// sharing its label.
pub fn knn_purity(coords: &[[f64; 2]], labels: &[usize], k: usize) -> Result<f64> {
    let n = coords.len();
    if labels.len() != n {
        return Err(PaeError::shape("knn_purity", &[n], &[labels.len()]));
    }
    if k == 0 || k >= n {
        return Err(PaeError::Parameter(format!("k = {k} needs 1 ≤ k < {n}")));
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let (dx, dy) = (coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]);
                    (dx * dx + dy * dy, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d[..k].iter().filter(|&&(_, j)| labels[j] == labels[i]).count() as f64 / k as f64
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Clean,
    Corrupted,
    Latent,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Clean => "clean",
            Source::Corrupted => "corrupted",
            Source::Latent => "latent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(Source::Clean),
            "corrupted" => Some(Source::Corrupted),
            "latent" => Some(Source::Latent),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordRow {
    pub id: String,
    pub xy: [f64; 2],
    pub break_location: String,
    pub break_size_cm: f64,
}

pub fn coords_csv(rows: &[CoordRow], source: Source) -> String {
    let mut s = String::from("id,x,y,break_location,break_size_cm,source\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.id,
            r.xy[0],
            r.xy[1],
            r.break_location,
            r.break_size_cm,
            source.as_str()
        )
        .unwrap();
    }
    s
}

pub fn kl_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,kl\n");
    for (i, kl) in trace.iter().enumerate() {
        writeln!(s, "{},{}", i + 1, kl).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(per: usize, dims: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = rng::stream(seed);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..per {
                x.push(
                    (0..dims)
                        .map(|d| if d == c { sep } else { 0.0 } + rng::normal(&mut r))
                        .collect(),
                );
                labels.push(c);
            }
        }
        (x, labels)
    }

    #[test]
    fn calibrated_rows_hit_target_entropy() {
        let (x, _) = blobs(20, 5, 4.0, 1);
        let a = calibrate_affinities(&x, 10.0).unwrap();
        for h in &a.row_entropy {
            assert!((h - 10f64.log2()).abs() < 1e-5);
        }
        assert!((a.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..a.n {
            assert_eq!(a.p[i * a.n + i], 0.0);
            for j in 0..a.n {
                assert_eq!(a.p[i * a.n + j], a.p[j * a.n + i]);
            }
        }
    }

    #[test]
    fn equidistant_points_get_equal_affinities() {
        let x: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let a = calibrate_affinities(&x, 0.9).unwrap();
        let off: Vec<f64> = (0..16).filter(|k| k / 4 != k % 4).map(|k| a.p[k]).collect();
        assert!(off.iter().all(|&v| (v - off[0]).abs() < 1e-15));
        assert!((off[0] - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_perplexity() {
        let (x, _) = blobs(2, 3, 1.0, 1);
        assert!(calibrate_affinities(&x, 5.0).is_err());
        assert!(calibrate_affinities(&x[..3], 0.5).is_err());
    }

    #[test]
    fn q_is_a_distribution() {
        let y = vec![[0.0, 0.0], [1.0, 0.5], [-2.0, 0.3], [0.1, 4.0]];
        let (q, _) = low_dim_affinities(&y);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.iter().all(|&v| v >= 0.0));
        for i in 0..4 {
            assert_eq!(q[i * 5], 0.0);
        }
    }

    #[test]
    fn embedding_is_permutation_equivariant_and_deterministic() {
        let (x, _) = blobs(6, 4, 5.0, 2);
        let cfg = EmbeddingConfig {
            perplexity: 4.0,
            iterations: 120,
            ..Default::default()
        };
        let a = tsne_embed(&x, &cfg).unwrap();
        assert_eq!(a, tsne_embed(&x, &cfg).unwrap());
        let perm: Vec<usize> = (0..x.len()).rev().collect();
        let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let keys: Vec<u64> = perm.iter().map(|&i| i as u64).collect();
        let b = tsne_embed_keyed(&xp, &keys, &cfg).unwrap();
        for (pos, &i) in perm.iter().enumerate() {
            assert_eq!(b.coords[pos], a.coords[i]);
        }
        assert!(a.kl_trace.iter().all(|k| k.is_finite() && *k >= 0.0));
    }

    #[test]
    fn purity_counts_neighbours() {
        let coords = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
        assert_eq!(knn_purity(&coords, &[0, 0, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(knn_purity(&coords, &[0, 1, 0, 1], 1).unwrap(), 0.0);
        assert!(knn_purity(&coords, &[0, 0, 1, 1], 4).is_err());
    }

    #[test]
    fn csv_headers() {
        let rows = [CoordRow {
            id: "T0000".into(),
            xy: [1.5, -2.0],
            break_location: "cold_leg".into(),
            break_size_cm: 3.25,
        }];
        assert_eq!(
            coords_csv(&rows, Source::Latent),
            "id,x,y,break_location,break_size_cm,source\nT0000,1.5,-2,cold_leg,3.25,latent\n"
        );
        assert_eq!(kl_csv(&[0.5]), "iteration,kl\n1,0.5\n");
    }
}
