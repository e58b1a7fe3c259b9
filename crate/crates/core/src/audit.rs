//! Dataset bias audit: cluster-occupancy entropy, inverse-frequency weights,
//! per-dataset prompt-similarity means and exact t-SNE layouts.

use indexmap::IndexMap;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{Embedding, SimilarityProfile};
use crate::imaging::DatasetManifest;
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty assignment")]
    EmptyAssignment,
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("label {label} out of range for k={k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("length mismatch: {0} values vs {1} weights")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("perplexity {perplexity} too large for {n} samples (must be < {limit})")]
    PerplexityTooLarge { perplexity: f64, n: usize, limit: f64 },
    #[error("no similarity profile for manifest id {0:?}")]
    MissingProfile(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub seed: u64,
    pub iterations_run: usize,
    /// Within-cluster SSE after each assignment step.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Assignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self, AuditError> {
        if k == 0 {
            return Err(AuditError::ZeroClusters);
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(AuditError::LabelOutOfRange { label, k });
        }
        Ok(Self { labels, k })
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn occupied(&self) -> usize {
        self.counts().iter().filter(|&&c| c > 0).count()
    }
}

/// Positive per-sample weights with unit mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(points: &[Vec<f64>]) -> Result<usize, AuditError> {
    let dim = points.first().map_or(0, Vec::len);
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(AuditError::DimMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    Ok(dim)
}

fn rows(embeddings: &[Embedding]) -> Vec<Vec<f64>> {
    embeddings.iter().map(|e| e.values().to_vec()).collect()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means with k-means++ seeding and Lloyd iterations on embeddings.
pub fn kmeans(embeddings: &[Embedding], cfg: &KMeansConfig) -> Result<(ClusterModel, Assignment), AuditError> {
    kmeans_points(&rows(embeddings), cfg)
}

/// k-means over arbitrary points.
///
/// Empty clusters are re-seeded to the point farthest from its centroid.
pub fn kmeans_points(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<(ClusterModel, Assignment), AuditError> {
    if cfg.k == 0 {
        return Err(AuditError::ZeroClusters);
    }
    if points.len() < cfg.k {
        return Err(AuditError::TooFewSamples {
            needed: cfg.k,
            got: points.len(),
        });
    }
    check_dims(points)?;
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(cfg.k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < cfg.k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[idx].clone());
        let c = centroids.last().expect("just pushed");
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, c));
        }
    }

    let mut labels = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations_run = 0;
    for _ in 0..cfg.max_iter.max(1) {
        iterations_run += 1;
        let near = par::map(points, |p| nearest(p, &centroids));
        for (l, (c, _)) in labels.iter_mut().zip(&near) {
            *l = *c;
        }
        trace.push(near.iter().map(|(_, d)| d).sum());

        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        let mut shift: f64 = 0.0;
        for c in 0..cfg.k {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| near[a].1.total_cmp(&near[b].1).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                points[far].clone()
            };
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift < cfg.tol {
            break;
        }
    }
    // Final labels consistent with the returned centroids.
    let near = par::map(points, |p| nearest(p, &centroids));
    for (l, (c, _)) in labels.iter_mut().zip(&near) {
        *l = *c;
    }
    trace.push(near.iter().map(|(_, d)| d).sum());

    Ok((
        ClusterModel {
            k: cfg.k,
            centroids,
            seed: cfg.seed,
            iterations_run,
            objective_trace: trace,
        },
        Assignment { labels, k: cfg.k },
    ))
}

/// Shannon entropy (nats) of the cluster-occupancy histogram.
pub fn dataset_entropy(assignment: &Assignment) -> Result<f64, AuditError> {
    if assignment.labels.is_empty() {
        return Err(AuditError::EmptyAssignment);
    }
    let n = assignment.labels.len() as f64;
    let h = assignment
        .counts()
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Entropy divided by `ln(occupied clusters)`; 0 when only one cluster is occupied.
pub fn normalized_entropy(assignment: &Assignment) -> Result<f64, AuditError> {
    let h = dataset_entropy(assignment)?;
    let occ = assignment.occupied();
    if occ <= 1 {
        return Ok(0.0);
    }
    Ok((h / (occ as f64).ln()).clamp(0.0, 1.0))
}

/// Inverse cluster-frequency weights `N / (k_occ * n_c)`.
pub fn reweight(assignment: &Assignment) -> Result<Weights, AuditError> {
    if assignment.labels.is_empty() {
        return Err(AuditError::EmptyAssignment);
    }
    let counts = assignment.counts();
    let n = assignment.labels.len() as f64;
    let occ = counts.iter().filter(|&&c| c > 0).count() as f64;
    let w = assignment
        .labels
        .iter()
        .map(|&l| n / (occ * counts[l] as f64))
        .collect();
    Ok(Weights { w })
}

/// `Σ w v / Σ w`.
pub fn weighted_aggregate(values: &[f64], weights: &Weights) -> Result<f64, AuditError> {
    if values.len() != weights.w.len() {
        return Err(AuditError::LengthMismatch(values.len(), weights.w.len()));
    }
    if values.is_empty() {
        return Err(AuditError::EmptyInput);
    }
    let num: f64 = values.iter().zip(&weights.w).map(|(v, w)| v * w).sum();
    let den: f64 = weights.w.iter().sum();
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub entropy_tol: f64,
    pub search_steps: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            seed: 42,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            entropy_tol: 1e-5,
            search_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneLayout {
    pub coords: Vec<[f64; 2]>,
    pub final_kl: f64,
    /// KL(P‖Q) at the end of the early-exaggeration phase, when it ran.
    pub kl_after_exaggeration: Option<f64>,
    pub seed: u64,
    pub perplexity: f64,
    pub iterations: usize,
}

pub fn tsne(embeddings: &[Embedding], cfg: &TsneConfig) -> Result<TsneLayout, AuditError> {
    tsne_points(&rows(embeddings), cfg)
}

/// Conditional affinities of row `i` with the bandwidth searched to match
/// `ln(perplexity)`.
fn row_affinities(dist: &[f64], i: usize, log_perp: f64, tol: f64, steps: usize) -> Vec<f64> {
    let n = dist.len();
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let mut beta = 1.0;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut p = vec![0.0; n];
    for _ in 0..steps {
        let mut sum = 0.0;
        let mut wsum = 0.0;
        for j in 0..n {
            if j == i {
                p[j] = 0.0;
                continue;
            }
            let d = dist[j] - dmin;
            let v = (-d * beta).exp();
            p[j] = v;
            sum += v;
            wsum += d * v;
        }
        let h = sum.ln() + beta * wsum / sum;
        let diff = h - log_perp;
        if diff.abs() < tol {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Top-2 principal component scores, signs fixed so the largest-magnitude
/// score of each component is positive.
fn pca2(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);

    let scores = if d <= n {
        let cov = x.transpose() * &x;
        let eig = SymmetricEigen::new(cov);
        let order = top_two(eig.eigenvalues.as_slice());
        let mut s = vec![[0.0; 2]; n];
        for (k, &ev) in order.iter().enumerate() {
            if let Some(ev) = ev {
                let v = eig.eigenvectors.column(ev);
                let proj = &x * v;
                for i in 0..n {
                    s[i][k] = proj[i];
                }
            }
        }
        s
    } else {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = top_two(eig.eigenvalues.as_slice());
        let mut s = vec![[0.0; 2]; n];
        for (k, &ev) in order.iter().enumerate() {
            if let Some(ev) = ev {
                let lambda = eig.eigenvalues[ev].max(0.0).sqrt();
                let u = eig.eigenvectors.column(ev);
                for i in 0..n {
                    s[i][k] = u[i] * lambda;
                }
            }
        }
        s
    };
    let mut scores = scores;
    for k in 0..2 {
        let pivot = scores
            .iter()
            .map(|s| s[k])
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            scores.iter_mut().for_each(|s| s[k] = -s[k]);
        }
    }
    scores
}

fn top_two(eigenvalues: &[f64]) -> [Option<usize>; 2] {
    let mut idx: Vec<usize> = (0..eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));
    [idx.first().copied(), idx.get(1).copied()]
}

fn kl_divergence(p: &[f64], q_num: &[f64], q_sum: f64) -> f64 {
    let n2 = p.len();
    let mut kl = 0.0;
    for idx in 0..n2 {
        let pij = p[idx];
        if pij > 0.0 {
            let q = (q_num[idx] / q_sum).max(1e-12);
            kl += pij * (pij / q).ln();
        }
    }
    kl.max(0.0)
}

/// Exact O(N²) t-SNE into two dimensions.
const MIN_GAIN: f64 = 0.01;

pub fn tsne_points(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneLayout, AuditError> {
    let n = points.len();
    if n < 4 {
        return Err(AuditError::TooFewSamples { needed: 4, got: n });
    }
    check_dims(points)?;
    let limit = (n as f64 - 1.0) / 3.0;
    if !(cfg.perplexity < limit) || cfg.perplexity <= 0.0 {
        return Err(AuditError::PerplexityTooLarge {
            perplexity: cfg.perplexity,
            n,
            limit,
        });
    }

    let dist: Vec<Vec<f64>> = par::map_range(n, |i| points.iter().map(|q| sq_dist(&points[i], q)).collect());
    let log_perp = cfg.perplexity.ln();
    let cond: Vec<Vec<f64>> = par::map_range(n, |i| {
        row_affinities(&dist[i], i, log_perp, cfg.entropy_tol, cfg.search_steps)
    });
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    // The seed only matters when PCA is degenerate; it jitters ties away.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = pca2(points);
    let sd0 = {
        let m = init.iter().map(|s| s[0]).sum::<f64>() / n as f64;
        (init.iter().map(|s| (s[0] - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let mut y: Vec<[f64; 2]> = if sd0 > 0.0 {
        init.iter().map(|s| [s[0] / sd0 * 1e-4, s[1] / sd0 * 1e-4]).collect()
    } else {
        (0..n)
            .map(|_| [rng.random::<f64>() * 1e-4, rng.random::<f64>() * 1e-4])
            .collect()
    };
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_after_exaggeration = None;
    let exag_iters = cfg.exaggeration_iters.min(cfg.iterations);

    let q_kernel = |y: &[[f64; 2]]| -> (Vec<f64>, f64) {
        let rows: Vec<(Vec<f64>, f64)> = par::map_range(n, |i| {
            let mut row = vec![0.0; n];
            let mut s = 0.0;
            for j in 0..n {
                if i != j {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    let v = 1.0 / (1.0 + dx * dx + dy * dy);
                    row[j] = v;
                    s += v;
                }
            }
            (row, s)
        });
        let sum = rows.iter().map(|(_, s)| s).sum::<f64>();
        let flat = rows.into_iter().flat_map(|(r, _)| r).collect();
        (flat, sum)
    };

    for it in 0..cfg.iterations {
        let exag = if it < exag_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < exag_iters {
            cfg.momentum_initial
        } else {
            cfg.momentum_final
        };
        let (num, sum) = q_kernel(&y);
        let grads: Vec<[f64; 2]> = par::map_range(n, |i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let q = (w / sum).max(1e-12);
                let coef = (exag * p[i * n + j] - q) * w;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            [4.0 * g[0], 4.0 * g[1]]
        });
        for (((yi, vi), gain), gi) in y.iter_mut().zip(velocity.iter_mut()).zip(gains.iter_mut()).zip(&grads) {
            for d in 0..2 {
                gain[d] = if (gi[d] > 0.0) != (vi[d] > 0.0) {
                    gain[d] + 0.2
                } else {
                    (gain[d] * 0.8).max(MIN_GAIN)
                };
                vi[d] = momentum * vi[d] - cfg.learning_rate * gain[d] * gi[d];
                yi[d] += vi[d];
            }
        }
        let mut mean = [0.0; 2];
        for yi in &y {
            mean[0] += yi[0];
            mean[1] += yi[1];
        }
        for yi in y.iter_mut() {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
        if it + 1 == exag_iters && exag_iters < cfg.iterations {
            let (num, sum) = q_kernel(&y);
            kl_after_exaggeration = Some(kl_divergence(&p, &num, sum));
        }
    }
    let (num, sum) = q_kernel(&y);
    let final_kl = kl_divergence(&p, &num, sum);

    Ok(TsneLayout {
        coords: y,
        final_kl,
        kl_after_exaggeration,
        seed: cfg.seed,
        perplexity: cfg.perplexity,
        iterations: cfg.iterations,
    })
}

/// Mean similarity profile of one dataset label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub dataset: String,
    pub count: usize,
    pub means: [f64; 5],
}

/// Per-dataset mean prompt similarities in first-appearance order.
pub fn prompt_bias_table(
    profiles: &IndexMap<String, SimilarityProfile>,
    manifest: &DatasetManifest,
) -> Result<Vec<PromptRow>, AuditError> {
    let mut acc: IndexMap<&str, ([f64; 5], usize)> = IndexMap::new();
    for e in &manifest.entries {
        let prof = profiles
            .get(&e.id)
            .ok_or_else(|| AuditError::MissingProfile(e.id.clone()))?;
        let slot = acc.entry(e.dataset_label.as_str()).or_insert(([0.0; 5], 0));
        for (s, v) in slot.0.iter_mut().zip(prof.scores) {
            *s += v;
        }
        slot.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(label, (sums, count))| PromptRow {
            dataset: label.to_string(),
            count,
            means: sums.map(|s| s / count as f64),
        })
        .collect())
}

/// Audit summary written by the `audit` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub schema_version: u32,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub entropy_nats: f64,
    pub normalized_entropy: f64,
    pub occupied_clusters: usize,
    pub cluster_counts: Vec<usize>,
    /// Aggregation used for the prompt table.
    pub prompt_aggregation: String,
    pub prompt_means: Vec<PromptRow>,
    pub weights: IndexMap<String, f64>,
}

/// Builds the full audit from embeddings keyed in manifest order.
pub fn build_bias_report(
    ids: &[String],
    embeddings: &[Embedding],
    profiles: &IndexMap<String, SimilarityProfile>,
    manifest: &DatasetManifest,
    kcfg: &KMeansConfig,
) -> Result<(BiasReport, Assignment), AuditError> {
    if ids.len() != embeddings.len() {
        return Err(AuditError::LengthMismatch(ids.len(), embeddings.len()));
    }
    let (_, assignment) = kmeans(embeddings, kcfg)?;
    let counts = assignment.counts();
    let weights = reweight(&assignment)?;
    let report = BiasReport {
        schema_version: 1,
        n: ids.len(),
        k: kcfg.k,
        seed: kcfg.seed,
        entropy_nats: dataset_entropy(&assignment)?,
        normalized_entropy: normalized_entropy(&assignment)?,
        occupied_clusters: assignment.occupied(),
        cluster_counts: counts,
        prompt_aggregation: "mean".into(),
        prompt_means: prompt_bias_table(profiles, manifest)?,
        weights: ids.iter().cloned().zip(weights.w).collect(),
    };
    Ok((report, assignment))
}
