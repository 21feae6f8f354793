//! Independent reference implementations used by the integration tests and
//! the acceptance harness. Everything here is written as plain loops over the
//! definitions, sharing no code with the library.

#![allow(dead_code)]

use crossvideo::autograd::Mat;
use crossvideo::datagen::{generate_dataset, DatasetSpec, SyntheticDataset};
use crossvideo::objective::ContrastiveBatch;
use crossvideo::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// `-log(exp(s(a_i, b_i)/t) / (sum_{k != i} exp(s(a_i, a_k)/t) + sum_k exp(s(a_i, b_k)/t)))`
/// for every `i`, by direct summation.
pub fn nt_xent_loop(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let n = a.len();
    (0..n)
        .map(|i| {
            let num = (cos(&a[i], &b[i]) / tau).exp();
            let mut den = 0.0;
            for k in 0..n {
                if k != i {
                    den += (cos(&a[i], &a[k]) / tau).exp();
                }
            }
            for k in 0..n {
                den += (cos(&a[i], &b[k]) / tau).exp();
            }
            -(num / den).ln()
        })
        .collect()
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn midpoint(a: &Mat, b: &Mat) -> Mat {
    let mut out = a.clone();
    for ((r, c), v) in out.indexed_iter_mut() {
        *v = 0.5 * (a[[r, c]] + b[[r, c]]);
    }
    out
}

/// Per-sample frame average of the kernel applied slot by slot; slot `j`
/// compares only the samples that have a frame `j`.
fn frame_loop(a: &[Mat], b: &[Mat], tau: f64) -> Vec<f64> {
    let n = a.len();
    let mut sums = vec![0.0; n];
    let max_f = a.iter().map(|m| m.nrows()).max().unwrap_or(0);
    for j in 0..max_f {
        let members: Vec<usize> = (0..n).filter(|&i| a[i].nrows() > j).collect();
        let av: Vec<Vec<f64>> = members.iter().map(|&i| a[i].row(j).to_vec()).collect();
        let bv: Vec<Vec<f64>> = members.iter().map(|&i| b[i].row(j).to_vec()).collect();
        for (r, l) in nt_xent_loop(&av, &bv, tau).into_iter().enumerate() {
            sums[members[r]] += l;
        }
    }
    (0..n)
        .map(|i| if a[i].nrows() == 0 { 0.0 } else { sums[i] / a[i].nrows() as f64 })
        .collect()
}

/// Loop versions of the four per-sample terms: `(L_v, L_f, C_v, C_f)`.
pub struct OracleTerms {
    pub intra_video: Vec<f64>,
    pub intra_frame: Vec<f64>,
    pub cross_video: Vec<f64>,
    pub cross_frame: Vec<f64>,
}

impl OracleTerms {
    pub fn intra(&self) -> f64 {
        let n = self.intra_video.len() as f64;
        (self.intra_video.iter().sum::<f64>() + self.intra_frame.iter().sum::<f64>()) / (2.0 * n)
    }

    pub fn cross(&self) -> f64 {
        let n = self.cross_video.len() as f64;
        (self.cross_video.iter().sum::<f64>() + self.cross_frame.iter().sum::<f64>()) / (2.0 * n)
    }
}

pub fn oracle_terms(b: &ContrastiveBatch) -> OracleTerms {
    let tau = b.temperature;
    let zv = midpoint(&b.z_v_t1, &b.z_v_t2);
    let zf: Vec<Mat> = b.z_f_t1.iter().zip(&b.z_f_t2).map(|(x, y)| midpoint(x, y)).collect();
    OracleTerms {
        intra_video: nt_xent_loop(&rows(&b.z_v_t1), &rows(&b.z_v_t2), tau),
        intra_frame: frame_loop(&b.z_f_t1, &b.z_f_t2, tau),
        cross_video: nt_xent_loop(&rows(&zv), &rows(&b.h_v), tau),
        cross_frame: frame_loop(&zf, &b.h_f, tau),
    }
}

fn gaussian_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| {
        // Box-Muller keeps the oracle free of extra dependencies.
        let u: f64 = r.gen_range(1e-12..1.0);
        let v: f64 = r.gen();
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    })
}

/// A random batch with `n` samples, `frames` aligned frames each and width `d`.
pub fn random_batch(r: &mut ChaCha8Rng, n: usize, frames: usize, d: usize, tau: f64) -> ContrastiveBatch {
    let fs = |r: &mut ChaCha8Rng| (0..n).map(|_| gaussian_mat(r, frames, d)).collect::<Vec<_>>();
    let zv1 = gaussian_mat(r, n, d);
    let zv2 = gaussian_mat(r, n, d);
    let hv = gaussian_mat(r, n, d);
    let (f1, f2, hf) = (fs(r), fs(r), fs(r));
    ContrastiveBatch::new(zv1, zv2, hv, f1, f2, hf, tau).unwrap()
}

/// Maximal runs as `(label, start, end)`.
pub fn runs(labels: &[i32]) -> Vec<(i32, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            out.push((labels[start], start, t));
            start = t;
        }
    }
    out
}

/// Edit distance by the full `(n+1) x (m+1)` table.
pub fn levenshtein_dp(a: &[i32], b: &[i32]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn edit_oracle(pred: &[i32], gt: &[i32]) -> f64 {
    let p: Vec<i32> = runs(pred).iter().map(|s| s.0).collect();
    let g: Vec<i32> = runs(gt).iter().map(|s| s.0).collect();
    100.0 * (1.0 - levenshtein_dp(&p, &g) as f64 / p.len().max(g.len()) as f64)
}

fn iou(a: (i32, usize, usize), b: (i32, usize, usize)) -> f64 {
    let inter = a.2.min(b.2) as f64 - a.1.max(b.1) as f64;
    let inter = inter.max(0.0);
    let union = (a.2 - a.1) as f64 + (b.2 - b.1) as f64 - inter;
    inter / union
}

/// Largest number of disjoint (pred, gt) pairs with equal labels and IoU at
/// least `threshold`, by trying every assignment.
pub fn exhaustive_tp(pred: &[i32], gt: &[i32], threshold: f64) -> usize {
    fn go(i: usize, p: &[(i32, usize, usize)], g: &[(i32, usize, usize)], used: &mut [bool], th: f64) -> usize {
        if i == p.len() {
            return 0;
        }
        let mut best = go(i + 1, p, g, used, th);
        for j in 0..g.len() {
            if !used[j] && p[i].0 == g[j].0 && iou(p[i], g[j]) >= th {
                used[j] = true;
                best = best.max(1 + go(i + 1, p, g, used, th));
                used[j] = false;
            }
        }
        best
    }
    let (p, g) = (runs(pred), runs(gt));
    go(0, &p, &g, &mut vec![false; g.len()], threshold)
}

pub fn f1_oracle(pred: &[i32], gt: &[i32], threshold: f64) -> f64 {
    let tp = exhaustive_tp(pred, gt, threshold) as f64;
    let np = runs(pred).len() as f64;
    let ng = runs(gt).len() as f64;
    let (p, r) = (tp / np, tp / ng);
    if p + r == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * p * r / (p + r)
    }
}

/// A labelling of `len` frames with at most `max_segments` runs over `classes` labels.
pub fn random_labelling(r: &mut ChaCha8Rng, len: usize, max_segments: usize, classes: i32) -> Vec<i32> {
    let segs = r.gen_range(1..=max_segments.min(len));
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < segs - 1 {
        let c = r.gen_range(1..len);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut labels = Vec::with_capacity(len);
    let mut label = r.gen_range(0..classes);
    let mut next_cut = 0;
    for t in 0..len {
        if next_cut < cuts.len() && t == cuts[next_cut] {
            next_cut += 1;
            // Adjacent runs could merge if the label repeats; that still
            // leaves at most `max_segments` runs.
            label = r.gen_range(0..classes);
        }
        labels.push(label);
    }
    labels
}

/// A tiny configuration for smoke runs: few points, narrow networks.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.batch_size = 4;
    cfg.total_epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.d_proj = 16;
    cfg.encoder.feature_dim = 16;
    cfg.encoder.projection_hidden = 16;
    cfg.encoder.point_mlp_hidden = 8;
    cfg.encoder.transformer_depth = 1;
    cfg.encoder.transformer_heads = 2;
    cfg.encoder.image_channels = (4, 8);
    cfg.encoder.image_size = (16, 16);
    cfg.finetune.epochs = 2;
    cfg.finetune.probe_steps = 20;
    cfg.data = tiny_spec();
    cfg
}

pub fn tiny_spec() -> DatasetSpec {
    DatasetSpec {
        pretrain: 8,
        train: 6,
        test: 4,
        frames: 4,
        points: 32,
        image_size: (16, 16),
        ..DatasetSpec::default()
    }
}

pub fn tiny_data() -> SyntheticDataset {
    generate_dataset(&tiny_spec()).unwrap()
}
