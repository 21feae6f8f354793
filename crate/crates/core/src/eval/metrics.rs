//! Temporal segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::datagen::UNLABELED;
use crate::error::{ensure, Result};

/// A maximal run of one label over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: i32,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

pub fn to_segments(labels: &[i32]) -> Vec<Segment> {
    crate::datagen::label_runs(labels)
        .into_iter()
        .map(|(label, start, end)| Segment { label, start, end })
        .collect()
}

fn check_pair(pred: &[i32], gt: &[i32]) -> Result<()> {
    ensure(!gt.is_empty(), "labels", || "empty labeling".into())?;
    ensure(pred.len() == gt.len(), "labels", || {
        format!("prediction has {} frames, ground truth {}", pred.len(), gt.len())
    })
}

/// Percentage of frames whose labels agree.
pub fn framewise_accuracy(pred: &[i32], gt: &[i32]) -> Result<f64> {
    check_pair(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Unit-cost edit distance with a rolling row.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 (1 - lev / max(|p|, |g|))` over the segment label sequences.
pub fn edit_score(pred: &[i32], gt: &[i32]) -> Result<f64> {
    ensure(!pred.is_empty() && !gt.is_empty(), "labels", || "empty labeling".into())?;
    let p: Vec<i32> = to_segments(pred).iter().map(|s| s.label).collect();
    let g: Vec<i32> = to_segments(gt).iter().map(|s| s.label).collect();
    let d = levenshtein(&p, &g);
    Ok(100.0 * (1.0 - d as f64 / p.len().max(g.len()) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn add(&mut self, other: F1Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `100 * 2PR / (P + R)`, zero when both are zero.
    pub fn f1(&self) -> f64 {
        let p = if self.tp + self.fp == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 };
        let r = if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 };
        if p + r == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * p * r / (p + r)
        }
    }
}

fn counts(n_pred: usize, n_gt: usize, tp: usize) -> F1Counts {
    F1Counts {
        tp,
        fp: n_pred - tp,
        fn_: n_gt - tp,
    }
}

/// Segment pairs that may be matched: same label and IoU at least `threshold`.
fn candidates(p: &[Segment], g: &[Segment], threshold: f64) -> Vec<Vec<usize>> {
    p.iter()
        .map(|ps| {
            (0..g.len())
                .filter(|&j| g[j].label == ps.label && ps.iou(&g[j]) >= threshold)
                .collect()
        })
        .collect()
}

fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
    for &j in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].map_or(true, |k| augment(k, adj, seen, owner)) {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

/// Segment counts under a maximum one-to-one matching of predicted to ground
/// truth segments (same class, IoU at least `threshold`).
pub fn segmental_f1_counts(pred: &[i32], gt: &[i32], threshold: f64) -> Result<F1Counts> {
    check_pair(pred, gt)?;
    let (p, g) = (to_segments(pred), to_segments(gt));
    let adj = candidates(&p, &g, threshold);
    let mut owner = vec![None; g.len()];
    let mut tp = 0;
    for i in 0..p.len() {
        let mut seen = vec![false; g.len()];
        if augment(i, &adj, &mut seen, &mut owner) {
            tp += 1;
        }
    }
    Ok(counts(p.len(), g.len(), tp))
}

pub fn segmental_f1(pred: &[i32], gt: &[i32], threshold: f64) -> Result<f64> {
    Ok(segmental_f1_counts(pred, gt, threshold)?.f1())
}

/// The common greedy variant: each predicted segment, in order, takes its
/// best-IoU same-class ground truth segment if that one is still free and
/// passes the threshold. It can miss matches the maximum matching finds when
/// the threshold is below 0.5.
pub fn segmental_f1_greedy_counts(pred: &[i32], gt: &[i32], threshold: f64) -> Result<F1Counts> {
    check_pair(pred, gt)?;
    let (p, g) = (to_segments(pred), to_segments(gt));
    let mut used = vec![false; g.len()];
    let mut tp = 0;
    for ps in &p {
        let mut best: Option<(f64, usize)> = None;
        for (j, gs) in g.iter().enumerate() {
            if gs.label != ps.label {
                continue;
            }
            let iou = ps.iou(gs);
            if best.map_or(true, |b| iou > b.0) {
                best = Some((iou, j));
            }
        }
        if let Some((iou, j)) = best {
            if iou >= threshold && !used[j] {
                used[j] = true;
                tp += 1;
            }
        }
    }
    Ok(counts(p.len(), g.len(), tp))
}

pub fn segmental_f1_greedy(pred: &[i32], gt: &[i32], threshold: f64) -> Result<f64> {
    Ok(segmental_f1_greedy_counts(pred, gt, threshold)?.f1())
}

/// Per-class intersection and union counts; unlabelled ground truth is skipped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IouCounts {
    pub inter: Vec<usize>,
    pub union: Vec<usize>,
}

impl IouCounts {
    pub fn new(class_count: usize) -> Self {
        Self {
            inter: vec![0; class_count],
            union: vec![0; class_count],
        }
    }

    pub fn add(&mut self, pred: &[i32], gt: &[i32]) -> Result<()> {
        check_pair(pred, gt)?;
        let k = self.inter.len() as i32;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == UNLABELED {
                continue;
            }
            ensure((0..k).contains(&p) && (0..k).contains(&g), "labels", || {
                format!("label outside 0..{k}")
            })?;
            if p == g {
                self.inter[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU in percent over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self
            .inter
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        ensure(!ious.is_empty(), "labels", || "no labelled points".into())?;
        Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn mean_iou(pred: &[i32], gt: &[i32], class_count: usize) -> Result<f64> {
    let mut c = IouCounts::new(class_count);
    c.add(pred, gt)?;
    c.miou()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_examples() {
        let s = to_segments(&[0, 0, 1, 1, 1]);
        assert_eq!(
            s,
            vec![
                Segment { label: 0, start: 0, end: 2 },
                Segment { label: 1, start: 2, end: 5 }
            ]
        );
        assert_eq!(to_segments(&[3]), vec![Segment { label: 3, start: 0, end: 1 }]);
        assert_eq!(to_segments(&[0, 1, 0]).len(), 3);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(framewise_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(framewise_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(framewise_accuracy(&[0, 1, 1, 1], &[0, 1, 1, 2]).unwrap(), 75.0);
        assert!(framewise_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn edit_examples() {
        assert_eq!(edit_score(&[0, 0, 1], &[0, 1, 1]).unwrap(), 100.0);
        let e = edit_score(&[0, 0, 1, 1], &[0, 1, 2, 2]).unwrap();
        assert!((e - 100.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-9);
        assert_eq!(edit_score(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(edit_score(&[], &[]).unwrap_err().is_validation());
    }

    #[test]
    fn f1_worked_example() {
        let gt = vec![0; 10];
        let mut pred = vec![0; 10];
        pred[6..].fill(1);
        for th in [0.5, 0.1] {
            let c = segmental_f1_counts(&pred, &gt, th).unwrap();
            assert_eq!(c, F1Counts { tp: 1, fp: 1, fn_: 0 });
            assert!((c.f1() - 200.0 / 3.0).abs() < 1e-9);
        }
        assert_eq!(segmental_f1(&gt, &gt, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn greedy_can_undercount_at_low_threshold() {
        let gt = [0, 0, 0, 0, 1, 0];
        let pred = [0, 1, 0, 0, 0, 0];
        assert_eq!(segmental_f1_greedy_counts(&pred, &gt, 0.1).unwrap().tp, 1);
        assert_eq!(segmental_f1_counts(&pred, &gt, 0.1).unwrap().tp, 2);
    }

    #[test]
    fn miou_examples() {
        assert_eq!(mean_iou(&[0, 1, 2], &[0, 1, 2], 5).unwrap(), 100.0);
        assert_eq!(mean_iou(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 25.0);
        assert_eq!(mean_iou(&[0, 0], &[0, 0], 3).unwrap(), 100.0);
    }
}
