//! Segmentation metrics, evaluation reports and experiment sweeps.

mod metrics;
mod sweep;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::PairedSample;
use crate::error::{ensure, Error, Result};
use crate::train::Task;

pub use metrics::{
    edit_score, framewise_accuracy, levenshtein, mean_iou, segmental_f1, segmental_f1_counts,
    segmental_f1_greedy, segmental_f1_greedy_counts, to_segments, F1Counts, IouCounts, Segment,
};
pub use sweep::{
    ablation_rows, data_efficiency_rows, mean_accuracy_by_config, sweep, write_csv, SweepData,
    SweepRecord, SweepRow,
};

/// Overlap thresholds reported for segmental F1, in percent.
pub const F1_THRESHOLDS: [u32; 3] = [10, 25, 50];

/// Anything that labels frames or points of a sequence.
pub trait Predictor {
    fn task(&self) -> Task;

    fn predict_frames(&self, _sample: &PairedSample) -> Result<Vec<i32>> {
        Err(Error::validation("task", "predictor has no per-frame output"))
    }

    fn predict_points(&self, _sample: &PairedSample) -> Result<Vec<Vec<i32>>> {
        Err(Error::validation("task", "predictor has no per-point output"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    /// Percent of frames (or points) labelled correctly.
    pub accuracy: f64,
    pub edit: Option<f64>,
    /// Keyed by threshold in percent: `"10"`, `"25"`, `"50"`.
    pub f1: Option<BTreeMap<String, f64>>,
    pub miou: Option<f64>,
    pub config_echo: Value,
    pub seed: u64,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain data");
        crate::datagen::atomic_write_file(path, text.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
    }

    pub fn f1_at(&self, threshold: u32) -> Option<f64> {
        self.f1.as_ref()?.get(&threshold.to_string()).copied()
    }
}

/// Runs `model` over every sequence and scores it.
///
/// Action task: accuracy is pooled over frames, the edit score is averaged
/// over sequences, and F1 is computed from segment counts summed over
/// sequences. Semantic task: accuracy and mIoU are pooled over points.
pub fn evaluate(
    model: &dyn Predictor,
    dataset: &[PairedSample],
    task: Task,
    class_count: usize,
) -> Result<MetricsReport> {
    ensure(!dataset.is_empty(), "dataset", || "no sequences to evaluate".into())?;
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut report = MetricsReport {
        task,
        accuracy: 0.0,
        edit: None,
        f1: None,
        miou: None,
        config_echo: Value::Null,
        seed: 0,
    };
    match task {
        Task::Action => {
            let mut edit = 0.0;
            let mut f1 = [F1Counts::default(); 3];
            for s in dataset {
                let gt = s.labels.as_ref().ok_or_else(|| {
                    Error::validation("labels", format!("sequence {} has no frame labels", s.sequence_id()))
                })?;
                let pred = model.predict_frames(s)?;
                ensure(pred.len() == gt.len(), "prediction", || "wrong number of frames".into())?;
                hits += pred.iter().zip(gt).filter(|(p, g)| p == g).count();
                total += gt.len();
                edit += edit_score(&pred, gt)?;
                for (c, th) in f1.iter_mut().zip(F1_THRESHOLDS) {
                    c.add(segmental_f1_counts(&pred, gt, th as f64 / 100.0)?);
                }
            }
            report.edit = Some(edit / dataset.len() as f64);
            report.f1 = Some(
                F1_THRESHOLDS
                    .iter()
                    .zip(&f1)
                    .map(|(th, c)| (th.to_string(), c.f1()))
                    .collect(),
            );
        }
        Task::Semantic => {
            let mut iou = IouCounts::new(class_count);
            for s in dataset {
                let gt = s.point_labels.as_ref().ok_or_else(|| {
                    Error::validation("point_labels", format!("sequence {} has no point labels", s.sequence_id()))
                })?;
                let pred = model.predict_points(s)?;
                ensure(pred.len() == gt.len(), "prediction", || "wrong number of frames".into())?;
                for (p, g) in pred.iter().zip(gt) {
                    iou.add(p, g)?;
                    for (a, b) in p.iter().zip(g) {
                        if *b != crate::datagen::UNLABELED {
                            hits += usize::from(a == b);
                            total += 1;
                        }
                    }
                }
            }
            report.miou = Some(iou.miou()?);
        }
    }
    ensure(total > 0, "labels", || "no labelled frames".into())?;
    report.accuracy = 100.0 * hits as f64 / total as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatasetSpec};

    struct Oracle;

    impl Predictor for Oracle {
        fn task(&self) -> Task {
            Task::Action
        }

        fn predict_frames(&self, s: &PairedSample) -> Result<Vec<i32>> {
            Ok(s.labels.clone().unwrap())
        }

        fn predict_points(&self, s: &PairedSample) -> Result<Vec<Vec<i32>>> {
            Ok(s.point_labels.clone().unwrap())
        }
    }

    fn data() -> Vec<PairedSample> {
        let spec = DatasetSpec {
            pretrain: 0,
            train: 0,
            test: 6,
            points: 16,
            image_size: (8, 8),
            ..DatasetSpec::default()
        };
        generate_dataset(&spec).unwrap().test
    }

    #[test]
    fn oracle_scores_perfectly() {
        let d = data();
        let r = evaluate(&Oracle, &d, Task::Action, 3).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.edit, Some(100.0));
        for th in F1_THRESHOLDS {
            assert_eq!(r.f1_at(th), Some(100.0));
        }
        let r = evaluate(&Oracle, &d, Task::Semantic, 3).unwrap();
        assert_eq!((r.accuracy, r.miou), (100.0, Some(100.0)));
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = evaluate(&Oracle, &data(), Task::Action, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.write_json(&p).unwrap();
        assert_eq!(MetricsReport::read_json(&p).unwrap(), r);
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        for key in ["task", "accuracy", "edit", "f1", "miou", "config_echo", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["f1"].get("25").is_some());
    }
}
