//! Data-efficiency and loss-ablation sweeps: pretrain (cached per objective
//! and seed), fine-tune on a fraction of the labelled split, evaluate.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Serialize;

use super::{evaluate, MetricsReport};
use crate::datagen::PairedSample;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::LossToggles;
use crate::train::{finetune_segmentation, pretrain, subsample_split, FinetuneMode, Task, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Identifies the configuration independent of the seed.
    pub config_id: String,
    pub fraction: f64,
    /// Start from a pretrained encoder (otherwise random weights).
    pub pretrained: bool,
    /// `Full` or `LinearProbe`; with random weights `Full` means training from scratch.
    pub mode: FinetuneMode,
    pub task: Task,
    pub toggles: LossToggles,
    pub seed: u64,
}

impl SweepRow {
    pub fn id(&self) -> String {
        format!("{}-s{}", self.config_id, self.seed)
    }

    fn disabled_terms(&self) -> String {
        let t = self.toggles;
        let flags = [t.intra_video, t.intra_frame, t.cross_video, t.cross_frame];
        LossToggles::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| !on)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Pretrained and scratch rows for each fraction and seed.
pub fn data_efficiency_rows(fractions: &[f64], seeds: &[u64], task: Task) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &fraction in fractions {
            for pretrained in [true, false] {
                let init = if pretrained { "pretrained" } else { "scratch" };
                rows.push(SweepRow {
                    config_id: format!("fraction{fraction}-{init}"),
                    fraction,
                    pretrained,
                    mode: FinetuneMode::Full,
                    task,
                    toggles: LossToggles::default(),
                    seed,
                });
            }
        }
    }
    rows
}

/// Linear-probe rows for the full objective, each variant with the given
/// terms disabled, and a random-init baseline.
pub fn ablation_rows(disabled: &[Vec<String>], seeds: &[u64], task: Task) -> Result<Vec<SweepRow>> {
    let mut variants = vec![("full_objective".to_string(), LossToggles::default())];
    for terms in disabled {
        let mut t = LossToggles::default();
        for term in terms {
            t.set(term, false)?;
        }
        if !t.any() {
            return Err(Error::validation("disable", "every loss term is disabled; there is no objective"));
        }
        variants.push((format!("no_{}", terms.join("+")), t));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, toggles) in &variants {
            rows.push(SweepRow {
                config_id: format!("{name}-linear"),
                fraction: 1.0,
                pretrained: true,
                mode: FinetuneMode::LinearProbe,
                task,
                toggles: *toggles,
                seed,
            });
        }
        rows.push(SweepRow {
            config_id: "random_init-linear".into(),
            fraction: 1.0,
            pretrained: false,
            mode: FinetuneMode::LinearProbe,
            task,
            toggles: LossToggles::default(),
            seed,
        });
    }
    Ok(rows)
}

pub struct SweepData<'a> {
    pub pretrain: &'a [PairedSample],
    pub train: &'a [PairedSample],
    pub test: &'a [PairedSample],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub row: SweepRow,
    pub report: MetricsReport,
    /// Mean loss of each pretraining epoch; empty for random-init rows.
    pub pretrain_losses: Vec<f64>,
}

fn toggle_key(t: &LossToggles) -> [bool; 4] {
    [t.intra_video, t.intra_frame, t.cross_video, t.cross_frame]
}

/// Runs every row. Pretraining runs once per `(objective, seed)`.
pub fn sweep(rows: &[SweepRow], data: &SweepData<'_>, base: &TrainConfig) -> Result<Vec<SweepRecord>> {
    let mut cache: HashMap<([bool; 4], u64), (ModelParams, Vec<f64>)> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut cfg = base.clone();
        cfg.seed = row.seed;
        cfg.loss = row.toggles;
        cfg.validate()?;
        let (init, losses) = if row.pretrained {
            let key = (toggle_key(&row.toggles), row.seed);
            if !cache.contains_key(&key) {
                log::info!("pretraining {} seed {}", row.config_id, row.seed);
                let state = pretrain(data.pretrain, &cfg)?;
                cache.insert(key, (state.model, state.epoch_losses));
            }
            let (m, l) = &cache[&key];
            (Some(m), l.clone())
        } else {
            (None, Vec::new())
        };
        let mode = match (row.pretrained, row.mode) {
            (false, FinetuneMode::Full) => FinetuneMode::Scratch,
            (_, m) => m,
        };
        let train = subsample_split(data.train, row.fraction, row.seed)?;
        let model = finetune_segmentation(&train, init, &cfg, mode, row.task)?;
        let mut report = evaluate(&model, data.test, row.task, cfg.finetune.num_classes)?;
        report.config_echo = cfg.to_value();
        report.seed = row.seed;
        log::info!("{}: accuracy {:.2}", row.id(), report.accuracy);
        out.push(SweepRecord {
            row: row.clone(),
            report,
            pretrain_losses: losses,
        });
    }
    Ok(out)
}

/// Mean accuracy per `config_id` over seeds.
pub fn mean_accuracy_by_config(records: &[SweepRecord]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.row.config_id.clone()).or_default();
        e.0 += r.report.accuracy;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: String,
    config_id: &'a str,
    fraction: f64,
    init: &'a str,
    mode: String,
    task: String,
    disabled_terms: String,
    seed: u64,
    accuracy: f64,
    edit: Option<f64>,
    f1_10: Option<f64>,
    f1_25: Option<f64>,
    f1_50: Option<f64>,
    miou: Option<f64>,
}

pub fn write_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        let row = &r.row;
        w.serialize(CsvRow {
            id: row.id(),
            config_id: &row.config_id,
            fraction: row.fraction,
            init: if row.pretrained { "pretrained" } else { "random" },
            mode: row.mode.to_string(),
            task: row.task.to_string(),
            disabled_terms: row.disabled_terms(),
            seed: row.seed,
            accuracy: r.report.accuracy,
            edit: r.report.edit,
            f1_10: r.report.f1_at(10),
            f1_25: r.report.f1_at(25),
            f1_50: r.report.f1_at(50),
            miou: r.report.miou,
        })
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    crate::datagen::atomic_write_file(path, &bytes)
}
