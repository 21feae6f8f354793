use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{lr_schedule, sum_grads, Sgd, TrainConfig};
use crate::autograd::{Graph, Init, Mat, ParamSet, Var};
use crate::datagen::{PairedSample, PointCloudVideo, UNLABELED};
use crate::error::{ensure, Error, Result};
use crate::eval::Predictor;
use crate::model::checkpoint::{load_checkpoint_with, save_checkpoint_with, LoadMode};
use crate::model::layers::Linear;
use crate::model::ModelParams;
use crate::parallel::Execution;
use crate::rng::rng_for;

const HEAD_STREAM: u64 = 0x4ead;
const SHUFFLE_STREAM: u64 = 0xf7;
const STD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Encoder and classifier are trained.
    Full,
    /// Only the classifier is trained on frozen encoder features.
    LinearProbe,
    /// Like `Full`, but the encoder starts from random weights.
    Scratch,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "linear" | "linear_probe" => Ok(Self::LinearProbe),
            "scratch" => Ok(Self::Scratch),
            _ => Err(Error::validation("mode", format!("{s:?} is not one of full, linear, scratch"))),
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::LinearProbe => "linear",
            Self::Scratch => "scratch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One label per frame.
    Action,
    /// One label per point.
    Semantic,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "action" => Ok(Self::Action),
            "semantic" => Ok(Self::Semantic),
            _ => Err(Error::validation("task", format!("{s:?} is not one of action, semantic"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Action => "action",
            Self::Semantic => "semantic",
        })
    }
}

/// Classifier parameters. The per-point head scores each anchor from its own
/// feature plus its frame's feature.
#[derive(Debug, Clone)]
enum Head {
    Action(Linear),
    Semantic { anchor: Linear, frame: Linear },
}

impl Head {
    fn bind(ps: &mut ParamSet, task: Task, d: usize, classes: usize, init: &mut Init<'_>) -> Result<Self> {
        Ok(match task {
            Task::Action => Head::Action(Linear::bind(ps, "action_head", d, classes, init)?),
            Task::Semantic => Head::Semantic {
                anchor: Linear::bind(ps, "semantic_head.anchor", d, classes, init)?,
                frame: Linear::bind(ps, "semantic_head.frame", d, classes, init)?,
            },
        })
    }

    fn parts(&self) -> usize {
        match self {
            Head::Action(_) => 1,
            Head::Semantic { .. } => 2,
        }
    }

    /// Logits from the head inputs: `[frames]` or `[anchors, frames repeated per anchor]`.
    fn logits(&self, g: &mut Graph, parts: &[Var]) -> Var {
        match self {
            Head::Action(l) => l.forward(g, parts[0]),
            Head::Semantic { anchor, frame } => {
                let a = anchor.forward(g, parts[0]);
                let f = frame.forward(g, parts[1]);
                g.add(a, f)
            }
        }
    }
}

/// One training or inference unit: a (sub-)video and its supervision.
struct Example {
    video: PointCloudVideo,
    frame_labels: Option<Vec<i32>>,
    point_labels: Option<Vec<Vec<i32>>>,
}

/// Consecutive clips of `len` frames covering the sequence; the last clip is
/// shifted back to end at the final frame.
fn clip_starts(frames: usize, len: usize) -> Vec<usize> {
    if frames <= len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=frames - len).step_by(len).collect();
    if starts.last().map_or(true, |&s| s + len < frames) {
        starts.push(frames - len);
    }
    starts
}

fn clip(sample: &PairedSample, start: usize, len: usize) -> Result<Example> {
    let end = (start + len).min(sample.frame_count());
    Ok(Example {
        video: PointCloudVideo::new(
            sample.points.sequence_id.clone(),
            sample.points.frames()[start..end].to_vec(),
        )?,
        frame_labels: None,
        point_labels: sample.point_labels.as_ref().map(|pl| pl[start..end].to_vec()),
    })
}

fn examples(sample: &PairedSample, task: Task, seq_len: usize) -> Result<Vec<Example>> {
    match task {
        Task::Action => Ok(vec![Example {
            video: sample.points.clone(),
            frame_labels: sample.labels.clone(),
            point_labels: None,
        }]),
        Task::Semantic => clip_starts(sample.frame_count(), seq_len)
            .into_iter()
            .map(|s| clip(sample, s, seq_len))
            .collect(),
    }
}

fn check_labels(dataset: &[PairedSample], task: Task, classes: usize) -> Result<()> {
    for s in dataset {
        let labels: Vec<i32> = match task {
            Task::Action => s.labels.clone().ok_or_else(|| {
                Error::validation("labels", format!("sequence {} has no frame labels", s.sequence_id()))
            })?,
            Task::Semantic => s
                .point_labels
                .as_ref()
                .ok_or_else(|| {
                    Error::validation("point_labels", format!("sequence {} has no point labels", s.sequence_id()))
                })?
                .concat(),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l != UNLABELED && (l < 0 || l as usize >= classes)) {
            return Err(Error::validation(
                "labels",
                format!("label {bad} in sequence {} is not below the class count {classes}", s.sequence_id()),
            ));
        }
    }
    Ok(())
}

/// Per-column mean and standard deviation of one head input.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Mat,
    std: Mat,
}

impl Standardizer {
    fn fit(x: &Mat) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_EPS)).insert_axis(Axis(0));
        Self { mean, std }
    }

    fn apply(&self, x: &Mat) -> Mat {
        (x - &self.mean) / &self.std
    }

    /// The same map as a graph node, so gradients reach the encoder.
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let inv = self.std.mapv(f64::recip);
        let scale = g.input(Mat::from_diag(&inv.row(0)));
        let shift = g.input(-(&self.mean * &inv));
        let y = g.matmul(x, scale);
        g.add_row(y, shift)
    }
}

/// A point encoder plus a classification head for one task.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    /// Encoder tensors and head tensors.
    pub model: ModelParams,
    pub task: Task,
    pub mode: FinetuneMode,
    pub num_classes: usize,
    pub seq_len: usize,
    head: Head,
    standardizers: Option<Vec<Standardizer>>,
}

/// Encoder outputs for one example: head inputs and, for the per-point task,
/// the anchor indices behind each anchor row.
struct Encoded {
    parts: Vec<Var>,
    anchors: Vec<Vec<usize>>,
}

fn encode(g: &mut Graph, model: &ModelParams, task: Task, video: &PointCloudVideo) -> Result<Encoded> {
    let out = model.layout().point.forward(g, video)?;
    let parts = match task {
        Task::Action => vec![out.frames],
        Task::Semantic => {
            let m = out.anchor_indices[0].len();
            let rep = g.repeat_rows(out.frames, m);
            vec![out.anchors, rep]
        }
    };
    Ok(Encoded {
        parts,
        anchors: out.anchor_indices,
    })
}

/// Target of every logit row: frame labels, or the label of each anchor point.
fn row_labels(task: Task, ex: &Example, anchors: &[Vec<usize>]) -> Vec<i32> {
    match task {
        Task::Action => ex.frame_labels.clone().unwrap_or_default(),
        Task::Semantic => {
            let pl = ex.point_labels.as_ref().expect("checked");
            anchors
                .iter()
                .enumerate()
                .flat_map(|(t, a)| a.iter().map(move |&i| pl[t][i]))
                .collect()
        }
    }
}

/// Softmax cross-entropy summed over labelled rows, and its gradient scaled by `1 / denom`.
fn cross_entropy(logits: &Mat, labels: &[i32], denom: f64) -> (f64, Mat) {
    let mut grad = Mat::zeros(logits.dim());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y == UNLABELED {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[y as usize];
        for c in 0..row.len() {
            let p = (row[c] - lse).exp();
            grad[[r, c]] = (p - if c == y as usize { 1.0 } else { 0.0 }) / denom;
        }
    }
    (loss, grad)
}

fn argmax_rows(m: &Mat) -> Vec<i32> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for c in 1..r.len() {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best as i32
        })
        .collect()
}

fn labelled(labels: &[i32]) -> usize {
    labels.iter().filter(|&&l| l != UNLABELED).count()
}

/// Trains a classifier on `dataset`. `init` supplies pretrained weights for
/// `Full` and `LinearProbe`; without it they start from random weights.
pub fn finetune_segmentation(
    dataset: &[PairedSample],
    init: Option<&ModelParams>,
    config: &TrainConfig,
    mode: FinetuneMode,
    task: Task,
) -> Result<SegmentationModel> {
    finetune_with(dataset, init, config, mode, task, Execution::default())
}

pub fn finetune_with(
    dataset: &[PairedSample],
    init: Option<&ModelParams>,
    config: &TrainConfig,
    mode: FinetuneMode,
    task: Task,
    execution: Execution,
) -> Result<SegmentationModel> {
    config.finetune.validate()?;
    ensure(!dataset.is_empty(), "dataset", || "no labelled sequences".into())?;
    let ft = &config.finetune;
    let classes = ft.num_classes;
    check_labels(dataset, task, classes)?;

    let encoder = match (mode, init) {
        (FinetuneMode::Scratch, _) | (_, None) => {
            ModelParams::init(&config.encoder, config.d_proj, config.seed)?.encoder_only()
        }
        (_, Some(p)) => p.encoder_only(),
    };
    let mut params = encoder.params.clone();
    let mut rng = rng_for(config.seed, &[HEAD_STREAM]);
    let head = Head::bind(
        &mut params,
        task,
        encoder.config.feature_dim,
        classes,
        &mut Init::Random(&mut rng),
    )?;
    let model = ModelParams::from_params(encoder.config.clone(), encoder.d_proj, params)?;
    let mut sm = SegmentationModel {
        model,
        task,
        mode,
        num_classes: classes,
        seq_len: ft.seq_len,
        head,
        standardizers: None,
    };
    let exs: Vec<Example> = dataset
        .iter()
        .map(|s| examples(s, task, ft.seq_len))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    match mode {
        FinetuneMode::LinearProbe => train_probe(&mut sm, &exs, config, execution)?,
        FinetuneMode::Full | FinetuneMode::Scratch => train_full(&mut sm, &exs, config, execution)?,
    }
    Ok(sm)
}

/// Frozen head inputs (stacked over examples) and their row labels.
fn head_inputs(sm: &SegmentationModel, exs: &[Example], execution: Execution) -> Result<(Vec<Mat>, Vec<i32>)> {
    let task = sm.task;
    let model = &sm.model;
    let features = execution
        .map(exs, |_, ex| -> Result<(Vec<Mat>, Vec<i32>)> {
            let mut g = Graph::new(&model.params);
            let enc = encode(&mut g, model, task, &ex.video)?;
            let parts = enc.parts.iter().map(|&v| g.value(v).clone()).collect();
            Ok((parts, row_labels(task, ex, &enc.anchors)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<Mat> = (0..sm.head.parts())
        .map(|p| {
            let views: Vec<_> = features.iter().map(|f| f.0[p].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        })
        .collect();
    let labels: Vec<i32> = features.iter().flat_map(|f| f.1.iter().copied()).collect();
    Ok((inputs, labels))
}

fn train_probe(sm: &mut SegmentationModel, exs: &[Example], config: &TrainConfig, execution: Execution) -> Result<()> {
    let ft = &config.finetune;
    let (mut inputs, labels) = head_inputs(sm, exs, execution)?;
    let count = labelled(&labels);
    ensure(count > 0, "labels", || "no labelled rows to train on".into())?;
    if ft.standardize_features {
        let st: Vec<Standardizer> = inputs.iter().map(Standardizer::fit).collect();
        for (x, s) in inputs.iter_mut().zip(&st) {
            *x = s.apply(x);
        }
        sm.standardizers = Some(st);
    }
    let mut opt = Sgd::new(ft.momentum, ft.probe_weight_decay);
    for step in 0..ft.probe_steps {
        let grads = {
            let mut g = Graph::new(&sm.model.params);
            let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
            let logits = sm.head.logits(&mut g, &vars);
            let (loss, dl) = cross_entropy(g.value(logits), &labels, count as f64);
            if step % 100 == 0 {
                log::debug!("probe step {step} loss {:.5}", loss / count as f64);
            }
            g.backward(vec![(logits, dl)]).into_params()
        };
        opt.step(&mut sm.model.params, &grads, ft.probe_learning_rate);
    }
    Ok(())
}

fn train_full(sm: &mut SegmentationModel, exs: &[Example], config: &TrainConfig, execution: Execution) -> Result<()> {
    let ft = &config.finetune;
    let task = sm.task;
    if ft.standardize_features {
        let (inputs, _) = head_inputs(sm, exs, execution)?;
        sm.standardizers = Some(inputs.iter().map(Standardizer::fit).collect());
    }
    let mut opt = Sgd::new(ft.momentum, ft.weight_decay);
    let steps_per_epoch = exs.len().div_ceil(ft.batch_size);
    let mut step = 0;
    for epoch in 0..ft.epochs {
        let mut order: Vec<usize> = (0..exs.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        for batch in order.chunks(ft.batch_size) {
            let (loss, rows, grads) = {
                let model = &sm.model;
                let head = &sm.head;
                let standardizers = sm.standardizers.as_deref();
                let forwards = execution
                    .map(batch, |_, &i| -> Result<(Graph, Var, Vec<i32>)> {
                        let mut g = Graph::new(&model.params);
                        let enc = encode(&mut g, model, task, &exs[i].video)?;
                        let parts = match standardizers {
                            Some(st) => enc.parts.iter().zip(st).map(|(&v, s)| s.forward(&mut g, v)).collect(),
                            None => enc.parts.clone(),
                        };
                        let logits = head.logits(&mut g, &parts);
                        let labels = row_labels(task, &exs[i], &enc.anchors);
                        Ok((g, logits, labels))
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                let rows: usize = forwards.iter().map(|f| labelled(&f.2)).sum();
                let denom = rows.max(1) as f64;
                let parts = execution.map(&forwards, |_, (g, logits, labels)| {
                    let (loss, dl) = cross_entropy(g.value(*logits), labels, denom);
                    (loss, g.backward(vec![(*logits, dl)]).into_params())
                });
                let loss: f64 = parts.iter().map(|p| p.0).sum();
                let grads = sum_grads(parts.into_iter().map(|p| p.1).collect(), model.params.len());
                (loss, rows, grads)
            };
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    term: "cross_entropy".into(),
                    batch: Some(step),
                });
            }
            let lr = lr_schedule(step, steps_per_epoch, ft.learning_rate, ft.warmup_epochs);
            opt.step(&mut sm.model.params, &grads, lr);
            step += 1;
            epoch_loss += loss;
            epoch_rows += rows;
        }
        log::debug!("finetune epoch {} loss {:.5}", epoch + 1, epoch_loss / epoch_rows.max(1) as f64);
    }
    Ok(())
}

impl SegmentationModel {
    /// Logits and anchors for one example, applying the probe standardisation.
    fn logits(&self, video: &PointCloudVideo) -> Result<(Mat, Vec<Vec<usize>>)> {
        let mut g = Graph::new(&self.model.params);
        let enc = encode(&mut g, &self.model, self.task, video)?;
        let parts = match &self.standardizers {
            Some(st) => enc
                .parts
                .iter()
                .zip(st)
                .map(|(&v, s)| {
                    let x = s.apply(g.value(v));
                    g.input(x)
                })
                .collect(),
            None => enc.parts,
        };
        let logits = self.head.logits(&mut g, &parts);
        Ok((g.value(logits).clone(), enc.anchors))
    }

    pub fn predict_frames(&self, sample: &PairedSample) -> Result<Vec<i32>> {
        ensure(self.task == Task::Action, "task", || "model predicts per-point labels".into())?;
        Ok(argmax_rows(&self.logits(&sample.points)?.0))
    }

    /// Per-point labels: each point takes the class of the nearest anchor in its frame.
    pub fn predict_points(&self, sample: &PairedSample) -> Result<Vec<Vec<i32>>> {
        ensure(self.task == Task::Semantic, "task", || "model predicts per-frame labels".into())?;
        let l = sample.frame_count();
        let mut out = vec![Vec::new(); l];
        for start in clip_starts(l, self.seq_len) {
            let ex = clip(sample, start, self.seq_len)?;
            let (logits, anchors) = self.logits(&ex.video)?;
            let classes = argmax_rows(&logits);
            let m = anchors[0].len();
            for (t, frame_anchors) in anchors.iter().enumerate() {
                let frame = ex.video.frame(t);
                out[start + t] = frame
                    .iter()
                    .map(|p| {
                        let mut best = (f64::INFINITY, 0);
                        for (a, &ai) in frame_anchors.iter().enumerate() {
                            let q = frame[ai];
                            let d: f64 = (0..3).map(|c| (p[c] as f64 - q[c] as f64).powi(2)).sum();
                            if d < best.0 {
                                best = (d, a);
                            }
                        }
                        classes[t * m + best.1]
                    })
                    .collect();
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, echo: Value) -> Result<()> {
        let mut params = self.model.params.clone();
        if let Some(st) = &self.standardizers {
            for (k, s) in st.iter().enumerate() {
                params.insert(format!("probe_norm.{k}.mean"), s.mean.clone());
                params.insert(format!("probe_norm.{k}.std"), s.std.clone());
            }
        }
        let model = ModelParams::from_params(self.model.config.clone(), self.model.d_proj, params)?;
        let extra = json!({
            "task": self.task,
            "mode": self.mode,
            "num_classes": self.num_classes,
            "seq_len": self.seq_len,
            "config": echo,
        });
        save_checkpoint_with(&model, extra, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (model, extra) = load_checkpoint_with(path, LoadMode::Full)?;
        #[derive(Deserialize)]
        struct Extra {
            task: Task,
            mode: FinetuneMode,
            num_classes: usize,
            seq_len: usize,
        }
        let extra: Extra = serde_json::from_value(extra).map_err(|_| {
            Error::validation("checkpoint", format!("{} is not a fine-tuned model", path.display()))
        })?;
        let mut params = model.params.filtered(|n| !n.starts_with("probe_norm."));
        let head = Head::bind(
            &mut params,
            extra.task,
            model.config.feature_dim,
            extra.num_classes,
            &mut Init::Require,
        )?;
        let standardizers = (0..head.parts())
            .map(|k| {
                let mean = model.params.by_name(&format!("probe_norm.{k}.mean"))?;
                let std = model.params.by_name(&format!("probe_norm.{k}.std"))?;
                Some(Standardizer {
                    mean: mean.clone(),
                    std: std.clone(),
                })
            })
            .collect::<Option<Vec<_>>>();
        Ok(Self {
            model: ModelParams::from_params(model.config.clone(), model.d_proj, params)?,
            task: extra.task,
            mode: extra.mode,
            num_classes: extra.num_classes,
            seq_len: extra.seq_len,
            head,
            standardizers,
        })
    }

    /// Encoder tensors only, for freeze checks.
    pub fn encoder_params(&self) -> ParamSet {
        self.model.params.filtered(|n| n.starts_with("point_encoder."))
    }
}

impl Predictor for SegmentationModel {
    fn task(&self) -> Task {
        self.task
    }

    fn predict_frames(&self, sample: &PairedSample) -> Result<Vec<i32>> {
        SegmentationModel::predict_frames(self, sample)
    }

    fn predict_points(&self, sample: &PairedSample) -> Result<Vec<Vec<i32>>> {
        SegmentationModel::predict_points(self, sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_starts_cover_every_frame() {
        assert_eq!(clip_starts(8, 3), vec![0, 3, 5]);
        assert_eq!(clip_starts(6, 3), vec![0, 3]);
        assert_eq!(clip_starts(2, 3), vec![0]);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_row() {
        let logits = ndarray::array![[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]];
        let (loss, g) = cross_entropy(&logits, &[1, UNLABELED], 1.0);
        let expected = -(2f64.exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp())).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!(g.row(0).sum().abs() < 1e-12);
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modes_and_tasks_parse() {
        assert_eq!("linear".parse::<FinetuneMode>().unwrap(), FinetuneMode::LinearProbe);
        assert_eq!("semantic".parse::<Task>().unwrap(), Task::Semantic);
        assert!("linearr".parse::<FinetuneMode>().unwrap_err().is_validation());
    }
}
