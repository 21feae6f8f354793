use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{lr_schedule, sum_grads, Sgd, TrainConfig};
use crate::augment::{
    apply_image_augmentation, apply_point_augmentation, frame_correspondence, sample_augmentation,
    sample_image_augmentation, ViewTag,
};
use crate::autograd::{Graph, Mat, ParamSet, Var};
use crate::datagen::PairedSample;
use crate::error::{ensure, Error, Result};
use crate::model::checkpoint::{read_container, save_checkpoint_with, write_container};
use crate::model::{EmbeddingSet, ModelParams};
use crate::objective::{total_loss, BatchGrads, ContrastiveBatch};
use crate::parallel::Execution;
use crate::rng::rng_for;

const SHUFFLE_STREAM: u64 = 0x5u64;
const AUGMENT_STREAM: u64 = 0xa;
const STATE_KIND: &str = "train_state";
const MOMENTUM_PREFIX: &str = "momentum/";

/// Everything needed to continue a pretraining run. Augmentation and shuffle
/// randomness is derived from `(config.seed, epoch, sample)`, so no generator
/// state has to be stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ModelParams,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimisation steps.
    pub step: usize,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            model: ModelParams::init(&config.encoder, config.d_proj, config.seed)?,
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            epoch: 0,
            step: 0,
            epoch_losses: Vec::new(),
            step_losses: Vec::new(),
        })
    }
}

/// Embedding sets produced for one sample during a training step.
#[derive(Debug, Clone)]
pub struct EmittedEmbeddings {
    pub epoch: usize,
    pub step: usize,
    pub sequence_id: String,
    /// `(tower, embeddings)`; towers are the two point views and the image
    /// video, each before and after projection.
    pub sets: Vec<(&'static str, EmbeddingSet)>,
}

pub type Inspector<'a> = &'a (dyn Fn(&EmittedEmbeddings) + Sync);

#[derive(Default)]
pub struct PretrainOptions<'a> {
    pub execution: Execution,
    /// Where `state.ckpt` and `model.ckpt` are written after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub inspector: Option<Inspector<'a>>,
    /// Return once this many epochs are complete.
    pub stop_after: Option<usize>,
    /// Stored in the model checkpoint header.
    pub echo: Option<Value>,
}

struct SampleForward<'p> {
    graph: Graph<'p>,
    zv1: Var,
    zv2: Var,
    hv: Var,
    zf1: Var,
    zf2: Var,
    hf: Var,
    emitted: Vec<(&'static str, EmbeddingSet)>,
}

fn embedding_set(g: &Graph, frames: Var, video: Var, sources: &[usize]) -> EmbeddingSet {
    EmbeddingSet {
        frame_embeddings: g.value(frames).clone(),
        video_embedding: g.value(video).row(0).to_vec(),
        frame_source_indices: sources.to_vec(),
    }
}

fn forward_sample<'p>(
    model: &'p ModelParams,
    sample: &PairedSample,
    config: &TrainConfig,
    epoch: usize,
    index: usize,
    emit: bool,
) -> Result<SampleForward<'p>> {
    let layout = model.layout();
    let (Some(image), Some(point_head), Some(image_head)) =
        (layout.image.as_ref(), layout.point_head.as_ref(), layout.image_head.as_ref())
    else {
        return Err(Error::validation("model", "pretraining needs both branches and both heads"));
    };
    let mut rng = rng_for(config.seed, &[AUGMENT_STREAM, epoch as u64, index as u64]);
    let len = sample.frame_count();
    let rec1 = sample_augmentation(&mut rng, len, ViewTag::T1, &config.augment)?;
    let rec2 = sample_augmentation(&mut rng, len, ViewTag::T2, &config.augment)?;
    let img_aug = sample_image_augmentation(
        &mut rng,
        sample.images.height(),
        sample.images.width(),
        &config.augment,
    )?;
    let v1 = apply_point_augmentation(&sample.points, &rec1)?;
    let v2 = apply_point_augmentation(&sample.points, &rec2)?;
    let img = apply_image_augmentation(&sample.images, &img_aug)?;
    let pairs = frame_correspondence(&rec1, &rec2);
    let k1 = rec1.temporal.kept_indices();
    let k2 = rec2.temporal.kept_indices();

    let mut g = Graph::new(&model.params);
    let p1 = layout.point.forward(&mut g, &v1)?;
    let p2 = layout.point.forward(&mut g, &v2)?;
    let fi = image.forward(&mut g, &img)?;
    let z1 = point_head.forward(&mut g, p1.frames);
    let z2 = point_head.forward(&mut g, p2.frames);
    let h = image_head.forward(&mut g, fi);
    let zv1 = g.max_groups(z1, k1.len());
    let zv2 = g.max_groups(z2, k2.len());
    let hv = g.max_groups(h, len);
    let zf1 = g.select_rows(z1, pairs.iter().map(|p| p.0).collect());
    let zf2 = g.select_rows(z2, pairs.iter().map(|p| p.1).collect());
    let hf = g.select_rows(h, pairs.iter().map(|p| k1[p.0]).collect());

    let mut emitted = Vec::new();
    if emit {
        let all: Vec<usize> = (0..len).collect();
        let f1 = g.max_groups(p1.frames, k1.len());
        let f2 = g.max_groups(p2.frames, k2.len());
        let fv = g.max_groups(fi, len);
        emitted = vec![
            ("point_t1_features", embedding_set(&g, p1.frames, f1, k1)),
            ("point_t2_features", embedding_set(&g, p2.frames, f2, k2)),
            ("image_features", embedding_set(&g, fi, fv, &all)),
            ("point_t1", embedding_set(&g, z1, zv1, k1)),
            ("point_t2", embedding_set(&g, z2, zv2, k2)),
            ("image", embedding_set(&g, h, hv, &all)),
        ];
    }
    Ok(SampleForward {
        graph: g,
        zv1,
        zv2,
        hv,
        zf1,
        zf2,
        hf,
        emitted,
    })
}

impl SampleForward<'_> {
    fn backward(&self, grads: &BatchGrads, i: usize) -> Vec<Option<Mat>> {
        let row = |m: &Mat| m.row(i).to_owned().insert_axis(Axis(0));
        let seeds = vec![
            (self.zv1, row(&grads.z_v_t1)),
            (self.zv2, row(&grads.z_v_t2)),
            (self.hv, row(&grads.h_v)),
            (self.zf1, grads.z_f_t1[i].clone()),
            (self.zf2, grads.z_f_t2[i].clone()),
            (self.hf, grads.h_f[i].clone()),
        ];
        self.graph.backward(seeds).into_params()
    }
}

fn stack_rows(rows: Vec<Mat>) -> Mat {
    let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

fn tag_batch(e: Error, step: usize) -> Error {
    match e {
        Error::Numerical { term, .. } => Error::Numerical {
            term,
            batch: Some(step),
        },
        other => other,
    }
}

/// One optimisation step on the samples `batch`; returns the loss.
fn train_step(
    state: &mut TrainState,
    dataset: &[PairedSample],
    batch: &[usize],
    steps_per_epoch: usize,
    opts: &PretrainOptions<'_>,
) -> Result<f64> {
    let config = &state.config;
    let step = state.step;
    let epoch = state.epoch;
    let emit = opts.inspector.is_some();
    let (loss, grads) = {
        let model = &state.model;
        let forwards = opts
            .execution
            .map(batch, |_, &i| forward_sample(model, &dataset[i], config, epoch, i, emit))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        if let Some(inspect) = opts.inspector {
            for (f, &i) in forwards.iter().zip(batch) {
                inspect(&EmittedEmbeddings {
                    epoch,
                    step,
                    sequence_id: dataset[i].sequence_id().to_string(),
                    sets: f.emitted.clone(),
                });
            }
        }
        let value = |f: &SampleForward, v: Var| f.graph.value(v).clone();
        let cb = ContrastiveBatch::new(
            stack_rows(forwards.iter().map(|f| value(f, f.zv1)).collect()),
            stack_rows(forwards.iter().map(|f| value(f, f.zv2)).collect()),
            stack_rows(forwards.iter().map(|f| value(f, f.hv)).collect()),
            forwards.iter().map(|f| value(f, f.zf1)).collect(),
            forwards.iter().map(|f| value(f, f.zf2)).collect(),
            forwards.iter().map(|f| value(f, f.hf)).collect(),
            config.temperature,
        )
        .map_err(|_| Error::Numerical {
            term: "embeddings".into(),
            batch: Some(step),
        })?;
        let out = total_loss(&cb, &config.objective()).map_err(|e| tag_batch(e, step))?;
        let parts = opts.execution.map(&forwards, |i, f| f.backward(&out.grads, i));
        (out.total, sum_grads(parts, model.params.len()))
    };
    if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical {
            term: "parameter gradient".into(),
            batch: Some(step),
        });
    }
    let lr = lr_schedule(step, steps_per_epoch, config.learning_rate, config.warmup_epochs);
    state.optimizer.step(&mut state.model.params, &grads, lr);
    state.step += 1;
    state.step_losses.push(loss);
    Ok(loss)
}

/// Pretrains from scratch with default options.
pub fn pretrain(dataset: &[PairedSample], config: &TrainConfig) -> Result<TrainState> {
    pretrain_with(dataset, TrainState::new(config)?, &PretrainOptions::default())
}

/// Continues `state` until `config.total_epochs` (or `opts.stop_after`) epochs are done.
pub fn pretrain_with(dataset: &[PairedSample], mut state: TrainState, opts: &PretrainOptions<'_>) -> Result<TrainState> {
    state.config.validate()?;
    let bs = state.config.batch_size;
    ensure(dataset.len() >= bs, "dataset", || {
        format!("{} sequences cannot fill one batch of {bs}", dataset.len())
    })?;
    let steps_per_epoch = dataset.len() / bs;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let end = opts
        .stop_after
        .map_or(state.config.total_epochs, |s| s.min(state.config.total_epochs));
    while state.epoch < end {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_for(state.config.seed, &[SHUFFLE_STREAM, state.epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks_exact(bs) {
            total += train_step(&mut state, dataset, chunk, steps_per_epoch, opts)?;
        }
        let mean = total / steps_per_epoch as f64;
        state.epoch_losses.push(mean);
        state.epoch += 1;
        log::info!("epoch {}/{} loss {mean:.5}", state.epoch, state.config.total_epochs);
        if let Some(dir) = &opts.checkpoint_dir {
            save_train_state(&state, &dir.join("state.ckpt"))?;
            let echo = opts.echo.clone().unwrap_or_else(|| state.config.to_value());
            save_checkpoint_with(&state.model, echo, &dir.join("model.ckpt"))?;
        }
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    kind: String,
    config: TrainConfig,
    epoch: usize,
    step: usize,
    epoch_losses: Vec<f64>,
    step_losses: Vec<f64>,
}

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let header = serde_json::to_value(StateHeader {
        kind: STATE_KIND.into(),
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        epoch_losses: state.epoch_losses.clone(),
        step_losses: state.step_losses.clone(),
    })
    .expect("plain data");
    let mut tensors = state.model.params.clone();
    for (n, v) in state.optimizer.velocity.iter() {
        tensors.insert(format!("{MOMENTUM_PREFIX}{n}"), v.clone());
    }
    write_container(path, &header, &tensors)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let (header, tensors) = read_container(path)?;
    let header: StateHeader =
        serde_json::from_value(header).map_err(|e| Error::corrupt(path, format!("state header: {e}")))?;
    if header.kind != STATE_KIND {
        return Err(Error::corrupt(path, format!("expected a training state, found {:?}", header.kind)));
    }
    let mut params = ParamSet::new();
    let mut velocity = ParamSet::new();
    for (n, v) in tensors.iter() {
        match n.strip_prefix(MOMENTUM_PREFIX) {
            Some(base) => velocity.insert(base, v.clone()),
            None => params.insert(n, v.clone()),
        };
    }
    let cfg = header.config;
    let model = ModelParams::from_params(cfg.encoder.clone(), cfg.d_proj, params)
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(TrainState {
        optimizer: Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity,
        },
        config: cfg,
        model,
        epoch: header.epoch,
        step: header.step,
        epoch_losses: header.epoch_losses,
        step_losses: header.step_losses,
    })
}
