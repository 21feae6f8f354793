//! Contrastive pretraining, supervised fine-tuning and linear probing.

mod config;
mod finetune;
mod pretrain;

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::autograd::{Mat, ParamSet};
use crate::datagen::PairedSample;
use crate::error::{ensure, Result};
use crate::rng::rng_for;

pub use config::{parse_override, set_path, FinetuneConfig, TrainConfig};
pub use finetune::{finetune_segmentation, finetune_with, FinetuneMode, SegmentationModel, Task};
pub use pretrain::{
    load_train_state, pretrain, pretrain_with, save_train_state, EmittedEmbeddings, PretrainOptions,
    TrainState,
};

/// Linear warm-up from 0 to `learning_rate` over `warmup_epochs` epochs, then constant.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, learning_rate: f64, warmup_epochs: usize) -> f64 {
    let warm = warmup_epochs * steps_per_epoch;
    if warm == 0 || step >= warm {
        learning_rate
    } else {
        learning_rate * step as f64 / warm as f64
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g + wd p; p -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter name.
    pub velocity: ParamSet,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: ParamSet::new(),
        }
    }

    /// Updates every parameter with a gradient; `None` entries are skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Mat>], lr: f64) {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let name = params.name(i).to_string();
            let mut step = g.clone();
            if self.weight_decay > 0.0 {
                step.scaled_add(self.weight_decay, params.get(i));
            }
            let v = match self.velocity.index_of(&name) {
                Some(j) => {
                    let v = self.velocity.get_mut(j);
                    *v *= self.momentum;
                    *v += &step;
                    v.clone()
                }
                None => {
                    self.velocity.insert(name, step.clone());
                    step
                }
            };
            params.get_mut(i).scaled_add(-lr, &v);
        }
    }
}

/// Sums per-sample gradient lists in order.
pub(crate) fn sum_grads(parts: Vec<Vec<Option<Mat>>>, len: usize) -> Vec<Option<Mat>> {
    let mut total: Vec<Option<Mat>> = (0..len).map(|_| None).collect();
    for part in parts {
        for (slot, g) in total.iter_mut().zip(part) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
            }
        }
    }
    total
}

/// A uniform random subset of `ceil(fraction * len)` sequences, in original order.
pub fn subsample_split(dataset: &[PairedSample], fraction: f64, seed: u64) -> Result<Vec<PairedSample>> {
    ensure(fraction > 0.0 && fraction <= 1.0, "fraction", || {
        format!("{fraction} is outside (0, 1]")
    })?;
    let k = ((fraction * dataset.len() as f64).ceil() as usize).min(dataset.len());
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng_for(seed, &[0x5b5]));
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| dataset[i].clone()).collect())
}

/// Name-indexed view of a parameter set, used to compare runs.
pub fn params_by_name(ps: &ParamSet) -> HashMap<String, Mat> {
    ps.iter().map(|(n, m)| (n.to_string(), m.clone())).collect()
}
