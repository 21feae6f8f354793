//! Encoders, projection heads and parameter containers.
//!
//! The point branch is a single [`PointEncoder`] whose weights are used for
//! both augmented views, so the two point towers share parameters by
//! construction. The image branch is a separate [`ImageEncoder`]. Each branch
//! has its own [`ProjectionHead`] mapping frame features into the embedding
//! space where the objective is evaluated.

pub mod checkpoint;
pub mod image;
pub mod layers;
pub mod point;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Init, Mat, ParamSet};
use crate::datagen::{ImageVideo, PointCloudVideo};
use crate::error::{ensure, Error, Result};
use crate::rng::rng_for;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadMode, CHECKPOINT_VERSION};
pub use image::ImageEncoder;
pub use layers::ProjectionHead;
pub use point::{ball_query, farthest_point_sampling, PointEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub spatial_stride: usize,
    /// Meters.
    pub ball_radius: f64,
    pub neighbor_samples: usize,
    /// Frames seen by the grouping step and by each attention row; odd.
    pub time_window: usize,
    pub transformer_depth: usize,
    pub transformer_heads: usize,
    pub projection_hidden: usize,
    /// Hidden width of the pointwise offset network.
    pub point_mlp_hidden: usize,
    /// Output channels of the two image convolutions.
    pub image_channels: (usize, usize),
    /// Expected `(H, W)` of image videos.
    pub image_size: (usize, usize),
    /// Standardise each anchor channel over the whole video before frame
    /// pooling. Couples frames of one video; off gives strictly local frames.
    pub anchor_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            spatial_stride: 4,
            ball_radius: 0.5,
            neighbor_samples: 8,
            time_window: 3,
            transformer_depth: 2,
            transformer_heads: 4,
            projection_hidden: 128,
            point_mlp_hidden: 32,
            image_channels: (16, 32),
            image_size: (32, 32),
            anchor_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.feature_dim >= 8, "encoder.feature_dim", || {
            format!("{} is below the minimum of 8", self.feature_dim)
        })?;
        ensure(self.spatial_stride >= 1, "encoder.spatial_stride", || "must be at least 1".into())?;
        ensure(
            self.ball_radius > 0.0 && self.ball_radius.is_finite(),
            "encoder.ball_radius",
            || format!("{} is not positive", self.ball_radius),
        )?;
        ensure(self.neighbor_samples >= 1, "encoder.neighbor_samples", || "must be at least 1".into())?;
        ensure(self.time_window % 2 == 1, "encoder.time_window", || {
            format!("{} is not odd", self.time_window)
        })?;
        ensure(
            self.transformer_heads >= 1 && self.feature_dim % self.transformer_heads == 0,
            "encoder.transformer_heads",
            || format!("{} does not divide feature_dim {}", self.transformer_heads, self.feature_dim),
        )?;
        ensure(self.projection_hidden >= 1, "encoder.projection_hidden", || "must be at least 1".into())?;
        ensure(self.point_mlp_hidden >= 1, "encoder.point_mlp_hidden", || "must be at least 1".into())?;
        ensure(
            self.image_channels.0 >= 1 && self.image_channels.1 >= 1,
            "encoder.image_channels",
            || "must be at least 1".into(),
        )?;
        ensure(
            self.image_size.0 >= 1 && self.image_size.1 >= 1,
            "encoder.image_size",
            || "must be at least 1x1".into(),
        )?;
        Ok(())
    }
}

/// Per-frame embeddings plus their column-wise max.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub frame_embeddings: Mat,
    pub video_embedding: Vec<f64>,
    /// Source frame index of each row of `frame_embeddings`.
    pub frame_source_indices: Vec<usize>,
}

fn column_max(frames: &Mat) -> Vec<f64> {
    frames
        .columns()
        .into_iter()
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

impl EmbeddingSet {
    pub fn from_frames(frame_embeddings: Mat, frame_source_indices: Vec<usize>) -> Self {
        let video_embedding = column_max(&frame_embeddings);
        Self {
            frame_embeddings,
            video_embedding,
            frame_source_indices,
        }
    }

    /// Whether `video_embedding` is exactly the column-wise max of the frames.
    pub fn max_pool_holds(&self) -> bool {
        self.frame_embeddings.nrows() > 0
            && self.video_embedding.len() == self.frame_embeddings.ncols()
            && self.frame_embeddings.columns().into_iter().zip(&self.video_embedding).all(|(c, &v)| {
                c.iter().all(|&x| x <= v) && c.iter().any(|&x| x == v)
            })
    }

    pub fn is_finite(&self) -> bool {
        self.frame_embeddings.iter().chain(&self.video_embedding).all(|v| v.is_finite())
    }
}

/// Which branch a projection head belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Point,
    Image,
}

/// Parameter indices of every module, resolved once against a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub point: PointEncoder,
    pub point_head: Option<ProjectionHead>,
    pub image: Option<ImageEncoder>,
    pub image_head: Option<ProjectionHead>,
}

/// All model weights with the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub d_proj: usize,
    pub params: ParamSet,
    layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.d_proj == other.d_proj && self.params == other.params
    }
}

const POINT_HEAD: &str = "point_head";
const IMAGE_HEAD: &str = "image_head";

fn has_prefix(ps: &ParamSet, prefix: &str) -> bool {
    ps.iter().any(|(n, _)| n.starts_with(prefix))
}

impl ModelParams {
    /// Fresh weights: He-uniform matrices, zero biases, unit layer-norm gains.
    pub fn init(config: &EncoderConfig, d_proj: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure(d_proj >= 1, "d_proj", || "must be at least 1".into())?;
        let mut rng = rng_for(seed, &[0x1417]);
        let mut ps = ParamSet::new();
        let mut init = Init::Random(&mut rng);
        let d = config.feature_dim;
        let h = config.projection_hidden;
        let layout = Layout {
            point: PointEncoder::bind(&mut ps, config, &mut init)?,
            point_head: Some(ProjectionHead::bind(&mut ps, POINT_HEAD, d, h, d_proj, &mut init)?),
            image: Some(ImageEncoder::bind(&mut ps, config, &mut init)?),
            image_head: Some(ProjectionHead::bind(&mut ps, IMAGE_HEAD, d, h, d_proj, &mut init)?),
        };
        Ok(Self {
            config: config.clone(),
            d_proj,
            params: ps,
            layout,
        })
    }

    /// Rebuilds the layout over existing tensors. Branches whose tensors are
    /// absent are left out; any tensor present must have the configured shape.
    pub fn from_params(config: EncoderConfig, d_proj: usize, mut params: ParamSet) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let h = config.projection_hidden;
        let mut req = Init::Require;
        let point = PointEncoder::bind(&mut params, &config, &mut req)?;
        let point_head = if has_prefix(&params, POINT_HEAD) {
            Some(ProjectionHead::bind(&mut params, POINT_HEAD, d, h, d_proj, &mut req)?)
        } else {
            None
        };
        let image = if has_prefix(&params, ImageEncoder::PREFIX) {
            Some(ImageEncoder::bind(&mut params, &config, &mut req)?)
        } else {
            None
        };
        let image_head = if has_prefix(&params, IMAGE_HEAD) {
            Some(ProjectionHead::bind(&mut params, IMAGE_HEAD, d, h, d_proj, &mut req)?)
        } else {
            None
        };
        Ok(Self {
            config,
            d_proj,
            params,
            layout: Layout {
                point,
                point_head,
                image,
                image_head,
            },
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn has_image_branch(&self) -> bool {
        self.layout.image.is_some()
    }

    /// Drops the image encoder and image head.
    pub fn point_branch_only(&self) -> Self {
        let params = self
            .params
            .filtered(|n| !n.starts_with(ImageEncoder::PREFIX) && !n.starts_with(IMAGE_HEAD));
        Self::from_params(self.config.clone(), self.d_proj, params).expect("subset of a valid layout")
    }

    /// Only the point encoder; what downstream tasks start from.
    pub fn encoder_only(&self) -> Self {
        let params = self.params.filtered(|n| n.starts_with(PointEncoder::PREFIX));
        Self::from_params(self.config.clone(), self.d_proj, params).expect("subset of a valid layout")
    }

    pub fn is_finite(&self) -> bool {
        self.params.all_finite()
    }

    fn head(&self, modality: Modality) -> Result<&ProjectionHead> {
        let head = match modality {
            Modality::Point => self.layout.point_head.as_ref(),
            Modality::Image => self.layout.image_head.as_ref(),
        };
        head.ok_or_else(|| Error::validation("head_params", format!("no {modality:?} projection head")))
    }
}

/// Pre-projection point features, one row per input frame.
pub fn encode_points(video: &PointCloudVideo, params: &ModelParams) -> Result<EmbeddingSet> {
    let mut g = Graph::new(&params.params);
    let out = params.layout.point.forward(&mut g, video)?;
    Ok(EmbeddingSet::from_frames(
        g.value(out.frames).clone(),
        (0..video.frame_count()).collect(),
    ))
}

/// Pre-projection image features, one row per input frame.
pub fn encode_images(video: &ImageVideo, params: &ModelParams) -> Result<EmbeddingSet> {
    let enc = params
        .layout
        .image
        .as_ref()
        .ok_or_else(|| Error::validation("params", "checkpoint has no image encoder"))?;
    let mut g = Graph::new(&params.params);
    let out = enc.forward(&mut g, video)?;
    Ok(EmbeddingSet::from_frames(
        g.value(out).clone(),
        (0..video.frame_count()).collect(),
    ))
}

/// Applies the projection head of `modality` to every frame and re-pools.
pub fn project(features: &EmbeddingSet, params: &ModelParams, modality: Modality) -> Result<EmbeddingSet> {
    let d = params.config.feature_dim;
    ensure(features.frame_embeddings.ncols() == d, "features", || {
        format!("width {} does not match head input {d}", features.frame_embeddings.ncols())
    })?;
    let head = params.head(modality)?;
    let mut g = Graph::new(&params.params);
    let x = g.input(features.frame_embeddings.clone());
    let y = head.forward(&mut g, x);
    Ok(EmbeddingSet::from_frames(
        g.value(y).clone(),
        features.frame_source_indices.clone(),
    ))
}
