//! Spatio-temporal augmentations.
//!
//! Point cloud videos get a rigid-plus-scale transform and temporal
//! down-sampling; image videos get a shared crop window and colour jitter.
//! Every augmented point video keeps the list of source frames it was built
//! from, which is what makes frame-level positives well defined when two views
//! keep different frames.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{ImageVideo, Point, PointCloudVideo};
use crate::error::{ensure, Error, Result};
use crate::rng::Rng;

/// Sampling ranges. Angles in radians, translation in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation about the gravity (z) axis.
    pub yaw: (f64, f64),
    /// Rotation about the two horizontal axes.
    pub tilt: (f64, f64),
    pub scale: (f64, f64),
    /// Per-axis translation.
    pub translation: (f64, f64),
    /// Fraction of frames kept by temporal down-sampling, in `(0, 1]`.
    pub keep_rate: f64,
    /// Augment the first view as well instead of keeping it raw.
    pub augment_both_views: bool,
    /// Crop area as a fraction of the frame.
    pub crop_area: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            yaw: (0.0, 2.0 * PI),
            tilt: (-PI / 12.0, PI / 12.0),
            scale: (0.8, 1.25),
            translation: (-0.1, 0.1),
            keep_rate: 0.5,
            augment_both_views: false,
            crop_area: (0.8, 1.0),
            brightness: (0.6, 1.4),
            contrast: (0.6, 1.4),
            saturation: (0.6, 1.4),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("augment.yaw", self.yaw),
            ("augment.tilt", self.tilt),
            ("augment.scale", self.scale),
            ("augment.translation", self.translation),
            ("augment.crop_area", self.crop_area),
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
        ];
        for (name, (lo, hi)) in ranges {
            ensure(lo.is_finite() && hi.is_finite() && lo <= hi, name, || {
                format!("empty range ({lo}, {hi})")
            })?;
        }
        ensure(self.scale.0 > 0.0, "augment.scale", || "scale must be positive".into())?;
        ensure(
            self.crop_area.0 > 0.0 && self.crop_area.1 <= 1.0,
            "augment.crop_area",
            || "crop area must lie in (0, 1]".into(),
        )?;
        for (name, (lo, _)) in [
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
        ] {
            ensure(lo >= 0.0, name, || "multipliers must be non-negative".into())?;
        }
        ensure(
            self.keep_rate > 0.0 && self.keep_rate <= 1.0,
            "augment.keep_rate",
            || format!("{} is outside (0, 1]", self.keep_rate),
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    /// Euler angles about x, y, z; applied as `Rz * Ry * Rx`.
    pub rotation: [f64; 3],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl GeometricParams {
    pub const IDENTITY: GeometricParams = GeometricParams {
        rotation: [0.0; 3],
        scale: 1.0,
        translation: [0.0; 3],
    };

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        [
            [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
            [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
            [-sb, cb * sa, cb * ca],
        ]
    }

    fn validate(&self) -> Result<()> {
        ensure(self.scale > 0.0 && self.scale.is_finite(), "geometric.scale", || {
            format!("{} is not a positive finite scale", self.scale)
        })?;
        ensure(
            self.rotation.iter().chain(&self.translation).all(|v| v.is_finite()),
            "geometric",
            || "non-finite angle or translation".into(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalParams {
    kept_indices: Vec<usize>,
}

impl TemporalParams {
    pub fn new(kept_indices: Vec<usize>) -> Result<Self> {
        ensure(!kept_indices.is_empty(), "temporal.kept_indices", || "empty".into())?;
        ensure(
            kept_indices.windows(2).all(|w| w[0] < w[1]),
            "temporal.kept_indices",
            || "indices must be strictly increasing".into(),
        )?;
        Ok(Self { kept_indices })
    }

    pub fn all(len: usize) -> Self {
        Self {
            kept_indices: (0..len).collect(),
        }
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept_indices
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    T1,
    T2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub geometric: GeometricParams,
    pub temporal: TemporalParams,
    pub view_tag: ViewTag,
}

impl AugmentationRecord {
    pub fn identity(len: usize, view_tag: ViewTag) -> Self {
        Self {
            geometric: GeometricParams::IDENTITY,
            temporal: TemporalParams::all(len),
            view_tag,
        }
    }
}

fn draw(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Uniform-stride down-sampling with a random phase.
fn sample_keep(rng: &mut Rng, len: usize, keep_rate: f64) -> Vec<usize> {
    let stride = ((1.0 / keep_rate).round() as usize).max(1);
    let phase = rng.gen_range(0..stride.min(len));
    (phase..len).step_by(stride).collect()
}

/// Draws the transform for one view. The first view is the raw video unless
/// `config.augment_both_views` is set.
pub fn sample_augmentation(
    rng: &mut Rng,
    len: usize,
    view_tag: ViewTag,
    config: &AugmentConfig,
) -> Result<AugmentationRecord> {
    ensure(len >= 1, "len", || "video must have at least one frame".into())?;
    config.validate()?;
    if view_tag == ViewTag::T1 && !config.augment_both_views {
        return Ok(AugmentationRecord::identity(len, view_tag));
    }
    let rotation = [draw(rng, config.tilt), draw(rng, config.tilt), draw(rng, config.yaw)];
    let scale = draw(rng, config.scale);
    let translation = [
        draw(rng, config.translation),
        draw(rng, config.translation),
        draw(rng, config.translation),
    ];
    Ok(AugmentationRecord {
        geometric: GeometricParams {
            rotation,
            scale,
            translation,
        },
        temporal: TemporalParams {
            kept_indices: sample_keep(rng, len, config.keep_rate),
        },
        view_tag,
    })
}

pub fn apply_point_augmentation(
    video: &PointCloudVideo,
    rec: &AugmentationRecord,
) -> Result<PointCloudVideo> {
    rec.geometric.validate()?;
    let len = video.frame_count();
    if let Some(&bad) = rec.temporal.kept_indices.iter().find(|&&i| i >= len) {
        return Err(Error::validation(
            "temporal.kept_indices",
            format!("index {bad} out of range for {len} frames"),
        ));
    }
    let r = rec.geometric.rotation_matrix();
    let s = rec.geometric.scale;
    let t = rec.geometric.translation;
    let frames = rec
        .temporal
        .kept_indices
        .iter()
        .map(|&src| {
            video
                .frame(src)
                .iter()
                .map(|p| {
                    let p = [p[0] as f64, p[1] as f64, p[2] as f64];
                    let mut q: Point = [0.0; 3];
                    for (k, out) in q.iter_mut().enumerate() {
                        let rot = r[k][0] * p[0] + r[k][1] * p[1] + r[k][2] * p[2];
                        *out = (s * rot + t[k]) as f32;
                    }
                    q
                })
                .collect()
        })
        .collect();
    PointCloudVideo::new(video.sequence_id.clone(), frames)
}

/// Pairs `(index in view 1, index in view 2)` of frames that come from the
/// same source frame, ordered by source index.
pub fn frame_correspondence(
    rec1: &AugmentationRecord,
    rec2: &AugmentationRecord,
) -> Vec<(usize, usize)> {
    let (a, b) = (rec1.temporal.kept_indices(), rec2.temporal.kept_indices());
    let (mut i, mut j) = (0, 0);
    let mut pairs = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                pairs.push((i, j));
                i += 1;
                j += 1;
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageAugParams {
    /// `(top, left, height, width)` in pixels.
    pub crop: (usize, usize, usize, usize),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ImageAugParams {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop: (0, 0, height, width),
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }
}

pub fn sample_image_augmentation(
    rng: &mut Rng,
    height: usize,
    width: usize,
    config: &AugmentConfig,
) -> Result<ImageAugParams> {
    config.validate()?;
    let side = draw(rng, config.crop_area).sqrt();
    let ch = ((height as f64 * side).round() as usize).clamp(1, height);
    let cw = ((width as f64 * side).round() as usize).clamp(1, width);
    let top = rng.gen_range(0..=height - ch);
    let left = rng.gen_range(0..=width - cw);
    Ok(ImageAugParams {
        crop: (top, left, ch, cw),
        brightness: draw(rng, config.brightness),
        contrast: draw(rng, config.contrast),
        saturation: draw(rng, config.saturation),
    })
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Source coordinate and blend weight for bilinear resampling of one axis.
fn sample_axis(dst: usize, out_len: usize, start: usize, len: usize) -> (usize, usize, f64) {
    let scale = len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (start + i0, start + i1, src - i0 as f64)
}

pub fn apply_image_augmentation(video: &ImageVideo, params: &ImageAugParams) -> Result<ImageVideo> {
    let (h, w) = (video.height(), video.width());
    let (top, left, ch, cw) = params.crop;
    ensure(
        ch >= 1 && cw >= 1 && top + ch <= h && left + cw <= w,
        "crop",
        || format!("{:?} does not fit in {h}x{w}", params.crop),
    )?;
    for (name, m) in [
        ("brightness", params.brightness),
        ("contrast", params.contrast),
        ("saturation", params.saturation),
    ] {
        ensure(m >= 0.0 && m.is_finite(), name, || format!("{m} is not a valid multiplier"))?;
    }
    let rows: Vec<_> = (0..h).map(|r| sample_axis(r, h, top, ch)).collect();
    let cols: Vec<_> = (0..w).map(|c| sample_axis(c, w, left, cw)).collect();

    let frames = (0..video.frame_count())
        .map(|t| {
            let mut out = vec![0.0f64; h * w * 3];
            for (r, &(y0, y1, wy)) in rows.iter().enumerate() {
                for (c, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let p00 = video.pixel(t, y0, x0);
                    let p01 = video.pixel(t, y0, x1);
                    let p10 = video.pixel(t, y1, x0);
                    let p11 = video.pixel(t, y1, x1);
                    for k in 0..3 {
                        let top = p00[k] as f64 * (1.0 - wx) + p01[k] as f64 * wx;
                        let bot = p10[k] as f64 * (1.0 - wx) + p11[k] as f64 * wx;
                        out[(r * w + c) * 3 + k] = (top * (1.0 - wy) + bot * wy) * params.brightness;
                    }
                }
            }
            let mean_luma = out
                .chunks_exact(3)
                .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                .sum::<f64>()
                / (h * w) as f64;
            for p in out.chunks_exact_mut(3) {
                for v in p.iter_mut() {
                    *v = (*v - mean_luma) * params.contrast + mean_luma;
                }
                let g = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
                for v in p.iter_mut() {
                    *v = (g + (*v - g) * params.saturation).clamp(0.0, 1.0);
                }
            }
            out.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    ImageVideo::new(video.sequence_id.clone(), h, w, frames)
}
