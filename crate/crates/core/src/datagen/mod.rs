//! Synthetic paired point-cloud / image videos and the on-disk dataset format.
//!
//! A scene is a handful of rigid primitives moving through a sequence of
//! motion phases (still, translate, rotate about a pivot). The image stream is
//! an orthographic top-down rendering of the very same points, so the two
//! modalities are correlated frame by frame. Per-frame labels are the motion
//! phase; per-point labels are the primitive kind.

mod io;
mod scene;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use io::{
    load_dataset, read_manifest, write_dataset, write_sequence, Manifest, SequenceEntry, Split,
    Splits, MANIFEST_VERSION,
};
pub(crate) use io::atomic_write_file;
pub use scene::{generate_dataset, project_to_pixel, synth_scene, DatasetSpec, SyntheticDataset};

/// Per-frame action classes, indexed by label id.
pub const ACTION_CLASS_NAMES: [&str; 3] = ["still", "translate", "rotate"];
/// Per-point semantic classes, indexed by label id.
pub const SHAPE_CLASS_NAMES: [&str; 3] = ["box", "sphere", "cylinder"];
pub const NUM_MOTION_CLASSES: u32 = 3;
/// Label value for frames (or points) without annotation.
pub const UNLABELED: i32 = -1;

pub type Point = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudVideo {
    pub sequence_id: String,
    frames: Vec<Vec<Point>>,
}

impl PointCloudVideo {
    pub fn new(sequence_id: impl Into<String>, frames: Vec<Vec<Point>>) -> Result<Self> {
        ensure(!frames.is_empty(), "points.frames", || "L must be at least 1".into())?;
        let n = frames[0].len();
        ensure(n >= 1, "points.frames", || "N must be at least 1".into())?;
        for (t, f) in frames.iter().enumerate() {
            ensure(f.len() == n, "points.frames", || {
                format!("frame {t} has {} points, expected {n}", f.len())
            })?;
            ensure(
                f.iter().all(|p| p.iter().all(|c| c.is_finite())),
                "points.frames",
                || format!("frame {t} has a non-finite coordinate"),
            )?;
        }
        Ok(Self {
            sequence_id: sequence_id.into(),
            frames,
        })
    }

    pub fn frames(&self) -> &[Vec<Point>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[Point] {
        &self.frames[t]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn points_per_frame(&self) -> usize {
        self.frames[0].len()
    }
}

/// RGB frames stored row-major as `[H][W][3]`, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVideo {
    pub sequence_id: String,
    height: usize,
    width: usize,
    frames: Vec<Vec<f32>>,
}

impl ImageVideo {
    pub fn new(
        sequence_id: impl Into<String>,
        height: usize,
        width: usize,
        frames: Vec<Vec<f32>>,
    ) -> Result<Self> {
        ensure(!frames.is_empty(), "images.frames", || "L must be at least 1".into())?;
        ensure(height >= 1 && width >= 1, "images.size", || {
            format!("{height}x{width} is empty")
        })?;
        for (t, f) in frames.iter().enumerate() {
            ensure(f.len() == height * width * 3, "images.frames", || {
                format!("frame {t} has {} values, expected {}", f.len(), height * width * 3)
            })?;
            ensure(
                f.iter().all(|v| (0.0..=1.0).contains(v)),
                "images.frames",
                || format!("frame {t} has a value outside [0,1]"),
            )?;
        }
        Ok(Self {
            sequence_id: sequence_id.into(),
            height,
            width,
            frames,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t]
    }

    pub fn pixel(&self, t: usize, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        let f = &self.frames[t];
        [f[o], f[o + 1], f[o + 2]]
    }
}

/// Generation parameters for one synthetic sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub motion_class: u32,
    pub num_objects: u32,
    pub frame_count: u32,
    pub points_per_frame: u32,
    /// `(H, W)` in pixels.
    pub image_size: (u32, u32),
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.motion_class < NUM_MOTION_CLASSES, "motion_class", || {
            format!("{} is not below {NUM_MOTION_CLASSES}", self.motion_class)
        })?;
        ensure(self.num_objects >= 1, "num_objects", || "must be at least 1".into())?;
        ensure(self.frame_count >= 2, "frame_count", || {
            format!("{} is below the minimum of 2", self.frame_count)
        })?;
        ensure(self.points_per_frame >= 8, "points_per_frame", || {
            format!("{} is below the minimum of 8", self.points_per_frame)
        })?;
        ensure(
            self.points_per_frame >= self.num_objects,
            "points_per_frame",
            || "fewer points than objects".into(),
        )?;
        ensure(
            self.image_size.0 >= 4 && self.image_size.1 >= 4,
            "image_size",
            || format!("{:?} is below the minimum of 4x4", self.image_size),
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub points: PointCloudVideo,
    pub images: ImageVideo,
    /// Per-frame action labels; [`UNLABELED`] marks a frame without annotation.
    pub labels: Option<Vec<i32>>,
    /// Per-point semantic labels, `[L][N]`.
    pub point_labels: Option<Vec<Vec<i32>>>,
    /// The generating spec, when the sample is synthetic.
    pub spec: Option<SceneSpec>,
}

impl PairedSample {
    pub fn new(
        points: PointCloudVideo,
        images: ImageVideo,
        labels: Option<Vec<i32>>,
        point_labels: Option<Vec<Vec<i32>>>,
    ) -> Result<Self> {
        ensure(
            points.sequence_id == images.sequence_id,
            "sequence_id",
            || format!("{} != {}", points.sequence_id, images.sequence_id),
        )?;
        let l = points.frame_count();
        ensure(images.frame_count() == l, "images.frames", || {
            format!("{} image frames for {l} point frames", images.frame_count())
        })?;
        if let Some(lab) = &labels {
            ensure(lab.len() == l, "labels", || {
                format!("{} labels for {l} frames", lab.len())
            })?;
            ensure(lab.iter().all(|&v| v >= UNLABELED), "labels", || {
                "label below -1".into()
            })?;
        }
        if let Some(pl) = &point_labels {
            let n = points.points_per_frame();
            ensure(
                pl.len() == l && pl.iter().all(|f| f.len() == n),
                "point_labels",
                || "shape does not match the point cloud".into(),
            )?;
        }
        Ok(Self {
            points,
            images,
            labels,
            point_labels,
            spec: None,
        })
    }

    pub fn sequence_id(&self) -> &str {
        &self.points.sequence_id
    }

    pub fn frame_count(&self) -> usize {
        self.points.frame_count()
    }
}

/// Maximal runs of equal labels as `(label, start, end)` with `end` exclusive.
pub fn label_runs(labels: &[i32]) -> Vec<(i32, usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            runs.push((labels[start], start, t));
            start = t;
        }
    }
    runs
}
