use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ImageVideo, PairedSample, Point, PointCloudVideo, SceneSpec, NUM_MOTION_CLASSES};
use crate::error::{ensure, Result};
use crate::rng::{derive_seed, rng_for, Rng};

/// Half-width of the square ground region seen by the camera, meters.
const VIEW_EXTENT: f64 = 1.5;
/// Height range mapped onto the depth shading ramp.
const DEPTH_RANGE: (f64, f64) = (-0.5, 1.0);
/// Pixels painted around each projected point (Chebyshev radius).
const SPLAT_RADIUS: i64 = 1;
/// Trajectories are steered back once the scene centroid leaves this radius.
const SAFE_RADIUS: f64 = 0.7;

const STILL: i32 = 0;
const TRANSLATE: i32 = 1;
const ROTATE: i32 = 2;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    fn class_id(&self) -> i32 {
        match self {
            Shape::Box { .. } => 0,
            Shape::Sphere { .. } => 1,
            Shape::Cylinder { .. } => 2,
        }
    }

    fn random(rng: &mut Rng) -> Self {
        let size = rng.gen_range(0.15..0.3);
        match rng.gen_range(0..3) {
            0 => Shape::Box {
                half: [
                    size * rng.gen_range(0.6..1.0),
                    size * rng.gen_range(0.3..0.7),
                    size * rng.gen_range(0.4..1.0),
                ],
            },
            1 => Shape::Sphere { radius: size },
            _ => Shape::Cylinder {
                radius: size * 0.6,
                half_height: size,
            },
        }
    }

    /// Uniform sample on the surface, in the object frame.
    fn sample_surface(&self, rng: &mut Rng) -> [f64; 3] {
        match *self {
            Shape::Box { half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = a;
                        break;
                    }
                    pick -= area;
                }
                let mut p = [0.0; 3];
                for (k, v) in p.iter_mut().enumerate() {
                    *v = rng.gen_range(-half[k]..half[k]);
                }
                p[axis] = if rng.gen_bool(0.5) { half[axis] } else { -half[axis] };
                p
            }
            Shape::Sphere { radius } => {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let phi = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let caps = 2.0 * PI * radius * radius;
                let phi = rng.gen_range(0.0..2.0 * PI);
                if rng.gen_range(0.0..side + caps) < side {
                    let z = rng.gen_range(-half_height..half_height);
                    [radius * phi.cos(), radius * phi.sin(), z]
                } else {
                    let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                    let z = if rng.gen_bool(0.5) { half_height } else { -half_height };
                    [r * phi.cos(), r * phi.sin(), z]
                }
            }
        }
    }
}

/// Phase schedule per motion class; each sequence plays three phases.
fn phase_schedule(motion_class: u32) -> [i32; 3] {
    let c = motion_class as i32;
    let next = (c + 1) % NUM_MOTION_CLASSES as i32;
    [c, next, c]
}

/// Rigid pose of the whole scene: `p = R(yaw) p0 + offset`.
#[derive(Debug, Clone, Copy)]
struct Pose {
    yaw: f64,
    offset: [f64; 2],
}

impl Pose {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.offset[0],
            s * p[0] + c * p[1] + self.offset[1],
            p[2],
        ]
    }

    fn rotate_about(&self, pivot: [f64; 2], angle: f64) -> Pose {
        let (s, c) = angle.sin_cos();
        let d = [self.offset[0] - pivot[0], self.offset[1] - pivot[1]];
        Pose {
            yaw: self.yaw + angle,
            offset: [
                c * d[0] - s * d[1] + pivot[0],
                s * d[0] + c * d[1] + pivot[1],
            ],
        }
    }
}

/// Column/row (fractional) of a world point in the top-down orthographic view.
pub fn project_to_pixel(p: Point, height: usize, width: usize) -> (f64, f64) {
    let u = (p[0] as f64 + VIEW_EXTENT) / (2.0 * VIEW_EXTENT) * width as f64;
    let v = (VIEW_EXTENT - p[1] as f64) / (2.0 * VIEW_EXTENT) * height as f64;
    (u, v)
}

fn render(points: &[Point], owners: &[usize], colors: &[[f64; 3]], h: usize, w: usize) -> Vec<f32> {
    let mut img = vec![0.0f32; h * w * 3];
    let mut zbuf = vec![f64::NEG_INFINITY; h * w];
    for (p, &o) in points.iter().zip(owners) {
        let (u, v) = project_to_pixel(*p, h, w);
        let col = (u.floor() as i64).clamp(0, w as i64 - 1);
        let row = (v.floor() as i64).clamp(0, h as i64 - 1);
        let z = p[2] as f64;
        let shade = 0.5 + 0.5 * ((z - DEPTH_RANGE.0) / (DEPTH_RANGE.1 - DEPTH_RANGE.0)).clamp(0.0, 1.0);
        for dr in -SPLAT_RADIUS..=SPLAT_RADIUS {
            for dc in -SPLAT_RADIUS..=SPLAT_RADIUS {
                let (r, c) = (row + dr, col + dc);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                let idx = r as usize * w + c as usize;
                if z > zbuf[idx] {
                    zbuf[idx] = z;
                    for ch in 0..3 {
                        img[idx * 3 + ch] = (colors[o][ch] * shade) as f32;
                    }
                }
            }
        }
    }
    img
}

/// Generates one paired sample. Deterministic in `spec`.
pub fn synth_scene(spec: &SceneSpec) -> Result<PairedSample> {
    spec.validate()?;
    let mut rng = rng_for(spec.rng_seed, &[0x5ce7e]);
    let l = spec.frame_count as usize;
    let n = spec.points_per_frame as usize;
    let k = spec.num_objects as usize;
    let (h, w) = (spec.image_size.0 as usize, spec.image_size.1 as usize);

    // Objects and their surface samples in initial world coordinates.
    let mut base = Vec::with_capacity(n);
    let mut owners = Vec::with_capacity(n);
    let mut shapes = Vec::with_capacity(k);
    let mut colors = Vec::with_capacity(k);
    for o in 0..k {
        let shape = Shape::random(&mut rng);
        let yaw = rng.gen_range(0.0..2.0 * PI);
        let center = [
            rng.gen_range(-0.35..0.35),
            rng.gen_range(-0.35..0.35),
            rng.gen_range(0.1..0.3),
        ];
        colors.push([
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
        ]);
        let count = n / k + usize::from(o < n % k);
        let (s, c) = f64::sin_cos(yaw);
        for _ in 0..count {
            let q = shape.sample_surface(&mut rng);
            base.push([
                c * q[0] - s * q[1] + center[0],
                s * q[0] + c * q[1] + center[1],
                q[2] + center[2],
            ]);
            owners.push(o);
        }
        shapes.push(shape);
    }
    let centroid0 = {
        let mut c = [0.0; 2];
        for p in &base {
            c[0] += p[0] / n as f64;
            c[1] += p[1] / n as f64;
        }
        c
    };

    // Phase boundaries: two distinct cut points where the length allows.
    let schedule = phase_schedule(spec.motion_class);
    let cuts: Vec<usize> = if l >= 3 {
        let a = rng.gen_range(1..l - 1);
        let b = rng.gen_range(a + 1..l);
        vec![a, b]
    } else {
        vec![1, l]
    };
    let labels: Vec<i32> = (0..l)
        .map(|t| schedule[cuts.iter().filter(|&&c| t >= c).count()])
        .collect();

    // Per-phase motion parameters.
    let mut velocity = Vec::new();
    let mut spin = Vec::new();
    for _ in 0..3 {
        let speed = rng.gen_range(0.06..0.1);
        let dir = rng.gen_range(0.0..2.0 * PI);
        velocity.push([speed * dir.cos(), speed * dir.sin()]);
        let omega: f64 = rng.gen_range(0.25..0.4);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let arm = rng.gen_range(0.2..0.3);
        let arm_dir = rng.gen_range(0.0..2.0 * PI);
        spin.push((sign * omega, [arm * arm_dir.cos(), arm * arm_dir.sin()]));
    }

    let mut poses = Vec::with_capacity(l);
    let mut pose = Pose {
        yaw: 0.0,
        offset: [0.0, 0.0],
    };
    let mut phase_idx = 0;
    let mut pivot = None;
    for t in 0..l {
        poses.push(pose);
        let idx = cuts.iter().filter(|&&c| t >= c).count();
        if idx != phase_idx {
            phase_idx = idx;
            pivot = None;
        }
        let centroid = {
            let c = pose.apply([centroid0[0], centroid0[1], 0.0]);
            [c[0], c[1]]
        };
        match labels[t] {
            TRANSLATE => {
                let mut v = velocity[phase_idx];
                let next = [centroid[0] + v[0], centroid[1] + v[1]];
                if (next[0] * next[0] + next[1] * next[1]).sqrt() > SAFE_RADIUS {
                    // Head back towards the middle of the view.
                    let norm = (centroid[0] * centroid[0] + centroid[1] * centroid[1]).sqrt();
                    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
                    v = [-centroid[0] / norm * speed, -centroid[1] / norm * speed];
                    velocity[phase_idx] = v;
                }
                pose.offset[0] += v[0];
                pose.offset[1] += v[1];
            }
            ROTATE => {
                let (omega, arm) = spin[phase_idx];
                let q = *pivot.get_or_insert([centroid[0] + arm[0], centroid[1] + arm[1]]);
                pose = pose.rotate_about(q, omega);
            }
            _ => debug_assert_eq!(labels[t], STILL),
        }
    }

    let mut frames = Vec::with_capacity(l);
    let mut images = Vec::with_capacity(l);
    for pose in &poses {
        let pts: Vec<Point> = base
            .iter()
            .map(|p| {
                let q = pose.apply(*p);
                [q[0] as f32, q[1] as f32, q[2] as f32]
            })
            .collect();
        images.push(render(&pts, &owners, &colors, h, w));
        frames.push(pts);
    }

    let id = format!("synth_{:016x}", spec.rng_seed);
    let point_labels: Vec<i32> = owners.iter().map(|&o| shapes[o].class_id()).collect();
    let mut sample = PairedSample::new(
        PointCloudVideo::new(id.clone(), frames)?,
        ImageVideo::new(id, h, w, images)?,
        Some(labels),
        Some(vec![point_labels; l]),
    )?;
    sample.spec = Some(*spec);
    Ok(sample)
}

/// Sizes of a synthetic dataset with disjoint pretrain / train / test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub pretrain: usize,
    pub train: usize,
    pub test: usize,
    pub frames: u32,
    pub points: u32,
    pub image_size: (u32, u32),
    pub max_objects: u32,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            pretrain: 64,
            train: 32,
            test: 16,
            frames: 8,
            points: 128,
            image_size: (32, 32),
            max_objects: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SyntheticDataset {
    pub pretrain: Vec<PairedSample>,
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

/// Scene spec for the `index`-th sequence of a dataset; motion classes cycle.
pub(crate) fn scene_spec_for(spec: &DatasetSpec, index: usize) -> SceneSpec {
    let seed = derive_seed(spec.seed, &[index as u64]);
    SceneSpec {
        motion_class: index as u32 % NUM_MOTION_CLASSES,
        num_objects: 1 + (seed % u64::from(spec.max_objects.max(1))) as u32,
        frame_count: spec.frames,
        points_per_frame: spec.points,
        image_size: spec.image_size,
        rng_seed: seed,
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    ensure(spec.max_objects >= 1, "max_objects", || "must be at least 1".into())?;
    let total = spec.pretrain + spec.train + spec.test;
    let samples = crate::parallel::map(&(0..total).collect::<Vec<_>>(), |_, &i| {
        synth_scene(&scene_spec_for(spec, i))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut it = samples.into_iter();
    Ok(SyntheticDataset {
        pretrain: it.by_ref().take(spec.pretrain).collect(),
        train: it.by_ref().take(spec.train).collect(),
        test: it.collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::label_runs;

    fn spec(motion_class: u32, frames: u32, points: u32, seed: u64) -> SceneSpec {
        SceneSpec {
            motion_class,
            num_objects: 2,
            frame_count: frames,
            points_per_frame: points,
            image_size: (32, 32),
            rng_seed: seed,
        }
    }

    #[test]
    fn minimal_shape_contract() {
        let s = synth_scene(&spec(0, 2, 8, 7)).unwrap();
        assert_eq!(s.frame_count(), 2);
        assert_eq!(s.points.points_per_frame(), 8);
        assert_eq!(s.labels.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_scene(&spec(1, 8, 64, 99)).unwrap();
        let b = synth_scene(&spec(1, 8, 64, 99)).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(&spec(1, 8, 64, 100)).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn rejects_single_frame() {
        let err = synth_scene(&spec(0, 1, 8, 7)).unwrap_err();
        assert!(err.to_string().contains("frame_count"), "{err}");
    }

    #[test]
    fn rejects_too_few_points_and_bad_class() {
        assert!(synth_scene(&spec(0, 4, 7, 1)).unwrap_err().to_string().contains("points_per_frame"));
        assert!(synth_scene(&spec(3, 4, 16, 1)).unwrap_err().to_string().contains("motion_class"));
    }

    #[test]
    fn labels_are_contiguous_phases() {
        for seed in 0..30 {
            let s = synth_scene(&spec((seed % 3) as u32, 8, 32, seed)).unwrap();
            let labels = s.labels.unwrap();
            let runs = label_runs(&labels);
            assert!(!runs.is_empty() && runs.len() <= 3);
            assert!(labels.iter().all(|&v| (0..3).contains(&v)));
            assert_eq!(labels[0], (seed % 3) as i32);
        }
    }

    #[test]
    fn still_frames_do_not_move() {
        let s = synth_scene(&spec(0, 8, 32, 5)).unwrap();
        let labels = s.labels.as_ref().unwrap();
        for t in 0..7 {
            let moved = s.points.frame(t) != s.points.frame(t + 1);
            assert_eq!(moved, labels[t] != STILL, "frame {t}");
        }
    }

    #[test]
    fn rigid_motion_preserves_distances() {
        let s = synth_scene(&spec(2, 8, 32, 11)).unwrap();
        let d = |f: &[Point], i: usize, j: usize| {
            let a = f[i];
            let b = f[j];
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        for t in 1..8 {
            for (i, j) in [(0, 5), (3, 17), (9, 30)] {
                let a = d(s.points.frame(0), i, j);
                let b = d(s.points.frame(t), i, j);
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dataset_splits_have_requested_sizes() {
        let spec = DatasetSpec {
            pretrain: 3,
            train: 4,
            test: 2,
            points: 16,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!((ds.pretrain.len(), ds.train.len(), ds.test.len()), (3, 4, 2));
        let ids: std::collections::BTreeSet<_> = ds
            .pretrain
            .iter()
            .chain(&ds.train)
            .chain(&ds.test)
            .map(|s| s.sequence_id().to_string())
            .collect();
        assert_eq!(ids.len(), 9);
    }
}
