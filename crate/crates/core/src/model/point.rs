//! Point cloud video encoder: spatio-temporal grouping around sampled anchors,
//! a shared pointwise network on neighbour offsets, max pooling, and a temporal
//! transformer over frame features.

use ndarray::Array2;

use super::layers::{Linear, TemporalTransformer};
use super::EncoderConfig;
use crate::autograd::{Graph, Init, ParamSet, Var};
use crate::datagen::{Point, PointCloudVideo};
use crate::error::{ensure, Result};

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn to_f64(p: Point) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Greedy farthest-point sampling of `m` indices. The first pick is the point
/// farthest from the centroid so the result does not depend on point order;
/// ties go to the lowest index.
pub fn farthest_point_sampling(points: &[Point], m: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let pts: Vec<[f64; 3]> = points.iter().map(|&p| to_f64(p)).collect();
    let mut centroid = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            centroid[k] += p[k] / n as f64;
        }
    }
    let argmax = |d: &[f64]| {
        let mut best = 0;
        for i in 1..d.len() {
            if d[i] > d[best] {
                best = i;
            }
        }
        best
    };
    let from_centroid: Vec<f64> = pts.iter().map(|&p| dist2(p, centroid)).collect();
    let mut chosen = vec![argmax(&from_centroid)];
    let mut min_d: Vec<f64> = pts.iter().map(|&p| dist2(p, pts[chosen[0]])).collect();
    while chosen.len() < m {
        let next = argmax(&min_d);
        chosen.push(next);
        for (d, &p) in min_d.iter_mut().zip(&pts) {
            *d = d.min(dist2(p, pts[next]));
        }
    }
    chosen
}

/// Up to `k` points within `radius` of `center`, nearest first (ties by
/// index), padded to exactly `k` by repeating the nearest. With nothing in
/// range the single nearest point is used.
pub fn ball_query(frame: &[Point], center: [f64; 3], radius: f64, k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = frame
        .iter()
        .enumerate()
        .map(|(i, &p)| (dist2(to_f64(p), center), i))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let r2 = radius * radius;
    let mut out: Vec<usize> = cand.iter().take_while(|c| c.0 <= r2).take(k).map(|c| c.1).collect();
    if out.is_empty() {
        out.push(cand[0].1);
    }
    let nearest = out[0];
    out.resize(k, nearest);
    out
}

/// Grouping result for one video: the pointwise network input and the anchors.
pub struct Grouping {
    /// `(L * m * window * k) x 4` rows of `(dx, dy, dz, dt)`.
    pub offsets: Array2<f64>,
    /// Anchor indices per frame.
    pub anchors: Vec<Vec<usize>>,
    pub anchors_per_frame: usize,
    pub group_size: usize,
}

pub fn group(video: &PointCloudVideo, cfg: &EncoderConfig) -> Result<Grouping> {
    let l = video.frame_count();
    let n = video.points_per_frame();
    ensure(n >= 1, "points.frames", || "empty frame".into())?;
    let m = n.div_ceil(cfg.spatial_stride);
    let k = cfg.neighbor_samples;
    let r = (cfg.time_window / 2) as i64;
    let window = cfg.time_window;
    let group_size = window * k;
    let mut offsets = Array2::zeros((l * m * group_size, 4));
    let mut anchors = Vec::with_capacity(l);
    let mut row = 0;
    for t in 0..l {
        let frame = video.frame(t);
        let idx = farthest_point_sampling(frame, m);
        for &a in &idx {
            let center = to_f64(frame[a]);
            for dt in -r..=r {
                let src = (t as i64 + dt).clamp(0, l as i64 - 1) as usize;
                let other = video.frame(src);
                for j in ball_query(other, center, cfg.ball_radius, k) {
                    let p = to_f64(other[j]);
                    for c in 0..3 {
                        offsets[[row, c]] = (p[c] - center[c]) / cfg.ball_radius;
                    }
                    offsets[[row, 3]] = dt as f64;
                    row += 1;
                }
            }
        }
        anchors.push(idx);
    }
    Ok(Grouping {
        offsets,
        anchors,
        anchors_per_frame: m,
        group_size,
    })
}

#[derive(Debug, Clone)]
pub struct PointEncoder {
    fc1: Linear,
    fc2: Linear,
    /// Mixes the pooled channels of each anchor (standardised over the
    /// video's anchors) before frame pooling.
    anchor_fc: Linear,
    transformer: TemporalTransformer,
    config: EncoderConfig,
}

/// Graph handles produced by one point-encoder pass.
pub struct PointForward {
    /// `L x d` frame features after the transformer.
    pub frames: Var,
    /// `(L * m) x d` anchor features before frame pooling.
    pub anchors: Var,
    pub anchor_indices: Vec<Vec<usize>>,
}

impl PointEncoder {
    pub const PREFIX: &'static str = "point_encoder";

    pub fn bind(ps: &mut ParamSet, cfg: &EncoderConfig, init: &mut Init<'_>) -> Result<Self> {
        let d = cfg.feature_dim;
        let h = cfg.point_mlp_hidden;
        Ok(Self {
            fc1: Linear::bind(ps, "point_encoder.conv.fc1", 4, h, init)?,
            fc2: Linear::bind(ps, "point_encoder.conv.fc2", h, d, init)?,
            anchor_fc: Linear::bind(ps, "point_encoder.conv.anchor_fc", d, d, init)?,
            transformer: TemporalTransformer::bind(
                ps,
                "point_encoder.transformer",
                d,
                cfg.transformer_depth,
                cfg.transformer_heads,
                cfg.time_window,
                init,
            )?,
            config: cfg.clone(),
        })
    }

    pub fn forward(&self, g: &mut Graph, video: &PointCloudVideo) -> Result<PointForward> {
        let grouping = group(video, &self.config)?;
        let x = g.input(grouping.offsets);
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        let h = self.fc2.forward(g, h);
        let h = g.relu(h);
        let anchors = g.max_groups(h, grouping.group_size);
        let anchors = if self.config.anchor_norm { g.column_norm(anchors) } else { anchors };
        let anchors = self.anchor_fc.forward(g, anchors);
        let anchors = g.relu(anchors);
        let frames = g.max_groups(anchors, grouping.anchors_per_frame);
        let frames = self.transformer.forward(g, frames);
        Ok(PointForward {
            frames,
            anchors,
            anchor_indices: grouping.anchors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_spreads_out() {
        let pts: Vec<Point> = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        let idx = farthest_point_sampling(&pts, 3);
        assert_eq!(idx[0], 2);
        assert_eq!(idx[1], 0);
        assert_eq!(idx[2], 3);
    }

    #[test]
    fn fps_ties_prefer_lowest_index() {
        let pts: Vec<Point> = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        assert_eq!(farthest_point_sampling(&pts, 2), vec![0, 1]);
    }

    #[test]
    fn ball_query_pads_with_nearest() {
        let pts: Vec<Point> = vec![[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [5.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        assert_eq!(ball_query(&pts, [0.0; 3], 0.5, 5), vec![0, 3, 1, 0, 0]);
        assert_eq!(ball_query(&pts, [0.0; 3], 0.5, 2), vec![0, 3]);
        assert_eq!(ball_query(&pts, [9.0, 0.0, 0.0], 0.5, 2), vec![2, 2]);
    }
}
