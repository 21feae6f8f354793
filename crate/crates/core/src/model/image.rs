//! Image video encoder: two strided 3-D convolutions, per-frame global average
//! pooling, a linear map to the feature width, and a temporal transformer.

use ndarray::Array2;

use super::layers::{Linear, TemporalTransformer};
use super::EncoderConfig;
use crate::autograd::{Fill, Graph, Init, ParamSet, Var, PAD};
use crate::datagen::ImageVideo;
use crate::error::{ensure, Result};

const KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Output size of one strided convolution with padding 1.
fn out_size(n: usize) -> usize {
    (n - 1) / STRIDE + 1
}

/// im2col index for a `kt x 3 x 3` kernel, temporal stride 1 with zero
/// padding, spatial stride 2 with zero padding 1. Rows of the input are
/// `(t, y, x)` in row-major order.
fn conv_index(l: usize, h: usize, w: usize, kt: usize) -> (Vec<usize>, usize, usize) {
    let (oh, ow) = (out_size(h), out_size(w));
    let half = (kt / 2) as i64;
    let mut index = Vec::with_capacity(l * oh * ow * kt * KERNEL * KERNEL);
    for t in 0..l as i64 {
        for oy in 0..oh as i64 {
            for ox in 0..ow as i64 {
                for dt in 0..kt as i64 {
                    for ky in 0..KERNEL as i64 {
                        for kx in 0..KERNEL as i64 {
                            let st = t + dt - half;
                            let sy = oy * STRIDE as i64 + ky - 1;
                            let sx = ox * STRIDE as i64 + kx - 1;
                            let inside = (0..l as i64).contains(&st)
                                && (0..h as i64).contains(&sy)
                                && (0..w as i64).contains(&sx);
                            index.push(if inside {
                                ((st as usize * h + sy as usize) * w) + sx as usize
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    (index, oh, ow)
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    conv1: Linear,
    conv2: Linear,
    proj: Linear,
    transformer: TemporalTransformer,
    config: EncoderConfig,
    kt: usize,
}

impl ImageEncoder {
    pub const PREFIX: &'static str = "image_encoder";

    pub fn bind(ps: &mut ParamSet, cfg: &EncoderConfig, init: &mut Init<'_>) -> Result<Self> {
        let kt = cfg.time_window.min(3);
        let (c1, c2) = cfg.image_channels;
        let taps = kt * KERNEL * KERNEL;
        let conv = |ps: &mut ParamSet, name: &str, cin: usize, cout: usize, init: &mut Init<'_>| -> Result<Linear> {
            Ok(Linear {
                weight: ps.ensure(
                    &format!("{name}.weight"),
                    (taps * cin, cout),
                    Fill::HeUniform { fan_in: taps * cin },
                    init,
                )?,
                bias: ps.ensure(&format!("{name}.bias"), (1, cout), Fill::Zeros, init)?,
            })
        };
        Ok(Self {
            conv1: conv(ps, "image_encoder.conv1", 3, c1, init)?,
            conv2: conv(ps, "image_encoder.conv2", c1, c2, init)?,
            proj: Linear::bind(ps, "image_encoder.proj", c2, cfg.feature_dim, init)?,
            transformer: TemporalTransformer::bind(
                ps,
                "image_encoder.transformer",
                cfg.feature_dim,
                cfg.transformer_depth,
                cfg.transformer_heads,
                cfg.time_window,
                init,
            )?,
            config: cfg.clone(),
            kt,
        })
    }

    /// Returns the `L x d` frame features.
    pub fn forward(&self, g: &mut Graph, video: &ImageVideo) -> Result<Var> {
        let (h, w) = (video.height(), video.width());
        let expected = self.config.image_size;
        ensure((h, w) == expected, "images.size", || {
            format!("{h}x{w} does not match the configured {}x{}", expected.0, expected.1)
        })?;
        let l = video.frame_count();
        let mut pixels = Array2::zeros((l * h * w, 3));
        for (t, frame) in video.frames().iter().enumerate() {
            for (i, v) in frame.iter().enumerate() {
                pixels[[t * h * w + i / 3, i % 3]] = *v as f64;
            }
        }
        let x = g.input(pixels);
        let taps = self.kt * KERNEL * KERNEL;

        let (idx1, h1, w1) = conv_index(l, h, w, self.kt);
        let p1 = g.gather_patches(x, idx1, taps);
        let y1 = self.conv1.forward(g, p1);
        let y1 = g.relu(y1);

        let (idx2, h2, w2) = conv_index(l, h1, w1, self.kt);
        let p2 = g.gather_patches(y1, idx2, taps);
        let y2 = self.conv2.forward(g, p2);
        let y2 = g.relu(y2);

        let pooled = g.mean_groups(y2, h2 * w2);
        let f = self.proj.forward(g, pooled);
        Ok(self.transformer.forward(g, f))
    }
}
