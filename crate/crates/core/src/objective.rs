//! Multi-level contrastive objective.
//!
//! Every term is one NT-Xent kernel evaluated on a pair of matrices: rows of
//! `anchors` are pulled towards the same row of `partners` and pushed away
//! from every other anchor row and every partner row. The four terms differ
//! only in what they feed it:
//!
//! | term        | anchors                  | partners        |
//! |-------------|--------------------------|-----------------|
//! | intra video | point view 1             | point view 2    |
//! | intra frame | point view 1, per slot   | point view 2    |
//! | cross video | point prototype          | image           |
//! | cross frame | point prototype, per slot| image           |
//!
//! Frame terms are evaluated separately for each aligned frame slot `j`, with
//! negatives taken from the other samples that have a slot `j`. Each sample's
//! frame losses are averaged before the batch reduction.

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{ensure, Error, Result};

const MIN_NORM: f64 = 1e-8;

/// Projected embeddings of one batch. Frame matrices are `F_i x d`, where row
/// `j` of every matrix of sample `i` belongs to the same source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub z_v_t1: Mat,
    pub z_v_t2: Mat,
    pub h_v: Mat,
    pub z_f_t1: Vec<Mat>,
    pub z_f_t2: Vec<Mat>,
    pub h_f: Vec<Mat>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(
        z_v_t1: Mat,
        z_v_t2: Mat,
        h_v: Mat,
        z_f_t1: Vec<Mat>,
        z_f_t2: Vec<Mat>,
        h_f: Vec<Mat>,
        temperature: f64,
    ) -> Result<Self> {
        let batch = Self {
            z_v_t1,
            z_v_t2,
            h_v,
            z_f_t1,
            z_f_t2,
            h_f,
            temperature,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.z_v_t1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z_v_t1.ncols()
    }

    /// Aligned frame count of each sample.
    pub fn frame_counts(&self) -> Vec<usize> {
        self.z_f_t1.iter().map(Mat::nrows).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.z_v_t1.dim();
        ensure(n >= 1, "batch", || "needs at least one sample".into())?;
        for (name, m) in [("z_v_t2", &self.z_v_t2), ("h_v", &self.h_v)] {
            ensure(m.dim() == (n, d), name, || format!("shape {:?}, expected {:?}", m.dim(), (n, d)))?;
        }
        for (name, fs) in [("z_f_t1", &self.z_f_t1), ("z_f_t2", &self.z_f_t2), ("h_f", &self.h_f)] {
            ensure(fs.len() == n, name, || format!("{} samples, expected {n}", fs.len()))?;
            for (i, m) in fs.iter().enumerate() {
                ensure(m.ncols() == d && m.nrows() == self.z_f_t1[i].nrows(), name, || {
                    format!("sample {i} has shape {:?}", m.dim())
                })?;
            }
        }
        let all = [&self.z_v_t1, &self.z_v_t2, &self.h_v]
            .into_iter()
            .chain(&self.z_f_t1)
            .chain(&self.z_f_t2)
            .chain(&self.h_f);
        for m in all {
            ensure(m.iter().all(|v| v.is_finite()), "batch", || "non-finite embedding".into())?;
        }
        Ok(())
    }
}

/// Which loss terms contribute to the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub intra_video: bool,
    pub intra_frame: bool,
    pub cross_video: bool,
    pub cross_frame: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            intra_video: true,
            intra_frame: true,
            cross_video: true,
            cross_frame: true,
        }
    }
}

impl LossToggles {
    pub const NAMES: [&'static str; 4] = ["intra_video", "intra_frame", "cross_video", "cross_frame"];

    pub fn any(&self) -> bool {
        self.intra_video || self.intra_frame || self.cross_video || self.cross_frame
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "intra_video" => &mut self.intra_video,
            "intra_frame" => &mut self.intra_frame,
            "cross_video" => &mut self.cross_video,
            "cross_frame" => &mut self.cross_frame,
            _ => {
                return Err(Error::validation(
                    "loss term",
                    format!("unknown term {name:?}; expected one of {:?}", Self::NAMES),
                ))
            }
        };
        *slot = on;
        Ok(())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("length {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::Domain("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {tau}")))
    }
}

fn normalize_rows(m: &Mat) -> Result<(Mat, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n < MIN_NORM) {
        return Err(Error::Domain("zero-norm embedding".into()));
    }
    let unit = m / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Per-row losses of the NT-Xent kernel, and optionally the gradients of
/// `sum_i weights[i] * loss[i]` with respect to both inputs.
struct Kernel {
    losses: Vec<f64>,
    grads: Option<(Mat, Mat)>,
}

fn nt_xent(anchors: &Mat, partners: &Mat, tau: f64, weights: Option<&[f64]>) -> Result<Kernel> {
    let n = anchors.nrows();
    let (a, na) = normalize_rows(anchors)?;
    let (b, nb) = normalize_rows(partners)?;
    let s_aa = a.dot(&a.t());
    let s_ab = a.dot(&b.t());
    let mut losses = Vec::with_capacity(n);
    let mut g_aa = Mat::zeros((n, n));
    let mut g_ab = Mat::zeros((n, n));
    for i in 0..n {
        let logits_aa = (0..n).filter(|&k| k != i).map(|k| s_aa[[i, k]] / tau);
        let logits_ab = (0..n).map(|k| s_ab[[i, k]] / tau);
        let max = logits_aa.clone().chain(logits_ab.clone()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits_aa.chain(logits_ab).map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        losses.push(lse - s_ab[[i, i]] / tau);
        if let Some(w) = weights {
            let w = w[i];
            for k in 0..n {
                if k != i {
                    g_aa[[i, k]] = w * (s_aa[[i, k]] / tau - lse).exp() / tau;
                }
                let p = (s_ab[[i, k]] / tau - lse).exp();
                g_ab[[i, k]] = w * (p - if k == i { 1.0 } else { 0.0 }) / tau;
            }
        }
    }
    let grads = weights.map(|_| {
        let da_unit = g_aa.dot(&a) + g_aa.t().dot(&a) + g_ab.dot(&b);
        let db_unit = g_ab.t().dot(&a);
        (unnormalize_grad(&a, &na, &da_unit), unnormalize_grad(&b, &nb, &db_unit))
    });
    Ok(Kernel { losses, grads })
}

/// Chain rule through `x / |x|`.
fn unnormalize_grad(unit: &Mat, norms: &Array1<f64>, d_unit: &Mat) -> Mat {
    let radial = (unit * d_unit).sum_axis(Axis(1)).insert_axis(Axis(1));
    (d_unit - &(unit * &radial)) / &norms.view().insert_axis(Axis(1))
}

/// Per-frame and per-sample frame-level losses.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLosses {
    /// `per_frame[i][j]` is the loss of slot `j` of sample `i`.
    pub per_frame: Vec<Vec<f64>>,
    /// Frame average per sample; zero for samples without aligned frames.
    pub per_sample: Vec<f64>,
    /// Set when some sample had no aligned frames.
    pub empty_warning: bool,
}

/// Frame-level kernel gradients, shaped like the inputs.
type FrameGrads = (Vec<Mat>, Vec<Mat>);

fn frame_term(
    anchors: &[Mat],
    partners: &[Mat],
    tau: f64,
    weights: Option<&[f64]>,
) -> Result<(FrameLosses, Option<FrameGrads>)> {
    let counts: Vec<usize> = anchors.iter().map(Mat::nrows).collect();
    let slots = counts.iter().copied().max().unwrap_or(0);
    let mut per_frame: Vec<Vec<f64>> = counts.iter().map(|&f| vec![0.0; f]).collect();
    let mut grads = weights.map(|_| {
        (
            anchors.iter().map(|m| Mat::zeros(m.dim())).collect::<Vec<_>>(),
            partners.iter().map(|m| Mat::zeros(m.dim())).collect::<Vec<_>>(),
        )
    });
    for j in 0..slots {
        let members: Vec<usize> = (0..anchors.len()).filter(|&i| counts[i] > j).collect();
        let a = ndarray::stack(Axis(0), &members.iter().map(|&i| anchors[i].row(j)).collect::<Vec<_>>())
            .expect("equal widths");
        let b = ndarray::stack(Axis(0), &members.iter().map(|&i| partners[i].row(j)).collect::<Vec<_>>())
            .expect("equal widths");
        // The frame average divides each slot's loss by the sample's F_i.
        let w: Option<Vec<f64>> =
            weights.map(|w| members.iter().map(|&i| w[i] / counts[i] as f64).collect());
        let k = nt_xent(&a, &b, tau, w.as_deref())?;
        for (r, &i) in members.iter().enumerate() {
            per_frame[i][j] = k.losses[r];
        }
        if let (Some((ga, gb)), Some((da, db))) = (grads.as_mut(), k.grads) {
            for (r, &i) in members.iter().enumerate() {
                ga[i].row_mut(j).assign(&da.row(r));
                gb[i].row_mut(j).assign(&db.row(r));
            }
        }
    }
    let per_sample = per_frame
        .iter()
        .map(|f| if f.is_empty() { 0.0 } else { f.iter().sum::<f64>() / f.len() as f64 })
        .collect();
    let empty_warning = counts.iter().any(|&c| c == 0);
    if empty_warning {
        log::warn!("frame-level loss: some samples have no aligned frames and contribute zero");
    }
    Ok((
        FrameLosses {
            per_frame,
            per_sample,
            empty_warning,
        },
        grads,
    ))
}

/// Prototype features: the midpoint of the two point views.
pub fn prototype(batch: &ContrastiveBatch) -> (Mat, Vec<Mat>) {
    let zv = (&batch.z_v_t1 + &batch.z_v_t2) * 0.5;
    let zf = batch
        .z_f_t1
        .iter()
        .zip(&batch.z_f_t2)
        .map(|(a, b)| (a + b) * 0.5)
        .collect();
    (zv, zf)
}

pub fn intra_video_loss(batch: &ContrastiveBatch) -> Result<Vec<f64>> {
    check_temperature(batch.temperature)?;
    Ok(nt_xent(&batch.z_v_t1, &batch.z_v_t2, batch.temperature, None)?.losses)
}

pub fn intra_frame_loss(batch: &ContrastiveBatch) -> Result<FrameLosses> {
    check_temperature(batch.temperature)?;
    Ok(frame_term(&batch.z_f_t1, &batch.z_f_t2, batch.temperature, None)?.0)
}

pub fn cross_video_loss(batch: &ContrastiveBatch) -> Result<Vec<f64>> {
    check_temperature(batch.temperature)?;
    let (zv, _) = prototype(batch);
    Ok(nt_xent(&zv, &batch.h_v, batch.temperature, None)?.losses)
}

pub fn cross_frame_loss(batch: &ContrastiveBatch) -> Result<FrameLosses> {
    check_temperature(batch.temperature)?;
    let (_, zf) = prototype(batch);
    Ok(frame_term(&zf, &batch.h_f, batch.temperature, None)?.0)
}

fn half_mean(video: &[f64], frame: &[f64]) -> f64 {
    let n = video.len() as f64;
    video.iter().zip(frame).map(|(v, f)| v + f).sum::<f64>() / (2.0 * n)
}

/// `(1/2N) sum_i [L_v(i) + L_f(i)]`.
pub fn intra_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(half_mean(&intra_video_loss(batch)?, &intra_frame_loss(batch)?.per_sample))
}

/// `(1/2N) sum_i [C_v(i) + C_f(i)]`.
pub fn cross_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(half_mean(&cross_video_loss(batch)?, &cross_frame_loss(batch)?.per_sample))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub toggles: LossToggles,
    /// Average the intra-modal terms over both anchor views.
    pub symmetrize: bool,
}

/// Gradients of the total loss, shaped like the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub z_v_t1: Mat,
    pub z_v_t2: Mat,
    pub h_v: Mat,
    pub z_f_t1: Vec<Mat>,
    pub z_f_t2: Vec<Mat>,
    pub h_f: Vec<Mat>,
}

impl BatchGrads {
    fn zeros_like(batch: &ContrastiveBatch) -> Self {
        let z = |m: &Mat| Mat::zeros(m.dim());
        Self {
            z_v_t1: z(&batch.z_v_t1),
            z_v_t2: z(&batch.z_v_t2),
            h_v: z(&batch.h_v),
            z_f_t1: batch.z_f_t1.iter().map(z).collect(),
            z_f_t2: batch.z_f_t2.iter().map(z).collect(),
            h_f: batch.h_f.iter().map(z).collect(),
        }
    }
}

/// Per-sample values of each enabled term; disabled terms are all zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TermLosses {
    pub intra_video: Vec<f64>,
    pub intra_frame: Vec<f64>,
    pub cross_video: Vec<f64>,
    pub cross_frame: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub intra: f64,
    pub cross: f64,
    pub terms: TermLosses,
    pub grads: BatchGrads,
    pub empty_frames_warning: bool,
}

fn add_frames(dst: &mut [Mat], src: &[Mat], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.scaled_add(scale, s);
    }
}

fn check_finite(term: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            term: term.into(),
            batch: None,
        })
    }
}

/// `L_intra + L_cross` with gradients for every embedding in the batch.
pub fn total_loss(batch: &ContrastiveBatch, config: &ObjectiveConfig) -> Result<LossOutput> {
    batch.validate()?;
    check_temperature(batch.temperature)?;
    ensure(config.toggles.any(), "loss toggles", || "every loss term is disabled".into())?;
    let n = batch.len();
    let tau = batch.temperature;
    let t = config.toggles;
    // d total / d loss_i for each per-sample term.
    let w = vec![1.0 / (2.0 * n as f64); n];
    let mut grads = BatchGrads::zeros_like(batch);
    let mut terms = TermLosses {
        intra_video: vec![0.0; n],
        intra_frame: vec![0.0; n],
        cross_video: vec![0.0; n],
        cross_frame: vec![0.0; n],
    };
    let mut empty = false;

    let views = if config.symmetrize { 2 } else { 1 };
    let w_view: Vec<f64> = w.iter().map(|x| x / views as f64).collect();
    if t.intra_video {
        let k = nt_xent(&batch.z_v_t1, &batch.z_v_t2, tau, Some(&w_view))?;
        let (da, db) = k.grads.expect("requested");
        grads.z_v_t1 += &da;
        grads.z_v_t2 += &db;
        terms.intra_video = k.losses;
        if config.symmetrize {
            let k = nt_xent(&batch.z_v_t2, &batch.z_v_t1, tau, Some(&w_view))?;
            let (da, db) = k.grads.expect("requested");
            grads.z_v_t2 += &da;
            grads.z_v_t1 += &db;
            for (a, b) in terms.intra_video.iter_mut().zip(k.losses) {
                *a = (*a + b) / 2.0;
            }
        }
        check_finite("intra_video", &terms.intra_video)?;
    }
    if t.intra_frame {
        let (fl, g) = frame_term(&batch.z_f_t1, &batch.z_f_t2, tau, Some(&w_view))?;
        let (da, db) = g.expect("requested");
        add_frames(&mut grads.z_f_t1, &da, 1.0);
        add_frames(&mut grads.z_f_t2, &db, 1.0);
        terms.intra_frame = fl.per_sample;
        empty |= fl.empty_warning;
        if config.symmetrize {
            let (fl, g) = frame_term(&batch.z_f_t2, &batch.z_f_t1, tau, Some(&w_view))?;
            let (da, db) = g.expect("requested");
            add_frames(&mut grads.z_f_t2, &da, 1.0);
            add_frames(&mut grads.z_f_t1, &db, 1.0);
            for (a, b) in terms.intra_frame.iter_mut().zip(fl.per_sample) {
                *a = (*a + b) / 2.0;
            }
        }
        check_finite("intra_frame", &terms.intra_frame)?;
    }
    if t.cross_video || t.cross_frame {
        let (zv, zf) = prototype(batch);
        if t.cross_video {
            let k = nt_xent(&zv, &batch.h_v, tau, Some(&w))?;
            let (dz, dh) = k.grads.expect("requested");
            grads.z_v_t1.scaled_add(0.5, &dz);
            grads.z_v_t2.scaled_add(0.5, &dz);
            grads.h_v += &dh;
            terms.cross_video = k.losses;
            check_finite("cross_video", &terms.cross_video)?;
        }
        if t.cross_frame {
            let (fl, g) = frame_term(&zf, &batch.h_f, tau, Some(&w))?;
            let (dz, dh) = g.expect("requested");
            add_frames(&mut grads.z_f_t1, &dz, 0.5);
            add_frames(&mut grads.z_f_t2, &dz, 0.5);
            add_frames(&mut grads.h_f, &dh, 1.0);
            terms.cross_frame = fl.per_sample;
            empty |= fl.empty_warning;
            check_finite("cross_frame", &terms.cross_frame)?;
        }
    }
    let intra = half_mean(&terms.intra_video, &terms.intra_frame);
    let cross = half_mean(&terms.cross_video, &terms.cross_frame);
    check_finite("total", &[intra + cross])?;
    Ok(LossOutput {
        total: intra + cross,
        intra,
        cross,
        terms,
        grads,
        empty_frames_warning: empty,
    })
}
