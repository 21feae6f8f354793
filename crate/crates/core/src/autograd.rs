//! A small reverse-mode tape over 2-D `f64` matrices.
//!
//! Every value in the encoders is a matrix whose rows are tokens (points,
//! anchors, frames, voxels) and whose columns are channels. A [`Graph`] records
//! each operation with enough cached state to run its adjoint; [`Graph::backward`]
//! replays the tape in reverse from one or more seeded outputs.
//!
//! Parameters live in a [`ParamSet`] that the graph borrows immutably, so any
//! number of graphs can run concurrently against the same weights.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
/// Marks a zero-filled slot in [`Graph::gather_patches`].
pub const PAD: usize = usize::MAX;

/// Named parameter tensors, addressed by insertion index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

/// How a missing parameter is produced.
pub enum Init<'a> {
    Random(&'a mut Rng),
    /// Every parameter must already exist (loading from a checkpoint).
    Require,
}

#[derive(Debug, Clone, Copy)]
pub enum Fill {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Adds or replaces a tensor; returns its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return i;
        }
        let i = self.values.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        i
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Looks up `name`, creating it with `fill` when `init` allows.
    pub fn ensure(
        &mut self,
        name: &str,
        shape: (usize, usize),
        fill: Fill,
        init: &mut Init<'_>,
    ) -> Result<usize> {
        if let Some(i) = self.index_of(name) {
            let found = self.values[i].dim();
            if found != shape {
                return Err(Error::validation(
                    name,
                    format!("parameter has shape {found:?}, expected {shape:?}"),
                ));
            }
            return Ok(i);
        }
        match init {
            Init::Require => Err(Error::validation(name, "missing parameter")),
            Init::Random(rng) => {
                let value = match fill {
                    Fill::Zeros => Mat::zeros(shape),
                    Fill::Ones => Mat::ones(shape),
                    Fill::HeUniform { fan_in } => {
                        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                        Mat::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
                    }
                };
                Ok(self.insert(name, value))
            }
        }
    }

    /// Keeps only the tensors whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, v) in self.iter() {
            if keep(n) {
                out.insert(n, v.clone());
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        let mut worst: f64 = 0.0;
        for (n, v) in self.iter() {
            match other.by_name(n) {
                Some(w) if w.dim() == v.dim() => {
                    for (a, b) in v.iter().zip(w) {
                        worst = worst.max((a - b).abs());
                    }
                }
                _ => return f64::INFINITY,
            }
        }
        if other.len() != self.len() {
            return f64::INFINITY;
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Relu(Var),
    MaxGroups { x: Var, arg: Vec<usize> },
    MeanGroups { x: Var, group: usize },
    RepeatRows { x: Var, times: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    GatherPatches { x: Var, index: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    ColumnNorm { x: Var, xhat: Mat, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, radius: usize, probs: Vec<f64> },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, i: usize) -> Option<&Mat> {
        self.params[i].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// The node for parameter `i`; one node per parameter per graph, so every
    /// use accumulates into the same adjoint.
    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let v = self.push(self.params.get(i).clone(), Op::Param(i));
        self.param_vars[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        self.push(value, Op::AddRow(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn max_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert!(group > 0 && rows % group == 0, "max_groups: {rows} rows, group {group}");
        let out_rows = rows / group;
        let mut out = Mat::zeros((out_rows, cols));
        let mut arg = vec![0usize; out_rows * cols];
        let data = xv.as_slice().expect("standard layout");
        let out_data = out.as_slice_mut().expect("standard layout");
        for o in 0..out_rows {
            let base = o * group;
            out_data[o * cols..(o + 1) * cols].copy_from_slice(&data[base * cols..(base + 1) * cols]);
            arg[o * cols..(o + 1) * cols].fill(base);
            for r in base + 1..base + group {
                let row = &data[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    if row[c] > out_data[o * cols + c] {
                        out_data[o * cols + c] = row[c];
                        arg[o * cols + c] = r;
                    }
                }
            }
        }
        self.push(out, Op::MaxGroups { x, arg })
    }

    /// Column-wise mean over consecutive blocks of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert!(group > 0 && rows % group == 0, "mean_groups: {rows} rows, group {group}");
        let out = xv
            .to_shape((rows / group, group, cols))
            .expect("contiguous")
            .mean_axis(Axis(1))
            .expect("non-empty group");
        self.push(out, Op::MeanGroups { x, group })
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut out = Mat::zeros((rows * times, cols));
        for r in 0..rows {
            for k in 0..times {
                out.row_mut(r * times + k).assign(&xv.row(r));
            }
        }
        self.push(out, Op::RepeatRows { x, times })
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let out = self.value(x).select(Axis(0), &rows);
        self.push(out, Op::SelectRows { x, rows })
    }

    /// Builds `index.len() / slots` output rows, each the concatenation of
    /// `slots` input rows (or zeros for [`PAD`]). This is im2col for convolutions.
    pub fn gather_patches(&mut self, x: Var, index: Vec<usize>, slots: usize) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols();
        let out_rows = index.len() / slots;
        let mut out = Mat::zeros((out_rows, slots * cols));
        let src = xv.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("standard layout");
        for (slot, &i) in index.iter().enumerate() {
            if i != PAD {
                dst[slot * cols..(slot + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        self.push(out, Op::GatherPatches { x, index })
    }

    /// Row-wise layer normalisation with affine `1 x C` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Standardises every column over the rows (no affine part).
    pub fn column_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.nrows() as f64;
        let mean = xv.sum_axis(Axis(0)) / rows;
        let centred = xv - &mean;
        let var = centred.mapv(|v| v * v).sum_axis(Axis(0)) / rows;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + LN_EPS).sqrt()).collect();
        let xhat = &centred * &ndarray::Array1::from(inv_std.clone());
        self.push(xhat.clone(), Op::ColumnNorm { x, xhat, inv_std })
    }

    /// Multi-head self-attention where row `i` attends to rows `j` with
    /// `|i - j| <= radius`. Inputs are already-projected `L x D` matrices.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, radius: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (len, dim) = qv.dim();
        assert!(heads > 0 && dim % heads == 0, "attention: {dim} channels, {heads} heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * len * len];
        let mut out = Mat::zeros((len, dim));
        for h in 0..heads {
            let cs = h * dh..(h + 1) * dh;
            for i in 0..len {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(len - 1);
                let p = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                let mut max = f64::NEG_INFINITY;
                for j in lo..=hi {
                    let s: f64 = cs.clone().map(|c| qv[[i, c]] * kv[[j, c]]).sum::<f64>() * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in &mut p[lo..=hi] {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for j in lo..=hi {
                    p[j] /= z;
                    for c in cs.clone() {
                        out[[i, c]] += p[j] * vv[[j, c]];
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                radius,
                probs,
            },
        )
    }

    /// Reverse pass from the given `(output, adjoint)` seeds.
    pub fn backward(&self, seeds: Vec<(Var, Mat)>) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(v).dim(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => accumulate(&mut params[*p], g.clone()),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::AddRow(x, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], db);
                    accumulate(&mut grads[x.0], g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Relu(x) => {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MaxGroups { x, arg } => {
                    let (rows, cols) = self.value(*x).dim();
                    let mut dx = Mat::zeros((rows, cols));
                    let gd = g.as_slice().expect("standard layout");
                    let dd = dx.as_slice_mut().expect("standard layout");
                    for (o, &src) in arg.iter().enumerate() {
                        dd[src * cols + o % cols] += gd[o];
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MeanGroups { x, group } => {
                    let (rows, cols) = self.value(*x).dim();
                    let mut dx = Mat::zeros((rows, cols));
                    for r in 0..rows {
                        dx.row_mut(r).assign(&(&g.row(r / group) / *group as f64));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::RepeatRows { x, times } => {
                    let (rows, cols) = self.value(*x).dim();
                    let dx = g
                        .to_shape((rows, *times, cols))
                        .expect("contiguous")
                        .sum_axis(Axis(1));
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SelectRows { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::GatherPatches { x, index } => {
                    let (rows, cols) = self.value(*x).dim();
                    let mut dx = Mat::zeros((rows, cols));
                    let gd = g.as_slice().expect("standard layout");
                    let dd = dx.as_slice_mut().expect("standard layout");
                    for (slot, &src) in index.iter().enumerate() {
                        if src != PAD {
                            for c in 0..cols {
                                dd[src * cols + c] += gd[slot * cols + c];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let cols = xhat.ncols() as f64;
                    accumulate(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(
                        &mut grads[gamma.0],
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * gam;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv_std[r] / cols * (cols * dh[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ColumnNorm { x, xhat, inv_std } => {
                    let rows = xhat.nrows() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for c in 0..xhat.ncols() {
                        let dh = g.column(c);
                        let xh = xhat.column(c);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        for r in 0..xhat.nrows() {
                            dx[[r, c]] = inv_std[c] / rows * (rows * dh[r] - sum_d - xh[r] * sum_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    radius,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (len, dim) = qv.dim();
                    let dh = dim / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros((len, dim));
                    let mut dk = Mat::zeros((len, dim));
                    let mut dv = Mat::zeros((len, dim));
                    let mut dp = vec![0.0; len];
                    for h in 0..*heads {
                        let cs = h * dh..(h + 1) * dh;
                        for i in 0..len {
                            let lo = i.saturating_sub(*radius);
                            let hi = (i + radius).min(len - 1);
                            let p = &probs[(h * len + i) * len..(h * len + i + 1) * len];
                            let mut dot = 0.0;
                            for j in lo..=hi {
                                let mut s = 0.0;
                                for c in cs.clone() {
                                    dv[[j, c]] += p[j] * g[[i, c]];
                                    s += g[[i, c]] * vv[[j, c]];
                                }
                                dp[j] = s;
                                dot += p[j] * s;
                            }
                            for j in lo..=hi {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                for c in cs.clone() {
                                    dq[[i, c]] += ds * kv[[j, c]];
                                    dk[[j, c]] += ds * qv[[i, c]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[q.0], dq);
                    accumulate(&mut grads[k.0], dk);
                    accumulate(&mut grads[v.0], dv);
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn rand_mat(rng: &mut Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    /// Weighted sum of the output so the scalar objective exercises every entry.
    fn objective(out: &Mat, w: &Mat) -> f64 {
        (out * w).sum()
    }

    /// Checks the adjoint of every parameter entry against central differences.
    fn check<F>(params: ParamSet, build: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut rng = rng_for(99, &[]);
        let (out_dim, grads) = {
            let mut g = Graph::new(&params);
            let out = build(&mut g);
            let dim = g.value(out).dim();
            let w = rand_mat(&mut rng_for(7, &[]), dim.0, dim.1);
            (dim, g.backward(vec![(out, w)]).into_params())
        };
        let w = rand_mat(&mut rng_for(7, &[]), out_dim.0, out_dim.1);
        let eval = |ps: &ParamSet| {
            let mut g = Graph::new(ps);
            let out = build(&mut g);
            objective(g.value(out), &w)
        };
        let h = 1e-6;
        for p in 0..params.len() {
            let n = params.get(p).len();
            for _ in 0..6.min(n) {
                let idx = rng.gen_range(0..n);
                let mut plus = params.clone();
                plus.get_mut(p).as_slice_mut().unwrap()[idx] += h;
                let mut minus = params.clone();
                minus.get_mut(p).as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads[p].as_ref().map_or(0.0, |g| g.as_slice().unwrap()[idx]);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {} [{idx}]: fd {fd} vs analytic {an}",
                    params.name(p)
                );
            }
        }
    }

    #[test]
    fn linear_relu_max_mean_gradients() {
        let mut rng = rng_for(1, &[]);
        let mut ps = ParamSet::new();
        ps.insert("x", rand_mat(&mut rng, 12, 3));
        ps.insert("w", rand_mat(&mut rng, 3, 5));
        ps.insert("b", rand_mat(&mut rng, 1, 5));
        check(ps, |g| {
            let (x, w, b) = (g.param(0), g.param(1), g.param(2));
            let y = g.matmul(x, w);
            let y = g.add_row(y, b);
            let y = g.relu(y);
            let m = g.max_groups(y, 3);
            let r = g.repeat_rows(m, 3);
            let s = g.add(r, y);
            g.mean_groups(s, 2)
        });
    }

    #[test]
    fn layer_norm_and_attention_gradients() {
        let mut rng = rng_for(2, &[]);
        let mut ps = ParamSet::new();
        ps.insert("x", rand_mat(&mut rng, 6, 8));
        ps.insert("gamma", rand_mat(&mut rng, 1, 8));
        ps.insert("beta", rand_mat(&mut rng, 1, 8));
        ps.insert("wq", rand_mat(&mut rng, 8, 8));
        ps.insert("wk", rand_mat(&mut rng, 8, 8));
        check(ps, |g| {
            let x = g.param(0);
            let (ga, be) = (g.param(1), g.param(2));
            let n = g.layer_norm(x, ga, be);
            let n = g.column_norm(n);
            let (wq, wk) = (g.param(3), g.param(4));
            let q = g.matmul(n, wq);
            let k = g.matmul(n, wk);
            g.window_attention(q, k, n, 2, 1)
        });
    }

    #[test]
    fn gather_and_select_gradients() {
        let mut rng = rng_for(3, &[]);
        let mut ps = ParamSet::new();
        ps.insert("x", rand_mat(&mut rng, 5, 2));
        check(ps, |g| {
            let x = g.param(0);
            let p = g.gather_patches(x, vec![0, PAD, 4, 4, 1, 2], 2);
            let s = g.select_rows(p, vec![2, 0, 2]);
            g.relu(s)
        });
    }

    #[test]
    fn attention_respects_window() {
        let mut rng = rng_for(4, &[]);
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let q = g.input(rand_mat(&mut rng, 5, 4));
        let k = g.input(rand_mat(&mut rng, 5, 4));
        let mut vals = rand_mat(&mut rng, 5, 4);
        let v = g.input(vals.clone());
        let a = g.window_attention(q, k, v, 1, 0);
        // Radius 0: each row attends only to itself.
        assert!((g.value(a) - &vals).iter().all(|d| d.abs() < 1e-12));
        vals[[4, 0]] += 10.0;
        let v2 = g.input(vals);
        let b = g.window_attention(q, k, v2, 2, 1);
        let c = g.window_attention(q, k, v, 2, 1);
        // Row 0 cannot see row 4 with radius 1.
        assert_eq!(g.value(b).row(0), g.value(c).row(0));
    }

    #[test]
    fn ensure_checks_shapes_and_requires() {
        let mut ps = ParamSet::new();
        let mut rng = rng_for(0, &[]);
        let i = ps.ensure("a", (2, 3), Fill::Ones, &mut Init::Random(&mut rng)).unwrap();
        assert_eq!(ps.get(i), &Mat::ones((2, 3)));
        assert!(ps.ensure("a", (3, 2), Fill::Ones, &mut Init::Require).is_err());
        assert!(ps.ensure("b", (1, 1), Fill::Ones, &mut Init::Require).is_err());
        assert_eq!(ps.ensure("a", (2, 3), Fill::Zeros, &mut Init::Require).unwrap(), i);
    }
}
