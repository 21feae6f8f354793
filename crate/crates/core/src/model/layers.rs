//! Parameterised building blocks shared by the encoders and heads.

use crate::autograd::{Fill, Graph, Init, ParamSet, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn bind(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, init: &mut Init<'_>) -> Result<Self> {
        Ok(Self {
            weight: ps.ensure(
                &format!("{name}.weight"),
                (fan_in, fan_out),
                Fill::HeUniform { fan_in },
                init,
            )?,
            bias: ps.ensure(&format!("{name}.bias"), (1, fan_out), Fill::Zeros, init)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn bind(ps: &mut ParamSet, name: &str, dim: usize, init: &mut Init<'_>) -> Result<Self> {
        Ok(Self {
            gamma: ps.ensure(&format!("{name}.gamma"), (1, dim), Fill::Ones, init)?,
            beta: ps.ensure(&format!("{name}.beta"), (1, dim), Fill::Zeros, init)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer over frame tokens with banded (local) attention.
#[derive(Debug, Clone)]
pub struct TemporalTransformer {
    blocks: Vec<Block>,
    norm: LayerNorm,
    heads: usize,
    radius: usize,
}

impl TemporalTransformer {
    pub fn bind(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        window: usize,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let p = format!("{name}.block{i}");
            blocks.push(Block {
                ln1: LayerNorm::bind(ps, &format!("{p}.ln1"), dim, init)?,
                q: Linear::bind(ps, &format!("{p}.attn.q"), dim, dim, init)?,
                k: Linear::bind(ps, &format!("{p}.attn.k"), dim, dim, init)?,
                v: Linear::bind(ps, &format!("{p}.attn.v"), dim, dim, init)?,
                out: Linear::bind(ps, &format!("{p}.attn.out"), dim, dim, init)?,
                ln2: LayerNorm::bind(ps, &format!("{p}.ln2"), dim, init)?,
                fc1: Linear::bind(ps, &format!("{p}.mlp.fc1"), dim, 2 * dim, init)?,
                fc2: Linear::bind(ps, &format!("{p}.mlp.fc2"), 2 * dim, dim, init)?,
            });
        }
        Ok(Self {
            blocks,
            norm: LayerNorm::bind(ps, &format!("{name}.norm"), dim, init)?,
            heads,
            radius: window / 2,
        })
    }

    /// `x` is `L x dim`, one row per frame.
    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        for b in &self.blocks {
            let h = b.ln1.forward(g, x);
            let q = b.q.forward(g, h);
            let k = b.k.forward(g, h);
            let v = b.v.forward(g, h);
            let a = g.window_attention(q, k, v, self.heads, self.radius);
            let a = b.out.forward(g, a);
            x = g.add(x, a);
            let h = b.ln2.forward(g, x);
            let h = b.fc1.forward(g, h);
            let h = g.relu(h);
            let h = b.fc2.forward(g, h);
            x = g.add(x, h);
        }
        self.norm.forward(g, x)
    }
}

/// Two-layer perceptron applied to each frame feature.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn bind(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, out: usize, init: &mut Init<'_>) -> Result<Self> {
        Ok(Self {
            fc1: Linear::bind(ps, &format!("{name}.fc1"), dim, hidden, init)?,
            fc2: Linear::bind(ps, &format!("{name}.fc2"), hidden, out, init)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}
