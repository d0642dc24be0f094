//! Parameterized building blocks shared by every module.

use fan_autograd::{
    multi_head_attention, AttentionWeights, BoundParams, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var,
};
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng;

/// Registers parameters under a dotted name prefix. Each tensor draws its
/// initial values from its own named stream, so adding a parameter never
/// changes the initialization of the others.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: String,
    group: ParamGroup,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, seed, prefix: String::new(), group: ParamGroup::Default }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, seed: self.seed, prefix, group: self.group }
    }

    pub fn with_group(mut self, group: ParamGroup) -> Self {
        self.group = group;
        self
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        Ok(self.store.add(full, tensor, self.group)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        let mut r = rng::stream(self.seed, &full);
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut r)).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.store.add(full, t, self.group)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape.to_vec()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let w = s.normal("w", &[input, output], 1.0 / (input as f64).sqrt())?;
        let b = s.zeros("b", &[output])?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        Ok(g.add_row_bias(y, p[self.b])?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self { gamma: s.ones("gamma", &[dim])?, beta: s.zeros("beta", &[dim])?, eps })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gamma], p[self.beta], self.eps)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// Queries come from `q_dim`, keys and values from `kv_dim`; output is `dim`.
    pub fn new(pb: &mut ParamBuilder, name: &str, q_dim: usize, kv_dim: usize, dim: usize, heads: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", q_dim, dim)?,
            k: Linear::new(&mut s, "k", kv_dim, dim)?,
            v: Linear::new(&mut s, "v", kv_dim, dim)?,
            o: Linear::new(&mut s, "o", dim, dim)?,
            heads,
        })
    }

    pub fn weights(&self, p: &BoundParams) -> AttentionWeights {
        AttentionWeights {
            wq: p[self.q.w],
            bq: p[self.q.b],
            wk: p[self.k.w],
            bk: p[self.k.b],
            wv: p[self.v.w],
            bv: p[self.v.b],
            wo: p[self.o.w],
            bo: p[self.o.b],
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
        site: &str,
    ) -> Result<Var> {
        let w = self.weights(p);
        Ok(multi_head_attention(g, q, k, v, &w, self.heads, mask, site)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self { up: Linear::new(&mut s, "up", dim, hidden)?, down: Linear::new(&mut s, "down", hidden, dim)? })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, hidden: usize, eps: f64) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm1: Norm::new(&mut s, "norm1", dim, eps)?,
            attn: Attention::new(&mut s, "attn", dim, dim, dim, heads)?,
            norm2: Norm::new(&mut s, "norm2", dim, eps)?,
            ffn: FeedForward::new(&mut s, "ffn", dim, hidden)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, mask: Option<&[bool]>, site: &str) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, h, mask, site)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Pre-norm transformer decoder layer: self-attention, cross-attention, FFN.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, hidden: usize, eps: f64) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm1: Norm::new(&mut s, "norm1", dim, eps)?,
            self_attn: Attention::new(&mut s, "self_attn", dim, dim, dim, heads)?,
            norm2: Norm::new(&mut s, "norm2", dim, eps)?,
            cross_attn: Attention::new(&mut s, "cross_attn", dim, dim, dim, heads)?,
            norm3: Norm::new(&mut s, "norm3", dim, eps)?,
            ffn: FeedForward::new(&mut s, "ffn", dim, hidden)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, memory: Var, site: &str) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.self_attn.forward(g, p, h, h, h, None, &format!("{site}/self"))?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let c = self.cross_attn.forward(g, p, h, memory, memory, None, &format!("{site}/cross"))?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        Ok(g.add(x, f)?)
    }
}

/// 3×3 convolution, per-pixel layer norm over channels, GELU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub norm: Norm,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, stride: usize, eps: f64) -> Result<Self> {
        let mut s = pb.scope(name);
        let fan_in = 9 * cin;
        let kernel = s.normal("kernel", &[3, 3, cin, cout], (2.0 / fan_in as f64).sqrt())?;
        Ok(Self { kernel, norm: Norm::new(&mut s, "norm", cout, eps)?, stride })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.kernel], self.stride, 1)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.gelu(y))
    }
}

/// Fixed 1-D sinusoidal table `[len × dim]`: columns `2k, 2k+1` hold
/// `sin, cos` of `pos / 10000^(2k/dim)`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![len, dim]);
    for pos in 0..len {
        let row = &mut t.data_mut()[pos * dim..(pos + 1) * dim];
        fill_sinusoid(row, pos as f64);
    }
    t
}

pub(crate) fn fill_sinusoid(out: &mut [f64], pos: f64) {
    let dim = out.len();
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * k) as f64) / dim as f64);
        out[2 * k] = (pos * freq).sin();
        out[2 * k + 1] = (pos * freq).cos();
    }
}
