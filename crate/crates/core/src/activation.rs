//! Per-level cross-attention of visual features over word embeddings.

use fan_autograd::{BoundParams, Graph, Var};

use crate::error::Result;
use crate::nn::{Attention, Linear, ParamBuilder};

/// Parameters of one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct ActivationScale {
    pub vis_proj: Linear,
    pub word_proj: Linear,
    pub attn: Attention,
}

impl ActivationScale {
    pub fn new(pb: &mut ParamBuilder, name: &str, vis_dim: usize, text_dim: usize, d: usize, heads: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            vis_proj: Linear::new(&mut s, "vis_proj", vis_dim, d)?,
            word_proj: Linear::new(&mut s, "word_proj", text_dim, d)?,
            attn: Attention::new(&mut s, "attn", d, d, d, heads)?,
        })
    }

    /// `f_v [h×w×C]` attends over `words [l×C_t]`; returns `[h×w×D]`.
    ///
    /// With `attend == false` only the 1×1 projection runs.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        f_v: Var,
        words: Var,
        mask: Option<&[bool]>,
        attend: bool,
        site: &str,
    ) -> Result<Var> {
        let (h, w, c) = {
            let s = g.shape(f_v);
            (s[0], s[1], s[2])
        };
        let tokens = g.reshape(f_v, vec![h * w, c])?;
        let pv = self.vis_proj.forward(g, p, tokens)?;
        let out = if attend {
            let pw = self.word_proj.forward(g, p, words)?;
            let a = self.attn.forward(g, p, pv, pw, pw, mask, site)?;
            g.add(pv, a)?
        } else {
            pv
        };
        let d = g.shape(out)[1];
        Ok(g.reshape(out, vec![h, w, d])?)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationModule {
    pub scales: [ActivationScale; 4],
    pub enabled: bool,
}

impl ActivationModule {
    pub fn new(
        pb: &mut ParamBuilder,
        vision_channels: [usize; 4],
        text_dim: usize,
        d: usize,
        heads: usize,
        enabled: bool,
    ) -> Result<Self> {
        let mut s = pb.scope("activation");
        let mut mk = |i: usize| ActivationScale::new(&mut s, &format!("L{}", i + 2), vision_channels[i], text_dim, d, heads);
        Ok(Self { scales: [mk(0)?, mk(1)?, mk(2)?, mk(3)?], enabled })
    }

    /// Activated maps `f_c^2..f_c^5`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        pyramid: &[Var; 4],
        words: Var,
        mask: Option<&[bool]>,
    ) -> Result<[Var; 4]> {
        let mut out = *pyramid;
        for (i, scale) in self.scales.iter().enumerate() {
            out[i] = scale.forward(g, p, pyramid[i], words, mask, self.enabled, &format!("activation/L{}", i + 2))?;
        }
        Ok(out)
    }
}
