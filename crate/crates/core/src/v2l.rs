//! Vision projection modules and top-down pyramid fusion.

use fan_autograd::{BoundParams, Graph, ParamId, Tensor, Var};

use crate::config::VpmMode;
use crate::error::{FanError, Result};
use crate::nn::{fill_sinusoid, Attention, FeedForward, Linear, Norm, ParamBuilder};

/// Fixed 2-D sine embedding `[h·w × d]` for row-major positions.
///
/// The first `d/2` columns encode the row index and the rest the column
/// index, each as interleaved `sin, cos` pairs.
pub fn positional_embedding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(FanError::Config(format!("positional embedding dim {d} must be a positive multiple of 4")));
    }
    let half = d / 2;
    let mut t = Tensor::zeros(vec![h * w, d]);
    let data = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            let (ry, rx) = row.split_at_mut(half);
            fill_sinusoid(ry, y as f64);
            fill_sinusoid(rx, x as f64);
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy)]
pub struct VisionProjection {
    pub norm_self: Norm,
    pub self_attn: Attention,
    pub norm_cross: Norm,
    pub cross_attn: Attention,
    pub norm_ffn: Norm,
    pub ffn: FeedForward,
    pub use_self_attention: bool,
}

impl VisionProjection {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
        use_self_attention: bool,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            norm_self: Norm::new(&mut s, "norm_self", d, eps)?,
            self_attn: Attention::new(&mut s, "self_attn", d, d, d, heads)?,
            norm_cross: Norm::new(&mut s, "norm_cross", d, eps)?,
            cross_attn: Attention::new(&mut s, "cross_attn", d, d, d, heads)?,
            norm_ffn: Norm::new(&mut s, "norm_ffn", d, eps)?,
            ffn: FeedForward::new(&mut s, "ffn", d, hidden)?,
            use_self_attention,
        })
    }

    /// `f_c [h×w×D]` and projected words `[l×D]` to `[h×w×D]`.
    ///
    /// Self-attention runs over the concatenated vision and word tokens;
    /// only the vision rows are kept, so only they are computed as queries.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        f_c: Var,
        words: Var,
        mask: Option<&[bool]>,
        site: &str,
    ) -> Result<Var> {
        let (h, w, d) = {
            let s = g.shape(f_c);
            (s[0], s[1], s[2])
        };
        let hw = h * w;
        let tokens = g.reshape(f_c, vec![hw, d])?;
        let pos = g.constant(positional_embedding(h, w, d)?);
        let mut x = g.add(tokens, pos)?;
        let l = g.shape(words)[0];

        if self.use_self_attention {
            let all = g.concat_rows(&[x, words])?;
            let n = self.norm_self.forward(g, p, all)?;
            let q = g.slice_rows(n, 0, hw)?;
            let key_mask: Option<Vec<bool>> = mask.map(|m| std::iter::repeat_n(false, hw).chain(m.iter().copied()).collect());
            debug_assert!(key_mask.as_ref().is_none_or(|m| m.len() == hw + l));
            let a = self.self_attn.forward(g, p, q, n, n, key_mask.as_deref(), &format!("{site}/self"))?;
            x = g.add(x, a)?;
        }

        let q = self.norm_cross.forward(g, p, x)?;
        let c = self.cross_attn.forward(g, p, q, words, words, mask, &format!("{site}/cross"))?;
        x = g.add(x, c)?;

        let n = self.norm_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, n)?;
        x = g.add(x, f)?;
        Ok(g.reshape(x, vec![h, w, d])?)
    }
}

/// 3×3 smoothing convolution with bias for one top-down step.
#[derive(Debug, Clone, Copy)]
pub struct Smooth {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Smooth {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let kernel = s.normal("kernel", &[3, 3, d, d], (1.0 / (9 * d) as f64).sqrt())?;
        let bias = s.zeros("bias", &[d])?;
        Ok(Self { kernel, bias })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.kernel], 1, 1)?;
        Ok(g.add_row_bias(y, p[self.bias])?)
    }
}

/// Top-down fusion from level 5 to level 2: upsample ×2, add, smooth.
pub fn fpn_fuse(g: &mut Graph, p: &BoundParams, levels: &[Var; 4], smooth: &[Smooth; 3]) -> Result<Var> {
    let mut top = levels[3];
    for i in (0..3).rev() {
        let (h, w) = {
            let s = g.shape(levels[i]);
            (s[0], s[1])
        };
        let (th, tw) = (g.shape(top)[0], g.shape(top)[1]);
        if th * 2 != h || tw * 2 != w || g.shape(top)[2] != g.shape(levels[i])[2] {
            return Err(fan_autograd::TensorError::shape("fpn_fuse", g.shape(top), g.shape(levels[i])).into());
        }
        let up = g.upsample_bilinear(top, h, w)?;
        let sum = g.add(up, levels[i])?;
        top = smooth[i].forward(g, p, sum)?;
    }
    Ok(top)
}

#[derive(Debug, Clone)]
pub struct V2lDecoder {
    pub word_proj: Linear,
    /// Per-level modules for levels 2..=5; `None` where no VPM runs.
    pub vpm: [Option<VisionProjection>; 4],
    pub smooth: [Smooth; 3],
}

impl V2lDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        text_dim: usize,
        d: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
        mode: VpmMode,
        use_self_attention: bool,
    ) -> Result<Self> {
        let mut s = pb.scope("v2l");
        let word_proj = Linear::new(&mut s, "word_proj", text_dim, d)?;
        let mut vpm = [None; 4];
        for (i, slot) in vpm.iter_mut().enumerate() {
            let active = match mode {
                VpmMode::Off => false,
                VpmMode::Single => i == 3,
                VpmMode::Multi => true,
            };
            if active {
                *slot =
                    Some(VisionProjection::new(&mut s, &format!("vpm.L{}", i + 2), d, heads, hidden, eps, use_self_attention)?);
            }
        }
        let smooth = [Smooth::new(&mut s, "smooth.L2", d)?, Smooth::new(&mut s, "smooth.L3", d)?, Smooth::new(&mut s, "smooth.L4", d)?];
        Ok(Self { word_proj, vpm, smooth })
    }

    /// Aligned stride-4 map `[H/4 × W/4 × D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        activated: &[Var; 4],
        words: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let mut aligned = *activated;
        if self.vpm.iter().any(Option::is_some) {
            let pw = self.word_proj.forward(g, p, words)?;
            for (i, vpm) in self.vpm.iter().enumerate() {
                if let Some(v) = vpm {
                    aligned[i] = v.forward(g, p, activated[i], pw, mask, &format!("vpm/L{}", i + 2))?;
                }
            }
        }
        fpn_fuse(g, p, &aligned, &self.smooth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_sin0_cos1() {
        let t = positional_embedding(2, 3, 8).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(positional_embedding(2, 2, 6).is_err());
    }

    #[test]
    fn rows_are_distinct_and_bounded() {
        let t = positional_embedding(8, 8, 16).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for a in 0..64 {
            for b in a + 1..64 {
                let d: f64 = t.row(a).iter().zip(t.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d > 0.0, "rows {a} and {b} coincide");
            }
        }
    }
}
