//! Transformer decoder that updates the sentence embedding against visual memory.

use fan_autograd::{BoundParams, Graph, TensorError, Var};

use crate::error::Result;
use crate::nn::{DecoderLayer, EncoderLayer, Linear, ParamBuilder};

#[derive(Debug, Clone)]
pub struct L2vDecoder {
    pub proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub layers: Vec<DecoderLayer>,
}

impl L2vDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        text_dim: usize,
        d: usize,
        layers: usize,
        encoder_layers: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
    ) -> Result<Self> {
        let mut s = pb.scope("l2v");
        let proj = Linear::new(&mut s, "proj", text_dim, d)?;
        let encoder = (0..encoder_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("encoder{i}"), d, heads, hidden, eps))
            .collect::<Result<_>>()?;
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("layer{i}"), d, heads, hidden, eps))
            .collect::<Result<_>>()?;
        Ok(Self { proj, encoder, layers })
    }

    /// `f_s [1×C_t]` into the fusion space `[1×D]`.
    pub fn project(&self, g: &mut Graph, p: &BoundParams, f_s: Var) -> Result<Var> {
        self.proj.forward(g, p, f_s)
    }

    /// Projects `f_s` and runs the decoder stack against `memory [M×D]`.
    pub fn decode(&self, g: &mut Graph, p: &BoundParams, f_s: Var, memory: Var) -> Result<Var> {
        if self.layers.is_empty() {
            return Err(TensorError::Contract("language-to-vision decoding needs at least one layer".into()).into());
        }
        if g.shape(memory).len() != 2 || g.shape(memory)[0] == 0 {
            return Err(TensorError::Contract(format!("visual memory must be [M×D], got {:?}", g.shape(memory))).into());
        }
        let mut mem = memory;
        for (i, layer) in self.encoder.iter().enumerate() {
            mem = layer.forward(g, p, mem, None, &format!("l2v/encoder{i}"))?;
        }
        let mut q = self.project(g, p, f_s)?;
        for (i, layer) in self.layers.iter().enumerate() {
            q = layer.forward(g, p, q, mem, &format!("l2v/layer{i}"))?;
        }
        Ok(q)
    }
}
