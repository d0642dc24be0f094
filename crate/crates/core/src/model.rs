//! The assembled network: encoders, interaction modules, and mask head.

use fan_autograd::{BoundParams, Graph, ParamStore, Tensor, Var};

use crate::activation::ActivationModule;
use crate::config::{ModelConfig, TextGranularity};
use crate::error::{FanError, Result};
use crate::head::{binarize, upsample_logits, BinaryMask, MaskHead, LOGIT_STRIDE};
use crate::l2v::L2vDecoder;
use crate::nn::ParamBuilder;
use crate::text::{TextEncoder, TextFeatures, TokenSequence};
use crate::v2l::V2lDecoder;
use crate::vision::{Image, PyramidFeatures, VisionEncoder};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub smooth: f64,
    /// Score bilinearly upsampled logits against the full-resolution mask
    /// instead of stride-4 logits against the downsampled mask.
    pub full_resolution: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 1.0, dice: 1.0, smooth: 1.0, full_resolution: false }
    }
}

/// Graph handles of every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub text: TextFeatures,
    pub pyramid: PyramidFeatures,
    /// `f_c^2..f_c^5`, each `[h×w×D]`.
    pub activated: [Var; 4],
    /// Stride-4 map `[H/4 × W/4 × D]`.
    pub aligned: Var,
    /// Query vector `[1×D]`.
    pub sentence: Var,
    /// Stride-4 logits `[H/4 × W/4]`.
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    /// Bilinearly upsampled to the image size.
    pub full_logits: Tensor,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct FanModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub activation: ActivationModule,
    pub v2l: V2lDecoder,
    pub l2v: L2vDecoder,
    pub head: MaskHead,
}

impl FanModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, seed);
        let text = TextEncoder::new(
            &mut pb,
            c.vocab_size,
            c.max_len,
            c.text_dim,
            c.text_layers,
            c.text_heads,
            c.text_ffn,
            c.norm_eps,
        )?;
        let vision = VisionEncoder::new(&mut pb, c.stem_channels, c.vision_channels, c.norm_eps)?;
        let activation =
            ActivationModule::new(&mut pb, c.vision_channels, c.text_dim, c.d_model, c.activation_heads, c.use_activation)?;
        let v2l = V2lDecoder::new(
            &mut pb,
            c.text_dim,
            c.d_model,
            c.vpm_heads,
            c.vpm_ffn,
            c.norm_eps,
            c.vpm,
            c.vpm_self_attention,
        )?;
        let (layers, enc) = if c.use_l2v { (c.l2v_layers, c.l2v_encoder_layers) } else { (0, 0) };
        let l2v = L2vDecoder::new(&mut pb, c.text_dim, c.d_model, layers, enc, c.l2v_heads, c.l2v_ffn, c.norm_eps)?;
        let head = MaskHead::new(&mut pb)?;
        Ok(Self { config: config.clone(), params, text, vision, activation, v2l, l2v, head })
    }

    /// Rewraps trained parameters, checking they fit this configuration.
    pub fn with_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(FanError::Compatibility(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.entries().iter().zip(params.entries()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() || want.group != got.group {
                return Err(FanError::Compatibility(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, image: &Image, tokens: &TokenSequence) -> Result<ForwardOutput> {
        let text = self.text.encode(g, p, tokens)?;
        self.forward_text(g, p, image, text)
    }

    /// Forward pass from already-encoded text.
    pub fn forward_text(&self, g: &mut Graph, p: &BoundParams, image: &Image, text: TextFeatures) -> Result<ForwardOutput> {
        let pyramid = self.vision.encode(g, p, image)?;
        let (words, mask) = match self.config.text_granularity {
            TextGranularity::WordAndSentence => (text.f_w, Some(text.padding_mask.clone())),
            TextGranularity::SentenceOnly => (text.f_s, None),
        };
        let activated = self.activation.forward(g, p, &pyramid.levels, words, mask.as_deref())?;
        let aligned = self.v2l.forward(g, p, &activated, words, mask.as_deref())?;
        let sentence = if self.config.use_l2v {
            let top = g.shape(activated[3]).to_vec();
            let memory = g.reshape(activated[3], vec![top[0] * top[1], top[2]])?;
            self.l2v.decode(g, p, text.f_s, memory)?
        } else {
            self.l2v.project(g, p, text.f_s)?
        };
        let logits = self.head.similarity(g, p, aligned, sentence)?;
        Ok(ForwardOutput { text, pyramid, activated, aligned, sentence, logits })
    }

    /// Weighted BCE + dice of stride-4 `logits` against `gt`.
    pub fn loss(&self, g: &mut Graph, logits: Var, gt: &BinaryMask, w: &LossWeights) -> Result<Var> {
        let (logits, target) = if w.full_resolution {
            (upsample_logits(g, logits, gt.height(), gt.width())?, gt.to_tensor())
        } else {
            (logits, gt.downsample(LOGIT_STRIDE)?)
        };
        if g.shape(logits) != target.shape() {
            return Err(fan_autograd::TensorError::shape("loss", g.shape(logits), target.shape()).into());
        }
        let bce = g.bce_with_logits(logits, &target)?;
        let dice = g.dice_loss(logits, &target, w.smooth)?;
        let bce = g.scale(bce, w.bce);
        let dice = g.scale(dice, w.dice);
        Ok(g.add(bce, dice)?)
    }

    /// Logits, then bilinear upsampling, then sigmoid and threshold.
    pub fn predict(&self, image: &Image, tokens: &TokenSequence) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, image, tokens)?;
        let full = upsample_logits(&mut g, out.logits, image.height(), image.width())?;
        let full_logits = g.value(full).clone();
        if !full_logits.all_finite() {
            return Err(FanError::NonFinite("prediction logits".into()));
        }
        let mask = binarize(&full_logits, self.config.threshold)?;
        Ok(Prediction { logits: g.value(out.logits).clone(), full_logits, mask })
    }
}
