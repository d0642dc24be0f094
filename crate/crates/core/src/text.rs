//! Tokenization and the transformer text encoder.

use std::collections::HashMap;
use std::path::Path;

use fan_autograd::{BoundParams, Graph, ParamId, Var};

use crate::error::{FanError, Result};
use crate::nn::{sinusoidal_table, EncoderLayer, Norm, ParamBuilder};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[SOS]", "[EOS]", "[UNK]"];

/// Words of the synthetic referring expressions.
pub const SYNTHETIC_WORDS: [&str; 13] = [
    "the", "red", "green", "blue", "yellow", "circle", "square", "triangle", "left", "right", "of", "above", "below",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in order.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let all: Vec<String> =
            RESERVED.iter().map(|s| s.to_string()).chain(words.iter().map(|w| w.as_ref().to_string())).collect();
        Self::from_tokens(all)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(FanError::Data(format!("vocabulary line {} must be {r}", i + 1)));
            }
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(FanError::Data(format!("vocabulary line {} holds an invalid token {t:?}", i + 1)));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(FanError::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn synthetic() -> Self {
        Self::new(&SYNTHETIC_WORDS).expect("synthetic vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| FanError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FanError::io(path, e))?;
        Self::parse(&text).map_err(|e| FanError::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// `true` at padding positions.
    pub fn padding_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i >= self.true_length).collect()
    }

    /// Rebuilds a sequence from stored ids, checking the layout invariants.
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        let true_length = ids.iter().position(|&t| t == EOS).map(|p| p + 1).ok_or_else(|| {
            FanError::Data("token sequence has no [EOS]".into())
        })?;
        let seq = Self { ids, true_length };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.true_length;
        let ok = n >= 2
            && n <= self.ids.len()
            && self.ids[0] == SOS
            && self.ids[n - 1] == EOS
            && self.ids[1..n - 1].iter().all(|&t| !matches!(t, PAD | SOS | EOS))
            && self.ids[n..].iter().all(|&t| t == PAD);
        if ok {
            Ok(())
        } else {
            Err(FanError::Data(format!("malformed token sequence {:?} (true length {n})", self.ids)))
        }
    }
}

/// Lowercases, splits on whitespace, keeps at most `max_len - 2` words,
/// and wraps them in `[SOS] … [EOS]` followed by padding.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(FanError::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let lower = text.to_lowercase();
    let mut ids = vec![SOS];
    ids.extend(lower.split_whitespace().take(max_len - 2).map(|w| vocab.id(w).unwrap_or(UNK)));
    ids.push(EOS);
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence { ids, true_length })
}

/// Graph handles of encoded text.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// Word embeddings `[max_len × C_t]`.
    pub f_w: Var,
    /// Sentence embedding `[1 × C_t]`, the `[EOS]` row of `f_w`.
    pub f_s: Var,
    pub padding_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: Norm,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        eps: f64,
    ) -> Result<Self> {
        let mut s = pb.scope("text");
        let embed = s.normal("embed", &[vocab_size, dim], 1.0)?;
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("layer{i}"), dim, heads, hidden, eps))
            .collect::<Result<_>>()?;
        let norm = Norm::new(&mut s, "norm", dim, eps)?;
        Ok(Self { embed, layers, norm, vocab_size, max_len, dim })
    }

    pub fn encode(&self, g: &mut Graph, p: &BoundParams, tokens: &TokenSequence) -> Result<TextFeatures> {
        tokens.validate()?;
        self.encode_ids(g, p, &tokens.ids, tokens.true_length)
    }

    /// Encodes raw ids where positions at and after `true_length` are padding,
    /// whatever ids they hold.
    pub fn encode_ids(&self, g: &mut Graph, p: &BoundParams, ids: &[usize], true_length: usize) -> Result<TextFeatures> {
        if ids.len() != self.max_len {
            return Err(FanError::Data(format!("expected {} token ids, got {}", self.max_len, ids.len())));
        }
        if true_length == 0 || true_length > ids.len() {
            return Err(FanError::Data(format!("true length {true_length} outside 1..={}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(FanError::Data(format!("token id {bad} outside vocabulary of size {}", self.vocab_size)));
        }
        let padding_mask: Vec<bool> = (0..ids.len()).map(|i| i >= true_length).collect();
        let emb = g.embedding(p[self.embed], ids)?;
        let pos = g.constant(sinusoidal_table(self.max_len, self.dim));
        let mut x = g.add(emb, pos)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x, Some(&padding_mask), &format!("text/layer{i}"))?;
        }
        let f_w = self.norm.forward(g, p, x)?;
        let f_s = g.slice_rows(f_w, true_length - 1, 1)?;
        Ok(TextFeatures { f_w, f_s, padding_mask })
    }
}
