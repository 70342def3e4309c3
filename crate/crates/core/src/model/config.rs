use crate::data::vocab::N_SPECIAL;
use crate::error::{Error, Result};
use crate::TokenId;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Non-special text words.
    pub text_vocab: usize,
    /// Visual codebook size.
    pub visual_vocab: usize,
    pub max_text_len: usize,
    pub max_patches: usize,
    /// Width of the frozen patch features.
    pub d_feat: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// The toy configuration: 32×32 images in 4×4 patches, 64 visual codes.
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            d_ff: 128,
            text_vocab: 17,
            visual_vocab: 64,
            max_text_len: 24,
            max_patches: 64,
            d_feat: 32,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("text_vocab", self.text_vocab),
            ("visual_vocab", self.visual_vocab),
            ("max_text_len", self.max_text_len),
            ("max_patches", self.max_patches),
            ("d_feat", self.d_feat),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ModelConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::ModelConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::ModelConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn tokens(&self) -> TokenSpace {
        TokenSpace { n_text: self.text_vocab, n_visual: self.visual_vocab }
    }

    /// Decoder positions: the longer target kind plus two bracket tokens.
    pub fn decoder_positions(&self) -> usize {
        self.max_text_len.max(self.max_patches) + 2
    }

    /// Closed-form trainable parameter count.
    ///
    /// With `d = d_model`, `f = d_ff`, `S` specials, `V` words, `K` codes:
    ///
    /// ```text
    ///   (S+V)·d + K·d                      tied text table, decoder visual table
    /// + d_feat·d + d                       patch projection, image [MASK]
    /// + (max_patches + max_text_len + dec_positions + 2)·d    positions, segments
    /// + L_enc·(4d² + 2df + 9d + f)
    /// + L_dec·(8d² + 2df + 15d + f)
    /// + 4d + (S+V+K)                       final norms, output bias
    /// ```
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let vocab = self.tokens().total();
        vocab * d
            + self.d_feat * d
            + d
            + (self.max_patches + self.max_text_len + self.decoder_positions() + 2) * d
            + self.n_layers_enc * (4 * d * d + 2 * d * f + 9 * d + f)
            + self.n_layers_dec * (8 * d * d + 2 * d * f + 15 * d + f)
            + 4 * d
            + vocab
    }
}

/// Layout of the unified output space:
/// `[specials | words | visual codes]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpace {
    pub n_text: usize,
    pub n_visual: usize,
}

impl TokenSpace {
    /// Rows of the tied text table (specials plus words).
    pub fn text_rows(&self) -> usize {
        N_SPECIAL + self.n_text
    }

    pub fn total(&self) -> usize {
        self.text_rows() + self.n_visual
    }

    pub fn visual_id(&self, code: usize) -> TokenId {
        debug_assert!(code < self.n_visual);
        self.text_rows() + code
    }

    pub fn is_visual(&self, id: TokenId) -> bool {
        (self.text_rows()..self.total()).contains(&id)
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        (N_SPECIAL..self.text_rows()).contains(&id)
    }

    pub fn code_of(&self, id: TokenId) -> Option<usize> {
        self.is_visual(id).then(|| id - self.text_rows())
    }
}
