//! Flat `key = value` run configuration.
//!
//! Every tunable lives in one document. Unknown keys are rejected, values
//! are validated on load, and [`RunConfig::to_text`] prints every key in a
//! fixed order so two runs can be compared with `diff`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::codec::{CodecConfig, VisionCodec};
use crate::corruption::BlockParams;
use crate::data::synth::max_caption_len;
use crate::data::{gen_dataset, PairedExample, TextVocab};
use crate::decode::{DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::{DuVlgModel, ModelConfig};
use crate::objectives::{CorruptionConfig, LossFlags};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool, Strategy);

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one key from its text form; the config is not revalidated.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), self.$name.format_value())),*]
            }
        }
    };
}

run_config! {
    /// Model initialization and training randomness.
    seed: u64 = 0,
    /// Synthetic dataset generation.
    data_seed: u64 = 1,
    n_train: usize = 2000,
    image_size: usize = 32,
    patch_size: usize = 4,
    /// Featurizer and codebook generation.
    codec_seed: u64 = 0,
    d_feat: usize = 32,
    d_code: usize = 16,
    codebook_size: usize = 64,
    d_model: usize = 64,
    n_layers_enc: usize = 2,
    n_layers_dec: usize = 2,
    n_heads: usize = 4,
    d_ff: usize = 128,
    max_text_len: usize = 24,
    dropout: f64 = 0.0,
    alpha: f64 = 0.05,
    beta: f64 = 1.0,
    p_dae: f64 = 0.6,
    image_mask_rate: f64 = 0.5,
    text_mask_rate: f64 = 0.5,
    span_lambda: f64 = 3.0,
    min_block: usize = 4,
    max_block: usize = 16,
    min_aspect: f64 = 0.3,
    lr: f64 = 3e-4,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    eps: f64 = 1e-8,
    clip_norm: f64 = 1.0,
    batch_size: usize = 16,
    steps: usize = 500,
    finetune_lr_t2i: f64 = crate::train::FINETUNE_LR_T2I,
    finetune_lr_caption: f64 = crate::train::FINETUNE_LR_CAPTION,
    finetune_epochs: usize = 1,
    caption_strategy: Strategy = Strategy::Beam,
    image_strategy: Strategy = Strategy::Nucleus,
    beam_size: usize = 5,
    top_p: f64 = 0.9,
    top_k: usize = 50,
    n_samples: usize = 16,
    temperature: f64 = 1.0,
    length_penalty: f64 = 1.0,
    no_image_loss: bool = false,
    no_text_loss: bool = false,
    no_commitment: bool = false,
}

impl RunConfig {
    /// Parses a document and validates it. Lines are `key = value`; blank
    /// lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the assignments in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 0, msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn grid(&self) -> (usize, usize) {
        let n = self.image_size / self.patch_size;
        (n, n)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image_size {} is not a multiple of patch_size {}", self.image_size, self.patch_size));
        }
        if self.max_text_len < max_caption_len() {
            return bad(format!("max_text_len must be at least {}", max_caption_len()));
        }
        if self.n_train == 0 || self.batch_size == 0 {
            return bad("n_train and batch_size must be at least 1".into());
        }
        for (name, v) in
            [("p_dae", self.p_dae), ("image_mask_rate", self.image_mask_rate), ("text_mask_rate", self.text_mask_rate)]
        {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.span_lambda > 0.0) || !(self.min_aspect > 0.0 && self.min_aspect <= 1.0) {
            return bad("span_lambda must be positive and min_aspect in (0, 1]".into());
        }
        if self.min_block == 0 || self.min_block > self.max_block {
            return bad("need 1 <= min_block <= max_block".into());
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("invalid optimizer settings".into());
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative".into());
        }
        if self.d_code == 0 || self.d_code > self.patch_size * self.patch_size * 3 {
            return bad("d_code must be in [1, patch_size² · 3]".into());
        }
        self.model_config().validate()?;
        self.caption_decode().validate()?;
        self.image_decode().validate()
    }

    pub fn vocab(&self) -> TextVocab {
        crate::data::synth::grammar_vocab()
    }

    pub fn model_config(&self) -> ModelConfig {
        let (r, c) = self.grid();
        ModelConfig {
            d_model: self.d_model,
            n_layers_enc: self.n_layers_enc,
            n_layers_dec: self.n_layers_dec,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            text_vocab: self.vocab().n_words(),
            visual_vocab: self.codebook_size,
            max_text_len: self.max_text_len,
            max_patches: r * c,
            d_feat: self.d_feat,
            dropout: self.dropout,
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            patch_size: self.patch_size,
            d_feat: self.d_feat,
            d_code: self.d_code,
            codebook_size: self.codebook_size,
            seed: self.codec_seed,
        }
    }

    pub fn codec(&self) -> Result<Arc<VisionCodec>> {
        Ok(Arc::new(VisionCodec::new(&self.codec_config())?))
    }

    /// A freshly initialized model.
    pub fn build_model(&self) -> Result<DuVlgModel> {
        DuVlgModel::init(self.model_config(), self.codec()?, self.seed)
    }

    pub fn dataset(&self, codec: &VisionCodec) -> Result<Vec<PairedExample>> {
        gen_dataset(self.n_train, self.data_seed, &self.vocab(), codec, self.image_size)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, clip_norm: self.clip_norm }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: self.adam(),
            alpha: self.alpha,
            beta: self.beta,
            p_dae: self.p_dae,
            batch_size: self.batch_size,
            corruption: CorruptionConfig {
                image_mask_rate: self.image_mask_rate,
                text_mask_rate: self.text_mask_rate,
                span_lambda: self.span_lambda,
                block: BlockParams {
                    min_block: self.min_block,
                    max_block: self.max_block,
                    min_aspect: self.min_aspect,
                },
            },
            flags: LossFlags { image: !self.no_image_loss, text: !self.no_text_loss, commitment: !self.no_commitment },
        }
    }

    fn decode_with(&self, strategy: Strategy) -> DecodeConfig {
        DecodeConfig {
            strategy,
            beam_size: self.beam_size,
            top_p: self.top_p,
            k: self.top_k,
            n_samples: self.n_samples,
            max_len: None,
            temperature: self.temperature,
            length_penalty: self.length_penalty,
            restrict: true,
        }
    }

    pub fn caption_decode(&self) -> DecodeConfig {
        self.decode_with(self.caption_strategy)
    }

    pub fn image_decode(&self) -> DecodeConfig {
        self.decode_with(self.image_strategy)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("alpha", "0.125").unwrap();
        c.set("no_commitment", "true").unwrap();
        c.set("lr", "1e-8").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::parse("alpah = 0.1").is_err());
        assert!(RunConfig::parse("alpha 0.1").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("p_dae = 1.5").is_err());
        assert!(RunConfig::parse("d_model = 63").is_err());
        assert!(RunConfig::parse("beam_size = 0").is_err());
        assert!(RunConfig::parse("image_size = 30").is_err());
        assert!(RunConfig::parse("steps = many").is_err());
    }

    #[test]
    fn defaults_follow_the_method() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.beta, c.p_dae, c.clip_norm), (0.05, 1.0, 0.6, 1.0));
        assert_eq!((c.beam_size, c.top_k, c.top_p, c.n_samples), (5, 50, 0.9, 16));
        assert_eq!((c.image_mask_rate, c.text_mask_rate, c.span_lambda), (0.5, 0.5, 3.0));
        c.validate().unwrap();
        assert_eq!(c.model_config(), ModelConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# ablation\n\nno_text_loss = true\n").unwrap();
        assert!(c.no_text_loss);
        assert!(!c.train_config().flags.text);
    }
}
