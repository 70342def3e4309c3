//! The encoder-decoder transformer with hybrid image embeddings.
//!
//! The encoder sees continuous patch features (projected to the model
//! width) followed by text embeddings; a missing modality becomes a single
//! `[IMAGEPAD]` or `[TEXTPAD]` position. The decoder reads and predicts ids
//! from the unified space `[specials | words | visual codes]`. Its input
//! table and the output head are one concatenation of the text table (also
//! used by the encoder) and the decoder's visual table, so all three uses
//! share storage.
//!
//! Batches are packed: rows of every example are stacked and attention is
//! restricted to each example's own segment, so no padding is needed and
//! examples never see each other.

mod config;
pub mod layers;

use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, TokenSpace};
pub use layers::ForwardCtx;
use layers::{DecoderLayer, EncoderLayer, Init, LayerNorm, ParamSink};

use crate::autodiff::{ops, AttnSegment};
use crate::codec::{PatchSequence, RawPatches, VisionCodec};
use crate::corruption::PatchMask;
use crate::data::vocab::{IMAGEPAD, TEXTPAD};
use crate::error::{dim_err, Error, Result};
use crate::{Tensor, TokenId};

/// Segment ids for the encoder's two modalities.
const SEGMENT_TEXT: usize = 0;
const SEGMENT_IMAGE: usize = 1;

/// One example's encoder-side inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct EncoderItem<'a> {
    pub text: Option<&'a [TokenId]>,
    /// Number of consecutive rows of the batch feature tensor owned by this
    /// example; `None` means no image.
    pub n_patches: Option<usize>,
    pub mask: Option<&'a PatchMask>,
}

/// Packed encoder output.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[Σ L × d_model]`.
    pub states: Tensor,
    pub segments: Vec<Range<usize>>,
}

#[derive(Debug, Clone)]
pub struct DuVlgModel {
    cfg: ModelConfig,
    /// `[S + V × d]`, shared by encoder input, decoder input and output head.
    pub text_embed: Tensor,
    /// `[K × d]`, decoder-side visual token embeddings.
    pub visual_embed: Tensor,
    /// `[d_feat × d]`.
    pub patch_proj: Tensor,
    /// `[1 × d]`, replaces masked patches.
    pub image_mask_embed: Tensor,
    pub enc_image_pos: Tensor,
    pub enc_text_pos: Tensor,
    pub dec_pos: Tensor,
    /// `[2 × d]`: text, image.
    pub segment_embed: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_norm: LayerNorm,
    pub dec_norm: LayerNorm,
    /// `[S + V + K]`.
    pub head_bias: Tensor,
    codec: Arc<VisionCodec>,
}

impl DuVlgModel {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: ModelConfig, codec: Arc<VisionCodec>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if codec.featurizer.d_feat() != cfg.d_feat {
            return Err(Error::ModelConfig(format!(
                "featurizer width {} differs from d_feat {}",
                codec.featurizer.d_feat(),
                cfg.d_feat
            )));
        }
        if codec.codebook.size() != cfg.visual_vocab {
            return Err(Error::ModelConfig(format!(
                "codebook size {} differs from visual_vocab {}",
                codec.codebook.size(),
                cfg.visual_vocab
            )));
        }
        let d = cfg.d_model;
        let tokens = cfg.tokens();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let text_embed = init.uniform(&[tokens.text_rows(), d]);
        let visual_embed = init.uniform(&[cfg.visual_vocab, d]);
        let patch_proj = init.uniform(&[cfg.d_feat, d]);
        let image_mask_embed = init.uniform(&[1, d]);
        let enc_image_pos = init.uniform(&[cfg.max_patches, d]);
        let enc_text_pos = init.uniform(&[cfg.max_text_len, d]);
        let dec_pos = init.uniform(&[cfg.decoder_positions(), d]);
        let segment_embed = init.uniform(&[2, d]);
        let encoder = (0..cfg.n_layers_enc).map(|_| EncoderLayer::new(&mut init, d, cfg.n_heads, cfg.d_ff)).collect();
        let decoder = (0..cfg.n_layers_dec).map(|_| DecoderLayer::new(&mut init, d, cfg.n_heads, cfg.d_ff)).collect();
        let enc_norm = LayerNorm::new(&mut init, d);
        let dec_norm = LayerNorm::new(&mut init, d);
        let head_bias = init.constant(&[tokens.total()], 0.0);
        Ok(Self {
            cfg,
            text_embed,
            visual_embed,
            patch_proj,
            image_mask_embed,
            enc_image_pos,
            enc_text_pos,
            dec_pos,
            segment_embed,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            head_bias,
            codec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tokens(&self) -> TokenSpace {
        self.cfg.tokens()
    }

    pub fn codec(&self) -> &VisionCodec {
        &self.codec
    }

    pub fn codec_arc(&self) -> Arc<VisionCodec> {
        Arc::clone(&self.codec)
    }

    /// Trainable parameters in a fixed order. The featurizer and codebook
    /// are not included.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out: ParamSink = vec![
            ("text_embed".into(), self.text_embed.clone()),
            ("visual_embed".into(), self.visual_embed.clone()),
            ("patch_proj".into(), self.patch_proj.clone()),
            ("image_mask_embed".into(), self.image_mask_embed.clone()),
            ("enc_image_pos".into(), self.enc_image_pos.clone()),
            ("enc_text_pos".into(), self.enc_text_pos.clone()),
            ("dec_pos".into(), self.dec_pos.clone()),
            ("segment_embed".into(), self.segment_embed.clone()),
        ];
        for (i, l) in self.encoder.iter().enumerate() {
            l.collect(&format!("encoder.{i}"), &mut out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.collect(&format!("decoder.{i}"), &mut out);
        }
        self.enc_norm.collect("enc_norm", &mut out);
        self.dec_norm.collect("dec_norm", &mut out);
        out.push(("head_bias".into(), self.head_bias.clone()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|(_, t)| t.zero_grad());
        self.codec.featurizer.weight.zero_grad();
        self.codec.featurizer.bias.zero_grad();
    }

    /// Features of several patch sets stacked into one `[Σn × d_feat]`
    /// tensor, computed through the (possibly trainable) featurizer.
    pub fn stacked_features(&self, patches: &[&RawPatches]) -> Result<Option<Tensor>> {
        if patches.is_empty() {
            return Ok(None);
        }
        let total: usize = patches.iter().map(|p| p.len()).sum();
        let dim = patches[0].dim();
        if patches.iter().any(|p| p.dim() != dim) {
            return dim_err("stacked_features", "patch sizes differ");
        }
        let mut data = Vec::with_capacity(total * dim);
        for p in patches {
            data.extend_from_slice(&p.data);
        }
        Ok(Some(self.codec.featurizer.features(&Tensor::new(data, &[total, dim])?)?))
    }

    /// The unified token table `[S + V + K × d]`: decoder input embedding
    /// and transposed output head.
    pub fn unified_table(&self) -> Result<Tensor> {
        ops::concat_rows(&[&self.text_embed, &self.visual_embed])
    }

    /// Encodes a packed batch. `features` holds the patch features of every
    /// item with an image, in item order.
    pub fn encode_batch(
        &self,
        items: &[EncoderItem],
        features: Option<&Tensor>,
        ctx: &mut ForwardCtx,
    ) -> Result<Encoded> {
        if items.is_empty() {
            return Err(Error::Empty("encoder batch"));
        }
        let n_feat_rows: usize = items.iter().filter_map(|it| it.n_patches).sum();
        let feat_avail = features.map_or(0, Tensor::rows);
        if n_feat_rows != feat_avail {
            return dim_err("encode", format!("{n_feat_rows} patch rows requested, {feat_avail} provided"));
        }
        // Row table: [projected patches | image mask | text table].
        let proj = features.map(|f| ops::matmul(f, &self.patch_proj)).transpose()?;
        let mask_row = n_feat_rows;
        let text_off = n_feat_rows + 1;
        let mut parts: Vec<&Tensor> = Vec::with_capacity(3);
        if let Some(p) = proj.as_ref() {
            parts.push(p);
        }
        parts.push(&self.image_mask_embed);
        parts.push(&self.text_embed);
        let table = ops::concat_rows(&parts)?;

        let text_rows = self.tokens().text_rows();
        let mut rows = Vec::new();
        let mut pos = Vec::new();
        let mut seg = Vec::new();
        let mut segments = Vec::with_capacity(items.len());
        let mut feat_cursor = 0;
        for it in items {
            if it.text.is_none() && it.n_patches.is_none() {
                return Err(Error::EmptyEncoderInput);
            }
            let start = rows.len();
            match it.n_patches {
                Some(n) => {
                    if n > self.cfg.max_patches {
                        return Err(Error::TooLong { what: "image", len: n, max: self.cfg.max_patches });
                    }
                    if let Some(m) = it.mask {
                        if m.masked.len() != n {
                            return dim_err("encode", format!("mask of {} for {n} patches", m.masked.len()));
                        }
                    }
                    for i in 0..n {
                        let masked = it.mask.is_some_and(|m| m.masked[i]);
                        rows.push(if masked { mask_row } else { feat_cursor + i });
                        pos.push(i);
                        seg.push(SEGMENT_IMAGE);
                    }
                    feat_cursor += n;
                }
                None => {
                    rows.push(text_off + IMAGEPAD);
                    pos.push(0);
                    seg.push(SEGMENT_IMAGE);
                }
            }
            match it.text {
                Some(t) if !t.is_empty() => {
                    if t.len() > self.cfg.max_text_len {
                        return Err(Error::TooLong { what: "text", len: t.len(), max: self.cfg.max_text_len });
                    }
                    for (i, &id) in t.iter().enumerate() {
                        if id >= text_rows {
                            return Err(Error::Vocabulary { id, size: text_rows });
                        }
                        rows.push(text_off + id);
                        pos.push(self.cfg.max_patches + i);
                        seg.push(SEGMENT_TEXT);
                    }
                }
                _ => {
                    rows.push(text_off + TEXTPAD);
                    pos.push(self.cfg.max_patches);
                    seg.push(SEGMENT_TEXT);
                }
            }
            segments.push(start..rows.len());
        }

        let positions = ops::concat_rows(&[&self.enc_image_pos, &self.enc_text_pos])?;
        let x = ops::add(&ops::gather_rows(&table, &rows)?, &ops::gather_rows(&positions, &pos)?)?;
        let mut x = ctx.dropout(&ops::add(&x, &ops::gather_rows(&self.segment_embed, &seg)?)?);
        let attn_segments: Vec<AttnSegment> = segments.iter().cloned().map(AttnSegment::square).collect();
        for layer in &self.encoder {
            x = layer.forward(&x, &attn_segments, ctx)?;
        }
        Ok(Encoded { states: self.enc_norm.forward(&x)?, segments })
    }

    /// Teacher-forced decoder over a packed batch. Row `t` of each item's
    /// block holds logits for the token following `inputs[item][..=t]`.
    pub fn decode_batch(&self, inputs: &[&[TokenId]], enc: &Encoded, ctx: &mut ForwardCtx) -> Result<Tensor> {
        if inputs.len() != enc.segments.len() {
            return dim_err("decode", format!("{} inputs for {} encoded items", inputs.len(), enc.segments.len()));
        }
        let total = self.tokens().total();
        let max_pos = self.cfg.decoder_positions();
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut self_segments = Vec::with_capacity(inputs.len());
        let mut cross_segments = Vec::with_capacity(inputs.len());
        for (inp, enc_seg) in inputs.iter().zip(&enc.segments) {
            if inp.is_empty() {
                return Err(Error::Empty("decoder input"));
            }
            if inp.len() > max_pos {
                return Err(Error::TooLong { what: "decoder input", len: inp.len(), max: max_pos });
            }
            if let Some(&bad) = inp.iter().find(|&&t| t >= total) {
                return Err(Error::Vocabulary { id: bad, size: total });
            }
            let start = ids.len();
            ids.extend_from_slice(inp);
            pos.extend(0..inp.len());
            self_segments.push(AttnSegment::square(start..ids.len()));
            cross_segments.push(AttnSegment { q: start..ids.len(), k: enc_seg.clone() });
        }
        let table = self.unified_table()?;
        let y = ops::add(&ops::gather_rows(&table, &ids)?, &ops::gather_rows(&self.dec_pos, &pos)?)?;
        let mut y = ctx.dropout(&y);
        for layer in &self.decoder {
            y = layer.forward(&y, &enc.states, &self_segments, &cross_segments, ctx)?;
        }
        let h = self.dec_norm.forward(&y)?;
        ops::add_row(&ops::matmul(&h, &ops::transpose(&table)?)?, &self.head_bias)
    }

    /// Single-example encoder: `[L × d_model]`, image segment first.
    pub fn encode(
        &self,
        text: Option<&[TokenId]>,
        image: Option<&PatchSequence>,
        mask: Option<&PatchMask>,
    ) -> Result<Tensor> {
        let item = EncoderItem { text, n_patches: image.map(PatchSequence::n_patches), mask };
        let enc = self.encode_batch(&[item], image.map(|p| &p.features), &mut ForwardCtx::eval())?;
        Ok(enc.states)
    }

    /// Single-example decoder: logits `[T × (S+V+K)]`.
    pub fn decode_forward(&self, targets: &[TokenId], enc_states: &Tensor) -> Result<Tensor> {
        let enc = Encoded { states: enc_states.clone(), segments: vec![0..enc_states.rows()] };
        self.decode_batch(&[targets], &enc, &mut ForwardCtx::eval())
    }
}
