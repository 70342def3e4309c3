//! The four dual pre-training tasks, the commitment loss and loss mixing.
//!
//! Decoder sequences carry their brackets: text targets are
//! `[BOS] words [EOS]` and image targets `[BOI] codes [EOI]`. Training is
//! teacher-forced, so the decoder reads every token but the last and is
//! scored on every token but the first.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::ops;
use crate::codec::{ImageGrid, RawPatches};
use crate::corruption::{blockwise_mask, span_infill, BlockParams, PatchMask};
use crate::data::vocab::{BOI, BOS, EOI, EOS};
use crate::data::PairedExample;
use crate::error::{Error, Result};
use crate::model::{DuVlgModel, EncoderItem, ForwardCtx};
use crate::{Tensor, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Text-driven image inpainting.
    DaeImage,
    /// Image-driven text infilling.
    DaeText,
    /// Image to text.
    MtCaption,
    /// Text to image.
    MtT2i,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [Self::DaeImage, Self::DaeText, Self::MtCaption, Self::MtT2i];

    pub fn name(self) -> &'static str {
        match self {
            Self::DaeImage => "dae_image",
            Self::DaeText => "dae_text",
            Self::MtCaption => "mt_caption",
            Self::MtT2i => "mt_t2i",
        }
    }

    pub fn image_target(self) -> bool {
        matches!(self, Self::DaeImage | Self::MtT2i)
    }

    pub fn is_dae(self) -> bool {
        matches!(self, Self::DaeImage | Self::DaeText)
    }

    /// Whether the commitment loss applies.
    pub fn has_commitment(self) -> bool {
        self.image_target()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dae_image" => Ok(Self::DaeImage),
            "dae_text" => Ok(Self::DaeText),
            "mt_caption" | "caption" => Ok(Self::MtCaption),
            "mt_t2i" | "t2i" => Ok(Self::MtT2i),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Picks the denoising family with probability `p_dae`, then either
/// direction with equal probability.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, p_dae: f64) -> TaskKind {
    assert!((0.0..=1.0).contains(&p_dae), "p_dae {p_dae} outside [0, 1]");
    let dae = rng.random_bool(p_dae);
    let image = rng.random_bool(0.5);
    match (dae, image) {
        (true, true) => TaskKind::DaeImage,
        (true, false) => TaskKind::DaeText,
        (false, true) => TaskKind::MtT2i,
        (false, false) => TaskKind::MtCaption,
    }
}

/// Corruption settings for batch construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionConfig {
    pub image_mask_rate: f64,
    pub text_mask_rate: f64,
    pub span_lambda: f64,
    pub block: BlockParams,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { image_mask_rate: 0.5, text_mask_rate: 0.5, span_lambda: 3.0, block: BlockParams::default() }
    }
}

/// One example of a task batch.
#[derive(Debug, Clone)]
pub struct TaskItem {
    /// Encoder text (possibly corrupted); `None` means `[TEXTPAD]`.
    pub enc_text: Option<Vec<TokenId>>,
    /// Whether the encoder sees the image; `false` means `[IMAGEPAD]`.
    pub enc_image: bool,
    pub mask: Option<PatchMask>,
    /// Full bracketed decoder sequence in unified ids.
    pub target: Vec<TokenId>,
    /// Clean patches of the example's image.
    pub patches: RawPatches,
    /// Clean visual codes, one per patch.
    pub codes: Vec<usize>,
}

impl TaskItem {
    pub fn decoder_input(&self) -> &[TokenId] {
        &self.target[..self.target.len() - 1]
    }

    pub fn decoder_labels(&self) -> &[TokenId] {
        &self.target[1..]
    }
}

/// A homogeneous batch of one task.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub kind: TaskKind,
    pub items: Vec<TaskItem>,
}

/// Bracketed image target for `codes`.
pub fn image_target(model: &DuVlgModel, codes: &[usize]) -> Vec<TokenId> {
    let space = model.tokens();
    let mut t = Vec::with_capacity(codes.len() + 2);
    t.push(BOI);
    t.extend(codes.iter().map(|&c| space.visual_id(c)));
    t.push(EOI);
    t
}

/// Bracketed text target for `words`.
pub fn text_target(words: &[TokenId]) -> Vec<TokenId> {
    let mut t = Vec::with_capacity(words.len() + 2);
    t.push(BOS);
    t.extend_from_slice(words);
    t.push(EOS);
    t
}

pub fn build_task_batch<R: Rng + ?Sized>(
    examples: &[&PairedExample],
    kind: TaskKind,
    model: &DuVlgModel,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<TaskBatch> {
    let pairs: Vec<(&ImageGrid, &[TokenId])> = examples.iter().map(|ex| (&ex.image, ex.caption.as_slice())).collect();
    build_task_batch_from(&pairs, kind, model, cfg, rng)
}

/// [`build_task_batch`] over bare `(image, caption words)` pairs.
pub fn build_task_batch_from<R: Rng + ?Sized>(
    pairs: &[(&ImageGrid, &[TokenId])],
    kind: TaskKind,
    model: &DuVlgModel,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<TaskBatch> {
    if pairs.is_empty() {
        return Err(Error::Empty("task batch"));
    }
    let codec = model.codec();
    let items = pairs
        .iter()
        .map(|&(image, caption)| {
            let patches = codec.extract(image)?;
            let codes = codec.tokenize_patches(&patches).0;
            let item = match kind {
                TaskKind::DaeImage => TaskItem {
                    enc_text: Some(caption.to_vec()),
                    enc_image: true,
                    mask: Some(blockwise_mask(patches.rows, patches.cols, cfg.image_mask_rate, &cfg.block, rng)),
                    target: image_target(model, &codes),
                    patches,
                    codes,
                },
                TaskKind::DaeText => {
                    let corrupted = if caption.is_empty() {
                        Vec::new()
                    } else {
                        span_infill(caption, cfg.text_mask_rate, cfg.span_lambda, rng)?.corrupted
                    };
                    TaskItem {
                        enc_text: Some(corrupted),
                        enc_image: true,
                        mask: None,
                        target: text_target(caption),
                        patches,
                        codes,
                    }
                }
                TaskKind::MtCaption => TaskItem {
                    enc_text: None,
                    enc_image: true,
                    mask: None,
                    target: text_target(caption),
                    patches,
                    codes,
                },
                TaskKind::MtT2i => TaskItem {
                    enc_text: Some(caption.to_vec()),
                    enc_image: false,
                    mask: None,
                    target: image_target(model, &codes),
                    patches,
                    codes,
                },
            };
            Ok(item)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskBatch { kind, items })
}

/// Loss tensors for one batch, before mixing.
#[derive(Debug, Clone)]
pub struct TaskLosses {
    pub kind: TaskKind,
    /// Mean negative log-likelihood over all predicted positions.
    pub nll: Tensor,
    pub commitment: Option<Tensor>,
}

/// Encodes and teacher-forces a batch, returning its NLL and, for
/// image-target tasks, the commitment loss.
pub fn forward_batch(model: &DuVlgModel, batch: &TaskBatch, ctx: &mut ForwardCtx) -> Result<TaskLosses> {
    if batch.items.is_empty() {
        return Err(Error::Empty("task batch"));
    }
    let patches: Vec<&RawPatches> = batch.items.iter().map(|it| &it.patches).collect();
    let features = model.stacked_features(&patches)?.expect("non-empty batch");
    let uses_image = batch.items.iter().any(|it| it.enc_image);
    let enc_items: Vec<EncoderItem> = batch
        .items
        .iter()
        .map(|it| EncoderItem {
            text: it.enc_text.as_deref(),
            n_patches: it.enc_image.then(|| it.patches.len()),
            mask: it.mask.as_ref(),
        })
        .collect();
    let enc_features = if uses_image {
        if batch.items.iter().all(|it| it.enc_image) {
            Some(features.clone())
        } else {
            return Err(Error::Config("mixed image presence within one task batch".into()));
        }
    } else {
        None
    };
    let encoded = model.encode_batch(&enc_items, enc_features.as_ref(), ctx)?;
    let inputs: Vec<&[TokenId]> = batch.items.iter().map(TaskItem::decoder_input).collect();
    let logits = model.decode_batch(&inputs, &encoded, ctx)?;
    let labels: Vec<TokenId> = batch.items.iter().flat_map(|it| it.decoder_labels().iter().copied()).collect();
    let nll = ops::cross_entropy_logits(&logits, &labels, &vec![false; labels.len()])?;
    let commitment =
        if batch.kind.has_commitment() { Some(commitment_from_features(model, &features, batch)?) } else { None };
    Ok(TaskLosses { kind: batch.kind, nll, commitment })
}

fn commitment_from_features(model: &DuVlgModel, features: &Tensor, batch: &TaskBatch) -> Result<Tensor> {
    commitment_against(model, batch, &ops::stop_gradient(&ops::matmul(features, &model.patch_proj)?))
}

/// `‖target − visual_embed[code]‖²` averaged over the batch's patches, for
/// an explicit constant `target` `[Σn × d_model]`.
pub fn commitment_against(model: &DuVlgModel, batch: &TaskBatch, target: &Tensor) -> Result<Tensor> {
    let codes: Vec<usize> = batch.items.iter().flat_map(|it| it.codes.iter().copied()).collect();
    let embedded = ops::gather_rows(&model.visual_embed, &codes)?;
    ops::squared_error(target, &embedded)
}

/// The stop-gradient side of the commitment loss as a constant tensor.
pub fn commitment_target(model: &DuVlgModel, batch: &TaskBatch) -> Result<Tensor> {
    let patches: Vec<&RawPatches> = batch.items.iter().map(|it| &it.patches).collect();
    let features = model.stacked_features(&patches)?.ok_or(Error::Empty("task batch"))?;
    Ok(ops::stop_gradient(&ops::matmul(&features, &model.patch_proj)?))
}

fn expect_kind(batch: &TaskBatch, kind: TaskKind, loss: &'static str) -> Result<()> {
    if batch.kind == kind {
        Ok(())
    } else {
        Err(Error::TaskMismatch { loss, kind: batch.kind.name() })
    }
}

/// Visual-token NLL given masked image and clean text.
pub fn loss_dae_image(batch: &TaskBatch, model: &DuVlgModel) -> Result<Tensor> {
    expect_kind(batch, TaskKind::DaeImage, "dae_image")?;
    Ok(forward_batch(model, batch, &mut ForwardCtx::eval())?.nll)
}

/// Text NLL given infilled text and clean image.
pub fn loss_dae_text(batch: &TaskBatch, model: &DuVlgModel) -> Result<Tensor> {
    expect_kind(batch, TaskKind::DaeText, "dae_text")?;
    Ok(forward_batch(model, batch, &mut ForwardCtx::eval())?.nll)
}

/// Caption NLL given the image alone.
pub fn loss_mt_text(batch: &TaskBatch, model: &DuVlgModel) -> Result<Tensor> {
    expect_kind(batch, TaskKind::MtCaption, "mt_text")?;
    Ok(forward_batch(model, batch, &mut ForwardCtx::eval())?.nll)
}

/// Visual-token NLL given the text alone.
pub fn loss_mt_image(batch: &TaskBatch, model: &DuVlgModel) -> Result<Tensor> {
    expect_kind(batch, TaskKind::MtT2i, "mt_image")?;
    Ok(forward_batch(model, batch, &mut ForwardCtx::eval())?.nll)
}

/// Mean over patches of `‖sg[clean features · patch_proj] − visual_embed[code]‖²`.
pub fn loss_commitment(batch: &TaskBatch, model: &DuVlgModel) -> Result<Tensor> {
    if !batch.kind.has_commitment() {
        return Err(Error::TaskMismatch { loss: "commitment", kind: batch.kind.name() });
    }
    let patches: Vec<&RawPatches> = batch.items.iter().map(|it| &it.patches).collect();
    let features = model.stacked_features(&patches)?.ok_or(Error::Empty("task batch"))?;
    commitment_from_features(model, &features, batch)
}

/// The task's NLL plus `β·L_com` where the commitment loss applies. With
/// `frozen`, the commitment loss compares against that constant instead
/// of recomputing its stop-gradient side, which makes the value a function
/// whose true derivative equals the stop-gradient backward.
pub fn task_objective(model: &DuVlgModel, batch: &TaskBatch, beta: f64, frozen: Option<&Tensor>) -> Result<Tensor> {
    let out = forward_batch(model, batch, &mut ForwardCtx::eval())?;
    let com = match (out.commitment, frozen) {
        (None, _) => return Ok(out.nll),
        (Some(_), Some(target)) => commitment_against(model, batch, target)?,
        (Some(c), None) => c,
    };
    ops::add(&out.nll, &ops::scale(&com, beta))
}

/// Which loss families contribute to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub image: bool,
    pub text: bool,
    pub commitment: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { image: true, text: true, commitment: true }
    }
}

/// Individual loss terms; `None` marks an absent term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<V> {
    pub dae_image: Option<V>,
    pub dae_text: Option<V>,
    pub mt_image: Option<V>,
    pub mt_text: Option<V>,
    pub com: Option<V>,
}

impl<V> Default for LossTerms<V> {
    fn default() -> Self {
        Self { dae_image: None, dae_text: None, mt_image: None, mt_text: None, com: None }
    }
}

impl<V> LossTerms<V> {
    pub fn is_empty(&self) -> bool {
        self.dae_image.is_none()
            && self.dae_text.is_none()
            && self.mt_image.is_none()
            && self.mt_text.is_none()
            && self.com.is_none()
    }

    /// Drops the terms disabled by `flags`.
    pub fn filtered(self, flags: LossFlags) -> Self {
        let image = flags.image;
        Self {
            dae_image: self.dae_image.filter(|_| image),
            mt_image: self.mt_image.filter(|_| image),
            com: self.com.filter(|_| image && flags.commitment),
            dae_text: self.dae_text.filter(|_| flags.text),
            mt_text: self.mt_text.filter(|_| flags.text),
        }
    }
}

impl LossTerms<Tensor> {
    /// Places a batch's losses in their slots.
    pub fn from_losses(l: TaskLosses) -> Self {
        let mut t = Self::default();
        match l.kind {
            TaskKind::DaeImage => t.dae_image = Some(l.nll),
            TaskKind::DaeText => t.dae_text = Some(l.nll),
            TaskKind::MtCaption => t.mt_text = Some(l.nll),
            TaskKind::MtT2i => t.mt_image = Some(l.nll),
        }
        t.com = l.commitment;
        t
    }

    pub fn values(&self) -> LossTerms<f64> {
        let v = |t: &Option<Tensor>| t.as_ref().map(Tensor::item);
        LossTerms {
            dae_image: v(&self.dae_image),
            dae_text: v(&self.dae_text),
            mt_image: v(&self.mt_image),
            mt_text: v(&self.mt_text),
            com: v(&self.com),
        }
    }
}

/// Scalar losses of one step and their mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub terms: LossTerms<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub l_image: f64,
    pub l_text: f64,
    pub l_total: f64,
}

fn sum_present(xs: &[Option<f64>]) -> f64 {
    xs.iter().flatten().fold(0.0, |a, &x| a + x)
}

/// `l_image = dae_image + mt_image + β·com`, `l_text = dae_text + mt_text`,
/// `l_total = l_text + α·l_image`, each over the present terms.
pub fn total_loss(terms: LossTerms<f64>, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if terms.is_empty() {
        return Err(Error::NoLossTerms);
    }
    let l_image = sum_present(&[terms.dae_image, terms.mt_image, terms.com.map(|c| beta * c)]);
    let l_text = sum_present(&[terms.dae_text, terms.mt_text]);
    Ok(LossBreakdown { terms, alpha, beta, l_image, l_text, l_total: l_text + alpha * l_image })
}

/// The differentiable counterpart of [`total_loss`].
pub fn total_loss_tensor(terms: &LossTerms<Tensor>, alpha: f64, beta: f64) -> Result<Tensor> {
    if terms.is_empty() {
        return Err(Error::NoLossTerms);
    }
    let add = |acc: Option<Tensor>, t: Option<Tensor>| -> Result<Option<Tensor>> {
        Ok(match (acc, t) {
            (Some(a), Some(b)) => Some(ops::add(&a, &b)?),
            (a, b) => a.or(b),
        })
    };
    let image = add(terms.dae_image.clone(), terms.mt_image.clone())?;
    let image = add(image, terms.com.as_ref().map(|c| ops::scale(c, beta)))?;
    let text = add(terms.dae_text.clone(), terms.mt_text.clone())?;
    let image = image.map(|i| ops::scale(&i, alpha));
    Ok(add(text, image)?.expect("at least one term"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mixing_example() {
        let terms = LossTerms { dae_text: Some(1.0), dae_image: Some(1.5), mt_image: Some(0.5), ..Default::default() };
        let b = total_loss(terms, 0.05, 1.0).unwrap();
        assert!((b.l_total - 1.1).abs() < 1e-15);
        assert_eq!(b.l_image, 2.0);
    }

    #[test]
    fn alpha_zero_and_beta_zero() {
        let terms = LossTerms { mt_text: Some(0.7), mt_image: Some(3.0), com: Some(9.0), ..Default::default() };
        assert_eq!(total_loss(terms, 0.0, 1.0).unwrap().l_total, 0.7);
        assert_eq!(total_loss(terms, 1.0, 0.0).unwrap().l_image, 3.0);
    }

    #[test]
    fn no_terms_is_an_error() {
        assert!(matches!(total_loss(LossTerms::default(), 0.05, 1.0), Err(Error::NoLossTerms)));
        let t: LossTerms<Tensor> = LossTerms::default();
        assert!(matches!(total_loss_tensor(&t, 0.05, 1.0), Err(Error::NoLossTerms)));
    }

    #[test]
    fn tensor_mixture_matches_scalar() {
        let s = |v: f64| Some(Tensor::scalar(v));
        let t = LossTerms { dae_image: s(1.25), dae_text: None, mt_image: None, mt_text: s(0.5), com: s(0.75) };
        let want = total_loss(t.values(), 0.05, 2.0).unwrap().l_total;
        assert!((total_loss_tensor(&t, 0.05, 2.0).unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn flags_drop_families() {
        let t = LossTerms { dae_image: Some(1.0), com: Some(1.0), dae_text: Some(1.0), ..Default::default() };
        let no_img = t.filtered(LossFlags { image: false, ..Default::default() });
        assert!(no_img.dae_image.is_none() && no_img.com.is_none() && no_img.dae_text.is_some());
        let no_com = t.filtered(LossFlags { commitment: false, ..Default::default() });
        assert!(no_com.com.is_none() && no_com.dae_image.is_some());
        let no_txt = t.filtered(LossFlags { text: false, ..Default::default() });
        assert!(no_txt.dae_text.is_none());
    }

    #[test]
    fn sampler_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert!(sample_task(&mut rng, 1.0).is_dae());
            assert!(!sample_task(&mut rng, 0.0).is_dae());
        }
    }

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
        }
    }
}
