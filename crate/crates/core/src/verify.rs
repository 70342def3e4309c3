//! Finite-difference verification of every task objective on a tiny model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_gradients, GradCheckReport};
use crate::codec::{CodecConfig, ImageGrid, VisionCodec};
use crate::data::synth::grammar_vocab;
use crate::data::vocab::N_SPECIAL;
use crate::error::Result;
use crate::model::{DuVlgModel, ModelConfig};
use crate::objectives::{build_task_batch_from, commitment_target, task_objective, CorruptionConfig, TaskKind};
use crate::TokenId;

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Acceptance bound on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Width 8, one layer each side, two heads, three patches, four words.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers_enc: 1,
        n_layers_dec: 1,
        n_heads: 2,
        d_ff: 16,
        text_vocab: grammar_vocab().n_words(),
        visual_vocab: 12,
        max_text_len: 4,
        max_patches: 3,
        d_feat: 6,
        dropout: 0.0,
    }
}

pub fn tiny_codec(cfg: &ModelConfig, seed: u64) -> Result<Arc<VisionCodec>> {
    Ok(Arc::new(VisionCodec::new(&CodecConfig {
        patch_size: 2,
        d_feat: cfg.d_feat,
        d_code: 4,
        codebook_size: cfg.visual_vocab,
        seed,
    })?))
}

/// Tiny model with every parameter redrawn from `U[−1, 1]`, plus two
/// random `(image, caption)` pairs. Images are `2×6` pixels, i.e. one row
/// of three patches.
pub fn tiny_setup(seed: u64) -> Result<(DuVlgModel, Vec<(ImageGrid, Vec<TokenId>)>)> {
    let cfg = tiny_config();
    let model = DuVlgModel::init(cfg, tiny_codec(&cfg, seed)?, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in model.parameters() {
        p.update(|v| v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..=1.0)));
    }
    let pairs = (0..2)
        .map(|_| {
            let pixels = (0..2 * 6 * 3).map(|_| rng.random::<f64>()).collect();
            let caption = (0..cfg.max_text_len).map(|_| N_SPECIAL + rng.random_range(0..cfg.text_vocab)).collect();
            Ok((ImageGrid::new(2, 6, pixels)?, caption))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, pairs))
}

/// Gradient check of every task objective (`NLL + β·L_com`) against all
/// trainable parameters. The commitment target is held at its unperturbed
/// value, as the stop-gradient prescribes.
pub fn task_gradient_reports(seed: u64, beta: f64, h: f64) -> Result<Vec<(TaskKind, GradCheckReport)>> {
    let (model, pairs) = tiny_setup(seed)?;
    let refs: Vec<(&ImageGrid, &[TokenId])> = pairs.iter().map(|(i, c)| (i, c.as_slice())).collect();
    let params: Vec<_> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TaskKind::ALL
        .iter()
        .map(|&kind| {
            let batch = build_task_batch_from(&refs, kind, &model, &CorruptionConfig::default(), &mut rng)?;
            let frozen = if kind.has_commitment() { Some(commitment_target(&model, &batch)?) } else { None };
            let report = check_gradients(|| task_objective(&model, &batch, beta, frozen.as_ref()), &params, h)?;
            Ok((kind, report))
        })
        .collect()
}
