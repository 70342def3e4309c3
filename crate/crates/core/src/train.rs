//! Pre-training and fine-tuning loops.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, no_grad, ops};
use crate::data::PairedExample;
use crate::error::{Error, Result};
use crate::model::{DuVlgModel, ForwardCtx};
use crate::objectives::{
    build_task_batch, forward_batch, sample_task, total_loss, total_loss_tensor, CorruptionConfig, LossBreakdown,
    LossFlags, LossTerms, TaskKind,
};
use crate::optim::{Adam, AdamConfig};
use crate::Tensor;

/// Learning rate for text-to-image fine-tuning.
pub const FINETUNE_LR_T2I: f64 = 1e-4;
/// Learning rate for caption fine-tuning.
pub const FINETUNE_LR_CAPTION: f64 = 3e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub alpha: f64,
    pub beta: f64,
    pub p_dae: f64,
    pub batch_size: usize,
    pub corruption: CorruptionConfig,
    pub flags: LossFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            alpha: 0.05,
            beta: 1.0,
            p_dae: 0.6,
            batch_size: 16,
            corruption: CorruptionConfig::default(),
            flags: LossFlags::default(),
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DuVlgModel,
    pub optim: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: DuVlgModel, adam: AdamConfig, seed: u64) -> Self {
        let optim = Adam::new(adam, &model.parameters());
        Self { model, optim, rng: ChaCha8Rng::seed_from_u64(seed), step: 0 }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    /// Kinds present in the step, in [`TaskKind::ALL`] order.
    pub tasks: Vec<TaskKind>,
    /// `None` when every term of the sampled tasks was disabled and no
    /// update was made.
    pub breakdown: Option<LossBreakdown>,
    pub grad_norm: Option<f64>,
}

impl fmt::Display for StepLog {
    /// `step  task  l_total  l_text  l_image  l_com  grad_norm`, tab-separated;
    /// several tasks join with `+`; absent values print as `-`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let b = self.breakdown.as_ref();
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            tasks.join("+"),
            num(b.map(|b| b.l_total)),
            num(b.filter(|b| b.terms.dae_text.is_some() || b.terms.mt_text.is_some()).map(|b| b.l_text)),
            num(b
                .filter(|b| b.terms.dae_image.is_some() || b.terms.mt_image.is_some() || b.terms.com.is_some())
                .map(|b| b.l_image)),
            num(b.and_then(|b| b.terms.com)),
            num(self.grad_norm),
        )
    }
}

pub const LOG_HEADER: &str = "step\ttask\tl_total\tl_text\tl_image\tl_com\tgrad_norm";

fn present_terms(kinds: &[TaskKind]) -> LossTerms<()> {
    let has = |k: TaskKind| kinds.contains(&k).then_some(());
    LossTerms {
        dae_image: has(TaskKind::DaeImage),
        dae_text: has(TaskKind::DaeText),
        mt_image: has(TaskKind::MtT2i),
        mt_text: has(TaskKind::MtCaption),
        com: kinds.iter().any(|k| k.has_commitment()).then_some(()),
    }
}

/// One optimization step over homogeneous sub-batches, mixing with `alpha`.
/// The commitment term is pooled over every commitment patch of the step.
fn step_on(
    state: &mut TrainState,
    groups: &[(TaskKind, Vec<&PairedExample>)],
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<StepLog> {
    let batches = groups
        .iter()
        .map(|(kind, examples)| build_task_batch(examples, *kind, &state.model, &cfg.corruption, &mut state.rng))
        .collect::<Result<Vec<_>>>()?;
    // Drawn unconditionally so skipped steps consume the same randomness.
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(state.rng.random());
    state.step += 1;
    let tasks: Vec<TaskKind> = groups.iter().map(|g| g.0).collect();
    if present_terms(&tasks).filtered(cfg.flags).is_empty() {
        return Ok(StepLog { step: state.step, tasks, breakdown: None, grad_norm: None });
    }
    let dropout = state.model.config().dropout;
    let mut ctx = ForwardCtx::train(dropout, &mut dropout_rng);
    let mut terms = LossTerms::<Tensor>::default();
    let mut com_parts = Vec::new();
    for batch in &batches {
        let out = forward_batch(&state.model, batch, &mut ctx)?;
        if let Some(c) = out.commitment {
            com_parts.push((c, batch.items.iter().map(|it| it.codes.len()).sum::<usize>()));
        }
        let slot = match batch.kind {
            TaskKind::DaeImage => &mut terms.dae_image,
            TaskKind::DaeText => &mut terms.dae_text,
            TaskKind::MtCaption => &mut terms.mt_text,
            TaskKind::MtT2i => &mut terms.mt_image,
        };
        *slot = Some(out.nll);
    }
    let total_patches: usize = com_parts.iter().map(|p| p.1).sum();
    terms.com = com_parts
        .into_iter()
        .map(|(c, n)| ops::scale(&c, n as f64 / total_patches as f64))
        .reduce(|a, b| ops::add(&a, &b).expect("scalar shapes"));
    let terms = terms.filtered(cfg.flags);
    let loss = total_loss_tensor(&terms, alpha, cfg.beta)?;
    let params = state.model.parameters();
    state.model.zero_grad();
    backward(&loss)?;
    let grad_norm = state.optim.step(&params)?;
    let breakdown = total_loss(terms.values(), alpha, cfg.beta)?;
    Ok(StepLog { step: state.step, tasks, breakdown: Some(breakdown), grad_norm: Some(grad_norm) })
}

/// Runs `steps` pre-training steps. Each step draws `batch_size` examples
/// with replacement, samples a task per example, groups them by task into
/// sub-batches, mixes the losses and updates.
pub fn pretrain(
    state: &mut TrainState,
    data: &[PairedExample],
    steps: usize,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut logs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut groups: Vec<(TaskKind, Vec<&PairedExample>)> = TaskKind::ALL.iter().map(|&k| (k, Vec::new())).collect();
        for _ in 0..cfg.batch_size {
            let kind = sample_task(&mut state.rng, cfg.p_dae);
            let example = &data[state.rng.random_range(0..data.len())];
            groups.iter_mut().find(|g| g.0 == kind).expect("every kind has a group").1.push(example);
        }
        groups.retain(|g| !g.1.is_empty());
        let log = step_on(state, &groups, cfg, cfg.alpha)?;
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Single-task training over shuffled epochs at learning rate `lr`. The
/// task loss is unweighted; image-target tasks keep `β·L_com`.
pub fn finetune(
    state: &mut TrainState,
    data: &[PairedExample],
    task: TaskKind,
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if !matches!(task, TaskKind::MtCaption | TaskKind::MtT2i) {
        return Err(Error::Config(format!("fine-tuning supports mt_caption and mt_t2i, not {task}")));
    }
    if data.is_empty() {
        return Err(Error::Empty("fine-tuning data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    state.optim.cfg.lr = lr;
    let cfg = TrainConfig { flags: LossFlags::default(), ..*cfg };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::new();
    for _ in 0..epochs {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PairedExample> = chunk.iter().map(|&i| &data[i]).collect();
            let log = step_on(state, &[(task, batch)], &cfg, 1.0)?;
            on_step(&log);
            logs.push(log);
        }
    }
    Ok(logs)
}

/// Teacher-forced NLL of `kind`'s targets, pooled over every predicted
/// position of `data`. Corruption is drawn from `seed`.
pub fn evaluate_nll(
    model: &DuVlgModel,
    data: &[PairedExample],
    kind: TaskKind,
    corruption: &CorruptionConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let _guard = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&PairedExample> = chunk.iter().collect();
        let batch = build_task_batch(&refs, kind, model, corruption, &mut rng)?;
        let n: usize = batch.items.iter().map(|it| it.target.len() - 1).sum();
        let out = forward_batch(model, &batch, &mut ForwardCtx::eval())?;
        sum += out.nll.item() * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RunConfig;

    #[test]
    fn log_line_marks_absent_values() {
        let terms = LossTerms { mt_text: Some(0.5), ..Default::default() };
        let log = StepLog {
            step: 3,
            tasks: vec![TaskKind::MtCaption],
            breakdown: Some(total_loss(terms, 0.05, 1.0).unwrap()),
            grad_norm: Some(1.25),
        };
        assert_eq!(log.to_string(), "3\tmt_caption\t0.500000\t0.500000\t-\t-\t1.250000");
        let skipped =
            StepLog { step: 4, tasks: vec![TaskKind::DaeImage, TaskKind::MtT2i], breakdown: None, grad_norm: None };
        assert_eq!(skipped.to_string(), "4\tdae_image+mt_t2i\t-\t-\t-\t-\t-");
        assert_eq!(LOG_HEADER.split('\t').count(), log.to_string().split('\t').count());
    }

    #[test]
    fn present_terms_follow_tasks() {
        let t = present_terms(&[TaskKind::DaeText, TaskKind::MtT2i]);
        assert!(t.dae_text.is_some() && t.mt_image.is_some() && t.com.is_some());
        assert!(t.dae_image.is_none() && t.mt_text.is_none());
        assert!(present_terms(&[TaskKind::MtCaption]).com.is_none());
    }

    #[test]
    fn skipped_step_consumes_the_same_randomness() {
        let cfg = RunConfig { n_train: 8, batch_size: 2, ..RunConfig::default() };
        let model = cfg.build_model().unwrap();
        let data = cfg.dataset(&model.codec_arc()).unwrap();
        let refs: Vec<&PairedExample> = data.iter().take(2).collect();
        let groups = [(TaskKind::MtT2i, refs)];
        let mut live = TrainState::new(model.clone(), cfg.adam(), 1);
        let mut skip = TrainState::new(cfg.build_model().unwrap(), cfg.adam(), 1);
        let tc = cfg.train_config();
        let off = TrainConfig { flags: LossFlags { image: false, ..Default::default() }, ..tc };
        assert!(step_on(&mut live, &groups, &tc, 0.05).unwrap().breakdown.is_some());
        let log = step_on(&mut skip, &groups, &off, 0.05).unwrap();
        assert!(log.breakdown.is_none() && log.grad_norm.is_none());
        assert_eq!(live.rng.random::<u64>(), skip.rng.random::<u64>());
        assert_eq!((live.step, skip.step), (1, 1));
        assert_eq!(skip.optim.step, 0);
    }

    #[test]
    fn finetune_rejects_denoising_tasks() {
        let cfg = RunConfig { n_train: 4, ..RunConfig::default() };
        let model = cfg.build_model().unwrap();
        let data = cfg.dataset(&model.codec_arc()).unwrap();
        let mut s = TrainState::new(model, cfg.adam(), 0);
        assert!(finetune(&mut s, &data, TaskKind::DaeText, 1, 1e-4, &cfg.train_config(), |_| {}).is_err());
    }
}
