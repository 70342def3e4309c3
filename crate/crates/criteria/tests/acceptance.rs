//! One line per acceptance criterion. Exits nonzero when any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{chi_square_p, draw_counts, exhaustive, HashScorer, SPAN_MEAN_BAND};
use duvlg::autodiff::backward;
use duvlg::checkpoint::Checkpoint;
use duvlg::codec::{CodecConfig, ImageGrid, VisionCodec, VisualTokenSeq};
use duvlg::corruption::{blockwise_mask, span_infill, BlockParams};
use duvlg::data::split_indices;
use duvlg::data::vocab::{BOI, BOS, EOI, EOS};
use duvlg::decode::{beam_search, caption, generate_image, DecodeConfig, SampleFilter, SearchSpec, Strategy};
use duvlg::model::{EncoderItem, ForwardCtx};
use duvlg::objectives::{build_task_batch, build_task_batch_from, loss_commitment, total_loss, LossTerms, TaskKind};
use duvlg::train::{evaluate_nll, pretrain, TrainState};
use duvlg::verify::{task_gradient_reports, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use duvlg::{DuVlgModel, ModelConfig, RunConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn gradient_integrity() -> Outcome {
    let mut worst: f64 = 0.0;
    for (kind, r) in task_gradient_reports(0, 1.0, GRADCHECK_STEP).map_err(|e| e.to_string())? {
        ensure!(r.max_rel_error < GRADCHECK_TOLERANCE, "{kind}: max rel error {:.3e}", r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("worst max rel error {worst:.2e}"))
}

fn all_zero(g: Option<Vec<f64>>) -> bool {
    g.is_none_or(|g| g.iter().all(|&x| x == 0.0))
}

fn stop_gradient_contract() -> Outcome {
    let cfg = RunConfig { n_train: 8, ..RunConfig::default() };
    let codec = cfg.codec().unwrap();
    let data = cfg.dataset(&codec).unwrap();
    let model = DuVlgModel::init(cfg.model_config(), Arc::new(codec.with_trainable_featurizer().unwrap()), 1).unwrap();
    let refs: Vec<_> = data.iter().take(4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [TaskKind::DaeImage, TaskKind::MtT2i] {
        let batch = build_task_batch(&refs, kind, &model, &Default::default(), &mut rng).unwrap();
        model.zero_grad();
        backward(&loss_commitment(&batch, &model).unwrap()).unwrap();
        let f = &model.codec().featurizer;
        ensure!(all_zero(f.weight.grad()) && all_zero(f.bias.grad()), "{kind}: featurizer gradient");
        ensure!(all_zero(model.patch_proj.grad()), "{kind}: patch_proj gradient");
        let d = cfg.d_model;
        let g = model.visual_embed.grad().unwrap_or_default();
        for it in &batch.items {
            for &c in &it.codes {
                ensure!(g[c * d..(c + 1) * d].iter().any(|&x| x != 0.0), "{kind}: visual row {c} has zero gradient");
            }
        }
    }
    Ok("featurizer and patch_proj exactly zero; batch rows nonzero".into())
}

fn mixing_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alphas = [0.0, 0.05, 0.5, 1.0, 3.0];
    let betas = [0.0, 0.25, 1.0, 2.0];
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let mut draw = || rng.random_bool(0.7).then(|| rng.random_range(0.0..10.0));
        let terms = LossTerms { dae_image: draw(), dae_text: draw(), mt_image: draw(), mt_text: draw(), com: draw() };
        let terms = if terms.is_empty() { LossTerms { mt_text: Some(1.0), ..terms } } else { terms };
        let (alpha, beta) = (alphas[i % alphas.len()], betas[(i / alphas.len()) % betas.len()]);
        let z = |v: Option<f64>| v.unwrap_or(0.0);
        let want = z(terms.dae_text)
            + z(terms.mt_text)
            + alpha * (z(terms.dae_image) + z(terms.mt_image) + beta * z(terms.com));
        let got = total_loss(terms, alpha, beta).map_err(|e| e.to_string())?.l_total;
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-12, "case {i}: {got} vs {want}");
    }
    Ok(format!("1000 cases, max deviation {worst:.1e}"))
}

fn overfit() -> Outcome {
    let cfg = RunConfig { n_train: 32, steps: 500, lr: 3e-4, ..RunConfig::default() };
    let model = cfg.build_model().unwrap();
    let data = cfg.dataset(&model.codec_arc()).unwrap();
    let tc = cfg.train_config();
    let nlls = |m: &DuVlgModel| -> Vec<f64> {
        TaskKind::ALL.iter().map(|&k| evaluate_nll(m, &data, k, &tc.corruption, 32, 7).unwrap()).collect()
    };
    let before = nlls(&model);
    let mut state = TrainState::new(model, cfg.adam(), cfg.seed);
    pretrain(&mut state, &data, cfg.steps, &tc, |_| {}).unwrap();
    let after = nlls(&state.model);
    let decode = cfg.caption_decode();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let exact =
        data.iter().filter(|ex| caption(&state.model, &ex.image, &decode, &mut rng).unwrap() == ex.caption).count();
    let ratios: Vec<String> = TaskKind::ALL
        .iter()
        .zip(before.iter().zip(&after))
        .map(|(k, (b, a))| format!("{k} {a:.3}/{b:.3}={:.3}", a / b))
        .collect();
    let summary = format!("{}; exact match {exact}/32", ratios.join(", "));
    let nll_ok = before.iter().zip(&after).all(|(b, a)| a / b < 0.1);
    ensure!(nll_ok && exact * 10 >= 32 * 9, "{summary}");
    Ok(summary)
}

const ABLATION_SEEDS: u64 = 5;
const ABLATION_STEPS: usize = 1000;
const ABLATION_IMAGE_SIZE: usize = 16;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Held-out `(caption NLL, image NLL)` after pre-training with `variant`.
fn ablation_run(seed: u64, variant: &str) -> (f64, f64) {
    let mut cfg = RunConfig {
        n_train: 2000,
        image_size: ABLATION_IMAGE_SIZE,
        seed,
        data_seed: 100 + seed,
        ..RunConfig::default()
    };
    if !variant.is_empty() {
        cfg.set(variant, "true").unwrap();
    }
    let model = cfg.build_model().unwrap();
    let data = cfg.dataset(&model.codec_arc()).unwrap();
    let (train_idx, val_idx) = split_indices(data.len());
    let train: Vec<_> = train_idx.iter().map(|&i| data[i].clone()).collect();
    let val: Vec<_> = val_idx.iter().map(|&i| data[i].clone()).collect();
    let tc = cfg.train_config();
    let mut state = TrainState::new(model, cfg.adam(), cfg.seed);
    pretrain(&mut state, &train, ABLATION_STEPS, &tc, |_| {}).unwrap();
    let nll = |k| evaluate_nll(&state.model, &val, k, &tc.corruption, 32, 9).unwrap();
    (nll(TaskKind::MtCaption), nll(TaskKind::MtT2i))
}

fn ablation() -> Outcome {
    let variants = ["", "no_image_loss", "no_text_loss", "no_commitment"];
    let mut cap = vec![Vec::new(); variants.len()];
    let mut img = vec![Vec::new(); variants.len()];
    for seed in 0..ABLATION_SEEDS {
        for (v, name) in variants.iter().enumerate() {
            let (c, i) = ablation_run(seed, name);
            cap[v].push(c);
            img[v].push(i);
        }
    }
    let cap: Vec<f64> = cap.into_iter().map(median).collect();
    let img: Vec<f64> = img.into_iter().map(median).collect();
    let summary = format!(
        "median caption NLL full {:.4} vs no_image_loss {:.4}; median image NLL full {:.4} vs no_text_loss {:.4} vs no_commitment {:.4}",
        cap[0], cap[1], img[0], img[2], img[3]
    );
    ensure!(cap[0] <= cap[1] && img[0] <= img[2] && img[3] >= img[0], "{summary}");
    Ok(summary)
}

fn corruption_statistics() -> Outcome {
    let p = BlockParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let upper = 0.5 + p.max_block as f64 / 196.0;
    for trial in 0..1000 {
        let f = blockwise_mask(14, 14, 0.5, &p, &mut rng).fraction();
        ensure!((0.5..=upper).contains(&f), "block trial {trial}: fraction {f}");
    }
    let mut tokens = vec![BOS];
    tokens.extend((0..20).map(|i| 8 + i % 17));
    tokens.push(EOS);
    let (mut total, mut spans) = (0usize, 0usize);
    for trial in 0..1000 {
        let c = span_infill(&tokens, 0.5, 3.0, &mut rng).map_err(|e| e.to_string())?;
        ensure!(c.covered * 2 >= 20, "span trial {trial}: covered {}", c.covered);
        total += c.spans.iter().map(|s| s.1).sum::<usize>();
        spans += c.spans.len();
    }
    let mean = total as f64 / spans as f64;
    ensure!((SPAN_MEAN_BAND.0..=SPAN_MEAN_BAND.1).contains(&mean), "mean span {mean:.4} outside {SPAN_MEAN_BAND:?}");
    Ok(format!("mask fractions in [0.5, {upper:.4}]; mean span {mean:.4}"))
}

fn quantizer_round_trip() -> Outcome {
    let cfg = RunConfig::default();
    let codec = cfg.codec().unwrap();
    let k = cfg.codebook_size;
    for t in 0..k {
        let seq = VisualTokenSeq(vec![t]);
        let img = codec.decode_tokens(&seq, (1, 1)).unwrap();
        ensure!(codec.tokenize_image(&img).unwrap() == seq, "token {t}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for g in 0..100 {
        let (rows, cols) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let seq = VisualTokenSeq((0..rows * cols).map(|_| rng.random_range(0..k)).collect());
        let img = codec.decode_tokens(&seq, (rows, cols)).unwrap();
        ensure!(codec.tokenize_image(&img).unwrap() == seq, "grid {g} ({rows}x{cols})");
    }
    Ok(format!("{k} tokens and 100 grids"))
}

fn decoding_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..100 {
        let vocab = rng.random_range(2..=12);
        let max_len = rng.random_range(1..=4);
        let eos = rng.random_bool(0.7).then(|| rng.random_range(0..vocab));
        let s = HashScorer { vocab, seed: case };
        let spec = SearchSpec { prefix: &[0], eos, max_len, allowed: None };
        let mut best = None;
        exhaustive(&s, &spec, &mut vec![0], 0.0, &mut best);
        let best = best.expect("nonempty search");
        let beam = beam_search(&s, &spec, vocab.pow(max_len as u32), 1.0).map_err(|e| e.to_string())?;
        ensure!(beam.tokens == best.tokens, "case {case}: beam {:?} vs exhaustive {:?}", beam.tokens, best.tokens);
    }
    let nucleus = draw_counts(SampleFilter::TopP(0.7), 1);
    ensure!(nucleus[3..].iter().all(|&c| c == 0), "nucleus support {nucleus:?}");
    let p_nucleus = chi_square_p(&nucleus, &[0, 1, 2]);
    let top_k = draw_counts(SampleFilter::TopK(4), 2);
    ensure!(top_k[4..].iter().all(|&c| c == 0), "top-k support {top_k:?}");
    let p_top_k = chi_square_p(&top_k, &[0, 1, 2, 3]);
    ensure!(p_nucleus > 0.001 && p_top_k > 0.001, "chi-square p nucleus {p_nucleus:.4}, top-k {p_top_k:.4}");
    Ok(format!("100 beam cases exact; chi-square p nucleus {p_nucleus:.3}, top-k {p_top_k:.3}"))
}

fn checkpoint_after(cfg: &RunConfig, splits: &[usize]) -> Vec<u8> {
    let model = cfg.build_model().unwrap();
    let data = cfg.dataset(&model.codec_arc()).unwrap();
    let mut state = TrainState::new(model, cfg.adam(), cfg.seed);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    for &steps in splits {
        pretrain(&mut state, &data, steps, &cfg.train_config(), |_| {}).unwrap();
        duvlg::checkpoint::save_checkpoint(&path, &state, cfg).unwrap();
        state = duvlg::checkpoint::load_checkpoint(&path).unwrap().into_state().unwrap().1;
    }
    Checkpoint::capture(&state, cfg).to_bytes()
}

fn determinism_and_persistence() -> Outcome {
    let cfg = RunConfig { n_train: 32, batch_size: 8, ..RunConfig::default() };
    let a = checkpoint_after(&cfg, &[100]);
    ensure!(a == checkpoint_after(&cfg, &[100]), "same seed gave different checkpoints");
    ensure!(a == checkpoint_after(&cfg, &[50, 50]), "resumed run differs from straight-through run");
    Ok(format!("{} checkpoint bytes identical across reruns and resume", a.len()))
}

fn shape_ledger() -> Outcome {
    let codec = Arc::new(
        VisionCodec::new(&CodecConfig { patch_size: 16, d_feat: 4, d_code: 4, codebook_size: 16, seed: 5 }).unwrap(),
    );
    let cfg = ModelConfig {
        d_model: 8,
        n_layers_enc: 1,
        n_layers_dec: 1,
        n_heads: 2,
        d_ff: 16,
        text_vocab: 17,
        visual_vocab: 16,
        max_text_len: 8,
        max_patches: 576,
        d_feat: 4,
        dropout: 0.0,
    };
    let model = DuVlgModel::init(cfg, codec, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let words: Vec<TokenId> = vec![8, 9, 10];
    for (size, n) in [(224, 196), (384, 576)] {
        let image = ImageGrid::filled(size, size, 0.25).unwrap();
        let patches = model.codec().extract(&image).unwrap();
        ensure!(patches.len() == n, "{size}: {} patches", patches.len());
        let features = model.stacked_features(&[&patches]).unwrap();
        let item = EncoderItem { text: None, n_patches: Some(n), mask: None };
        let enc = model.encode_batch(&[item], features.as_ref(), &mut ForwardCtx::eval()).unwrap();
        ensure!(enc.states.rows() == n + 1, "{size}: encoder length {}", enc.states.rows());
        let batch = build_task_batch_from(
            &[(&image, words.as_slice())],
            TaskKind::MtT2i,
            &model,
            &Default::default(),
            &mut rng,
        )
        .unwrap();
        let target = &batch.items[0].target;
        let visual = target.iter().filter(|&&t| model.tokens().is_visual(t)).count();
        ensure!(visual == n && target.len() == n + 2, "{size}: target has {visual} visual tokens");
        ensure!(target[0] == BOI && target[n + 1] == EOI, "{size}: target not bracketed");
    }
    for (grid, strategy) in [((14, 14), Strategy::Nucleus), ((24, 24), Strategy::Greedy), ((3, 5), Strategy::TopK)] {
        let dc = DecodeConfig { strategy, n_samples: 2, k: 5, ..DecodeConfig::default() };
        for g in generate_image(&model, &words, grid, &dc, &mut rng).unwrap() {
            let n = grid.0 * grid.1;
            ensure!(g.tokens.len() == n + 2 && g.tokens[0] == BOI && g.tokens[n + 1] == EOI, "{grid:?}: not bracketed");
            ensure!(g.tokens[1..=n].iter().all(|&t| model.tokens().is_visual(t)), "{grid:?}: non-visual token");
        }
    }
    Ok("196 and 576 patches; generated images bracketed with n visual tokens".into())
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "gradient integrity", budget: Duration::from_secs(60), run: gradient_integrity },
        Criterion { id: 2, name: "stop-gradient contract", budget: Duration::MAX, run: stop_gradient_contract },
        Criterion { id: 3, name: "loss-mixing identities", budget: Duration::MAX, run: mixing_identities },
        Criterion { id: 4, name: "overfit 32 pairs", budget: Duration::from_secs(300), run: overfit },
        Criterion { id: 5, name: "dual-vs-uni ablation", budget: Duration::from_secs(1800), run: ablation },
        Criterion { id: 6, name: "corruption statistics", budget: Duration::MAX, run: corruption_statistics },
        Criterion { id: 7, name: "quantizer round trip", budget: Duration::MAX, run: quantizer_round_trip },
        Criterion { id: 8, name: "decoding correctness", budget: Duration::MAX, run: decoding_correctness },
        Criterion {
            id: 9,
            name: "determinism and persistence",
            budget: Duration::MAX,
            run: determinism_and_persistence,
        },
        Criterion { id: 10, name: "shape ledger", budget: Duration::MAX, run: shape_ledger },
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > c.budget => {
                Err(format!("took {:.1} s, budget {} s", elapsed.as_secs_f64(), c.budget.as_secs()))
            }
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        println!("{tag} {:>2} {:<28} {:>7.1} s  {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
