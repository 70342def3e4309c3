//! Decoding: greedy, beam search, nucleus and top-k sampling, image
//! generation and cycle-consistency reranking.
//!
//! Search routines work against any [`StepScorer`], so they can be checked
//! against exhaustive enumeration on tiny hand-built models.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{no_grad, ops};
use crate::codec::{ImageGrid, VisualTokenSeq};
use crate::data::vocab::{BOI, BOS, EOI, EOS};
use crate::error::{Error, Result};
use crate::model::{DuVlgModel, Encoded, EncoderItem, ForwardCtx};
use crate::objectives::text_target;
use crate::{Tensor, TokenId};

/// Scores within this distance count as tied.
pub const SCORE_TIE_TOL: f64 = 1e-12;
/// Slack on the cumulative-mass test of nucleus sampling.
pub const NUCLEUS_TOL: f64 = 1e-12;

/// Next-token log-probabilities for a batch of prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>>;
}

/// Numerically stable `log_softmax` of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// A trained model conditioned on one example's encoder states.
pub struct ModelScorer<'a> {
    model: &'a DuVlgModel,
    states: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a DuVlgModel, states: Tensor) -> Self {
        Self { model, states }
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.tokens().total()
    }

    fn next_log_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let _guard = no_grad();
        let enc = Encoded { states: self.states.clone(), segments: vec![0..self.states.rows(); prefixes.len()] };
        let logits = self.model.decode_batch(prefixes, &enc, &mut ForwardCtx::eval())?;
        let data = logits.data();
        let v = logits.cols();
        let mut row = 0;
        Ok(prefixes
            .iter()
            .map(|p| {
                row += p.len();
                log_softmax(&data[(row - 1) * v..row * v])
            })
            .collect())
    }
}

/// What a search may emit.
#[derive(Debug, Clone, Copy)]
pub struct SearchSpec<'a> {
    /// Tokens fed before anything is generated.
    pub prefix: &'a [TokenId],
    /// Generation stops after this token, when given.
    pub eos: Option<TokenId>,
    /// Maximum generated tokens, the end token included.
    pub max_len: usize,
    /// Tokens allowed at every step; `None` allows all. Log-probabilities
    /// are renormalized over the allowed set.
    pub allowed: Option<&'a [bool]>,
}

fn restricted(lp: &[f64], allowed: Option<&[bool]>) -> Vec<f64> {
    match allowed {
        None => lp.to_vec(),
        Some(mask) => {
            let masked: Vec<f64> =
                lp.iter().zip(mask).map(|(&l, &ok)| if ok { l } else { f64::NEG_INFINITY }).collect();
            log_softmax(&masked)
        }
    }
}

/// A finished or partial sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without the prefix.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// `log_prob / len^length_penalty`.
    pub score: f64,
}

fn normalized(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_penalty)
}

/// Higher score first; within [`SCORE_TIE_TOL`] the lexicographically
/// smaller sequence wins.
pub fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    if (a.score - b.score).abs() <= SCORE_TIE_TOL {
        a.tokens < b.tokens
    } else {
        a.score > b.score
    }
}

fn best_of(hyps: Vec<Hypothesis>) -> Option<Hypothesis> {
    hyps.into_iter().reduce(|best, h| if better(&h, &best) { h } else { best })
}

fn check_spec(spec: &SearchSpec, vocab: usize) -> Result<()> {
    if spec.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    if let Some(mask) = spec.allowed {
        if mask.len() != vocab || !mask.iter().any(|&m| m) {
            return Err(Error::Config("allowed-token mask is empty or mis-sized".into()));
        }
    }
    Ok(())
}

fn argmax(xs: &[f64]) -> usize {
    // First maximum, so ties go to the lowest id.
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, spec: &SearchSpec, length_penalty: f64) -> Result<Hypothesis> {
    check_spec(spec, scorer.vocab_size())?;
    let mut seq = spec.prefix.to_vec();
    let mut log_prob = 0.0;
    for _ in 0..spec.max_len {
        let lp = restricted(&scorer.next_log_probs(&[&seq])?[0], spec.allowed);
        let t = argmax(&lp);
        log_prob += lp[t];
        seq.push(t);
        if Some(t) == spec.eos {
            break;
        }
    }
    let tokens = seq.split_off(spec.prefix.len());
    let score = normalized(log_prob, tokens.len(), length_penalty);
    Ok(Hypothesis { tokens, log_prob, score })
}

/// Beam search over length-normalized log-probability. The greedy sequence
/// is always a candidate, so the result never scores below it.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &S,
    spec: &SearchSpec,
    beam_size: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let greedy_hyp = greedy(scorer, spec, length_penalty)?;
    if beam_size == 1 {
        return Ok(greedy_hyp);
    }
    let mut finished = vec![greedy_hyp];
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, score: 0.0 }];
    for step in 1..=spec.max_len {
        if live.is_empty() {
            break;
        }
        let seqs: Vec<Vec<TokenId>> =
            live.iter().map(|h| spec.prefix.iter().chain(&h.tokens).copied().collect()).collect();
        let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
        let lps = scorer.next_log_probs(&refs)?;
        let mut next = Vec::new();
        for (h, lp) in live.iter().zip(lps) {
            let lp = restricted(&lp, spec.allowed);
            for (t, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let log_prob = h.log_prob + l;
                let cand = Hypothesis { score: normalized(log_prob, step, length_penalty), tokens, log_prob };
                if Some(t) == spec.eos || step == spec.max_len {
                    finished.push(cand);
                } else {
                    next.push(cand);
                }
            }
        }
        next.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
        next.truncate(beam_size);
        live = next;
    }
    Ok(best_of(finished).expect("greedy hypothesis present"))
}

/// Support restriction applied before sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleFilter {
    Full,
    /// Smallest probability-sorted prefix with mass at least `p`.
    TopP(f64),
    TopK(usize),
}

/// Renormalized distribution after `filter`; entries outside the support
/// are exactly zero. Sorting breaks probability ties by lower id.
pub fn filter_distribution(probs: &[f64], filter: SampleFilter) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let keep = match filter {
        SampleFilter::Full => probs.len(),
        SampleFilter::TopK(k) => k.clamp(1, probs.len()),
        SampleFilter::TopP(p) => {
            let mut cum = 0.0;
            let mut n = 0;
            for &i in &order {
                cum += probs[i];
                n += 1;
                if cum >= p - NUCLEUS_TOL {
                    break;
                }
            }
            n
        }
    };
    let mut out = vec![0.0; probs.len()];
    let mass: f64 = order[..keep].iter().map(|&i| probs[i]).sum();
    for &i in &order[..keep] {
        out[i] = probs[i] / mass;
    }
    out
}

/// Draws an index from a normalized distribution by inverse CDF in id order.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

fn step_distribution(lp: &[f64], allowed: Option<&[bool]>, temperature: f64, filter: SampleFilter) -> Vec<f64> {
    let lp = restricted(lp, allowed);
    let scaled: Vec<f64> = lp.iter().map(|&l| l / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).iter().map(|l| l.exp()).collect();
    filter_distribution(&probs, filter)
}

/// Samples one continuation per rng, stepping all of them in one batch.
pub fn sample_batch<S: StepScorer + ?Sized, R: Rng>(
    scorer: &S,
    spec: &SearchSpec,
    filter: SampleFilter,
    temperature: f64,
    rngs: &mut [R],
) -> Result<Vec<Vec<TokenId>>> {
    check_spec(spec, scorer.vocab_size())?;
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    match filter {
        SampleFilter::TopP(p) if !(p > 0.0 && p <= 1.0) => {
            return Err(Error::Config(format!("top_p {p} outside (0, 1]")));
        }
        SampleFilter::TopK(0) => return Err(Error::Config("k must be at least 1".into())),
        _ => {}
    }
    let mut seqs: Vec<Vec<TokenId>> = vec![spec.prefix.to_vec(); rngs.len()];
    let mut done = vec![false; rngs.len()];
    for _ in 0..spec.max_len {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let refs: Vec<&[TokenId]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let lps = scorer.next_log_probs(&refs)?;
        for (&i, lp) in active.iter().zip(lps) {
            let t = sample_index(&step_distribution(&lp, spec.allowed, temperature, filter), &mut rngs[i]);
            seqs[i].push(t);
            done[i] = Some(t) == spec.eos;
        }
    }
    Ok(seqs.into_iter().map(|mut s| s.split_off(spec.prefix.len())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam,
    Nucleus,
    TopK,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "beam" => Ok(Self::Beam),
            "nucleus" => Ok(Self::Nucleus),
            "topk" => Ok(Self::TopK),
            _ => Err(Error::Config(format!("unknown decoding strategy {s:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::Beam => "beam",
            Self::Nucleus => "nucleus",
            Self::TopK => "topk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub top_p: f64,
    pub k: usize,
    pub n_samples: usize,
    /// Caption length limit in words; `None` uses the model's text limit.
    pub max_len: Option<usize>,
    pub temperature: f64,
    pub length_penalty: f64,
    /// Restrict the head to the target modality.
    pub restrict: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_size: 5,
            top_p: 0.9,
            k: 50,
            n_samples: 16,
            max_len: None,
            temperature: 1.0,
            length_penalty: 1.0,
            restrict: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.k == 0 || self.n_samples == 0 {
            return bad("k and n_samples must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    fn filter(&self) -> SampleFilter {
        match self.strategy {
            Strategy::Nucleus => SampleFilter::TopP(self.top_p),
            Strategy::TopK => SampleFilter::TopK(self.k),
            Strategy::Greedy | Strategy::Beam => SampleFilter::Full,
        }
    }
}

fn run<S: StepScorer + ?Sized>(
    scorer: &S,
    spec: &SearchSpec,
    cfg: &DecodeConfig,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<TokenId>>> {
    match cfg.strategy {
        Strategy::Greedy => Ok(vec![greedy(scorer, spec, cfg.length_penalty)?.tokens; n]),
        Strategy::Beam => Ok(vec![beam_search(scorer, spec, cfg.beam_size, cfg.length_penalty)?.tokens; n]),
        Strategy::Nucleus | Strategy::TopK => {
            let base: u64 = rng.random();
            let mut rngs: Vec<ChaCha8Rng> = (0..n as u64)
                .map(|i| {
                    let mut r = ChaCha8Rng::seed_from_u64(base);
                    r.set_stream(i);
                    r
                })
                .collect();
            sample_batch(scorer, spec, cfg.filter(), cfg.temperature, &mut rngs)
        }
    }
}

fn encode_image(model: &DuVlgModel, image: &ImageGrid) -> Result<Tensor> {
    let _guard = no_grad();
    let patches = model.codec().extract(image)?;
    let features = model.stacked_features(&[&patches])?;
    let item = EncoderItem { text: None, n_patches: Some(patches.len()), mask: None };
    Ok(model.encode_batch(&[item], features.as_ref(), &mut ForwardCtx::eval())?.states)
}

fn encode_text(model: &DuVlgModel, text: &[TokenId]) -> Result<Tensor> {
    let _guard = no_grad();
    let item = EncoderItem { text: Some(text), n_patches: None, mask: None };
    Ok(model.encode_batch(&[item], None, &mut ForwardCtx::eval())?.states)
}

/// Caption words for `image` (without `[BOS]`/`[EOS]`).
pub fn caption(model: &DuVlgModel, image: &ImageGrid, cfg: &DecodeConfig, rng: &mut impl Rng) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    let space = model.tokens();
    let allowed: Vec<bool> = (0..space.total()).map(|t| !cfg.restrict || space.is_word(t) || t == EOS).collect();
    let max_words = cfg.max_len.unwrap_or(model.config().max_text_len).min(model.config().max_text_len);
    let spec = SearchSpec { prefix: &[BOS], eos: Some(EOS), max_len: max_words + 1, allowed: Some(&allowed) };
    let scorer = ModelScorer::new(model, encode_image(model, image)?);
    let mut out = run(&scorer, &spec, cfg, 1, rng)?.remove(0);
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(out)
}

/// One generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    /// `[BOI] v₁ … vₙ [EOI]` in unified ids.
    pub tokens: Vec<TokenId>,
    pub codes: VisualTokenSeq,
    pub image: ImageGrid,
}

/// Generates `cfg.n_samples` images of `grid` patches for `caption`. The
/// head is restricted to visual tokens for exactly `rows·cols` steps after
/// `[BOI]`, then `[EOI]` closes the sequence.
pub fn generate_image(
    model: &DuVlgModel,
    caption: &[TokenId],
    grid: (usize, usize),
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<Vec<GeneratedImage>> {
    cfg.validate()?;
    let n_patches = grid.0 * grid.1;
    if n_patches == 0 || n_patches > model.config().max_patches {
        return Err(Error::TooLong { what: "image", len: n_patches, max: model.config().max_patches });
    }
    let space = model.tokens();
    let allowed: Vec<bool> = (0..space.total()).map(|t| space.is_visual(t)).collect();
    let spec = SearchSpec { prefix: &[BOI], eos: None, max_len: n_patches, allowed: Some(&allowed) };
    let scorer = ModelScorer::new(model, encode_text(model, caption)?);
    run(&scorer, &spec, cfg, cfg.n_samples, rng)?
        .into_iter()
        .map(|body| {
            let codes = VisualTokenSeq(body.iter().map(|&t| space.code_of(t).expect("restricted to visual")).collect());
            let image = model.codec().decode_tokens(&codes, grid)?;
            let mut tokens = Vec::with_capacity(n_patches + 2);
            tokens.push(BOI);
            tokens.extend(body);
            tokens.push(EOI);
            Ok(GeneratedImage { tokens, codes, image })
        })
        .collect()
}

/// Mean teacher-forced NLL of `caption` given `image` alone.
pub fn caption_nll(model: &DuVlgModel, image: &ImageGrid, caption: &[TokenId]) -> Result<f64> {
    let _guard = no_grad();
    let states = encode_image(model, image)?;
    let target = text_target(caption);
    let enc = Encoded { states: states.clone(), segments: vec![0..states.rows()] };
    let logits = model.decode_batch(&[&target[..target.len() - 1]], &enc, &mut ForwardCtx::eval())?;
    let labels = &target[1..];
    Ok(ops::cross_entropy_logits(&logits, labels, &vec![false; labels.len()])?.item())
}

/// Index of the image whose caption NLL is lowest (first on ties), and
/// every candidate's score `−NLL`.
pub fn rerank(model: &DuVlgModel, caption: &[TokenId], images: &[ImageGrid]) -> Result<(usize, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::Empty("rerank candidates"));
    }
    let scores = images.iter().map(|img| Ok(-caption_nll(model, img, caption)?)).collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s.partial_cmp(&scores[best]) == Some(Ordering::Greater) {
            best = i;
        }
    }
    Ok((best, scores))
}
