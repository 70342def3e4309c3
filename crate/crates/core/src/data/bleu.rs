//! Sentence-level BLEU-4.
//!
//! Unigram precision is unsmoothed; orders 2–4 use add-one smoothing,
//! `(matches + 1) / (candidate n-grams + 1)`. The brevity penalty uses the
//! reference length closest to the candidate (shorter wins ties).

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU-4 of `candidate` against one or more references, in `[0, 1]`.
pub fn bleu4<T: Eq + Hash + Clone>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("bleu references"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let slot = max_ref.entry(g).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let matches: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if n == 1 {
            if matches == 0 {
                return Ok(0.0);
            }
            matches as f64 / total as f64
        } else {
            (matches + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references.iter().map(Vec::len).min_by_key(|&len| (len.abs_diff(c), len)).expect("non-empty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / MAX_ORDER as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_is_one() {
        let r = toks("a b c d e");
        assert_eq!(bleu4(&r, std::slice::from_ref(&r)).unwrap(), 1.0);
    }

    #[test]
    fn empty_candidate_is_zero() {
        assert_eq!(bleu4::<&str>(&[], &[toks("a b")]).unwrap(), 0.0);
    }

    #[test]
    fn empty_references_error() {
        assert!(bleu4(&toks("a"), &[]).is_err());
    }

    #[test]
    fn hand_computed_value() {
        // (4/5 · 4/5 · 3/4 · 2/3)^(1/4), computed independently.
        let b = bleu4(&toks("a b c d e"), &[toks("a b c d f")]).unwrap();
        assert!((b - 0.752_120_618_617_278_7).abs() < 1e-15, "{b}");
    }

    #[test]
    fn brevity_penalty_applies() {
        // All precisions are 1; penalty exp(1 - 6/3).
        let b = bleu4(&toks("a b c"), &[toks("a b c d e f")]).unwrap();
        assert!((b - 0.367_879_441_171_442_33).abs() < 1e-15, "{b}");
    }

    #[test]
    fn clipping_limits_repeats() {
        let b = bleu4(&toks("a a a a"), &[toks("a b c d")]).unwrap();
        // p1 = 1/4, p2 = 1/4, p3 = 1/3, p4 = 1/2
        let want = (0.25f64 * 0.25 * (1.0 / 3.0) * 0.5).powf(0.25);
        assert!((b - want).abs() < 1e-15);
    }
}
