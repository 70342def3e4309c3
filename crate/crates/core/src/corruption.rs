//! Input corruption for the denoising tasks: blockwise patch masking on the
//! image side and Poisson-length span infilling on the text side.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::data::vocab::{is_special, MASK};
use crate::error::{Error, Result};
use crate::TokenId;

/// Shape limits for blockwise masking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockParams {
    pub min_block: usize,
    pub max_block: usize,
    /// Aspect ratios are drawn log-uniformly from `[min_aspect, 1/min_aspect]`.
    pub min_aspect: f64,
}

impl Default for BlockParams {
    fn default() -> Self {
        Self { min_block: 4, max_block: 16, min_aspect: 0.3 }
    }
}

/// Which patches of a `rows × cols` grid are hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    pub masked: Vec<bool>,
}

impl PatchMask {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self { rows, cols, masked: vec![false; rows * cols] }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self { rows, cols, masked: vec![true; rows * cols] }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.masked.len() as f64
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.masked[r * self.cols + c]
    }

    /// Largest fully masked axis-aligned rectangle, by area.
    pub fn largest_solid_rectangle(&self) -> usize {
        // Histogram method over rows.
        let mut heights = vec![0usize; self.cols];
        let mut best = 0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                heights[c] = if self.is_masked(r, c) { heights[c] + 1 } else { 0 };
            }
            for c in 0..self.cols {
                let h = heights[c];
                if h == 0 {
                    continue;
                }
                let mut l = c;
                while l > 0 && heights[l - 1] >= h {
                    l -= 1;
                }
                let mut rr = c;
                while rr + 1 < self.cols && heights[rr + 1] >= h {
                    rr += 1;
                }
                best = best.max(h * (rr - l + 1));
            }
        }
        best
    }
}

const MAX_BLOCK_DRAWS: usize = 100_000;

/// Unions random rectangles into a mask until at least
/// `ceil(rate·rows·cols)` patches are covered.
///
/// Each accepted rectangle has area in `[min_block, max_block]` (when the
/// grid can hold one that large), so the final count never exceeds
/// `target + max_block − 1`.
pub fn blockwise_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    params: &BlockParams,
    rng: &mut R,
) -> PatchMask {
    assert!((0.0..=1.0).contains(&rate), "mask rate {rate} outside [0, 1]");
    let n = rows * cols;
    let target = ((rate * n as f64).ceil() as usize).min(n);
    let mut mask = PatchMask::none(rows, cols);
    let mut count = 0;
    let max_block = params.max_block.max(1);
    let min_block = params.min_block.clamp(1, max_block);
    let log_lo = params.min_aspect.ln();
    let log_hi = -log_lo;
    let mut draws = 0;
    while count < target && draws < MAX_BLOCK_DRAWS {
        draws += 1;
        let area = rng.random_range(min_block as f64..=max_block as f64);
        let aspect = if log_lo < log_hi { rng.random_range(log_lo..log_hi).exp() } else { 1.0 };
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
        let a = h * w;
        // Grids too small for a min-size block accept whatever fits.
        let fits_min = a >= min_block || h == rows && w == cols;
        if a > max_block || !fits_min {
            continue;
        }
        let top = rng.random_range(0..=rows - h);
        let left = rng.random_range(0..=cols - w);
        for r in top..top + h {
            for c in left..left + w {
                let m = &mut mask.masked[r * cols + c];
                if !*m {
                    *m = true;
                    count += 1;
                }
            }
        }
    }
    // Only reachable on degenerate block parameters.
    for m in mask.masked.iter_mut() {
        if count >= target {
            break;
        }
        if !*m {
            *m = true;
            count += 1;
        }
    }
    mask
}

/// Text with spans collapsed into single `[MASK]` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedText {
    pub corrupted: Vec<TokenId>,
    pub original: Vec<TokenId>,
    /// Number of original tokens replaced.
    pub covered: usize,
    /// `(start, length)` of every drawn span after clamping, in draw order.
    pub spans: Vec<(usize, usize)>,
}

impl CorruptedText {
    pub fn mean_span_length(&self) -> Option<f64> {
        (!self.spans.is_empty()).then(|| self.spans.iter().map(|s| s.1).sum::<usize>() as f64 / self.spans.len() as f64)
    }
}

/// Masks at least `ceil(rate·maskable)` tokens with Poisson(`lambda`)
/// spans, then replaces each maximal covered run with one `[MASK]`.
///
/// Special tokens are never covered and spans never cross them.
pub fn span_infill<R: Rng + ?Sized>(tokens: &[TokenId], rate: f64, lambda: f64, rng: &mut R) -> Result<CorruptedText> {
    if tokens.is_empty() {
        return Err(Error::Empty("span_infill input"));
    }
    assert!((0.0..=1.0).contains(&rate), "mask rate {rate} outside [0, 1]");
    let poisson = Poisson::new(lambda).map_err(|e| Error::Config(format!("poisson lambda {lambda}: {e}")))?;
    let n = tokens.len();
    let maskable = tokens.iter().filter(|&&t| !is_special(t)).count();
    let target = ((rate * maskable as f64).ceil() as usize).min(maskable);
    let mut covered = vec![false; n];
    let mut count = 0;
    let mut spans = Vec::new();
    while count < target {
        let free: Vec<usize> = (0..n).filter(|&i| !covered[i] && !is_special(tokens[i])).collect();
        let start = free[rng.random_range(0..free.len())];
        let run = (start..n).take_while(|&i| !covered[i] && !is_special(tokens[i])).count();
        let drawn = poisson.sample(rng) as usize;
        let len = drawn.max(1).min(run);
        covered[start..start + len].iter_mut().for_each(|c| *c = true);
        count += len;
        spans.push((start, len));
    }
    let mut corrupted = Vec::with_capacity(n);
    for i in 0..n {
        if !covered[i] {
            corrupted.push(tokens[i]);
        } else if i == 0 || !covered[i - 1] {
            corrupted.push(MASK);
        }
    }
    Ok(CorruptedText { corrupted, original: tokens.to_vec(), covered: count, spans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::{BOS, EOS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_rate_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BlockParams::default();
        assert_eq!(blockwise_mask(14, 14, 0.0, &p, &mut rng).count(), 0);
        assert_eq!(blockwise_mask(14, 14, 1.0, &p, &mut rng).count(), 196);
    }

    #[test]
    fn tiny_grid_still_terminates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = blockwise_mask(1, 3, 0.5, &BlockParams::default(), &mut rng);
        assert!(m.count() >= 2);
    }

    #[test]
    fn solid_rectangle_detector() {
        let mut m = PatchMask::none(3, 4);
        for (r, c) in [(0, 1), (0, 2), (1, 1), (1, 2), (2, 0)] {
            m.masked[r * 4 + c] = true;
        }
        assert_eq!(m.largest_solid_rectangle(), 4);
    }

    #[test]
    fn span_infill_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let toks: Vec<TokenId> = (8..20).collect();
        let c = span_infill(&toks, 0.0, 3.0, &mut rng).unwrap();
        assert_eq!(c.corrupted, toks);
        assert_eq!(c.covered, 0);
    }

    #[test]
    fn span_infill_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = span_infill(&[9], 1.0, 3.0, &mut rng).unwrap();
        assert_eq!(c.corrupted, vec![MASK]);
        assert_eq!(c.covered, 1);
    }

    #[test]
    fn span_infill_empty_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(span_infill(&[], 0.5, 3.0, &mut rng), Err(Error::Empty(_))));
    }

    #[test]
    fn specials_are_never_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut toks = vec![BOS];
        toks.extend(8..18);
        toks.push(EOS);
        for _ in 0..50 {
            let c = span_infill(&toks, 1.0, 3.0, &mut rng).unwrap();
            assert_eq!(c.corrupted, vec![BOS, MASK, EOS]);
            assert_eq!(c.covered, 10);
        }
    }
}
