use std::ops::Range;

use super::Tensor;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// One independent attention problem inside a packed batch: queries in
/// rows `q` attend only to keys/values in rows `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnSegment {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

impl AttnSegment {
    pub fn square(rows: Range<usize>) -> Self {
        Self { q: rows.clone(), k: rows }
    }
}

/// Multi-head scaled dot-product attention over packed variable-length
/// segments.
///
/// `q` is `[N×d]`, `k` and `v` are `[M×d]`; heads are contiguous column
/// blocks of width `d / n_heads`. Rows of `q` not covered by any segment
/// produce zeros. With `causal`, query `i` of a segment sees keys `0..=i` of
/// the same segment (query and key ranges must then have equal length).
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    segments: &[AttnSegment],
    causal: bool,
) -> Result<Tensor<T>> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || q.shape().len() != 2 {
        return dim_err("attention", format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()));
    }
    if k.shape() != v.shape() {
        return dim_err("attention", "key/value shape mismatch");
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return dim_err("attention", format!("{n_heads} heads for width {d}"));
    }
    let (nq, nk) = (q.rows(), k.rows());
    for s in segments {
        if s.q.end > nq || s.k.end > nk || s.q.is_empty() || s.k.is_empty() {
            return dim_err("attention", format!("segment {s:?} outside {nq}/{nk} rows"));
        }
        if causal && s.q.len() != s.k.len() {
            return dim_err("attention", "causal segment with unequal query/key lengths");
        }
    }
    let dh = d / n_heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    // probs[seg][head] is a row-major [lq × lk] block, zero above the diagonal
    // when causal.
    let mut probs: Vec<Vec<T>> = Vec::with_capacity(segments.len() * n_heads);
    let mut out = vec![T::zero(); nq * d];
    {
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for s in segments {
            let (lq, lk) = (s.q.len(), s.k.len());
            for h in 0..n_heads {
                let c0 = h * dh;
                let mut p = vec![T::zero(); lq * lk];
                for i in 0..lq {
                    let qi = &qd[(s.q.start + i) * d + c0..][..dh];
                    let visible = if causal { i + 1 } else { lk };
                    let row = &mut p[i * lk..i * lk + visible];
                    let mut max = T::neg_infinity();
                    for (j, slot) in row.iter_mut().enumerate() {
                        let kj = &kd[(s.k.start + j) * d + c0..][..dh];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        *slot = dot * scale;
                        max = max.max(*slot);
                    }
                    let mut total = T::zero();
                    for slot in row.iter_mut() {
                        *slot = (*slot - max).exp();
                        total = total + *slot;
                    }
                    let o = &mut out[(s.q.start + i) * d + c0..][..dh];
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = *slot / total;
                        let vj = &vd[(s.k.start + j) * d + c0..][..dh];
                        o.iter_mut().zip(vj).for_each(|(a, &b)| *a = *a + *slot * b);
                    }
                }
                probs.push(p);
            }
        }
    }

    let (pq, pk, pv) = (q.clone(), k.clone(), v.clone());
    let segments = segments.to_vec();
    Ok(Tensor::from_op(out, vec![nq, d], vec![q.clone(), k.clone(), v.clone()], move |g| {
        let (qd, kd, vd) = (pq.data(), pk.data(), pv.data());
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * d];
        let mut dp = Vec::new();
        for (si, s) in segments.iter().enumerate() {
            let (lq, lk) = (s.q.len(), s.k.len());
            for h in 0..n_heads {
                let c0 = h * dh;
                let p = &probs[si * n_heads + h];
                for i in 0..lq {
                    let visible = if causal { i + 1 } else { lk };
                    let gi = &g[(s.q.start + i) * d + c0..][..dh];
                    let prow = &p[i * lk..i * lk + visible];
                    dp.clear();
                    for (j, &pij) in prow.iter().enumerate() {
                        let kr = (s.k.start + j) * d + c0;
                        let vj = &vd[kr..kr + dh];
                        dp.push(gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>());
                        gv[kr..kr + dh].iter_mut().zip(gi).for_each(|(a, &b)| *a = *a + pij * b);
                    }
                    let weighted: T = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    let qr = (s.q.start + i) * d + c0;
                    for (j, &pij) in prow.iter().enumerate() {
                        let ds = pij * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kr = (s.k.start + j) * d + c0;
                        for c in 0..dh {
                            gq[qr + c] = gq[qr + c] + ds * kd[kr + c];
                            gk[kr + c] = gk[kr + c] + ds * qd[qr + c];
                        }
                    }
                }
            }
        }
        vec![pq.requires_grad().then_some(gq), pk.requires_grad().then_some(gk), pv.requires_grad().then_some(gv)]
    }))
}
