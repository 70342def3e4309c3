//! Differentiable tensor operations.
//!
//! Row-wise ops treat a tensor as `rows × cols` where `cols` is the extent of
//! the last axis.

use rand::Rng;

use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(op, format!("expected a matrix, got shape {s:?}")),
    }
}

fn grad_if<T: Scalar>(t: &Tensor<T>, f: impl FnOnce() -> Vec<T>) -> Option<Vec<T>> {
    t.requires_grad().then(f)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, a.shape().to_vec(), vec![a.clone(), b.clone()], move |g| {
        vec![grad_if(&pa, || g.to_vec()), grad_if(&pb, || g.to_vec())]
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, a.shape().to_vec(), vec![a.clone(), b.clone()], move |g| {
        vec![grad_if(&pa, || g.to_vec()), grad_if(&pb, || g.iter().map(|&v| -v).collect())]
    }))
}

/// Elementwise product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, a.shape().to_vec(), vec![a.clone(), b.clone()], move |g| {
        vec![
            grad_if(&pa, || g.iter().zip(pb.data().iter()).map(|(&g, &y)| g * y).collect()),
            grad_if(&pb, || g.iter().zip(pa.data().iter()).map(|(&g, &x)| g * x).collect()),
        ]
    }))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::lit(c);
    let out: Vec<T> = a.data().iter().map(|&x| x * c).collect();
    let pa = a.clone();
    Tensor::from_op(out, a.shape().to_vec(), vec![a.clone()], move |g| {
        vec![grad_if(&pa, || g.iter().map(|&v| v * c).collect())]
    })
}

/// Adds `bias` (with `cols` elements) to every row of `x`.
pub fn add_row<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = x.cols();
    if bias.numel() != cols {
        return dim_err("add_row", format!("bias of {} for {cols} columns", bias.numel()));
    }
    let out: Vec<T> = {
        let b = bias.data();
        x.data().iter().enumerate().map(|(i, &v)| v + b[i % cols]).collect()
    };
    let (px, pb) = (x.clone(), bias.clone());
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone(), bias.clone()], move |g| {
        vec![
            grad_if(&px, || g.to_vec()),
            grad_if(&pb, || {
                let mut gb = vec![T::zero(); cols];
                for row in g.chunks_exact(cols) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                gb
            }),
        ]
    }))
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s: T = x.data().iter().copied().sum();
    let (px, n) = (x.clone(), x.numel());
    Tensor::from_op(vec![s], vec![1], vec![x.clone()], move |g| vec![grad_if(&px, || vec![g[0]; n])])
}

pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    scale(&sum(x), 1.0 / x.numel() as f64)
}

/// `[m×k]·[k×n] → [m×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return dim_err("matmul", format!("[{m}x{k}] * [{k2}x{n}]"));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, &a.data(), (k, 1), &b.data(), (n, 1), T::zero(), &mut out);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, vec![m, n], vec![a.clone(), b.clone()], move |g| {
        vec![
            grad_if(&pa, || {
                // g·bᵀ
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, (n, 1), &pb.data(), (1, n), T::zero(), &mut ga);
                ga
            }),
            grad_if(&pb, || {
                // aᵀ·g
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, &pa.data(), (1, k), g, (n, 1), T::zero(), &mut gb);
                gb
            }),
        ]
    }))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = matrix_dims("transpose", a)?;
    let src = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    drop(src);
    let pa = a.clone();
    Ok(Tensor::from_op(out, vec![n, m], vec![a.clone()], move |g| {
        vec![grad_if(&pa, || {
            let mut ga = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            ga
        })]
    }))
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|v| v.tanh()).collect();
    let y = out.clone();
    let px = x.clone();
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], move |g| {
        vec![grad_if(&px, || g.iter().zip(&y).map(|(&g, &y)| g * (T::one() - y * y)).collect())]
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let out: Vec<T> = x.data().iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect();
    let px = x.clone();
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], move |g| {
        vec![grad_if(&px, || {
            let three = T::lit(3.0);
            g.iter()
                .zip(px.data().iter())
                .map(|(&g, &v)| {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                    g * (half * (T::one() + t) + half * v * dt)
                })
                .collect()
        })]
    })
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let mut out = x.to_vec();
    out.chunks_exact_mut(n).for_each(softmax_in_place);
    let y = out.clone();
    let px = x.clone();
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], move |g| {
        vec![grad_if(&px, || {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), out) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            gx
        })]
    })
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row standardization followed by an affine map.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return dim_err("layer_norm", format!("affine of {}/{} for width {d}", gain.numel(), bias.numel()));
    }
    let eps = T::lit(eps);
    let inv_d = T::lit(1.0 / d as f64);
    let rows = x.rows();
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    {
        let xs = x.data();
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mu: T = row.iter().copied().sum::<T>() * inv_d;
            let var: T = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mu) * s;
            }
        }
    }
    let out: Vec<T> = {
        let (gv, bv) = (gain.data(), bias.data());
        xhat.iter().enumerate().map(|(i, &h)| h * gv[i % d] + bv[i % d]).collect()
    };
    let (px, pg, pb) = (x.clone(), gain.clone(), bias.clone());
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone(), gain.clone(), bias.clone()], move |g| {
        let gx = grad_if(&px, || {
            let gv = pg.data();
            let mut gx = vec![T::zero(); rows * d];
            let mut dh = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    dh[j] = gr[j] * gv[j];
                }
                let m1: T = dh.iter().copied().sum::<T>() * inv_d;
                let m2: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (dh[j] - m1 - hr[j] * m2);
                }
            }
            gx
        });
        let gg = grad_if(&pg, || {
            let mut gg = vec![T::zero(); d];
            for (i, (&gi, &h)) in g.iter().zip(&xhat).enumerate() {
                gg[i % d] = gg[i % d] + gi * h;
            }
            gg
        });
        let gb = grad_if(&pb, || {
            let mut gb = vec![T::zero(); d];
            for (i, &gi) in g.iter().enumerate() {
                gb[i % d] = gb[i % d] + gi;
            }
            gb
        });
        vec![gx, gg, gb]
    }))
}

/// Row lookup: output row `i` is `table[ids[i]]`. Backward scatter-adds.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = (table.rows(), table.cols());
    if ids.is_empty() {
        return dim_err("gather_rows", "no indices");
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Vocabulary { id: bad, size: v });
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    {
        let t = table.data();
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
    }
    let ids = ids.to_vec();
    let n = ids.len();
    let pt = table.clone();
    Ok(Tensor::from_op(out, vec![n, d], vec![table.clone()], move |g| {
        vec![grad_if(&pt, || {
            let mut gt = vec![T::zero(); v * d];
            for (r, &i) in ids.iter().enumerate() {
                let dst = &mut gt[i * d..(i + 1) * d];
                dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a = *a + b);
            }
            gt
        })]
    }))
}

/// Stacks row blocks with equal column counts.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return dim_err("concat_rows", "no parts");
    };
    let d = first.cols();
    if let Some(p) = parts.iter().find(|p| p.cols() != d) {
        return dim_err("concat_rows", format!("width {} vs {d}", p.cols()));
    }
    let mut out = Vec::new();
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let start = out.len();
        out.extend_from_slice(&p.data());
        spans.push(start..out.len());
    }
    let rows = out.len() / d;
    let handles: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
    let captured = handles.clone();
    Ok(Tensor::from_op(out, vec![rows, d], handles, move |g| {
        captured.iter().zip(&spans).map(|(p, s)| grad_if(p, || g[s.clone()].to_vec())).collect()
    }))
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, averaged over positions where `ignore` is false.
pub fn cross_entropy_logits<T: Scalar>(logits: &Tensor<T>, targets: &[usize], ignore: &[bool]) -> Result<Tensor<T>> {
    let (rows, v) = (logits.rows(), logits.cols());
    if targets.len() != rows || ignore.len() != rows {
        return dim_err(
            "cross_entropy_logits",
            format!("{} targets / {} flags for {rows} rows", targets.len(), ignore.len()),
        );
    }
    if let Some(&bad) = targets.iter().zip(ignore).find(|(&t, &ig)| !ig && t >= v).map(|(t, _)| t) {
        return Err(Error::Vocabulary { id: bad, size: v });
    }
    let active = ignore.iter().filter(|&&i| !i).count();
    if active == 0 {
        return Err(Error::DegenerateBatch("every position ignored".into()));
    }
    let mut probs = logits.to_vec();
    let mut total = T::zero();
    for (r, row) in probs.chunks_exact_mut(v).enumerate() {
        let (top, max) =
            row.iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (j, z)| if z > acc.1 { (j, z) } else { acc });
        // ln Σ exp(z - max) = ln(1 + rest); ln_1p keeps confident rows accurate.
        let rest: T = row.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, &z)| (z - max).exp()).sum();
        let log_norm = rest.ln_1p();
        if !ignore[r] {
            total = total + (max - row[targets[r]]) + log_norm;
        }
        let lse = max + log_norm;
        row.iter_mut().for_each(|z| *z = (*z - lse).exp());
    }
    let inv = T::lit(1.0 / active as f64);
    let (targets, ignore) = (targets.to_vec(), ignore.to_vec());
    let pl = logits.clone();
    Ok(Tensor::from_op(vec![total * inv], vec![1], vec![logits.clone()], move |g| {
        vec![grad_if(&pl, || {
            let s = g[0] * inv;
            let mut gl = vec![T::zero(); rows * v];
            for r in 0..rows {
                if ignore[r] {
                    continue;
                }
                let (src, dst) = (&probs[r * v..(r + 1) * v], &mut gl[r * v..(r + 1) * v]);
                dst.iter_mut().zip(src).for_each(|(o, &p)| *o = p * s);
                dst[targets[r]] = dst[targets[r]] - s;
            }
            gl
        })]
    }))
}

/// Mean over the leading (position) axis of the squared Euclidean distance
/// between matching rows. One-dimensional inputs count as one position.
pub fn squared_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("squared_error", a, b)?;
    let positions = if a.shape().len() >= 2 { a.shape()[0] } else { 1 };
    let inv = T::lit(1.0 / positions as f64);
    let diff: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    let total: T = diff.iter().map(|&d| d * d).sum::<T>() * inv;
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(vec![total], vec![1], vec![a.clone(), b.clone()], move |g| {
        let s = g[0] * T::lit(2.0) * inv;
        vec![
            grad_if(&pa, || diff.iter().map(|&d| d * s).collect()),
            grad_if(&pb, || diff.iter().map(|&d| -d * s).collect()),
        ]
    }))
}

/// Identity forward; contributes exactly zero gradient to `x`.
pub fn stop_gradient<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(x.to_vec(), x.shape()).expect("shape already validated")
}

/// Inverted dropout. `p == 0` returns `x` itself.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, p: f64, rng: &mut R) -> Tensor<T> {
    if p <= 0.0 {
        return x.clone();
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.numel()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    let out: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let px = x.clone();
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], move |g| {
        vec![grad_if(&px, || g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]
    })
}

/// Same values under a new shape with equal element count.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() {
        return dim_err("reshape", format!("{:?} -> {shape:?}", x.shape()));
    }
    let px = x.clone();
    Ok(Tensor::from_op(x.to_vec(), shape.to_vec(), vec![x.clone()], move |g| vec![grad_if(&px, || g.to_vec())]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::new(v.to_vec(), s).unwrap()
    }
    fn p(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::param(v.to_vec(), s).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(matmul(&a, &eye).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_forced_arithmetic() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        let b = t(&[3.0, 4.0], &[2, 1]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[1.0; 6], &[2, 3]);
        let b = t(&[1.0; 4], &[2, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax_rows(&t(&[0.0, 0.0, 0.0], &[3])).to_vec();
        u.iter().for_each(|&v| assert!((v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax_rows(&t(&[0.0, 3f64.ln()], &[2])).to_vec();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let big = softmax_rows(&t(&[1000.0, 1000.0], &[2])).to_vec();
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let g = t(&[1.0; 3], &[3]);
        let b = t(&[0.0; 3], &[3]);
        let y = layer_norm(&t(&[5.0, 5.0, 5.0], &[1, 3]), &g, &b, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_already_normalized() {
        let g = t(&[1.0; 2], &[2]);
        let b = t(&[0.0; 2], &[2]);
        let y = layer_norm(&t(&[1.0, -1.0], &[1, 2]), &g, &b, 1e-300).unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = t(&[0.0; 8], &[1, 8]);
        let l = cross_entropy_logits(&uniform, &[3], &[false]).unwrap().item();
        assert!((l - 8f64.ln()).abs() < 1e-12);

        let sharp = t(&[10.0, -10.0], &[1, 2]);
        let l = cross_entropy_logits(&sharp, &[0], &[false]).unwrap().item();
        // ln(1 + e^-20)
        assert!((l - 2.061_153_620_314_381e-9).abs() < 1e-22);

        let err = cross_entropy_logits(&uniform, &[3], &[true]);
        assert!(matches!(err, Err(Error::DegenerateBatch(_))));
        assert!(matches!(cross_entropy_logits(&uniform, &[8], &[false]), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let logits = t(&[0.0, 0.0, 5.0, -5.0], &[2, 2]);
        let only_first = cross_entropy_logits(&logits, &[0, 1], &[false, true]).unwrap().item();
        assert!((only_first - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn squared_error_conventions() {
        let a = t(&[1.0, 2.0], &[1, 2]);
        assert_eq!(squared_error(&a, &a).unwrap().item(), 0.0);
        let z = t(&[0.0, 0.0], &[1, 2]);
        let o = t(&[1.0, 1.0], &[1, 2]);
        assert_eq!(squared_error(&z, &o).unwrap().item(), 2.0);
        let a2 = t(&[0.0, 0.0, 3.0, 3.0], &[2, 2]);
        let b2 = t(&[1.0, 1.0, 3.0, 3.0], &[2, 2]);
        assert_eq!(squared_error(&a2, &b2).unwrap().item(), 1.0);
        assert!(squared_error(&a, &a2).is_err());
    }

    #[test]
    fn stop_gradient_contract() {
        let x = p(&[1.0, 2.0, 3.0], &[3]);
        let y = p(&[4.0, 5.0, 6.0], &[3]);
        let sx = stop_gradient(&x);
        assert_eq!(sx.to_vec(), x.to_vec());
        backward(&sum(&mul(&sx, &y).unwrap())).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(y.grad().unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn gather_scatter_adds_repeats() {
        let table = p(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let g = gather_rows(&table, &[1, 1, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        backward(&sum(&g)).unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(gather_rows(&table, &[2]), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn dropout_zero_is_identity() {
        let x = p(&[1.0, 2.0], &[2]);
        let mut rng = rand::rng();
        assert!(dropout(&x, 0.0, &mut rng).same_storage(&x));
    }

    #[test]
    fn f32_ops_work() {
        let a = Tensor::<f32>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = sum(&matmul(&a, &a).unwrap());
        backward(&y).unwrap();
        assert_eq!(y.item(), 7.0 + 10.0 + 15.0 + 22.0);
        assert!(a.grad().is_some());
    }
}
