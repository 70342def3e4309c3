//! Image-side plumbing: patch extraction, a frozen patch featurizer and a
//! training-free vector quantizer that maps patches to discrete visual
//! tokens and back.
//!
//! Patches are flattened row-major in the grid; inside a patch pixels are
//! row-major with interleaved RGB. The quantizer renders codeword `e` as the
//! pixel patch `0.5 + gain·Q·e`, where `Q` has orthonormal columns, and
//! tokenizes a patch `x` by projecting `Qᵀ(x − 0.5)/gain` and taking the
//! nearest codeword. Codewords lie on the unit sphere and `gain` keeps every
//! rendered pixel inside `[0, 1]`, so decoding never clamps and
//! tokenize ∘ decode is exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::ops;
use crate::error::{Error, Result};
use crate::Tensor;

pub const CHANNELS: usize = 3;

/// Derives a reproducible seed for a named component.
pub fn named_seed(name: &str, seed: u64) -> u64 {
    // FNV-1a over the name, then mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// An RGB image with values in `[0, 1]`, stored `[height][width][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    /// Pixels outside `[0, 1]` are clamped.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Image(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Image(format!("{} values for a {height}x{width} RGB image", pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| v.is_nan()) {
            return Err(Error::Image(format!("pixel value {v}")));
        }
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Serializes as `DUVLG-IMG v1 <rows> <cols>` followed by one line of
    /// RGB floats per pixel row.
    pub fn to_text(&self) -> String {
        let mut s = format!("DUVLG-IMG v1 {} {}\n", self.height, self.width);
        for row in self.pixels.chunks_exact(self.width * CHANNELS) {
            let mut first = true;
            for v in row {
                if !first {
                    s.push(' ');
                }
                first = false;
                write!(s, "{v}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let header: Vec<&str> = tokens.by_ref().take(4).collect();
        if header.len() != 4 || header[0] != "DUVLG-IMG" || header[1] != "v1" {
            return Err(Error::Image(format!("bad header {header:?}")));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|e| Error::Image(format!("bad extent {s:?}: {e}")));
        let (h, w) = (dim(header[2])?, dim(header[3])?);
        let pixels = tokens
            .map(|t| t.parse::<f64>().map_err(|e| Error::Image(format!("bad value {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Raw pixel patches, `[n_patches × p·p·3]`, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPatches {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub data: Vec<f64>,
}

impl RawPatches {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[self.len(), self.dim()]).expect("patch tensor shape")
    }
}

/// Splits an image into `p×p` tiles in row-major grid order.
pub fn extract_patches(img: &ImageGrid, p: usize) -> Result<RawPatches> {
    if p == 0 || !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
        return Err(Error::Image(format!("{}x{} image is not divisible into {p}x{p} patches", img.height, img.width)));
    }
    let (rows, cols) = (img.height / p, img.width / p);
    let mut data = Vec::with_capacity(img.pixels.len());
    for r in 0..rows {
        for c in 0..cols {
            for y in r * p..(r + 1) * p {
                let start = (y * img.width + c * p) * CHANNELS;
                data.extend_from_slice(&img.pixels[start..start + p * CHANNELS]);
            }
        }
    }
    Ok(RawPatches { rows, cols, patch_size: p, data })
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches(patches: &RawPatches) -> Result<ImageGrid> {
    let p = patches.patch_size;
    let (h, w) = (patches.rows * p, patches.cols * p);
    let mut pixels = vec![0.0; h * w * CHANNELS];
    for r in 0..patches.rows {
        for c in 0..patches.cols {
            let src = patches.patch(r * patches.cols + c);
            for dy in 0..p {
                let dst = ((r * p + dy) * w + c * p) * CHANNELS;
                pixels[dst..dst + p * CHANNELS].copy_from_slice(&src[dy * p * CHANNELS..(dy + 1) * p * CHANNELS]);
            }
        }
    }
    ImageGrid::new(h, w, pixels)
}

/// Continuous patch features for the encoder.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub features: Tensor,
    pub grid: (usize, usize),
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Frozen stand-in for a pretrained patch encoder: `tanh(x·W + b)`.
#[derive(Debug, Clone)]
pub struct Featurizer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Featurizer {
    pub fn new(patch_dim: usize, d_feat: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(named_seed("featurizer", seed));
        let bound = 1.0 / (patch_dim as f64).sqrt();
        let w: Vec<f64> = (0..patch_dim * d_feat).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..d_feat).map(|_| rng.random_range(-0.5..0.5)).collect();
        Ok(Self { weight: Tensor::new(w, &[patch_dim, d_feat])?, bias: Tensor::new(b, &[d_feat])? })
    }

    /// A copy whose parameters accept gradients (the fine-tuning setting).
    pub fn trainable(&self) -> Result<Self> {
        Ok(Self {
            weight: Tensor::param(self.weight.to_vec(), self.weight.shape())?,
            bias: Tensor::param(self.bias.to_vec(), self.bias.shape())?,
        })
    }

    pub fn is_trainable(&self) -> bool {
        self.weight.requires_grad()
    }

    pub fn d_feat(&self) -> usize {
        self.weight.cols()
    }

    /// Features for a stack of patches `[n × p·p·3] → [n × d_feat]`.
    pub fn features(&self, patches: &Tensor) -> Result<Tensor> {
        Ok(ops::tanh(&ops::add_row(&ops::matmul(patches, &self.weight)?, &self.bias)?))
    }

    pub fn featurize(&self, patches: &RawPatches) -> Result<PatchSequence> {
        Ok(PatchSequence { features: self.features(&patches.to_tensor())?, grid: (patches.rows, patches.cols) })
    }
}

/// Discrete visual token ids in `[0, K)`, one per patch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VisualTokenSeq(pub Vec<usize>);

/// Fixed codebook with a linear renderer and its exact left inverse.
#[derive(Debug, Clone)]
pub struct VisualCodebook {
    size: usize,
    d_code: usize,
    patch_dim: usize,
    /// `[K × d_code]`, frozen.
    pub embed: Tensor,
    /// `[patch_dim × d_code]` with orthonormal columns.
    basis: Vec<f64>,
    gain: f64,
}

const MIN_CODE_DISTANCE: f64 = 0.35;

impl VisualCodebook {
    pub fn generate(size: usize, d_code: usize, patch_dim: usize, seed: u64) -> Result<Self> {
        if size == 0 || d_code == 0 || d_code > patch_dim {
            return Err(Error::Config(format!(
                "codebook of {size} codes in {d_code} dims for {patch_dim}-dim patches"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(named_seed("codebook", seed));
        let basis = orthonormal_columns(patch_dim, d_code, &mut rng);

        let mut codes: Vec<Vec<f64>> = Vec::with_capacity(size);
        let mut min_dist = MIN_CODE_DISTANCE;
        let mut rejected = 0usize;
        while codes.len() < size {
            let mut v: Vec<f64> = (0..d_code).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            if codes.iter().all(|c| dist2(c, &v) >= min_dist * min_dist) {
                codes.push(v);
                rejected = 0;
            } else {
                rejected += 1;
                if rejected > 10_000 {
                    min_dist *= 0.8;
                    rejected = 0;
                }
            }
        }
        Self::from_parts(codes.concat(), size, d_code, basis)
    }

    /// Builds a codebook from explicit codewords (`[K × d_code]`) and a
    /// basis with orthonormal columns (`[patch_dim × d_code]`).
    pub fn from_parts(embed: Vec<f64>, size: usize, d_code: usize, basis: Vec<f64>) -> Result<Self> {
        if !basis.len().is_multiple_of(d_code) || embed.len() != size * d_code {
            return Err(Error::Config("codebook parts have inconsistent sizes".into()));
        }
        let patch_dim = basis.len() / d_code;
        let max_row_norm =
            basis.chunks_exact(d_code).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let max_code_norm =
            embed.chunks_exact(d_code).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let denom = max_row_norm * max_code_norm;
        let gain = if denom > 0.0 { 0.5 / denom } else { 1.0 };
        Ok(Self { size, d_code, patch_dim, embed: Tensor::new(embed, &[size, d_code])?, basis, gain })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn d_code(&self) -> usize {
        self.d_code
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    fn code(&self, j: usize) -> Vec<f64> {
        self.embed.data()[j * self.d_code..(j + 1) * self.d_code].to_vec()
    }

    /// Pixel patch for token `j`, clamped to `[0, 1]`.
    pub fn render(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.size {
            return Err(Error::Vocabulary { id: j, size: self.size });
        }
        let e = self.code(j);
        Ok(self
            .basis
            .chunks_exact(self.d_code)
            .map(|row| {
                let v: f64 = row.iter().zip(&e).map(|(a, b)| a * b).sum();
                (0.5 + self.gain * v).clamp(0.0, 1.0)
            })
            .collect())
    }

    /// The patch's coordinates in code space.
    pub fn project(&self, patch: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.d_code];
        for (row, &x) in self.basis.chunks_exact(self.d_code).zip(patch) {
            let centered = (x - 0.5) / self.gain;
            z.iter_mut().zip(row).for_each(|(a, &q)| *a += q * centered);
        }
        z
    }

    /// Nearest codeword by Euclidean distance; ties go to the lowest id.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let embed = self.embed.data();
        let mut best = (0, f64::INFINITY);
        for (j, c) in embed.chunks_exact(self.d_code).enumerate() {
            let d = dist2(c, z);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let embed = self.embed.data();
        let rows: Vec<&[f64]> = embed.chunks_exact(self.d_code).collect();
        let mut best = f64::INFINITY;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                best = best.min(dist2(rows[i], rows[j]).sqrt());
            }
        }
        best
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gram–Schmidt on a Gaussian matrix; columns stored row-major `[n × k]`.
fn orthonormal_columns(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes for numerical orthogonality.
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    let mut out = vec![0.0; n * k];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            out[i * k + j] = c[i];
        }
    }
    out
}

/// Shape and seed parameters for [`VisionCodec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub patch_size: usize,
    pub d_feat: usize,
    pub d_code: usize,
    pub codebook_size: usize,
    pub seed: u64,
}

/// The featurizer and quantizer pair shared by data and model code.
#[derive(Debug, Clone)]
pub struct VisionCodec {
    pub patch_size: usize,
    pub featurizer: Featurizer,
    pub codebook: VisualCodebook,
}

impl VisionCodec {
    pub fn new(cfg: &CodecConfig) -> Result<Self> {
        let patch_dim = cfg.patch_size * cfg.patch_size * CHANNELS;
        Ok(Self {
            patch_size: cfg.patch_size,
            featurizer: Featurizer::new(patch_dim, cfg.d_feat, cfg.seed)?,
            codebook: VisualCodebook::generate(cfg.codebook_size, cfg.d_code, patch_dim, cfg.seed)?,
        })
    }

    /// Same codec with gradients enabled on the featurizer.
    pub fn with_trainable_featurizer(&self) -> Result<Self> {
        Ok(Self { featurizer: self.featurizer.trainable()?, ..self.clone() })
    }

    pub fn extract(&self, img: &ImageGrid) -> Result<RawPatches> {
        extract_patches(img, self.patch_size)
    }

    pub fn featurize(&self, patches: &RawPatches) -> Result<PatchSequence> {
        self.featurizer.featurize(patches)
    }

    pub fn tokenize_patches(&self, patches: &RawPatches) -> VisualTokenSeq {
        VisualTokenSeq(
            (0..patches.len()).map(|i| self.codebook.nearest(&self.codebook.project(patches.patch(i)))).collect(),
        )
    }

    pub fn tokenize_image(&self, img: &ImageGrid) -> Result<VisualTokenSeq> {
        Ok(self.tokenize_patches(&self.extract(img)?))
    }

    pub fn decode_tokens(&self, seq: &VisualTokenSeq, grid: (usize, usize)) -> Result<ImageGrid> {
        let (rows, cols) = grid;
        if seq.0.len() != rows * cols {
            return Err(Error::Image(format!("{} tokens for a {rows}x{cols} patch grid", seq.0.len())));
        }
        let mut data = Vec::with_capacity(rows * cols * self.codebook.patch_dim());
        for &t in &seq.0 {
            data.extend(self.codebook.render(t)?);
        }
        assemble_patches(&RawPatches { rows, cols, patch_size: self.patch_size, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> VisionCodec {
        VisionCodec::new(&CodecConfig { patch_size: 4, d_feat: 32, d_code: 16, codebook_size: 64, seed: 7 }).unwrap()
    }

    #[test]
    fn patch_order_is_row_major() {
        // 4x4 image whose red channel encodes the patch index.
        let mut px = vec![0.0; 4 * 4 * 3];
        for y in 0..4 {
            for x in 0..4 {
                px[(y * 4 + x) * 3] = ((y / 2) * 2 + x / 2) as f64 / 10.0;
            }
        }
        let img = ImageGrid::new(4, 4, px).unwrap();
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!((p.rows, p.cols), (2, 2));
        for i in 0..4 {
            assert_eq!(p.patch(i)[0], i as f64 / 10.0);
        }
        assert_eq!(assemble_patches(&p).unwrap(), img);
    }

    #[test]
    fn patch_counts_at_full_resolutions() {
        let n = |s| extract_patches(&ImageGrid::filled(s, s, 0.0).unwrap(), 16).unwrap().len();
        assert_eq!(n(224), 196);
        assert_eq!(n(384), 576);
    }

    #[test]
    fn non_divisible_image_rejected() {
        let img = ImageGrid::filled(6, 8, 0.0).unwrap();
        assert!(matches!(extract_patches(&img, 4), Err(Error::Image(_))));
    }

    #[test]
    fn featurizer_is_deterministic_and_frozen() {
        let c = toy();
        let p = c.extract(&ImageGrid::filled(8, 8, 0.3).unwrap()).unwrap();
        let a = c.featurize(&p).unwrap().features.to_vec();
        let b = c.featurize(&p).unwrap().features.to_vec();
        assert_eq!(a, b);
        assert!(!c.featurize(&p).unwrap().features.requires_grad());
    }

    #[test]
    fn zero_image_features_are_tanh_bias() {
        let c = toy();
        let p = c.extract(&ImageGrid::filled(8, 8, 0.0).unwrap()).unwrap();
        let f = c.featurize(&p).unwrap().features.to_vec();
        let want: Vec<f64> = c.featurizer.bias.to_vec().iter().map(|b| b.tanh()).collect();
        for row in f.chunks_exact(32) {
            assert_eq!(row, want.as_slice());
        }
    }

    #[test]
    fn codebook_is_distinct_and_renders_in_range() {
        let c = toy();
        assert!(c.codebook.min_pairwise_distance() > 0.0);
        for j in 0..64 {
            let r = c.codebook.render(j).unwrap();
            assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(matches!(c.codebook.render(64), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn tie_breaks_to_lowest_id() {
        // Codes 3 and 7 are the only ones at distance 1 from the origin.
        let d = 2;
        let mut embed = vec![0.0; 8 * d];
        for j in 0..8 {
            embed[j * d] = 5.0 + j as f64;
            embed[j * d + 1] = 5.0;
        }
        embed[3 * d..3 * d + 2].copy_from_slice(&[1.0, 0.0]);
        embed[7 * d..7 * d + 2].copy_from_slice(&[-1.0, 0.0]);
        let basis = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let cb = VisualCodebook::from_parts(embed, 8, d, basis).unwrap();
        // A mid-grey patch projects to the origin.
        assert_eq!(cb.nearest(&cb.project(&[0.5, 0.5, 0.5])), 3);
    }

    #[test]
    fn decode_rejects_bad_sequences() {
        let c = toy();
        assert!(matches!(c.decode_tokens(&VisualTokenSeq(vec![64]), (1, 1)), Err(Error::Vocabulary { .. })));
        assert!(matches!(c.decode_tokens(&VisualTokenSeq(vec![1, 2]), (1, 1)), Err(Error::Image(_))));
    }

    #[test]
    fn single_token_decode_is_render() {
        let c = toy();
        let img = c.decode_tokens(&VisualTokenSeq(vec![5]), (1, 1)).unwrap();
        assert_eq!(extract_patches(&img, 4).unwrap().data, c.codebook.render(5).unwrap());
    }

    #[test]
    fn image_text_round_trip() {
        let c = toy();
        let img = c.decode_tokens(&VisualTokenSeq(vec![1, 2, 3, 4]), (2, 2)).unwrap();
        let back = ImageGrid::from_text(&img.to_text()).unwrap();
        assert_eq!(back, img);
        assert!(img.to_text().starts_with("DUVLG-IMG v1 8 8\n"));
        assert!(ImageGrid::from_text("DUVLG-IMG v2 1 1 0 0 0").is_err());
    }
}
