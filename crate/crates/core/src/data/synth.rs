//! Deterministic synthetic image-caption pairs.
//!
//! Each example places one to three colored blocks at distinct positions on
//! a background. Images are rendered through the visual codebook (code 0 is
//! the background, codes `1..=8` the palette), so every pixel is exactly
//! representable by visual tokens.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::TextVocab;
use crate::codec::{ImageGrid, VisionCodec, VisualTokenSeq};
use crate::error::{Error, Result};
use crate::TokenId;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "black"];
pub const BACKGROUND_CODE: usize = 0;
pub const MAX_BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl Position {
    pub const ALL: [Position; 5] = [Self::TopLeft, Self::TopRight, Self::BottomLeft, Self::BottomRight, Self::Center];

    fn words(self) -> &'static str {
        match self {
            Self::TopLeft => "top left",
            Self::TopRight => "top right",
            Self::BottomLeft => "bottom left",
            Self::BottomRight => "bottom right",
            Self::Center => "center",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Self::TopLeft => "top-left",
            Self::TopRight => "top-right",
            Self::BottomLeft => "bottom-left",
            Self::BottomRight => "bottom-right",
            Self::Center => "center",
        }
    }

    fn from_key(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.key() == s)
    }

    /// Top-left patch of this block on a `rows × cols` grid, plus block size.
    fn placement(self, rows: usize, cols: usize) -> ((usize, usize), (usize, usize)) {
        let (bh, bw) = ((rows / 4).max(1), (cols / 4).max(1));
        let near = |n: usize, b: usize| (n / 2).saturating_sub(b) / 2;
        let far = |n: usize, b: usize| n / 2 + (n - n / 2).saturating_sub(b) / 2;
        let (r, c) = match self {
            Self::TopLeft => (near(rows, bh), near(cols, bw)),
            Self::TopRight => (near(rows, bh), far(cols, bw)),
            Self::BottomLeft => (far(rows, bh), near(cols, bw)),
            Self::BottomRight => (far(rows, bh), far(cols, bw)),
            Self::Center => ((rows - bh) / 2, (cols - bw) / 2),
        };
        ((r, c), (bh, bw))
    }
}

/// Generator parameters for one example.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SyntheticSpec {
    /// `(color index, position)`; positions are distinct.
    pub blocks: Vec<(usize, Position)>,
}

impl SyntheticSpec {
    /// Blocks are listed in [`Position::ALL`] order, so the caption is a
    /// function of the image.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = rng.random_range(1..=MAX_BLOCKS);
        let mut positions = Position::ALL;
        positions.shuffle(rng);
        let mut chosen = positions[..n].to_vec();
        chosen.sort_by_key(|p| Position::ALL.iter().position(|q| q == p));
        let blocks = chosen.into_iter().map(|p| (rng.random_range(0..COLORS.len()), p)).collect();
        Self { blocks }
    }

    pub fn caption(&self) -> String {
        self.blocks
            .iter()
            .map(|&(c, p)| format!("a {} block at {}", COLORS[c], p.words()))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    /// Visual codes on a `rows × cols` patch grid.
    pub fn token_grid(&self, rows: usize, cols: usize) -> VisualTokenSeq {
        let mut grid = vec![BACKGROUND_CODE; rows * cols];
        for &(color, pos) in &self.blocks {
            let ((r0, c0), (bh, bw)) = pos.placement(rows, cols);
            for r in r0..(r0 + bh).min(rows) {
                for c in c0..(c0 + bw).min(cols) {
                    grid[r * cols + c] = 1 + color;
                }
            }
        }
        VisualTokenSeq(grid)
    }

    pub fn render(&self, codec: &VisionCodec, image_size: usize) -> Result<ImageGrid> {
        if codec.codebook.size() <= COLORS.len() {
            return Err(Error::Config(format!(
                "codebook of {} codes cannot hold the {}-color palette",
                codec.codebook.size(),
                COLORS.len()
            )));
        }
        let n = image_size / codec.patch_size;
        codec.decode_tokens(&self.token_grid(n, n), (n, n))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad block spec {s:?}"));
        let blocks = s
            .split(';')
            .map(|part| {
                let (color, pos) = part.split_once('@').ok_or_else(bad)?;
                let c = COLORS.iter().position(|&n| n == color).ok_or_else(bad)?;
                Ok((c, Position::from_key(pos).ok_or_else(bad)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut seen: Vec<Position> = blocks.iter().map(|b| b.1).collect();
        seen.sort_by_key(|p| p.key());
        seen.dedup();
        if blocks.is_empty() || blocks.len() > MAX_BLOCKS || seen.len() != blocks.len() {
            return Err(bad());
        }
        Ok(Self { blocks })
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.blocks.iter().map(|&(c, p)| format!("{}@{}", COLORS[c], p.key())).collect();
        f.write_str(&parts.join(";"))
    }
}

/// The closed vocabulary of the caption grammar.
pub fn grammar_vocab() -> TextVocab {
    let mut words = vec!["a", "block", "at", "and", "top", "bottom", "left", "right", "center"];
    words.extend(COLORS);
    TextVocab::from_words(words).expect("grammar words are distinct")
}

/// Longest caption the grammar produces, in words.
pub fn max_caption_len() -> usize {
    // "a <color> block at <v> <h>" is six words; blocks are joined by "and".
    MAX_BLOCKS * 6 + (MAX_BLOCKS - 1)
}

/// One image-caption pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub image: ImageGrid,
    pub caption: Vec<TokenId>,
    pub meta: SyntheticSpec,
}

impl PairedExample {
    pub fn from_spec(spec: SyntheticSpec, vocab: &TextVocab, codec: &VisionCodec, image_size: usize) -> Result<Self> {
        Ok(Self { image: spec.render(codec, image_size)?, caption: vocab.encode_text(&spec.caption())?, meta: spec })
    }
}

pub fn gen_dataset(
    n: usize,
    seed: u64,
    vocab: &TextVocab,
    codec: &VisionCodec,
    image_size: usize,
) -> Result<Vec<PairedExample>> {
    if n == 0 {
        return Err(Error::Empty("dataset size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| PairedExample::from_spec(SyntheticSpec::sample(&mut rng), vocab, codec, image_size)).collect()
}

/// One line per example: `<caption text>\t<spec string>`.
pub fn save_dataset(path: &Path, examples: &[PairedExample], vocab: &TextVocab) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&vocab.decode_text(&ex.caption)?);
        out.push('\t');
        out.push_str(&ex.meta.to_string());
        out.push('\n');
    }
    crate::checkpoint::write_atomic(path, out.as_bytes())
}

pub fn load_dataset(
    path: &Path,
    vocab: &TextVocab,
    codec: &VisionCodec,
    image_size: usize,
) -> Result<Vec<PairedExample>> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (caption, spec) = line.split_once('\t').ok_or_else(|| parse_err(i + 1, "missing tab separator".into()))?;
        let spec = SyntheticSpec::parse(spec).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let caption = vocab.encode_text(caption).map_err(|e| parse_err(i + 1, e.to_string()))?;
        out.push(PairedExample { image: spec.render(codec, image_size)?, caption, meta: spec });
    }
    if out.is_empty() {
        return Err(Error::Empty("dataset file"));
    }
    Ok(out)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Roughly one example in ten, chosen by hashing its index.
pub fn is_validation(index: usize) -> bool {
    splitmix64(index as u64).is_multiple_of(10)
}

/// `(train, validation)` index lists.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| !is_validation(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    fn codec() -> VisionCodec {
        VisionCodec::new(&CodecConfig { patch_size: 4, d_feat: 32, d_code: 16, codebook_size: 64, seed: 0 }).unwrap()
    }

    #[test]
    fn spec_string_round_trip() {
        let s = SyntheticSpec::parse("red@top-left;blue@center").unwrap();
        assert_eq!(s.to_string(), "red@top-left;blue@center");
        assert_eq!(s.caption(), "a red block at top left and a blue block at center");
        assert!(SyntheticSpec::parse("red@top-left;blue@top-left").is_err());
        assert!(SyntheticSpec::parse("mauve@center").is_err());
    }

    #[test]
    fn toy_blocks_do_not_overlap() {
        let all = SyntheticSpec { blocks: Position::ALL.iter().enumerate().map(|(i, &p)| (i, p)).collect() };
        let grid = all.token_grid(8, 8);
        for c in 0..5 {
            assert_eq!(grid.0.iter().filter(|&&t| t == c + 1).count(), 4, "color {c}");
        }
    }

    #[test]
    fn captions_fit_the_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = grammar_vocab();
        for _ in 0..500 {
            let s = SyntheticSpec::sample(&mut rng);
            assert!(v.encode_text(&s.caption()).unwrap().len() <= max_caption_len());
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let (v, c) = (grammar_vocab(), codec());
        assert_eq!(gen_dataset(20, 3, &v, &c, 32).unwrap(), gen_dataset(20, 3, &v, &c, 32).unwrap());
        assert_ne!(gen_dataset(20, 3, &v, &c, 32).unwrap(), gen_dataset(20, 4, &v, &c, 32).unwrap());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (train, val) = split_indices(2000);
        assert_eq!(train.len() + val.len(), 2000);
        assert!(train.iter().all(|i| !val.contains(i)));
        assert!((150..250).contains(&val.len()), "{}", val.len());
    }
}
