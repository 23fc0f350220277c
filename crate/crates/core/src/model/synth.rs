//! Glyph-grid documents: token ids rendered as fixed bitmaps on a cell grid,
//! read back in row-major order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::vision::Raster;

/// Beginning-of-text marker.
pub const BOS: usize = 0;
/// Prefix marking instruction-style documents.
pub const QUERY: usize = 1;
/// First id used for document content.
pub const FIRST_CONTENT_ID: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self, ModelError> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(ModelError::Index { id: bad, vocab });
        }
        Ok(TokenSequence { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocStyle {
    /// One row of glyphs.
    Caption,
    /// Glyphs over several rows.
    Document,
    /// Like `Document`, with a query prefix token.
    Instruction,
}

impl DocStyle {
    /// Text tokens placed before the target.
    pub fn prefix(self) -> &'static [usize] {
        match self {
            DocStyle::Caption | DocStyle::Document => &[BOS],
            DocStyle::Instruction => &[QUERY, BOS],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Glyph cell side in pixels.
    pub cell: usize,
    pub channels: usize,
    /// Seed of the glyph bitmaps, shared by every document.
    pub font_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 56,
            height: 56,
            cell: 14,
            channels: 1,
            font_seed: 0x5eed_f047,
        }
    }
}

impl SynthConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.cell, self.width / self.cell)
    }

    pub fn capacity(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }
}

/// Injective map from token id to a `cell × cell` binary bitmap. The outer
/// pixel ring stays blank so neighbouring glyphs never touch.
#[derive(Clone, Debug)]
pub struct GlyphFont {
    cell: usize,
    bitmaps: Vec<Vec<bool>>,
}

impl GlyphFont {
    pub fn new(vocab: usize, cell: usize, seed: u64) -> Result<Self, ModelError> {
        if cell < 3 {
            return Err(ModelError::Input(format!("glyph cell of {cell} px is too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut bitmaps = Vec::with_capacity(vocab);
        while bitmaps.len() < vocab {
            let bits: Vec<bool> = (0..cell * cell)
                .map(|i| {
                    let (y, x) = (i / cell, i % cell);
                    let inner = y > 0 && x > 0 && y + 1 < cell && x + 1 < cell;
                    // the draw happens for every pixel so the stream position
                    // does not depend on the margin
                    let bit = rng.gen_bool(0.5);
                    inner && bit
                })
                .collect();
            if seen.insert(bits.clone()) {
                bitmaps.push(bits);
            }
        }
        Ok(GlyphFont { cell, bitmaps })
    }

    pub fn vocab(&self) -> usize {
        self.bitmaps.len()
    }

    pub fn bitmap(&self, id: usize) -> &[bool] {
        &self.bitmaps[id]
    }

    pub fn cell(&self) -> usize {
        self.cell
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDoc {
    pub seed: u64,
    pub style: DocStyle,
    pub image: Raster,
    pub target: TokenSequence,
}

impl SynthDoc {
    /// Teacher-forcing input ids and per-position targets for the text
    /// segment: `prefix ++ target[..M-1]`, predicting `target` from the last
    /// prefix position onwards.
    pub fn text_io(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        text_io(self.style, &self.target.ids)
    }
}

pub fn text_io(style: DocStyle, target: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let prefix = style.prefix();
    let mut input = prefix.to_vec();
    if !target.is_empty() {
        input.extend_from_slice(&target[..target.len() - 1]);
    }
    let mut targets = vec![None; input.len() - target.len()];
    targets.extend(target.iter().map(|&t| Some(t)));
    (input, targets)
}

/// Renders `ids` in row-major cell order.
pub fn render(ids: &[usize], font: &GlyphFont, cfg: &SynthConfig) -> Result<Raster, ModelError> {
    if ids.len() > cfg.capacity() {
        return Err(ModelError::Input(format!(
            "{} tokens do not fit a {}-cell glyph grid",
            ids.len(),
            cfg.capacity()
        )));
    }
    if font.cell() != cfg.cell {
        return Err(ModelError::Input("font cell size differs from the page cell size".into()));
    }
    let cols = cfg.grid().1;
    let mut img = Raster::blank(cfg.width, cfg.height, cfg.channels);
    for (k, &id) in ids.iter().enumerate() {
        if id >= font.vocab() {
            return Err(ModelError::Index { id, vocab: font.vocab() });
        }
        let (x0, y0) = ((k % cols) * cfg.cell, (k / cols) * cfg.cell);
        for (i, &on) in font.bitmap(id).iter().enumerate() {
            if on {
                for c in 0..cfg.channels {
                    img.set(x0 + i % cfg.cell, y0 + i / cfg.cell, c, 255);
                }
            }
        }
    }
    Ok(img)
}

/// One document with `num_tokens` content ids drawn from the seeded stream.
pub fn synth_document(
    seed: u64,
    num_tokens: usize,
    style: DocStyle,
    font: &GlyphFont,
    cfg: &SynthConfig,
) -> Result<SynthDoc, ModelError> {
    let vocab = font.vocab();
    if vocab <= FIRST_CONTENT_ID {
        return Err(ModelError::Input(format!("vocabulary of {vocab} leaves no content tokens")));
    }
    if num_tokens > cfg.capacity() {
        return Err(ModelError::Input(format!(
            "{num_tokens} tokens do not fit a {}-cell glyph grid",
            cfg.capacity()
        )));
    }
    if style == DocStyle::Caption && num_tokens > cfg.grid().1 {
        return Err(ModelError::Input(format!(
            "caption of {num_tokens} tokens exceeds one row of {}",
            cfg.grid().1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..num_tokens).map(|_| rng.gen_range(FIRST_CONTENT_ID..vocab)).collect();
    let image = render(&ids, font, cfg)?;
    Ok(SynthDoc {
        seed,
        style,
        image,
        target: TokenSequence::new(ids, vocab)?,
    })
}

/// Deterministic per-document seed derived from a corpus seed.
pub fn doc_seed(corpus_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = corpus_seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `count` documents of one style; lengths are uniform in `1..=max_len` where
/// `max_len` is one row for captions and the full grid otherwise.
pub fn synth_corpus(
    corpus_seed: u64,
    count: usize,
    style: DocStyle,
    font: &GlyphFont,
    cfg: &SynthConfig,
) -> Result<Vec<SynthDoc>, ModelError> {
    let max_len = match style {
        DocStyle::Caption => cfg.grid().1,
        _ => cfg.capacity(),
    };
    (0..count as u64)
        .map(|i| {
            let seed = doc_seed(corpus_seed, i);
            let len = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5).gen_range(1..=max_len);
            synth_document(seed, len, style, font, cfg)
        })
        .collect()
}
