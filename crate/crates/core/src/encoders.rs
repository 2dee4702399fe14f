//! Input encoders: word-level tokenizer, scene images with a linear patch
//! embedding, learnable query slots, and multi-modality sequence composition.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Rng};
use crate::params::{Graph, Param};
use crate::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_SPECIALS: usize = 4;

const SPECIAL_WORDS: [&str; N_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary, frozen after dataset generation.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from a word iterator: specials first, then unique words in
    /// sorted order so construction is deterministic.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut uniq: Vec<String> = words
            .into_iter()
            .filter(|w| !SPECIAL_WORDS.contains(&w.as_str()))
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut all: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
        all.extend(uniq);
        if all.len() > 128 {
            return Err(Error::Config(format!("vocab size {} exceeds 128", all.len())));
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocab { words: all, index })
    }

    /// Builds from a text corpus, one vocabulary entry per normalized word.
    pub fn from_corpus<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Result<Self> {
        let words = texts.into_iter().flat_map(normalize);
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    /// CRC-32 of the serialized word list; stored in checkpoints so a model
    /// is never run against a different vocabulary.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.to_text().as_bytes())
    }

    fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if words.len() < N_SPECIALS || words[..N_SPECIALS] != SPECIAL_WORDS.map(String::from) {
            return Err(Error::Data(format!("{}: missing special-token header", path.display())));
        }
        if words.len() > 128 {
            return Err(Error::Data(format!("{}: vocab too large", path.display())));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocab { words, index })
    }
}

/// Lowercase and split on whitespace/punctuation; total on any input.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// BOS ... EOS wrapped token ids; out-of-vocabulary words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    let mut ids = vec![BOS];
    for w in normalize(text) {
        ids.push(vocab.id(&w).unwrap_or(UNK));
    }
    ids.push(EOS);
    ids
}

/// Content words joined by spaces; specials are dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id >= N_SPECIALS)
        .filter_map(|&id| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ")
}

// ── Scene images ─────────────────────────────────────────────────────

/// Fixed-resolution RGB image, bytes row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl SceneImage {
    pub fn new(width: usize, height: usize) -> Self {
        SceneImage { width, height, pixels: vec![0u8; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.pixels.len() * 2);
        for b in &self.pixels {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn from_hex(width: usize, height: usize, hex: &str) -> Result<Self> {
        if hex.len() != width * height * 6 {
            return Err(Error::Data(format!(
                "image hex length {} does not match {width}x{height}",
                hex.len()
            )));
        }
        let mut pixels = Vec::with_capacity(width * height * 3);
        let bytes = hex.as_bytes();
        for i in (0..bytes.len()).step_by(2) {
            let hi = (bytes[i] as char).to_digit(16);
            let lo = (bytes[i + 1] as char).to_digit(16);
            match (hi, lo) {
                (Some(h), Some(l)) => pixels.push((h * 16 + l) as u8),
                _ => return Err(Error::Data("invalid hex digit in image".into())),
            }
        }
        Ok(SceneImage { width, height, pixels })
    }

    /// Binary portable pixmap (P6) bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

// ── Patch embedding ──────────────────────────────────────────────────

/// Linear per-patch projection plus a learned 2-D patch-position table.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Param,
    pub pos: Param,
    pub patch_size: usize,
}

impl PatchEmbed {
    pub fn init(
        prefix: &str,
        image_size: usize,
        patch_size: usize,
        d_model: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let p = n_patches(image_size, patch_size)?;
        let in_dim = patch_size * patch_size * 3;
        Ok(PatchEmbed {
            proj: Param::new(format!("{prefix}.proj"), Tensor::xavier(in_dim, d_model, rng)),
            pos: Param::new(format!("{prefix}.pos"), Tensor::zeros(vec![p, d_model])),
            patch_size,
        })
    }

    /// Patch embeddings [P x d_model] on the graph.
    pub fn encode(&self, graph: &mut Graph, img: &SceneImage) -> Result<NodeId> {
        let flat = patchify(img, self.patch_size)?;
        let x = graph.tape.leaf(&flat);
        let w = graph.param(&self.proj);
        let projected = graph.tape.matmul(x, w)?;
        let pos = graph.param(&self.pos);
        graph.tape.add(projected, pos)
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.proj);
        out.push(&self.pos);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.proj);
        out.push(&mut self.pos);
    }
}

pub fn n_patches(image_size: usize, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || image_size % patch_size != 0 {
        return Err(Error::Config(format!(
            "image size {image_size} not divisible by patch size {patch_size}"
        )));
    }
    let per_side = image_size / patch_size;
    Ok(per_side * per_side)
}

/// Row-major patch matrix [P x (patch*patch*3)], pixel bytes scaled to [0,1].
pub fn patchify(img: &SceneImage, patch_size: usize) -> Result<Tensor> {
    if img.width != img.height {
        return Err(Error::Config(format!("non-square image {}x{}", img.width, img.height)));
    }
    let p = n_patches(img.width, patch_size)?;
    let per_side = img.width / patch_size;
    let in_dim = patch_size * patch_size * 3;
    let mut data = Vec::with_capacity(p * in_dim);
    for py in 0..per_side {
        for px in 0..per_side {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let rgb = img.get(px * patch_size + dx, py * patch_size + dy);
                    data.extend(rgb.iter().map(|&b| b as f64 / 255.0));
                }
            }
        }
    }
    Tensor::from_vec(vec![p, in_dim], data)
}

// ── Sequence composition ─────────────────────────────────────────────

/// Modality of a sequence position, in segment order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text,
    Image,
    Query,
    Response,
}

impl Modality {
    pub const ALL: [Modality; 4] =
        [Modality::Text, Modality::Image, Modality::Query, Modality::Response];

    pub fn segment_rank(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
            Modality::Query => 2,
            Modality::Response => 3,
        }
    }
}

/// Ordered modality segments with per-position tags. Concatenation order is
/// fixed: text prompt, image patches, query slots, response.
#[derive(Clone, Debug)]
pub struct ComposedSequence {
    pub prompt_ids: Vec<usize>,
    pub n_patches: usize,
    pub n_queries: usize,
    pub response_ids: Vec<usize>,
}

impl ComposedSequence {
    pub fn len(&self) -> usize {
        self.prompt_ids.len() + self.n_patches + self.n_queries + self.response_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn seg_len(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.prompt_ids.len(),
            Modality::Image => self.n_patches,
            Modality::Query => self.n_queries,
            Modality::Response => self.response_ids.len(),
        }
    }

    /// Half-open position range of a segment.
    pub fn segment_range(&self, m: Modality) -> std::ops::Range<usize> {
        let mut start = 0;
        for &seg in &Modality::ALL {
            if seg == m {
                return start..start + self.seg_len(seg);
            }
            start += self.seg_len(seg);
        }
        unreachable!()
    }

    /// Per-position modality tags.
    pub fn tags(&self) -> Vec<Modality> {
        let mut out = Vec::with_capacity(self.len());
        for &seg in &Modality::ALL {
            out.extend(std::iter::repeat(seg).take(self.seg_len(seg)));
        }
        out
    }

    /// Non-empty segments in order, as (modality, range).
    pub fn segments(&self) -> Vec<(Modality, std::ops::Range<usize>)> {
        Modality::ALL
            .iter()
            .map(|&m| (m, self.segment_range(m)))
            .filter(|(_, r)| !r.is_empty())
            .collect()
    }

    /// Global position indices, each repeated `per` times (per-head views).
    pub fn positions_repeated(&self, per: usize) -> Arc<Vec<usize>> {
        let mut v = Vec::with_capacity(self.len() * per);
        for i in 0..self.len() {
            v.extend(std::iter::repeat(i).take(per));
        }
        Arc::new(v)
    }
}

pub fn compose_sequence(
    prompt_ids: Vec<usize>,
    n_patches: usize,
    n_queries: usize,
    response_ids: Option<Vec<usize>>,
) -> ComposedSequence {
    ComposedSequence {
        prompt_ids,
        n_patches,
        n_queries,
        response_ids: response_ids.unwrap_or_default(),
    }
}
