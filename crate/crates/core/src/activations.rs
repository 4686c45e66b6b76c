//! The PLMA v1 activation container and the word-level views built from it.
//!
//! Layout (all integers u32 little-endian, all tensors f32 little-endian):
//!
//! ```text
//! "PLMA" | version=1 | meta_len | meta JSON (meta_len bytes)
//! record*: id_len | id (UTF-8) | n_words | T | alignment (n_words x [start, end))
//!          | hidden (layers x T x hidden_dim) | attn (layers x heads x T x T)
//! ```
//!
//! Layers and heads are 1-based at the API surface; layer 1 is the first
//! transformer block, not the embedding layer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PLMA";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";
/// Allowed deviation of a stored attention row from summing to one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ActivationError {
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("truncated record {record}: {source}")]
    Truncated {
        record: usize,
        #[source]
        source: io::Error,
    },
    #[error("invalid metadata JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sentence {sentence_id}: {reason}")]
    Validation { sentence_id: String, reason: String },
    #[error(
        "sentence {sentence_id}: attention row does not sum to 1 \
         (layer {layer}, head {head}, row {row}, sum {sum})"
    )]
    AttentionRow { sentence_id: String, layer: usize, head: usize, row: usize, sum: f64 },
    #[error("bad extractor {0:?}: expected hidden:<layer> or attn:<layer>:<head|avg>")]
    ExtractorSyntax(String),
}

fn invalid(sentence_id: &str, reason: impl Into<String>) -> ActivationError {
    ActivationError::Validation { sentence_id: sentence_id.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMeta {
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub corpus_id: String,
    pub dtype: String,
    /// Producer-specific fields (tokenizer details and the like), kept verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ActivationMeta {
    pub fn new(model_name: &str, num_layers: usize, num_heads: usize, hidden_dim: usize, corpus_id: &str) -> Self {
        ActivationMeta {
            model_name: model_name.to_string(),
            num_layers,
            num_heads,
            hidden_dim,
            corpus_id: corpus_id.to_string(),
            dtype: DTYPE.to_string(),
            extra: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<(), ActivationError> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 {
            return Err(ActivationError::Format("num_layers, num_heads and hidden_dim must be positive".into()));
        }
        if self.dtype != DTYPE {
            return Err(ActivationError::Format(format!("unsupported dtype {:?}", self.dtype)));
        }
        Ok(())
    }
}

/// Subword-level activations for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceActivations {
    pub sentence_id: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub n_subwords: usize,
    /// Half-open subword range of each word. Special tokens are in no range.
    pub alignment: Vec<(usize, usize)>,
    /// `[layer][subword][dim]`, flattened.
    pub hidden: Vec<f32>,
    /// `[layer][head][row][col]`, flattened.
    pub attn: Vec<f32>,
}

impl SentenceActivations {
    pub fn n_words(&self) -> usize {
        self.alignment.len()
    }

    /// Hidden state of subword `t` on 0-based `layer`.
    pub fn hidden_at(&self, layer: usize, t: usize) -> &[f32] {
        let h = self.hidden_dim;
        let off = (layer * self.n_subwords + t) * h;
        &self.hidden[off..off + h]
    }

    /// Attention row of subword `row`, 0-based `layer` and `head`.
    pub fn attn_row(&self, layer: usize, head: usize, row: usize) -> &[f32] {
        let t = self.n_subwords;
        let off = ((layer * self.num_heads + head) * t + row) * t;
        &self.attn[off..off + t]
    }

    /// Checks shapes, alignment ordering and attention normalization.
    pub fn validate(&self) -> Result<(), ActivationError> {
        let id = &self.sentence_id;
        let t = self.n_subwords;
        if self.hidden.len() != self.num_layers * t * self.hidden_dim {
            return Err(invalid(id, format!("hidden tensor has {} values", self.hidden.len())));
        }
        if self.attn.len() != self.num_layers * self.num_heads * t * t {
            return Err(invalid(id, format!("attention tensor has {} values", self.attn.len())));
        }
        let mut prev_end = 0;
        for (w, &(start, end)) in self.alignment.iter().enumerate() {
            if start > end || end > t {
                return Err(invalid(id, format!("word {w} range [{start}, {end}) outside [0, {t})")));
            }
            if start < prev_end {
                return Err(invalid(id, format!("word {w} range [{start}, {end}) overlaps or is out of order")));
            }
            prev_end = end;
        }
        if let Some(bad) = self.hidden.iter().position(|v| !v.is_finite()) {
            return Err(invalid(id, format!("non-finite hidden value at flat index {bad}")));
        }
        for layer in 0..self.num_layers {
            for head in 0..self.num_heads {
                for row in 0..t {
                    let values = self.attn_row(layer, head, row);
                    let sum: f64 = values.iter().map(|&v| v as f64).sum();
                    let negative = values.iter().any(|&v| v.is_nan() || v < 0.0);
                    if negative || sum.is_nan() || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(ActivationError::AttentionRow {
                            sentence_id: id.clone(),
                            layer: layer + 1,
                            head: head + 1,
                            row,
                            sum,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<(), ActivationError> {
        if layer == 0 || layer > self.num_layers {
            return Err(invalid(&self.sentence_id, format!("layer {layer} outside 1..={}", self.num_layers)));
        }
        Ok(())
    }

    fn check_ranges(&self) -> Result<(), ActivationError> {
        match self.alignment.iter().position(|&(s, e)| s == e) {
            Some(w) => Err(invalid(&self.sentence_id, format!("word {w} has an empty subword range"))),
            None => Ok(()),
        }
    }
}

/// Attention head selector; `Avg` is the elementwise mean of a layer's heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Index(usize),
    Avg,
}

/// Representation extractor: a layer's hidden states or one of its attention heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExtractorSpec {
    Hidden { layer: usize },
    Attn { layer: usize, head: Head },
}

impl ExtractorSpec {
    pub fn layer(&self) -> usize {
        match *self {
            ExtractorSpec::Hidden { layer } | ExtractorSpec::Attn { layer, .. } => layer,
        }
    }

    /// Head number in the grid ordering: 0 for hidden states, `a + 1` for AVG.
    pub fn head_rank(&self, num_heads: usize) -> usize {
        match *self {
            ExtractorSpec::Hidden { .. } => 0,
            ExtractorSpec::Attn { head: Head::Index(k), .. } => k,
            ExtractorSpec::Attn { head: Head::Avg, .. } => num_heads + 1,
        }
    }

    pub fn validate(&self, meta: &ActivationMeta) -> Result<(), ActivationError> {
        let layer = self.layer();
        if layer == 0 || layer > meta.num_layers {
            return Err(ActivationError::Format(format!("extractor {self}: layer outside 1..={}", meta.num_layers)));
        }
        if let ExtractorSpec::Attn { head: Head::Index(k), .. } = *self {
            if k == 0 || k > meta.num_heads {
                return Err(ActivationError::Format(format!(
                    "extractor {self}: head outside 1..={} (or avg)",
                    meta.num_heads
                )));
            }
        }
        Ok(())
    }

    /// Every extractor available for a model: hidden states of each layer,
    /// then each attention head and the AVG head of each layer.
    pub fn enumerate(meta: &ActivationMeta) -> Vec<ExtractorSpec> {
        let mut out = Vec::new();
        for layer in 1..=meta.num_layers {
            out.push(ExtractorSpec::Hidden { layer });
        }
        for layer in 1..=meta.num_layers {
            for k in 1..=meta.num_heads {
                out.push(ExtractorSpec::Attn { layer, head: Head::Index(k) });
            }
            out.push(ExtractorSpec::Attn { layer, head: Head::Avg });
        }
        out
    }
}

impl fmt::Display for ExtractorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractorSpec::Hidden { layer } => write!(f, "hidden:{layer}"),
            ExtractorSpec::Attn { layer, head: Head::Index(k) } => write!(f, "attn:{layer}:{k}"),
            ExtractorSpec::Attn { layer, head: Head::Avg } => write!(f, "attn:{layer}:avg"),
        }
    }
}

impl FromStr for ExtractorSpec {
    type Err = ActivationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ActivationError::ExtractorSyntax(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let layer = |p: &str| p.parse::<usize>().ok().filter(|&l| l > 0).ok_or_else(bad);
        match parts.as_slice() {
            ["hidden", l] => Ok(ExtractorSpec::Hidden { layer: layer(l)? }),
            ["attn", l, h] => {
                let head = if h.eq_ignore_ascii_case("avg") {
                    Head::Avg
                } else {
                    Head::Index(h.parse::<usize>().ok().filter(|&k| k > 0).ok_or_else(bad)?)
                };
                Ok(ExtractorSpec::Attn { layer: layer(l)?, head })
            }
            _ => Err(bad()),
        }
    }
}

/// Word representations on a 1-based `layer`: the mean of each word's
/// subword hidden states, computed in f64.
pub fn word_hidden(acts: &SentenceActivations, layer: usize) -> Result<Vec<Vec<f64>>, ActivationError> {
    acts.check_layer(layer)?;
    acts.check_ranges()?;
    Ok(acts
        .alignment
        .iter()
        .map(|&(start, end)| {
            let mut row = vec![0.0f64; acts.hidden_dim];
            for t in start..end {
                for (acc, &v) in row.iter_mut().zip(acts.hidden_at(layer - 1, t)) {
                    *acc += v as f64;
                }
            }
            let count = (end - start) as f64;
            row.iter_mut().for_each(|v| *v /= count);
            row
        })
        .collect())
}

/// Word-to-word attention distributions on a 1-based `layer` and head.
///
/// Subword rows of a word are averaged, subword columns of a word are summed,
/// columns of special tokens are dropped and each row is renormalized.
pub fn word_attention(acts: &SentenceActivations, layer: usize, head: Head) -> Result<Vec<Vec<f64>>, ActivationError> {
    acts.check_layer(layer)?;
    acts.check_ranges()?;
    let t = acts.n_subwords;
    let heads: Vec<usize> = match head {
        Head::Index(k) if k >= 1 && k <= acts.num_heads => vec![k - 1],
        Head::Index(k) => return Err(invalid(&acts.sentence_id, format!("head {k} outside 1..={}", acts.num_heads))),
        Head::Avg => (0..acts.num_heads).collect(),
    };
    let scale = 1.0 / heads.len() as f64;
    let mut subword = vec![vec![0.0f64; t]; t];
    for &h in &heads {
        for (row, out) in subword.iter_mut().enumerate() {
            for (acc, &v) in out.iter_mut().zip(acts.attn_row(layer - 1, h, row)) {
                *acc += v as f64;
            }
        }
    }
    for row in subword.iter_mut() {
        row.iter_mut().for_each(|v| *v *= scale);
    }

    let mut words = Vec::with_capacity(acts.n_words());
    for (i, &(rs, re)) in acts.alignment.iter().enumerate() {
        let count = (re - rs) as f64;
        let mut row: Vec<f64> = acts
            .alignment
            .iter()
            .map(|&(cs, ce)| subword[rs..re].iter().map(|r| r[cs..ce].iter().sum::<f64>()).sum::<f64>() / count)
            .collect();
        let total: f64 = row.iter().sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(invalid(
                &acts.sentence_id,
                format!("word {i} has no attention mass on sentence words (layer {layer}, head {head:?})"),
            ));
        }
        row.iter_mut().for_each(|v| *v /= total);
        words.push(row);
    }
    Ok(words)
}

/// Streaming reader over a PLMA v1 source.
pub struct ActivationReader<R> {
    inner: R,
    meta: ActivationMeta,
    next_record: usize,
    done: bool,
}

impl ActivationReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, ActivationError> {
        ActivationReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> ActivationReader<R> {
    pub fn new(mut inner: R) -> Result<Self, ActivationError> {
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ActivationError::Format(format!("bad magic bytes {magic:?}")));
        }
        let version = read_u32(&mut inner)?;
        if version != VERSION {
            return Err(ActivationError::Format(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut inner)? as usize;
        let mut json = vec![0u8; len];
        inner.read_exact(&mut json)?;
        let meta: ActivationMeta = serde_json::from_slice(&json)?;
        meta.validate()?;
        Ok(ActivationReader { inner, meta, next_record: 0, done: false })
    }

    pub fn meta(&self) -> &ActivationMeta {
        &self.meta
    }

    fn read_record(&mut self) -> Result<Option<SentenceActivations>, ActivationError> {
        let record = self.next_record;
        // A clean end of input is only allowed on a record boundary.
        let mut first = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.inner.read(&mut first[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => {
                    let source = io::Error::new(io::ErrorKind::UnexpectedEof, "partial record header");
                    return Err(ActivationError::Truncated { record, source });
                }
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let truncated = |source| ActivationError::Truncated { record, source };
        let id_len = u32::from_le_bytes(first) as usize;
        let mut id = vec![0u8; id_len];
        self.inner.read_exact(&mut id).map_err(truncated)?;
        let sentence_id = String::from_utf8(id)
            .map_err(|_| ActivationError::Format(format!("record {record}: sentence id is not UTF-8")))?;
        let n_words = read_u32(&mut self.inner).map_err(truncated)? as usize;
        let n_subwords = read_u32(&mut self.inner).map_err(truncated)? as usize;
        let mut alignment = Vec::with_capacity(n_words.min(1 << 16));
        for _ in 0..n_words {
            let s = read_u32(&mut self.inner).map_err(truncated)? as usize;
            let e = read_u32(&mut self.inner).map_err(truncated)? as usize;
            alignment.push((s, e));
        }
        let m = &self.meta;
        let sizes = m.num_layers.checked_mul(n_subwords).and_then(|x| x.checked_mul(m.hidden_dim)).zip(
            m.num_layers
                .checked_mul(m.num_heads)
                .and_then(|x| x.checked_mul(n_subwords))
                .and_then(|x| x.checked_mul(n_subwords)),
        );
        let Some((hidden_len, attn_len)) = sizes else {
            return Err(ActivationError::Format(format!("record {record}: tensor size overflow")));
        };
        let hidden = read_f32s(&mut self.inner, hidden_len).map_err(truncated)?;
        let attn = read_f32s(&mut self.inner, attn_len).map_err(truncated)?;
        let acts = SentenceActivations {
            sentence_id,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            hidden_dim: m.hidden_dim,
            n_subwords,
            alignment,
            hidden,
            attn,
        };
        acts.validate()?;
        self.next_record += 1;
        Ok(Some(acts))
    }
}

impl<R: Read> Iterator for ActivationReader<R> {
    type Item = Result<SentenceActivations, ActivationError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.read_record().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

/// Reads a whole PLMA file into memory.
pub fn read_activations(path: &Path) -> Result<(ActivationMeta, Vec<SentenceActivations>), ActivationError> {
    let reader = ActivationReader::open(path)?;
    let meta = reader.meta().clone();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((meta, records))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes PLMA v1 files. Used by test fixtures and synthetic benchmarks.
pub struct ActivationWriter<W: Write> {
    inner: W,
    meta: ActivationMeta,
}

impl ActivationWriter<BufWriter<File>> {
    pub fn create(path: &Path, meta: &ActivationMeta) -> Result<Self, ActivationError> {
        ActivationWriter::new(BufWriter::new(File::create(path)?), meta)
    }
}

impl<W: Write> ActivationWriter<W> {
    pub fn new(mut inner: W, meta: &ActivationMeta) -> Result<Self, ActivationError> {
        meta.validate()?;
        let json = serde_json::to_vec(meta)?;
        inner.write_all(MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        inner.write_all(&u32_len(json.len())?.to_le_bytes())?;
        inner.write_all(&json)?;
        Ok(ActivationWriter { inner, meta: meta.clone() })
    }

    pub fn write(&mut self, acts: &SentenceActivations) -> Result<(), ActivationError> {
        let m = &self.meta;
        if (acts.num_layers, acts.num_heads, acts.hidden_dim) != (m.num_layers, m.num_heads, m.hidden_dim) {
            return Err(invalid(&acts.sentence_id, "tensor shape does not match the file header"));
        }
        acts.validate()?;
        let w = &mut self.inner;
        w.write_all(&u32_len(acts.sentence_id.len())?.to_le_bytes())?;
        w.write_all(acts.sentence_id.as_bytes())?;
        w.write_all(&u32_len(acts.n_words())?.to_le_bytes())?;
        w.write_all(&u32_len(acts.n_subwords)?.to_le_bytes())?;
        for &(s, e) in &acts.alignment {
            w.write_all(&u32_len(s)?.to_le_bytes())?;
            w.write_all(&u32_len(e)?.to_le_bytes())?;
        }
        for v in acts.hidden.iter().chain(&acts.attn) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, ActivationError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

fn u32_len(n: usize) -> Result<u32, ActivationError> {
    u32::try_from(n).map_err(|_| ActivationError::Format(format!("value {n} does not fit in u32")))
}

/// Builders for synthetic activation records.
pub mod fixture {
    use rand::Rng;

    use super::*;

    /// One subword per word, no special tokens.
    pub fn identity_alignment(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, i + 1)).collect()
    }

    /// Consecutive ranges for the given subword counts, starting at `offset`.
    pub fn alignment_from_counts(counts: &[usize], offset: usize) -> Vec<(usize, usize)> {
        let mut at = offset;
        counts
            .iter()
            .map(|&c| {
                let range = (at, at + c);
                at += c;
                range
            })
            .collect()
    }

    /// A record whose every word is one subword carrying `vectors[layer][word]`
    /// and whose attention is uniform on every head.
    pub fn from_word_vectors(id: &str, num_heads: usize, vectors: &[Vec<Vec<f32>>]) -> SentenceActivations {
        let num_layers = vectors.len();
        let n = vectors[0].len();
        let hidden_dim = vectors[0].first().map_or(1, Vec::len);
        let hidden = vectors.iter().flatten().flatten().copied().collect();
        let attn = vec![1.0 / n as f32; num_layers * num_heads * n * n];
        SentenceActivations {
            sentence_id: id.to_string(),
            num_layers,
            num_heads,
            hidden_dim,
            n_subwords: n,
            alignment: identity_alignment(n),
            hidden,
            attn,
        }
    }

    /// A record with one subword per word, zero hidden states and the given
    /// word-level attention matrices, indexed `[layer][head][row][col]`.
    pub fn from_attention(id: &str, hidden_dim: usize, matrices: &[Vec<Vec<Vec<f32>>>]) -> SentenceActivations {
        let num_layers = matrices.len();
        let num_heads = matrices[0].len();
        let n = matrices[0][0].len();
        SentenceActivations {
            sentence_id: id.to_string(),
            num_layers,
            num_heads,
            hidden_dim,
            n_subwords: n,
            alignment: identity_alignment(n),
            hidden: vec![0.0; num_layers * n * hidden_dim],
            attn: matrices.iter().flatten().flatten().flatten().copied().collect(),
        }
    }

    /// Random record: Gaussian-ish hidden states, softmax attention rows, the
    /// given subword count per word and optional leading/trailing special tokens.
    pub fn random<R: Rng>(
        id: &str,
        meta: &ActivationMeta,
        subword_counts: &[usize],
        special_tokens: bool,
        rng: &mut R,
    ) -> SentenceActivations {
        let offset = usize::from(special_tokens);
        let content: usize = subword_counts.iter().sum();
        let t = content + 2 * offset;
        let hidden = (0..meta.num_layers * t * meta.hidden_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut attn = Vec::with_capacity(meta.num_layers * meta.num_heads * t * t);
        for _ in 0..meta.num_layers * meta.num_heads * t {
            let logits: Vec<f64> = (0..t).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            attn.extend(logits.iter().map(|l| (l.exp() / z) as f32));
        }
        SentenceActivations {
            sentence_id: id.to_string(),
            num_layers: meta.num_layers,
            num_heads: meta.num_heads,
            hidden_dim: meta.hidden_dim,
            n_subwords: t,
            alignment: alignment_from_counts(subword_counts, offset),
            hidden,
            attn,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixture::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta(l: usize, a: usize, h: usize) -> ActivationMeta {
        ActivationMeta::new("toy", l, a, h, "unit")
    }

    fn write_all(meta: &ActivationMeta, records: &[SentenceActivations]) -> Vec<u8> {
        let mut w = ActivationWriter::new(Vec::new(), meta).unwrap();
        for r in records {
            w.write(r).unwrap();
        }
        w.finish().unwrap()
    }

    /// Serializes without validation, for malformed-input tests.
    fn raw_bytes(meta: &ActivationMeta, acts: &SentenceActivations) -> Vec<u8> {
        let mut bytes = write_all(meta, &[]);
        bytes.extend((acts.sentence_id.len() as u32).to_le_bytes());
        bytes.extend(acts.sentence_id.as_bytes());
        bytes.extend((acts.n_words() as u32).to_le_bytes());
        bytes.extend((acts.n_subwords as u32).to_le_bytes());
        for &(s, e) in &acts.alignment {
            bytes.extend((s as u32).to_le_bytes());
            bytes.extend((e as u32).to_le_bytes());
        }
        for v in acts.hidden.iter().chain(&acts.attn) {
            bytes.extend(v.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn empty_file_yields_metadata_only() {
        let m = meta(2, 3, 4);
        let bytes = write_all(&m, &[]);
        let reader = ActivationReader::new(bytes.as_slice()).unwrap();
        assert_eq!(reader.meta(), &m);
        assert_eq!(reader.count(), 0);
    }

    #[test]
    fn small_record_round_trips() {
        let m = meta(1, 1, 2);
        let acts = SentenceActivations {
            sentence_id: "s0".into(),
            num_layers: 1,
            num_heads: 1,
            hidden_dim: 2,
            n_subwords: 3,
            alignment: vec![(0, 2), (2, 3)],
            hidden: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            attn: vec![0.5, 0.25, 0.25, 0.0, 1.0, 0.0, 0.125, 0.375, 0.5],
        };
        let bytes = write_all(&m, std::slice::from_ref(&acts));
        let read: Vec<_> = ActivationReader::new(bytes.as_slice()).unwrap().collect::<Result<_, _>>().unwrap();
        assert_eq!(read, vec![acts]);
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let mut m = meta(2, 2, 3);
        m.extra.insert("tokenizer".into(), serde_json::json!({"bos": "<s>"}));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let records: Vec<_> =
            (0..4).map(|i| random(&format!("s{i}"), &m, &[1, 2, 1, 3], i % 2 == 0, &mut rng)).collect();
        let bytes = write_all(&m, &records);
        let reader = ActivationReader::new(bytes.as_slice()).unwrap();
        let meta_back = reader.meta().clone();
        let back: Vec<_> = reader.collect::<Result<_, _>>().unwrap();
        assert_eq!(write_all(&meta_back, &back), bytes);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_all(&meta(1, 1, 1), &[]);
        bytes[0] = b'X';
        assert!(matches!(ActivationReader::new(bytes.as_slice()), Err(ActivationError::Format(_))));
        let mut bytes = write_all(&meta(1, 1, 1), &[]);
        bytes[4] = 2;
        assert!(matches!(ActivationReader::new(bytes.as_slice()), Err(ActivationError::Format(_))));
    }

    #[test]
    fn truncated_record_names_index() {
        let m = meta(1, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let records: Vec<_> = (0..2).map(|i| random(&format!("s{i}"), &m, &[1, 1], false, &mut rng)).collect();
        let mut bytes = write_all(&m, &records);
        bytes.truncate(bytes.len() - 3);
        let results: Vec<_> = ActivationReader::new(bytes.as_slice()).unwrap().collect();
        assert_eq!(results.len(), 2);
        assert!(results[0].is_ok());
        assert!(matches!(results[1], Err(ActivationError::Truncated { record: 1, .. })));
    }

    #[test]
    fn attention_row_off_by_point_two_rejected() {
        let m = meta(1, 1, 1);
        let mut acts = from_attention("bad", 1, &[vec![vec![vec![0.5, 0.5], vec![0.4, 0.4]]]]);
        acts.hidden = vec![0.0; 2];
        let bytes = raw_bytes(&m, &acts);
        let err = ActivationReader::new(bytes.as_slice()).unwrap().next().unwrap().unwrap_err();
        match err {
            ActivationError::AttentionRow { layer, head, row, sum, .. } => {
                assert_eq!((layer, head, row), (1, 1, 1));
                assert!((sum - 0.8).abs() < 1e-6);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn overlapping_alignment_rejected() {
        let m = meta(1, 1, 1);
        let mut acts = from_attention("x", 1, &[vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]]]);
        acts.alignment = vec![(0, 2), (1, 2)];
        assert!(matches!(acts.validate(), Err(ActivationError::Validation { .. })));
        let _ = m;
    }

    #[test]
    fn word_hidden_means() {
        let single = from_word_vectors("a", 1, &[vec![vec![1.5, -2.0]]]);
        assert_eq!(word_hidden(&single, 1).unwrap(), vec![vec![1.5, -2.0]]);

        let mut acts = from_word_vectors("b", 1, &[vec![vec![1.0, 1.0], vec![3.0, 3.0]]]);
        acts.alignment = vec![(0, 2)];
        assert_eq!(word_hidden(&acts, 1).unwrap(), vec![vec![2.0, 2.0]]);
    }

    #[test]
    fn word_hidden_matches_elementwise_oracle() {
        let m = meta(3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let acts = random("r", &m, &[1, 2, 1], true, &mut rng);
        for layer in 1..=3 {
            let got = word_hidden(&acts, layer).unwrap();
            for (w, &(s, e)) in acts.alignment.iter().enumerate() {
                for (d, value) in got[w].iter().enumerate() {
                    let mut acc = 0.0f64;
                    for t in s..e {
                        acc += acts.hidden[((layer - 1) * acts.n_subwords + t) * 5 + d] as f64;
                    }
                    assert_eq!(*value, acc / (e - s) as f64);
                }
            }
        }
    }

    #[test]
    fn word_ops_reject_bad_layer_and_empty_range() {
        let mut acts = from_word_vectors("e", 1, &[vec![vec![1.0], vec![2.0]]]);
        assert!(word_hidden(&acts, 0).is_err());
        assert!(word_hidden(&acts, 2).is_err());
        acts.alignment = vec![(0, 0), (0, 2)];
        assert!(word_hidden(&acts, 1).is_err());
        assert!(word_attention(&acts, 1, Head::Avg).is_err());
    }

    #[test]
    fn identity_alignment_aggregation_is_identity() {
        let mat = vec![vec![0.2f32, 0.8, 0.0], vec![0.1, 0.1, 0.8], vec![0.3, 0.3, 0.4]];
        let acts = from_attention("i", 1, &[vec![mat.clone()]]);
        let got = word_attention(&acts, 1, Head::Index(1)).unwrap();
        for (g, m) in got.iter().zip(&mat) {
            for (a, b) in g.iter().zip(m) {
                assert!((a - *b as f64).abs() < 1e-7);
            }
        }
    }

    /// Word 0 = subwords {0, 1}, word 1 = subword {2}. Row average of
    /// (0.5, 0.5, 0) and (0, 0.5, 0.5) is (0.25, 0.5, 0.25); column sums give
    /// (0.75, 0.25). Word 1's row (0.2, 0.3, 0.5) gives (0.5, 0.5).
    #[test]
    fn two_subword_word_aggregation() {
        let mat = vec![vec![0.5f32, 0.5, 0.0], vec![0.0, 0.5, 0.5], vec![0.2, 0.3, 0.5]];
        let mut acts = from_attention("w", 1, &[vec![mat]]);
        acts.alignment = vec![(0, 2), (2, 3)];
        let got = word_attention(&acts, 1, Head::Index(1)).unwrap();
        let expected = [[0.75, 0.25], [0.5, 0.5]];
        for (g, e) in got.iter().zip(expected) {
            assert!((g[0] - e[0]).abs() < 1e-7 && (g[1] - e[1]).abs() < 1e-7, "{got:?}");
        }
    }

    #[test]
    fn special_token_mass_is_renormalized() {
        // Subword 0 is a special token outside every range.
        let mat = vec![vec![1.0f32, 0.0, 0.0], vec![0.5, 0.25, 0.25], vec![0.6, 0.0, 0.4]];
        let mut acts = from_attention("s", 1, &[vec![mat]]);
        acts.alignment = vec![(1, 2), (2, 3)];
        let got = word_attention(&acts, 1, Head::Index(1)).unwrap();
        assert_eq!(got, vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
    }

    #[test]
    fn degenerate_row_rejected() {
        let mat = vec![vec![1.0f32, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.5]];
        let mut acts = from_attention("d", 1, &[vec![mat]]);
        acts.alignment = vec![(1, 2), (2, 3)];
        assert!(matches!(word_attention(&acts, 1, Head::Avg), Err(ActivationError::Validation { .. })));
    }

    #[test]
    fn avg_head_is_mean_of_heads() {
        let a = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![0.5f32, 0.5], vec![0.25, 0.75]];
        let acts = from_attention("h", 1, &[vec![a, b]]);
        let got = word_attention(&acts, 1, Head::Avg).unwrap();
        assert_eq!(got, vec![vec![0.75, 0.25], vec![0.125, 0.875]]);
    }

    #[test]
    fn extractor_strings() {
        assert_eq!("hidden:11".parse::<ExtractorSpec>().unwrap(), ExtractorSpec::Hidden { layer: 11 });
        assert_eq!("attn:9:avg".parse::<ExtractorSpec>().unwrap(), ExtractorSpec::Attn { layer: 9, head: Head::Avg });
        assert_eq!(
            "attn:2:3".parse::<ExtractorSpec>().unwrap(),
            ExtractorSpec::Attn { layer: 2, head: Head::Index(3) }
        );
        for bad in ["hidden:0", "attn:1", "attn:1:0", "embed:1", "hidden:x"] {
            assert!(bad.parse::<ExtractorSpec>().is_err(), "{bad}");
        }
        let spec = ExtractorSpec::Attn { layer: 4, head: Head::Avg };
        assert_eq!(spec.to_string().parse::<ExtractorSpec>().unwrap(), spec);

        let m = meta(12, 12, 8);
        assert!("attn:12:12".parse::<ExtractorSpec>().unwrap().validate(&m).is_ok());
        assert!("attn:12:13".parse::<ExtractorSpec>().unwrap().validate(&m).is_err());
        assert!("hidden:13".parse::<ExtractorSpec>().unwrap().validate(&m).is_err());
        assert_eq!(ExtractorSpec::enumerate(&m).len(), 12 + 12 * 13);
    }
}
