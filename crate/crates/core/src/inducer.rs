//! Syntactic distances, the right-skewness bias, and binary tree construction
//! by recursive splitting at the largest distance.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::activations::{word_attention, word_hidden, ActivationError, ExtractorSpec, SentenceActivations};
use crate::fideal::LinearScorer;
use crate::measures::{self, CosMode, Family, MeasureError, MeasureId};
use crate::sexpr::{self, Sexpr, SexprError};

/// Label written on every internal node of an induced tree.
pub const DUMMY_LABEL: &str = "T";

#[derive(Debug, Error)]
pub enum InduceError {
    #[error("measure {measure} cannot be combined with extractor {extractor}")]
    FamilyMismatch { measure: String, extractor: ExtractorSpec },
    #[error("sentence {sentence_id}: {reason}")]
    Domain { sentence_id: String, reason: String },
    #[error("sentence {sentence_id}: {source}")]
    Measure {
        sentence_id: String,
        #[source]
        source: MeasureError,
    },
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error("distance vector has {got} entries for {words} words")]
    LengthMismatch { got: usize, words: usize },
    #[error("non-finite distance at index {0}")]
    NonFinite(usize),
    #[error("bad tree: {0}")]
    TreeSyntax(String),
    #[error(transparent)]
    Sexpr(#[from] SexprError),
}

/// Adjacent-word distances of one sentence; `values[i]` sits between words
/// `i` and `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceVector {
    pub sentence_id: String,
    pub values: Vec<f64>,
}

impl DistanceVector {
    pub fn new(sentence_id: &str, values: Vec<f64>) -> Self {
        DistanceVector { sentence_id: sentence_id.to_string(), values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BinTree {
    Leaf(usize),
    Node(Box<BinTree>, Box<BinTree>),
}

impl BinTree {
    fn node(left: BinTree, right: BinTree) -> BinTree {
        BinTree::Node(Box::new(left), Box::new(right))
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            BinTree::Leaf(_) => 1,
            BinTree::Node(l, r) => l.n_leaves() + r.n_leaves(),
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(&mut |t| {
            if let BinTree::Leaf(i) = t {
                out.push(*i);
            }
        });
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a BinTree)) {
        f(self);
        if let BinTree::Node(l, r) = self {
            l.visit(f);
            r.visit(f);
        }
    }

    /// `(start, end)` of every internal node in preorder, root first. A tree
    /// over `n` words has `n - 1` of them.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.collect_spans(&mut out);
        out
    }

    /// Returns the covered range.
    fn collect_spans(&self, out: &mut Vec<(usize, usize)>) -> (usize, usize) {
        match self {
            BinTree::Leaf(i) => (*i, i + 1),
            BinTree::Node(l, r) => {
                let slot = out.len();
                out.push((0, 0));
                let (start, _) = l.collect_spans(out);
                let (_, end) = r.collect_spans(out);
                out[slot] = (start, end);
                (start, end)
            }
        }
    }

    /// Bracketed rendering with the dummy label, e.g. `(T (T a b) (T c d))`.
    /// Leaves print as their word, or as their index when `words` is `None`.
    pub fn render(&self, words: Option<&[String]>) -> String {
        let mut out = String::new();
        match self {
            BinTree::Leaf(_) => {
                out.push('(');
                out.push_str(DUMMY_LABEL);
                out.push(' ');
                self.render_into(words, &mut out);
                out.push(')');
            }
            BinTree::Node(..) => self.render_into(words, &mut out),
        }
        out
    }

    fn render_into(&self, words: Option<&[String]>, out: &mut String) {
        match self {
            BinTree::Leaf(i) => match words {
                Some(w) => out.push_str(&w[*i]),
                None => out.push_str(&i.to_string()),
            },
            BinTree::Node(l, r) => {
                out.push('(');
                out.push_str(DUMMY_LABEL);
                out.push(' ');
                l.render_into(words, out);
                out.push(' ');
                r.render_into(words, out);
                out.push(')');
            }
        }
    }

    /// Parses one rendered binary tree, returning it with its leaf words.
    pub fn parse(text: &str) -> Result<(BinTree, Vec<String>), InduceError> {
        let exprs = sexpr::parse_all(text)?;
        let [expr] = exprs.as_slice() else {
            return Err(InduceError::TreeSyntax(format!("expected one tree, found {}", exprs.len())));
        };
        let mut words = Vec::new();
        let tree = match expr {
            Sexpr::List(items, _) if items.len() == 2 => match &items[1] {
                Sexpr::Atom(w) => {
                    words.push(w.clone());
                    BinTree::Leaf(0)
                }
                list => from_sexpr(list, &mut words)?,
            },
            other => from_sexpr(other, &mut words)?,
        };
        Ok((tree, words))
    }
}

fn from_sexpr(expr: &Sexpr, words: &mut Vec<String>) -> Result<BinTree, InduceError> {
    match expr {
        Sexpr::Atom(w) => {
            words.push(w.clone());
            Ok(BinTree::Leaf(words.len() - 1))
        }
        Sexpr::List(items, off) => match items.as_slice() {
            [Sexpr::Atom(_), left, right] => {
                let l = from_sexpr(left, words)?;
                let r = from_sexpr(right, words)?;
                Ok(BinTree::node(l, r))
            }
            _ => Err(InduceError::TreeSyntax(format!("node at byte {off} is not a labeled binary node"))),
        },
    }
}

/// Splits words `lo..hi` recursively; `choose(lo, hi)` returns the index `k`
/// of the last word of the left part (`lo <= k < hi - 1`).
fn split_recursive(lo: usize, hi: usize, choose: &mut impl FnMut(usize, usize) -> usize) -> BinTree {
    if hi - lo == 1 {
        return BinTree::Leaf(lo);
    }
    let k = choose(lo, hi);
    debug_assert!(lo <= k && k + 1 < hi);
    let left = split_recursive(lo, k + 1, choose);
    let right = split_recursive(k + 1, hi, choose);
    BinTree::node(left, right)
}

/// Builds the binary tree over `n` words by splitting at the largest
/// distance, leftmost on ties.
pub fn build_tree(n: usize, distances: &[f64]) -> Result<BinTree, InduceError> {
    if n == 0 || distances.len() + 1 != n {
        return Err(InduceError::LengthMismatch { got: distances.len(), words: n });
    }
    if let Some(i) = distances.iter().position(|d| !d.is_finite()) {
        return Err(InduceError::NonFinite(i));
    }
    Ok(split_recursive(0, n, &mut |lo, hi| {
        let mut best = lo;
        for i in lo + 1..hi - 1 {
            if distances[i] > distances[best] {
                best = i;
            }
        }
        best
    }))
}

/// Adds the linearly decaying right-skewness term
/// `lambda * mean(d) * (1 - i / (m - 1))` to each `d[i]` (0-based `i`).
/// With a single distance the factor is 1.
pub fn inject_bias(d: &DistanceVector, lambda: f64) -> DistanceVector {
    let m = d.values.len();
    if m == 0 || lambda == 0.0 {
        return d.clone();
    }
    let avg = d.values.iter().sum::<f64>() / m as f64;
    let values = d
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let factor = if m == 1 { 1.0 } else { 1.0 - i as f64 / (m - 1) as f64 };
            v + lambda * avg * factor
        })
        .collect();
    DistanceVector { sentence_id: d.sentence_id.clone(), values }
}

/// The distance function applied to adjacent word representations.
#[derive(Debug, Clone)]
pub enum DistanceMeasure {
    Standard { id: MeasureId, cos_mode: CosMode },
    Learned(LinearScorer),
}

impl DistanceMeasure {
    pub fn standard(id: MeasureId) -> Self {
        DistanceMeasure::Standard { id, cos_mode: CosMode::Paper }
    }

    pub fn family(&self) -> Family {
        match self {
            DistanceMeasure::Standard { id, .. } => id.family(),
            DistanceMeasure::Learned(_) => Family::Vector,
        }
    }

    pub fn name(&self) -> String {
        match self {
            DistanceMeasure::Standard { id, .. } => id.name().to_string(),
            DistanceMeasure::Learned(s) => format!("fideal(layer {})", s.layer),
        }
    }
}

/// Distances between every pair of adjacent words under extractor `g` and measure `f`.
pub fn syntactic_distances(
    g: &ExtractorSpec,
    f: &DistanceMeasure,
    acts: &SentenceActivations,
) -> Result<DistanceVector, InduceError> {
    let compatible = matches!(
        (g, f.family()),
        (ExtractorSpec::Hidden { .. }, Family::Vector) | (ExtractorSpec::Attn { .. }, Family::Distribution)
    );
    if !compatible {
        return Err(InduceError::FamilyMismatch { measure: f.name(), extractor: *g });
    }
    let id = &acts.sentence_id;
    if acts.n_words() == 0 {
        return Err(InduceError::Domain { sentence_id: id.clone(), reason: "sentence has no words".into() });
    }
    let reps = match *g {
        ExtractorSpec::Hidden { layer } => word_hidden(acts, layer)?,
        ExtractorSpec::Attn { layer, head } => word_attention(acts, layer, head)?,
    };
    let values = reps
        .windows(2)
        .map(|pair| match f {
            DistanceMeasure::Standard { id: m, cos_mode } => measures::measure(*m, &pair[0], &pair[1], *cos_mode)
                .map_err(|source| InduceError::Measure { sentence_id: id.clone(), source }),
            DistanceMeasure::Learned(scorer) => scorer
                .score(&pair[0], &pair[1])
                .map_err(|e| InduceError::Domain { sentence_id: id.clone(), reason: e.to_string() }),
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(DistanceVector { sentence_id: id.clone(), values })
}

/// Distances, optional bias, then tree construction for one sentence.
pub fn induce(
    g: &ExtractorSpec,
    f: &DistanceMeasure,
    lambda: f64,
    acts: &SentenceActivations,
) -> Result<BinTree, InduceError> {
    let d = inject_bias(&syntactic_distances(g, f, acts)?, lambda);
    build_tree(acts.n_words(), &d.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    Balanced,
    Left,
    Right,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Balanced => "balanced",
            BaselineKind::Left => "left",
            BaselineKind::Right => "right",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(BaselineKind::Random),
            "balanced" => Ok(BaselineKind::Balanced),
            "left" => Ok(BaselineKind::Left),
            "right" => Ok(BaselineKind::Right),
            other => Err(format!("unknown baseline {other:?}")),
        }
    }
}

/// Per-sentence seed, so results do not depend on processing order.
pub fn sentence_seed(seed: u64, sentence_id: &str) -> u64 {
    // FNV-1a, stable across platforms and toolchains.
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(sentence_id.as_bytes()) {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// One of the four naive trees over `n >= 1` words. `seed` and `sentence_id`
/// only matter for `Random`.
pub fn baseline_tree(kind: BaselineKind, n: usize, seed: u64, sentence_id: &str) -> BinTree {
    assert!(n >= 1, "baseline trees need at least one word");
    match kind {
        BaselineKind::Right => split_recursive(0, n, &mut |lo, _| lo),
        BaselineKind::Left => split_recursive(0, n, &mut |_, hi| hi - 2),
        // Left part takes ceil(m / 2) words, m = number of gaps.
        BaselineKind::Balanced => split_recursive(0, n, &mut |lo, hi| lo + (hi - lo - 1).div_ceil(2) - 1),
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(sentence_seed(seed, sentence_id));
            let d: Vec<f64> = (0..n - 1).map(|_| rng.gen::<f64>()).collect();
            build_tree(n, &d).expect("finite distances of the right length")
        }
    }
}
