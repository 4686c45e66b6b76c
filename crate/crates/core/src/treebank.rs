//! Bracketed treebank ingestion and the evaluation-time preprocessing:
//! punctuation and empty elements are dropped, emptied constituents are
//! pruned, and every surviving constituent yields one labeled span over the
//! renumbered word positions.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::inducer::DistanceVector;
use crate::sexpr::{self, Sexpr, SexprError};

/// POS tags treated as punctuation unless the caller overrides the set.
pub const DEFAULT_PUNCT_TAGS: [&str; 9] = ["#", "$", "''", "``", ",", ".", ":", "-LRB-", "-RRB-"];

/// Empty elements (traces, null complementizers) never surface as words.
const EMPTY_ELEMENT_TAG: &str = "-NONE-";

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("parse error: {0}")]
    Syntax(#[from] SexprError),
    #[error("malformed tree at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: &'static str },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawTree {
    Leaf { pos: String, word: String },
    Node { label: String, children: Vec<RawTree> },
}

impl RawTree {
    pub fn label(&self) -> &str {
        match self {
            RawTree::Leaf { pos, .. } => pos,
            RawTree::Node { label, .. } => label,
        }
    }

    pub fn leaves(&self) -> Vec<(&str, &str)> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<(&'a str, &'a str)>) {
        match self {
            RawTree::Leaf { pos, word } => out.push((word, pos)),
            RawTree::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }
}

impl fmt::Display for RawTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawTree::Leaf { pos, word } => write!(f, "({pos} {word})"),
            RawTree::Node { label, children } => {
                write!(f, "({label}")?;
                for child in children {
                    write!(f, " {child}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub words: Vec<String>,
    pub pos: Vec<String>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A labeled constituent over post-preprocessing word positions, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GoldSpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl GoldSpan {
    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTree {
    pub sentence: Sentence,
    /// One entry per internal node in preorder; unary chains give duplicates.
    pub spans: Vec<GoldSpan>,
    /// The preprocessed tree the spans were read from.
    pub tree: RawTree,
}

/// Removes function tags and coindexation ("NP-SBJ-1" -> "NP", "NP=2" -> "NP").
/// Labels that start with '-' ("-NONE-", "-LRB-") are kept intact.
pub fn strip_function_tags(label: &str) -> &str {
    if label.starts_with('-') {
        return label;
    }
    match label.find(['-', '=']) {
        Some(0) | None => label,
        Some(cut) => &label[..cut],
    }
}

/// Parses every bracketed tree in `text`. A label-less outer wrapper around a
/// single tree, as in `( (S ...) )`, is removed.
pub fn parse_bracketed(text: &str) -> Result<Vec<RawTree>, TreebankError> {
    sexpr::parse_all(text)?
        .iter()
        .map(|expr| match expr {
            Sexpr::List(items, _) if items.len() == 1 && matches!(items[0], Sexpr::List(..)) => to_raw(&items[0]),
            _ => to_raw(expr),
        })
        .collect()
}

fn to_raw(expr: &Sexpr) -> Result<RawTree, TreebankError> {
    let (items, offset) = match expr {
        Sexpr::List(items, off) => (items, *off),
        Sexpr::Atom(_) => unreachable!("atoms are only visited as list members"),
    };
    let label = match &items[0] {
        Sexpr::Atom(label) => label.as_str(),
        Sexpr::List(..) => return Err(TreebankError::Malformed { offset, reason: "constituent without a label" }),
    };
    let rest = &items[1..];
    match rest {
        [] => Err(TreebankError::Malformed { offset, reason: "constituent without children" }),
        [Sexpr::Atom(word)] => Ok(RawTree::Leaf { pos: label.to_string(), word: word.clone() }),
        _ => {
            let children = rest
                .iter()
                .map(|child| match child {
                    Sexpr::Atom(_) => {
                        Err(TreebankError::Malformed { offset, reason: "bare word mixed with constituents" })
                    }
                    list => to_raw(list),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(RawTree::Node { label: strip_function_tags(label).to_string(), children })
        }
    }
}

pub fn read_treebank(path: &Path) -> Result<Vec<RawTree>, TreebankError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TreebankError::Io { path: path.display().to_string(), source })?;
    parse_bracketed(&text)
}

pub fn default_punct_tags() -> BTreeSet<String> {
    DEFAULT_PUNCT_TAGS.iter().map(|t| t.to_string()).collect()
}

/// Applies punctuation removal and extracts gold spans. Returns `None` (with a
/// warning) when nothing survives.
pub fn preprocess(id: &str, tree: &RawTree, punct: &BTreeSet<String>) -> Option<(Sentence, GoldTree)> {
    let Some(pruned) = prune(tree, punct) else {
        log::warn!("sentence {id}: no words left after punctuation removal, dropped");
        return None;
    };
    let mut words = Vec::new();
    let mut pos = Vec::new();
    for (w, p) in pruned.leaves() {
        words.push(w.to_string());
        pos.push(p.to_string());
    }
    let mut spans = Vec::new();
    collect_spans(&pruned, 0, &mut spans);
    let sentence = Sentence { id: id.to_string(), words, pos };
    let gold = GoldTree { sentence: sentence.clone(), spans, tree: pruned };
    Some((sentence, gold))
}

fn prune(tree: &RawTree, punct: &BTreeSet<String>) -> Option<RawTree> {
    match tree {
        RawTree::Leaf { pos, .. } => {
            if punct.contains(pos) || pos == EMPTY_ELEMENT_TAG {
                None
            } else {
                Some(tree.clone())
            }
        }
        RawTree::Node { label, children } => {
            let kept: Vec<RawTree> = children.iter().filter_map(|c| prune(c, punct)).collect();
            if kept.is_empty() {
                None
            } else {
                Some(RawTree::Node { label: label.clone(), children: kept })
            }
        }
    }
}

/// Returns the number of words under `tree`.
fn collect_spans(tree: &RawTree, start: usize, out: &mut Vec<GoldSpan>) -> usize {
    match tree {
        RawTree::Leaf { .. } => 1,
        RawTree::Node { label, children } => {
            let slot = out.len();
            out.push(GoldSpan { label: label.clone(), start, end: start });
            let mut end = start;
            for child in children {
                end += collect_spans(child, end, out);
            }
            out[slot].end = end;
            end - start
        }
    }
}

/// Reads a treebank file and preprocesses every tree. Sentence ids are the
/// zero-based position of the tree in the file, so dropped trees leave gaps.
pub fn load_gold(path: &Path, punct: &BTreeSet<String>) -> Result<Vec<GoldTree>, TreebankError> {
    Ok(read_treebank(path)?
        .iter()
        .enumerate()
        .filter_map(|(i, tree)| preprocess(&i.to_string(), tree, punct).map(|(_, gold)| gold))
        .collect())
}

/// Distances read off the gold tree: `maxdepth - depth(LCA(w_i, w_{i+1}))`,
/// where depth counts internal nodes from the root (depth 0) and `maxdepth`
/// is one more than the deepest internal node. Larger means an earlier split.
pub fn gold_distances(gold: &GoldTree) -> DistanceVector {
    let n = gold.sentence.len();
    let mut nodes = Vec::new();
    internal_depths(&gold.tree, 0, 0, &mut nodes);
    let max_depth = nodes.iter().map(|&(_, _, d)| d).max().unwrap_or(0) + 1;
    let values = (0..n.saturating_sub(1))
        .map(|i| {
            let lca = nodes
                .iter()
                .filter(|&&(s, e, _)| s <= i && e >= i + 2)
                .map(|&(_, _, d)| d)
                .max()
                .expect("the root covers every adjacent pair");
            (max_depth - lca) as f64
        })
        .collect();
    DistanceVector { sentence_id: gold.sentence.id.clone(), values }
}

fn internal_depths(tree: &RawTree, start: usize, depth: usize, out: &mut Vec<(usize, usize, usize)>) -> usize {
    match tree {
        RawTree::Leaf { .. } => 1,
        RawTree::Node { children, .. } => {
            let mut end = start;
            for child in children {
                end += internal_depths(child, end, depth + 1, out);
            }
            out.push((start, end, depth));
            end - start
        }
    }
}

/// Writes `id<TAB>label<TAB>start<TAB>end` rows, one per gold span.
pub fn write_spans_tsv<W: Write>(golds: &[GoldTree], mut out: W) -> std::io::Result<()> {
    writeln!(out, "id\tlabel\tstart\tend")?;
    for gold in golds {
        for span in &gold.spans {
            writeln!(out, "{}\t{}\t{}\t{}", gold.sentence.id, span.label, span.start, span.end)?;
        }
    }
    Ok(())
}
