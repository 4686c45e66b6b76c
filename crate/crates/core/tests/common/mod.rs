//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use plmtrees::activations::{fixture, word_hidden};
use plmtrees::fideal::Example;
use plmtrees::inducer::build_tree;
use plmtrees::treebank::{default_punct_tags, preprocess, GoldTree, RawTree};
use plmtrees::BinTree;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Span set that recursive argmax splitting would produce, computed
/// without recursion: with distinct distances, gap `k` heads the constituent
/// reaching out to the nearest strictly larger gap on each side.
pub fn reference_spans(d: &[f64]) -> BTreeSet<(usize, usize)> {
    let m = d.len();
    let mut out = BTreeSet::new();
    for k in 0..m {
        let mut left = k;
        while left > 0 && d[left - 1] < d[k] {
            left -= 1;
        }
        let mut right = k + 1;
        while right < m && d[right] < d[k] {
            right += 1;
        }
        // Gaps left..right sit between words left..=right.
        out.insert((left, right + 1));
    }
    out
}

/// Gold tree mirroring a binary tree, every internal node labeled `T`.
pub fn gold_from_bintree(id: &str, tree: &BinTree) -> GoldTree {
    fn to_raw(t: &BinTree) -> RawTree {
        match t {
            BinTree::Leaf(i) => RawTree::Leaf { pos: "X".into(), word: format!("w{i}") },
            BinTree::Node(l, r) => RawTree::Node { label: "T".into(), children: vec![to_raw(l), to_raw(r)] },
        }
    }
    let raw = match tree {
        BinTree::Leaf(_) => RawTree::Node { label: "T".into(), children: vec![to_raw(tree)] },
        _ => to_raw(tree),
    };
    preprocess(id, &raw, &default_punct_tags()).unwrap().1
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Synthetic benchmark whose target distances are `u . [r_i; r_{i+1}]`.
pub struct LinearCorpus {
    pub examples: Vec<Example>,
    pub golds: Vec<GoldTree>,
}

/// Word vectors pass through PLMA records and `word_hidden`; sentences whose
/// targets contain two values closer than `min_gap` are resampled.
pub fn linear_corpus(
    rng: &mut ChaCha8Rng,
    direction: &[f64],
    sentences: usize,
    scale: f64,
    min_gap: f64,
    informative: bool,
) -> LinearCorpus {
    let h = direction.len() / 2;
    let mut examples = Vec::new();
    let mut golds = Vec::new();
    while examples.len() < sentences {
        let n = rng.gen_range(3..=10);
        let vectors: Vec<Vec<f32>> = (0..n).map(|_| (0..h).map(|_| (scale * gaussian(rng)) as f32).collect()).collect();
        let id = examples.len().to_string();
        let acts = fixture::from_word_vectors(&id, 1, &[vectors]);
        let words = word_hidden(&acts, 1).unwrap();
        let target: Vec<f64> = if informative {
            words
                .windows(2)
                .map(|p| {
                    let (a, b) = direction.split_at(h);
                    a.iter().zip(&p[0]).map(|(x, y)| x * y).sum::<f64>()
                        + b.iter().zip(&p[1]).map(|(x, y)| x * y).sum::<f64>()
                })
                .collect()
        } else {
            (0..n - 1).map(|_| scale * gaussian(rng)).collect()
        };
        let mut sorted = target.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] < min_gap) {
            continue;
        }
        let tree = build_tree(n, &target).unwrap();
        golds.push(gold_from_bintree(&id, &tree));
        examples.push(Example { id, words, gold: target });
    }
    LinearCorpus { examples, golds }
}

pub fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}
