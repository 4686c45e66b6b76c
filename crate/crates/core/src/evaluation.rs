//! Unlabeled sentence-level F1, per-category label recall, the extractor x
//! measure grid search, and the report writers.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::activations::{ExtractorSpec, SentenceActivations};
use crate::inducer::{self, BinTree, DistanceMeasure, InduceError};
use crate::measures::{CosMode, Family, MeasureId};
use crate::treebank::GoldTree;

/// Categories reported by default, in column order.
pub const DEFAULT_LABELS: [&str; 6] = ["SBAR", "NP", "VP", "PP", "ADJP", "ADVP"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sentence {id}: prediction covers {pred} words, gold has {gold}")]
    WordCount { id: String, pred: usize, gold: usize },
    #[error("{preds} predictions for {golds} gold trees")]
    Misaligned { preds: usize, golds: usize },
    #[error("no gold tree for sentence {0}")]
    MissingGold(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Induce(#[from] InduceError),
}

pub fn default_labels() -> Vec<String> {
    DEFAULT_LABELS.iter().map(|l| l.to_string()).collect()
}

fn nontrivial(spans: impl IntoIterator<Item = (usize, usize)>, n: usize) -> BTreeSet<(usize, usize)> {
    spans.into_iter().filter(|&(s, e)| e - s >= 2 && !(s == 0 && e == n)).collect()
}

fn check_words(pred: &BinTree, gold: &GoldTree) -> Result<usize, EvalError> {
    let n = gold.sentence.len();
    let p = pred.n_leaves();
    if p != n {
        return Err(EvalError::WordCount { id: gold.sentence.id.clone(), pred: p, gold: n });
    }
    Ok(n)
}

/// Unlabeled F1 over non-trivial spans (width >= 2, not the whole sentence),
/// gold duplicates collapsed. Two empty span sets score 1.
pub fn sentence_f1(pred: &BinTree, gold: &GoldTree) -> Result<f64, EvalError> {
    let n = check_words(pred, gold)?;
    let p = nontrivial(pred.spans(), n);
    let g = nontrivial(gold.spans.iter().map(|s| (s.start, s.end)), n);
    Ok(f1_of_sets(&p, &g))
}

fn f1_of_sets(p: &BTreeSet<(usize, usize)>, g: &BTreeSet<(usize, usize)>) -> f64 {
    match (p.is_empty(), g.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 2.0 * p.intersection(g).count() as f64 / (p.len() + g.len()) as f64,
    }
}

/// `(matched, total)` per label over gold constituents of width >= 2
/// (whole-sentence spans included, duplicates of the same labeled span
/// counted once).
pub fn label_counts(
    preds: &[BinTree],
    golds: &[GoldTree],
    labels: &[String],
) -> Result<BTreeMap<String, (usize, usize)>, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::Misaligned { preds: preds.len(), golds: golds.len() });
    }
    let mut counts: BTreeMap<String, (usize, usize)> = labels.iter().map(|l| (l.clone(), (0, 0))).collect();
    for (pred, gold) in preds.iter().zip(golds) {
        check_words(pred, gold)?;
        let predicted: BTreeSet<(usize, usize)> = pred.spans().into_iter().collect();
        let gold_spans: BTreeSet<(&str, usize, usize)> =
            gold.spans.iter().filter(|s| s.width() >= 2).map(|s| (s.label.as_str(), s.start, s.end)).collect();
        for (label, start, end) in gold_spans {
            if let Some((matched, total)) = counts.get_mut(label) {
                *total += 1;
                if predicted.contains(&(start, end)) {
                    *matched += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Recall per label; labels without any gold constituent are absent.
pub fn label_recall(
    preds: &[BinTree],
    golds: &[GoldTree],
    labels: &[String],
) -> Result<BTreeMap<String, f64>, EvalError> {
    Ok(recall_from_counts(&label_counts(preds, golds, labels)?))
}

fn recall_from_counts(counts: &BTreeMap<String, (usize, usize)>) -> BTreeMap<String, f64> {
    counts.iter().filter(|(_, &(_, total))| total > 0).map(|(l, &(m, t))| (l.clone(), m as f64 / t as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean sentence F1, times 100.
    pub s_f1: f64,
    pub label_recall: BTreeMap<String, f64>,
    pub per_sentence: Vec<(String, f64)>,
    pub counts: BTreeMap<String, (usize, usize)>,
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

pub fn evaluate(preds: &[BinTree], golds: &[GoldTree], labels: &[String]) -> Result<EvalReport, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::Misaligned { preds: preds.len(), golds: golds.len() });
    }
    if golds.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let per_sentence = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| Ok((g.sentence.id.clone(), sentence_f1(p, g)?)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    let f1s: Vec<f64> = per_sentence.iter().map(|(_, f)| *f).collect();
    let counts = label_counts(preds, golds, labels)?;
    Ok(EvalReport { s_f1: 100.0 * stable_mean(&f1s), label_recall: recall_from_counts(&counts), per_sentence, counts })
}

/// Averages reports of the same corpus (S-F1 and recall, per label).
pub fn average_reports(reports: &[EvalReport]) -> EvalReport {
    let k = reports.len() as f64;
    let s_f1 = reports.iter().map(|r| r.s_f1).sum::<f64>() / k;
    let mut label_recall = BTreeMap::new();
    for label in reports[0].label_recall.keys() {
        let mean = reports.iter().map(|r| r.label_recall[label]).sum::<f64>() / k;
        label_recall.insert(label.clone(), mean);
    }
    let per_sentence = reports[0]
        .per_sentence
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), reports.iter().map(|r| r.per_sentence[i].1).sum::<f64>() / k))
        .collect();
    EvalReport { s_f1, label_recall, per_sentence, counts: reports[0].counts.clone() }
}

/// Pairs each activation record with the gold tree of the same sentence id.
pub fn align_gold<'a>(acts: &[SentenceActivations], golds: &'a [GoldTree]) -> Result<Vec<&'a GoldTree>, EvalError> {
    let by_id: HashMap<&str, &GoldTree> = golds.iter().map(|g| (g.sentence.id.as_str(), g)).collect();
    acts.iter()
        .map(|a| {
            let gold =
                by_id.get(a.sentence_id.as_str()).ok_or_else(|| EvalError::MissingGold(a.sentence_id.clone()))?;
            if gold.sentence.len() != a.n_words() {
                return Err(EvalError::WordCount {
                    id: a.sentence_id.clone(),
                    pred: a.n_words(),
                    gold: gold.sentence.len(),
                });
            }
            Ok(*gold)
        })
        .collect()
}

/// Induces trees for every record and scores them.
pub fn evaluate_induced(
    acts: &[SentenceActivations],
    golds: &[&GoldTree],
    g: &ExtractorSpec,
    f: &DistanceMeasure,
    lambda: f64,
    labels: &[String],
) -> Result<EvalReport, EvalError> {
    let preds = acts.iter().map(|a| inducer::induce(g, f, lambda, a)).collect::<Result<Vec<_>, _>>()?;
    let owned: Vec<GoldTree> = golds.iter().map(|g| (*g).clone()).collect();
    evaluate(&preds, &owned, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub measure: MeasureId,
    pub extractor: ExtractorSpec,
    pub lambda: f64,
    pub s_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub entries: Vec<GridEntry>,
    pub best: usize,
    pub num_heads: usize,
}

impl GridResult {
    pub fn best(&self) -> &GridEntry {
        &self.entries[self.best]
    }
}

/// Ranking used to pick the best entry: higher S-F1, then lower layer, then
/// lower head (hidden states before heads, AVG last), then measure name.
fn grid_order(a: &GridEntry, b: &GridEntry, num_heads: usize) -> Ordering {
    b.s_f1
        .total_cmp(&a.s_f1)
        .then(a.extractor.layer().cmp(&b.extractor.layer()))
        .then(a.extractor.head_rank(num_heads).cmp(&b.extractor.head_rank(num_heads)))
        .then(a.measure.name().cmp(b.measure.name()))
}

fn compatible(m: MeasureId, g: &ExtractorSpec) -> bool {
    matches!(
        (g, m.family()),
        (ExtractorSpec::Hidden { .. }, Family::Vector) | (ExtractorSpec::Attn { .. }, Family::Distribution)
    )
}

/// All compatible `(measure, extractor)` pairs, extractor-major.
pub fn grid_pairs(measures: &[MeasureId], extractors: &[ExtractorSpec]) -> Vec<(MeasureId, ExtractorSpec)> {
    extractors.iter().flat_map(|g| measures.iter().filter(|m| compatible(**m, g)).map(move |m| (*m, *g))).collect()
}

/// Validation S-F1 of every compatible pair at a fixed `lambda`.
pub fn grid_search(
    acts: &[SentenceActivations],
    golds: &[GoldTree],
    measures: &[MeasureId],
    extractors: &[ExtractorSpec],
    lambda: f64,
    cos_mode: CosMode,
    num_heads: usize,
) -> Result<GridResult, EvalError> {
    if acts.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let aligned = align_gold(acts, golds)?;
    let pairs = grid_pairs(measures, extractors);
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let labels: Vec<String> = Vec::new();
    let entries = pairs
        .par_iter()
        .map(|&(measure, extractor)| {
            let f = DistanceMeasure::Standard { id: measure, cos_mode };
            let report = evaluate_induced(acts, &aligned, &extractor, &f, lambda, &labels)?;
            Ok(GridEntry { measure, extractor, lambda, s_f1: report.s_f1 })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let best =
        (0..entries.len()).min_by(|&a, &b| grid_order(&entries[a], &entries[b], num_heads)).expect("non-empty grid");
    Ok(GridResult { entries, best, num_heads })
}

/// Best S-F1 per layer over all measures and heads, sorted by layer.
pub fn layerwise_report(grid: &GridResult) -> Vec<(usize, f64)> {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for e in &grid.entries {
        let slot = best.entry(e.extractor.layer()).or_insert(f64::NEG_INFINITY);
        *slot = slot.max(e.s_f1);
    }
    best.into_iter().collect()
}

pub fn write_layerwise_csv<W: Write>(rows: &[(usize, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "layer,best_s_f1")?;
    for (layer, s) in rows {
        writeln!(out, "{layer},{s:.4}")?;
    }
    Ok(())
}

pub fn write_grid_tsv<W: Write>(grid: &GridResult, mut out: W) -> std::io::Result<()> {
    writeln!(out, "f\textractor\tL\tA\tlambda\tS-F1\tbest")?;
    for (i, e) in grid.entries.iter().enumerate() {
        let head = match e.extractor {
            ExtractorSpec::Hidden { .. } => "-".to_string(),
            ExtractorSpec::Attn { head: crate::activations::Head::Avg, .. } => "AVG".to_string(),
            ExtractorSpec::Attn { head: crate::activations::Head::Index(k), .. } => k.to_string(),
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{}",
            e.measure.name().to_uppercase(),
            e.extractor,
            e.extractor.layer(),
            head,
            e.lambda,
            e.s_f1,
            if i == grid.best { "*" } else { "" }
        )?;
    }
    Ok(())
}

/// One row of the results table.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub model: String,
    pub measure: String,
    pub layer: String,
    pub head: String,
    pub report: EvalReport,
}

impl ReportRow {
    pub fn plain(model: &str, report: EvalReport) -> Self {
        ReportRow { model: model.into(), measure: "-".into(), layer: "-".into(), head: "-".into(), report }
    }
}

/// Results table with S-F1 and label recall as percentages; labels without
/// gold constituents print as `-`.
pub fn write_report_tsv<W: Write>(rows: &[ReportRow], labels: &[String], mut out: W) -> std::io::Result<()> {
    write!(out, "Model\tf\tL\tA\tS-F1")?;
    for l in labels {
        write!(out, "\t{l}")?;
    }
    writeln!(out)?;
    for row in rows {
        write!(out, "{}\t{}\t{}\t{}\t{:.2}", row.model, row.measure, row.layer, row.head, row.report.s_f1)?;
        for l in labels {
            match row.report.label_recall.get(l) {
                Some(r) => write!(out, "\t{:.2}", 100.0 * r)?,
                None => write!(out, "\t-")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inducer::{baseline_tree, build_tree, BaselineKind};
    use crate::treebank::{default_punct_tags, parse_bracketed, preprocess};
    use proptest::prelude::*;

    fn gold(id: &str, text: &str) -> GoldTree {
        let tree = parse_bracketed(text).unwrap().remove(0);
        preprocess(id, &tree, &default_punct_tags()).unwrap().1
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|l| l.to_string()).collect()
    }

    #[test]
    fn identical_tree_scores_one() {
        let g = gold("a", "(S (NP (X a) (X b)) (VP (X c) (PP (X d) (X e))))");
        let pred = build_tree(5, &[1.0, 3.0, 2.0, 1.5]).unwrap();
        assert_eq!(sentence_f1(&pred, &g).unwrap(), 1.0);
    }

    #[test]
    fn two_words_empty_empty() {
        let g = gold("a", "(S (X a) (X b))");
        assert_eq!(sentence_f1(&build_tree(2, &[0.0]).unwrap(), &g).unwrap(), 1.0);
    }

    #[test]
    fn half_overlap() {
        let g = gold("a", "(S (A (X a) (X b)) (B (X c) (X d)))");
        let pred = baseline_tree(BaselineKind::Right, 4, 0, "a");
        assert_eq!(sentence_f1(&pred, &g).unwrap(), 0.5);
    }

    #[test]
    fn one_side_empty_scores_zero() {
        let flat = gold("a", "(S (X a) (X b) (X c))");
        let pred = baseline_tree(BaselineKind::Right, 3, 0, "a");
        assert_eq!(sentence_f1(&pred, &flat).unwrap(), 0.0);
    }

    #[test]
    fn word_count_mismatch() {
        let g = gold("a", "(S (X a) (X b) (X c))");
        assert!(matches!(sentence_f1(&BinTree::Leaf(0), &g), Err(EvalError::WordCount { .. })));
    }

    #[test]
    fn np_recall_two_of_three() {
        let golds = vec![
            gold("0", "(S (NP (X a) (X b)) (VP (X c) (NP (X d) (X e))))"),
            gold("1", "(S (NP (X a) (X b) (X c)) (VP (X d)))"),
        ];
        // Sentence 0's prediction ((a b) (c (d e))) has both NPs; the
        // right-branching tree of sentence 1 misses (0, 3).
        let preds = vec![build_tree(5, &[1.0, 4.0, 3.0, 2.0]).unwrap(), baseline_tree(BaselineKind::Right, 4, 0, "1")];
        let counts = label_counts(&preds, &golds, &labels(&["NP", "VP", "ADVP"])).unwrap();
        assert_eq!(counts["NP"], (2, 3));
        assert_eq!(counts["VP"], (1, 1));
        assert_eq!(counts["ADVP"], (0, 0));
        let recall = label_recall(&preds, &golds, &labels(&["NP", "ADVP"])).unwrap();
        assert!((recall["NP"] - 2.0 / 3.0).abs() < 1e-15);
        assert!(!recall.contains_key("ADVP"));
    }

    #[test]
    fn width_one_and_duplicates_excluded() {
        // ADVP over one word is not counted; the unary S->VP chain gives the
        // same (VP, span) once.
        let g = gold("0", "(S (ADVP (X a)) (VP (VP (X b) (X c))))");
        let pred = baseline_tree(BaselineKind::Right, 3, 0, "0");
        let counts = label_counts(&[pred], &[g], &labels(&["ADVP", "VP", "S"])).unwrap();
        assert_eq!(counts["ADVP"], (0, 0));
        assert_eq!(counts["VP"], (1, 1));
        assert_eq!(counts["S"], (1, 1));
    }

    #[test]
    fn right_branching_hits_suffix_vps() {
        let golds = vec![
            gold("0", "(S (NP (X a)) (VP (X b) (NP (X c) (X d))))"),
            gold("1", "(S (NP (X a) (X b)) (VP (X c) (X d) (X e)))"),
        ];
        let preds: Vec<_> = golds.iter().map(|g| baseline_tree(BaselineKind::Right, g.sentence.len(), 0, "")).collect();
        let recall = label_recall(&preds, &golds, &labels(&["VP"])).unwrap();
        assert_eq!(recall["VP"], 1.0);
    }

    #[test]
    fn misaligned_corpora() {
        let g = gold("0", "(S (X a) (X b))");
        assert!(matches!(label_counts(&[], &[g], &default_labels()), Err(EvalError::Misaligned { .. })));
        assert!(matches!(evaluate(&[], &[], &default_labels()), Err(EvalError::EmptyCorpus)));
    }

    fn entry(measure: MeasureId, extractor: &str, s_f1: f64) -> GridEntry {
        GridEntry { measure, extractor: extractor.parse().unwrap(), lambda: 0.0, s_f1 }
    }

    #[test]
    fn grid_tie_break() {
        let entries = [
            entry(MeasureId::Hel, "attn:3:avg", 40.0),
            entry(MeasureId::Jsd, "attn:2:5", 40.0),
            entry(MeasureId::Hel, "attn:2:5", 40.0),
            entry(MeasureId::L2, "hidden:4", 39.0),
        ];
        let best = (0..entries.len()).min_by(|&a, &b| grid_order(&entries[a], &entries[b], 12)).unwrap();
        assert_eq!(best, 2);
        let with_hidden = [entry(MeasureId::Jsd, "attn:2:1", 40.0), entry(MeasureId::Cos, "hidden:2", 40.0)];
        let best = (0..2).min_by(|&a, &b| grid_order(&with_hidden[a], &with_hidden[b], 12)).unwrap();
        assert_eq!(best, 1);
    }

    #[test]
    fn grid_pair_count_for_base_model() {
        let meta = crate::activations::ActivationMeta::new("xlnet-base", 12, 12, 768, "ptb");
        let pairs = grid_pairs(&MeasureId::ALL, &ExtractorSpec::enumerate(&meta));
        assert_eq!(pairs.len(), 348);
    }

    #[test]
    fn layerwise_max_per_layer() {
        let grid = GridResult {
            entries: vec![
                entry(MeasureId::Cos, "hidden:1", 10.0),
                entry(MeasureId::Hel, "attn:1:2", 15.0),
                entry(MeasureId::L1, "hidden:7", 30.0),
                entry(MeasureId::Jsd, "attn:7:avg", 35.5),
                entry(MeasureId::Jsd, "attn:3:1", 20.0),
            ],
            best: 3,
            num_heads: 2,
        };
        assert_eq!(layerwise_report(&grid), vec![(1, 15.0), (3, 20.0), (7, 35.5)]);
        let mut csv = Vec::new();
        write_layerwise_csv(&layerwise_report(&grid), &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "layer,best_s_f1\n1,15.0000\n3,20.0000\n7,35.5000\n");
    }

    #[test]
    fn report_tsv_marks_empty_buckets() {
        let g = gold("0", "(S (NP (X a) (X b)) (VP (X c) (X d)))");
        let pred = build_tree(4, &[1.0, 2.0, 1.0]).unwrap();
        let report = evaluate(&[pred], &[g], &default_labels()).unwrap();
        let mut buf = Vec::new();
        write_report_tsv(&[ReportRow::plain("gold", report)], &default_labels(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "Model\tf\tL\tA\tS-F1\tSBAR\tNP\tVP\tPP\tADJP\tADVP\ngold\t-\t-\t-\t100.00\t-\t100.00\t100.00\t-\t-\t-\n"
        );
    }

    proptest! {
        #[test]
        fn f1_symmetric_and_bounded(
            a in prop::collection::btree_set((0usize..6, 1usize..7), 0..8),
            b in prop::collection::btree_set((0usize..6, 1usize..7), 0..8),
        ) {
            let f_ab = f1_of_sets(&a, &b);
            prop_assert_eq!(f_ab, f1_of_sets(&b, &a));
            prop_assert!((0.0..=1.0).contains(&f_ab));
        }

        #[test]
        fn predicted_nontrivial_count_is_n_minus_two(d in prop::collection::vec(0.0f64..1.0, 1..30)) {
            let n = d.len() + 1;
            let t = build_tree(n, &d).unwrap();
            prop_assert_eq!(nontrivial(t.spans(), n).len(), n - 2);
        }
    }
}
