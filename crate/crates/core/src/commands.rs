//! Command-line front end. Every command builds its whole output in memory
//! and writes it only once all sentences succeeded.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::activations::{read_activations, word_attention, ExtractorSpec, Head, SentenceActivations};
use crate::evaluation::{self, ReportRow};
use crate::fideal::{self, LinearScorer, TrainConfig};
use crate::inducer::{self, baseline_tree, BaselineKind, BinTree, DistanceMeasure};
use crate::measures::{CosMode, MeasureId};
use crate::treebank::{self, GoldTree};

/// Bias strength used when `--bias` is given without `--lambda`.
pub const DEFAULT_BIAS_LAMBDA: f64 = 1.5;

#[derive(Debug, Parser)]
#[command(name = "plmtrees", version, about = "Induce and evaluate constituency trees from LM activations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Induce one bracketed tree per sentence.
    Induce(InduceArgs),
    /// Score predicted trees against a gold treebank.
    Eval(EvalArgs),
    /// Evaluate every extractor/measure combination on a validation set.
    Tune(TuneArgs),
    /// Score a naive baseline (random, balanced, left, right).
    Baseline(BaselineArgs),
    /// Train the supervised linear distance scorer on one layer.
    TrainFideal(TrainArgs),
    /// Write a word-level attention matrix as CSV.
    Heatmap(HeatmapArgs),
    /// Export preprocessed gold spans as TSV.
    Spans(SpansArgs),
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    /// Right-skewness bias strength.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Enable the bias with the default strength.
    #[arg(long)]
    pub bias: bool,
}

impl BiasArgs {
    pub fn resolve(&self) -> Result<f64> {
        let lambda = match (self.lambda, self.bias) {
            (Some(l), _) => l,
            (None, true) => DEFAULT_BIAS_LAMBDA,
            (None, false) => 0.0,
        };
        if !lambda.is_finite() || lambda < 0.0 {
            bail!("lambda must be a finite non-negative number, got {lambda}");
        }
        Ok(lambda)
    }
}

#[derive(Debug, Args)]
pub struct InduceArgs {
    #[arg(long)]
    pub activations: PathBuf,
    /// Treebank supplying the words; without it leaves are word indices.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// e.g. hidden:11 or attn:9:avg. Defaults to the scorer's layer for fideal measures.
    #[arg(long)]
    pub extractor: Option<String>,
    /// cos, l1, l2, jsd, hel or fideal:<scorer.json>.
    #[arg(long)]
    pub measure: String,
    #[command(flatten)]
    pub bias: BiasArgs,
    #[arg(long, default_value = "paper")]
    pub cos_mode: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted trees, one per line, aligned with the gold sentences.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Comma-separated label-recall categories.
    #[arg(long, default_value = "SBAR,NP,VP,PP,ADJP,ADVP")]
    pub labels: String,
    #[arg(long, default_value = "-")]
    pub model: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Comma-separated measures to try.
    #[arg(long, default_value = "cos,l1,l2,jsd,hel")]
    pub measure: String,
    #[command(flatten)]
    pub bias: BiasArgs,
    #[arg(long, default_value = "paper")]
    pub cos_mode: String,
    /// Grid TSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Layer-wise best S-F1 CSV destination.
    #[arg(long)]
    pub layerwise: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub gold: PathBuf,
    /// Seeded runs to average (random trees only).
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "SBAR,NP,VP,PP,ADJP,ADVP")]
    pub labels: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// 1-based layer whose hidden states feed the scorer.
    #[arg(long)]
    pub layer: usize,
    #[arg(long, requires = "valid_gold")]
    pub valid_activations: Option<PathBuf>,
    #[arg(long, requires = "valid_activations")]
    pub valid_gold: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value = "SBAR,NP,VP,PP,ADJP,ADVP")]
    pub labels: String,
    /// Scorer JSON destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub sentence: String,
    #[arg(long)]
    pub layer: usize,
    /// Head number or "avg".
    #[arg(long, default_value = "avg")]
    pub head: String,
    /// Treebank supplying word headers.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpansArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Induce(a) => {
            let out = cmd_induce(&a)?;
            emit(a.out.as_deref(), &out)
        }
        Command::Eval(a) => {
            let out = cmd_eval(&a)?;
            emit(a.out.as_deref(), &out)
        }
        Command::Tune(a) => {
            let (grid, layerwise) = cmd_tune(&a)?;
            if let Some(path) = &a.layerwise {
                emit(Some(path), &layerwise)?;
            }
            emit(a.out.as_deref(), &grid)
        }
        Command::Baseline(a) => {
            let out = cmd_baseline(&a)?;
            emit(a.out.as_deref(), &out)
        }
        Command::TrainFideal(a) => {
            let summary = cmd_train_fideal(&a)?;
            emit(None, &summary)
        }
        Command::Heatmap(a) => {
            let out = cmd_heatmap(&a)?;
            emit(a.out.as_deref(), &out)
        }
        Command::Spans(a) => {
            let golds = load_gold(&a.gold)?;
            let mut buf = Vec::new();
            treebank::write_spans_tsv(&golds, &mut buf)?;
            emit(a.out.as_deref(), &String::from_utf8(buf)?)
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn load_gold(path: &Path) -> Result<Vec<GoldTree>> {
    treebank::load_gold(path, &treebank::default_punct_tags()).with_context(|| format!("reading {}", path.display()))
}

fn load_acts(path: &Path) -> Result<(crate::ActivationMeta, Vec<SentenceActivations>)> {
    read_activations(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_labels(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

/// Parses `cos|l1|l2|jsd|hel` or `fideal:<path>`.
pub fn parse_measure(s: &str, cos_mode: CosMode) -> Result<DistanceMeasure> {
    if let Some(path) = s.strip_prefix("fideal:") {
        let scorer = LinearScorer::load(Path::new(path)).with_context(|| format!("loading scorer {path}"))?;
        return Ok(DistanceMeasure::Learned(scorer));
    }
    Ok(DistanceMeasure::Standard { id: s.parse()?, cos_mode })
}

pub fn cmd_induce(args: &InduceArgs) -> Result<String> {
    let lambda = args.bias.resolve()?;
    let cos_mode: CosMode = args.cos_mode.parse()?;
    let measure = parse_measure(&args.measure, cos_mode)?;
    let (meta, records) = load_acts(&args.activations)?;
    let extractor: ExtractorSpec = match (&args.extractor, &measure) {
        (Some(e), _) => e.parse()?,
        (None, DistanceMeasure::Learned(s)) => ExtractorSpec::Hidden { layer: s.layer },
        (None, _) => bail!("--extractor is required for measure {}", args.measure),
    };
    extractor.validate(&meta)?;
    if let DistanceMeasure::Learned(s) = &measure {
        if s.hidden_dim() != meta.hidden_dim {
            bail!("scorer expects hidden_dim {}, activations have {}", s.hidden_dim(), meta.hidden_dim);
        }
    }
    let words: Option<HashMap<String, Vec<String>>> = match &args.gold {
        Some(p) => Some(load_gold(p)?.into_iter().map(|g| (g.sentence.id.clone(), g.sentence.words)).collect()),
        None => None,
    };
    let mut out = String::new();
    for acts in &records {
        let tree = inducer::induce(&extractor, &measure, lambda, acts)
            .with_context(|| format!("sentence {}", acts.sentence_id))?;
        let sentence_words = match &words {
            Some(map) => {
                let w = map
                    .get(&acts.sentence_id)
                    .ok_or_else(|| anyhow!("sentence {}: not in the gold treebank", acts.sentence_id))?;
                if w.len() != acts.n_words() {
                    bail!(
                        "sentence {}: {} words in gold, {} in activations",
                        acts.sentence_id,
                        w.len(),
                        acts.n_words()
                    );
                }
                Some(w.as_slice())
            }
            None => None,
        };
        writeln!(out, "{}", tree.render(sentence_words))?;
    }
    Ok(out)
}

/// Reads predicted trees, one per non-empty line.
pub fn read_predictions(path: &Path) -> Result<Vec<BinTree>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Ok(BinTree::parse(l).with_context(|| format!("{} line {}", path.display(), i + 1))?.0))
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let preds = read_predictions(&args.pred)?;
    let golds = load_gold(&args.gold)?;
    if preds.len() != golds.len() {
        bail!("{} predicted trees but {} gold sentences", preds.len(), golds.len());
    }
    let labels = parse_labels(&args.labels);
    let report = evaluation::evaluate(&preds, &golds, &labels)?;
    let mut buf = Vec::new();
    evaluation::write_report_tsv(&[ReportRow::plain(&args.model, report)], &labels, &mut buf)?;
    Ok(String::from_utf8(buf)?)
}

/// Returns the grid TSV and the layer-wise CSV.
pub fn cmd_tune(args: &TuneArgs) -> Result<(String, String)> {
    let lambda = args.bias.resolve()?;
    let cos_mode: CosMode = args.cos_mode.parse()?;
    let measures = args.measure.split(',').map(|m| m.trim().parse::<MeasureId>()).collect::<Result<HashSet<_>, _>>()?;
    let measures: Vec<MeasureId> = MeasureId::ALL.into_iter().filter(|m| measures.contains(m)).collect();
    let (meta, records) = load_acts(&args.activations)?;
    let golds = load_gold(&args.gold)?;
    let extractors = ExtractorSpec::enumerate(&meta);
    let grid = evaluation::grid_search(&records, &golds, &measures, &extractors, lambda, cos_mode, meta.num_heads)?;
    let best = grid.best();
    log::info!("best: {} {} S-F1 {:.2}", best.measure, best.extractor, best.s_f1);
    let mut tsv = Vec::new();
    evaluation::write_grid_tsv(&grid, &mut tsv)?;
    let mut csv = Vec::new();
    evaluation::write_layerwise_csv(&evaluation::layerwise_report(&grid), &mut csv)?;
    Ok((String::from_utf8(tsv)?, String::from_utf8(csv)?))
}

pub fn cmd_baseline(args: &BaselineArgs) -> Result<String> {
    let kind: BaselineKind = args.kind.parse().map_err(|e: String| anyhow!(e))?;
    let golds = load_gold(&args.gold)?;
    let labels = parse_labels(&args.labels);
    let runs = if kind == BaselineKind::Random { args.trials.max(1) } else { 1 };
    let reports = (0..runs as u64)
        .map(|t| {
            let preds: Vec<BinTree> =
                golds.iter().map(|g| baseline_tree(kind, g.sentence.len(), args.seed + t, &g.sentence.id)).collect();
            evaluation::evaluate(&preds, &golds, &labels)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let model = match kind {
        BaselineKind::Random => "Random Trees",
        BaselineKind::Balanced => "Balanced Trees",
        BaselineKind::Left => "Left Branching Trees",
        BaselineKind::Right => "Right Branching Trees",
    };
    let mut buf = Vec::new();
    evaluation::write_report_tsv(&[ReportRow::plain(model, evaluation::average_reports(&reports))], &labels, &mut buf)?;
    Ok(String::from_utf8(buf)?)
}

/// Trains `trials` scorers, saves the one with the best validation S-F1 (the
/// first when there is no validation set) and returns a summary.
pub fn cmd_train_fideal(args: &TrainArgs) -> Result<String> {
    let (meta, records) = load_acts(&args.activations)?;
    ExtractorSpec::Hidden { layer: args.layer }.validate(&meta)?;
    let golds = load_gold(&args.gold)?;
    let examples = fideal::examples_from_corpus(&records, &golds, args.layer)?;
    let validation = match (&args.valid_activations, &args.valid_gold) {
        (Some(a), Some(g)) => {
            let (_, val_records) = load_acts(a)?;
            let val_golds = load_gold(g)?;
            let aligned: Vec<GoldTree> =
                evaluation::align_gold(&val_records, &val_golds)?.into_iter().cloned().collect();
            Some((fideal::examples_from_corpus(&val_records, &val_golds, args.layer)?, aligned))
        }
        _ => None,
    };
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        trials: args.trials,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let labels = parse_labels(&args.labels);
    let trials = fideal::train_trials(
        &examples,
        args.layer,
        &config,
        validation.as_ref().map(|(e, g)| (e.as_slice(), g.as_slice())),
        &labels,
        &meta.corpus_id,
    )?;
    let mut summary = String::new();
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        let s_f1 = t.validation.as_ref().map(|r| r.s_f1);
        writeln!(
            summary,
            "trial {i} seed {} epoch {} validation S-F1 {}",
            t.scorer.seed,
            t.log.selected_epoch,
            s_f1.map_or("-".to_string(), |s| format!("{s:.2}"))
        )?;
        if let (Some(s), Some(b)) = (s_f1, trials[best].validation.as_ref().map(|r| r.s_f1)) {
            if s > b {
                best = i;
            }
        }
    }
    let scored: Vec<f64> = trials.iter().filter_map(|t| t.validation.as_ref().map(|r| r.s_f1)).collect();
    if !scored.is_empty() {
        writeln!(summary, "mean validation S-F1 {:.2}", scored.iter().sum::<f64>() / scored.len() as f64)?;
    }
    trials[best].scorer.save(&args.out)?;
    writeln!(summary, "saved trial {best} to {}", args.out.display())?;
    Ok(summary)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> Result<String> {
    let (meta, records) = load_acts(&args.activations)?;
    let head = if args.head.eq_ignore_ascii_case("avg") { Head::Avg } else { Head::Index(args.head.parse()?) };
    ExtractorSpec::Attn { layer: args.layer, head }.validate(&meta)?;
    let acts = records
        .iter()
        .find(|r| r.sentence_id == args.sentence)
        .ok_or_else(|| anyhow!("sentence {} not in {}", args.sentence, args.activations.display()))?;
    let matrix = word_attention(acts, args.layer, head)?;
    let words: Vec<String> = match &args.gold {
        Some(p) => {
            let golds = load_gold(p)?;
            let g = golds
                .iter()
                .find(|g| g.sentence.id == args.sentence)
                .ok_or_else(|| anyhow!("sentence {} not in the gold treebank", args.sentence))?;
            g.sentence.words.clone()
        }
        None => (0..acts.n_words()).map(|i| i.to_string()).collect(),
    };
    if words.len() != matrix.len() {
        bail!("sentence {}: {} words in gold, {} in activations", args.sentence, words.len(), matrix.len());
    }
    let mut out = String::new();
    for w in &words {
        write!(out, ",{}", csv_field(w))?;
    }
    out.push('\n');
    for (w, row) in words.iter().zip(&matrix) {
        out.push_str(&csv_field(w));
        for v in row {
            write!(out, ",{v}")?;
        }
        out.push('\n');
    }
    Ok(out)
}
