//! Episodic benchmark orchestration: evaluation loops over many episodes,
//! accuracy and mAP metrics, paired-mode comparisons, confidence intervals,
//! report emission, and the theory-curve runner.
//!
//! Episodes are pure functions of `(seed, index)`, so they are evaluated in
//! parallel and aggregated in index order; a report is byte-identical no
//! matter how many worker threads ran it. `PROTORECT_THREADS` caps the
//! worker count.

use ndarray::{Array1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{gather, inject_distractors, sample_episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::featurestore::{FeatureFormat, FeatureSet, NormalizedView};
use crate::protonet::{basic_prototypes, ScoreMatrix};
use crate::rectify::{run_pipeline, Mode, PipelineParams};
use crate::theory::{accuracy_curve, dataset_params, fit_eta, TheoryParams};

/// Queries ranked per class for average precision.
const MAP_TOP: usize = 15;

/// Fraction of labeled queries predicted correctly. Distractor queries must
/// already be excluded from both slices.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("accuracy of an empty prediction set".into()));
    }
    let correct = predictions
        .iter()
        .zip(truth.iter())
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Mean average precision over classes: per class, all queries are ranked by
/// that class's confidence (ties by query index) and the top `top` are kept;
/// AP is the mean precision at each hit, averaged over the hits present in
/// the list, zero if none. Distractors carry `None` truth and are never
/// relevant.
pub fn mean_average_precision(sm: &ScoreMatrix, truth: &[Option<usize>], top: usize) -> f64 {
    assert!(top >= 1, "top must be at least 1");
    assert_eq!(truth.len(), sm.num_queries(), "truth length mismatch");
    let mut total = 0.0;
    for class in 0..sm.num_classes() {
        let mut order: Vec<usize> = (0..sm.num_queries()).collect();
        order.sort_by(|&a, &b| {
            sm.probs()[[b, class]]
                .partial_cmp(&sm.probs()[[a, class]])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &q) in order.iter().take(top).enumerate() {
            if truth[q] == Some(class) {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits > 0 {
            total += precision_sum / hits as f64;
        }
    }
    total / sm.num_classes() as f64
}

/// Mean, sample standard deviation (n-1), and 95% CI half-width.
pub fn mean_std_ci95(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std, ci95_half_width(std, values.len()))
}

/// Normal-approximation half-width: `1.96 * std / sqrt(n)`.
pub fn ci95_half_width(std: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.96 * std / (n as f64).sqrt()
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties must be dropped beforehand.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut pmf = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += pmf;
        }
        if k < n {
            pmf *= (n - k) as f64 / (k + 1) as f64;
        }
    }
    tail.min(1.0)
}

/// Report serialization target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Tsv,
    Json,
}

impl std::fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutputFormat::Tsv => "tsv",
            OutputFormat::Json => "json",
        })
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(OutputFormat::Tsv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Invalid(format!(
                "unknown output format `{other}` (expected tsv|json)"
            ))),
        }
    }
}

/// Full configuration of one evaluation run; echoed verbatim into the
/// report. Defaults follow the standard protocol: 600 episodes, 15 queries
/// per class, epsilon 10, tau 10, Z 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub features: String,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub modes: Vec<Mode>,
    pub z_values: Vec<usize>,
    pub epsilon: f64,
    pub tau: f64,
    pub seed: u64,
    pub distractors: usize,
    pub intra_first: bool,
    pub format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: "eval".into(),
            features: String::new(),
            ways: 5,
            shots: 1,
            queries: 15,
            episodes: 600,
            modes: vec![Mode::Bd],
            z_values: vec![8],
            epsilon: 10.0,
            tau: 10.0,
            seed: 0,
            distractors: 0,
            intra_first: false,
            format: OutputFormat::Tsv,
        }
    }
}

/// Aggregated diagnostics of one (mode, Z) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    /// Mean norm of the cross-class shift (zero for modes that never shift).
    pub mean_shift_norm: f64,
    /// Mean pseudo-labels consumed per episode (over all classes).
    pub mean_pseudo_total: f64,
    /// Mean entropy of the rectification weights, averaged over classes.
    pub mean_weight_entropy: f64,
    /// Mean distance of the basic prototypes to their population class mean.
    pub mean_basic_proto_gap: f64,
    /// Same distance for the prototypes the cell actually classified with.
    pub mean_final_proto_gap: f64,
}

/// Results of one (mode, Z) cell over every episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub mode: Mode,
    pub z: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub mean_map: f64,
    pub episode_accuracy: Vec<f64>,
    pub episode_map: Vec<f64>,
    pub diagnostics: DiagnosticsSummary,
}

/// Paired per-episode comparison of a mode against the baseline (the first
/// configured mode) at the same Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub baseline: Mode,
    pub mode: Mode,
    pub z: usize,
    pub mean_delta: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub sign_test_p: f64,
}

/// Everything an evaluation run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    /// AP convention: mean precision at each hit within the top list,
    /// divided by the number of hits in that list.
    pub map_formula: String,
    pub cells: Vec<CellReport>,
    pub pairings: Vec<PairedComparison>,
}

impl RunReport {
    pub fn cell(&self, mode: Mode, z: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.mode == mode && c.z == z)
    }
}

struct CellOutcome {
    acc: f64,
    map: f64,
    shift_norm: f64,
    pseudo_total: usize,
    weight_entropy: f64,
    basic_gap: f64,
    final_gap: f64,
}

fn validate_config(cfg: &RunConfig) -> Result<()> {
    if cfg.episodes == 0 {
        return Err(Error::Invalid("at least one episode is required".into()));
    }
    if cfg.modes.is_empty() {
        return Err(Error::Invalid("at least one mode is required".into()));
    }
    if cfg.z_values.is_empty() {
        return Err(Error::Invalid("at least one Z value is required".into()));
    }
    Ok(())
}

fn eval_episode(
    fs: &FeatureSet,
    view: &NormalizedView,
    pop_means: &[Array1<f64>],
    cfg: &RunConfig,
    cells: &[(Mode, usize)],
    index: usize,
) -> Result<Vec<CellOutcome>> {
    let spec = EpisodeSpec {
        ways: cfg.ways,
        shots: cfg.shots,
        queries_per_class: cfg.queries,
        distractor_classes: cfg.distractors,
        seed: cfg.seed,
    };
    let ep = sample_episode(fs, &spec, index)?;
    let ep = inject_distractors(fs, ep, &spec)?;
    let data = gather(view, &ep, &spec);
    let labeled = data.labeled_queries();
    let truth: Vec<Option<usize>> = data
        .query_truth
        .iter()
        .map(|&t| Some(t))
        .chain(std::iter::repeat_n(None, data.distractor_rows))
        .collect();
    let basic = basic_prototypes(data.support.view(), data.ways, data.shots)?;

    let mut outcomes = Vec::with_capacity(cells.len());
    for &(mode, z) in cells {
        let out = run_pipeline(
            &data,
            &PipelineParams {
                mode,
                z,
                epsilon: cfg.epsilon,
                tau: cfg.tau,
                intra_first: cfg.intra_first,
            },
        )?;
        let predicted: Vec<usize> = out.predictions[..labeled].iter().map(|p| p.class).collect();
        let acc = accuracy(&predicted, &data.query_truth)?;
        let map = mean_average_precision(&out.scores, &truth, MAP_TOP);
        let mut basic_gap = 0.0;
        let mut final_gap = 0.0;
        for slot in 0..data.ways {
            let pop = &pop_means[ep.class_ids[slot]];
            let b = &basic.vector(slot) - pop;
            let f = &out.prototypes.vector(slot) - pop;
            basic_gap += b.dot(&b).sqrt();
            final_gap += f.dot(&f).sqrt();
        }
        let entropy_mean = out.diagnostics.weight_entropy.iter().sum::<f64>() / data.ways as f64;
        outcomes.push(CellOutcome {
            acc,
            map,
            shift_norm: out.diagnostics.shift_norm,
            pseudo_total: out.diagnostics.pseudo_counts.iter().sum(),
            weight_entropy: entropy_mean,
            basic_gap: basic_gap / data.ways as f64,
            final_gap: final_gap / data.ways as f64,
        });
    }
    Ok(outcomes)
}

/// Evaluates every `(mode, Z)` cell over `episodes` episodes, all cells on
/// the identical episode sequence. Worker count comes from
/// `PROTORECT_THREADS` (unset or 0 means the default pool).
pub fn evaluate(fs: &FeatureSet, cfg: &RunConfig) -> Result<RunReport> {
    let threads = match std::env::var("PROTORECT_THREADS") {
        Err(_) => None,
        Ok(raw) => {
            let n: usize = raw.trim().parse().map_err(|_| {
                Error::Invalid(format!("PROTORECT_THREADS must be a number, got `{raw}`"))
            })?;
            (n > 0).then_some(n)
        }
    };
    evaluate_with_threads(fs, cfg, threads)
}

/// [`evaluate`] with an explicit worker cap; `None` uses the default pool.
/// Reports are byte-identical regardless of the cap.
pub fn evaluate_with_threads(
    fs: &FeatureSet,
    cfg: &RunConfig,
    threads: Option<usize>,
) -> Result<RunReport> {
    validate_config(cfg)?;
    let view = fs.normalize()?;
    let pop_means: Vec<Array1<f64>> = (0..fs.num_classes())
        .map(|c| view.class_matrix(c).mean_axis(Axis(0)).expect("class rows"))
        .collect();
    let cells: Vec<(Mode, usize)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.z_values.iter().map(move |&z| (m, z)))
        .collect();

    let run = || -> Vec<Result<Vec<CellOutcome>>> {
        (0..cfg.episodes)
            .into_par_iter()
            .map(|idx| eval_episode(fs, &view, &pop_means, cfg, &cells, idx))
            .collect()
    };
    let raw = match threads {
        None => run(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
            .install(run),
    };

    // surface the lowest failing episode index deterministically
    let mut per_episode = Vec::with_capacity(cfg.episodes);
    for (idx, outcome) in raw.into_iter().enumerate() {
        per_episode.push(outcome.map_err(|e| e.in_episode(idx))?);
    }

    let mut reports = Vec::with_capacity(cells.len());
    for (ci, &(mode, z)) in cells.iter().enumerate() {
        let accs: Vec<f64> = per_episode.iter().map(|ep| ep[ci].acc).collect();
        let maps: Vec<f64> = per_episode.iter().map(|ep| ep[ci].map).collect();
        let (mean_accuracy, _, ci95) = mean_std_ci95(&accs);
        let (mean_map, _, _) = mean_std_ci95(&maps);
        let n = cfg.episodes as f64;
        let diagnostics = DiagnosticsSummary {
            mean_shift_norm: per_episode.iter().map(|e| e[ci].shift_norm).sum::<f64>() / n,
            mean_pseudo_total: per_episode
                .iter()
                .map(|e| e[ci].pseudo_total as f64)
                .sum::<f64>()
                / n,
            mean_weight_entropy: per_episode
                .iter()
                .map(|e| e[ci].weight_entropy)
                .sum::<f64>()
                / n,
            mean_basic_proto_gap: per_episode.iter().map(|e| e[ci].basic_gap).sum::<f64>() / n,
            mean_final_proto_gap: per_episode.iter().map(|e| e[ci].final_gap).sum::<f64>() / n,
        };
        reports.push(CellReport {
            mode,
            z,
            mean_accuracy,
            ci95,
            mean_map,
            episode_accuracy: accs,
            episode_map: maps,
            diagnostics,
        });
    }

    let mut pairings = Vec::new();
    let baseline = cfg.modes[0];
    for &z in &cfg.z_values {
        let base_cell = reports
            .iter()
            .find(|c| c.mode == baseline && c.z == z)
            .expect("baseline cell exists");
        let base_accs = base_cell.episode_accuracy.clone();
        for &mode in cfg.modes.iter().skip(1) {
            let cell = reports
                .iter()
                .find(|c| c.mode == mode && c.z == z)
                .expect("cell exists");
            let deltas: Vec<f64> = cell
                .episode_accuracy
                .iter()
                .zip(base_accs.iter())
                .map(|(a, b)| a - b)
                .collect();
            let wins = deltas.iter().filter(|&&d| d > 0.0).count();
            let losses = deltas.iter().filter(|&&d| d < 0.0).count();
            let ties = deltas.len() - wins - losses;
            pairings.push(PairedComparison {
                baseline,
                mode,
                z,
                mean_delta: deltas.iter().sum::<f64>() / deltas.len() as f64,
                wins,
                losses,
                ties,
                sign_test_p: sign_test_p(wins, losses),
            });
        }
    }

    Ok(RunReport {
        config: cfg.clone(),
        map_formula: format!(
            "AP@{MAP_TOP} = mean(precision at each hit) over hits in the top-{MAP_TOP} list; \
             mAP = mean over classes; distractors never relevant"
        ),
        cells: reports,
        pairings,
    })
}

/// Loads the configured feature file and evaluates it.
pub fn run_eval(cfg: &RunConfig, format: FeatureFormat) -> Result<RunReport> {
    let fs = FeatureSet::load(std::path::Path::new(&cfg.features), format)?;
    evaluate(&fs, cfg)
}

/// Serializes a report. TSV holds one row per (mode, Z) cell; JSON holds the
/// full structure and re-serializes byte-identically after parsing.
pub fn emit_report(report: &RunReport, format: OutputFormat) -> String {
    match format {
        OutputFormat::Tsv => {
            let mut out = String::from("mode\tways\tshots\tz\tacc\tci95\tmap\n");
            for cell in &report.cells {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                    cell.mode,
                    report.config.ways,
                    report.config.shots,
                    cell.z,
                    cell.mean_accuracy,
                    cell.ci95,
                    cell.mean_map
                ));
            }
            out
        }
        OutputFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
    }
}

/// Writes a serialized report to a file, or stdout when no path is given.
pub fn write_report(text: &str, out: Option<&std::path::Path>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            Ok(())
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Configuration of a theory-curve run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub features: String,
    /// Shots of the predicted curve.
    pub k: usize,
    /// The curve covers Z in 0..=z_max.
    pub z_max: usize,
    pub ways: usize,
    pub queries: usize,
    pub episodes: usize,
    /// Shot counts of the anchor accuracies the scale is fitted on.
    pub anchor_shots: Vec<usize>,
    pub seed: u64,
    pub epsilon: f64,
    pub tau: f64,
    /// Also run the empirical Z-sweep for side-by-side comparison.
    pub empirical: bool,
    pub format: OutputFormat,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            features: String::new(),
            k: 1,
            z_max: 10,
            ways: 5,
            queries: 15,
            episodes: 600,
            anchor_shots: vec![1, 5],
            seed: 0,
            epsilon: 10.0,
            tau: 10.0,
            empirical: false,
            format: OutputFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPoint {
    pub shots: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub z: usize,
    pub predicted: f64,
    pub empirical: Option<f64>,
    pub empirical_ci95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheoryConfig,
    pub lambda: f64,
    pub alpha: f64,
    pub eta: f64,
    pub dim: usize,
    pub anchors: Vec<AnchorPoint>,
    pub curve: Vec<CurvePoint>,
}

/// Estimates feature statistics, fits the accuracy scale on plain-prototype
/// anchor runs, and evaluates the predicted curve over the Z range,
/// optionally next to the measured intra-rectification sweep.
pub fn run_theory_on(fs: &FeatureSet, cfg: &TheoryConfig) -> Result<TheoryReport> {
    let view = fs.normalize()?;
    let params = dataset_params(&view)?;
    let mut anchors = Vec::with_capacity(cfg.anchor_shots.len());
    let mut points = Vec::with_capacity(cfg.anchor_shots.len());
    for &shots in &cfg.anchor_shots {
        let run = RunConfig {
            command: "theory-anchor".into(),
            features: cfg.features.clone(),
            ways: cfg.ways,
            shots,
            queries: cfg.queries,
            episodes: cfg.episodes,
            modes: vec![Mode::Cspn],
            z_values: vec![0],
            epsilon: cfg.epsilon,
            tau: cfg.tau,
            seed: cfg.seed,
            distractors: 0,
            intra_first: false,
            format: cfg.format,
        };
        let report = evaluate(fs, &run)?;
        let acc = report.cells[0].mean_accuracy;
        anchors.push(AnchorPoint {
            shots,
            accuracy: acc,
        });
        points.push((shots, acc));
    }
    let eta = fit_eta(&points, &params)?;
    let params: TheoryParams = params.with_eta(eta);

    let zs: Vec<usize> = (0..=cfg.z_max).collect();
    let predicted = accuracy_curve(&params, cfg.k, &zs);
    let empirical = if cfg.empirical {
        let run = RunConfig {
            command: "theory-sweep".into(),
            features: cfg.features.clone(),
            ways: cfg.ways,
            shots: cfg.k,
            queries: cfg.queries,
            episodes: cfg.episodes,
            modes: vec![Mode::Bdi],
            z_values: zs.clone(),
            epsilon: cfg.epsilon,
            tau: cfg.tau,
            seed: cfg.seed,
            distractors: 0,
            intra_first: false,
            format: cfg.format,
        };
        Some(evaluate(fs, &run)?)
    } else {
        None
    };

    let curve = predicted
        .into_iter()
        .map(|(z, value)| {
            let cell = empirical.as_ref().and_then(|rep| rep.cell(Mode::Bdi, z));
            CurvePoint {
                z,
                predicted: value,
                empirical: cell.map(|c| c.mean_accuracy),
                empirical_ci95: cell.map(|c| c.ci95),
            }
        })
        .collect();

    Ok(TheoryReport {
        config: cfg.clone(),
        lambda: params.lambda,
        alpha: params.alpha,
        eta: params.eta,
        dim: params.dim,
        anchors,
        curve,
    })
}

/// Loads the configured feature file and runs the theory curve.
pub fn run_theory(cfg: &TheoryConfig, format: FeatureFormat) -> Result<TheoryReport> {
    let fs = FeatureSet::load(std::path::Path::new(&cfg.features), format)?;
    run_theory_on(&fs, cfg)
}

/// Serializes a theory report: TSV rows of (z, predicted[, empirical, ci95]).
pub fn emit_theory(report: &TheoryReport, format: OutputFormat) -> String {
    match format {
        OutputFormat::Tsv => {
            let empirical = report.curve.iter().any(|p| p.empirical.is_some());
            let mut out = if empirical {
                String::from("z\tpredicted_acc\tempirical_acc\tempirical_ci95\n")
            } else {
                String::from("z\tpredicted_acc\n")
            };
            for p in &report.curve {
                if empirical {
                    out.push_str(&format!(
                        "{}\t{:.6}\t{:.6}\t{:.6}\n",
                        p.z,
                        p.predicted,
                        p.empirical.unwrap_or(f64::NAN),
                        p.empirical_ci95.unwrap_or(f64::NAN)
                    ));
                } else {
                    out.push_str(&format!("{}\t{:.6}\n", p.z, p.predicted));
                }
            }
            out
        }
        OutputFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
    }
}
