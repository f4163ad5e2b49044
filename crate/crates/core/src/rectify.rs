//! Bias-diminishing prototype rectification.
//!
//! Two mechanisms, independently toggleable:
//!
//! * cross-class: the pooled query cloud is shifted by the difference of
//!   support and query means so both sets share a center;
//! * intra-class: each class's support is augmented with its top-Z most
//!   confidently predicted queries, and the prototype is rebuilt as a
//!   softmax-weighted sum that favors rows close to the basic prototype.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::episodes::EpisodeData;
use crate::error::{Error, Result};
use crate::protonet::{
    basic_prototypes, cosine, predict, score, softmax_scaled, Prediction, PrototypeKind,
    PrototypeSet, ScoreMatrix,
};
use crate::MIN_VECTOR_NORM;

/// The additive correction applied to every query feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTerm {
    pub xi: Array1<f64>,
}

impl ShiftTerm {
    pub fn norm(&self) -> f64 {
        self.xi.dot(&self.xi).sqrt()
    }
}

/// Support mean minus query mean, pooled over all classes.
pub fn shift_term(support: ArrayView2<'_, f64>, query: ArrayView2<'_, f64>) -> Result<ShiftTerm> {
    let (s_mean, q_mean) = (
        pooled_mean(support, "support")?,
        pooled_mean(query, "query")?,
    );
    Ok(ShiftTerm {
        xi: s_mean - q_mean,
    })
}

fn pooled_mean(rows: ArrayView2<'_, f64>, what: &str) -> Result<Array1<f64>> {
    if rows.nrows() == 0 {
        return Err(Error::Capacity(format!("{what} set is empty")));
    }
    Ok(rows.mean_axis(Axis(0)).expect("nrows checked above"))
}

/// Adds the shift to every query row. Rows are intentionally not
/// re-normalized here; cosine scoring is scale-free and the rectification
/// step renormalizes on its own terms.
pub fn apply_shift(query: ArrayView2<'_, f64>, shift: &ShiftTerm) -> Array2<f64> {
    let mut out = query.to_owned();
    for mut row in out.rows_mut() {
        row += &shift.xi;
    }
    out
}

/// Per-class pseudo-label assignments: `per_class[n]` lists
/// `(query row, confidence)` pairs, confidence non-increasing, at most Z
/// entries. A query appears under at most one class (its argmax).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub per_class: Vec<Vec<(usize, f64)>>,
    pub z: usize,
}

impl PseudoLabelSet {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }
}

/// Assigns every query to its argmax class, ranks by confidence within each
/// class (ties broken by ascending query index), and keeps the top Z.
pub fn select_pseudo(sm: &ScoreMatrix, z: usize) -> PseudoLabelSet {
    let mut per_class: Vec<Vec<(usize, f64)>> = vec![Vec::new(); sm.num_classes()];
    if z > 0 {
        for (q, pred) in predict(sm).into_iter().enumerate() {
            per_class[pred.class].push((q, pred.confidence));
        }
        for list in &mut per_class {
            list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            list.truncate(z);
        }
    }
    PseudoLabelSet { per_class, z }
}

/// Softmax over `epsilon * cos(row, basic_prototype)`: rows closer to the
/// basic prototype carry more of the rectified sum.
pub fn rectification_weights(
    rows: ArrayView2<'_, f64>,
    basic_proto: ArrayView1<'_, f64>,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::Invalid(format!(
            "epsilon must be finite and > 0, got {epsilon}"
        )));
    }
    if rows.nrows() == 0 {
        return Err(Error::Capacity("no rows to weight".into()));
    }
    let mut cosines = Array1::<f64>::zeros(rows.nrows());
    for (i, row) in rows.rows().into_iter().enumerate() {
        cosines[i] = cosine(row, basic_proto)?;
    }
    Ok(softmax_scaled(cosines.view(), epsilon).to_vec())
}

/// Rebuilds every prototype as the weighted sum of its K support rows plus
/// its pseudo-labeled query rows. Query rows are L2-renormalized before
/// entering the sum so the result stays a convex combination of unit
/// vectors.
pub fn rectified_prototypes(
    support: ArrayView2<'_, f64>,
    shots: usize,
    pseudo: &PseudoLabelSet,
    query: ArrayView2<'_, f64>,
    basic: &PrototypeSet,
    epsilon: f64,
) -> Result<PrototypeSet> {
    Ok(rectified_with_weights(support, shots, pseudo, query, basic, epsilon)?.0)
}

pub(crate) fn rectified_with_weights(
    support: ArrayView2<'_, f64>,
    shots: usize,
    pseudo: &PseudoLabelSet,
    query: ArrayView2<'_, f64>,
    basic: &PrototypeSet,
    epsilon: f64,
) -> Result<(PrototypeSet, Vec<Vec<f64>>)> {
    let ways = basic.len();
    if pseudo.per_class.len() != ways {
        return Err(Error::Shape(format!(
            "pseudo labels cover {} classes, prototypes {}",
            pseudo.per_class.len(),
            ways
        )));
    }
    if support.nrows() != ways * shots {
        return Err(Error::Shape(format!(
            "{} support rows for {} ways x {} shots",
            support.nrows(),
            ways,
            shots
        )));
    }
    let dim = support.ncols();
    let mut protos = Array2::<f64>::zeros((ways, dim));
    let mut all_weights = Vec::with_capacity(ways);
    for slot in 0..ways {
        let pseudo_rows = &pseudo.per_class[slot];
        let mut augmented = Array2::<f64>::zeros((shots + pseudo_rows.len(), dim));
        for k in 0..shots {
            augmented.row_mut(k).assign(&support.row(slot * shots + k));
        }
        for (i, &(q, _)) in pseudo_rows.iter().enumerate() {
            let row = query.row(q);
            let norm = row.dot(&row).sqrt();
            if norm < MIN_VECTOR_NORM {
                return Err(Error::Degenerate(format!(
                    "pseudo-labeled query row {q} has norm {norm:.3e}"
                )));
            }
            augmented.row_mut(shots + i).assign(&(&row / norm));
        }
        let weights = rectification_weights(augmented.view(), basic.vector(slot), epsilon)?;
        let mut proto = Array1::<f64>::zeros(dim);
        for (w, row) in weights.iter().zip(augmented.rows()) {
            proto.scaled_add(*w, &row);
        }
        protos.row_mut(slot).assign(&proto);
        all_weights.push(weights);
    }
    let set = PrototypeSet::new(basic.class_ids().to_vec(), protos, PrototypeKind::Rectified)?;
    Ok((set, all_weights))
}

/// Gap between a class's full-population mean and the mean of an available
/// subset: the vector and its L2 norm.
pub fn measure_intra_bias(
    population: ArrayView2<'_, f64>,
    subset: ArrayView2<'_, f64>,
) -> Result<(Array1<f64>, f64)> {
    let bias = pooled_mean(population, "population")? - pooled_mean(subset, "subset")?;
    let norm = bias.dot(&bias).sqrt();
    Ok((bias, norm))
}

/// Gap between the pooled support and query means; by construction the same
/// quantity the shift term cancels.
pub fn measure_cross_bias(
    support: ArrayView2<'_, f64>,
    query: ArrayView2<'_, f64>,
) -> Result<(Array1<f64>, f64)> {
    let shift = shift_term(support, query)?;
    let norm = shift.norm();
    Ok((shift.xi, norm))
}

/// Which bias-diminishing steps the pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Basic prototypes only.
    Cspn,
    /// Cross-class shift, then basic prototypes.
    Bdc,
    /// Pseudo-label rectification, no shift.
    Bdi,
    /// Shift, then pseudo-label on the shifted queries, then rectification.
    Bd,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Cspn, Mode::Bdc, Mode::Bdi, Mode::Bd];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Cspn => "cspn",
            Mode::Bdc => "bdc",
            Mode::Bdi => "bdi",
            Mode::Bd => "bd",
        }
    }

    fn shifts(&self) -> bool {
        matches!(self, Mode::Bdc | Mode::Bd)
    }

    fn rectifies(&self) -> bool {
        matches!(self, Mode::Bdi | Mode::Bd)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cspn" => Ok(Mode::Cspn),
            "bdc" => Ok(Mode::Bdc),
            "bdi" => Ok(Mode::Bdi),
            "bd" => Ok(Mode::Bd),
            other => Err(Error::Invalid(format!(
                "unknown mode `{other}` (expected cspn|bdc|bdi|bd)"
            ))),
        }
    }
}

/// Knobs of one pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub mode: Mode,
    /// Pseudo-labels kept per class.
    pub z: usize,
    /// Rectification weight temperature.
    pub epsilon: f64,
    /// Softmax temperature for scoring.
    pub tau: f64,
    /// Run rectification before the shift instead of after (ablation).
    pub intra_first: bool,
}

/// Per-episode observability: shift magnitude, how many pseudo-labels each
/// class received, and the entropy of each class's rectification weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDiagnostics {
    pub shift_norm: f64,
    pub pseudo_counts: Vec<usize>,
    pub weight_entropy: Vec<f64>,
}

/// Everything one pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub predictions: Vec<Prediction>,
    pub scores: ScoreMatrix,
    pub prototypes: PrototypeSet,
    pub diagnostics: EpisodeDiagnostics,
}

/// Runs the selected bias-diminishing combination over one episode and
/// classifies every query (distractors included) by nearest prototype.
pub fn run_pipeline(data: &EpisodeData, params: &PipelineParams) -> Result<PipelineOutput> {
    let basic = basic_prototypes(data.support.view(), data.ways, data.shots)?;

    let shift = if params.mode.shifts() {
        shift_term(data.support.view(), data.query.view())?
    } else {
        ShiftTerm {
            xi: Array1::zeros(data.support.ncols()),
        }
    };
    let shift_norm = shift.norm();

    // In shift-first order (the default) pseudo-labels are selected from the
    // shifted queries; --intra-first selects them from the raw queries before
    // any shift is applied.
    let shifted = if params.mode.shifts() {
        Some(apply_shift(data.query.view(), &shift))
    } else {
        None
    };
    let final_queries = shifted
        .as_ref()
        .map(|m| m.view())
        .unwrap_or(data.query.view());

    let mut pseudo_counts = vec![0usize; data.ways];
    let mut weight_entropy = vec![0.0f64; data.ways];
    let prototypes = if params.mode.rectifies() {
        let selection_queries = if params.intra_first {
            data.query.view()
        } else {
            final_queries
        };
        let selection_scores = score(selection_queries, &basic, params.tau)?;
        let pseudo = select_pseudo(&selection_scores, params.z);
        for (slot, list) in pseudo.per_class.iter().enumerate() {
            pseudo_counts[slot] = list.len();
        }
        let (rectified, weights) = rectified_with_weights(
            data.support.view(),
            data.shots,
            &pseudo,
            selection_queries,
            &basic,
            params.epsilon,
        )?;
        for (slot, ws) in weights.iter().enumerate() {
            weight_entropy[slot] = entropy(ws);
        }
        rectified
    } else {
        basic
    };

    let scores = score(final_queries, &prototypes, params.tau)?;
    let predictions = predict(&scores);
    Ok(PipelineOutput {
        predictions,
        scores,
        prototypes,
        diagnostics: EpisodeDiagnostics {
            shift_norm,
            pseudo_counts,
            weight_entropy,
        },
    })
}

fn entropy(weights: &[f64]) -> f64 {
    let s = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * w.ln())
        .sum::<f64>();
    if s == 0.0 {
        0.0
    } else {
        -s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{gather, sample_episode, EpisodeSpec};
    use crate::featurestore::FeatureSet;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn shift_term_is_the_mean_difference() {
        let support = array![[1.0, 0.0]];
        let query = array![[0.0, 1.0]];
        let shift = shift_term(support.view(), query.view()).unwrap();
        assert_eq!(shift.xi.to_vec(), vec![1.0, -1.0]);

        let same = shift_term(support.view(), support.view()).unwrap();
        assert_eq!(same.xi.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn shift_matches_residual_route_on_balanced_episode() {
        // oracle: with truth labels, (1/NQ) sum_i sum_q (P_i - x_iq) must equal
        // the class-blind pooled-mean formula exactly for balanced classes
        let fs = FeatureSet::synth(8, 30, 16, 0.4, 3).unwrap();
        let spec = EpisodeSpec {
            ways: 5,
            shots: 3,
            queries_per_class: 7,
            distractor_classes: 0,
            seed: 12,
        };
        let ep = sample_episode(&fs, &spec, 0).unwrap();
        let view = fs.normalize().unwrap();
        let data = gather(&view, &ep, &spec);
        let basic = basic_prototypes(data.support.view(), spec.ways, spec.shots).unwrap();

        let mut residual = Array1::<f64>::zeros(fs.dim());
        for (i, truth) in data.query_truth.iter().enumerate() {
            residual += &(&basic.vector(*truth) - &data.query.row(i));
        }
        residual /= data.query.nrows() as f64;

        let shift = shift_term(data.support.view(), data.query.view()).unwrap();
        for d in 0..fs.dim() {
            assert!(
                (residual[d] - shift.xi[d]).abs() < 1e-12,
                "dim {d}: {} vs {}",
                residual[d],
                shift.xi[d]
            );
        }
    }

    #[test]
    fn apply_shift_translates_rows() {
        let query = array![[0.0, 1.0]];
        let shift = ShiftTerm {
            xi: array![1.0, -1.0],
        };
        let out = apply_shift(query.view(), &shift);
        assert_eq!(out.row(0).to_vec(), vec![1.0, 0.0]);

        let zero = ShiftTerm {
            xi: array![0.0, 0.0],
        };
        let same = apply_shift(query.view(), &zero);
        assert_eq!(same, query);
    }

    #[test]
    fn shift_centers_the_query_cloud() {
        let support = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let query = array![[0.25, -0.5], [0.0, 0.75]];
        let shift = shift_term(support.view(), query.view()).unwrap();
        let shifted = apply_shift(query.view(), &shift);
        let (_, residual_norm) = measure_cross_bias(support.view(), shifted.view()).unwrap();
        assert!(residual_norm <= 1e-9, "residual {residual_norm}");
    }

    #[test]
    fn select_pseudo_truncates_per_class() {
        let protos = PrototypeSet::new(
            vec![0, 1],
            array![[1.0, 0.0], [0.0, 1.0]],
            PrototypeKind::Basic,
        )
        .unwrap();
        // three queries all predicted class 0 with descending confidence
        let queries = array![[1.0, 0.0], [1.0, 0.2], [1.0, 0.4]];
        let sm = score(queries.view(), &protos, 10.0).unwrap();

        let none = select_pseudo(&sm, 0);
        assert_eq!(none.total(), 0);

        let two = select_pseudo(&sm, 2);
        assert_eq!(two.per_class[0].len(), 2);
        assert_eq!(two.per_class[0][0].0, 0);
        assert_eq!(two.per_class[0][1].0, 1);
        assert!(two.per_class[0][0].1 >= two.per_class[0][1].1);
        assert!(two.per_class[1].is_empty());

        let all = select_pseudo(&sm, 50);
        assert_eq!(all.total(), 3);
        let mut seen: Vec<usize> = all
            .per_class
            .iter()
            .flat_map(|l| l.iter().map(|&(q, _)| q))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn weights_fixture_and_singleton() {
        let basic = array![1.0, 0.0];
        // cosines 1.0 and 0.5 at epsilon=10
        let rows = array![[1.0, 0.0], [0.5, 0.8660254037844386]];
        let w = rectification_weights(rows.view(), basic.view(), 10.0).unwrap();
        assert!((w[0] - 0.99330715).abs() < 1e-6);
        assert!((w[1] - 0.00669285).abs() < 1e-6);

        let single = array![[0.3, 0.4]];
        let w = rectification_weights(single.view(), basic.view(), 10.0).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn equidistant_rows_get_uniform_weights() {
        let basic = array![1.0, 0.0, 0.0];
        let rows = array![
            [0.5, 0.5, 0.0],
            [0.5, 0.0, 0.5],
            [0.5, -0.5, 0.0],
            [0.5, 0.0, -0.5]
        ];
        let w = rectification_weights(rows.view(), basic.view(), 7.0).unwrap();
        for &v in &w {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn rectified_prototype_trivial_cases() {
        // K=1, Z=0: the prototype is the lone support feature
        let support = array![[1.0, 0.0], [0.0, 1.0]];
        let basic = basic_prototypes(support.view(), 2, 1).unwrap();
        let pseudo = PseudoLabelSet {
            per_class: vec![Vec::new(), Vec::new()],
            z: 0,
        };
        let query = array![[0.6, 0.8]];
        let rect =
            rectified_prototypes(support.view(), 1, &pseudo, query.view(), &basic, 10.0).unwrap();
        assert_eq!(rect.kind(), PrototypeKind::Rectified);
        assert!((rect.vector(0)[0] - 1.0).abs() < 1e-12);
        assert!((rect.vector(0)[1] - 0.0).abs() < 1e-12);

        // all augmented rows identical: the prototype is that row for any epsilon
        let support = array![[0.6, 0.8], [0.6, 0.8], [0.0, 1.0], [0.0, 1.0]];
        let basic = basic_prototypes(support.view(), 2, 2).unwrap();
        let pseudo = PseudoLabelSet {
            per_class: vec![vec![(0, 0.9)], Vec::new()],
            z: 1,
        };
        let query = array![[1.2, 1.6]]; // renormalizes to [0.6, 0.8]
        for eps in [0.5, 5.0, 50.0] {
            let rect = rectified_prototypes(support.view(), 2, &pseudo, query.view(), &basic, eps)
                .unwrap();
            assert!((rect.vector(0)[0] - 0.6).abs() < 1e-12);
            assert!((rect.vector(0)[1] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn rectification_reduces_prototype_bias_on_average() {
        // oracle: population class means from all rows of the source set
        let fs = FeatureSet::synth(10, 40, 32, 0.35, 77).unwrap();
        let view = fs.normalize().unwrap();
        let spec = EpisodeSpec {
            ways: 5,
            shots: 1,
            queries_per_class: 15,
            distractor_classes: 0,
            seed: 5,
        };
        let params = PipelineParams {
            mode: Mode::Bdi,
            z: 8,
            epsilon: 10.0,
            tau: 10.0,
            intra_first: false,
        };
        let pop_means: Vec<Array1<f64>> = (0..fs.num_classes())
            .map(|c| view.class_matrix(c).mean_axis(Axis(0)).unwrap())
            .collect();
        let mut basic_gap = 0.0;
        let mut rect_gap = 0.0;
        for idx in 0..100 {
            let ep = sample_episode(&fs, &spec, idx).unwrap();
            let data = gather(&view, &ep, &spec);
            let basic = basic_prototypes(data.support.view(), spec.ways, spec.shots).unwrap();
            let out = run_pipeline(&data, &params).unwrap();
            for slot in 0..spec.ways {
                let pop = &pop_means[ep.class_ids[slot]];
                let b = &basic.vector(slot) - pop;
                let r = &out.prototypes.vector(slot) - pop;
                basic_gap += b.dot(&b).sqrt();
                rect_gap += r.dot(&r).sqrt();
            }
        }
        assert!(
            rect_gap < basic_gap,
            "rectified gap {rect_gap} vs basic gap {basic_gap}"
        );
    }

    #[test]
    fn intra_bias_direct_cases() {
        let population = array![[1.0, 0.0], [0.0, 1.0]];
        let subset = array![[1.0, 0.0]];
        let (bias, norm) = measure_intra_bias(population.view(), subset.view()).unwrap();
        assert_eq!(bias.to_vec(), vec![-0.5, 0.5]);
        assert!((norm - 0.5f64.sqrt()).abs() < 1e-12);

        let (zero, n) = measure_intra_bias(population.view(), population.view()).unwrap();
        assert_eq!(zero.to_vec(), vec![0.0, 0.0]);
        assert_eq!(n, 0.0);
    }

    #[test]
    fn intra_bias_norm_shrinks_with_subset_size() {
        // Monte Carlo over random subsets of one synthetic class
        use rand::seq::index;
        let fs = FeatureSet::synth(3, 60, 16, 0.5, 31).unwrap();
        let view = fs.normalize().unwrap();
        let class = view.class_matrix(0);
        let mut rng = crate::streams::stream_rng(2024, 0, 9);
        let mut mean_norm = |k: usize| -> f64 {
            let mut total = 0.0;
            for _ in 0..200 {
                let rows: Vec<usize> = index::sample(&mut rng, class.nrows(), k).into_vec();
                let mut subset = Array2::<f64>::zeros((k, class.ncols()));
                for (i, &r) in rows.iter().enumerate() {
                    subset.row_mut(i).assign(&class.row(r));
                }
                total += measure_intra_bias(class.view(), subset.view()).unwrap().1;
            }
            total / 200.0
        };
        let small = mean_norm(2);
        let large = mean_norm(20);
        assert!(large < small, "norm with 20 rows {large} vs 2 rows {small}");
    }

    #[test]
    fn cross_bias_equals_shift_term() {
        let support = array![[1.0, 2.0], [3.0, 4.0]];
        let query = array![[0.5, 0.5], [0.0, 1.0], [1.0, 0.0]];
        let shift = shift_term(support.view(), query.view()).unwrap();
        let (bias, norm) = measure_cross_bias(support.view(), query.view()).unwrap();
        assert_eq!(bias, shift.xi);
        assert!((norm - shift.norm()).abs() < 1e-15);
    }

    fn episode_fixture() -> (EpisodeData, EpisodeSpec) {
        let fs = FeatureSet::synth(12, 30, 24, 0.4, 8).unwrap();
        let spec = EpisodeSpec {
            ways: 5,
            shots: 1,
            queries_per_class: 15,
            distractor_classes: 0,
            seed: 40,
        };
        let ep = sample_episode(&fs, &spec, 2).unwrap();
        let view = fs.normalize().unwrap();
        (gather(&view, &ep, &spec), spec)
    }

    #[test]
    fn cspn_mode_is_plain_prototype_prediction() {
        let (data, spec) = episode_fixture();
        let params = PipelineParams {
            mode: Mode::Cspn,
            z: 8,
            epsilon: 10.0,
            tau: 10.0,
            intra_first: false,
        };
        let out = run_pipeline(&data, &params).unwrap();
        let basic = basic_prototypes(data.support.view(), spec.ways, spec.shots).unwrap();
        let sm = score(data.query.view(), &basic, 10.0).unwrap();
        let direct = predict(&sm);
        assert_eq!(out.predictions, direct);
        assert_eq!(out.diagnostics.shift_norm, 0.0);
        assert_eq!(out.diagnostics.pseudo_counts, vec![0; 5]);
    }

    #[test]
    fn degenerate_bd_matches_cspn() {
        // query rows are a permutation of support rows, so xi = 0; with Z = 0
        // both bias modules are inert and bd must equal cspn
        let support = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.8, 0.6]];
        let query = array![[0.6, 0.8], [1.0, 0.0], [0.8, 0.6], [0.0, 1.0]];
        let data = EpisodeData {
            ways: 2,
            shots: 2,
            queries_per_class: 2,
            distractor_rows: 0,
            support,
            query,
            query_truth: vec![0, 0, 1, 1],
        };
        let bd = run_pipeline(
            &data,
            &PipelineParams {
                mode: Mode::Bd,
                z: 0,
                epsilon: 10.0,
                tau: 10.0,
                intra_first: false,
            },
        )
        .unwrap();
        let cspn = run_pipeline(
            &data,
            &PipelineParams {
                mode: Mode::Cspn,
                z: 0,
                epsilon: 10.0,
                tau: 10.0,
                intra_first: false,
            },
        )
        .unwrap();
        assert!(bd.diagnostics.shift_norm < 1e-12);
        assert_eq!(bd.predictions, cspn.predictions);
    }

    #[test]
    fn shift_recovers_a_manufactured_query_offset() {
        // displace every query row by a fixed vector, the exact mismatch the
        // cross-class module exists to cancel, and check it wins it back
        let fs = FeatureSet::synth(12, 30, 16, 0.3, 21).unwrap();
        let view = fs.normalize().unwrap();
        let spec = EpisodeSpec {
            ways: 5,
            shots: 1,
            queries_per_class: 15,
            distractor_classes: 0,
            seed: 33,
        };
        let offset = {
            let raw: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
            let v = Array1::from_vec(raw);
            let n = v.dot(&v).sqrt();
            v * (0.6 / n)
        };
        let cspn = PipelineParams {
            mode: Mode::Cspn,
            z: 0,
            epsilon: 10.0,
            tau: 10.0,
            intra_first: false,
        };
        let bdc = PipelineParams {
            mode: Mode::Bdc,
            ..cspn
        };
        let episode_accuracy = |data: &EpisodeData, params: &PipelineParams| {
            let preds = run_pipeline(data, params).unwrap().predictions;
            let correct = preds
                .iter()
                .zip(data.query_truth.iter())
                .filter(|(p, t)| p.class == **t)
                .count();
            correct as f64 / preds.len() as f64
        };
        let (mut clean, mut biased, mut rescued) = (0.0, 0.0, 0.0);
        let episodes = 100;
        for idx in 0..episodes {
            let ep = sample_episode(&fs, &spec, idx).unwrap();
            let mut data = gather(&view, &ep, &spec);
            clean += episode_accuracy(&data, &cspn);
            for mut row in data.query.rows_mut() {
                row += &offset;
            }
            biased += episode_accuracy(&data, &cspn);
            rescued += episode_accuracy(&data, &bdc);
        }
        let (clean, biased, rescued) = (
            clean / episodes as f64,
            biased / episodes as f64,
            rescued / episodes as f64,
        );
        assert!(
            biased < clean - 0.05,
            "offset should hurt plain prototypes: clean {clean}, biased {biased}"
        );
        assert!(
            rescued > biased + 0.05,
            "shift should recover most of it: biased {biased}, rescued {rescued}"
        );
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (data, _) = episode_fixture();
        for mode in Mode::ALL {
            let params = PipelineParams {
                mode,
                z: 4,
                epsilon: 10.0,
                tau: 10.0,
                intra_first: false,
            };
            let a = run_pipeline(&data, &params).unwrap();
            let b = run_pipeline(&data, &params).unwrap();
            assert_eq!(a.predictions, b.predictions);
            assert_eq!(a.diagnostics, b.diagnostics);
        }
    }

    proptest! {
        #[test]
        fn weights_form_a_simplex_and_flatten_as_epsilon_vanishes(
            raw in proptest::collection::vec(-1.0f64..1.0, 8),
            scale in 0.1f64..10.0,
            epsilon in 0.5f64..30.0,
        ) {
            let mut rows = Array2::from_shape_vec((4, 2), raw).unwrap();
            let all_ok = rows.rows().into_iter().all(|r| r.dot(&r).sqrt() > 1e-3);
            prop_assume!(all_ok);
            let basic = array![1.0, 0.3];
            let w = rectification_weights(rows.view(), basic.view(), epsilon).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(w.iter().all(|&v| v >= 0.0));

            // scaling one row never changes the weights (cosine scale invariance)
            let before = w.clone();
            let scaled_row = rows.row(1).mapv(|v| v * scale);
            rows.row_mut(1).assign(&scaled_row);
            let after = rectification_weights(rows.view(), basic.view(), epsilon).unwrap();
            for (a, b) in before.iter().zip(after.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }

            // epsilon -> 0+ flattens toward uniform
            let flat = rectification_weights(rows.view(), basic.view(), 1e-9).unwrap();
            for &v in &flat {
                prop_assert!((v - 0.25).abs() < 1e-6);
            }
        }

        #[test]
        fn rectified_prototype_stays_in_the_convex_hull(
            seed in 0u64..50,
        ) {
            // projection test: for a convex combination, the projection onto any
            // direction lies within [min, max] of the member projections
            let fs = FeatureSet::synth(4, 12, 8, 0.5, seed).unwrap();
            let view = fs.normalize().unwrap();
            let spec = EpisodeSpec {
                ways: 2,
                shots: 3,
                queries_per_class: 4,
                distractor_classes: 0,
                seed,
            };
            let ep = sample_episode(&fs, &spec, 0).unwrap();
            let data = gather(&view, &ep, &spec);
            let out = run_pipeline(
                &data,
                &PipelineParams {
                    mode: Mode::Bdi,
                    z: 3,
                    epsilon: 10.0,
                    tau: 10.0,
                    intra_first: false,
                },
            )
            .unwrap();
            let mut members = data.support.clone();
            // pipeline renormalizes pseudo rows; raw queries here are unit already
            let all_rows = ndarray::concatenate(
                Axis(0),
                &[members.view(), data.query.view()],
            ).unwrap();
            members = all_rows;
            let dirs = [array![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], array![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.6]];
            for dir in dirs {
                for slot in 0..2 {
                    let p = out.prototypes.vector(slot).dot(&dir);
                    let projections: Vec<f64> = members
                        .rows()
                        .into_iter()
                        .map(|r| r.dot(&dir))
                        .collect();
                    let lo = projections.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = projections.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9,
                        "projection {p} outside [{lo}, {hi}]");
                }
            }
        }

        #[test]
        fn shift_term_is_antisymmetric(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 9),
        ) {
            let s = Array2::from_shape_vec((2, 3), a).unwrap();
            let q = Array2::from_shape_vec((3, 3), b).unwrap();
            let fwd = shift_term(s.view(), q.view()).unwrap();
            let rev = shift_term(q.view(), s.view()).unwrap();
            for d in 0..3 {
                prop_assert!((fwd.xi[d] + rev.xi[d]).abs() < 1e-12);
            }
        }
    }
}
