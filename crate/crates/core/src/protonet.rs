//! Cosine-similarity prototype classification: class prototypes as means of
//! normalized support features, cosine score matrices, and temperature-scaled
//! softmax prediction.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::MIN_VECTOR_NORM;

/// How a prototype set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    Basic,
    Rectified,
}

/// N class prototypes over a D-dimensional feature space.
///
/// Prototypes are deliberately not re-normalized after averaging: cosine
/// scoring is scale-invariant, and the rectification weights expect the plain
/// mean. One convention everywhere.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    class_ids: Vec<usize>,
    vectors: Array2<f64>,
    kind: PrototypeKind,
}

impl PrototypeSet {
    pub fn new(class_ids: Vec<usize>, vectors: Array2<f64>, kind: PrototypeKind) -> Result<Self> {
        if class_ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} class ids for {} prototype rows",
                class_ids.len(),
                vectors.nrows()
            )));
        }
        if class_ids.len() < 2 {
            return Err(Error::Invalid(
                "prototype sets need at least 2 classes".into(),
            ));
        }
        for (i, row) in vectors.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() {
                return Err(Error::Data(format!("prototype {i} is not finite")));
            }
            if norm < MIN_VECTOR_NORM {
                return Err(Error::Degenerate(format!(
                    "prototype for class {} has norm {norm:.3e}",
                    class_ids[i]
                )));
            }
        }
        Ok(PrototypeSet {
            class_ids,
            vectors,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn kind(&self) -> PrototypeKind {
        self.kind
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn vector(&self, slot: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(slot)
    }
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]` to absorb
/// rounding.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of a {}-vector against a {}-vector",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < MIN_VECTOR_NORM || nb < MIN_VECTOR_NORM {
        return Err(Error::Degenerate(format!(
            "cosine of vectors with norms {na:.3e} and {nb:.3e}"
        )));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Basic prototypes: per class, the plain mean of its K normalized support
/// rows. `support` is class-major with `shots` rows per class.
pub fn basic_prototypes(
    support: ArrayView2<'_, f64>,
    ways: usize,
    shots: usize,
) -> Result<PrototypeSet> {
    if shots == 0 {
        return Err(Error::Capacity("a class with no support rows".into()));
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
    for slot in 0..ways {
        let mut mean = Array1::<f64>::zeros(dim);
        for k in 0..shots {
            mean += &support.row(slot * shots + k);
        }
        mean /= shots as f64;
        protos.row_mut(slot).assign(&mean);
    }
    PrototypeSet::new((0..ways).collect(), protos, PrototypeKind::Basic)
}

/// Per-query cosine similarities to every prototype, with the matching
/// temperature-scaled softmax probabilities.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    cosines: Array2<f64>,
    probs: Array2<f64>,
    tau: f64,
}

impl ScoreMatrix {
    pub fn num_queries(&self) -> usize {
        self.cosines.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.cosines.ncols()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn cosines(&self) -> &Array2<f64> {
        &self.cosines
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

/// Numerically safe softmax of `scale * values`.
pub(crate) fn softmax_scaled(values: ArrayView1<'_, f64>, scale: f64) -> Array1<f64> {
    let max = values.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Array1<f64> = values.mapv(|v| ((v - max) * scale).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Scores every query row against every prototype.
pub fn score(queries: ArrayView2<'_, f64>, protos: &PrototypeSet, tau: f64) -> Result<ScoreMatrix> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Invalid(format!(
            "tau must be finite and > 0, got {tau}"
        )));
    }
    if queries.ncols() != protos.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs prototype dim {}",
            queries.ncols(),
            protos.dim()
        )));
    }
    let n = protos.len();
    let mut cosines = Array2::<f64>::zeros((queries.nrows(), n));
    let proto_norms: Vec<f64> = protos
        .vectors()
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    for (q, row) in queries.rows().into_iter().enumerate() {
        let qn = row.dot(&row).sqrt();
        if qn < MIN_VECTOR_NORM {
            return Err(Error::Degenerate(format!(
                "query row {q} has norm {qn:.3e}"
            )));
        }
        for slot in 0..n {
            let c = row.dot(&protos.vector(slot)) / (qn * proto_norms[slot]);
            cosines[[q, slot]] = c.clamp(-1.0, 1.0);
        }
    }
    let mut probs = Array2::<f64>::zeros(cosines.raw_dim());
    for (q, row) in cosines.rows().into_iter().enumerate() {
        probs.row_mut(q).assign(&softmax_scaled(row, tau));
    }
    Ok(ScoreMatrix {
        cosines,
        probs,
        tau,
    })
}

/// Predicted class and its softmax confidence for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub confidence: f64,
}

/// Nearest prototype per query by cosine; exact ties go to the lowest class
/// index so runs are reproducible.
pub fn predict(sm: &ScoreMatrix) -> Vec<Prediction> {
    let mut out = Vec::with_capacity(sm.num_queries());
    for q in 0..sm.num_queries() {
        let mut best = 0usize;
        for slot in 1..sm.num_classes() {
            if sm.cosines[[q, slot]] > sm.cosines[[q, best]] {
                best = slot;
            }
        }
        out.push(Prediction {
            class: best,
            confidence: sm.probs[[q, best]],
        });
    }
    out
}
