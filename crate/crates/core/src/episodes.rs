//! Reproducible N-way K-shot episode sampling, with optional distractor
//! classes for the robustness test.
//!
//! Each episode's RNG stream is derived from `(seed, episode_index)`, so any
//! episode can be regenerated in isolation and episodes can be evaluated in
//! parallel without shared RNG state.

use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::{FeatureSet, NormalizedView};
use crate::streams::{stream_rng, TAG_DISTRACTOR, TAG_EPISODE};

/// Shape of one episodic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// N: number of classes per episode.
    pub ways: usize,
    /// K: labeled samples per class.
    pub shots: usize,
    /// Q: unlabeled query samples per class.
    pub queries_per_class: usize,
    /// N': classes injected as unlabeled distractors (0 disables).
    pub distractor_classes: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::Invalid("episodes need at least 2 ways".into()));
        }
        if self.shots < 1 {
            return Err(Error::Invalid("episodes need at least 1 shot".into()));
        }
        if self.queries_per_class < 1 {
            return Err(Error::Invalid(
                "episodes need at least 1 query per class".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled task: row indices into the source [`FeatureSet`].
///
/// `support` and `query` are class-major: the block `[n*K, (n+1)*K)` belongs
/// to episode class `n`. `query_truth[i]` is the episode-class index of
/// `query[i]`; distractor rows carry no truth among the episode classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub index: usize,
    /// Source-class ids of the N episode classes, in slot order.
    pub class_ids: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub query_truth: Vec<usize>,
    pub distractor_query: Vec<usize>,
}

/// Draws episode `episode_index` from the spec's stream: N classes uniformly
/// without replacement among those holding at least K+Q rows, then K+Q rows
/// per class without replacement.
pub fn sample_episode(
    fs: &FeatureSet,
    spec: &EpisodeSpec,
    episode_index: usize,
) -> Result<Episode> {
    spec.validate()?;
    let total_needed = spec.ways + spec.distractor_classes;
    if total_needed > fs.num_classes() {
        return Err(Error::Capacity(format!(
            "episode needs {} classes ({} ways + {} distractors) but the feature set has {}",
            total_needed,
            spec.ways,
            spec.distractor_classes,
            fs.num_classes()
        )));
    }
    let per_class = spec.shots + spec.queries_per_class;
    let eligible: Vec<usize> = (0..fs.num_classes())
        .filter(|&c| fs.class_rows(c).len() >= per_class)
        .collect();
    if eligible.len() < spec.ways {
        // name the closest miss so the caller knows what to fix
        let deficient = (0..fs.num_classes())
            .filter(|&c| fs.class_rows(c).len() < per_class)
            .max_by_key(|&c| fs.class_rows(c).len())
            .expect("at least one class must be deficient here");
        return Err(Error::Capacity(format!(
            "only {} of {} required classes hold {} rows (K+Q); class {} has just {}",
            eligible.len(),
            spec.ways,
            per_class,
            deficient,
            fs.class_rows(deficient).len()
        )));
    }

    let mut rng = stream_rng(spec.seed, episode_index as u64, TAG_EPISODE);
    let class_ids: Vec<usize> = index::sample(&mut rng, eligible.len(), spec.ways)
        .iter()
        .map(|i| eligible[i])
        .collect();

    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.queries_per_class);
    let mut query_truth = Vec::with_capacity(spec.ways * spec.queries_per_class);
    for (slot, &class) in class_ids.iter().enumerate() {
        let rows = fs.class_rows(class);
        let picks = index::sample(&mut rng, rows.len(), per_class);
        for (i, pick) in picks.iter().enumerate() {
            if i < spec.shots {
                support.push(rows[pick]);
            } else {
                query.push(rows[pick]);
                query_truth.push(slot);
            }
        }
    }
    Ok(Episode {
        index: episode_index,
        class_ids,
        support,
        query,
        query_truth,
        distractor_query: Vec::new(),
    })
}

/// Adds N'xQ unlabeled query rows from classes outside the episode. The rows
/// join the query batch as unlabeled data: they participate in the shift term
/// and are eligible for pseudo-labeling, but never count toward accuracy.
pub fn inject_distractors(fs: &FeatureSet, mut ep: Episode, spec: &EpisodeSpec) -> Result<Episode> {
    if spec.distractor_classes == 0 {
        return Ok(ep);
    }
    let q = spec.queries_per_class;
    let outside: Vec<usize> = (0..fs.num_classes())
        .filter(|c| !ep.class_ids.contains(c) && fs.class_rows(*c).len() >= q)
        .collect();
    if outside.len() < spec.distractor_classes {
        return Err(Error::Capacity(format!(
            "{} outside classes hold {} rows, {} distractor classes requested",
            outside.len(),
            q,
            spec.distractor_classes
        )));
    }
    let mut rng = stream_rng(spec.seed, ep.index as u64, TAG_DISTRACTOR);
    let classes: Vec<usize> = index::sample(&mut rng, outside.len(), spec.distractor_classes)
        .iter()
        .map(|i| outside[i])
        .collect();
    for class in classes {
        let rows = fs.class_rows(class);
        for pick in index::sample(&mut rng, rows.len(), q).iter() {
            ep.distractor_query.push(rows[pick]);
        }
    }
    Ok(ep)
}

/// Normalized features of one episode, laid out for the pipeline: support is
/// class-major N*K x D; query holds the N*Q labeled rows (class-major)
/// followed by the distractor rows.
#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub distractor_rows: usize,
    pub support: Array2<f64>,
    pub query: Array2<f64>,
    pub query_truth: Vec<usize>,
}

impl EpisodeData {
    pub fn labeled_queries(&self) -> usize {
        self.ways * self.queries_per_class
    }

    pub fn total_queries(&self) -> usize {
        self.labeled_queries() + self.distractor_rows
    }
}

/// Gathers an episode's normalized feature rows into dense matrices.
pub fn gather(view: &NormalizedView, ep: &Episode, spec: &EpisodeSpec) -> EpisodeData {
    let mut query_rows = ep.query.clone();
    query_rows.extend_from_slice(&ep.distractor_query);
    EpisodeData {
        ways: spec.ways,
        shots: spec.shots,
        queries_per_class: spec.queries_per_class,
        distractor_rows: ep.distractor_query.len(),
        support: view.gather(&ep.support),
        query: view.gather(&query_rows),
        query_truth: ep.query_truth.clone(),
    }
}
