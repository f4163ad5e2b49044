//! Desk-scale cosine-classifier training: a linear feature adapter feeding a
//! temperature-scaled cosine classifier over base classes, optimized with
//! SGD (momentum 0.9, weight decay 0.0005) under the stepped learning-rate
//! schedule. Gradients are fully analytic and finite-difference checked.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "PRFC" | version u32 | d_in u32 | d_out u32 | classes u32
//! tau f64 | lr f64 | momentum f64 | weight_decay f64 | epochs u32 | batch u32 | seed u64
//! adapter: d_in x d_out f64, row-major
//! weights: classes x d_out f64, row-major
//! ```

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::FeatureSet;
use crate::streams::{stream_rng, TAG_INIT, TAG_TRAIN};
use crate::MIN_VECTOR_NORM;

const MAGIC: [u8; 4] = *b"PRFC";
const VERSION: u32 = 1;
const MIN_TAU: f64 = 1e-3;

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 60,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Linear adapter + cosine classifier weights + learnable temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub adapter: Array2<f64>,
    pub weights: Array2<f64>,
    pub tau: f64,
    pub hyper: Hyper,
}

impl ClassifierParams {
    /// Seeded random init: Xavier-scaled adapter, unit-norm class rows.
    pub fn init(d_in: usize, d_out: usize, classes: usize, tau: f64, hyper: Hyper) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Invalid("adapter dimensions must be positive".into()));
        }
        if classes < 2 {
            return Err(Error::Invalid("classifier needs at least 2 classes".into()));
        }
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::Invalid(format!("tau must be > 0, got {tau}")));
        }
        let mut rng = stream_rng(hyper.seed, 0, TAG_INIT);
        let scale = (2.0 / (d_in + d_out) as f64).sqrt();
        let adapter = Array2::from_shape_fn((d_in, d_out), |_| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        let mut weights =
            Array2::from_shape_fn((classes, d_out), |_| rng.sample::<f64, _>(StandardNormal));
        for mut row in weights.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        let params = ClassifierParams {
            adapter,
            weights,
            tau,
            hyper,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn d_in(&self) -> usize {
        self.adapter.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.adapter.ncols()
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    fn validate(&self) -> Result<()> {
        if self.weights.ncols() != self.d_out() {
            return Err(Error::Shape(format!(
                "weights dim {} vs adapter output dim {}",
                self.weights.ncols(),
                self.d_out()
            )));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Invalid(format!(
                "tau must be finite and > 0, got {}",
                self.tau
            )));
        }
        for (c, row) in self.weights.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm < MIN_VECTOR_NORM {
                return Err(Error::Degenerate(format!(
                    "class weight row {c} has norm {norm:.3e}"
                )));
            }
        }
        Ok(())
    }

    /// Class probabilities for one raw feature vector:
    /// `softmax(tau * cos(adapter^T x, w_c))`.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let (_, _, _, probs) = self.forward_parts(x)?;
        Ok(probs)
    }

    /// Projection, norms, cosines, and probabilities for one sample.
    #[allow(clippy::type_complexity)]
    fn forward_parts(
        &self,
        x: ArrayView1<'_, f64>,
    ) -> Result<(Array1<f64>, f64, Array1<f64>, Array1<f64>)> {
        if x.len() != self.d_in() {
            return Err(Error::Shape(format!(
                "input dim {} vs adapter input dim {}",
                x.len(),
                self.d_in()
            )));
        }
        let z = x.dot(&self.adapter);
        let z_norm = z.dot(&z).sqrt();
        if z_norm < MIN_VECTOR_NORM {
            return Err(Error::Degenerate(format!(
                "projected feature has norm {z_norm:.3e}"
            )));
        }
        let mut cosines = Array1::<f64>::zeros(self.classes());
        for (c, w) in self.weights.rows().into_iter().enumerate() {
            let w_norm = w.dot(&w).sqrt();
            if w_norm < MIN_VECTOR_NORM {
                return Err(Error::Degenerate(format!(
                    "class weight row {c} has norm {w_norm:.3e}"
                )));
            }
            cosines[c] = (z.dot(&w) / (z_norm * w_norm)).clamp(-1.0, 1.0);
        }
        let probs = crate::protonet::softmax_scaled(cosines.view(), self.tau);
        Ok((z, z_norm, cosines, probs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_in() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_out() as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes() as u32).to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&self.hyper.learning_rate.to_le_bytes());
        out.extend_from_slice(&self.hyper.momentum.to_le_bytes());
        out.extend_from_slice(&self.hyper.weight_decay.to_le_bytes());
        out.extend_from_slice(&(self.hyper.epochs as u32).to_le_bytes());
        out.extend_from_slice(&(self.hyper.batch_size as u32).to_le_bytes());
        out.extend_from_slice(&self.hyper.seed.to_le_bytes());
        for &v in self.adapter.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.weights.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut pos = 0usize;
        let mut header = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(Error::Format(format!(
                    "checkpoint too short reading {what}"
                )));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let magic = header(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:02x?}, expected {:02x?}",
                magic, MAGIC
            )));
        }
        let version = u32::from_le_bytes(header(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let d_in = u32::from_le_bytes(header(4, "d_in")?.try_into().unwrap()) as usize;
        let d_out = u32::from_le_bytes(header(4, "d_out")?.try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(header(4, "classes")?.try_into().unwrap()) as usize;
        let tau = f64::from_le_bytes(header(8, "tau")?.try_into().unwrap());
        let learning_rate = f64::from_le_bytes(header(8, "lr")?.try_into().unwrap());
        let momentum = f64::from_le_bytes(header(8, "momentum")?.try_into().unwrap());
        let weight_decay = f64::from_le_bytes(header(8, "weight decay")?.try_into().unwrap());
        let epochs = u32::from_le_bytes(header(4, "epochs")?.try_into().unwrap()) as usize;
        let batch_size = u32::from_le_bytes(header(4, "batch")?.try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(header(8, "seed")?.try_into().unwrap());
        let mut payload = |n: usize, what: &str| -> Result<Vec<f64>> {
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                if bytes.len() - pos < 8 {
                    return Err(Error::Truncation(format!(
                        "checkpoint {what}: expected {n} f64 values"
                    )));
                }
                vals.push(f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()));
                pos += 8;
            }
            Ok(vals)
        };
        let adapter_vals = payload(d_in * d_out, "adapter")?;
        let weight_vals = payload(classes * d_out, "weights")?;
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - pos
            )));
        }
        let params = ClassifierParams {
            adapter: Array2::from_shape_vec((d_in, d_out), adapter_vals)
                .map_err(|e| Error::Shape(e.to_string()))?,
            weights: Array2::from_shape_vec((classes, d_out), weight_vals)
                .map_err(|e| Error::Shape(e.to_string()))?,
            tau,
            hyper: Hyper {
                learning_rate,
                momentum,
                weight_decay,
                epochs,
                batch_size,
                seed,
            },
        };
        params.validate()?;
        Ok(params)
    }
}

/// A labeled minibatch of raw features.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_batch(params: &ClassifierParams, batch: &Batch<'_>) -> Result<()> {
    if batch.features.nrows() != batch.labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            batch.features.nrows(),
            batch.labels.len()
        )));
    }
    for (i, &y) in batch.labels.iter().enumerate() {
        if y >= params.classes() {
            return Err(Error::Label(format!(
                "sample {i} has label {y}, outside [0, {})",
                params.classes()
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood plus `(weight_decay / 2) * (|A|^2 + |W|^2)`.
/// An empty batch contributes a zero data term.
pub fn loss(params: &ClassifierParams, batch: &Batch<'_>) -> Result<f64> {
    check_batch(params, batch)?;
    let mut data = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let probs = params.forward(batch.features.row(i))?;
        data -= probs[y].max(f64::MIN_POSITIVE).ln();
    }
    if !batch.is_empty() {
        data /= batch.len() as f64;
    }
    let decay = 0.5
        * params.hyper.weight_decay
        * (params.adapter.iter().map(|v| v * v).sum::<f64>()
            + params.weights.iter().map(|v| v * v).sum::<f64>());
    Ok(data + decay)
}

/// Gradients of [`loss`] with respect to the adapter, class weights, and
/// temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub adapter: Array2<f64>,
    pub weights: Array2<f64>,
    pub tau: f64,
}

/// Analytic gradient of the batch loss.
pub fn gradient(params: &ClassifierParams, batch: &Batch<'_>) -> Result<Gradients> {
    check_batch(params, batch)?;
    let mut g_adapter = Array2::<f64>::zeros(params.adapter.raw_dim());
    let mut g_weights = Array2::<f64>::zeros(params.weights.raw_dim());
    let mut g_tau = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let x = batch.features.row(i);
        let (z, z_norm, cosines, probs) = params.forward_parts(x)?;
        let mut dz = Array1::<f64>::zeros(params.d_out());
        for c in 0..params.classes() {
            let w = params.weights.row(c);
            let w_norm = w.dot(&w).sqrt();
            let resid = probs[c] - if c == y { 1.0 } else { 0.0 };
            // d loss / d cos_c, before the batch mean
            let g_cos = params.tau * resid;
            // d cos_c / d w_c = z / (|z||w|) - cos_c * w / |w|^2
            let mut dw = &z / (z_norm * w_norm) - &(&w * (cosines[c] / (w_norm * w_norm)));
            dw *= g_cos;
            g_weights.row_mut(c).scaled_add(1.0, &dw);
            // d cos_c / d z = w / (|z||w|) - cos_c * z / |z|^2
            let dzc = &w / (z_norm * w_norm) - &(&z * (cosines[c] / (z_norm * z_norm)));
            dz.scaled_add(g_cos, &dzc);
            g_tau += resid * cosines[c];
        }
        // z = adapter^T x, so d loss / d adapter = x (outer) dz
        for (r, &xv) in x.iter().enumerate() {
            g_adapter.row_mut(r).scaled_add(xv, &dz);
        }
    }
    if !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        g_adapter *= inv;
        g_weights *= inv;
        g_tau *= inv;
    }
    g_adapter.scaled_add(params.hyper.weight_decay, &params.adapter);
    g_weights.scaled_add(params.hyper.weight_decay, &params.weights);
    Ok(Gradients {
        adapter: g_adapter,
        weights: g_weights,
        tau: g_tau,
    })
}

/// Epochs at which the learning rate drops by 10x: 10/20/40 for a 60-epoch
/// run, proportionally rescaled for shorter desk runs so the three-drop
/// shape is preserved.
pub fn lr_drop_epochs(total_epochs: usize) -> Vec<usize> {
    let base = [10usize, 20, 40];
    let mut drops: Vec<usize> = if total_epochs >= 60 {
        base.to_vec()
    } else {
        base.iter()
            .map(|&e| (((e * total_epochs) as f64 / 60.0).round() as usize).max(1))
            .collect()
    };
    drops.dedup();
    drops.retain(|&e| e < total_epochs);
    drops
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Minibatch SGD with momentum over the whole feature set, deterministic per
/// seed. Fails with a training error if the loss stops being finite.
pub fn train(fs: &FeatureSet, init: ClassifierParams) -> Result<TrainOutcome> {
    if fs.num_classes() < 2 {
        return Err(Error::Invalid("training needs at least 2 classes".into()));
    }
    if fs.dim() != init.d_in() {
        return Err(Error::Shape(format!(
            "feature dim {} vs adapter input dim {}",
            fs.dim(),
            init.d_in()
        )));
    }
    let count = fs.count();
    let features = Array2::from_shape_fn((count, fs.dim()), |(i, d)| fs.row(i)[d] as f64);
    let labels: Vec<usize> = fs.labels().iter().map(|&l| l as usize).collect();
    let full = Batch {
        features: features.view(),
        labels: &labels,
    };

    let hyper = init.hyper;
    let initial_loss = loss(&init, &full)?;
    let mut params = init;
    let mut lr = hyper.learning_rate;
    let drops = lr_drop_epochs(hyper.epochs);
    let mut v_adapter = Array2::<f64>::zeros(params.adapter.raw_dim());
    let mut v_weights = Array2::<f64>::zeros(params.weights.raw_dim());
    let mut v_tau = 0.0;
    let batch_size = hyper.batch_size.max(1);

    for epoch in 0..hyper.epochs {
        if drops.contains(&epoch) {
            lr *= 0.1;
        }
        let mut order: Vec<usize> = (0..count).collect();
        shuffle(&mut order, hyper.seed, epoch as u64);
        for chunk in order.chunks(batch_size) {
            let batch_features = gather_rows(&features, chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = gradient(
                &params,
                &Batch {
                    features: batch_features.view(),
                    labels: &batch_labels,
                },
            )?;
            v_adapter = &v_adapter * hyper.momentum + &grads.adapter;
            v_weights = &v_weights * hyper.momentum + &grads.weights;
            v_tau = v_tau * hyper.momentum + grads.tau;
            params.adapter.scaled_add(-lr, &v_adapter);
            params.weights.scaled_add(-lr, &v_weights);
            params.tau = (params.tau - lr * v_tau).max(MIN_TAU);
        }
        let epoch_loss = loss(&params, &full)?;
        if !epoch_loss.is_finite() {
            return Err(Error::Training(format!(
                "loss became non-finite at epoch {epoch}"
            )));
        }
    }
    let final_loss = loss(&params, &full)?;
    Ok(TrainOutcome {
        params,
        initial_loss,
        final_loss,
    })
}

/// Fraction of rows whose argmax probability matches their label.
pub fn training_accuracy(params: &ClassifierParams, fs: &FeatureSet) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..fs.count() {
        let x = Array1::from_iter(fs.row(i).iter().map(|&v| v as f64));
        let probs = params.forward(x.view())?;
        let mut best = 0usize;
        for c in 1..probs.len() {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        if best == fs.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / fs.count() as f64)
}

fn gather_rows(features: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), features.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&features.row(r));
    }
    out
}

fn shuffle(order: &mut [usize], seed: u64, epoch: u64) {
    use rand::seq::SliceRandom;
    let mut rng = stream_rng(seed, epoch, TAG_TRAIN);
    order.shuffle(&mut rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_params(seed: u64) -> ClassifierParams {
        ClassifierParams::init(
            4,
            3,
            3,
            10.0,
            Hyper {
                epochs: 0,
                seed,
                ..Hyper::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn forward_one_hot_and_uniform_limits() {
        let mut params = toy_params(1);
        params.adapter = Array2::eye(4).slice_move(ndarray::s![.., ..3]);
        params.weights = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        params.tau = 80.0;
        let probs = params.forward(array![1.0, 0.0, 0.0, 0.0].view()).unwrap();
        assert!(probs[0] > 0.999999, "{probs:?}");

        params.tau = 10.0;
        let probs = params.forward(array![1.0, 1.0, 1.0, 0.0].view()).unwrap();
        for c in 0..3 {
            assert!((probs[c] - 1.0 / 3.0).abs() < 1e-9);
        }
        let sum: f64 = probs.sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_softmax_fixture() {
        let mut params = toy_params(2);
        params.adapter = Array2::eye(4).slice_move(ndarray::s![.., ..3]);
        // cos(z, w_0) = 1 and cos(z, w_1) = 0.5 for z = [1,0,0]
        params.weights = array![
            [1.0, 0.0, 0.0],
            [0.5, 0.8660254037844386, 0.0],
            [-1.0, 0.0, 0.0]
        ];
        params.tau = 10.0;
        let probs = params.forward(array![1.0, 0.0, 0.0, 0.0].view()).unwrap();
        let pair = probs[0] + probs[1];
        assert!((probs[0] / pair - 0.99330715).abs() < 1e-6);
        assert!((probs[1] / pair - 0.00669285).abs() < 1e-6);
    }

    #[test]
    fn uniform_probabilities_cost_ln_c() {
        let mut params = toy_params(3);
        params.hyper.weight_decay = 0.0;
        // identical weight rows force equal cosines, hence uniform probs
        params.weights = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let features = array![[1.0, 0.5, -0.2, 0.3], [0.2, 1.0, 0.1, -0.4]];
        let labels = [0usize, 2];
        let batch = Batch {
            features: features.view(),
            labels: &labels,
        };
        let l = loss(&params, &batch).unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-9);

        // and the tau gradient vanishes by symmetry
        let g = gradient(&params, &batch).unwrap();
        assert!(g.tau.abs() < 1e-12, "tau grad {}", g.tau);
    }

    #[test]
    fn empty_batch_leaves_only_weight_decay() {
        let params = toy_params(4);
        let features = Array2::<f64>::zeros((0, 4));
        let batch = Batch {
            features: features.view(),
            labels: &[],
        };
        let l = loss(&params, &batch).unwrap();
        let expected = 0.5
            * params.hyper.weight_decay
            * (params.adapter.iter().map(|v| v * v).sum::<f64>()
                + params.weights.iter().map(|v| v * v).sum::<f64>());
        assert!((l - expected).abs() < 1e-12);

        let g = gradient(&params, &batch).unwrap();
        for (g, p) in g.adapter.iter().zip(params.adapter.iter()) {
            assert!((g - params.hyper.weight_decay * p).abs() < 1e-12);
        }
        for (g, p) in g.weights.iter().zip(params.weights.iter()) {
            assert!((g - params.hyper.weight_decay * p).abs() < 1e-12);
        }
        assert_eq!(g.tau, 0.0);
    }

    #[test]
    fn out_of_range_label_is_a_label_error() {
        let params = toy_params(5);
        let features = array![[1.0, 0.0, 0.0, 0.0]];
        let labels = [7usize];
        let batch = Batch {
            features: features.view(),
            labels: &labels,
        };
        assert!(matches!(
            loss(&params, &batch).unwrap_err(),
            Error::Label(_)
        ));
    }

    #[test]
    fn loss_is_invariant_to_feature_scale() {
        // rescaling one sample, or all of them, changes nothing
        let params = toy_params(6);
        let features = array![[1.0, 0.5, -0.2, 0.3], [0.2, 1.0, 0.1, -0.4]];
        let labels = [0usize, 1];
        let a = loss(
            &params,
            &Batch {
                features: features.view(),
                labels: &labels,
            },
        )
        .unwrap();
        let mut one_row = features.clone();
        let scaled_row = one_row.row(0).mapv(|v| v * 7.0);
        one_row.row_mut(0).assign(&scaled_row);
        let all_rows = features.mapv(|v| v * 0.02);
        for variant in [one_row, all_rows] {
            let b = loss(
                &params,
                &Batch {
                    features: variant.view(),
                    labels: &labels,
                },
            )
            .unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn confident_correct_batch_drives_loss_to_zero_without_decay() {
        let mut params = toy_params(8);
        params.hyper.weight_decay = 0.0;
        params.adapter = Array2::eye(4).slice_move(ndarray::s![.., ..3]);
        params.weights = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        params.tau = 60.0;
        // every sample sits exactly on its class direction
        let features = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let labels = [0usize, 1, 2];
        let batch = Batch {
            features: features.view(),
            labels: &labels,
        };
        let l = loss(&params, &batch).unwrap();
        assert!(l < 1e-9, "loss {l}");
    }

    #[test]
    fn loss_without_decay_is_invariant_to_weight_row_scale() {
        let mut params = toy_params(7);
        params.hyper.weight_decay = 0.0;
        let features = array![[1.0, 0.5, -0.2, 0.3]];
        let labels = [1usize];
        let batch = Batch {
            features: features.view(),
            labels: &labels,
        };
        let before = loss(&params, &batch).unwrap();
        let row = params.weights.row(1).mapv(|v| v * 3.5);
        params.weights.row_mut(1).assign(&row);
        let after = loss(&params, &batch).unwrap();
        assert!((before - after).abs() < 1e-9);
    }

    /// Central finite differences over a coordinate subset; the oracle for
    /// the analytic gradient.
    fn finite_difference_check(seed: u64) -> f64 {
        use rand::Rng;
        let mut rng = stream_rng(seed, 0, 1234);
        let params = {
            let mut p = toy_params(seed);
            p.hyper.weight_decay = 5e-4;
            p
        };
        let features = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        let batch = Batch {
            features: features.view(),
            labels: &labels,
        };
        let analytic = gradient(&params, &batch).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut check = |get: &dyn Fn(&ClassifierParams) -> f64,
                         set: &dyn Fn(&mut ClassifierParams, f64),
                         g: f64| {
            let base = get(&params);
            let mut plus = params.clone();
            set(&mut plus, base + h);
            let mut minus = params.clone();
            set(&mut minus, base - h);
            let fd = (loss(&plus, &batch).unwrap() - loss(&minus, &batch).unwrap()) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        };
        for _ in 0..5 {
            let (r, c) = (rng.gen_range(0..4), rng.gen_range(0..3));
            check(
                &|p| p.adapter[[r, c]],
                &move |p, v| p.adapter[[r, c]] = v,
                analytic.adapter[[r, c]],
            );
            let (wr, wc) = (rng.gen_range(0..3), rng.gen_range(0..3));
            check(
                &|p| p.weights[[wr, wc]],
                &move |p, v| p.weights[[wr, wc]] = v,
                analytic.weights[[wr, wc]],
            );
        }
        check(&|p| p.tau, &|p, v| p.tau = v, analytic.tau);
        worst
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let worst = finite_difference_check(seed);
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn training_on_separable_classes_reaches_095() {
        let fs = FeatureSet::synth(3, 30, 8, 0.05, 11).unwrap();
        let init = ClassifierParams::init(
            8,
            8,
            3,
            10.0,
            Hyper {
                epochs: 24,
                seed: 2,
                ..Hyper::default()
            },
        )
        .unwrap();
        let out = train(&fs, init).unwrap();
        assert!(out.final_loss <= out.initial_loss);
        let acc = training_accuracy(&out.params, &fs).unwrap();
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn zero_epochs_returns_params_unchanged() {
        let fs = FeatureSet::synth(3, 10, 8, 0.3, 12).unwrap();
        let init = ClassifierParams::init(
            8,
            4,
            3,
            10.0,
            Hyper {
                epochs: 0,
                seed: 3,
                ..Hyper::default()
            },
        )
        .unwrap();
        let reference = init.clone();
        let out = train(&fs, init).unwrap();
        assert_eq!(out.params, reference);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let fs = FeatureSet::synth(4, 15, 6, 0.2, 13).unwrap();
        let mk = || {
            ClassifierParams::init(
                6,
                5,
                4,
                10.0,
                Hyper {
                    epochs: 8,
                    seed: 5,
                    ..Hyper::default()
                },
            )
            .unwrap()
        };
        let a = train(&fs, mk()).unwrap();
        let b = train(&fs, mk()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    }

    #[test]
    fn absurd_learning_rate_is_a_training_failure() {
        let fs = FeatureSet::synth(3, 10, 6, 0.2, 14).unwrap();
        let init = ClassifierParams::init(
            6,
            4,
            3,
            10.0,
            Hyper {
                epochs: 10,
                learning_rate: 1e120,
                seed: 4,
                ..Hyper::default()
            },
        )
        .unwrap();
        let err = train(&fs, init).unwrap_err();
        assert!(
            matches!(err, Error::Training(_) | Error::Degenerate(_)),
            "{err}"
        );
    }

    #[test]
    fn schedule_scales_below_sixty_epochs() {
        assert_eq!(lr_drop_epochs(60), vec![10, 20, 40]);
        assert_eq!(lr_drop_epochs(100), vec![10, 20, 40]);
        assert_eq!(lr_drop_epochs(12), vec![2, 4, 8]);
        assert_eq!(lr_drop_epochs(30), vec![5, 10, 20]);
        let tiny = lr_drop_epochs(3);
        assert!(!tiny.is_empty() && tiny.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let params = toy_params(21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.prfc");
        params.save(&path).unwrap();
        let back = ClassifierParams::load(&path).unwrap();
        assert_eq!(params, back);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            ClassifierParams::load(&path).unwrap_err(),
            Error::Format(_)
        ));
    }
}
