//! Spectrally normalized ReLU network for the matched uncertainty `d_hat(x)`.
//!
//! Every layer is rescaled to `W / sigma(W) * beta^(1/L)` (`L` layers), so the
//! network is `beta`-Lipschitz in its input features.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::UncertaintyModel;

pub const MODEL_FORMAT: &str = "rccm-snmlp/1";

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("empty training set")]
    EmptyData,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("unsupported model format {0:?}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnMlp {
    layer_dims: Vec<usize>,
    /// State coordinates fed to the network, in order.
    pub features: Vec<usize>,
    pub feature_names: Vec<String>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub beta: f64,
    pub sigma_estimates: Vec<f64>,
    /// Persisted right singular vector guesses for power iteration.
    power_vectors: Vec<DVector<f64>>,
}

/// Largest singular value, exactly.
pub fn spectral_norm(w: &DMatrix<f64>) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    w.singular_values().max()
}

impl SnMlp {
    /// He-uniform initialization, normalized.
    pub fn new(
        layer_dims: Vec<usize>,
        features: Vec<usize>,
        feature_names: Vec<String>,
        beta: f64,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(LearnerError::Invalid("need at least input and output dims, all positive".into()));
        }
        if features.len() != layer_dims[0] || feature_names.len() != features.len() {
            return Err(LearnerError::Dimension { expected: layer_dims[0], got: features.len() });
        }
        if !(beta > 0.0) {
            return Err(LearnerError::Invalid("beta must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut power_vectors = Vec::new();
        for w in layer_dims.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..bound)));
            biases.push(DVector::zeros(w[1]));
            power_vectors.push(DVector::from_fn(w[0], |_, _| rng.gen_range(-1.0..1.0)).normalize());
        }
        let mut net = Self {
            sigma_estimates: vec![0.0; weights.len()],
            layer_dims,
            features,
            feature_names,
            weights,
            biases,
            beta,
            power_vectors,
        };
        net.normalize();
        Ok(net)
    }

    /// Builds a network from explicit parameters, without normalizing.
    pub fn from_parts(
        features: Vec<usize>,
        feature_names: Vec<String>,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        beta: f64,
    ) -> Result<Self, LearnerError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(LearnerError::Invalid("one bias per weight matrix".into()));
        }
        let mut layer_dims = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ncols() != *layer_dims.last().unwrap() || b.len() != w.nrows() {
                return Err(LearnerError::Invalid("layer shapes do not chain".into()));
            }
            layer_dims.push(w.nrows());
        }
        if features.len() != layer_dims[0] || feature_names.len() != features.len() {
            return Err(LearnerError::Dimension { expected: layer_dims[0], got: features.len() });
        }
        let power_vectors = weights
            .iter()
            .map(|w| DVector::from_element(w.ncols(), 1.0 / (w.ncols() as f64).sqrt()))
            .collect();
        Ok(Self {
            sigma_estimates: weights.iter().map(spectral_norm).collect(),
            layer_dims,
            features,
            feature_names,
            weights,
            biases,
            beta,
            power_vectors,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// `beta^(1/L)`, the per-layer target norm.
    pub fn layer_budget(&self) -> f64 {
        self.beta.powf(1.0 / self.num_layers() as f64)
    }

    /// Feature vector of a full state.
    pub fn extract(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.features.len(), self.features.iter().map(|&k| x[k]))
    }

    pub fn forward(&self, feat: &DVector<f64>) -> Result<DVector<f64>, LearnerError> {
        if feat.len() != self.layer_dims[0] {
            return Err(LearnerError::Dimension { expected: self.layer_dims[0], got: feat.len() });
        }
        let last = self.num_layers() - 1;
        let mut h = feat.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = w * h + b;
            if i < last {
                h.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Columns are samples.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.num_layers() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = w * h;
            for mut col in h.column_iter_mut() {
                col += b;
            }
            if i < last {
                h.apply(|v| *v = v.max(0.0));
            }
        }
        h
    }

    /// `steps` rounds of power iteration per layer, starting from the
    /// persisted vectors.
    pub fn power_iterate(&mut self, steps: usize) {
        for (i, w) in self.weights.iter().enumerate() {
            let mut v = self.power_vectors[i].clone();
            let mut sigma = self.sigma_estimates[i];
            for _ in 0..steps {
                let u = w * &v;
                let un = u.norm();
                if un == 0.0 {
                    sigma = 0.0;
                    break;
                }
                let wt = w.transpose() * (u / un);
                sigma = wt.norm();
                if sigma == 0.0 {
                    break;
                }
                v = wt / sigma;
            }
            self.power_vectors[i] = v;
            self.sigma_estimates[i] = sigma;
        }
    }

    fn rescale_with_estimates(&mut self) {
        let target = self.layer_budget();
        for (w, &s) in self.weights.iter_mut().zip(&self.sigma_estimates) {
            if s > 0.0 {
                *w *= target / s;
            } else {
                log::warn!("skipping normalization of a zero layer");
            }
        }
        for s in self.sigma_estimates.iter_mut() {
            if *s > 0.0 {
                *s = target;
            }
        }
    }

    /// Rescales each layer by its exact top singular value.
    pub fn normalize(&mut self) {
        self.sigma_estimates = self.weights.iter().map(spectral_norm).collect();
        self.rescale_with_estimates();
    }

    /// Cheap normalization used during training: a few power-iteration steps.
    pub fn normalize_estimated(&mut self, steps: usize) {
        self.power_iterate(steps);
        self.rescale_with_estimates();
    }

    /// Product of exact per-layer spectral norms, an upper bound on the
    /// network's Lipschitz constant.
    pub fn lipschitz_certificate(&self) -> f64 {
        self.weights.iter().map(spectral_norm).product()
    }

    /// Mean over samples of `|d_hat - y|^2` and its gradient.
    pub fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
    ) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let nl = self.num_layers();
        let batch = x.ncols() as f64;
        let mut acts = vec![x.clone()];
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = w * acts.last().unwrap();
            for mut col in h.column_iter_mut() {
                col += b;
            }
            if i < nl - 1 {
                h.apply(|v| *v = v.max(0.0));
            }
            acts.push(h);
        }
        let resid = acts.last().unwrap() - y;
        let loss = resid.norm_squared() / batch;
        let mut delta = resid * (2.0 / batch);
        let mut gw = vec![DMatrix::zeros(0, 0); nl];
        let mut gb = vec![DVector::zeros(0); nl];
        for i in (0..nl).rev() {
            gw[i] = &delta * acts[i].transpose();
            gb[i] = delta.column_sum();
            if i > 0 {
                let mut back = self.weights[i].transpose() * &delta;
                back.zip_apply(&acts[i], |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = back;
            }
        }
        (loss, gw, gb)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            layer_dims: self.layer_dims.clone(),
            features: self.features.clone(),
            feature_names: self.feature_names.clone(),
            beta: self.beta,
            weights: self
                .weights
                .iter()
                .map(|w| w.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self, LearnerError> {
        if file.format != MODEL_FORMAT {
            return Err(LearnerError::Format(file.format.clone()));
        }
        let mut weights = Vec::new();
        for rows in &file.weights {
            let r = rows.len();
            let c = rows.first().map_or(0, |x| x.len());
            if rows.iter().any(|row| row.len() != c) {
                return Err(LearnerError::Invalid("ragged weight matrix".into()));
            }
            weights.push(DMatrix::from_fn(r, c, |i, j| rows[i][j]));
        }
        let biases = file.biases.iter().map(|b| DVector::from_column_slice(b)).collect();
        let net = Self::from_parts(file.features.clone(), file.feature_names.clone(), weights, biases, file.beta)?;
        if net.layer_dims != file.layer_dims {
            return Err(LearnerError::Invalid("layer_dims disagree with weight shapes".into()));
        }
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LearnerError> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| LearnerError::Parse(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LearnerError> {
        let text = serde_json::to_string_pretty(&self.to_file()).map_err(|e| LearnerError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

impl UncertaintyModel for SnMlp {
    fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward(&self.extract(x)).expect("feature count checked at construction")
    }
}

/// On-disk network description, JSON encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub layer_dims: Vec<usize>,
    pub features: Vec<usize>,
    pub feature_names: Vec<String>,
    pub beta: f64,
    /// Row-major weight matrices.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub feature_names: Vec<String>,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// One tag per row: the run or generator the row came from.
    pub provenance: Vec<String>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: Vec<f64>, target: Vec<f64>, tag: &str) {
        self.inputs.push(input);
        self.targets.push(target);
        self.provenance.push(tag.to_string());
    }

    pub fn extend(&mut self, other: &TrainingSet) {
        self.inputs.extend(other.inputs.iter().cloned());
        self.targets.extend(other.targets.iter().cloned());
        self.provenance.extend(other.provenance.iter().cloned());
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.is_empty() {
            return Err(LearnerError::EmptyData);
        }
        if self.targets.len() != self.inputs.len() || self.provenance.len() != self.inputs.len() {
            return Err(LearnerError::Invalid("inputs, targets and provenance differ in length".into()));
        }
        let (di, dt) = (self.inputs[0].len(), self.targets[0].len());
        for (a, b) in self.inputs.iter().zip(&self.targets) {
            if a.len() != di || b.len() != dt {
                return Err(LearnerError::Invalid("ragged rows".into()));
            }
            if a.iter().chain(b).any(|v| !v.is_finite()) {
                return Err(LearnerError::Invalid("non-finite value".into()));
            }
        }
        Ok(())
    }

    /// Root mean square of `|d_hat - y|` over the set.
    pub fn rmse(&self, net: &SnMlp) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let (x, y) = self.matrices(&(0..self.len()).collect::<Vec<_>>());
        let r = net.forward_batch(&x) - y;
        (r.norm_squared() / self.len() as f64).sqrt()
    }

    fn matrices(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let di = self.inputs[0].len();
        let dt = self.targets[0].len();
        let x = DMatrix::from_fn(di, idx.len(), |r, c| self.inputs[idx[c]][r]);
        let y = DMatrix::from_fn(dt, idx.len(), |r, c| self.targets[idx[c]][r]);
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Power-iteration steps per normalization during training.
    pub power_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            step_size: 1e-3,
            batch_size: 64,
            optimizer: Optimizer::Adam,
            power_steps: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
}

struct AdamState {
    mw: Vec<DMatrix<f64>>,
    vw: Vec<DMatrix<f64>>,
    mb: Vec<DVector<f64>>,
    vb: Vec<DVector<f64>>,
    t: i32,
}

/// Mini-batch training of the mean squared error, normalizing after every
/// update and exactly once more at the end.
pub fn train(net: &mut SnMlp, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainReport, LearnerError> {
    data.validate()?;
    if data.inputs[0].len() != net.layer_dims[0] {
        return Err(LearnerError::Dimension { expected: net.layer_dims[0], got: data.inputs[0].len() });
    }
    if data.targets[0].len() != *net.layer_dims.last().unwrap() {
        return Err(LearnerError::Dimension {
            expected: *net.layer_dims.last().unwrap(),
            got: data.targets[0].len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = AdamState {
        mw: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
        vw: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
        mb: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        vb: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        t: 0,
    };
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = data.matrices(chunk);
            let (loss, gw, gb) = net.loss_and_gradient(&x, &y);
            if !loss.is_finite() {
                return Err(LearnerError::NonFinite { epoch });
            }
            total += loss * chunk.len() as f64;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for i in 0..net.num_layers() {
                        net.weights[i] -= &gw[i] * cfg.step_size;
                        net.biases[i] -= &gb[i] * cfg.step_size;
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let c1 = 1.0 - b1.powi(adam.t);
                    let c2 = 1.0 - b2.powi(adam.t);
                    for i in 0..net.num_layers() {
                        adam.mw[i] = &adam.mw[i] * b1 + &gw[i] * (1.0 - b1);
                        adam.vw[i] = &adam.vw[i] * b2 + gw[i].component_mul(&gw[i]) * (1.0 - b2);
                        adam.mb[i] = &adam.mb[i] * b1 + &gb[i] * (1.0 - b1);
                        adam.vb[i] = &adam.vb[i] * b2 + gb[i].component_mul(&gb[i]) * (1.0 - b2);
                        let step_w = adam.mw[i].zip_map(&adam.vw[i], |m, v| (m / c1) / ((v / c2).sqrt() + eps));
                        let step_b = adam.mb[i].zip_map(&adam.vb[i], |m, v| (m / c1) / ((v / c2).sqrt() + eps));
                        net.weights[i] -= step_w * cfg.step_size;
                        net.biases[i] -= step_b * cfg.step_size;
                    }
                }
            }
            net.normalize_estimated(cfg.power_steps);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(LearnerError::NonFinite { epoch });
        }
        epoch_loss.push(mean);
    }
    net.normalize();
    Ok(TrainReport { epoch_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let w = vec![DMatrix::zeros(3, 2), DMatrix::zeros(1, 3)];
        let b = vec![DVector::zeros(3), DVector::zeros(1)];
        let net = SnMlp::from_parts(vec![0, 1], names(2), w, b, 4.0).unwrap();
        assert_eq!(net.forward(&DVector::from_vec(vec![1.0, -2.0])).unwrap()[0], 0.0);
    }

    #[test]
    fn single_layer_is_affine() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.25]);
        let b = DVector::from_vec(vec![0.1, -0.2]);
        let net = SnMlp::from_parts(vec![0, 1], names(2), vec![w.clone()], vec![b.clone()], 100.0).unwrap();
        let x = DVector::from_vec(vec![-1.5, 2.0]);
        assert_eq!(net.forward(&x).unwrap(), &w * &x + &b);
        assert!(net.forward(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn layer_rescaled_to_budget() {
        // sigma = 5 layer in a 5-layer net with beta = 4
        let mut w = vec![DMatrix::identity(2, 2) * 5.0];
        for _ in 0..4 {
            w.push(DMatrix::identity(2, 2));
        }
        let b = vec![DVector::zeros(2); 5];
        let mut net = SnMlp::from_parts(vec![0, 1], names(2), w, b, 4.0).unwrap();
        net.normalize();
        let s = spectral_norm(&net.weights[0]);
        assert!((s - 4f64.powf(0.2)).abs() < 1e-12);
        assert!((s - 1.3195).abs() < 1e-4);
        let before = net.clone();
        net.normalize();
        for (a, b) in before.weights.iter().zip(&net.weights) {
            assert!((a - b).amax() < 1e-9);
        }
        assert!(net.lipschitz_certificate() <= 4.0 * (1.0 + 1e-6));
    }

    #[test]
    fn power_iteration_approaches_exact_norm() {
        let mut net = SnMlp::new(vec![4, 16, 16, 2], vec![0, 1, 2, 3], names(4), 4.0, 7).unwrap();
        net.weights[1][(0, 0)] += 3.0;
        let exact = spectral_norm(&net.weights[1]);
        net.power_iterate(500);
        assert!((net.sigma_estimates[1] - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn model_file_roundtrip() {
        let net = SnMlp::new(vec![4, 8, 2], vec![0, 1, 3, 4], names(4), 4.0, 1).unwrap();
        let back = SnMlp::from_file(&net.to_file()).unwrap();
        assert_eq!(back.weights, net.weights);
        assert_eq!(back.biases, net.biases);
        assert_eq!(back.features, net.features);
        let mut bad = net.to_file();
        bad.format = "other".into();
        assert!(matches!(SnMlp::from_file(&bad), Err(LearnerError::Format(_))));
    }

    #[test]
    fn empty_data_rejected() {
        let mut net = SnMlp::new(vec![2, 4, 1], vec![0, 1], names(2), 1.0, 1).unwrap();
        assert!(matches!(
            train(&mut net, &TrainingSet::default(), &TrainConfig::default()),
            Err(LearnerError::EmptyData)
        ));
    }
}
