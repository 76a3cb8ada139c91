//! Kernel network training by alternating optimization.
//!
//! Each epoch fixes the network and solves the SVM dual on its Gram matrix,
//! then fixes the SVM and takes SGD steps on the network weights to lower a
//! weighted logistic surrogate of the 0-1 disagreement with the targets:
//!
//! ```text
//! J = beta_minus * sum_{t_i = -1} s(gamma g_i) + beta_plus * sum_{t_i = +1} s(-gamma g_i)
//! ```
//!
//! where `s` is the logistic function and `g_i` the SVM score of training
//! sample `i`. Targets are the true labels when training the reference
//! network and the signs of the reference classifier's scores when training
//! a cheaper surrogate. A large `beta_plus / beta_minus` makes the surrogate
//! keep the reference's positives at the cost of extra false alarms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::base_kernels::KernelBank;
use crate::error::{Error, Result};
use crate::kernel_net::{Architecture, KernelNetwork, Weights};
use crate::matrix::SquareMatrix;
use crate::metrics;
use crate::svm::{self, SolverParams, SvmModel, SvmProblem};

pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_STEP_DECAY: f64 = 0.99;
/// Initial SGD step. Larger steps can drive every ReLU unit dead in one update, which zeroes the kernel for good.
pub const DEFAULT_INITIAL_STEP: f64 = 0.1;
pub const DEFAULT_NUM_BATCHES: usize = 10;
pub const F_MAX_EPOCHS: usize = 10_000;
pub const G_MAX_EPOCHS: usize = 5_000;
/// Positive-class share of the total weight used for surrogate networks.
pub const CONSERVATION_SHARE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub beta_plus: f64,
    pub beta_minus: f64,
    /// Logistic steepness.
    pub gamma: f64,
    pub max_epochs: usize,
    pub num_batches: usize,
    pub initial_step: f64,
    pub step_decay: f64,
    pub svm_c: f64,
    pub svm_tol: f64,
    pub svm_max_passes: usize,
    /// Stop once the relative objective change over `convergence_window` epochs
    /// falls below `convergence_tol`.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta_plus: 1.0,
            beta_minus: 1.0,
            gamma: DEFAULT_GAMMA,
            max_epochs: G_MAX_EPOCHS,
            num_batches: DEFAULT_NUM_BATCHES,
            initial_step: DEFAULT_INITIAL_STEP,
            step_decay: DEFAULT_STEP_DECAY,
            svm_c: svm::DEFAULT_C,
            svm_tol: svm::DEFAULT_TOL,
            svm_max_passes: svm::DEFAULT_MAX_PASSES,
            convergence_window: 20,
            convergence_tol: 1e-6,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(self.beta_plus >= 0.0 && self.beta_minus >= 0.0) {
            return Err(Error::invalid("betas must be nonnegative"));
        }
        if !pos(self.gamma) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if !(self.step_decay > 0.0 && self.step_decay < 1.0) {
            return Err(Error::invalid("step_decay must lie in (0, 1)"));
        }
        if !pos(self.initial_step) || !pos(self.svm_c) || !pos(self.svm_tol) {
            return Err(Error::invalid("initial_step, svm_c and svm_tol must be positive"));
        }
        if self.num_batches == 0 || self.svm_max_passes == 0 {
            return Err(Error::invalid("num_batches and svm_max_passes must be positive"));
        }
        Ok(())
    }

    pub fn with_betas(mut self, (beta_plus, beta_minus): (f64, f64)) -> Self {
        self.beta_plus = beta_plus;
        self.beta_minus = beta_minus;
        self
    }

    fn solver_params(&self) -> SolverParams {
        SolverParams {
            tol: self.svm_tol,
            max_passes: self.svm_max_passes,
        }
    }
}

/// Training targets: true labels, or reference-classifier scores to distill.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Labels(&'a [f64]),
    Scores(&'a [f64]),
}

impl Targets<'_> {
    pub fn to_labels(&self) -> Result<Vec<f64>> {
        match *self {
            Targets::Labels(y) => {
                svm::validate_labels(y)?;
                Ok(y.to_vec())
            }
            Targets::Scores(s) => {
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("reference scores must be finite"));
                }
                Ok(pseudo_labels(s))
            }
        }
    }

    fn len(&self) -> usize {
        match *self {
            Targets::Labels(v) | Targets::Scores(v) => v.len(),
        }
    }
}

/// `+1` where the score is strictly positive, `-1` otherwise.
pub fn pseudo_labels(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|&s| svm::sign_label(s)).collect()
}

fn class_counts(labels: &[f64]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y > 0.0).count();
    (pos, labels.len() - pos)
}

/// `(1 / N+, 1 / N-)` from true labels.
pub fn betas_for_f(labels: &[f64]) -> Result<(f64, f64)> {
    svm::validate_labels(labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!("both classes required, got {pos} positives and {neg} negatives")));
    }
    Ok((1.0 / pos as f64, 1.0 / neg as f64))
}

/// `(0.99 / |f > 0|, 0.01 / |f <= 0|)` from reference scores.
pub fn betas_for_g(f_scores: &[f64]) -> Result<(f64, f64)> {
    let (pos, neg) = class_counts(&pseudo_labels(f_scores));
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "both pseudo-classes required, got {pos} positive and {neg} non-positive scores"
        )));
    }
    Ok((CONSERVATION_SHARE / pos as f64, (1.0 - CONSERVATION_SHARE) / neg as f64))
}

/// Logistic function, stable for large `|z|`.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn loss(g_scores: &[f64], labels: &[f64], config: &DistillConfig) -> f64 {
    debug_assert_eq!(g_scores.len(), labels.len());
    let mut neg = 0.0;
    let mut pos = 0.0;
    for (&g, &y) in g_scores.iter().zip(labels) {
        if y > 0.0 {
            pos += logistic(-config.gamma * g);
        } else {
            neg += logistic(config.gamma * g);
        }
    }
    config.beta_minus * neg + config.beta_plus * pos
}

/// `dJ/dg_i` for every training score.
pub fn loss_gradient_wrt_scores(g_scores: &[f64], labels: &[f64], config: &DistillConfig) -> Vec<f64> {
    g_scores
        .iter()
        .zip(labels)
        .map(|(&g, &y)| {
            let z = config.gamma * g;
            let slope = config.gamma * logistic(z) * logistic(-z);
            if y > 0.0 {
                -config.beta_plus * slope
            } else {
                config.beta_minus * slope
            }
        })
        .collect()
}

/// Gradient of the loss with respect to the (symmetric) Gram entries, with
/// the SVM coefficients held fixed. `kappa_ij` and `kappa_ji` are one
/// variable, so off-diagonal entries collect both uses.
pub fn loss_gradient_wrt_gram(g_scores: &[f64], labels: &[f64], model: &SvmModel, config: &DistillConfig) -> Result<SquareMatrix> {
    let n = g_scores.len();
    if labels.len() != n || model.len() != n {
        return Err(Error::invalid(format!(
            "shape mismatch: {n} scores, {} labels, model over {} samples",
            labels.len(),
            model.len()
        )));
    }
    let dg = loss_gradient_wrt_scores(g_scores, labels, config);
    let ay: Vec<f64> = model.alphas.iter().zip(&model.labels).map(|(a, y)| a * y).collect();
    let mut m = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j {
                dg[i] * ay[i]
            } else {
                dg[i] * ay[j] + dg[j] * ay[i]
            };
            m.set(i, j, v);
        }
    }
    Ok(m)
}

/// Step-size rule driven by the speed of change of the objective.
///
/// `history` ends with the newest objective. With `d_t = |J_t - J_(t-1)|`,
/// the step shrinks by `decay` when `d_t > d_(t-1)` and grows by `1/decay`
/// otherwise; it is unchanged until three objectives are known.
pub fn adapt_step(step: f64, decay: f64, history: &[f64]) -> f64 {
    let n = history.len();
    if n < 3 {
        return step;
    }
    let now = (history[n - 1] - history[n - 2]).abs();
    let before = (history[n - 2] - history[n - 3]).abs();
    if now > before {
        step * decay
    } else {
        step / decay
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub step: f64,
    pub train_eer: Option<f64>,
    pub validation_eer: Option<f64>,
    pub support: usize,
}

impl EpochRecord {
    /// One `key=value` line for the training log.
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.4}"));
        format!(
            "epoch={} objective={:.10e} step={:.6e} train_eer={} validation_eer={} support={}",
            self.epoch,
            self.objective,
            self.step,
            opt(self.train_eer),
            opt(self.validation_eer),
            self.support
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub network: KernelNetwork,
    /// SVM over all training samples (not compacted).
    pub svm: SvmModel,
    pub step: f64,
    pub objective_history: Vec<f64>,
    pub log: Vec<EpochRecord>,
    pub converged: bool,
    /// Training scores `g(x_i)` of the final network and SVM.
    pub train_scores: Vec<f64>,
}

/// Validation samples and their targets (true labels or reference scores).
pub struct Validation<'a> {
    pub samples: &'a [Vec<f64>],
    pub targets: Targets<'a>,
}

pub fn train(
    samples: &[Vec<f64>],
    targets: Targets<'_>,
    arch: &Architecture,
    bank: &KernelBank,
    config: &DistillConfig,
) -> Result<TrainingState> {
    train_with(samples, targets, KernelNetwork::init_flat(arch), bank, config, None, |_| {})
}

/// Scores of every training sample from a Gram matrix and an SVM over the same samples.
pub fn training_scores(gram: &SquareMatrix, model: &SvmModel) -> Vec<f64> {
    (0..gram.size()).map(|i| model.decision_unchecked(gram.row(i))).collect()
}

fn eer_of(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let pred = pseudo_labels(scores);
    metrics::detection_metrics(&pred, labels).ok().map(|r| r.eer())
}

/// Full alternating optimization starting from `network`.
///
/// Runs `max_epochs` weight updates; the SVM and objective are recomputed
/// after the last update, so the returned network and SVM are consistent.
pub fn train_with(
    samples: &[Vec<f64>],
    targets: Targets<'_>,
    mut network: KernelNetwork,
    bank: &KernelBank,
    config: &DistillConfig,
    validation: Option<&Validation<'_>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingState> {
    config.validate()?;
    if samples.len() != targets.len() {
        return Err(Error::invalid(format!("{} samples but {} targets", samples.len(), targets.len())));
    }
    let labels = targets.to_labels()?;
    let (pos, neg) = class_counts(&labels);
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!("both classes required, got {pos} positives and {neg} negatives")));
    }
    let val_labels = validation.map(|v| v.targets.to_labels()).transpose()?;

    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = config.initial_step;
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut converged = false;

    let mut epoch = 0;
    loop {
        let gram = network.gram_matrix(bank, samples)?;
        let model = svm::solve_dual(&SvmProblem { gram: &gram, labels: &labels, c: config.svm_c }, &config.solver_params())?;
        let scores = training_scores(&gram, &model);
        let objective = loss(&scores, &labels, config);
        if !objective.is_finite() {
            return Err(Error::Divergence { stage: None, epoch, objective, step });
        }
        history.push(objective);
        step = adapt_step(step, config.step_decay, &history);

        let validation_eer = match (validation, &val_labels) {
            (Some(v), Some(vl)) => {
                let (compact, keep) = model.compact();
                let refs: Vec<&[f64]> = keep.iter().map(|&k| samples[k].as_slice()).collect();
                let vs: Vec<f64> = v
                    .samples
                    .par_iter()
                    .map(|x| compact.decision_unchecked(&network.kernel_row(bank, x, &refs)))
                    .collect();
                eer_of(&vs, vl)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            objective,
            step,
            train_eer: eer_of(&scores, &labels),
            validation_eer,
            support: model.nonzero_support().len(),
        };
        on_epoch(&record);
        log.push(record);

        let w = config.convergence_window;
        if w > 0 && history.len() > w {
            let old = history[history.len() - 1 - w];
            if (objective - old).abs() <= config.convergence_tol * old.abs().max(f64::MIN_POSITIVE) {
                converged = true;
            }
        }
        if epoch == config.max_epochs || converged {
            return Ok(TrainingState {
                network,
                svm: model,
                step,
                objective_history: history,
                log,
                converged,
                train_scores: scores,
            });
        }

        let dgram = loss_gradient_wrt_gram(&scores, &labels, &model, config)?;
        order.shuffle(&mut rng);
        let batch_len = n.div_ceil(config.num_batches);
        for batch in order.chunks(batch_len) {
            let grads = batch_gradient(&network, bank, samples, &dgram, batch);
            network.apply_gradient(&grads, step);
            if !network.all_finite() {
                return Err(Error::Divergence { stage: None, epoch, objective, step });
            }
        }
        epoch += 1;
    }
}

/// Summed weight gradient over the rows owned by `batch`.
///
/// Ordered pair `(i, j)` belongs to the batch holding `i`; each off-diagonal
/// symmetric entry is split evenly between its two rows, so the batches of
/// one epoch together cover the full gradient exactly once.
fn batch_gradient(network: &KernelNetwork, bank: &KernelBank, samples: &[Vec<f64>], dgram: &SquareMatrix, batch: &[usize]) -> Weights {
    let mut rows = batch.to_vec();
    rows.sort_unstable();
    let per_row: Vec<Option<Weights>> = rows
        .par_iter()
        .map(|&i| {
            let drow = dgram.row(i);
            if drow.iter().all(|&v| v == 0.0) {
                return None;
            }
            let mut grads = network.zero_grads();
            let mut base = vec![0.0; bank.num_chunks()];
            for (j, &d) in drow.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let weight = if i == j { d } else { 0.5 * d };
                bank.base_kernel_into(&samples[i], &samples[j], &mut base);
                let trace = network.forward_trace(&base);
                network.backward_accumulate(&trace, weight, &mut grads);
            }
            Some(grads)
        })
        .collect();
    let mut total = network.zero_grads();
    for g in per_row.into_iter().flatten() {
        for (t, r) in total.iter_mut().zip(&g) {
            for (a, b) in t.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    total
}
