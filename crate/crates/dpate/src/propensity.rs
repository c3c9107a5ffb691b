//! Phase 1: propensity model training and perturbation.
//!
//! The model is an ℓ2-regularized logistic regression of treatment on
//! covariates with loss
//!
//!   J(w) = (1/n) Σ log(1 + exp(−xᵢᵀw tᵢ)) + (λ/2)‖w‖²,   tᵢ = 2Tᵢ − 1,
//!
//! minimized by deterministic fixed-step gradient descent (zero init, step
//! 1/L from the Hessian bound L = max‖xᵢ‖²/4 + λ, so retraining reproduces
//! weights bit for bit and progress never depends on comparing losses that
//! differ below f64 resolution). Under
//! sample-level privacy the weights get Laplace noise calibrated to the
//! L1-sensitivity 2d/(nλ) of the regularized minimizer, and the per-sample
//! scores get Laplace noise at unit sensitivity followed by a clip to [0, 1].

use crate::dataset::Dataset;
use crate::dp::{self, BudgetLedger, Composition, NoiseSource};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

pub(crate) const PHASE_WEIGHTS: &str = "phase1_weights";
pub(crate) const PHASE_SCORES: &str = "phase1_scores";

/// A trained (or privatized) logistic model.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub trained_iterations: usize,
    pub final_loss: f64,
    /// False when training stopped at max_iters with the gradient still
    /// above tolerance. Kept as a warning rather than an error: the weights
    /// are perturbed afterwards anyway.
    pub converged: bool,
}

impl LogisticModel {
    /// Plain-text export: line 1 = λ, line 2 = comma-separated weights.
    pub fn to_text(&self) -> String {
        let weights: Vec<String> = self.weights.iter().map(|w| w.to_string()).collect();
        format!("{}\n{}\n", self.lambda, weights.join(","))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let lambda: f64 = lines
            .next()
            .ok_or_else(|| Error::SchemaError("missing lambda line".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::SchemaError(format!("bad lambda: {e}")))?;
        let weights_line =
            lines.next().ok_or_else(|| Error::SchemaError("missing weights line".into()))?;
        let weights = weights_line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::SchemaError(format!("bad weight: {e}")))?;
        Ok(LogisticModel {
            weights,
            lambda,
            trained_iterations: 0,
            final_loss: f64::NAN,
            converged: true,
        })
    }
}

/// Propensity scores e(X), one per sample, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityScores {
    pub scores: Vec<f64>,
    pub perturbed: bool,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(weights: &[f64], dataset: &Dataset) -> Result<()> {
    if weights.len() != dataset.d() {
        return Err(Error::DimensionMismatch { expected: dataset.d(), got: weights.len() });
    }
    Ok(())
}

/// Regularized empirical loss J(w).
pub fn loss(model: &LogisticModel, dataset: &Dataset) -> Result<f64> {
    check_dims(&model.weights, dataset)?;
    Ok(loss_at(&model.weights, model.lambda, dataset))
}

fn loss_at(weights: &[f64], lambda: f64, dataset: &Dataset) -> f64 {
    let n = dataset.n() as f64;
    let mut total = 0.0;
    for i in 0..dataset.n() {
        let t = if dataset.treatment()[i] { 1.0 } else { -1.0 };
        total += softplus(-dot(dataset.row(i), weights) * t);
    }
    let sq_norm: f64 = weights.iter().map(|w| w * w).sum();
    total / n + 0.5 * lambda * sq_norm
}

/// Analytic gradient ∇J(w) = (1/n) Σ −σ(−xᵢᵀw tᵢ) tᵢ xᵢ + λw.
pub fn gradient(model: &LogisticModel, dataset: &Dataset) -> Result<Vec<f64>> {
    check_dims(&model.weights, dataset)?;
    Ok(gradient_at(&model.weights, model.lambda, dataset))
}

fn gradient_at(weights: &[f64], lambda: f64, dataset: &Dataset) -> Vec<f64> {
    let n = dataset.n() as f64;
    let mut grad = vec![0.0; weights.len()];
    for i in 0..dataset.n() {
        let t = if dataset.treatment()[i] { 1.0 } else { -1.0 };
        let margin = dot(dataset.row(i), weights) * t;
        let coeff = -sigmoid(-margin) * t / n;
        for (g, &x) in grad.iter_mut().zip(dataset.row(i)) {
            *g += coeff * x;
        }
    }
    for (g, &w) in grad.iter_mut().zip(weights) {
        *g += lambda * w;
    }
    grad
}

/// Trains the model by gradient descent from w = 0 with the constant step
/// 1/L, L = max‖xᵢ‖²/4 + λ. Descent is guaranteed at that step, so the loop
/// stops only on the gradient tolerance, the iteration cap, or once updates
/// fall below f64 resolution.
pub fn train(dataset: &Dataset, lambda: f64, tol: f64, max_iters: usize) -> Result<LogisticModel> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }
    let d = dataset.d();
    let max_row_sq = (0..dataset.n())
        .map(|i| dataset.row(i).iter().map(|x| x * x).sum::<f64>())
        .fold(0.0f64, f64::max);
    let step = 1.0 / (max_row_sq / 4.0 + lambda);
    let mut weights = vec![0.0; d];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let grad = gradient_at(&weights, lambda, dataset);
        let grad_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf <= tol {
            converged = true;
            break;
        }
        let mut moved = false;
        for (w, &g) in weights.iter_mut().zip(&grad) {
            let next = *w - step * g;
            if next != *w {
                moved = true;
            }
            *w = next;
        }
        iterations += 1;
        if !moved {
            break;
        }
    }
    let final_loss = loss_at(&weights, lambda, dataset);
    Ok(LogisticModel { weights, lambda, trained_iterations: iterations, final_loss, converged })
}

/// L1-sensitivity of the regularized logistic minimizer: 2d/(nλ).
pub fn weight_sensitivity(n: usize, d: usize, lambda: f64) -> f64 {
    2.0 * d as f64 / (n as f64 * lambda)
}

/// Copy of the dataset with a constant-1 covariate appended, for fits that
/// want an intercept. The extra dimension flows into `weight_sensitivity`
/// as 2(d+1)/(nλ) on its own.
pub fn append_intercept(dataset: &Dataset) -> Dataset {
    let d = dataset.d() + 1;
    let mut covariates = Vec::with_capacity(dataset.n() * d);
    for i in 0..dataset.n() {
        covariates.extend_from_slice(dataset.row(i));
        covariates.push(1.0);
    }
    Dataset::new(
        dataset.treatment().to_vec(),
        covariates,
        dataset.outcomes().to_vec(),
        d,
        dataset.outcome_range(),
    )
    .expect("augmenting a valid dataset preserves validity")
}

/// Sample-level weight perturbation: w' = w + Laplace(2d/(nλ) / ε11) per
/// coordinate, recorded as one sequential spend.
pub fn privatize_weights(
    model: &LogisticModel,
    n: usize,
    eps_11: f64,
    rng: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<LogisticModel> {
    let sensitivity = weight_sensitivity(n, model.weights.len(), model.lambda);
    let weights = dp::laplace_perturb_vector(&model.weights, sensitivity, eps_11, rng)?;
    if rng.is_disabled() {
        ledger.mark_tainted();
    }
    ledger.record(PHASE_WEIGHTS, eps_11, Composition::Sequential)?;
    Ok(LogisticModel { weights, ..model.clone() })
}

/// Scores every sample: eᵢ = σ(xᵢᵀw).
pub fn score(model: &LogisticModel, dataset: &Dataset) -> Result<PropensityScores> {
    check_dims(&model.weights, dataset)?;
    let scores =
        (0..dataset.n()).map(|i| sigmoid(dot(dataset.row(i), &model.weights))).collect();
    Ok(PropensityScores { scores, perturbed: false })
}

/// Sample-level score perturbation at unit sensitivity, clipped back to
/// [0, 1]. Each sample is a disjoint sub-dataset, so the per-sample spends
/// compose in parallel.
pub fn privatize_scores(
    scores: &PropensityScores,
    eps_12: f64,
    rng: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<PropensityScores> {
    if rng.is_disabled() {
        ledger.mark_tainted();
    }
    let mut out = Vec::with_capacity(scores.scores.len());
    for &s in &scores.scores {
        let noisy = dp::laplace_perturb(s, 1.0, eps_12, rng)?;
        out.push(noisy.clamp(0.0, 1.0));
        ledger.record(PHASE_SCORES, eps_12, Composition::Parallel)?;
    }
    Ok(PropensityScores { scores: out, perturbed: true })
}
