//! End-to-end orchestration: budget splitting, the three phases in order,
//! and ledger finalization, for both privacy levels.

use serde::Serialize;

use crate::dataset::{Dataset, PrivacyLevel};
use crate::dp::{
    streams, BudgetLedger, BudgetSplit, Composition, LedgerEntry, NoiseSource,
};
use crate::error::{Error, Result};
use crate::estimation::{
    self, AteResult, MatchConfig, MatchPlan,
};
use crate::matching;
use crate::propensity;

pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.1, 0.7, 0.2);

/// Everything a single run needs.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub level: PrivacyLevel,
    pub eps_total: f64,
    /// Phase budget ratios (r1, r2, r3); phase 1's share is split evenly
    /// between the weight and score mechanisms. Sample level only.
    pub split_ratios: (f64, f64, f64),
    pub match_config: MatchConfig,
    pub lambda: f64,
    /// Fit the propensity model with a constant-1 covariate appended; the
    /// weight sensitivity becomes 2(d+1)/(nλ).
    pub intercept: bool,
    pub seed: u64,
    /// Disables noise and matching caps. The result is tainted and exists
    /// only to compare against the non-private oracle.
    pub oracle_mode: bool,
}

impl RunConfig {
    pub fn new(level: PrivacyLevel, eps_total: f64, seed: u64) -> Self {
        RunConfig {
            level,
            eps_total,
            split_ratios: DEFAULT_SPLIT_RATIOS,
            match_config: MatchConfig::defaults(level),
            lambda: propensity::DEFAULT_LAMBDA,
            intercept: false,
            seed,
            oracle_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.oracle_mode && !(self.eps_total > 0.0) {
            return Err(Error::NonPositiveBudget(self.eps_total));
        }
        let (r1, r2, r3) = self.split_ratios;
        if !(r1 > 0.0) || !(r2 > 0.0) || !(r3 > 0.0) || (r1 + r2 + r3 - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRatios(r1, r2, r3));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        self.match_config.validate()
    }

    /// ε when set; oracle-mode runs may omit it, in which case the ledger
    /// accounts against a stand-in budget of 1 (the draws are disabled).
    fn effective_eps(&self) -> f64 {
        if self.oracle_mode && !(self.eps_total > 0.0) {
            1.0
        } else {
            self.eps_total
        }
    }
}

/// The ε decomposition for a config: everything to phase 3 at label level,
/// the (r1/2, r1/2, r2, r3) split at sample level.
pub fn split_budget(config: &RunConfig) -> Result<BudgetSplit> {
    config.validate()?;
    let eps = config.effective_eps();
    match config.level {
        PrivacyLevel::LabelLevel => BudgetSplit::label_level(eps),
        PrivacyLevel::SampleLevel => {
            BudgetSplit::sample_level(eps, config.split_ratios.0, config.split_ratios.1)
        }
    }
}

/// A completed run with its spend log, for provenance serialization.
#[derive(Debug, Clone, Serialize)]
pub struct RunProvenance {
    pub config: RunConfig,
    pub ledger_entries: Vec<LedgerEntry>,
    pub ledger_total: f64,
    pub result: AteResult,
}

impl RunProvenance {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("provenance serializes")
    }
}

/// Runs the full pipeline. See `run_with_ledger` for the audit trail.
pub fn run(dataset: &Dataset, config: &RunConfig) -> Result<AteResult> {
    run_with_ledger(dataset, config).map(|(result, _)| result)
}

pub fn run_with_ledger(
    dataset: &Dataset,
    config: &RunConfig,
) -> Result<(AteResult, BudgetLedger)> {
    config.validate()?;
    let split = split_budget(config)?;
    let mut ledger = BudgetLedger::new(split.component_total());
    let noise = |stream: u64| {
        if config.oracle_mode {
            NoiseSource::disabled(config.seed, stream)
        } else {
            NoiseSource::new(config.seed, stream)
        }
    };

    // Phase 1: propensity model.
    let augmented;
    let model_data: &Dataset = if config.intercept {
        augmented = propensity::append_intercept(dataset);
        &augmented
    } else {
        dataset
    };
    let model = propensity::train(
        model_data,
        config.lambda,
        propensity::DEFAULT_TOLERANCE,
        propensity::DEFAULT_MAX_ITERS,
    )?;
    let scores = match config.level {
        PrivacyLevel::LabelLevel => propensity::score(&model, model_data)?,
        PrivacyLevel::SampleLevel => {
            let mut weight_rng = noise(streams::WEIGHT_NOISE);
            let private_model = propensity::privatize_weights(
                &model,
                model_data.n(),
                split.eps_11,
                &mut weight_rng,
                &mut ledger,
            )?;
            let raw = propensity::score(&private_model, model_data)?;
            let mut score_rng = noise(streams::SCORE_NOISE);
            propensity::privatize_scores(&raw, split.eps_12, &mut score_rng, &mut ledger)?
        }
    };

    // Phase 2: treatment view and sorted candidate matrices.
    let mut treatment_rng = noise(streams::TREATMENT_RR);
    let view = matching::perturb_treatment(
        dataset,
        config.level,
        split.eps_2,
        &mut treatment_rng,
        &mut ledger,
    )?;
    let matrices = matching::build_sorted_matrices(&scores, &view)?;
    matching::record_sort(&mut ledger)?;

    // Phase 3: matching limit, capped counterfactuals, perturbed sums.
    let neighbors = config.match_config.neighbors;
    let plan: MatchPlan = if config.oracle_mode {
        estimation::uncapped_plan(&matrices, &view, neighbors)
    } else {
        estimation::build_plan(&matrices, &view, &config.match_config, config.level, split.eps_3)?
    };
    ledger.record(estimation::PHASE_LIMITS, 0.0, Composition::PostProcessing)?;

    let capped = estimation::capped_counterfactuals(dataset, &matrices, &view, &plan, neighbors);
    let mut outcome_rng = noise(streams::OUTCOME_NOISE);
    let agg = estimation::aggregate_and_perturb(
        &capped.y1,
        &capped.y0,
        dataset.outcome_range(),
        &plan,
        split.eps_3,
        &mut outcome_rng,
        &mut ledger,
    )?;
    let tau_hat = estimation::ate_from_sums(&agg, dataset.n());
    ledger.record(estimation::PHASE_ATE, 0.0, Composition::PostProcessing)?;

    verify_ledger(&ledger, &split, config.level)?;

    let mut flags = Vec::new();
    if config.oracle_mode {
        flags.push("oracle_mode".to_string());
    }
    if ledger.is_tainted() {
        flags.push("tainted".to_string());
    }
    if capped.fallback_rows > 0 {
        flags.push("matching_fallback".to_string());
    }
    let result = AteResult {
        tau_hat,
        level: config.level,
        budgets: split,
        plan,
        neighbors,
        seed: config.seed,
        tainted: ledger.is_tainted(),
        flags,
    };
    Ok((result, ledger))
}

pub fn run_with_provenance(dataset: &Dataset, config: &RunConfig) -> Result<RunProvenance> {
    let (result, ledger) = run_with_ledger(dataset, config)?;
    Ok(RunProvenance {
        config: config.clone(),
        ledger_entries: ledger.entries().to_vec(),
        ledger_total: ledger.total(),
        result,
    })
}

/// Internal bug guard: the finished ledger must reproduce the split exactly.
fn verify_ledger(ledger: &BudgetLedger, split: &BudgetSplit, level: PrivacyLevel) -> Result<()> {
    let total = ledger.total();
    if total != split.component_total() {
        return Err(Error::LedgerViolation(format!(
            "ledger total {total} != split total {}",
            split.component_total()
        )));
    }
    let sequential = ledger.sequential_entries();
    let expected = match level {
        PrivacyLevel::LabelLevel => 1,
        PrivacyLevel::SampleLevel => 2,
    };
    if sequential != expected {
        return Err(Error::LedgerViolation(format!(
            "expected {expected} sequential entries, found {sequential}"
        )));
    }
    Ok(())
}

/// The non-private baseline the estimator is measured against: exact
/// training and scores, plain nearest-N matching with no caps and no noise.
///
/// Deliberately written as a naive quadratic scan independent of the sorted-
/// matrix machinery, so it can serve as an oracle for equivalence tests.
pub fn run_oracle_psm(dataset: &Dataset, neighbors: usize, lambda: f64) -> Result<f64> {
    if neighbors == 0 {
        return Err(Error::InvalidConfig("neighbors must be >= 1".into()));
    }
    let model = propensity::train(
        dataset,
        lambda,
        propensity::DEFAULT_TOLERANCE,
        propensity::DEFAULT_MAX_ITERS,
    )?;
    let scores = propensity::score(&model, dataset)?.scores;
    let n = dataset.n();
    let treatment = dataset.treatment();
    let counts = dataset.group_counts();
    if counts.n_treated == 0 || counts.n_control == 0 {
        return Err(Error::DegenerateGroups {
            n_treated: counts.n_treated,
            n_control: counts.n_control,
        });
    }

    let mut s1 = 0.0;
    let mut s0 = 0.0;
    let mut candidates: Vec<(f64, u32)> = Vec::new();
    for i in 0..n {
        candidates.clear();
        for j in 0..n {
            if treatment[j] != treatment[i] {
                candidates.push(((scores[i] - scores[j]).abs(), j as u32));
            }
        }
        candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let take = neighbors.min(candidates.len());
        let mut sum = 0.0;
        for &(_, j) in &candidates[..take] {
            sum += dataset.outcomes()[j as usize];
        }
        let counterfactual = sum / take as f64;
        if treatment[i] {
            s1 += dataset.outcomes()[i];
            s0 += counterfactual;
        } else {
            s1 += counterfactual;
            s0 += dataset.outcomes()[i];
        }
    }
    Ok((s1 - s0) / n as f64)
}
