//! Phase 3: adaptive matching limits, capped counterfactual estimation,
//! outcome aggregation, and the final effect estimate.
//!
//! The matching limit k balances two error sources in the aggregated
//! potential outcome: Laplace noise at sensitivity (k+1)B grows with k,
//! while the bias from refusing matches shrinks with k. The closed form
//!
//!   k* = √(ε · coeff · n₁ · M₁ / 2)
//!
//! trades the two off using only quantities that are public (label level)
//! or already perturbed (sample level), so computing it is post-processing.
//! Each sample may then serve as a neighbor at most k·N times, which caps
//! any single record's influence on the aggregated sums at (k+1)B.

use serde::Serialize;

use crate::dataset::{Dataset, GroupCounts, PrivacyLevel};
use crate::dp::{self, BudgetLedger, BudgetSplit, Composition, NoiseSource};
use crate::error::{Error, Result};
use crate::matching::{SortedMatrices, TreatmentView};

pub const DEFAULT_NEIGHBORS: usize = 5;
pub const DEFAULT_ERROR_COEFF_LABEL: f64 = 0.01;
pub const DEFAULT_ERROR_COEFF_SAMPLE: f64 = 0.001;

pub(crate) const PHASE_LIMITS: &str = "phase3_limits";
pub(crate) const PHASE_SUMS: &str = "phase3_sums";
pub(crate) const PHASE_ATE: &str = "phase3_ate";

/// How the matching limit is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitMode {
    /// Closed-form limit from the privacy budget and match statistics.
    Adaptive,
    /// A fixed multiplier for both groups, bypassing the closed form.
    Fixed(u32),
}

impl LimitMode {
    pub fn label(&self) -> String {
        match self {
            LimitMode::Adaptive => "adaptive".to_string(),
            LimitMode::Fixed(k) => format!("fixed-{k}"),
        }
    }
}

impl std::str::FromStr for LimitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(LimitMode::Adaptive);
        }
        if let Some(k) = s.strip_prefix("fixed-").or_else(|| s.strip_prefix("fixed:")) {
            let k: u32 = k
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad fixed limit `{s}`")))?;
            if k == 0 {
                return Err(Error::InvalidConfig("fixed limit must be >= 1".into()));
            }
            return Ok(LimitMode::Fixed(k));
        }
        Err(Error::InvalidConfig(format!("unknown limit mode `{s}`")))
    }
}

/// Matching configuration for phase 3.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MatchConfig {
    /// Neighbors averaged per counterfactual (N).
    pub neighbors: usize,
    /// Error coefficient (c at label level, h at sample level).
    pub error_coeff: f64,
    pub limit_mode: LimitMode,
    /// Count the maximum appearance statistic within the capped group only,
    /// instead of jointly over both matrices.
    pub per_group_m: bool,
}

impl MatchConfig {
    pub fn defaults(level: PrivacyLevel) -> Self {
        MatchConfig {
            neighbors: DEFAULT_NEIGHBORS,
            error_coeff: match level {
                PrivacyLevel::LabelLevel => DEFAULT_ERROR_COEFF_LABEL,
                PrivacyLevel::SampleLevel => DEFAULT_ERROR_COEFF_SAMPLE,
            },
            limit_mode: LimitMode::Adaptive,
            per_group_m: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::InvalidConfig("neighbors must be >= 1".into()));
        }
        if !(self.error_coeff > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "error coefficient must be positive, got {}",
                self.error_coeff
            )));
        }
        if let LimitMode::Fixed(0) = self.limit_mode {
            return Err(Error::InvalidConfig("fixed limit must be >= 1".into()));
        }
        Ok(())
    }
}

/// The per-group matching limits plus the statistics that produced them.
///
/// For capped plans both multipliers are >= 1 and each cap equals the
/// multiplier times N. An uncapped plan (`cap_* == None`) exists only for
/// oracle-equivalence runs; its multipliers are meaningless and set to 0.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MatchPlan {
    /// k1: how many times a treated sample may serve as a neighbor, per N.
    pub k_treated: u32,
    /// k2: the control-group counterpart.
    pub k_control: u32,
    pub k_star: Option<f64>,
    pub k_f: u32,
    /// M: maximum appearance count in the first N sorted columns.
    pub m_max: u32,
    /// M1 = M / N.
    pub m1: f64,
    /// nt / nc under the treatment view in effect.
    pub r1: f64,
    /// max(nt, nc).
    pub n1: usize,
    pub cap_treated: Option<u64>,
    pub cap_control: Option<u64>,
}

/// How many times each sample appears within the first N columns of the
/// opposite group's rows; these are exactly the uncapped match counts.
pub fn appearance_counts(matrices: &SortedMatrices, neighbors: usize) -> Vec<u32> {
    let mut counts = vec![0u32; matrices.n()];
    for i in 0..matrices.n() {
        let row = matrices.row(i);
        for &c in &row[..neighbors.min(row.len())] {
            counts[c as usize] += 1;
        }
    }
    counts
}

/// (M, M1): the maximum appearance count over all samples and its per-column
/// average M/N.
pub fn count_max_matches(matrices: &SortedMatrices, neighbors: usize) -> (u32, f64) {
    let counts = appearance_counts(matrices, neighbors);
    let m = counts.iter().copied().max().unwrap_or(0);
    (m, m as f64 / neighbors as f64)
}

fn group_max(counts: &[u32], members: &[u32]) -> u32 {
    members.iter().map(|&j| counts[j as usize]).max().unwrap_or(0)
}

/// Label-level closed-form limit: k* = √(ε·c·n₁·M₁/2), rounded half away
/// from zero, clamped to [1, ⌈M₁⌉]. The upper clamp exists because a limit
/// beyond the true average maximum number of matches buys no accuracy.
pub fn matching_limit_label(eps: f64, c: f64, n1: usize, m1: f64) -> (f64, u32) {
    let k_star = (eps * c * n1 as f64 * m1 / 2.0).sqrt();
    let k_f = (k_star.round().max(1.0)).min(m1.ceil()) as u32;
    (k_star, k_f.max(1))
}

/// Sample-level limit: same closed form on perturbed statistics with the
/// phase-3 budget, without the M₁ clamp (M'₁ is itself noisy).
pub fn matching_limit_sample(eps_3: f64, h: f64, n1: usize, m1: f64) -> (f64, u32) {
    let k_star = (eps_3 * h * n1 as f64 * m1 / 2.0).sqrt();
    let k_f = k_star.round().max(1.0) as u32;
    (k_star, k_f)
}

/// Splits the single limit k_f across the two groups in proportion to the
/// group-size ratio, so the smaller group (matched more often per sample)
/// carries the larger multiplier.
pub fn pair_limits(k_f: u32, counts: &GroupCounts) -> Result<(u32, u32)> {
    if counts.n_treated == 0 || counts.n_control == 0 {
        return Err(Error::DegenerateGroups {
            n_treated: counts.n_treated,
            n_control: counts.n_control,
        });
    }
    let r1 = counts.ratio();
    if r1 <= 1.0 {
        let k1 = k_f;
        let k2 = ((k1 as f64 * r1).round()).max(1.0) as u32;
        Ok((k1, k2))
    } else {
        let k2 = k_f;
        let k1 = ((k2 as f64 / r1).round()).max(1.0) as u32;
        Ok((k1, k2))
    }
}

/// Builds the full plan for a run. `eps_limit` is the whole budget ε at
/// label level and ε₃ at sample level; post-processing either way.
pub fn build_plan(
    matrices: &SortedMatrices,
    treatment: &TreatmentView,
    config: &MatchConfig,
    level: PrivacyLevel,
    eps_limit: f64,
) -> Result<MatchPlan> {
    config.validate()?;
    let counts = &treatment.counts;
    if counts.n_treated == 0 || counts.n_control == 0 {
        return Err(Error::DegenerateGroups {
            n_treated: counts.n_treated,
            n_control: counts.n_control,
        });
    }
    let n = config.neighbors;
    let r1 = counts.ratio();
    let n1 = counts.larger();

    let all_counts = appearance_counts(matrices, n);
    let m_max = if config.per_group_m {
        // The closed form sizes the cap of the group matched more often,
        // i.e. the smaller group's samples acting as neighbors.
        if r1 <= 1.0 {
            group_max(&all_counts, matrices.treated())
        } else {
            group_max(&all_counts, matrices.control())
        }
    } else {
        all_counts.iter().copied().max().unwrap_or(0)
    };
    let m1 = m_max as f64 / n as f64;

    let (k_star, k_f) = match config.limit_mode {
        LimitMode::Fixed(k) => {
            let plan = MatchPlan {
                k_treated: k,
                k_control: k,
                k_star: None,
                k_f: k,
                m_max,
                m1,
                r1,
                n1,
                cap_treated: Some(k as u64 * n as u64),
                cap_control: Some(k as u64 * n as u64),
            };
            return Ok(plan);
        }
        LimitMode::Adaptive => match level {
            PrivacyLevel::LabelLevel => {
                matching_limit_label(eps_limit, config.error_coeff, n1, m1)
            }
            PrivacyLevel::SampleLevel => {
                matching_limit_sample(eps_limit, config.error_coeff, n1, m1)
            }
        },
    };
    let (k1, k2) = pair_limits(k_f, counts)?;
    Ok(MatchPlan {
        k_treated: k1,
        k_control: k2,
        k_star: Some(k_star),
        k_f,
        m_max,
        m1,
        r1,
        n1,
        cap_treated: Some(k1 as u64 * n as u64),
        cap_control: Some(k2 as u64 * n as u64),
    })
}

/// A cap-free plan for oracle-equivalence runs.
pub fn uncapped_plan(
    matrices: &SortedMatrices,
    treatment: &TreatmentView,
    neighbors: usize,
) -> MatchPlan {
    let counts = &treatment.counts;
    let (m_max, m1) = count_max_matches(matrices, neighbors);
    MatchPlan {
        k_treated: 0,
        k_control: 0,
        k_star: None,
        k_f: 0,
        m_max,
        m1,
        r1: counts.ratio(),
        n1: counts.larger(),
        cap_treated: None,
        cap_control: None,
    }
}

/// Counterfactual estimates for every sample under the plan's caps.
#[derive(Debug, Clone)]
pub struct CappedOutcomes {
    /// Potential treated outcome per sample: observed if treated, matched
    /// mean otherwise.
    pub y1: Vec<f64>,
    /// Potential control outcome per sample.
    pub y0: Vec<f64>,
    /// How many times each sample was used as a neighbor.
    pub match_counts: Vec<u32>,
    /// Rows that found zero uncapped candidates and fell back to ignoring
    /// the caps. Such a run no longer honors the sensitivity bound.
    pub fallback_rows: usize,
    /// Rows filled with fewer than N neighbors (caps exhausted part-way).
    pub partial_rows: usize,
}

/// Walks samples in ascending index order; for each, takes the nearest N
/// candidates whose match counter is below their group cap, increments the
/// chosen counters, and averages the chosen observed outcomes.
pub fn capped_counterfactuals(
    dataset: &Dataset,
    matrices: &SortedMatrices,
    treatment: &TreatmentView,
    plan: &MatchPlan,
    neighbors: usize,
) -> CappedOutcomes {
    let n = dataset.n();
    let outcomes = dataset.outcomes();
    let mut match_counts = vec![0u32; n];
    let mut y1 = vec![0.0; n];
    let mut y0 = vec![0.0; n];
    let mut fallback_rows = 0;
    let mut partial_rows = 0;
    let mut selected: Vec<u32> = Vec::with_capacity(neighbors);

    let cap_of = |candidate: u32| -> Option<u64> {
        if treatment.bits[candidate as usize] {
            plan.cap_treated
        } else {
            plan.cap_control
        }
    };

    for i in 0..n {
        let row = matrices.row(i);
        selected.clear();
        for &c in row {
            match cap_of(c) {
                Some(cap) if (match_counts[c as usize] as u64) >= cap => continue,
                _ => {}
            }
            selected.push(c);
            if selected.len() == neighbors {
                break;
            }
        }
        if selected.is_empty() {
            // Every candidate is capped out. Matching must still produce an
            // estimate, so take the nearest N regardless and flag the run.
            fallback_rows += 1;
            selected.extend_from_slice(&row[..neighbors.min(row.len())]);
        } else if selected.len() < neighbors {
            partial_rows += 1;
        }
        let mut sum = 0.0;
        for &c in &selected {
            match_counts[c as usize] += 1;
            sum += outcomes[c as usize];
        }
        let counterfactual = sum / selected.len() as f64;
        if treatment.bits[i] {
            y1[i] = outcomes[i];
            y0[i] = counterfactual;
        } else {
            y1[i] = counterfactual;
            y0[i] = outcomes[i];
        }
    }
    CappedOutcomes { y1, y0, match_counts, fallback_rows, partial_rows }
}

/// Aggregated potential-outcome sums before and after perturbation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AggregatedOutcomes {
    pub s1: f64,
    pub s0: f64,
    pub s1_hat: f64,
    pub s0_hat: f64,
    /// (k1 + 1)·B, absent for uncapped oracle runs.
    pub sens1: Option<f64>,
    /// (k2 + 1)·B.
    pub sens0: Option<f64>,
}

/// Sums the potential outcomes and perturbs each sum with Laplace noise at
/// sensitivity (k+1)B. The treated and control groups are disjoint, so both
/// sums share the single ε₃ spend (parallel composition), recorded as one
/// sequential ledger entry.
pub fn aggregate_and_perturb(
    y1: &[f64],
    y0: &[f64],
    outcome_range: f64,
    plan: &MatchPlan,
    eps_3: f64,
    rng: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<AggregatedOutcomes> {
    let s1: f64 = y1.iter().sum();
    let s0: f64 = y0.iter().sum();
    if rng.is_disabled() {
        ledger.mark_tainted();
    }
    let (s1_hat, s0_hat, sens1, sens0) = match (plan.cap_treated, plan.cap_control) {
        (Some(_), Some(_)) => {
            let sens1 = (plan.k_treated as f64 + 1.0) * outcome_range;
            let sens0 = (plan.k_control as f64 + 1.0) * outcome_range;
            let s1_hat = dp::laplace_perturb(s1, sens1, eps_3, rng)?;
            let s0_hat = dp::laplace_perturb(s0, sens0, eps_3, rng)?;
            (s1_hat, s0_hat, Some(sens1), Some(sens0))
        }
        _ => {
            // Without caps there is no finite sensitivity to calibrate to.
            if !rng.is_disabled() {
                return Err(Error::UncappedWithoutOracle);
            }
            if !(eps_3 > 0.0) {
                return Err(Error::NonPositiveBudget(eps_3));
            }
            (s1, s0, None, None)
        }
    };
    ledger.record(PHASE_SUMS, eps_3, Composition::Sequential)?;
    Ok(AggregatedOutcomes { s1, s0, s1_hat, s0_hat, sens1, sens0 })
}

/// τ̂ = (Ŝ₁ − Ŝ₀) / n. Post-processing of the perturbed sums.
pub fn ate_from_sums(agg: &AggregatedOutcomes, n: usize) -> f64 {
    (agg.s1_hat - agg.s0_hat) / n as f64
}

/// The final estimate with full provenance.
#[derive(Debug, Clone, Serialize)]
pub struct AteResult {
    pub tau_hat: f64,
    pub level: PrivacyLevel,
    pub budgets: BudgetSplit,
    pub plan: MatchPlan,
    pub neighbors: usize,
    pub seed: u64,
    pub tainted: bool,
    pub flags: Vec<String>,
}

impl AteResult {
    /// The run summary in its wire form:
    /// {tau_hat, eps, level, k1, k2, k_star, M, M1, seed, flags}.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            tau_hat: f64,
            eps: f64,
            level: &'a str,
            k1: Option<u32>,
            k2: Option<u32>,
            k_star: Option<f64>,
            #[serde(rename = "M")]
            m: u32,
            #[serde(rename = "M1")]
            m1: f64,
            seed: u64,
            flags: &'a [String],
        }
        let capped = self.plan.cap_treated.is_some();
        let summary = Summary {
            tau_hat: self.tau_hat,
            eps: self.budgets.eps_total,
            level: self.level.as_str(),
            k1: capped.then_some(self.plan.k_treated),
            k2: capped.then_some(self.plan.k_control),
            k_star: self.plan.k_star,
            m: self.plan.m_max,
            m1: self.plan.m1,
            seed: self.seed,
            flags: &self.flags,
        };
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    }
}

/// Replacement counts R per candidate group at caps (cap_t, cap_c):
/// Σ max(0, uⱼ − cap) over treated and over control candidates, where uⱼ
/// are the uncapped match counts. The treated-candidate count bounds the
/// matching bias of S₁, the control-candidate count that of S₀.
pub fn replacement_counts(
    matrices: &SortedMatrices,
    neighbors: usize,
    cap_treated: u64,
    cap_control: u64,
) -> (u64, u64) {
    let counts = appearance_counts(matrices, neighbors);
    let over = |members: &[u32], cap: u64| -> u64 {
        members.iter().map(|&j| (counts[j as usize] as u64).saturating_sub(cap)).sum()
    };
    (over(matrices.treated(), cap_treated), over(matrices.control(), cap_control))
}

/// Label-level diagnostic bound on the expected squared error of an
/// aggregated potential outcome: 2((k+1)B/ε)² + (R·B/N)², where R counts
/// how many uncapped matches exceed the cap k·N across all candidates.
/// Never feeds back into estimation.
pub fn error_bound_label(
    matrices: &SortedMatrices,
    neighbors: usize,
    k: u32,
    outcome_range: f64,
    eps: f64,
) -> Result<(f64, u64)> {
    if !(eps > 0.0) {
        return Err(Error::NonPositiveBudget(eps));
    }
    let cap = k as u64 * neighbors as u64;
    let (r_t, r_c) = replacement_counts(matrices, neighbors, cap, cap);
    let r = r_t + r_c;
    let noise = (k as f64 + 1.0) * outcome_range / eps;
    let bias = r as f64 * outcome_range / neighbors as f64;
    Ok((2.0 * noise * noise + bias * bias, r))
}
