//! Pure-DP mechanisms and budget accounting.
//!
//! Everything here is (ε, 0)-DP: the Laplace mechanism for reals, randomized
//! response for bits, and a ledger that tracks spend under sequential,
//! parallel, and post-processing composition. Noise is drawn from explicitly
//! seeded, stream-separated generators so that runs are reproducible and
//! adding draws in one phase never shifts draws in another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Stream ids, one per (phase, purpose). Keep these stable: regression tests
/// freeze outputs per (seed, stream).
pub mod streams {
    pub const WEIGHT_NOISE: u64 = 1;
    pub const SCORE_NOISE: u64 = 2;
    pub const TREATMENT_RR: u64 = 3;
    pub const OUTCOME_NOISE: u64 = 4;
    pub const SYNTH_PARAMS: u64 = 16;
    pub const SYNTH_COVARIATES: u64 = 17;
    pub const SYNTH_ASSIGN: u64 = 18;
    pub const SYNTH_OUTCOME_NOISE: u64 = 19;
}

/// A seeded noise stream. Identical (seed, stream) pairs yield identical
/// draw sequences.
///
/// A disabled source returns inputs unchanged from every mechanism; it exists
/// for oracle-equivalence testing only, and any ledger that observes one is
/// marked tainted so the run cannot masquerade as private.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha20Rng,
    seed: u64,
    stream: u64,
    disabled: bool,
}

impl NoiseSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseSource { rng, seed, stream, disabled: false }
    }

    /// A source whose mechanisms are identity maps. Testing only.
    pub fn disabled(seed: u64, stream: u64) -> Self {
        let mut src = Self::new(seed, stream);
        src.disabled = true;
        src
    }

    pub fn is_disabled(&self) -> bool {
        self.disabled
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

/// Laplace noise scale GS/ε for the given sensitivity and budget.
pub fn laplace_scale(sensitivity: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::NonPositiveBudget(eps));
    }
    if !(sensitivity > 0.0) {
        return Err(Error::NonPositiveSensitivity(sensitivity));
    }
    Ok(sensitivity / eps)
}

/// One Laplace draw with scale β, via inverse CDF from a single uniform.
///
/// u ∈ (−1/2, 1/2), L = −β · sign(u) · ln(1 − 2|u|). One uniform per sample
/// keeps the draw sequence platform-stable.
fn laplace_draw(rng: &mut NoiseSource, scale: f64) -> f64 {
    let mut v = rng.uniform();
    if v == 0.0 {
        // ln(0) guard; probability ~2^-53.
        v = f64::MIN_POSITIVE;
    }
    let u = v - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds Laplace(sensitivity/eps) noise to a scalar.
pub fn laplace_perturb(
    value: f64,
    sensitivity: f64,
    eps: f64,
    rng: &mut NoiseSource,
) -> Result<f64> {
    let scale = laplace_scale(sensitivity, eps)?;
    if rng.is_disabled() {
        return Ok(value);
    }
    Ok(value + laplace_draw(rng, scale))
}

/// Element-wise Laplace perturbation with independent draws and one shared
/// scale: the global sensitivity of all elements is the same value.
pub fn laplace_perturb_vector(
    values: &[f64],
    sensitivity: f64,
    eps: f64,
    rng: &mut NoiseSource,
) -> Result<Vec<f64>> {
    let scale = laplace_scale(sensitivity, eps)?;
    if rng.is_disabled() {
        return Ok(values.to_vec());
    }
    Ok(values.iter().map(|&v| v + laplace_draw(rng, scale)).collect())
}

/// Probability of reporting the true bit at budget ε: e^ε / (e^ε + 1).
pub fn rr_keep_probability(eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::NonPositiveBudget(eps));
    }
    let e = eps.exp();
    Ok(e / (e + 1.0))
}

/// Randomized response on one bit.
pub fn randomized_response(bit: bool, eps: f64, rng: &mut NoiseSource) -> Result<bool> {
    let p = rr_keep_probability(eps)?;
    if rng.is_disabled() {
        return Ok(bit);
    }
    Ok(if rng.uniform() < p { bit } else { !bit })
}

/// How an entry composes with the rest of the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Sequential,
    Parallel,
    PostProcessing,
}

impl Composition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Composition::Sequential => "sequential",
            Composition::Parallel => "parallel",
            Composition::PostProcessing => "post-processing",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerEntry {
    pub phase: String,
    pub kind: Composition,
    pub eps: f64,
}

/// The ε decomposition across phases.
///
/// Label-level runs spend the whole budget in phase 3; sample-level runs
/// split it as ε = ε11 + ε12 + ε2 + ε3. The last component is computed as a
/// remainder so the four parts sum to the requested total exactly in f64.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetSplit {
    pub eps_total: f64,
    pub eps_11: f64,
    pub eps_12: f64,
    pub eps_2: f64,
    pub eps_3: f64,
}

impl BudgetSplit {
    pub fn label_level(eps_total: f64) -> Result<Self> {
        if !(eps_total > 0.0) {
            return Err(Error::NonPositiveBudget(eps_total));
        }
        Ok(BudgetSplit { eps_total, eps_11: 0.0, eps_12: 0.0, eps_2: 0.0, eps_3: eps_total })
    }

    /// Sample-level split with phase ratios (r1, r2, 1 − r1 − r2); the phase-1
    /// share is divided evenly between the weight and score mechanisms.
    pub fn sample_level(eps_total: f64, r1: f64, r2: f64) -> Result<Self> {
        if !(eps_total > 0.0) {
            return Err(Error::NonPositiveBudget(eps_total));
        }
        let r3 = 1.0 - r1 - r2;
        if !(r1 > 0.0) || !(r2 > 0.0) || !(r3 > 0.0) {
            return Err(Error::InvalidRatios(r1, r2, r3));
        }
        let eps_11 = 0.5 * r1 * eps_total;
        let eps_12 = eps_11;
        let eps_2 = r2 * eps_total;
        let eps_3 = eps_total - ((eps_11 + eps_12) + eps_2);
        if !(eps_3 > 0.0) {
            return Err(Error::InvalidRatios(r1, r2, r3));
        }
        Ok(BudgetSplit { eps_total, eps_11, eps_12, eps_2, eps_3 })
    }

    /// Sum of the components in recording order. Matches what a completed
    /// run's ledger reports, bit for bit.
    pub fn component_total(&self) -> f64 {
        ((self.eps_11 + self.eps_12) + self.eps_2) + self.eps_3
    }
}

/// Append-only spend log enforcing the composition rules.
///
/// Sequential entries add up; parallel entries within one phase contribute
/// their maximum (disjoint subsets of the dataset); post-processing entries
/// must carry zero spend.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    eps_total: f64,
    entries: Vec<LedgerEntry>,
    tainted: bool,
    // Running state so that recording stays O(#phases) per call even when a
    // phase contributes one parallel entry per sample.
    running_total: f64,
    parallel_max: Vec<(String, f64)>,
}

impl BudgetLedger {
    pub fn new(eps_total: f64) -> Self {
        BudgetLedger {
            eps_total,
            entries: Vec::new(),
            tainted: false,
            running_total: 0.0,
            parallel_max: Vec::new(),
        }
    }

    pub fn eps_total(&self) -> f64 {
        self.eps_total
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Marks the ledger as produced with noise disabled; the run's output is
    /// no longer a private release.
    pub fn mark_tainted(&mut self) {
        self.tainted = true;
    }

    pub fn is_tainted(&self) -> bool {
        self.tainted
    }

    pub fn record(&mut self, phase: &str, eps: f64, kind: Composition) -> Result<()> {
        let marginal = match kind {
            Composition::PostProcessing => {
                if eps != 0.0 {
                    return Err(Error::LedgerViolation(format!(
                        "post-processing entry `{phase}` must record 0, got {eps}"
                    )));
                }
                0.0
            }
            Composition::Sequential => {
                if !(eps > 0.0) {
                    return Err(Error::NonPositiveBudget(eps));
                }
                eps
            }
            Composition::Parallel => {
                if !(eps > 0.0) {
                    return Err(Error::NonPositiveBudget(eps));
                }
                let current = self
                    .parallel_max
                    .iter()
                    .find(|(p, _)| p == phase)
                    .map(|&(_, max)| max)
                    .unwrap_or(0.0);
                (eps - current).max(0.0)
            }
        };
        if marginal > 0.0 && self.running_total + marginal > self.eps_total {
            return Err(Error::BudgetExceeded {
                requested: eps,
                spent: self.running_total,
                total: self.eps_total,
            });
        }
        self.running_total += marginal;
        if kind == Composition::Parallel {
            match self.parallel_max.iter_mut().find(|(p, _)| p == phase) {
                Some((_, max)) => *max = max.max(eps),
                None => self.parallel_max.push((phase.to_string(), eps)),
            }
        }
        self.entries.push(LedgerEntry { phase: phase.to_string(), kind, eps });
        Ok(())
    }

    /// Total spend: sequential sum plus the per-phase parallel maxima,
    /// accumulated in recording order.
    pub fn total(&self) -> f64 {
        self.running_total
    }

    pub fn sequential_entries(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == Composition::Sequential).count()
    }

    /// Plain-text audit log, one `phase,kind,eps` line per entry.
    pub fn audit_log(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.phase, e.kind.as_str(), e.eps));
        }
        out
    }
}
