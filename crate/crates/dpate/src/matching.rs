//! Phase 2: treatment perturbation and distance-sorted candidate matrices.
//!
//! Under sample-level privacy each treatment bit passes through randomized
//! response; everything after that (distance computation, sorting) is
//! post-processing of already-perturbed values and spends nothing.

use crate::dataset::{Dataset, GroupCounts, PrivacyLevel};
use crate::dp::{self, BudgetLedger, Composition, NoiseSource};
use crate::error::{Error, Result};
use crate::propensity::PropensityScores;

pub(crate) const PHASE_TREATMENT: &str = "phase2_treatment";
pub(crate) const PHASE_SORT: &str = "phase2_sort";

/// The treatment vector a run actually works with, which may be a perturbed
/// view of the original.
#[derive(Debug, Clone)]
pub struct TreatmentView {
    pub bits: Vec<bool>,
    pub perturbed: bool,
    pub counts: GroupCounts,
}

impl TreatmentView {
    fn from_bits(bits: Vec<bool>, perturbed: bool) -> Self {
        let counts = GroupCounts::from_bits(&bits, perturbed);
        TreatmentView { bits, perturbed, counts }
    }
}

/// Propensity distance |e_a − e_b|.
pub fn distance(e_a: f64, e_b: f64) -> f64 {
    (e_a - e_b).abs()
}

/// Label-level passes the treatment through untouched; sample-level applies
/// randomized response per bit, composing in parallel across samples.
pub fn perturb_treatment(
    dataset: &Dataset,
    level: PrivacyLevel,
    eps_2: f64,
    rng: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<TreatmentView> {
    match level {
        PrivacyLevel::LabelLevel => {
            Ok(TreatmentView::from_bits(dataset.treatment().to_vec(), false))
        }
        PrivacyLevel::SampleLevel => {
            if rng.is_disabled() {
                ledger.mark_tainted();
            }
            let mut bits = Vec::with_capacity(dataset.n());
            for &b in dataset.treatment() {
                bits.push(dp::randomized_response(b, eps_2, rng)?);
                ledger.record(PHASE_TREATMENT, eps_2, Composition::Parallel)?;
            }
            Ok(TreatmentView::from_bits(bits, true))
        }
    }
}

/// Per-sample candidate lists into the opposite treatment group, ascending
/// by propensity distance with ties broken by ascending sample index.
///
/// Row `i` covers sample `i` regardless of its group; the h0 / h1 views
/// expose the control-rows and treated-rows slices of the same data. Full
/// rows are materialized (quadratic in group sizes, flat arena storage)
/// because the capped matching in phase 3 may need to walk arbitrarily deep
/// once near candidates are exhausted.
#[derive(Debug, Clone)]
pub struct SortedMatrices {
    arena: Vec<u32>,
    offsets: Vec<usize>,
    treated: Vec<u32>,
    control: Vec<u32>,
}

impl SortedMatrices {
    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.arena[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn treated(&self) -> &[u32] {
        &self.treated
    }

    pub fn control(&self) -> &[u32] {
        &self.control
    }

    /// H0: one row per control sample, listing treated candidates.
    pub fn h0_rows(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.control.iter().map(move |&j| (j, self.row(j as usize)))
    }

    /// H1: one row per treated sample, listing control candidates.
    pub fn h1_rows(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.treated.iter().map(move |&j| (j, self.row(j as usize)))
    }
}

/// Builds H0 and H1 from scores and a treatment view. Pure post-processing:
/// no budget is spent here.
pub fn build_sorted_matrices(
    scores: &PropensityScores,
    treatment: &TreatmentView,
) -> Result<SortedMatrices> {
    let n = treatment.bits.len();
    if scores.scores.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: scores.scores.len() });
    }
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for (i, &b) in treatment.bits.iter().enumerate() {
        if b {
            treated.push(i as u32);
        } else {
            control.push(i as u32);
        }
    }
    if treated.is_empty() || control.is_empty() {
        return Err(Error::DegenerateGroups {
            n_treated: treated.len(),
            n_control: control.len(),
        });
    }

    // One (score, index) sort per group; every row is then a linear merge
    // of the two monotone halves around the sample's own score, which keeps
    // the whole construction at O(n log n + n·m) instead of per-row sorts.
    let by_score = |members: &[u32]| -> Vec<(f64, u32)> {
        let mut v: Vec<(f64, u32)> =
            members.iter().map(|&c| (scores.scores[c as usize], c)).collect();
        v.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v
    };
    let treated_sorted = by_score(&treated);
    let control_sorted = by_score(&control);

    let mut arena = Vec::with_capacity(2 * treated.len() * control.len());
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for i in 0..n {
        let candidates = if treatment.bits[i] { &control_sorted } else { &treated_sorted };
        merge_row(scores.scores[i], candidates, &mut arena);
        offsets.push(arena.len());
    }
    Ok(SortedMatrices { arena, offsets, treated, control })
}

/// Appends the candidates ascending by (|e − score|, index), walking outward
/// from e over a (score, index)-sorted slice. At an exact distance tie the
/// two equal-score runs (one per side) are sub-merged by index, which keeps
/// the output identical to a full lexicographic sort.
fn merge_row(e: f64, sorted: &[(f64, u32)], out: &mut Vec<u32>) {
    let m = sorted.len();
    let split = sorted.partition_point(|&(s, _)| s < e);
    // `left` is one past the next left candidate so that 0 means exhausted.
    // Left candidates sharing a score share a distance, so they are always
    // consumed as a whole run, emitted forward to keep indices ascending.
    let run_start = |left: usize| {
        let mut lo = left - 1;
        while lo > 0 && sorted[lo - 1].0 == sorted[left - 1].0 {
            lo -= 1;
        }
        lo
    };
    let mut left = split;
    let mut right = split;
    while left > 0 && right < m {
        let dl = e - sorted[left - 1].0;
        let dr = sorted[right].0 - e;
        if dl < dr {
            let lo = run_start(left);
            out.extend(sorted[lo..left].iter().map(|&(_, c)| c));
            left = lo;
        } else if dr < dl {
            out.push(sorted[right].1);
            right += 1;
        } else {
            // Equal distance across the sides: the left run holds score
            // e − d, the right run e + d; interleave the two runs by index.
            let lo = run_start(left);
            let mut hi = right;
            while hi + 1 < m && sorted[hi + 1].0 == sorted[right].0 {
                hi += 1;
            }
            let mut a = lo;
            let mut b = right;
            while a < left && b <= hi {
                if sorted[a].1 < sorted[b].1 {
                    out.push(sorted[a].1);
                    a += 1;
                } else {
                    out.push(sorted[b].1);
                    b += 1;
                }
            }
            out.extend(sorted[a..left].iter().map(|&(_, c)| c));
            out.extend(sorted[b..=hi].iter().map(|&(_, c)| c));
            left = lo;
            right = hi + 1;
        }
    }
    while left > 0 {
        let lo = run_start(left);
        out.extend(sorted[lo..left].iter().map(|&(_, c)| c));
        left = lo;
    }
    out.extend(sorted[right..].iter().map(|&(_, c)| c));
}

/// Marks the sort as post-processing on the ledger.
pub fn record_sort(ledger: &mut BudgetLedger) -> Result<()> {
    ledger.record(PHASE_SORT, 0.0, Composition::PostProcessing)
}
