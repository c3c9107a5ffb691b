//! Domain types shared by every phase: the observational dataset, the
//! privacy level selector, and treatment group counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which attributes are protected.
///
/// Under label-level privacy only the observed outcome is private;
/// covariates and treatment are public. Under sample-level privacy a whole
/// record is private, so every phase that touches the raw data must spend
/// budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyLevel {
    LabelLevel,
    SampleLevel,
}

impl PrivacyLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PrivacyLevel::LabelLevel => "label",
            PrivacyLevel::SampleLevel => "sample",
        }
    }
}

impl std::str::FromStr for PrivacyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" | "label-level" | "label_level" => Ok(PrivacyLevel::LabelLevel),
            "sample" | "sample-level" | "sample_level" => Ok(PrivacyLevel::SampleLevel),
            other => Err(Error::InvalidConfig(format!("unknown privacy level `{other}`"))),
        }
    }
}

/// Group sizes induced by a treatment vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupCounts {
    pub n_treated: usize,
    pub n_control: usize,
    /// True when the counts derive from a perturbed treatment vector.
    pub perturbed: bool,
}

impl GroupCounts {
    pub fn from_bits(bits: &[bool], perturbed: bool) -> Self {
        let n_treated = bits.iter().filter(|&&b| b).count();
        GroupCounts { n_treated, n_control: bits.len() - n_treated, perturbed }
    }

    pub fn total(&self) -> usize {
        self.n_treated + self.n_control
    }

    /// nt / nc.
    pub fn ratio(&self) -> f64 {
        self.n_treated as f64 / self.n_control as f64
    }

    /// max(nt, nc).
    pub fn larger(&self) -> usize {
        self.n_treated.max(self.n_control)
    }
}

/// A validated observational dataset.
///
/// Covariates are stored row-major with every entry in [0, 1]; scaling to
/// that box is the caller's responsibility because data-dependent scaling
/// bounds would leak under sample-level privacy. `outcome_range` is the
/// publicly known maximum variation range B of the outcome and is never
/// inferred from the data for the same reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    treatment: Vec<bool>,
    covariates: Vec<f64>,
    outcomes: Vec<f64>,
    outcome_range: f64,
    n: usize,
    d: usize,
}

impl Dataset {
    /// Builds a dataset from raw columns, enforcing the standing assumptions.
    pub fn new(
        treatment: Vec<bool>,
        covariates: Vec<f64>,
        outcomes: Vec<f64>,
        d: usize,
        outcome_range: f64,
    ) -> Result<Self> {
        let n = treatment.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if n < 2 {
            // A single record cannot populate both arms.
            let t = treatment.iter().filter(|&&b| b).count();
            return Err(Error::DegenerateGroups { n_treated: t, n_control: n - t });
        }
        if d == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        if outcomes.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: outcomes.len() });
        }
        if covariates.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, got: covariates.len() });
        }
        let ds = Dataset { treatment, covariates, outcomes, outcome_range, n, d };
        validate(ds, outcome_range)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn outcome_range(&self) -> f64 {
        self.outcome_range
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    /// Row `i` of the covariate matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    pub fn group_counts(&self) -> GroupCounts {
        GroupCounts::from_bits(&self.treatment, false)
    }
}

/// Checks every invariant and stamps the dataset with the public range hint.
///
/// Idempotent: `validate(validate(d, b), b)` returns the same dataset.
pub fn validate(dataset: Dataset, range_hint: f64) -> Result<Dataset> {
    let mut dataset = dataset;
    if dataset.n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(range_hint > 0.0) || !range_hint.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "outcome range must be a positive finite value, got {range_hint}"
        )));
    }
    for (i, row) in dataset.covariates.chunks(dataset.d).enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                return Err(Error::CovariateOutOfRange { row: i, col: j, value: x });
            }
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &y in &dataset.outcomes {
        if !y.is_finite() {
            return Err(Error::OutcomeRangeExceeded { span: f64::INFINITY, range: range_hint });
        }
        lo = lo.min(y);
        hi = hi.max(y);
    }
    let span = hi - lo;
    if span > range_hint {
        return Err(Error::OutcomeRangeExceeded { span, range: range_hint });
    }
    let counts = GroupCounts::from_bits(&dataset.treatment, false);
    if counts.n_treated == 0 || counts.n_control == 0 {
        return Err(Error::DegenerateGroups {
            n_treated: counts.n_treated,
            n_control: counts.n_control,
        });
    }
    dataset.outcome_range = range_hint;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(treatment: Vec<bool>, outcomes: Vec<f64>, b: f64) -> Result<Dataset> {
        let n = treatment.len();
        Dataset::new(treatment, vec![0.5; n * 2], outcomes, 2, b)
    }

    #[test]
    fn ihdp_shape_counts() {
        let mut treatment = vec![true; 139];
        treatment.extend(vec![false; 608]);
        let n = treatment.len();
        let ds = Dataset::new(treatment, vec![0.25; n * 25], vec![1.0; n], 25, 4.0).unwrap();
        let counts = ds.group_counts();
        assert_eq!(counts.n_treated, 139);
        assert_eq!(counts.n_control, 608);
        assert_eq!(counts.total(), 747);
        assert_eq!(ds.d(), 25);
    }

    #[test]
    fn all_treated_is_degenerate() {
        let err = small(vec![true, true, true], vec![0.0, 0.0, 0.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateGroups { n_treated: 3, n_control: 0 }));
    }

    #[test]
    fn outcome_span_checked_against_range() {
        let err = small(vec![true, false], vec![0.0, 5.0], 4.0).unwrap_err();
        match err {
            Error::OutcomeRangeExceeded { span, range } => {
                assert_eq!(span, 5.0);
                assert_eq!(range, 4.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn covariate_bounds_enforced() {
        let err = Dataset::new(vec![true, false], vec![0.2, 1.5], vec![0.0, 0.0], 1, 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::CovariateOutOfRange { row: 1, col: 0, .. }));
    }

    #[test]
    fn empty_dataset_rejected() {
        let err = Dataset::new(vec![], vec![], vec![], 1, 1.0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn counts_partition_the_dataset() {
        let ds = small(vec![true, false, true, false, false], vec![0.0; 5], 1.0).unwrap();
        let counts = ds.group_counts();
        assert_eq!(counts.n_treated + counts.n_control, ds.n());
    }

    #[test]
    fn validate_is_idempotent() {
        let ds = small(vec![true, false, true], vec![0.1, 0.4, 0.2], 1.0).unwrap();
        let once = validate(ds.clone(), 1.0).unwrap();
        let twice = validate(once.clone(), 1.0).unwrap();
        assert_eq!(once, twice);
    }
}
