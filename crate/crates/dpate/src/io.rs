//! CSV ingestion with schema mapping, CSV emission, and the synthetic
//! benchmark generator with a known true effect.

use std::path::Path;

use serde::Serialize;

use crate::dataset::Dataset;
use crate::dp::{streams, NoiseSource};
use crate::error::{Error, Result};
use crate::propensity::sigmoid;

/// Column mapping for an input CSV. An empty covariate list means "every
/// column that is not the treatment or outcome", in header order.
#[derive(Debug, Clone, Serialize)]
pub struct CsvSchema {
    pub treatment_col: String,
    pub outcome_col: String,
    pub covariate_cols: Vec<String>,
}

impl CsvSchema {
    /// Parses `treatment,outcome[,cov1,cov2,...]`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut parts = spec.split(',').map(str::trim);
        let treatment_col = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::SchemaError("schema needs a treatment column".into()))?
            .to_string();
        let outcome_col = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::SchemaError("schema needs an outcome column".into()))?
            .to_string();
        let covariate_cols = parts.filter(|s| !s.is_empty()).map(str::to_string).collect();
        Ok(CsvSchema { treatment_col, outcome_col, covariate_cols })
    }
}

/// Loads a comma-separated, header-first, UTF-8 file into a validated
/// dataset. Treatment must parse to 0/1 and covariates must already be
/// scaled to [0, 1]; `outcome_range` is the public B.
pub fn load_csv(path: &Path, schema: &CsvSchema, outcome_range: f64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaError(format!("column `{name}` not found in header")))
    };
    let t_idx = find(&schema.treatment_col)?;
    let y_idx = find(&schema.outcome_col)?;
    let x_idx: Vec<usize> = if schema.covariate_cols.is_empty() {
        (0..headers.len()).filter(|&i| i != t_idx && i != y_idx).collect()
    } else {
        schema
            .covariate_cols
            .iter()
            .map(|c| find(c))
            .collect::<Result<Vec<usize>>>()?
    };
    if x_idx.is_empty() {
        return Err(Error::SchemaError("no covariate columns".into()));
    }

    let mut treatment = Vec::new();
    let mut outcomes = Vec::new();
    let mut covariates = Vec::new();
    for (row_number, record) in reader.records().enumerate() {
        let row = row_number + 1;
        let record = record?;
        let field = |idx: usize, col: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::ParseError {
                row,
                col: col.to_string(),
                message: "missing field".into(),
            })
        };
        let t_raw = field(t_idx, &schema.treatment_col)?;
        treatment.push(match t_raw.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::ParseError {
                    row,
                    col: schema.treatment_col.clone(),
                    message: format!("treatment must be 0 or 1, got `{other}`"),
                })
            }
        });
        let y_raw = field(y_idx, &schema.outcome_col)?;
        outcomes.push(y_raw.trim().parse::<f64>().map_err(|e| Error::ParseError {
            row,
            col: schema.outcome_col.clone(),
            message: e.to_string(),
        })?);
        for &idx in &x_idx {
            let name = &headers[idx];
            let raw = field(idx, name)?;
            covariates.push(raw.trim().parse::<f64>().map_err(|e| Error::ParseError {
                row,
                col: name.to_string(),
                message: e.to_string(),
            })?);
        }
    }
    Dataset::new(treatment, covariates, outcomes, x_idx.len(), outcome_range)
}

/// Writes a dataset in the same dialect `load_csv` reads, with header
/// `t,y,x1,...,xd`.
pub fn write_dataset_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "y".to_string()];
    header.extend((1..=dataset.d()).map(|j| format!("x{j}")));
    writer.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut record = Vec::with_capacity(2 + dataset.d());
        record.push(if dataset.treatment()[i] { "1".to_string() } else { "0".to_string() });
        record.push(dataset.outcomes()[i].to_string());
        record.extend(dataset.row(i).iter().map(|x| x.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Generator parameters. Unset `bias_scale` / `coeffs` are drawn from
/// U(0, 3) and U(0, 0.1)^d respectively, deterministically per seed. The
/// coefficient scale keeps the covariate signal small enough that matching
/// recovers τ to within a few percent at the default n.
#[derive(Debug, Clone, Serialize)]
pub struct SynthParams {
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub bias_scale: Option<f64>,
    pub coeffs: Option<Vec<f64>>,
    /// Per-sample outcome noise is U(−noise_width, noise_width).
    pub noise_width: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n: 1000,
            d: 20,
            tau: 0.5,
            bias_scale: None,
            coeffs: None,
            noise_width: 0.1,
            seed: 0,
        }
    }
}

/// Generates an observational dataset with a known additive effect:
/// covariates uniform on the unit box, treatment assigned with propensity
/// σ(a · (2·mean(Xᵢ) − 1)), outcome Yᵢ = b·Xᵢ + τ·Tᵢ + qᵢ. The dataset's
/// outcome range is set to the realized span of Y. Returns the dataset and
/// the true τ.
pub fn generate_synth(params: &SynthParams) -> Result<(Dataset, f64)> {
    if params.n < 2 {
        return Err(Error::InvalidConfig("synth needs n >= 2".into()));
    }
    if params.d == 0 {
        return Err(Error::InvalidConfig("synth needs d >= 1".into()));
    }
    let mut param_rng = NoiseSource::new(params.seed, streams::SYNTH_PARAMS);
    let bias_scale = params.bias_scale.unwrap_or_else(|| 3.0 * param_rng.uniform());
    let coeffs: Vec<f64> = match &params.coeffs {
        Some(b) => {
            if b.len() != params.d {
                return Err(Error::DimensionMismatch { expected: params.d, got: b.len() });
            }
            b.clone()
        }
        None => (0..params.d).map(|_| 0.1 * param_rng.uniform()).collect(),
    };

    let mut cov_rng = NoiseSource::new(params.seed, streams::SYNTH_COVARIATES);
    let covariates: Vec<f64> = (0..params.n * params.d).map(|_| cov_rng.uniform()).collect();

    let mut assign_rng = NoiseSource::new(params.seed, streams::SYNTH_ASSIGN);
    let treatment: Vec<bool> = (0..params.n)
        .map(|i| {
            let row = &covariates[i * params.d..(i + 1) * params.d];
            let mean = row.iter().sum::<f64>() / params.d as f64;
            let propensity = sigmoid(bias_scale * (2.0 * mean - 1.0));
            assign_rng.uniform() < propensity
        })
        .collect();

    let mut noise_rng = NoiseSource::new(params.seed, streams::SYNTH_OUTCOME_NOISE);
    let outcomes: Vec<f64> = (0..params.n)
        .map(|i| {
            let row = &covariates[i * params.d..(i + 1) * params.d];
            let signal: f64 = row.iter().zip(&coeffs).map(|(x, b)| x * b).sum();
            let q = params.noise_width * (2.0 * noise_rng.uniform() - 1.0);
            signal + params.tau * (treatment[i] as u8 as f64) + q
        })
        .collect();

    let lo = outcomes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = outcomes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let range = if span > 0.0 { span } else { 1.0 };
    let dataset = Dataset::new(treatment, covariates, outcomes, params.d, range)?;
    Ok((dataset, params.tau))
}

/// Sidecar metadata written next to a generated CSV.
#[derive(Debug, Serialize)]
pub struct SynthSidecar<'a> {
    pub true_tau: f64,
    pub params: &'a SynthParams,
    pub seed: u64,
    #[serde(rename = "B")]
    pub outcome_range: f64,
}

impl<'a> SynthSidecar<'a> {
    pub fn new(params: &'a SynthParams, true_tau: f64, outcome_range: f64) -> Self {
        SynthSidecar { true_tau, params, seed: params.seed, outcome_range }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sidecar serializes")
    }
}
