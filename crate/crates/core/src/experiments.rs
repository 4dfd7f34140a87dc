//! Simulation harness: scenario definitions, parallel trial execution,
//! metric aggregation, report emission, and the wire formats (record
//! streams and sampler files) used by the command-line front end.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    gen_autocorrelated, gen_dataset, misspecified_sampler, Regime, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::martingale::{config_hash, run_sequential};
use crate::offline::{crt_pvalue, FixedEtaLassoTrainer};
use crate::rng::RngStream;
use crate::sampler::{
    BernoulliLogisticSampler, DummySampler, FittedGaussianSampler, GaussianLinearSampler,
};
use crate::types::{validate_observation, Decision, Observation, RawRecord, TestConfig};

// ---------------------------------------------------------------------------
// Wire formats

/// Parse a newline-delimited JSON stream of records into observations.
/// Blank lines are skipped; parse and validation failures carry the
/// 1-based line number.
pub fn ndjson_observations<R: BufRead>(
    reader: R,
    d: usize,
) -> impl Iterator<Item = Result<Observation>> {
    reader
        .lines()
        .enumerate()
        .filter(|(_, line)| !matches!(line, Ok(l) if l.trim().is_empty()))
        .map(move |(i, line)| {
            let line = line?;
            let raw: RawRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            validate_observation(&raw, d)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })
        })
}

/// Serialize observations as newline-delimited JSON records.
pub fn write_ndjson<W: Write>(out: &mut W, obs: &[Observation]) -> Result<()> {
    for o in obs {
        let raw = RawRecord { x: o.x, y: Some(o.y), z: o.z.clone() };
        serde_json::to_writer(&mut *out, &raw)
            .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub const SAMPLER_FILE_VERSION: u32 = 1;

/// A persisted conditional sampler, tagged by family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SamplerSpec {
    GaussianLinear(GaussianLinearSampler),
    FittedGaussian(FittedGaussianSampler),
    BernoulliLogistic(BernoulliLogisticSampler),
}

impl SamplerSpec {
    pub fn as_dyn(&self) -> &dyn DummySampler {
        match self {
            SamplerSpec::GaussianLinear(s) => s,
            SamplerSpec::FittedGaussian(s) => s,
            SamplerSpec::BernoulliLogistic(s) => s,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SamplerFile {
    version: u32,
    sampler: SamplerSpec,
}

pub fn save_sampler(path: &Path, spec: &SamplerSpec) -> Result<()> {
    let file = SamplerFile { version: SAMPLER_FILE_VERSION, sampler: spec.clone() };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_sampler(path: &Path) -> Result<SamplerSpec> {
    let bytes = std::fs::read(path)?;
    let file: SamplerFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if file.version != SAMPLER_FILE_VERSION {
        return Err(Error::CheckpointVersion { expected: SAMPLER_FILE_VERSION, got: file.version });
    }
    Ok(file.sampler)
}

// ---------------------------------------------------------------------------
// Scenarios

/// What an experiment varies. Sweeps run one metrics row per grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum Scenario {
    /// Null data at the default design; reports the false-rejection rate.
    Type1,
    /// Alternative data at the default design; reports power and stopping
    /// times.
    Power,
    /// Alternative data; the per-trial stop times are the object of
    /// interest and are returned alongside the summary row.
    StoppingHist,
    /// Power as a function of the number of dummy draws per score.
    AblateK { ks: Vec<usize> },
    /// Power as a function of the batch-size ensemble.
    AblateBatches { variants: Vec<Vec<usize>> },
    /// Power as a function of the covariate dimension.
    DimSweep { dims: Vec<usize> },
    /// Type-1 error and power under an autocorrelated design.
    RhoSweep { rhos: Vec<f64>, regime: Regime },
    /// Type-1 error when the sampler's conditional scale is wrong.
    MisspecSweep { sigma_tildes: Vec<f64> },
    /// Negative control: repeatedly applying a fixed-level offline test to
    /// a growing sample and stopping at the first rejection. Reports the
    /// inflated false-rejection rate of that invalid protocol.
    PeekingHazard { looks: Vec<usize>, num_dummies: usize },
}

/// A full experiment: scenario, trial count, stream length after warm-up,
/// and the tester and data-generator settings shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub scenario: Scenario,
    pub trials: usize,
    /// Observations available after warm-up; trials that never reject are
    /// censored here.
    pub horizon: usize,
    pub test: TestConfig,
    pub data: SyntheticConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.test.validate()?;
        self.data.validate()?;
        if self.trials == 0 {
            return Err(Error::Domain("trials must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Domain("horizon must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Round to a fixed number of significant digits so that CSV text and
/// in-memory values agree exactly.
pub fn round_sig(v: f64, digits: u32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.*e}", digits as usize - 1).parse().unwrap()
}

const REPORT_SIG_DIGITS: u32 = 6;

/// One aggregated row of an experiment report. Stop-time quantiles are
/// censored at the horizon: trials that never rejected contribute the
/// horizon itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    /// Which grid value this row belongs to (empty for single-row
    /// scenarios).
    pub variant: String,
    pub trials: usize,
    pub rejection_rate: f64,
    pub mean_stop_time: f64,
    pub median_stop_time: f64,
    pub q90_stop_time: f64,
    pub mean_final_wealth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
}

/// Per-trial raw results, kept for histogram-style scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub rejected: bool,
    pub stop_time: usize,
    pub final_wealth: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn summarize(scenario: &str, variant: &str, horizon: usize, records: &[TrialRecord]) -> MetricsRow {
    let n = records.len();
    let rej = records.iter().filter(|r| r.rejected).count() as f64 / n as f64;
    let mut stops: Vec<f64> = records
        .iter()
        .map(|r| if r.rejected { r.stop_time as f64 } else { horizon as f64 })
        .collect();
    stops.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_stop = stops.iter().sum::<f64>() / n as f64;
    let mean_wealth = records.iter().map(|r| r.final_wealth).sum::<f64>() / n as f64;
    MetricsRow {
        scenario: scenario.to_string(),
        variant: variant.to_string(),
        trials: n,
        rejection_rate: round_sig(rej, REPORT_SIG_DIGITS),
        mean_stop_time: round_sig(mean_stop, REPORT_SIG_DIGITS),
        median_stop_time: round_sig(quantile(&stops, 0.5), REPORT_SIG_DIGITS),
        q90_stop_time: round_sig(quantile(&stops, 0.9), REPORT_SIG_DIGITS),
        mean_final_wealth: round_sig(mean_wealth, REPORT_SIG_DIGITS),
    }
}

// ---------------------------------------------------------------------------
// Trial execution

/// How a single trial builds its data and sampler.
#[derive(Clone, Copy)]
enum Design {
    Independent,
    Autocorrelated { rho: f64 },
    Misspecified { sigma_tilde: f64 },
}

fn run_one_trial(
    test: &TestConfig,
    data: &SyntheticConfig,
    design: Design,
    horizon: usize,
    trial: usize,
) -> Result<TrialRecord> {
    // Each trial owns a stream keyed only by its index, so results do not
    // depend on scheduling or the degree of parallelism.
    let mut rng = RngStream::new(test.seed, trial as u64 + 1);
    let gen_cfg = SyntheticConfig { n: test.n_init + horizon, ..data.clone() };
    let (obs, exact) = match design {
        Design::Autocorrelated { rho } => gen_autocorrelated(&gen_cfg, rho, &mut rng)?,
        _ => gen_dataset(&gen_cfg, &mut rng)?,
    };
    let sampler = match design {
        Design::Misspecified { sigma_tilde } => misspecified_sampler(&exact, sigma_tilde)?,
        _ => exact,
    };
    // The tester seeds its own stream; offset by the trial index so trials
    // bet on independent dummy draws.
    let test = TestConfig { seed: test.seed.wrapping_add(trial as u64), ..test.clone() };
    let outcome = run_sequential(obs.into_iter().map(Ok), &test, &sampler)?;
    Ok(TrialRecord {
        trial,
        rejected: outcome.decision == Decision::Rejected,
        stop_time: outcome.stop_time,
        final_wealth: outcome.final_wealth,
    })
}

fn run_trials(
    test: &TestConfig,
    data: &SyntheticConfig,
    design: Design,
    horizon: usize,
    trials: usize,
) -> Result<Vec<TrialRecord>> {
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            run_one_trial(test, data, design, horizon, trial)
                .map_err(|e| Error::Trial { trial, source: Box::new(e) })
        })
        .collect()
}

/// One trial of the invalid "peek at a fixed-level test" protocol: recompute
/// an offline p-value at each look over a growing null sample and stop at
/// the first nominal rejection.
fn peeking_trial(
    test: &TestConfig,
    data: &SyntheticConfig,
    looks: &[usize],
    num_dummies: usize,
    trial: usize,
) -> Result<TrialRecord> {
    let mut rng = RngStream::new(test.seed, trial as u64 + 1);
    let n_max = *looks.iter().max().ok_or(Error::EmptyBatch)?;
    let gen_cfg = SyntheticConfig { n: n_max, regime: Regime::Null, ..data.clone() };
    let (obs, sampler) = gen_dataset(&gen_cfg, &mut rng)?;
    let trainer = FixedEtaLassoTrainer { eta: 0.1 };
    for (i, &n) in looks.iter().enumerate() {
        let res = crt_pvalue(&obs[..n], &sampler, &trainer, num_dummies, &mut rng.child(i as u64))?;
        if res.p_value <= test.alpha {
            return Ok(TrialRecord { trial, rejected: true, stop_time: n, final_wealth: f64::NAN });
        }
    }
    Ok(TrialRecord { trial, rejected: false, stop_time: n_max, final_wealth: f64::NAN })
}

/// Per-trial records of every variant, keyed by variant label.
pub type RawTrials = Vec<(String, Vec<TrialRecord>)>;

/// Run every variant of an experiment. Returns the aggregated table and
/// the raw per-trial records (keyed by variant label) for downstream
/// histogramming.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(MetricsTable, RawTrials)> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut raw = Vec::new();
    let horizon = spec.horizon;

    let push = |name: &str,
                    variant: String,
                    records: Vec<TrialRecord>,
                    rows: &mut Vec<MetricsRow>,
                    raw: &mut Vec<(String, Vec<TrialRecord>)>| {
        rows.push(summarize(name, &variant, horizon, &records));
        raw.push((variant, records));
    };

    match &spec.scenario {
        Scenario::Type1 => {
            let data = SyntheticConfig { regime: Regime::Null, ..spec.data.clone() };
            let rec = run_trials(&spec.test, &data, Design::Independent, horizon, spec.trials)?;
            push("type1", String::new(), rec, &mut rows, &mut raw);
        }
        Scenario::Power | Scenario::StoppingHist => {
            let name = if matches!(spec.scenario, Scenario::Power) { "power" } else { "stopping_hist" };
            let data = SyntheticConfig { regime: Regime::Alternative, ..spec.data.clone() };
            let rec = run_trials(&spec.test, &data, Design::Independent, horizon, spec.trials)?;
            push(name, String::new(), rec, &mut rows, &mut raw);
        }
        Scenario::AblateK { ks } => {
            let data = SyntheticConfig { regime: Regime::Alternative, ..spec.data.clone() };
            for &k in ks {
                let test = TestConfig { k_derandomize: k, ..spec.test.clone() };
                let rec = run_trials(&test, &data, Design::Independent, horizon, spec.trials)?;
                push("ablate_k", format!("k={k}"), rec, &mut rows, &mut raw);
            }
        }
        Scenario::AblateBatches { variants } => {
            let data = SyntheticConfig { regime: Regime::Alternative, ..spec.data.clone() };
            for bs in variants {
                let test = TestConfig { batch_sizes: bs.clone(), ..spec.test.clone() };
                let rec = run_trials(&test, &data, Design::Independent, horizon, spec.trials)?;
                let label = format!(
                    "b={}",
                    bs.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("+")
                );
                push("ablate_batches", label, rec, &mut rows, &mut raw);
            }
        }
        Scenario::DimSweep { dims } => {
            for &d in dims {
                let data =
                    SyntheticConfig { regime: Regime::Alternative, d, ..spec.data.clone() };
                let rec =
                    run_trials(&spec.test, &data, Design::Independent, horizon, spec.trials)?;
                push("dim_sweep", format!("d={d}"), rec, &mut rows, &mut raw);
            }
        }
        Scenario::RhoSweep { rhos, regime } => {
            let data = SyntheticConfig { regime: *regime, ..spec.data.clone() };
            for &rho in rhos {
                let rec = run_trials(
                    &spec.test,
                    &data,
                    Design::Autocorrelated { rho },
                    horizon,
                    spec.trials,
                )?;
                push("rho_sweep", format!("rho={rho}"), rec, &mut rows, &mut raw);
            }
        }
        Scenario::MisspecSweep { sigma_tildes } => {
            let data = SyntheticConfig { regime: Regime::Null, ..spec.data.clone() };
            for &s in sigma_tildes {
                let rec = run_trials(
                    &spec.test,
                    &data,
                    Design::Misspecified { sigma_tilde: s },
                    horizon,
                    spec.trials,
                )?;
                push("misspec_sweep", format!("sigma_tilde={s}"), rec, &mut rows, &mut raw);
            }
        }
        Scenario::PeekingHazard { looks, num_dummies } => {
            let records: Vec<TrialRecord> = (0..spec.trials)
                .into_par_iter()
                .map(|trial| {
                    peeking_trial(&spec.test, &spec.data, looks, *num_dummies, trial)
                        .map_err(|e| Error::Trial { trial, source: Box::new(e) })
                })
                .collect::<Result<_>>()?;
            let n_max = *looks.iter().max().unwrap();
            let mut row = summarize("peeking_hazard", "", n_max, &records);
            row.mean_final_wealth = f64::NAN;
            rows.push(row);
            raw.push((String::new(), records));
        }
    }

    Ok((MetricsTable { config_hash: config_hash(&spec.test), rows }, raw))
}

// ---------------------------------------------------------------------------
// Reports

/// Write the table as CSV. The first line is a comment carrying the tester
/// config hash; the header and rows follow.
pub fn write_csv_report<W: Write>(out: &mut W, table: &MetricsTable) -> Result<()> {
    writeln!(out, "# config_hash={}", table.config_hash)?;
    let mut wtr = csv::Writer::from_writer(out);
    for row in &table.rows {
        wtr.serialize(row).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read back a CSV report written by [`write_csv_report`].
pub fn read_csv_report<R: std::io::Read>(input: R) -> Result<MetricsTable> {
    let mut content = String::new();
    let mut input = input;
    input.read_to_string(&mut content)?;
    let mut lines = content.lines();
    let first = lines.next().ok_or(Error::EmptyTable)?;
    let config_hash = first
        .strip_prefix("# config_hash=")
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing config hash comment".into() })?
        .to_string();
    let rest: String = lines.collect::<Vec<_>>().join("\n");
    let mut rdr = csv::Reader::from_reader(rest.as_bytes());
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    Ok(MetricsTable { config_hash, rows })
}

pub fn write_json_report<W: Write>(out: &mut W, table: &MetricsTable) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, table)
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    out.write_all(b"\n")?;
    Ok(())
}
