//! Command-line front end.
//!
//! Exit codes for `test`: 0 = test completed and rejected, 1 = test
//! completed without rejecting, 2 = error. Other subcommands use 0 for
//! success and 2 for errors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use ecrt::experiments::{load_sampler, save_sampler, ndjson_observations, SamplerSpec};
use ecrt::sampler::{default_logistic_penalty_grid, fit_gaussian_sampler, fit_logistic_sampler};
use ecrt::types::RawRecord;
use ecrt::{
    gen_dataset, run_experiment, run_sequential, write_csv_report, write_json_report, Decision,
    ExperimentSpec, Regime, RngStream, SyntheticConfig, TestConfig,
};

#[derive(Parser)]
#[command(name = "ecrt", about = "Streaming conditional-independence testing", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation experiment described by a JSON spec file and emit
    /// CSV/JSON reports.
    Simulate {
        /// Path to the experiment spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Directory for report files; created if missing.
        #[arg(long, default_value = "reports")]
        out_dir: PathBuf,
    },
    /// Run the sequential test over a newline-delimited JSON record stream.
    Test {
        /// Conditional sampler file.
        #[arg(long)]
        sampler: PathBuf,
        /// Tester configuration (JSON mirroring the config struct);
        /// defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Record stream; stdin if omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Optional per-step wealth log, one JSON object per line.
        #[arg(long)]
        wealth_log: Option<PathBuf>,
    },
    /// Fit a conditional sampler from records and write a sampler file.
    FitSampler {
        /// Input records (x and z used; y ignored and may be absent).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long)]
        out: PathBuf,
        /// Cross-validation seed for the logistic family.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure tester throughput on synthetic data.
    Bench {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 19)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Gaussian,
    Logistic,
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn run() -> anyhow::Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { spec, out_dir } => simulate(&spec, &out_dir),
        Command::Test { sampler, config, input, wealth_log } => {
            cmd_test(&sampler, config.as_deref(), input.as_deref(), wealth_log.as_deref())
        }
        Command::FitSampler { input, family, out, seed } => fit_sampler(&input, family, &out, seed),
        Command::Bench { steps, dim, seed } => bench(steps, dim, seed),
    }
}

fn simulate(spec_path: &std::path::Path, out_dir: &std::path::Path) -> anyhow::Result<i32> {
    let spec: ExperimentSpec = serde_json::from_reader(
        File::open(spec_path).with_context(|| format!("opening {}", spec_path.display()))?,
    )
    .context("parsing experiment spec")?;
    let (table, _raw) = run_experiment(&spec)?;

    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("report.csv");
    let json_path = out_dir.join("report.json");
    write_csv_report(&mut BufWriter::new(File::create(&csv_path)?), &table)?;
    write_json_report(&mut BufWriter::new(File::create(&json_path)?), &table)?;

    println!("config_hash: {}", table.config_hash);
    for row in &table.rows {
        println!(
            "{} {} trials={} rejection_rate={} mean_stop={} median_stop={} q90_stop={}",
            row.scenario,
            if row.variant.is_empty() { "-" } else { &row.variant },
            row.trials,
            row.rejection_rate,
            row.mean_stop_time,
            row.median_stop_time,
            row.q90_stop_time,
        );
    }
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(0)
}

fn cmd_test(
    sampler_path: &std::path::Path,
    config_path: Option<&std::path::Path>,
    input: Option<&std::path::Path>,
    wealth_log: Option<&std::path::Path>,
) -> anyhow::Result<i32> {
    let sampler_spec = load_sampler(sampler_path)?;
    let sampler = sampler_spec.as_dyn();
    let config: TestConfig = match config_path {
        Some(p) => serde_json::from_reader(
            File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )
        .context("parsing test config")?,
        None => TestConfig::default(),
    };
    config.validate()?;

    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(BufReader::new(
            File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(BufReader::new(std::io::stdin())),
    };
    let stream = ndjson_observations(reader, sampler.dim());
    let outcome = run_sequential(stream, &config, sampler)?;

    if let Some(path) = wealth_log {
        let mut out = BufWriter::new(File::create(path)?);
        for &(t, wealth) in &outcome.trajectory {
            writeln!(out, "{{\"t\":{t},\"wealth\":{wealth}}}")?;
        }
    }

    match outcome.decision {
        Decision::Rejected => {
            println!(
                "rejected at t={} with wealth {:.6}",
                outcome.stop_time, outcome.final_wealth
            );
            Ok(0)
        }
        Decision::NotRejected => {
            println!(
                "not rejected after t={} (wealth {:.6})",
                outcome.stop_time, outcome.final_wealth
            );
            Ok(1)
        }
    }
}

fn fit_sampler(
    input: &std::path::Path,
    family: Family,
    out: &std::path::Path,
    seed: u64,
) -> anyhow::Result<i32> {
    let reader = BufReader::new(
        File::open(input).with_context(|| format!("opening {}", input.display()))?,
    );
    let mut xs = Vec::new();
    let mut zs: Vec<Vec<f64>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .with_context(|| format!("line {}: invalid record", i + 1))?;
        if let Some(first) = zs.first() {
            if raw.z.len() != first.len() {
                bail!("line {}: z has {} entries, expected {}", i + 1, raw.z.len(), first.len());
            }
        }
        xs.push(raw.x);
        zs.push(raw.z);
    }
    if xs.is_empty() {
        bail!("no records in {}", input.display());
    }

    let spec = match family {
        Family::Gaussian => SamplerSpec::FittedGaussian(fit_gaussian_sampler(&xs, &zs)?),
        Family::Logistic => {
            let mut rng = RngStream::new(seed, 0);
            SamplerSpec::BernoulliLogistic(fit_logistic_sampler(
                &xs,
                &zs,
                &default_logistic_penalty_grid(),
                10,
                &mut rng,
            )?)
        }
    };
    save_sampler(out, &spec)?;
    println!("fitted {} sampler on {} records -> {}",
        match family { Family::Gaussian => "gaussian", Family::Logistic => "logistic" },
        xs.len(),
        out.display());
    Ok(0)
}

fn bench(steps: usize, dim: usize, seed: u64) -> anyhow::Result<i32> {
    let mut rng = RngStream::new(seed, 0);
    let config = TestConfig { seed, ..TestConfig::default() };
    let data = SyntheticConfig {
        regime: Regime::Null,
        n: config.n_init + steps,
        d: dim,
        ..SyntheticConfig::default()
    };
    let (obs, sampler) = gen_dataset(&data, &mut rng)?;
    let start = Instant::now();
    let outcome = run_sequential(obs.into_iter().map(Ok), &config, &sampler)?;
    let elapsed = start.elapsed();
    let rate = outcome.stop_time.max(1) as f64 / elapsed.as_secs_f64();
    println!(
        "processed {} observations (d={dim}) in {:.3}s: {:.0} obs/s",
        outcome.stop_time,
        elapsed.as_secs_f64(),
        rate
    );
    Ok(0)
}
