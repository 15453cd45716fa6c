mod settings;

use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use riskset::calibration::calibrate;
use riskset::io::{derive_seed, load_dataset, save_report, split, write_atomic, Report};
use riskset::metrics::{aggregate, apss, evaluate, sweep, SetView, SweepConfig, SweepTable};
use riskset::prediction::{predict, set_sizes, PredictionRequest};
use riskset::simulation::{run_trial, validate_guarantee};
use riskset::{CalibrationResult, Error, Member, RiskBudget};

use settings::Options;

#[derive(Parser)]
#[command(name = "riskset", version, about = "Calibrated prediction sets over sampled answers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    options: Options,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Calibrate sample budget and threshold on a labeled dataset.
    Calibrate,
    /// Build prediction sets for a dataset with a saved calibration.
    Predict,
    /// Split, calibrate and evaluate one (alpha, beta) point.
    Evaluate,
    /// Evaluate an alpha x beta grid over seeded splits.
    Sweep,
    /// Check the coverage guarantees on fresh synthetic data.
    Simulate,
    /// Raw vs deduplicated set sizes across an epsilon grid.
    DedupReport,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let opts = cli.options.resolve()?;
    if let Some(n) = opts.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Calibrate => cmd_calibrate(&opts),
        Command::Predict => cmd_predict(&opts),
        Command::Evaluate => cmd_evaluate(&opts),
        Command::Sweep => cmd_sweep(&opts),
        Command::Simulate => cmd_simulate(&opts),
        Command::DedupReport => cmd_dedup_report(&opts),
    }
}

/// Writes atomically to `path`, or to stdout without one.
fn emit(path: Option<&Path>, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut buf = Vec::new();
            fill(&mut buf)?;
            write_atomic(p, |w| Ok(w.write_all(&buf)?)).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            fill(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn cmd_calibrate(opts: &Options) -> Result<()> {
    let cal = load_dataset(opts.data()?).context("loading dataset")?;
    let oracle = opts.oracle()?;
    let measure = opts.measure(&oracle)?;
    let budget = RiskBudget::new(opts.alpha()?, opts.beta()?)?;
    let result = calibrate(&cal, budget, &*oracle, &measure)?;
    eprintln!(
        "calibrated on {} records: sample budget {}, threshold {:.6}, epsilon {:.6}",
        result.calibration_size,
        result.sample_budget,
        result.threshold,
        budget.epsilon()
    );
    emit(opts.out.as_deref(), |w| {
        serde_json::to_writer_pretty(&mut *w, &result)?;
        writeln!(w)?;
        Ok(())
    })
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    raw: &'a [Member<f64>],
    dedup: &'a [Member<f64>],
    raw_size: usize,
    dedup_size: usize,
}

fn cmd_predict(opts: &Options) -> Result<()> {
    let path = opts.calibration.as_deref().context("--calibration is required")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let calibration: CalibrationResult<f64> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let records = load_dataset(opts.data()?).context("loading dataset")?;
    let oracle = opts.oracle()?;
    let measure = opts.measure(&oracle)?;
    let sets = records
        .iter()
        .map(|record| {
            let req = PredictionRequest {
                record,
                calibration: &calibration,
                measure: &measure,
            };
            predict(&req, &*oracle).with_context(|| format!("record {}", record.id()))
        })
        .collect::<Result<Vec<_>>>()?;
    emit(opts.out.as_deref(), |w| {
        for ps in &sets {
            let (raw_size, dedup_size) = set_sizes(ps);
            let line = PredictionLine {
                id: &ps.record_id,
                raw: &ps.raw_members,
                dedup: &ps.dedup_members,
                raw_size,
                dedup_size,
            };
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

fn config_json(command: &str, opts: &Options) -> Result<serde_json::Value> {
    Ok(json!({ "command": command, "options": serde_json::to_value(opts)? }))
}

fn print_table(table: &SweepTable) {
    println!(
        "{:>6} {:>6} {:>7} {:>6} {:>10} {:>10} {:>8} {:>8} {:>6}",
        "alpha", "beta", "epsilon", "ok", "stage1", "stage2", "apss", "dedup", "acc"
    );
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for a in &table.aggregates {
        println!(
            "{:>6} {:>6} {:>7.4} {:>6} {:>10} {:>10} {:>8} {:>8} {:>6}",
            a.alpha,
            a.beta,
            a.epsilon,
            format!("{}/{}", a.n_ok, a.trials),
            f(a.stage1_eer_mean),
            f(a.stage2_eer_mean),
            f(a.apss_raw_mean),
            f(a.apss_dedup_mean),
            f(a.acc_mean)
        );
    }
    for r in table.rows.iter().filter(|r| !r.is_ok()) {
        println!("alpha={} beta={} trial {}: {}", r.alpha, r.beta, r.trial, r.status);
    }
}

fn cmd_evaluate(opts: &Options) -> Result<()> {
    let records = load_dataset(opts.data()?).context("loading dataset")?;
    let oracle = opts.oracle()?;
    let measure = opts.measure(&oracle)?;
    let (alpha, beta) = (opts.alpha()?, opts.beta()?);
    let trials = opts.trials(1)?;
    if trials > 1 {
        return run_sweep(
            opts,
            "evaluate",
            &records,
            &*oracle,
            &measure,
            vec![alpha],
            vec![beta],
            trials,
        );
    }
    let budget = RiskBudget::new(alpha, beta)?;
    let seed = derive_seed(opts.seed(), 0);
    let report = run_trial(&records, budget, opts.split_ratio(), seed, &*oracle, &measure)?;
    let c = &report.calibration;
    println!(
        "N_cal={} N_test={} r_hat={} s_hat={:.4}",
        c.calibration_size, report.n_test, c.sample_budget, c.threshold
    );
    println!(
        "stage-1 EER {:.4} (alpha {alpha}), stage-2 EER {:.4} (epsilon {:.4})",
        report.stage1_eer,
        report.stage2_eer,
        budget.epsilon()
    );
    println!(
        "APSS raw {:.4}, dedup {:.4}, ACC {:.4}",
        report.apss_raw, report.apss_dedup, report.acc
    );
    if let Some(out) = &opts.out {
        save_report(&Report::Trial(&report), &config_json("evaluate", opts)?, out)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    opts: &Options,
    command: &str,
    records: &[riskset::QaRecord],
    oracle: &dyn riskset::EquivalenceOracle,
    measure: &riskset::ReliabilityMeasure,
    alphas: Vec<f64>,
    betas: Vec<f64>,
    trials: usize,
) -> Result<()> {
    let config = SweepConfig {
        alphas,
        betas,
        split_ratio: opts.split_ratio(),
        seed: opts.seed(),
        trials,
    };
    let table = sweep::<f64>(records, oracle, measure, &config)?;
    print_table(&table);
    if let Some(out) = &opts.out {
        save_report(&Report::Sweep(&table), &config_json(command, opts)?, out)?;
    }
    Ok(())
}

fn cmd_sweep(opts: &Options) -> Result<()> {
    let records = load_dataset(opts.data()?).context("loading dataset")?;
    let oracle = opts.oracle()?;
    let measure = opts.measure(&oracle)?;
    run_sweep(
        opts,
        "sweep",
        &records,
        &*oracle,
        &measure,
        opts.alphas()?,
        opts.betas()?,
        opts.trials(1)?,
    )
}

fn cmd_simulate(opts: &Options) -> Result<()> {
    let spec = opts.synthetic_spec()?;
    let oracle = opts.oracle()?;
    let measure = opts.measure(&oracle)?;
    let budget = RiskBudget::new(opts.alpha()?, opts.beta()?)?;
    let verdict = validate_guarantee(&spec, budget, opts.split_ratio(), opts.trials(500)?, &*oracle, &measure)?;
    println!("{verdict}");
    if let Some(out) = &opts.out {
        let table = SweepTable {
            aggregates: aggregate(&verdict.rows),
            rows: verdict.rows.clone(),
        };
        save_report(&Report::Sweep(&table), &config_json("simulate", opts)?, out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DedupRow {
    epsilon: f64,
    alpha: f64,
    beta: f64,
    r_hat: Option<usize>,
    s_hat: Option<f64>,
    apss_raw: Option<f64>,
    apss_dedup: Option<f64>,
    status: String,
}

fn cmd_dedup_report(opts: &Options) -> Result<()> {
    let records = load_dataset(opts.data()?).context("loading dataset")?;
    let oracle = opts.oracle()?;
    let measure = opts.measure(&oracle)?;
    let alpha = opts.alpha()?;
    let (cal, test) = split(&records, opts.split_ratio(), opts.seed())?;
    let mut rows = Vec::new();
    for epsilon in opts.epsilons()? {
        let budget = RiskBudget::from_epsilon(alpha, epsilon)
            .with_context(|| format!("epsilon {epsilon} with alpha {alpha}"))?;
        let mut row = DedupRow {
            epsilon,
            alpha,
            beta: budget.beta(),
            r_hat: None,
            s_hat: None,
            apss_raw: None,
            apss_dedup: None,
            status: "ok".into(),
        };
        match calibrate(&cal, budget, &*oracle, &measure) {
            Ok(c) => {
                let (_, sets) =
                    evaluate(&test, &c, &*oracle, &measure).with_context(|| format!("evaluating epsilon {epsilon}"))?;
                row.r_hat = Some(c.sample_budget);
                row.s_hat = Some(c.threshold);
                row.apss_raw = Some(apss(&sets, SetView::Raw)?);
                row.apss_dedup = Some(apss(&sets, SetView::Dedup)?);
            }
            Err(e @ (Error::InfeasibleRiskLevel { .. } | Error::UnboundedBudget { .. })) => {
                row.status = e.to_string();
            }
            Err(e) => return Err(e).with_context(|| format!("calibrating epsilon {epsilon}")),
        }
        rows.push(row);
    }
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{:>8} {:>8} {:>6} {:>8} {:>8} {:>8}",
        "epsilon", "beta", "r_hat", "s_hat", "raw", "dedup"
    );
    for r in &rows {
        println!(
            "{:>8.4} {:>8.4} {:>6} {:>8} {:>8} {:>8}{}",
            r.epsilon,
            r.beta,
            r.r_hat.map_or("-".to_string(), |v| v.to_string()),
            f(r.s_hat),
            f(r.apss_raw),
            f(r.apss_dedup),
            if r.status == "ok" {
                String::new()
            } else {
                format!("  {}", r.status)
            }
        );
    }
    if let Some(out) = &opts.out {
        write_atomic(out, |w| {
            let mut csv = csv::Writer::from_writer(w);
            for r in &rows {
                csv.serialize(r)?;
            }
            csv.flush()?;
            Ok(())
        })
        .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
