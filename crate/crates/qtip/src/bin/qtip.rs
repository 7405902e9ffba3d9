//! Command-line front end for the incident-adaptation pipeline.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use qtip::corridor::{
    format_clock, BlockPosition, CorridorConfig, DemandLevel, DistressSignal, IncidentScenario,
    LanePos,
};
use qtip::microsim;
use qtip::models::{FittedModel, ModelDocument, ModelPayload};
use qtip::orchestrator::{
    AdaptMode, DegradationSummary, ExperimentPlan, ImprovementSummary, ModelKind, Orchestrator,
    PrecisionMode, TransferSummary,
};
use qtip::{Error, Result};

#[derive(Parser)]
#[command(name = "qtip", about = "What-if incident adaptation of traffic speed predictors")]
struct Cli {
    /// Corridor definition (JSON); defaults to the built-in 3x1000 m corridor.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Results directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,

    /// Simulation worker threads; the QTIP_WORKERS environment variable
    /// overrides this. Defaults to the number of CPUs.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Master seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Lane precision of the distress signal: known_lanes or unknown_lanes.
    #[arg(long, global = true, default_value = "known_lanes")]
    mode: String,

    /// Ordinary-model family: ols, bayes, gp or mlp.
    #[arg(long, global = true, default_value = "ols")]
    model: String,

    /// What-if simulations per adaptation.
    #[arg(long, global = true, default_value_t = 100)]
    budget: usize,

    /// Incident-free training simulations (multiple of 3).
    #[arg(long, global = true, default_value_t = 150)]
    ordinary_sims: usize,

    /// Ground-truth replications per scenario.
    #[arg(long, global = true, default_value_t = 5)]
    ground_truths: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// List the 81 incident scenarios as CSV on stdout.
    Enumerate,
    /// Run one simulation and write speeds.csv to the output directory.
    Simulate {
        /// Demand level: low, medium or high.
        #[arg(long, default_value = "medium")]
        demand: String,
        /// Incident scenario id such as H-C-LR; incident-free if omitted.
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Fit the ordinary-conditions model and persist it with its data.
    TrainOrdinary,
    /// Adapt to a distress signal (JSON file) using the persisted ordinary
    /// model.
    Adapt {
        /// Distress-signal JSON: {"link": "Study", "time_min": 430,
        /// "n_blocks": 1, "lanes": ["Left"]}.
        #[arg(long)]
        signal: PathBuf,
        /// Adaptation mode: fresh (least squares) or bayes (prior update).
        #[arg(long, default_value = "fresh")]
        adapt_mode: String,
    },
    /// Run one of the headline studies end to end.
    Study {
        /// degradation, improvement or transfer.
        study: String,
        /// Restrict to the first N scenarios of the canonical grid.
        #[arg(long)]
        limit: Option<usize>,
        /// Restrict to specific scenario ids (comma-separated, e.g.
        /// H-C-LR,M-S-M). Applied after --limit.
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<String>,
        /// Largest number of what-if runs in the transfer study.
        #[arg(long, default_value_t = 10)]
        j_max: usize,
        /// Seeded repetitions per transfer-study cell.
        #[arg(long, default_value_t = 30)]
        repeats: usize,
    },
    /// Rebuild plot-ready CSVs from persisted study summaries.
    Report,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            eprintln!("  caused by: {s}");
            src = s.source();
        }
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => CorridorConfig::load(path)?,
        None => CorridorConfig::default(),
    };
    let mode: PrecisionMode = cli.mode.parse()?;
    let kind: ModelKind = cli.model.parse()?;
    let plan = ExperimentPlan {
        n_ordinary_sims: cli.ordinary_sims,
        n_ground_truth: cli.ground_truths,
        whatif_budget: cli.budget,
        mode,
        master_seed: cli.seed,
        workers: resolve_workers(cli.workers)?,
    };

    match cli.cmd {
        Cmd::Enumerate => enumerate(&config),
        Cmd::Simulate { demand, scenario } => {
            simulate(&config, plan, &cli.out, &demand, scenario.as_deref())
        }
        Cmd::TrainOrdinary => train_ordinary(&config, plan, kind, &cli.out),
        Cmd::Adapt { signal, adapt_mode } => {
            adapt(&config, plan, mode, &cli.out, &signal, &adapt_mode)
        }
        Cmd::Study { study, limit, scenarios, j_max, repeats } => {
            run_study(&config, plan, kind, &cli.out, &study, limit, &scenarios, j_max, repeats)
        }
        Cmd::Report => report(&cli.out),
    }
}

/// QTIP_WORKERS beats the flag, the flag beats the CPU count.
fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var("QTIP_WORKERS") {
        return v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::InvalidPlan(format!("QTIP_WORKERS={v:?} is not a positive integer")));
    }
    match flag {
        Some(0) => Err(Error::InvalidPlan("worker count must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn enumerate(config: &CorridorConfig) -> Result<()> {
    let window = config.incident_window()?;
    println!("scenario_id,demand,position,lanes,start,end");
    for sc in qtip::corridor::enumerate_scenarios(window) {
        let lanes: String = sc.blocks.iter().map(|l| l.short_name()).collect();
        println!(
            "{},{},{},{},{},{}",
            sc.id(),
            sc.demand.short_name(),
            sc.position.short_name(),
            lanes,
            format_clock(sc.start_min),
            format_clock(sc.end_min)
        );
    }
    Ok(())
}

fn simulate(
    config: &CorridorConfig,
    plan: ExperimentPlan,
    out: &Path,
    demand: &str,
    scenario: Option<&str>,
) -> Result<()> {
    let demand: DemandLevel = demand.parse()?;
    let window = config.incident_window()?;
    let incident = scenario.map(|id| parse_scenario_id(id, window)).transpose()?;
    let corridor = config.corridor()?;
    let od = qtip::corridor::perturb_od(&config.base_od()?, demand, plan.master_seed);
    let mut cfg = microsim::SimConfig::default();
    cfg.seed = plan.master_seed;
    let series = microsim::run(&corridor, &od, incident.as_ref(), &cfg)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("speeds.csv");
    series.write_csv(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Parses a canonical scenario id such as "H-C-LR" back into a scenario.
fn parse_scenario_id(id: &str, window: (u32, u32)) -> Result<IncidentScenario> {
    let bad = || Error::InvalidScenario(format!("malformed scenario id {id:?}, expected e.g. H-C-LR"));
    let mut parts = id.split('-');
    let (demand, position, lanes) =
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(d), Some(p), Some(l), None) => (d, p, l),
            _ => return Err(bad()),
        };
    let demand = DemandLevel::ALL
        .into_iter()
        .find(|d| d.short_name() == demand)
        .ok_or_else(bad)?;
    let position = BlockPosition::ALL
        .into_iter()
        .find(|p| p.short_name() == position)
        .ok_or_else(bad)?;
    let blocks: Vec<LanePos> = lanes
        .chars()
        .map(|c| {
            LanePos::ALL
                .into_iter()
                .find(|l| l.short_name() == c.to_string())
                .ok_or_else(bad)
        })
        .collect::<Result<_>>()?;
    IncidentScenario::new(demand, position, blocks, window.0, window.1)
}

fn ordinary_model_path(out: &Path) -> PathBuf {
    out.join("ordinary").join("model.json")
}

fn train_ordinary(
    config: &CorridorConfig,
    plan: ExperimentPlan,
    kind: ModelKind,
    out: &Path,
) -> Result<()> {
    let orch = Orchestrator::new(config, plan)?;
    let (model, data) = orch.train_ordinary(kind)?;
    let dir = out.join("ordinary");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    ModelDocument::single(model).save(&ordinary_model_path(out))?;
    let path = dir.join("dataset.csv");
    data.write_csv(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?)?;
    println!("wrote {} ({} training rows)", ordinary_model_path(out).display(), data.n());
    Ok(())
}

fn load_ordinary_model(out: &Path) -> Result<FittedModel> {
    let path = ordinary_model_path(out);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no ordinary model at {}; run `qtip train-ordinary` first",
            path.display()
        )));
    }
    match ModelDocument::load(&path)?.model {
        ModelPayload::Single(m) => Ok(m),
        ModelPayload::Piecewise(_) => Err(Error::MissingPrerequisite(format!(
            "{} holds an incident model, not an ordinary one",
            path.display()
        ))),
    }
}

fn adapt(
    config: &CorridorConfig,
    plan: ExperimentPlan,
    mode: PrecisionMode,
    out: &Path,
    signal_path: &Path,
    adapt_mode: &str,
) -> Result<()> {
    let adapt_mode = match adapt_mode {
        "fresh" => AdaptMode::Fresh,
        "bayes" => AdaptMode::Bayes,
        other => {
            return Err(Error::InvalidPlan(format!(
                "unknown adapt mode {other:?}, expected fresh or bayes"
            )))
        }
    };
    let m_ord = load_ordinary_model(out)?;
    let text = std::fs::read_to_string(signal_path).map_err(|e| Error::io(signal_path, e))?;
    let sig: DistressSignal =
        serde_json::from_str(&text).map_err(|e| Error::json(signal_path, e))?;

    let orch = Orchestrator::new(config, plan)?;
    let outcome = orch.adapt(&m_ord, &sig, mode, adapt_mode, orch.plan.master_seed)?;

    let dir = out.join("adapt").join(mode.as_str());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    ModelDocument::piecewise(outcome.model).save(&dir.join("model.json"))?;
    let path = dir.join("dataset.csv");
    let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    outcome.early.write_csv(&mut file)?;
    let path = dir.join("dataset_late.csv");
    outcome.late.write_csv(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?)?;
    println!(
        "adapted over {} templates ({} what-if runs); wrote {}",
        outcome.allocations.len(),
        outcome.allocations.iter().map(|(_, n)| n).sum::<usize>(),
        dir.join("model.json").display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_study(
    config: &CorridorConfig,
    plan: ExperimentPlan,
    kind: ModelKind,
    out: &Path,
    study: &str,
    limit: Option<usize>,
    ids: &[String],
    j_max: usize,
    repeats: usize,
) -> Result<()> {
    let orch = Orchestrator::new(config, plan)?;
    let mut scenarios: Vec<(usize, IncidentScenario)> =
        orch.scenarios().into_iter().enumerate().collect();
    if let Some(limit) = limit {
        scenarios.truncate(limit);
    }
    if !ids.is_empty() {
        scenarios.retain(|(_, sc)| ids.iter().any(|id| *id == sc.id()));
        if scenarios.is_empty() {
            return Err(Error::InvalidPlan("no scenarios match the given ids".into()));
        }
    }
    match study {
        "degradation" => {
            let (_, data) = orch.train_ordinary(kind)?;
            let summary = orch.run_degradation_study(&data, &scenarios, Some(out))?;
            for r in &summary.rows {
                println!(
                    "{:<10} {:<11} msd {:>7.3}  mae {:>7.3}  rmse {:>7.3}",
                    r.condition, r.features, r.msd, r.mae, r.rmse
                );
            }
        }
        "improvement" => {
            let (m_ord, _) = orch.train_ordinary(kind)?;
            let summary = orch.run_improvement_study(&m_ord, &scenarios, Some(out))?;
            for a in &summary.aggregates {
                println!(
                    "{}: mean rmse ordinary {:.3}, abnormal {:.3}, mean relative improvement {:.2}%",
                    a.mode,
                    a.mean_rmse_ordinary,
                    a.mean_rmse_abnormal,
                    100.0 * a.mean_rel_improvement
                );
            }
        }
        "transfer" => {
            let (m_ord, _) = orch.train_ordinary(ModelKind::Ols)?;
            let summary = orch.run_transfer_study(&m_ord, &scenarios, j_max, repeats, Some(out))?;
            println!(
                "transfer study: {} rows over {} scenarios, j = 1..{}, {} repeats",
                summary.rows.len(),
                scenarios.len(),
                j_max,
                repeats
            );
        }
        other => {
            return Err(Error::InvalidPlan(format!(
                "unknown study {other:?}, expected degradation, improvement or transfer"
            )))
        }
    }
    Ok(())
}

/// Rebuilds per-figure CSVs purely from persisted summary.json files.
fn report(out: &Path) -> Result<()> {
    let report_dir = out.join("report");
    let mut wrote_any = false;

    let improvement = out.join("improvement").join("summary.json");
    if improvement.exists() {
        let summary: ImprovementSummary = read_json(&improvement)?;
        std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
        let path = report_dir.join("fig_improvement.csv");
        let mut w = csv_writer(&path)?;
        write_record(&mut w, &path, &["scenario_id", "mode", "rel_improvement_pct"])?;
        for r in &summary.rows {
            write_record(
                &mut w,
                &path,
                &[&r.scenario_id, &r.mode, &format!("{:.4}", 100.0 * r.rel_improvement)],
            )?;
        }
        finish(w, &path)?;

        let path = report_dir.join("fig_improvement_aggregate.csv");
        let mut w = csv_writer(&path)?;
        write_record(
            &mut w,
            &path,
            &["mode", "mean_rmse_ordinary", "mean_rmse_abnormal", "mean_rel_improvement_pct"],
        )?;
        for a in &summary.aggregates {
            write_record(
                &mut w,
                &path,
                &[
                    &a.mode,
                    &format!("{:.4}", a.mean_rmse_ordinary),
                    &format!("{:.4}", a.mean_rmse_abnormal),
                    &format!("{:.4}", 100.0 * a.mean_rel_improvement),
                ],
            )?;
        }
        finish(w, &path)?;
        wrote_any = true;
    }

    let degradation = out.join("degradation").join("summary.json");
    if degradation.exists() {
        let summary: DegradationSummary = read_json(&degradation)?;
        std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
        let path = report_dir.join("fig_degradation.csv");
        let mut w = csv_writer(&path)?;
        write_record(&mut w, &path, &["condition", "features", "msd", "mae", "rmse"])?;
        for r in &summary.rows {
            write_record(
                &mut w,
                &path,
                &[
                    &r.condition,
                    &r.features,
                    &format!("{:.4}", r.msd),
                    &format!("{:.4}", r.mae),
                    &format!("{:.4}", r.rmse),
                ],
            )?;
        }
        finish(w, &path)?;
        wrote_any = true;
    }

    let transfer = out.join("transfer").join("summary.json");
    if transfer.exists() {
        let summary: TransferSummary = read_json(&transfer)?;
        std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
        let path = report_dir.join("fig_transfer.csv");
        let mut w = csv_writer(&path)?;
        write_record(&mut w, &path, &["scenario_id", "j", "model", "mean_rmse", "std_rmse"])?;
        for r in &summary.rows {
            write_record(
                &mut w,
                &path,
                &[
                    &r.scenario_id,
                    &r.j.to_string(),
                    &r.model,
                    &format!("{:.4}", r.mean_rmse),
                    &format!("{:.4}", r.std_rmse),
                ],
            )?;
        }
        finish(w, &path)?;
        wrote_any = true;
    }

    if !wrote_any {
        return Err(Error::MissingPrerequisite(format!(
            "no study summaries under {}; run `qtip study <name>` first",
            out.display()
        )));
    }
    println!("wrote report CSVs to {}", report_dir.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_writer(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_record(w: &mut csv::Writer<std::fs::File>, _path: &Path, fields: &[&str]) -> Result<()> {
    w.write_record(fields).map_err(Error::from)
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}
