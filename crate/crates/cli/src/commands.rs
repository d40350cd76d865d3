use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqoed::assessment::{
    curves_csv, rmse, worst_case_lin, worst_case_sam, DesignMetrics, EvalGrid, InfoNormalization,
    SamplingConfig,
};
use seqoed::campaign::{run_campaign, CampaignSettings, CampaignState, SimulatedSource, Status};
use seqoed::estimation::{wls_estimate, Dataset, EstimationConfig};
use seqoed::io::{self, MeasurementRecord};
use seqoed::model::UnweightedDesign;
use seqoed::solver::DesignSpace;
use seqoed::vle::{ParamVector, VleModel};
use seqoed::{Error, Result};

use crate::args::{AssessArgs, CampaignCommand, Cli, Command};
use crate::replay;

/// Output names of the bubble-point model, in order.
pub const OUTPUT_NAMES: [&str; 2] = ["v", "T"];

pub fn model() -> VleModel {
    VleModel::default()
}

/// Starting point of a campaign.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDesign {
    /// Already measured; the campaign starts ready to propose.
    Measured(Vec<MeasurementRecord>),
    /// Planned points still to be measured.
    Planned(UnweightedDesign),
}

/// Parses either table layout, chosen by the header row.
pub fn parse_initial(text: &str) -> Result<InitialDesign> {
    let header = text.lines().next().unwrap_or("").trim();
    if header == io::DESIGN_HEADER.join(",") {
        Ok(InitialDesign::Planned(io::read_design(text)?))
    } else {
        Ok(InitialDesign::Measured(io::read_measurements(text)?))
    }
}

/// A bundled fixture id or a CSV file path.
pub fn load_initial(source: &str) -> Result<InitialDesign> {
    if let Ok(rows) = io::fixture(source) {
        return Ok(InitialDesign::Measured(rows));
    }
    parse_initial(&read_text(Path::new(source))?)
}

pub fn create_campaign(settings: CampaignSettings, initial: InitialDesign) -> Result<CampaignState> {
    let config = settings.into_config()?;
    match initial {
        InitialDesign::Measured(rows) => CampaignState::from_measurements(config, rows),
        InitialDesign::Planned(design) => CampaignState::new(config, design),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn stdout_err(source: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    }
}

/// Evaluation grid over the bounding box of the candidate set.
pub fn eval_grid(space: &DesignSpace) -> Result<EvalGrid> {
    let lo = |k: usize| space.points.iter().map(|p| p.coords()[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| space.points.iter().map(|p| p.coords()[k]).fold(f64::NEG_INFINITY, f64::max);
    let n = |k: usize| if hi(k) > lo(k) { [201, 21][k] } else { 1 };
    EvalGrid::linspace((lo(0), lo(1)), (hi(0), hi(1)), (n(0), n(1)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssessOptions {
    #[serde(default)]
    pub sampling: bool,
    #[serde(default)]
    pub n_sam: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// Metrics of a campaign together with the state they were computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub state_hash: String,
    pub outputs: Vec<String>,
    pub metrics: DesignMetrics,
}

impl Assessment {
    pub fn lin_csv(&self) -> Result<String> {
        curves_csv(&self.metrics.lin.curves, &OUTPUT_NAMES)
    }

    pub fn sam_csv(&self) -> Result<Option<String>> {
        self.metrics.sam.as_ref().map(|s| curves_csv(&s.curves, &OUTPUT_NAMES)).transpose()
    }
}

/// Refits on all measurements, then evaluates errors on `reference` (the
/// campaign's own data when absent) and worst-case uncertainties on the
/// performed design.
pub fn assess_state(state: &CampaignState, reference: Option<&Dataset>, opts: &AssessOptions) -> Result<Assessment> {
    if state.measurements.is_empty() {
        return Err(Error::State("campaign has no measurements to assess".into()));
    }
    let model = model();
    let cfg = &state.config;
    let data = io::to_dataset(&state.measurements)?;
    let est = wls_estimate(
        &model,
        &data,
        &cfg.noise,
        &EstimationConfig {
            n_starts: cfg.n_starts,
            seed: cfg.seed,
            warm_start: state.estimate.as_ref().map(|e| e.theta.clone()),
            ..EstimationConfig::default()
        },
    )?;
    let theta = est.theta_vector();
    let errors = rmse(&model, &theta, reference.unwrap_or(&data))?;
    let design = state.actual_design();
    let grid = eval_grid(&cfg.design_space)?;
    let lin = worst_case_lin(&model, &design, &theta, &cfg.noise, &grid, InfoNormalization::PerExperiment)?;
    let sam = if opts.sampling {
        let sampling = SamplingConfig {
            n_sam: opts.n_sam.unwrap_or(cfg.n_sam),
            seed: opts.seed,
            ..SamplingConfig::default()
        };
        if sampling.n_sam < 2 {
            return Err(Error::Config("n_sam must be at least 2".into()));
        }
        Some(worst_case_sam(&model, &design, &theta, &cfg.noise, &grid, &sampling)?)
    } else {
        None
    };
    Ok(Assessment {
        state_hash: state.state_hash(),
        outputs: OUTPUT_NAMES.iter().map(|s| s.to_string()).collect(),
        metrics: DesignMetrics {
            label: state
                .measurements
                .last()
                .map(|m| m.design_label.clone())
                .unwrap_or_default(),
            size: design.len(),
            estimate: Some(est.theta),
            rmse: Some(errors),
            lin,
            sam,
        },
    })
}

fn fmt_params(theta: &[f64]) -> String {
    let names = ["a12", "a21", "b12", "b21", "c12"];
    names
        .iter()
        .zip(theta)
        .map(|(n, v)| format!("{n}={v:.6}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::AwaitingMeasurements => "awaiting_measurements",
        Status::ReadyToPropose => "ready_to_propose",
        Status::TerminatedBudget => "terminated_budget",
        Status::TerminatedProgress => "terminated_progress",
    }
}

fn batch_table(out: &mut String, points: &UnweightedDesign, distances: Option<&[f64]>) {
    let _ = writeln!(out, "{:>3} {:>10} {:>12} {:>10}", "#", "l", "P", "distance");
    for (i, x) in points.points.iter().enumerate() {
        let c = x.coords();
        let d = distances.and_then(|d| d.get(i)).map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{:>3} {:>10.4} {:>12.1} {:>10}", i + 1, c[0], c[1], d);
    }
}

/// Outcome of the latest proposal, as printed by `campaign propose`.
pub fn format_proposal(state: &CampaignState) -> String {
    let mut out = String::new();
    let Some(rec) = state.history.last() else {
        return "no proposal yet\n".into();
    };
    let _ = writeln!(
        out,
        "iteration {}: {} experiments, weighted SSE {:.4}",
        rec.iteration, rec.design_size, rec.estimate.sse
    );
    let _ = writeln!(out, "estimate {}", fmt_params(&rec.estimate.theta));
    let _ = writeln!(
        out,
        "weighted design: {} support points, min sensitivity {:.3e} (threshold {:.1e}), {} iterations",
        rec.report.support_indices.len(),
        rec.report.min_sensitivity,
        rec.report.threshold,
        rec.report.iterations
    );
    match state.status {
        Status::TerminatedBudget => {
            let _ = writeln!(
                out,
                "budget exhausted: the proposed batch would exceed {} experiments and is not performed",
                state.config.max_experiments
            );
            batch_table(&mut out, &rec.batch, Some(&rec.distances));
        }
        _ => {
            let label = state.pending.as_ref().map(|p| p.label.as_str()).unwrap_or("-");
            let _ = writeln!(out, "proposed batch {label} ({} points)", rec.batch.len());
            batch_table(&mut out, &rec.batch, Some(&rec.distances));
            if state.pending.as_ref().is_some_and(|p| p.final_batch) {
                let _ = writeln!(
                    out,
                    "no point is farther than delta = {} from the performed experiments; recording this batch ends the campaign",
                    state.config.delta
                );
            }
        }
    }
    let _ = writeln!(out, "status {}", status_name(state.status));
    out
}

pub fn format_summary(state: &CampaignState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "status {}", status_name(state.status));
    let _ = writeln!(
        out,
        "experiments {} of at most {}, {} proposals",
        state.design_size(),
        state.config.max_experiments,
        state.iteration
    );
    if let Some(e) = &state.estimate {
        let _ = writeln!(out, "estimate {}", fmt_params(&e.theta));
    }
    for rec in &state.history {
        let _ = writeln!(
            out,
            "  iteration {}: n={} batch={} max distance={:.4} outcome={:?}",
            rec.iteration,
            rec.design_size,
            rec.batch.len(),
            rec.distances.iter().copied().fold(0.0, f64::max),
            rec.outcome
        );
    }
    if let Some(p) = &state.pending {
        let _ = writeln!(out, "pending batch {} ({} points)", p.label, p.points.len());
        batch_table(&mut out, &p.points, None);
    }
    let _ = writeln!(out, "hash {}", state.state_hash());
    out
}

pub fn format_assessment(a: &Assessment) -> String {
    let m = &a.metrics;
    let mut out = String::new();
    let _ = writeln!(out, "design size {}", m.size);
    if let Some(t) = &m.estimate {
        let _ = writeln!(out, "estimate {}", fmt_params(t));
    }
    let _ = writeln!(out, "{:<8} {:>14} {:>14}", "metric", "v", "T");
    if let Some(r) = &m.rmse {
        let _ = writeln!(out, "{:<8} {:>14.6e} {:>14.6e}", "rmse", r[0], r[1]);
    }
    let _ = writeln!(out, "{:<8} {:>14.6e} {:>14.6e}", "sig_lin", m.lin.sigma[0], m.lin.sigma[1]);
    if let Some(s) = &m.sam {
        let _ = writeln!(out, "{:<8} {:>14.6e} {:>14.6e}", "sig_sam", s.sigma[0], s.sigma[1]);
    }
    out
}

/// Rejects any existing file unless `force`.
fn check_new_target(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists (pass --force to replace it)",
            path.display()
        )));
    }
    Ok(())
}

/// Parameter file: named fields or a plain 5-array.
#[derive(Deserialize)]
#[serde(untagged)]
enum TruthFile {
    Named(ParamVector),
    Array([f64; 5]),
}

pub fn read_truth(path: &Path) -> Result<ParamVector> {
    let t: TruthFile = serde_json::from_str(&read_text(path)?)?;
    let p = match t {
        TruthFile::Named(p) => p,
        TruthFile::Array(a) => ParamVector::from_array(a),
    };
    if !p.is_finite() {
        return Err(Error::Domain("non-finite parameter in truth file".into()));
    }
    Ok(p)
}

fn campaign(cmd: CampaignCommand, out: &mut dyn Write) -> Result<()> {
    match cmd {
        CampaignCommand::New {
            config,
            initial_design,
            out: path,
            force,
        } => {
            check_new_target(&path, force)?;
            let settings: CampaignSettings = match &config {
                Some(p) => serde_json::from_str(&read_text(p)?)?,
                None => CampaignSettings::default(),
            };
            let state = create_campaign(settings, load_initial(&initial_design)?)?;
            state.save(&path)?;
            writeln!(
                out,
                "created {} with {} experiments, status {}",
                path.display(),
                state.design_size(),
                status_name(state.status)
            )
            .map_err(stdout_err)?;
            if let Some(p) = &state.pending {
                let mut s = String::new();
                let _ = writeln!(s, "pending batch {} ({} points)", p.label, p.points.len());
                batch_table(&mut s, &p.points, None);
                out.write_all(s.as_bytes()).map_err(stdout_err)?;
            }
        }
        CampaignCommand::Propose { campaign } => {
            let state = CampaignState::load(&campaign)?;
            let next = state.propose(&model())?;
            next.save(&campaign)?;
            out.write_all(format_proposal(&next).as_bytes()).map_err(stdout_err)?;
        }
        CampaignCommand::Record { campaign, measurements } => {
            let state = CampaignState::load(&campaign)?;
            let rows = io::read_measurements(&read_text(&measurements)?)?;
            let n = rows.len();
            let next = state.record(rows)?;
            next.save(&campaign)?;
            writeln!(
                out,
                "recorded {n} measurements; {} experiments, status {}",
                next.design_size(),
                status_name(next.status)
            )
            .map_err(stdout_err)?;
        }
        CampaignCommand::RunSim { campaign, truth, seed } => {
            let state = CampaignState::load(&campaign)?;
            if state.status.is_terminal() {
                return Err(Error::State("campaign has terminated".into()));
            }
            let truth = read_truth(&truth)?;
            let noise = state.config.noise.clone();
            let mut source = SimulatedSource::new(model(), truth.to_dvector(), noise, seed);
            let mut seen = state.history.len();
            let mut write_err = None;
            let last = run_campaign(state, &mut source, &model(), |s| {
                s.save(&campaign)?;
                for rec in &s.history[seen..] {
                    let pts: Vec<String> = rec
                        .batch
                        .points
                        .iter()
                        .map(|x| format!("({:.4}, {:.0})", x.coords()[0], x.coords()[1]))
                        .collect();
                    if let Err(e) = writeln!(
                        out,
                        "iteration {}: n={} batch [{}] outcome {:?}",
                        rec.iteration,
                        rec.design_size,
                        pts.join(", "),
                        rec.outcome
                    ) {
                        write_err.get_or_insert(e);
                    }
                }
                seen = s.history.len();
                Ok(())
            })?;
            if let Some(e) = write_err {
                return Err(stdout_err(e));
            }
            write!(out, "{}", format_summary(&last)).map_err(stdout_err)?;
        }
        CampaignCommand::Show { campaign, json } => {
            let state = CampaignState::load(&campaign)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&state)?).map_err(stdout_err)?;
            } else {
                out.write_all(format_summary(&state).as_bytes()).map_err(stdout_err)?;
            }
        }
        CampaignCommand::Export { campaign, pending, out: path } => {
            let state = CampaignState::load(&campaign)?;
            let text = if pending {
                let p = state
                    .pending
                    .as_ref()
                    .ok_or_else(|| Error::State("campaign has no pending batch".into()))?;
                io::write_design(&p.points)
            } else {
                io::write_measurements(&state.measurements)
            };
            match path {
                Some(p) => io::write_atomic(&p, text.as_bytes())?,
                None => out.write_all(text.as_bytes()).map_err(stdout_err)?,
            }
        }
    }
    Ok(())
}

fn assess(args: AssessArgs, out: &mut dyn Write) -> Result<()> {
    let state = CampaignState::load(&args.campaign)?;
    let reference = args
        .reference
        .as_deref()
        .map(|r| io::load_measurements(r).and_then(|rows| io::to_dataset(&rows)))
        .transpose()?;
    let opts = AssessOptions {
        sampling: args.sampling,
        n_sam: args.n_sam,
        seed: args.seed,
    };
    let a = assess_state(&state, reference.as_ref(), &opts)?;
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        io::write_json_atomic(&dir.join("metrics.json"), &a)?;
        io::write_atomic(&dir.join("sigma_lin.csv"), a.lin_csv()?.as_bytes())?;
        if let Some(csv) = a.sam_csv()? {
            io::write_atomic(&dir.join("sigma_sam.csv"), csv.as_bytes())?;
        }
    }
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&a)?).map_err(stdout_err)?;
    } else {
        out.write_all(format_assessment(&a).as_bytes()).map_err(stdout_err)?;
    }
    Ok(())
}

/// Executes one command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Campaign(cmd) => campaign(cmd, out),
        Command::Assess(args) => assess(args, out),
        Command::ReplayPaper(args) => replay::run(args, out),
        Command::Serve(args) => crate::server::run(args),
    }
}
