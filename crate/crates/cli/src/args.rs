use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "seqoed",
    version,
    about = "Sequential optimal experimental design for vapor-liquid equilibrium campaigns"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create, advance and inspect campaign files.
    #[command(subcommand)]
    Campaign(CampaignCommand),
    /// Prediction-quality metrics of a campaign's design.
    Assess(AssessArgs),
    /// Recompute the reference case-study metrics from the bundled tables.
    ReplayPaper(ReplayArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CampaignCommand {
    /// Create a campaign file from settings and an initial design.
    New {
        /// Settings JSON; omitted fields take the case-study values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Measurement CSV, planned-point CSV (`l,P`) or bundled fixture id.
        #[arg(long)]
        initial_design: String,
        #[arg(long, default_value = "campaign.json")]
        out: PathBuf,
        /// Replace an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Estimate on all data and propose the next batch.
    Propose { campaign: PathBuf },
    /// Append measurements of the pending batch.
    Record {
        campaign: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
    },
    /// Run the loop to termination against simulated measurements.
    RunSim {
        campaign: PathBuf,
        /// JSON with the true parameters, `{"a12": .., "a21": .., "b12": .., "b21": .., "c12": ..}` or a 5-array.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a campaign.
    Show {
        campaign: PathBuf,
        /// Print the full state as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write the measurement table (or the pending batch) as CSV.
    Export {
        campaign: PathBuf,
        /// Export the pending batch as an `l,P` table instead.
        #[arg(long)]
        pending: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    pub campaign: PathBuf,
    /// Also compute sampling-based uncertainties.
    #[arg(long)]
    pub sampling: bool,
    /// Sample count; defaults to the campaign setting.
    #[arg(long)]
    pub n_sam: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reference data for the prediction errors (CSV or fixture id);
    /// defaults to the campaign's own measurements.
    #[arg(long)]
    pub reference: Option<String>,
    /// Directory for `metrics.json` and the curve tables.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Print the metrics as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Single stage; all stages when omitted.
    #[arg(long, value_parser = ["init", "oed1", "fed1", "oed2", "fed2", "oed3", "fed3", "tot"])]
    pub stage: Option<String>,
    /// Also compute sampling-based uncertainties.
    #[arg(long)]
    pub sampling: bool,
    #[arg(long, default_value_t = 1000)]
    pub n_sam: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory holding one JSON file per campaign.
    #[arg(long, env = "SEQOED_DATA_DIR", default_value = "campaigns")]
    pub data_dir: PathBuf,
    /// Background workers for propose and assess jobs.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}
