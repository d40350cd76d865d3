//! Recomputes the case-study metrics per design stage and sets them against
//! the reference values.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use seqoed::assessment::{rmse, worst_case_lin, worst_case_sam, EvalGrid, InfoNormalization, SamplingConfig};
use seqoed::campaign::CampaignConfig;
use seqoed::estimation::{wls_estimate, EstimationConfig};
use seqoed::io;
use seqoed::reference::{Stage, StageReference};
use seqoed::{Error, Result};

use crate::args::ReplayArgs;
use crate::commands::model;

#[derive(Debug, Clone, Serialize)]
pub struct StageReplay {
    pub stage: Stage,
    pub size: usize,
    /// Fit on the stage's own data (the shipped all-data estimate for `tot`).
    pub estimate: Vec<f64>,
    /// Prediction errors of that fit on all 36 measurements.
    pub rmse: [f64; 2],
    /// Worst-case uncertainties at the all-data estimate.
    pub sigma_lin: [f64; 2],
    pub sigma_sam: Option<[f64; 2]>,
    pub reference: StageReference,
}

fn pair(v: &[f64]) -> [f64; 2] {
    [v[0], v[1]]
}

pub fn replay_stage(stage: Stage, sampling: Option<&SamplingConfig>) -> Result<StageReplay> {
    let model = model();
    let noise = CampaignConfig::case_study().noise;
    let theta_tot = io::theta_tot_fixture();
    let rows = io::fixture(stage.fixture_id())?;
    let all = io::to_dataset(&io::fixture("tot")?)?;
    let estimate = if stage == Stage::Tot {
        theta_tot.to_dvector()
    } else {
        let cfg = EstimationConfig {
            n_starts: 32,
            seed: 0,
            warm_start: Some(theta_tot.to_array().to_vec()),
            ..EstimationConfig::default()
        };
        wls_estimate(&model, &io::to_dataset(&rows)?, &noise, &cfg)?.theta_vector()
    };
    let errors = rmse(&model, &estimate, &all)?;
    let design = io::actual_design(&rows);
    let grid = EvalGrid::standard();
    let theta = theta_tot.to_dvector();
    let lin = worst_case_lin(&model, &design, &theta, &noise, &grid, InfoNormalization::PerExperiment)?;
    let sam = sampling
        .map(|s| worst_case_sam(&model, &design, &theta, &noise, &grid, s))
        .transpose()?;
    Ok(StageReplay {
        stage,
        size: rows.len(),
        estimate: estimate.iter().copied().collect(),
        rmse: pair(&errors),
        sigma_lin: pair(&lin.sigma),
        sigma_sam: sam.map(|s| pair(&s.sigma)),
        reference: *stage.reference(),
    })
}

/// Relative deviation in percent.
pub fn deviation(value: f64, reference: f64) -> f64 {
    100.0 * (value - reference) / reference
}

fn cell(out: &mut String, value: f64, reference: f64, scale: f64) {
    let _ = write!(
        out,
        " {:>8.2} {:>8.2} {:>+7.1}%",
        value / scale,
        reference / scale,
        deviation(value, reference)
    );
}

/// Fixed-width comparison table; `v` columns in 1e-4, `T` columns in 1e-2 K.
pub fn format_table(rows: &[StageReplay]) -> String {
    let mut out = String::new();
    let sampling = rows.iter().any(|r| r.sigma_sam.is_some());
    let mut groups = vec!["rmse_v", "rmse_T", "lin_v", "lin_T"];
    if sampling {
        groups.extend(["sam_v", "sam_T"]);
    }
    let _ = write!(out, "{:<5} {:>3}", "stage", "n");
    for g in &groups {
        let _ = write!(out, " {:>8} {:>8} {:>8}", g, "ref", "dev");
    }
    out.push('\n');
    let scale = [1e-4, 1e-2];
    for r in rows {
        let _ = write!(out, "{:<5} {:>3}", r.stage.fixture_id(), r.size);
        for j in 0..2 {
            cell(&mut out, r.rmse[j], r.reference.rmse[j], scale[j]);
        }
        for j in 0..2 {
            cell(&mut out, r.sigma_lin[j], r.reference.sigma_lin[j], scale[j]);
        }
        if sampling {
            match r.sigma_sam {
                Some(s) => {
                    for j in 0..2 {
                        cell(&mut out, s[j], r.reference.sigma_sam[j], scale[j]);
                    }
                }
                None => {
                    let _ = write!(out, "{:>54}", "-");
                }
            }
        }
        out.push('\n');
    }
    out.push_str("units: v columns 1e-4 mol/mol, T columns 1e-2 K\n");
    out
}

pub fn run(args: ReplayArgs, out: &mut dyn Write) -> Result<()> {
    let stages = match &args.stage {
        Some(s) => vec![Stage::parse(s)?],
        None => Stage::ALL.to_vec(),
    };
    let sampling = args.sampling.then(|| SamplingConfig {
        n_sam: args.n_sam,
        seed: args.seed,
        ..SamplingConfig::default()
    });
    if sampling.as_ref().is_some_and(|s| s.n_sam < 2) {
        return Err(Error::Config("n_sam must be at least 2".into()));
    }
    let rows = stages
        .into_iter()
        .map(|s| replay_stage(s, sampling.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let text = if args.json {
        format!("{}\n", serde_json::to_string_pretty(&rows)?)
    } else {
        format_table(&rows)
    };
    out.write_all(text.as_bytes()).map_err(|source| Error::Io {
        path: "<stdout>".into(),
        source,
    })
}
