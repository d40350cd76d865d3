//! The sequential loop: measure the pending batch, re-estimate on all data,
//! design the next batch, and stop on budget or lack of progress.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::{select_batch, sieve};
use crate::criteria::{Criterion, TwoStageContext};
use crate::error::{Error, Result};
use crate::estimation::{wls_estimate, EstimateResult, EstimationConfig};
use crate::io::{self, MeasurementRecord};
use crate::model::{InputPoint, NoiseModel, ParametricModel, UnweightedDesign};
use crate::solver::{solve_weighted, DesignSpace, InfoCache, SolveReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    /// Importance `α ∈ [0, 1)` of the experiments already performed.
    pub alpha: f64,
    /// Optimality tolerance of the weighted design.
    pub epsilon: f64,
    /// Minimal total weight `w̲⁺` kept by the sieve.
    pub min_retained_weight: f64,
    /// Maximal number `n̄⁺` of new experiments per iteration.
    pub max_batch: usize,
    /// Maximal total number `n̄` of experiments.
    pub max_experiments: usize,
    /// Progress tolerance `δ` in the scaled max-norm.
    pub delta: f64,
    pub design_space: DesignSpace,
    #[serde(default)]
    pub criterion: Criterion,
    pub noise: NoiseModel,
    /// Seed for the multistart estimator (offset by the iteration number).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_starts")]
    pub n_starts: usize,
    /// Sample count for sampling-based assessment.
    #[serde(default = "default_n_sam")]
    pub n_sam: usize,
}

fn default_n_starts() -> usize {
    32
}

fn default_n_sam() -> usize {
    1000
}

impl CampaignConfig {
    /// Settings of the propanol/propyl-acetate case study on the 10 × 10 grid.
    pub fn case_study() -> Self {
        CampaignConfig {
            alpha: 0.5,
            epsilon: 5e-5,
            min_retained_weight: 0.95,
            max_batch: 3,
            max_experiments: 27,
            delta: 0.1,
            design_space: DesignSpace::oed_grid(),
            criterion: Criterion::D,
            noise: NoiseModel::from_std_devs(&[0.0015, 0.03]).expect("valid noise"),
            seed: 0,
            n_starts: default_n_starts(),
            n_sam: default_n_sam(),
        }
    }

    pub fn validate(&self, initial_size: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.alpha) {
            return fail(format!("alpha = {} must lie in [0, 1)", self.alpha));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon = {} must be positive", self.epsilon));
        }
        if !(self.min_retained_weight > 0.0 && self.min_retained_weight <= 1.0) {
            return fail(format!(
                "min_retained_weight = {} must lie in (0, 1]",
                self.min_retained_weight
            ));
        }
        if self.max_batch == 0 {
            return fail("max_batch must be at least 1".into());
        }
        if self.max_experiments < initial_size {
            return fail(format!(
                "max_experiments = {} is smaller than the initial design ({initial_size})",
                self.max_experiments
            ));
        }
        if !(self.delta > 0.0) {
            return fail(format!("delta = {} must be positive", self.delta));
        }
        if self.n_starts == 0 {
            return fail("n_starts must be at least 1".into());
        }
        if self.n_sam < 2 {
            return fail("n_sam must be at least 2".into());
        }
        Ok(())
    }

    fn estimation(&self, iteration: usize, warm: Option<&EstimateResult>) -> EstimationConfig {
        EstimationConfig {
            n_starts: self.n_starts,
            seed: self.seed.wrapping_add(iteration as u64),
            warm_start: warm.map(|e| e.theta.clone()),
            ..EstimationConfig::default()
        }
    }
}

/// Candidate grid in a settings file: a named grid or per-axis
/// `[lo, hi, n]` triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Named(String),
    Axes { l: (f64, f64, usize), #[serde(rename = "P")] p: (f64, f64, usize) },
}

impl GridSpec {
    pub fn build(&self) -> Result<DesignSpace> {
        match self {
            GridSpec::Named(n) if n == "oed" => Ok(DesignSpace::oed_grid()),
            GridSpec::Named(n) if n == "fed" => Ok(DesignSpace::fed_grid()),
            GridSpec::Named(n) => Err(Error::Config(format!("unknown grid '{n}' (expected oed or fed)"))),
            GridSpec::Axes { l, p } => {
                if l.2 == 0 || p.2 == 0 {
                    return Err(Error::Config("grid axes need at least one point".into()));
                }
                DesignSpace::grid(&[DesignSpace::linspace(l.0, l.1, l.2), DesignSpace::linspace(p.0, p.1, p.2)])
            }
        }
    }
}

/// Sparse settings file; absent fields take the case-study values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSettings {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub min_retained_weight: Option<f64>,
    #[serde(default)]
    pub max_batch: Option<usize>,
    #[serde(default)]
    pub max_experiments: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub criterion: Option<Criterion>,
    /// Measurement standard deviations `(σ_v, σ_T)`.
    #[serde(default)]
    pub sigma: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n_starts: Option<usize>,
    #[serde(default)]
    pub n_sam: Option<usize>,
}

impl CampaignSettings {
    pub fn into_config(self) -> Result<CampaignConfig> {
        let mut c = CampaignConfig::case_study();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(alpha, epsilon, min_retained_weight, max_batch, max_experiments, delta, criterion, seed, n_starts, n_sam);
        if let Some(s) = &self.sigma {
            c.noise = NoiseModel::from_std_devs(s)?;
        }
        if let Some(g) = &self.grid {
            c.design_space = g.build()?;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingMeasurements,
    ReadyToPropose,
    TerminatedBudget,
    TerminatedProgress,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::TerminatedBudget | Status::TerminatedProgress)
    }
}

/// A batch waiting to be measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub label: String,
    pub points: UnweightedDesign,
    /// Set for the batch that triggered the progress rule; recording it
    /// terminates the campaign.
    #[serde(default)]
    pub final_batch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Continue,
    Budget,
    Progress,
}

/// Everything computed in one proposal step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Size `n_k` of the design the estimate is based on.
    pub design_size: usize,
    pub estimate: EstimateResult,
    pub report: SolveReport,
    pub survivors: UnweightedDesign,
    pub batch: UnweightedDesign,
    /// Scaled distance of each batch point to the nearest performed experiment.
    pub distances: Vec<f64>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub schema_version: u32,
    pub config: CampaignConfig,
    pub status: Status,
    /// Completed proposal steps.
    pub iteration: usize,
    /// All measurements so far, in the order performed.
    pub measurements: Vec<MeasurementRecord>,
    #[serde(default)]
    pub pending: Option<PendingBatch>,
    /// Batch proposed when the budget rule fired; never performed.
    #[serde(default)]
    pub rejected_proposal: Option<UnweightedDesign>,
    #[serde(default)]
    pub estimate: Option<EstimateResult>,
    #[serde(default)]
    pub history: Vec<IterationRecord>,
}

const MATCH_TOL: f64 = 1e-9;

impl CampaignState {
    /// Fresh campaign with the initial design awaiting measurement.
    pub fn new(config: CampaignConfig, initial: UnweightedDesign) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::Config("initial design is empty".into()));
        }
        config.validate(initial.len())?;
        Ok(CampaignState {
            schema_version: SCHEMA_VERSION,
            config,
            status: Status::AwaitingMeasurements,
            iteration: 0,
            measurements: Vec::new(),
            pending: Some(PendingBatch {
                label: "init".into(),
                points: initial,
                final_batch: false,
            }),
            rejected_proposal: None,
            estimate: None,
            history: Vec::new(),
        })
    }

    /// Campaign whose initial design has already been measured.
    pub fn from_measurements(config: CampaignConfig, rows: Vec<MeasurementRecord>) -> Result<Self> {
        let initial = io::planned_design(&rows);
        let mut state = Self::new(config, initial)?;
        if let Some(p) = state.pending.as_mut() {
            p.label = rows[0].design_label.clone();
        }
        state.record(rows)
    }

    /// Planned points of all performed experiments, `x̃^k`.
    pub fn planned_design(&self) -> UnweightedDesign {
        io::planned_design(&self.measurements)
    }

    /// Realized inputs of all performed experiments.
    pub fn actual_design(&self) -> UnweightedDesign {
        io::actual_design(&self.measurements)
    }

    pub fn design_size(&self) -> usize {
        self.measurements.len()
    }

    /// Appends measurements for the pending batch. Rows may come in any
    /// order but must match the pending planned points one to one.
    pub fn record(&self, rows: Vec<MeasurementRecord>) -> Result<Self> {
        if self.status != Status::AwaitingMeasurements {
            return Err(Error::State(format!("cannot record measurements in state {:?}", self.status)));
        }
        let pending = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::State("no pending batch".into()))?;
        if rows.len() != pending.points.len() {
            return Err(Error::Invalid(format!(
                "pending batch has {} points, got {} measurements",
                pending.points.len(),
                rows.len()
            )));
        }
        let space = &self.config.design_space;
        let mut used = vec![false; rows.len()];
        for (i, row) in rows.iter().enumerate() {
            row.validate(i + 1)?;
            let planned = row.planned();
            let slot = pending
                .points
                .points
                .iter()
                .enumerate()
                .position(|(j, p)| !used[j] && space.scaled_distance(p, &planned) <= MATCH_TOL);
            match slot {
                Some(j) => used[j] = true,
                None => {
                    return Err(Error::Invalid(format!(
                        "measurement row {} at planned point {:?} does not match the pending batch",
                        i + 1,
                        planned.coords()
                    )))
                }
            }
        }
        let mut next = self.clone();
        next.measurements.extend(rows);
        next.status = if pending.final_batch {
            Status::TerminatedProgress
        } else {
            Status::ReadyToPropose
        };
        next.pending = None;
        Ok(next)
    }

    /// Estimate on all data, then compute and store the next batch.
    pub fn propose<M: ParametricModel + ?Sized>(&self, model: &M) -> Result<Self> {
        if self.status != Status::ReadyToPropose {
            return Err(Error::State(format!("cannot propose in state {:?}", self.status)));
        }
        let cfg = &self.config;
        let data = io::to_dataset(&self.measurements)?;
        let estimate = wls_estimate(model, &data, &cfg.noise, &cfg.estimation(self.iteration, self.estimate.as_ref()))?;
        let theta = DVector::from_row_slice(&estimate.theta);
        let ctx = TwoStageContext::new(
            model,
            &cfg.noise,
            cfg.criterion,
            cfg.alpha,
            self.actual_design(),
            theta.clone(),
        )?;
        let cache = InfoCache::new(model, &cfg.design_space, &theta, &cfg.noise)?;
        let report = solve_weighted(&ctx, &cfg.design_space, &cache, cfg.epsilon)?;
        let survivors = sieve(&report.design, cfg.min_retained_weight);
        let batch = select_batch(&ctx, &survivors, cfg.max_batch, model, &cfg.noise)?;

        let existing = self.planned_design();
        let distances: Vec<f64> = batch
            .points
            .iter()
            .map(|x| {
                existing
                    .points
                    .iter()
                    .map(|e| cfg.design_space.scaled_distance(x, e))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let outcome = if self.design_size() + batch.len() > cfg.max_experiments {
            Outcome::Budget
        } else if distances.iter().all(|d| *d < cfg.delta) {
            Outcome::Progress
        } else {
            Outcome::Continue
        };

        let mut next = self.clone();
        next.estimate = Some(estimate.clone());
        next.history.push(IterationRecord {
            iteration: self.iteration,
            design_size: self.design_size(),
            estimate,
            report,
            survivors,
            batch: batch.clone(),
            distances,
            outcome,
        });
        next.iteration += 1;
        match outcome {
            Outcome::Budget => {
                next.status = Status::TerminatedBudget;
                next.rejected_proposal = Some(batch);
            }
            Outcome::Progress | Outcome::Continue => {
                next.status = Status::AwaitingMeasurements;
                next.pending = Some(PendingBatch {
                    label: format!("batch{}", self.iteration),
                    points: batch,
                    final_batch: outcome == Outcome::Progress,
                });
            }
        }
        Ok(next)
    }

    /// Stable content hash of the serialized state (FNV-1a over the JSON).
    pub fn state_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("state serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: u32,
        }
        let v: Version = serde_json::from_str(text)?;
        if v.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: v.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_str(text)?)
    }
}

/// Where measurements come from.
pub trait ExperimentSource {
    /// One record per requested point, with `planned` equal to the request.
    fn measure(&mut self, batch: &UnweightedDesign, label: &str) -> Result<Vec<MeasurementRecord>>;
}

/// Noisy evaluations of a model at a hidden true parameter.
pub struct SimulatedSource<M> {
    pub model: M,
    pub truth: DVector<f64>,
    pub noise: NoiseModel,
    rng: ChaCha8Rng,
}

impl<M: ParametricModel> SimulatedSource<M> {
    pub fn new(model: M, truth: DVector<f64>, noise: NoiseModel, seed: u64) -> Self {
        SimulatedSource {
            model,
            truth,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<M: ParametricModel> ExperimentSource for SimulatedSource<M> {
    fn measure(&mut self, batch: &UnweightedDesign, label: &str) -> Result<Vec<MeasurementRecord>> {
        let chol = self.noise.cholesky_factor();
        let sd = self.noise.std_devs();
        batch
            .points
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = self.model.predict(x.coords(), &self.truth).map_err(|e| Error::at(i, e))?;
                let z = DVector::from_fn(f.len(), |_, _| StandardNormal.sample(&mut self.rng));
                let y = f + &chol * z;
                if y.len() != 2 || x.dim() != 2 {
                    return Err(Error::Config("measurement records need 2 inputs and 2 outputs".into()));
                }
                Ok(MeasurementRecord {
                    design_label: label.to_string(),
                    l_planned: x.0[0],
                    l_actual: x.0[0],
                    p_planned: x.0[1],
                    p_actual: x.0[1],
                    v: y[0].clamp(0.0, 1.0),
                    t: y[1],
                    sigma_v: sd[0],
                    sigma_t: sd[1],
                })
            })
            .collect()
    }
}

/// Replays a recorded table: each requested point receives the unused row
/// whose planned point is nearest (falling back to used rows once the table
/// is exhausted).
pub struct ScriptedSource {
    rows: Vec<MeasurementRecord>,
    used: Vec<bool>,
    space: DesignSpace,
}

impl ScriptedSource {
    pub fn new(rows: Vec<MeasurementRecord>, space: DesignSpace) -> Self {
        let used = vec![false; rows.len()];
        ScriptedSource { rows, used, space }
    }
}

impl ExperimentSource for ScriptedSource {
    fn measure(&mut self, batch: &UnweightedDesign, label: &str) -> Result<Vec<MeasurementRecord>> {
        if self.rows.is_empty() {
            return Err(Error::State("scripted source has no rows".into()));
        }
        let mut out = Vec::with_capacity(batch.len());
        for x in &batch.points {
            let nearest = |only_unused: bool| {
                (0..self.rows.len())
                    .filter(|&i| !only_unused || !self.used[i])
                    .map(|i| (self.space.scaled_distance(x, &self.rows[i].planned()), i))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .map(|(_, i)| i)
            };
            let i = nearest(true).or_else(|| nearest(false)).expect("rows are nonempty");
            self.used[i] = true;
            let mut r = self.rows[i].clone();
            r.design_label = label.to_string();
            r.l_planned = x.0[0];
            r.p_planned = x.0[1];
            out.push(r);
        }
        Ok(out)
    }
}

/// Measures the pending batch (if any) and proposes the next one.
pub fn campaign_step<M: ParametricModel + ?Sized, S: ExperimentSource + ?Sized>(
    state: &CampaignState,
    source: &mut S,
    model: &M,
) -> Result<CampaignState> {
    if state.status.is_terminal() {
        return Err(Error::State("campaign has terminated".into()));
    }
    let mut s = state.clone();
    if s.status == Status::AwaitingMeasurements {
        let pending = s.pending.clone().ok_or_else(|| Error::State("no pending batch".into()))?;
        let rows = source.measure(&pending.points, &pending.label)?;
        s = s.record(rows)?;
    }
    if s.status == Status::ReadyToPropose {
        s = s.propose(model)?;
    }
    Ok(s)
}

/// Runs the loop to termination, handing every intermediate state to
/// `persist`.
pub fn run_campaign<M, S>(
    initial: CampaignState,
    source: &mut S,
    model: &M,
    mut persist: impl FnMut(&CampaignState) -> Result<()>,
) -> Result<CampaignState>
where
    M: ParametricModel + ?Sized,
    S: ExperimentSource + ?Sized,
{
    let mut state = initial;
    persist(&state)?;
    while !state.status.is_terminal() {
        state = campaign_step(&state, source, model)?;
        persist(&state)?;
    }
    Ok(state)
}

/// Distance of `x` to the nearest point of `design`.
pub fn distance_to_design(space: &DesignSpace, x: &InputPoint, design: &UnweightedDesign) -> f64 {
    design
        .points
        .iter()
        .map(|e| space.scaled_distance(x, e))
        .fold(f64::INFINITY, f64::min)
}
