//! Orchestration of warm-up, evolution and refinement under one sample
//! budget, with checkpoints, traces and the final report.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{catalog, ConstraintSet, DataStats, Mode};
use crate::datagen::{
    add_noise, load_csv, make_dataset, subsample, DataError, Dataset, NoiseSpec, Split, SplitData, SystemId, SystemSpec,
};
use crate::expr::{evaluate, parse, EvalGuard, Expression, Params, MAX_PARAMS};
use crate::generator::{
    render_hard_rules, EndpointConfig, GenError, Generator, GrammarGenerator, LlmGenerator, PromptContext, PromptKind,
};
use crate::linalg::{least_squares, mean, variance};
use crate::optimizer::{FitConfig, BOUND_CAP, DEFAULT_RETRIES};
use crate::pool::{Candidate, Lineage, Pool, PoolError, SamplingParams, Stage};
use crate::refine::{
    self, fit_batch, profile_residual, refine_round, retrieve_insights, Env, RefineConfig, RefineError,
};
use crate::scoring::{nmse, BudgetState, PaceParams, TemperatureSchedule};
use crate::seeds;

const EVO_TAG: u64 = 0x6576_6f6c;
const RESET_TAG: u64 = 0x7265_7365;
/// Evolution steps in a row that may return nothing before the run aborts.
const MAX_IDLE_STEPS: u64 = 50;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("budget exhausted")]
    BudgetExhausted,
    #[error("generator produced nothing for {0} consecutive evolution steps")]
    Starved(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Grammar,
    Llm,
}

/// Flat run configuration; every field has a default, so a config file
/// only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemId,
    /// Data file for `stress_csv`, or an override for synthetic systems.
    pub data_csv: Option<PathBuf>,
    pub seed: u64,
    pub generator: GeneratorKind,
    pub llm_url: String,
    pub llm_model: String,
    pub llm_api_key_env: String,
    pub llm_temperature: f64,

    pub beta: f64,
    pub alpha: f64,
    pub eta: f64,
    pub base: f64,
    pub tau0: f64,
    pub temperature_period: u64,

    pub lower_bound: f64,
    pub upper_bound: f64,
    pub param_init: f64,
    pub max_iterations: usize,
    pub fit_retries: usize,
    pub evaluate_timeout_s: u64,

    pub num_islands: usize,
    pub max_sample_num: u64,
    pub reset_period: u64,

    pub warmup_num_skeletons: usize,
    pub warmup_per_call: usize,
    pub min_physics_passed_warmup: usize,
    pub max_warmup_repair: usize,
    pub max_repair_rounds: usize,

    pub samples_per_prompt: usize,
    pub functions_per_prompt: usize,

    pub refine_start_ratio: f64,
    pub refine_interval: u64,
    pub refine_num_skeletons: usize,
    pub refine_per_call: usize,
    pub max_refine_repair: usize,
    pub repair_good_examples: usize,
    pub repair_history: usize,

    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub subsample_fraction: f64,
    pub subsample_seed: u64,
    /// Forces a constraint mode; by default noisy runs are statistical.
    pub constraint_mode: Option<Mode>,

    pub output_dir: PathBuf,
    /// Checkpoint every this many samples (0: only at the end).
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: SystemId::Crk,
            data_csv: None,
            seed: 0,
            generator: GeneratorKind::Grammar,
            llm_url: EndpointConfig::default().url,
            llm_model: "gpt-4o-mini".into(),
            llm_api_key_env: "OPENAI_API_KEY".into(),
            llm_temperature: 0.8,
            beta: 0.6,
            alpha: 1.2,
            eta: 1.0,
            base: 60.0,
            tau0: 0.1,
            temperature_period: 30_000,
            lower_bound: 0.0,
            upper_bound: BOUND_CAP,
            param_init: 1.0,
            max_iterations: 500,
            fit_retries: DEFAULT_RETRIES,
            evaluate_timeout_s: 30,
            num_islands: 10,
            max_sample_num: 10_000,
            reset_period: 2_000,
            warmup_num_skeletons: 100,
            warmup_per_call: 5,
            min_physics_passed_warmup: 10,
            max_warmup_repair: 40,
            max_repair_rounds: 3,
            samples_per_prompt: 4,
            functions_per_prompt: 2,
            refine_start_ratio: 0.01,
            refine_interval: 100,
            refine_num_skeletons: 10,
            refine_per_call: 2,
            max_refine_repair: 6,
            repair_good_examples: 3,
            repair_history: 3,
            noise_sigma: 0.0,
            noise_seed: 0,
            subsample_fraction: 1.0,
            subsample_seed: 0,
            constraint_mode: None,
            output_dir: PathBuf::from("run"),
            checkpoint_interval: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pace(&self) -> PaceParams {
        PaceParams { beta: self.beta, alpha: self.alpha, eta: self.eta, base: self.base }
    }

    pub fn fit_config(&self) -> FitConfig {
        let mut f = FitConfig {
            lower: [self.lower_bound; MAX_PARAMS],
            upper: [self.upper_bound; MAX_PARAMS],
            init: [self.param_init; MAX_PARAMS],
            max_iterations: self.max_iterations,
            ..FitConfig::default()
        };
        f.guard.timeout = Duration::from_secs(self.evaluate_timeout_s);
        f
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            num_skeletons: self.refine_num_skeletons,
            per_call: self.refine_per_call,
            max_repair_rounds: self.max_repair_rounds,
            max_refine_repair: self.max_refine_repair,
            good_examples: self.repair_good_examples,
            history: self.repair_history,
            top_k: 3,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.pace().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.fit_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.num_islands == 0 {
            return bad("num_islands must be positive");
        }
        if self.max_sample_num == 0 {
            return bad("max_sample_num must be positive");
        }
        if self.samples_per_prompt == 0 || self.functions_per_prompt == 0 {
            return bad("samples_per_prompt and functions_per_prompt must be positive");
        }
        if self.warmup_per_call == 0 || self.refine_per_call == 0 {
            return bad("per-call counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.refine_start_ratio) {
            return bad("refine_start_ratio must lie in [0, 1]");
        }
        if self.refine_interval == 0 {
            return bad("refine_interval must be positive");
        }
        if self.tau0 <= 0.0 || self.temperature_period == 0 {
            return bad("temperature schedule must be positive");
        }
        if self.system == SystemId::StressCsv && self.data_csv.is_none() {
            return bad("stress_csv needs data_csv");
        }
        Ok(())
    }

    /// Dataset after the optional noise and subsampling steps.
    pub fn dataset(&self) -> Result<Dataset, PipelineError> {
        let spec = SystemSpec::default_for(self.system);
        let mut d = match &self.data_csv {
            Some(p) if self.system == SystemId::StressCsv => {
                let mut s = spec;
                if let crate::datagen::Sampling::StressCsv { path, .. } = &mut s.sampling {
                    *path = p.clone();
                }
                make_dataset(&s)?
            }
            Some(p) => load_csv(p, Some(&spec.schema()))?,
            None => make_dataset(&spec)?,
        };
        if self.noise_sigma > 0.0 {
            d = add_noise(&d, NoiseSpec { sigma: self.noise_sigma, seed: self.noise_seed })?;
        }
        if self.subsample_fraction < 1.0 {
            d = subsample(&d, self.subsample_fraction, self.subsample_seed)?;
        }
        Ok(d)
    }

    fn constraints(&self) -> ConstraintSet {
        let cs = catalog(self.system);
        match self.constraint_mode {
            Some(m) => cs.with_mode(m),
            None if self.noise_sigma > 0.0 => cs.with_mode(Mode::Statistical),
            None => cs,
        }
    }

    fn generator(&self) -> Result<Box<dyn Generator>, PipelineError> {
        Ok(match self.generator {
            GeneratorKind::Grammar => Box::new(GrammarGenerator::new(self.seed)),
            GeneratorKind::Llm => Box::new(LlmGenerator::from_env(EndpointConfig {
                url: self.llm_url.clone(),
                model: self.llm_model.clone(),
                api_key_env: self.llm_api_key_env.clone(),
                temperature: self.llm_temperature,
                ..EndpointConfig::default()
            })?),
        })
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// R^2 of a polynomial fit of `y` on `x` of the given degree.
fn poly_r2(x: &[f64], y: &[f64], degree: usize) -> f64 {
    let n = x.len();
    let my = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sst == 0.0 {
        return 0.0;
    }
    let design = DMatrix::from_fn(n, degree + 1, |i, j| x[i].powi(j as i32));
    match least_squares(&design, &DVector::from_column_slice(y)) {
        Some((_, r)) => 1.0 - r.norm_squared() / sst,
        None => 0.0,
    }
}

/// Correlation and quadratic gain of each input against the target.
pub fn variable_summary(d: &SplitData) -> Vec<(String, f64, f64)> {
    d.names
        .iter()
        .zip(&d.columns)
        .map(|(n, c)| {
            let gain = (poly_r2(c, &d.target, 2) - poly_r2(c, &d.target, 1)).max(0.0);
            (n.clone(), pearson(c, &d.target), gain)
        })
        .collect()
}

/// Plain-text summary of the training data for the warm-up prompt.
pub fn analyze_data(d: &Dataset) -> String {
    let train = d.view(Split::Train);
    let mut s = format!("{} training rows.\n", train.len());
    let stats = |c: &[f64]| {
        let (m, sd) = (mean(c), variance(c).sqrt());
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        format!("min {lo:.4e}, max {hi:.4e}, mean {m:.4e}, std {sd:.4e}")
    };
    for (n, c) in train.names.iter().zip(&train.columns) {
        let _ = writeln!(s, "{n}: {}", stats(c));
    }
    let _ = writeln!(s, "{} (target): {}", d.target().name, stats(&train.target));
    for (n, r, g) in variable_summary(&train) {
        let _ = writeln!(s, "{n} vs {}: Pearson r = {r:.4}, quadratic R^2 gain = {g:.4}", d.target().name);
    }
    let _ = writeln!(s, "sample rows ({}, {}):", train.names.join(", "), d.target().name);
    let rows = train.len().min(5);
    for k in 0..rows {
        let i = if rows > 1 { k * (train.len() - 1) / (rows - 1) } else { 0 };
        let vals: Vec<String> = train.columns.iter().map(|c| format!("{:.4e}", c[i])).collect();
        let _ = writeln!(s, "  {} -> {:.4e}", vals.join(", "), train.target[i]);
    }
    s
}

fn describe_system(id: SystemId) -> (&'static str, &'static str) {
    match id {
        SystemId::Ecoli => (
            "bacterial growth kinetics",
            "Model the growth rate of an E. coli population as a function of population density, substrate concentration, temperature and pH.",
        ),
        SystemId::Crk => (
            "chemical reaction kinetics",
            "Model the rate of change of a reactant concentration as a function of that concentration.",
        ),
        SystemId::Osc1 | SystemId::Osc2 => (
            "nonlinear mechanical oscillators",
            "Model the acceleration of a damped nonlinear oscillator from time, position and velocity.",
        ),
        SystemId::StressCsv => (
            "thermo-mechanical material response",
            "Model the stress of an aluminium alloy as a function of strain and temperature.",
        ),
    }
}

/// NMSE on the in-distribution and out-of-distribution validation splits.
/// A split where the expression cannot be evaluated reports `+inf`; an empty
/// split reports NaN.
pub fn evaluate_splits(expr: &Expression, params: &Params, d: &Dataset) -> (f64, f64) {
    let score = |split| {
        let v = d.view(split);
        if v.is_empty() {
            return f64::NAN;
        }
        match evaluate(expr, &v.bindings(), params, &EvalGuard::default()) {
            Ok(pred) => nmse(&pred, &v.target).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    };
    (score(Split::IdVal), score(Split::OodVal))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample_index: u64,
    pub best_score: f64,
    pub pace_t: f64,
    pub valid_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub warmup: u64,
    pub evolution: u64,
    pub refine: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub system: SystemId,
    pub best_expr: String,
    pub best_params: Vec<f64>,
    pub best_score: f64,
    pub best_valid: bool,
    pub nmse_id: f64,
    pub nmse_ood: f64,
    pub samples: StageCounts,
    pub registered: u64,
    pub insights: usize,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl RunReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "sample_index\tbest_score\tpace_t\tvalid_rate").map_err(io)?;
    for r in rows {
        writeln!(w, "{}\t{:e}\t{}\t{}", r.sample_index, r.best_score, r.pace_t, r.valid_rate).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Resumable run state. Everything needed to continue lives in the pool
/// and its counters, so a checkpoint written between steps restarts the
/// run on the same trajectory.
pub struct Engine {
    pub cfg: RunConfig,
    pub data: Dataset,
    train: SplitData,
    cs: ConstraintSet,
    stats: DataStats,
    base: PromptContext,
    pub pool: Pool,
    pub budget: BudgetState,
    gen: Box<dyn Generator>,
    pub trace: Vec<TraceRow>,
    pub counts: StageCounts,
    steps: u64,
    idle: u64,
    resets: u64,
    next_reset: u64,
    next_refine: u64,
    registered_valid: u64,
    warmed_up: bool,
}

impl Engine {
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        let gen = cfg.generator()?;
        Self::with_generator(cfg, gen)
    }

    pub fn with_generator(cfg: RunConfig, gen: Box<dyn Generator>) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let data = cfg.dataset()?;
        let train = data.view(Split::Train);
        let cs = cfg.constraints();
        let statistical = cs.checks.iter().any(|c| c.mode == Mode::Statistical);
        let stats = if statistical { DataStats::statistical(&data) } else { DataStats::from_dataset(&data) };
        let (domain, problem) = describe_system(cfg.system);
        let mut base = PromptContext::new(PromptKind::Warmup, data.variables().to_vec(), data.target().clone());
        base.domain = domain.into();
        base.problem = problem.into();
        base.hard_rules = render_hard_rules(&cs);
        let refine_start = (cfg.refine_start_ratio * cfg.max_sample_num as f64).ceil() as u64;
        Ok(Engine {
            pool: Pool::new(cfg.num_islands)?,
            budget: BudgetState::new(0, cfg.max_sample_num),
            next_reset: cfg.reset_period,
            next_refine: refine_start.max(1),
            cfg,
            data,
            train,
            cs,
            stats,
            base,
            gen,
            trace: Vec::new(),
            counts: StageCounts::default(),
            steps: 0,
            idle: 0,
            resets: 0,
            registered_valid: 0,
            warmed_up: false,
        })
    }

    /// Restores a run from a checkpoint written by [`Engine::save`].
    pub fn resume(cfg: RunConfig, gen: Box<dyn Generator>, checkpoint: &Path) -> Result<Self, PipelineError> {
        let mut e = Self::with_generator(cfg, gen)?;
        e.pool = Pool::load(checkpoint)?;
        let c = |k: &str| e.pool.counters.get(k).copied().unwrap_or(0);
        e.budget.n_curr = c("n_curr");
        e.counts = StageCounts { warmup: c("warmup"), evolution: c("evolution"), refine: c("refine") };
        e.steps = c("steps");
        e.idle = c("idle");
        e.resets = c("resets");
        e.next_reset = c("next_reset");
        e.next_refine = c("next_refine");
        e.registered_valid = c("registered_valid");
        e.warmed_up = c("warmed_up") == 1;
        let cursor = c("generator_cursor");
        e.gen.set_cursor(cursor);
        Ok(e)
    }

    pub fn save(&mut self, path: &Path) -> Result<(), PipelineError> {
        let kv = [
            ("n_curr", self.budget.n_curr),
            ("warmup", self.counts.warmup),
            ("evolution", self.counts.evolution),
            ("refine", self.counts.refine),
            ("steps", self.steps),
            ("idle", self.idle),
            ("resets", self.resets),
            ("next_reset", self.next_reset),
            ("next_refine", self.next_refine),
            ("registered_valid", self.registered_valid),
            ("warmed_up", self.warmed_up as u64),
            ("generator_cursor", self.gen.cursor()),
        ];
        for (k, v) in kv {
            self.pool.counters.insert(k.to_string(), v);
        }
        self.pool.save(path)?;
        Ok(())
    }

    fn env(&self) -> (FitConfig, RefineConfig) {
        (self.cfg.fit_config(), self.cfg.refine_config())
    }

    fn record(&mut self, c: &Candidate) {
        if c.valid {
            self.registered_valid += 1;
        }
        let best = self.pool.best().map_or(f64::NEG_INFINITY, |b| b.score_mse);
        let best = self.trace.last().map_or(best, |r| r.best_score.max(best));
        self.trace.push(TraceRow {
            sample_index: self.budget.n_curr,
            best_score: best,
            pace_t: self.budget.t(),
            valid_rate: self.registered_valid as f64 / self.pool.total_registered().max(1) as f64,
        });
    }

    /// Hands back the generator, for reuse by [`Engine::resume`].
    pub fn into_generator(self) -> Box<dyn Generator> {
        self.gen
    }

    pub fn warmed_up(&self) -> bool {
        self.warmed_up
    }

    pub fn done(&self) -> bool {
        self.budget.n_curr >= self.budget.n_max
    }

    /// Populates the empty pool; candidates are kept whether or not they
    /// pass the priors, then repaired if too few do.
    pub fn warmup(&mut self) -> Result<(), PipelineError> {
        if self.warmed_up {
            return Ok(());
        }
        let (fit, rcfg) = self.env();
        let env = Env {
            train: &self.train,
            cs: &self.cs,
            stats: &self.stats,
            fit: &fit,
            retries: self.cfg.fit_retries,
            seed: self.cfg.seed,
            base: &self.base,
        };
        let n0 = self.budget.n_curr;
        let mut ctx = env.context(PromptKind::Warmup);
        ctx.analysis = analyze_data(&self.data);
        let target = self.cfg.warmup_num_skeletons;
        let max_calls = 2 * target.div_ceil(self.cfg.warmup_per_call);
        let mut skeletons = Vec::new();
        let mut calls = 0;
        while skeletons.len() < target && calls < max_calls {
            calls += 1;
            ctx.samples_per_prompt = self.cfg.warmup_per_call.min(target - skeletons.len());
            match self.gen.propose(&ctx) {
                Ok(o) => skeletons.extend(o.extracted.into_iter().map(|p| p.expr)),
                Err(GenError::NoValidExpression { .. }) => {}
                Err(e @ (GenError::Transport { .. } | GenError::BadReply(_))) => log::warn!("warm-up call failed: {e}"),
                Err(e) => return Err(e.into()),
            }
        }
        if skeletons.len() < target {
            log::warn!("warm-up produced {} of {target} skeletons", skeletons.len());
        }
        let lineage = Lineage { stage: Stage::Warmup, parents: vec![] };
        let mut kept: Vec<Candidate> =
            fit_batch(&skeletons, &env, &mut self.budget, &lineage)?.into_iter().flatten().collect();

        let mut valid = kept.iter().filter(|c| c.valid).count();
        let mut left = self.cfg.max_warmup_repair;
        let mut queue: Vec<Candidate> = kept.iter().filter(|c| !c.valid).cloned().collect();
        queue.sort_by(|a, b| b.score_mse.total_cmp(&a.score_mse));
        let mut qi = 0;
        while valid < self.cfg.min_physics_passed_warmup
            && left > 0
            && qi < queue.len()
            && self.budget.n_curr < self.budget.n_max
        {
            let failed = queue[qi].clone();
            qi += 1;
            let analysis =
                profile_residual(failed.residual.clone(), &self.train).map(|p| p.to_text()).unwrap_or_default();
            let mut good: Vec<Candidate> = kept.iter().filter(|c| c.valid).cloned().collect();
            good.sort_by(|a, b| b.score_mse.total_cmp(&a.score_mse));
            let mut history = Vec::new();
            let r = refine::repair(
                &failed,
                &failed,
                &analysis,
                None,
                &good,
                &mut history,
                self.gen.as_mut(),
                &env,
                &mut self.budget,
                &rcfg,
                &mut left,
            )?;
            valid += r.valid.len();
            kept.extend(r.valid);
            kept.extend(r.invalid);
        }
        self.counts.warmup += self.budget.n_curr - n0;
        for (i, c) in kept.into_iter().enumerate() {
            let island = i % self.pool.num_islands();
            self.pool.register(c.clone(), island)?;
            self.record(&c);
        }
        self.warmed_up = true;
        log::info!("warm-up: {} candidates, {valid} valid, {} samples", self.pool.len(), self.counts.warmup);
        Ok(())
    }

    /// One evolution iteration: sample exemplars, propose, fit, register.
    pub fn evolve_step(&mut self) -> Result<(), PipelineError> {
        if self.done() {
            return Err(PipelineError::BudgetExhausted);
        }
        let (fit, _) = self.env();
        let sp = SamplingParams {
            k: self.cfg.functions_per_prompt,
            pace: self.cfg.pace(),
            schedule: TemperatureSchedule { tau_init: self.cfg.tau0, period: self.cfg.temperature_period },
        };
        let seed = seeds::derive(self.cfg.seed, EVO_TAG, self.steps);
        self.steps += 1;
        let (island, exemplars) = self.pool.sample_context(self.budget, &sp, seed)?;
        let env = Env {
            train: &self.train,
            cs: &self.cs,
            stats: &self.stats,
            fit: &fit,
            retries: self.cfg.fit_retries,
            seed: self.cfg.seed,
            base: &self.base,
        };
        let mut ctx = env.context(PromptKind::Evolution);
        ctx.samples_per_prompt = self.cfg.samples_per_prompt;
        ctx.exemplars = exemplars
            .iter()
            .map(|c| crate::generator::Exemplar { expr: c.expr.clone(), score: c.score_mse, valid: c.valid })
            .collect();
        let fp = refine::fingerprint(&exemplars.last().expect("k >= 1").residual);
        ctx.insights = retrieve_insights(&self.pool, island, &fp, 3).into_iter().map(|i| i.text.clone()).collect();
        let proposals = match self.gen.propose(&ctx) {
            Ok(o) => o.extracted,
            Err(e @ (GenError::NoValidExpression { .. } | GenError::Transport { .. } | GenError::BadReply(_))) => {
                log::warn!("evolution step {} produced nothing: {e}", self.steps);
                Vec::new()
            }
            Err(e) => return Err(e.into()),
        };
        if proposals.is_empty() {
            self.idle += 1;
            if self.idle >= MAX_IDLE_STEPS {
                return Err(PipelineError::Starved(self.idle));
            }
            return Ok(());
        }
        self.idle = 0;
        let lineage = Lineage { stage: Stage::Evolution, parents: exemplars.iter().map(|c| c.id).collect() };
        let exprs: Vec<Expression> = proposals.into_iter().map(|p| p.expr).collect();
        let n0 = self.budget.n_curr;
        let fitted = fit_batch(&exprs, &env, &mut self.budget, &lineage)?;
        self.counts.evolution += self.budget.n_curr - n0;
        for c in fitted.into_iter().flatten() {
            self.pool.register(c.clone(), island)?;
            self.record(&c);
        }
        Ok(())
    }

    fn maybe_reset(&mut self) {
        if self.cfg.reset_period == 0 {
            return;
        }
        while self.pool.total_registered() >= self.next_reset {
            let seed = seeds::derive(self.cfg.seed, RESET_TAG, self.resets);
            self.pool.reset_weak_islands(seed);
            self.resets += 1;
            self.next_reset += self.cfg.reset_period;
            log::info!("island reset {} at {} registrations", self.resets, self.pool.total_registered());
        }
    }

    fn maybe_refine(&mut self) -> Result<(), PipelineError> {
        if self.budget.n_curr < self.next_refine {
            return Ok(());
        }
        let (fit, rcfg) = self.env();
        let n0 = self.budget.n_curr;
        for island in 0..self.pool.num_islands() {
            if self.done() {
                break;
            }
            let env = Env {
                train: &self.train,
                cs: &self.cs,
                stats: &self.stats,
                fit: &fit,
                retries: self.cfg.fit_retries,
                seed: self.cfg.seed,
                base: &self.base,
            };
            let out = refine_round(&mut self.pool, island, self.gen.as_mut(), &env, &mut self.budget, &rcfg)?;
            for id in out.registered {
                let c = self.pool.candidates().find(|c| c.id == id).cloned().expect("just registered");
                self.record(&c);
            }
        }
        self.counts.refine += self.budget.n_curr - n0;
        let iv = self.cfg.refine_interval;
        self.next_refine = (self.budget.n_curr / iv + 1) * iv;
        Ok(())
    }

    /// Evolution step followed by any due reset and refinement.
    pub fn step(&mut self) -> Result<(), PipelineError> {
        self.evolve_step()?;
        self.maybe_reset();
        if !self.done() {
            self.maybe_refine()?;
        }
        Ok(())
    }

    /// Best valid candidate, or the best overall when none is valid.
    pub fn best(&self) -> Option<&Candidate> {
        self.pool.best_valid().or_else(|| self.pool.best())
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg.output_dir.join("checkpoint.jsonl")
    }

    /// Runs to the end of the budget, writing checkpoints, the trace and
    /// the report under `output_dir`.
    pub fn run(&mut self) -> Result<RunReport, PipelineError> {
        let start = Instant::now();
        std::fs::create_dir_all(&self.cfg.output_dir)
            .map_err(|source| PipelineError::Io { path: self.cfg.output_dir.clone(), source })?;
        let result = self.run_inner();
        let ck = self.checkpoint_path();
        self.save(&ck)?;
        result?;
        let report = self.report(start.elapsed())?;
        write_trace(&self.cfg.output_dir.join("trace.tsv"), &self.trace)?;
        let rp = self.cfg.output_dir.join("report.toml");
        std::fs::write(&rp, report.to_toml()).map_err(|source| PipelineError::Io { path: rp, source })?;
        Ok(report)
    }

    fn run_inner(&mut self) -> Result<(), PipelineError> {
        self.warmup()?;
        let mut last_ck = self.budget.n_curr;
        while !self.done() {
            self.step()?;
            let iv = self.cfg.checkpoint_interval;
            if iv > 0 && self.budget.n_curr / iv > last_ck / iv {
                let ck = self.checkpoint_path();
                self.save(&ck)?;
                last_ck = self.budget.n_curr;
            }
        }
        Ok(())
    }

    /// Report for the current pool; NMSE is recomputed from the serialized
    /// best expression.
    pub fn report(&self, elapsed: Duration) -> Result<RunReport, PipelineError> {
        let best = self.best().ok_or(PoolError::Empty)?;
        let text = best.expr.serialize();
        let expr =
            parse(&text).map_err(|e| PipelineError::Config(format!("best expression does not re-parse: {e}")))?;
        let (nmse_id, nmse_ood) = evaluate_splits(&expr, &best.params, &self.data);
        let used = expr.params_used();
        Ok(RunReport {
            system: self.cfg.system,
            best_expr: text,
            best_params: (0..MAX_PARAMS).filter(|i| used.contains(i)).map(|i| best.params[i]).collect(),
            best_score: best.score_mse,
            best_valid: best.valid,
            nmse_id,
            nmse_ood,
            samples: self.counts.clone(),
            registered: self.pool.total_registered(),
            insights: self.pool.insights.len(),
            wall_time_s: elapsed.as_secs_f64(),
            trace: self.trace.clone(),
        })
    }
}

/// Builds and runs an engine from `cfg`.
pub fn run(cfg: RunConfig) -> Result<RunReport, PipelineError> {
    Engine::new(cfg)?.run()
}
