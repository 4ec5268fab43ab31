//! Run orchestration: configuration, the per-task train/evaluate/propagate
//! loop, single-task baselines, sweeps, and result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, forward_backward, AdamState, Graph, LossModel, ParamVector, SegmentVars, Tensor, Var, ENCODER};
use crate::divergences::{renyi_1d, stability_weights, ArgumentOrder, DiagGaussian};
use crate::drs::{append_diagnostics, drs_solve_task, DrsConfig, IterRecord};
use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, MetricsReport};
use crate::model::{draw_noise, propagate_prior, Checkpoint, Model, ModelConfig, PriorState};
use crate::tasks::{
    load_idx_dir, make_joint_stream, make_split_stream, synth_gaussian_tasks, synth_mixture_dataset, BatchSampler,
    Dataset, LabeledData, ShiftKind, SynthConfig, TaskStream, DATA_DIR_ENV,
};

pub const FAILURE_MARKER: &str = "FAILED";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PROGRESS_FILE: &str = "progress.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Douglas-Rachford splitting with the Rényi alignment term.
    DrsRd,
    /// Adam on the task likelihood alone.
    SgdLh,
    /// Adam on likelihood plus the weighted `KL(q || p)` term.
    SgdKl,
    /// Adam on likelihood plus the weighted Rényi term.
    SgdRd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DrsRd => "drs_rd",
            Method::SgdLh => "sgd_lh",
            Method::SgdKl => "sgd_kl",
            Method::SgdRd => "sgd_rd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// One Gaussian-mixture dataset (for split/shift layouts) or per-task mixtures (coherent layout).
    Synthetic { synth: SynthConfig },
    /// IDX files; `dir` defaults to the dataset cache directory variable.
    Idx {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    Split { n_tasks: usize, classes_per_task: usize },
    Shift { n_tasks: usize, shift: ShiftKind },
    /// Synthetic tasks whose class means share a `coherence` fraction.
    Coherent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub source: DataSource,
    pub layout: Layout,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_train_per_task: Option<usize>,
    #[serde(default)]
    pub max_test_per_task: Option<usize>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                synth: SynthConfig::default(),
            },
            layout: Layout::Split {
                n_tasks: 5,
                classes_per_task: 2,
            },
            seed: 0,
            max_train_per_task: None,
            max_test_per_task: None,
        }
    }
}

impl StreamSpec {
    fn load_source(&self) -> Result<LabeledData> {
        match &self.source {
            DataSource::Synthetic { synth } => synth_mixture_dataset(synth),
            DataSource::Idx { dir } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os(DATA_DIR_ENV)
                        .map(PathBuf::from)
                        .ok_or_else(|| Error::Config(format!("no IDX directory given and {DATA_DIR_ENV} unset")))?,
                };
                load_idx_dir(dir)
            }
        }
    }

    pub fn build(&self) -> Result<TaskStream> {
        let mut stream = match &self.layout {
            Layout::Split { n_tasks, classes_per_task } => {
                make_split_stream(&self.load_source()?, *n_tasks, *classes_per_task, self.seed)?
            }
            Layout::Shift { n_tasks, shift } => make_joint_stream(&self.load_source()?, *n_tasks, *shift, self.seed)?,
            Layout::Coherent => match &self.source {
                DataSource::Synthetic { synth } => synth_gaussian_tasks(synth)?,
                DataSource::Idx { .. } => {
                    return Err(Error::Config("the coherent layout needs a synthetic source".into()))
                }
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_0F_7A5C);
        for task in &mut stream.tasks {
            for (split, limit) in [(&mut task.train, self.max_train_per_task), (&mut task.test, self.max_test_per_task)] {
                if let Some(n) = limit {
                    if split.len() > n {
                        let idx = rand::seq::index::sample(&mut rng, split.len(), n).into_vec();
                        *split = split.subset(&idx);
                    }
                }
            }
            if task.train.is_empty() || task.test.is_empty() {
                return Err(Error::EmptyDataset);
            }
        }
        Ok(stream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub stream: StreamSpec,
    /// `encoder.input_dim` and `decoder.num_classes` are taken from the stream.
    pub model: ModelConfig,
    pub drs: DrsConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub eval_mc_samples: usize,
    /// Block length for interval forgetting.
    pub forgetting_interval: usize,
    /// Also train per-task baselines from scratch and report forward transfer.
    pub baselines: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::DrsRd,
            stream: StreamSpec::default(),
            model: ModelConfig::default(),
            drs: DrsConfig::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs/default"),
            eval_mc_samples: 16,
            forgetting_interval: 20,
            baselines: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.eval_mc_samples == 0 || self.forgetting_interval == 0 {
            return Err(Error::Config("eval_mc_samples and forgetting_interval must be >= 1".into()));
        }
        self.drs.validate()?;
        if self.method != Method::DrsRd {
            let d = DrsConfig::default();
            if self.drs.gamma != d.gamma || self.drs.lambda_r != d.lambda_r || self.drs.inner_steps_g != d.inner_steps_g {
                log::warn!("{}: gamma, lambda_r and inner_steps_g only apply to drs_rd", self.method.name());
            }
        }
        Ok(())
    }

    /// Model configuration with the stream-derived sizes filled in.
    pub fn resolved_model(&self, stream: &TaskStream) -> ModelConfig {
        let mut m = self.model.clone();
        m.encoder.input_dim = stream.input_dim();
        m.decoder.num_classes = stream.num_outputs();
        m
    }

    /// Stability-term settings used by the `sgd_*` methods, or `None` for `sgd_lh`.
    fn sgd_stability(&self) -> Option<(f64, ArgumentOrder)> {
        match self.method {
            Method::SgdLh | Method::DrsRd => None,
            Method::SgdKl => Some((1.0, ArgumentOrder::Standard)),
            Method::SgdRd => Some((self.drs.alpha, self.drs.order)),
        }
    }
}

/// Deterministic seed for a `(run seed, purpose, index)` triple.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(purpose);
    r.set_word_pos(u128::from(index) * 16);
    r.gen()
}

const SEED_INIT: u64 = 1;
const SEED_TRAIN: u64 = 2;
const SEED_EVAL: u64 = 3;

/// Likelihood plus an optional weighted divergence term on one minibatch.
struct JointLoss<'a> {
    model: &'a Model,
    noise: Vec<Tensor>,
    prior: &'a DiagGaussian,
    stability: Option<(f64, f64, ArgumentOrder)>,
}

impl LossModel<Dataset> for JointLoss<'_> {
    fn build(&self, g: &mut Graph, params: &SegmentVars, batch: &Dataset) -> Result<Var> {
        let f = self.model.task_loss_graph(g, params, batch, &self.noise)?;
        match self.stability {
            None => Ok(f),
            Some((lambda, alpha, order)) => {
                let node = self
                    .model
                    .stability_graph(g, params.get(ENCODER), batch.features(), self.prior, lambda, alpha, order)?;
                Ok(g.add(f, node.value))
            }
        }
    }
}

/// `steps` Adam steps on the joint objective.
fn train_sgd(
    model: &Model,
    init: &ParamVector,
    data: &Dataset,
    prior: &PriorState,
    cfg: &RunConfig,
    seed: u64,
) -> Result<ParamVector> {
    let d = &cfg.drs;
    let steps = d.outer_iters * d.inner_steps_f;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = BatchSampler::new(data.len(), d.batch_size, rng.gen());
    let stability = cfg
        .sgd_stability()
        .filter(|_| d.lambda_stab > 0.0)
        .map(|(alpha, order)| (d.lambda_stab, alpha, order));
    let mut w = init.clone();
    let mut adam = AdamState::new(&w, d.inner_lr);
    for step in 0..steps {
        let batch = data.subset(&sampler.next_batch());
        let noise = if model.deterministic() {
            Vec::new()
        } else {
            draw_noise(batch.len(), model.latent_dim(), d.mc_samples, &mut rng)
        };
        let loss = JointLoss {
            model,
            noise,
            prior: &prior.gaussian,
            stability,
        };
        let (_, grad) = forward_backward(&loss, &w, &batch).map_err(|e| Error::AtIteration {
            task: prior.task_index,
            iter: step + 1,
            source: Box::new(e),
        })?;
        let (next, state) = adam_step(&w, &grad, &adam)?;
        w = next;
        adam = state;
    }
    Ok(w)
}

/// Gradient steps one task costs under `cfg` (encoder-only alignment steps excluded).
pub fn steps_per_task(cfg: &RunConfig) -> usize {
    cfg.drs.outer_iters * cfg.drs.inner_steps_f
}

struct Trained {
    params: ParamVector,
    records: Vec<IterRecord>,
    undefined_events: usize,
}

fn train_task(
    model: &Model,
    init: &ParamVector,
    data: &Dataset,
    prior: &PriorState,
    cfg: &RunConfig,
    seed: u64,
    task: usize,
) -> Result<Trained> {
    match cfg.method {
        Method::DrsRd => {
            let s = drs_solve_task(model, init, data, prior, &cfg.drs, seed, task)?;
            Ok(Trained {
                params: s.params,
                records: s.records,
                undefined_events: s.undefined_events,
            })
        }
        _ => Ok(Trained {
            params: train_sgd(model, init, data, prior, cfg, seed)?,
            records: Vec::new(),
            undefined_events: 0,
        }),
    }
}

/// `sum_i D_0.5(q_prev,i || q_next,i)` over latent dimensions.
pub fn transition_divergence(prev: &DiagGaussian, next: &DiagGaussian) -> Result<f64> {
    if prev.dim() != next.dim() {
        return Err(Error::ShapeMismatch(format!("{} vs {} latent dims", prev.dim(), next.dim())));
    }
    (0..prev.dim())
        .map(|i| renyi_1d(prev.mean()[i], prev.var()[i], next.mean()[i], next.var()[i], 0.5, ArgumentOrder::Reverse))
        .sum()
}

/// Everything the task loop has produced so far; persisted after each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    completed: usize,
    rows: Vec<Vec<f64>>,
    bound_divergences: Vec<f64>,
    bound_weight_sums: Vec<f64>,
    residuals: Vec<Vec<f64>>,
    diagnostics: Vec<IterRecord>,
    undefined_events: usize,
    train_ms: Vec<f64>,
    eval_ms: Vec<f64>,
    last_posterior: Option<DiagGaussian>,
}

/// Results of one seed of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub baselines: Option<Vec<f64>>,
    /// Outer-iteration residuals per task (empty for `sgd_*`).
    pub residuals: Vec<Vec<f64>>,
    pub bound_divergences: Vec<f64>,
    pub undefined_events: usize,
    pub train_ms: Vec<f64>,
    pub eval_ms: Vec<f64>,
    pub steps_per_task: usize,
    pub files: Vec<PathBuf>,
}

impl SeedRecord {
    /// Training wall time per gradient step, in milliseconds.
    pub fn ms_per_step(&self) -> f64 {
        self.train_ms.iter().sum::<f64>() / (self.train_ms.len() * self.steps_per_task).max(1) as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub record: Option<SeedRecord>,
    pub error: Option<String>,
    /// True when the failure was numerical rather than a configuration or I/O problem.
    pub numerical: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub outcomes: Vec<SeedOutcome>,
}

impl RunRecord {
    pub fn records(&self) -> impl Iterator<Item = &SeedRecord> {
        self.outcomes.iter().filter_map(|o| o.record.as_ref())
    }

    pub fn failures(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.outcomes.iter().filter(|o| o.error.is_some())
    }

    pub fn mean_acc(&self) -> Option<(f64, f64)> {
        mean_std(&self.records().map(|r| r.metrics.acc).collect::<Vec<_>>())
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((m, var.sqrt()))
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

fn evaluate_row(model: &Model, params: &ParamVector, stream: &TaskStream, t: usize, cfg: &RunConfig, seed: u64) -> Result<Vec<f64>> {
    (0..=t)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_EVAL, ((t as u64) << 32) | j as u64));
            model.accuracy(&stream.tasks[j].test, params, cfg.eval_mc_samples, &mut rng)
        })
        .collect()
}

/// Trains and evaluates one seed through the whole stream, writing artifacts to `dir`.
pub fn run_seed(cfg: &RunConfig, stream: &TaskStream, seed: u64, dir: &Path, resume: bool) -> Result<SeedRecord> {
    fs::create_dir_all(dir)?;
    let marker = dir.join(FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = run_seed_inner(cfg, stream, seed, dir, resume);
    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n"))?;
    }
    result
}

fn run_seed_inner(cfg: &RunConfig, stream: &TaskStream, seed: u64, dir: &Path, resume: bool) -> Result<SeedRecord> {
    let model = Model::new(cfg.resolved_model(stream))?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let progress_path = dir.join(PROGRESS_FILE);

    let (mut params, mut prior, mut progress) = if resume && ck_path.exists() && progress_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        let progress: Progress = serde_json::from_slice(&fs::read(&progress_path)?)?;
        if ck.seed != seed || ck.task_index != progress.completed {
            return Err(Error::Config(format!("checkpoint in {} does not match this run", dir.display())));
        }
        let params = ck.params();
        model.check_params(&params)?;
        (params, ck.prior, progress)
    } else {
        let params = model.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_INIT, 0)));
        let progress = Progress {
            completed: 0,
            rows: vec![],
            bound_divergences: vec![],
            bound_weight_sums: vec![],
            residuals: vec![],
            diagnostics: vec![],
            undefined_events: 0,
            train_ms: vec![],
            eval_ms: vec![],
            last_posterior: None,
        };
        (params, PriorState::initial(model.latent_dim()), progress)
    };

    for t in progress.completed..stream.len() {
        let task = &stream.tasks[t];
        let start = Instant::now();
        let trained = train_task(&model, &params, &task.train, &prior, cfg, derive_seed(seed, SEED_TRAIN, t as u64), t)?;
        progress.train_ms.push(start.elapsed().as_secs_f64() * 1e3);
        params = trained.params;
        progress.residuals.push(trained.records.iter().map(|r| r.residual).collect());
        progress.diagnostics.extend(trained.records);
        progress.undefined_events += trained.undefined_events;

        let start = Instant::now();
        progress.rows.push(evaluate_row(&model, &params, stream, t, cfg, seed)?);
        progress.eval_ms.push(start.elapsed().as_secs_f64() * 1e3);

        let phi = params.segment(ENCODER).expect("encoder segment");
        let posterior = model.aggregate_posterior(&task.train, phi)?;
        if let Some(prev) = &progress.last_posterior {
            progress.bound_divergences.push(transition_divergence(prev, &posterior)?);
            progress.bound_weight_sums.push(stability_weights(prev).sum());
        }
        prior = propagate_prior(&posterior, t + 1);
        progress.last_posterior = Some(posterior);
        progress.completed = t + 1;

        Checkpoint::new(&params, prior.clone(), seed, t + 1)?.save(&ck_path)?;
        let tmp = progress_path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&progress)?)?;
        fs::rename(&tmp, &progress_path)?;
        log::info!("{} seed {seed}: task {}/{} done", cfg.method.name(), t + 1, stream.len());
    }

    let accuracy = AccuracyMatrix::from_rows(progress.rows.clone())?;
    let baselines = if cfg.baselines {
        Some(run_baseline_singles_seed(cfg, stream, seed)?)
    } else {
        None
    };
    // The weights always sum to one, so the bound is 1 / lambda_stab.
    let weights = [1.0];
    let metrics = MetricsReport::compute(
        &accuracy,
        baselines.as_deref(),
        cfg.forgetting_interval,
        &progress.bound_divergences,
        cfg.drs.lambda_stab.max(f64::MIN_POSITIVE),
        &weights,
    )?;
    let acc_path = dir.join(ACCURACY_FILE);
    accuracy.write_csv(&acc_path)?;
    let metrics_path = dir.join(METRICS_FILE);
    metrics.write_json(&metrics_path)?;
    let diag_path = dir.join(DIAGNOSTICS_FILE);
    let mut w = csv::Writer::from_path(&diag_path)?;
    if progress.diagnostics.is_empty() {
        w.write_record(["task_id", "iter", "residual", "f_value", "g_value", "wall_ms"])?;
    }
    append_diagnostics(&mut w, &progress.diagnostics)?;
    w.flush()?;

    Ok(SeedRecord {
        seed,
        accuracy,
        metrics,
        baselines,
        residuals: progress.residuals,
        bound_divergences: progress.bound_divergences,
        undefined_events: progress.undefined_events,
        train_ms: progress.train_ms,
        eval_ms: progress.eval_ms,
        steps_per_task: steps_per_task(cfg),
        files: vec![
            dir.join(CONFIG_FILE),
            acc_path,
            metrics_path,
            diag_path,
            ck_path,
            progress_path,
        ],
    })
}

/// Runs every seed of `cfg` (concurrently) under `cfg.out_dir/seed_<s>`.
pub fn run_continual(cfg: &RunConfig, resume: bool) -> Result<RunRecord> {
    cfg.validate()?;
    let stream = cfg.stream.build()?;
    stream.check_regime()?;
    run_continual_on(cfg, &stream, resume)
}

/// [`run_continual`] on an already-built stream.
pub fn run_continual_on(cfg: &RunConfig, stream: &TaskStream, resume: bool) -> Result<RunRecord> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let outcomes: Vec<SeedOutcome> = cfg
        .seeds
        .par_iter()
        .map(|&seed| match run_seed(cfg, stream, seed, &seed_dir(&cfg.out_dir, seed), resume) {
            Ok(r) => SeedOutcome {
                seed,
                record: Some(r),
                error: None,
                numerical: false,
            },
            Err(e) => {
                log::error!("{} seed {seed} failed: {e}", cfg.method.name());
                SeedOutcome {
                    seed,
                    record: None,
                    numerical: e.is_numerical(),
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let record = RunRecord {
        config: cfg.clone(),
        outcomes,
    };
    fs::write(cfg.out_dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

fn run_baseline_singles_seed(cfg: &RunConfig, stream: &TaskStream, seed: u64) -> Result<Vec<f64>> {
    let model = Model::new(cfg.resolved_model(stream))?;
    (0..stream.len())
        .map(|t| {
            let init = model.init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_INIT, 0)));
            let prior = PriorState::initial(model.latent_dim());
            let task = &stream.tasks[t];
            let trained = train_task(&model, &init, &task.train, &prior, cfg, derive_seed(seed, SEED_TRAIN, t as u64), t)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_EVAL, ((t as u64) << 32) | t as u64));
            model.accuracy(&task.test, &trained.params, cfg.eval_mc_samples, &mut rng)
        })
        .collect()
}

/// Per-task accuracies of fresh models trained on each task alone, one vector per seed.
pub fn run_baseline_singles(cfg: &RunConfig) -> Result<Vec<(u64, Vec<f64>)>> {
    cfg.validate()?;
    let stream = cfg.stream.build()?;
    cfg.seeds
        .par_iter()
        .map(|&seed| Ok((seed, run_baseline_singles_seed(cfg, &stream, seed)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    LambdaStab,
    Gamma,
    LambdaR,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::LambdaStab => "lambda_stab",
            SweepAxis::Gamma => "gamma",
            SweepAxis::LambdaR => "lambda_r",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "lambda_stab" => Ok(SweepAxis::LambdaStab),
            "gamma" => Ok(SweepAxis::Gamma),
            "lambda_r" => Ok(SweepAxis::LambdaR),
            other => Err(Error::Config(format!("unknown sweep axis {other}"))),
        }
    }

    fn apply(self, cfg: &mut DrsConfig, value: f64) {
        match self {
            SweepAxis::Alpha => cfg.alpha = value,
            SweepAxis::LambdaStab => cfg.lambda_stab = value,
            SweepAxis::Gamma => cfg.gamma = value,
            SweepAxis::LambdaR => cfg.lambda_r = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub runs_ok: usize,
    pub runs_failed: usize,
}

/// One run per value (all seeds each); failed runs are recorded and the sweep continues.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<(Vec<RunRecord>, Vec<SweepRow>)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    cfg.validate()?;
    let stream = cfg.stream.build()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for &value in values {
        let mut point = cfg.clone();
        axis.apply(&mut point.drs, value);
        point.out_dir = cfg.out_dir.join(format!("{}_{value}", axis.name()));
        let rec = match point.validate() {
            Ok(()) => run_continual_on(&point, &stream, false)?,
            Err(e) => RunRecord {
                outcomes: point
                    .seeds
                    .iter()
                    .map(|&seed| SeedOutcome {
                        seed,
                        record: None,
                        error: Some(e.to_string()),
                        numerical: false,
                    })
                    .collect(),
                config: point,
            },
        };
        let (mean_acc, std_acc) = rec.mean_acc().unwrap_or((f64::NAN, f64::NAN));
        rows.push(SweepRow {
            value,
            mean_acc,
            std_acc,
            runs_ok: rec.records().count(),
            runs_failed: rec.failures().count(),
        });
        records.push(rec);
    }
    let mut w = csv::Writer::from_path(cfg.out_dir.join("sweep_summary.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok((records, rows))
}

/// Per-task quantities emitted to the long-format plot file.
pub const PLOT_METRICS: [&str; 3] = ["final_accuracy", "diagonal_accuracy", "forgetting"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub method: String,
    pub seed: u64,
    pub task: usize,
    pub metric: String,
    pub value: f64,
}

pub fn plot_rows(records: &[RunRecord]) -> Vec<PlotRow> {
    let mut rows = Vec::new();
    for rec in records {
        for r in rec.records() {
            let a = &r.accuracy;
            let t = a.tasks();
            for j in 0..t {
                let last = a.get(t - 1, j).expect("final row");
                let diag = a.get(j, j).expect("diagonal");
                for (metric, value) in PLOT_METRICS.iter().zip([last, diag, diag - last]) {
                    rows.push(PlotRow {
                        method: rec.config.method.name().into(),
                        seed: r.seed,
                        task: j + 1,
                        metric: (*metric).into(),
                        value,
                    });
                }
            }
        }
    }
    rows
}

/// Writes `method,seed,task,metric,value` rows for every record.
pub fn emit_plotdata(records: &[RunRecord], path: impl AsRef<Path>) -> Result<usize> {
    let rows = plot_rows(records);
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["method", "seed", "task", "metric", "value"])?;
    }
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows.len())
}

/// Loads `run.json` written by [`run_continual`].
pub fn load_run_record(out_dir: impl AsRef<Path>) -> Result<RunRecord> {
    Ok(serde_json::from_slice(&fs::read(out_dir.as_ref().join("run.json"))?)?)
}
