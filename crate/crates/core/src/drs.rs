//! Douglas-Rachford splitting over the encoder/decoder parameters.
//!
//! Each outer iteration computes
//!
//! ```text
//! x = prox_f(u)          task fit, all parameters
//! v = 2x - u
//! y = prox_g(v)          prior alignment, encoder only; decoder copied from x
//! u = u + lambda_r (y - x)
//! ```
//!
//! and the parameters handed to the next task are the last `x`.

use std::cell::Cell;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    adam_step, forward, forward_backward, param_distance_sq, AdamState, Graph, LossModel, ParamVector,
    SegmentVars, Tensor, Var, DECODER, ENCODER,
};
use crate::divergences::{weighted_stability, ArgumentOrder, UNDEFINED_PENALTY};
use crate::error::{Error, Result};
use crate::model::{draw_noise, Model, PriorState, TaskLoss};
use crate::tasks::{BatchSampler, Dataset};

/// Data the prior-alignment step aggregates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignData {
    /// A fresh minibatch per inner step.
    #[default]
    Minibatch,
    /// One fixed subset of the task, drawn once per task.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrsConfig {
    pub gamma: f64,
    pub lambda_r: f64,
    pub lambda_stab: f64,
    pub alpha: f64,
    pub order: ArgumentOrder,
    pub outer_iters: usize,
    pub inner_steps_f: usize,
    pub inner_steps_g: usize,
    pub inner_lr: f64,
    pub batch_size: usize,
    /// Latent samples per example in the training loss.
    pub mc_samples: usize,
    /// Examples in the fixed reference batch used for acceptance checks and diagnostics.
    pub reference_size: usize,
    pub align_data: AlignData,
    pub early_stop: bool,
}

impl Default for DrsConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lambda_r: 0.7,
            lambda_stab: 0.7,
            alpha: 2.0,
            order: ArgumentOrder::Reverse,
            outer_iters: 20,
            inner_steps_f: 50,
            inner_steps_g: 25,
            inner_lr: 1e-3,
            batch_size: 64,
            mc_samples: 1,
            reference_size: 256,
            align_data: AlignData::Minibatch,
            early_stop: true,
        }
    }
}

impl DrsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.lambda_r > 0.0 && self.lambda_r < 2.0) {
            return bad(format!("lambda_r must be in (0, 2), got {}", self.lambda_r));
        }
        if !(self.lambda_stab >= 0.0 && self.lambda_stab.is_finite()) {
            return bad(format!("lambda_stab must be >= 0, got {}", self.lambda_stab));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.outer_iters == 0 || self.inner_steps_f == 0 || self.inner_steps_g == 0 {
            return bad("outer_iters, inner_steps_f and inner_steps_g must be >= 1".into());
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return bad(format!("inner_lr must be > 0, got {}", self.inner_lr));
        }
        if self.batch_size == 0 || self.mc_samples == 0 || self.reference_size == 0 {
            return bad("batch_size, mc_samples and reference_size must be >= 1".into());
        }
        Ok(())
    }
}

/// `2x - u`.
pub fn reflect(x: &ParamVector, u: &ParamVector) -> Result<ParamVector> {
    x.zip_with(u, |a, b| 2.0 * a - b)
}

/// `u + lambda_r (y - x)`.
pub fn relaxed_update(u: &ParamVector, x: &ParamVector, y: &ParamVector, lambda_r: f64) -> Result<ParamVector> {
    u.check_aligned(x)?;
    u.check_aligned(y)?;
    let mut out = u.clone();
    for ((o, a), b) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
        *o += lambda_r * (b - a);
    }
    Ok(out)
}

/// `||x - y||` over all segments.
pub fn residual(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    Ok(param_distance_sq(x, y)?.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrsState {
    pub u: ParamVector,
    pub x: ParamVector,
    pub y: ParamVector,
    pub iter: usize,
    pub residual_history: Vec<f64>,
}

/// One diagnostics row per outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub task_id: usize,
    pub iter: usize,
    pub residual: f64,
    pub f_value: f64,
    pub g_value: f64,
    pub wall_ms: f64,
}

pub fn write_diagnostics_csv(path: impl AsRef<Path>, records: &[IterRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// The two proximal maps of a splitting problem.
pub trait ProxProblem {
    fn prox_f(&mut self, u: &ParamVector) -> Result<ParamVector>;

    /// `x` is the matching plasticity output, for segments `g` does not touch.
    fn prox_g(&mut self, v: &ParamVector, x: &ParamVector) -> Result<ParamVector>;

    /// `(f(x), g(y))` for the diagnostics stream.
    fn values(&mut self, _x: &ParamVector, _y: &ParamVector) -> Result<(f64, f64)> {
        Ok((f64::NAN, f64::NAN))
    }
}

/// Outer-loop settings shared by every [`ProxProblem`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub lambda_r: f64,
    pub iters: usize,
    /// Stop once the residual falls below this.
    pub tolerance: Option<f64>,
    pub task_id: usize,
}

/// Runs up to `iters` DRS iterations from `u_0 = init`; `observe` sees the state after each.
pub fn drs_iterate<P: ProxProblem>(
    problem: &mut P,
    init: &ParamVector,
    settings: LoopSettings,
    mut observe: impl FnMut(&DrsState),
) -> Result<(DrsState, Vec<IterRecord>)> {
    let wrap = |iter: usize| {
        move |e: Error| Error::AtIteration {
            task: settings.task_id,
            iter,
            source: Box::new(e),
        }
    };
    let mut state = DrsState {
        u: init.clone(),
        x: init.clone(),
        y: init.clone(),
        iter: 0,
        residual_history: Vec::new(),
    };
    let mut records = Vec::new();
    for i in 1..=settings.iters {
        let start = Instant::now();
        let x = problem.prox_f(&state.u).map_err(wrap(i))?;
        let v = reflect(&x, &state.u)?;
        let y = problem.prox_g(&v, &x).map_err(wrap(i))?;
        let u = relaxed_update(&state.u, &x, &y, settings.lambda_r)?;
        let res = residual(&x, &y)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let (f_value, g_value) = problem.values(&x, &y).map_err(wrap(i))?;
        state = DrsState {
            u,
            x,
            y,
            iter: i,
            residual_history: std::mem::take(&mut state.residual_history),
        };
        state.residual_history.push(res);
        records.push(IterRecord {
            task_id: settings.task_id,
            iter: i,
            residual: res,
            f_value,
            g_value,
            wall_ms,
        });
        observe(&state);
        if settings.tolerance.is_some_and(|tol| res < tol) {
            break;
        }
    }
    Ok((state, records))
}

/// `f(p) = ½||p - a||²`, `g(p) = ½||p - b||²` with closed-form proxes.
pub struct QuadraticProblem {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: f64,
}

impl QuadraticProblem {
    fn prox(p: &ParamVector, target: &[f64], gamma: f64) -> ParamVector {
        let mut out = p.clone();
        for (o, t) in out.iter_mut().zip(target) {
            *o = (*o + gamma * t) / (1.0 + gamma);
        }
        out
    }

    fn half_dist(p: &ParamVector, target: &[f64]) -> f64 {
        0.5 * p.iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>()
    }
}

impl ProxProblem for QuadraticProblem {
    fn prox_f(&mut self, u: &ParamVector) -> Result<ParamVector> {
        Ok(Self::prox(u, &self.a, self.gamma))
    }

    fn prox_g(&mut self, v: &ParamVector, _x: &ParamVector) -> Result<ParamVector> {
        Ok(Self::prox(v, &self.b, self.gamma))
    }

    fn values(&mut self, x: &ParamVector, y: &ParamVector) -> Result<(f64, f64)> {
        Ok((Self::half_dist(x, &self.a), Self::half_dist(y, &self.b)))
    }
}

/// Exact DRS trajectory on the convex quadratic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTrajectory {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
}

/// Runs `cfg.outer_iters` iterations from `u_0 = 0` without early stopping.
pub fn drs_quadratic_reference(a: &[f64], b: &[f64], cfg: &DrsConfig) -> Result<QuadraticTrajectory> {
    drs_quadratic_from(a, b, &vec![0.0; a.len()], cfg)
}

pub fn drs_quadratic_from(a: &[f64], b: &[f64], u0: &[f64], cfg: &DrsConfig) -> Result<QuadraticTrajectory> {
    if a.len() != b.len() || a.len() != u0.len() || a.is_empty() {
        return Err(Error::ShapeMismatch("quadratic reference vectors".into()));
    }
    cfg.validate()?;
    let mut problem = QuadraticProblem {
        a: a.to_vec(),
        b: b.to_vec(),
        gamma: cfg.gamma,
    };
    let mut traj = QuadraticTrajectory {
        x: vec![],
        y: vec![],
        u: vec![],
        residual: vec![],
    };
    let settings = LoopSettings {
        lambda_r: cfg.lambda_r,
        iters: cfg.outer_iters,
        tolerance: None,
        task_id: 0,
    };
    drs_iterate(&mut problem, &ParamVector::flat(u0.to_vec()), settings, |s| {
        traj.x.push(s.x.to_flat());
        traj.y.push(s.y.to_flat());
        traj.u.push(s.u.to_flat());
        traj.residual.push(*s.residual_history.last().unwrap());
    })?;
    Ok(traj)
}

/// `g(phi) + ||phi - v_phi||² / (2 gamma)` on an encoder-only parameter vector.
pub struct AlignObjective<'a> {
    pub model: &'a Model,
    pub prior: &'a PriorState,
    pub v_phi: Vec<f64>,
    pub lambda_stab: f64,
    pub alpha: f64,
    pub order: ArgumentOrder,
    pub gamma: f64,
    undefined: Cell<usize>,
}

impl<'a> AlignObjective<'a> {
    pub fn new(model: &'a Model, prior: &'a PriorState, v_phi: Vec<f64>, cfg: &DrsConfig) -> Self {
        Self {
            model,
            prior,
            v_phi,
            lambda_stab: cfg.lambda_stab,
            alpha: cfg.alpha,
            order: cfg.order,
            gamma: cfg.gamma,
            undefined: Cell::new(0),
        }
    }

    /// Evaluations at which the divergence was undefined in some dimension.
    pub fn undefined_count(&self) -> usize {
        self.undefined.get()
    }
}

impl LossModel<Tensor> for AlignObjective<'_> {
    fn build(&self, g: &mut Graph, params: &SegmentVars, x: &Tensor) -> Result<Var> {
        let phi = params.get(ENCODER);
        let node = self.model.stability_graph(
            g,
            phi,
            x,
            &self.prior.gaussian,
            self.lambda_stab,
            self.alpha,
            self.order,
        )?;
        if !node.undefined_dims.is_empty() {
            self.undefined.set(self.undefined.get() + 1);
        }
        let anchor = g.constant_row(self.v_phi.clone());
        let diff = g.sub(phi, anchor);
        let sq = g.square(diff);
        let s = g.sum(sq);
        let pen = g.scale(s, 0.5 / self.gamma);
        Ok(g.add(node.value, pen))
    }
}

/// The encoder segment of `p` as a standalone vector.
pub fn encoder_only(p: &ParamVector) -> Result<ParamVector> {
    let phi = p
        .segment(ENCODER)
        .ok_or_else(|| Error::ShapeMismatch("missing encoder segment".into()))?;
    Ok(ParamVector::new(vec![(ENCODER.into(), phi.to_vec())]))
}

fn with_encoder(phi: &ParamVector, decoder_from: &ParamVector) -> Result<ParamVector> {
    let theta = decoder_from
        .segment(DECODER)
        .ok_or_else(|| Error::ShapeMismatch("missing decoder segment".into()))?;
    Ok(ParamVector::encoder_decoder(
        phi.segment(ENCODER).expect("encoder").to_vec(),
        theta.to_vec(),
    ))
}

/// Task-fitting and prior-alignment proxes for one task of a continual stream.
pub struct NeuralProblem<'a> {
    model: &'a Model,
    data: &'a Dataset,
    prior: &'a PriorState,
    cfg: &'a DrsConfig,
    rng: ChaCha8Rng,
    sampler: BatchSampler,
    reference: Dataset,
    /// Alignment-objective evaluations that hit an undefined divergence.
    pub undefined_events: usize,
}

impl<'a> NeuralProblem<'a> {
    pub fn new(model: &'a Model, data: &'a Dataset, prior: &'a PriorState, cfg: &'a DrsConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ref_seed = rng.gen();
        let reference = {
            let mut r = ChaCha8Rng::seed_from_u64(ref_seed);
            let idx = rand::seq::index::sample(&mut r, data.len(), cfg.reference_size.min(data.len())).into_vec();
            data.subset(&idx)
        };
        let sampler = BatchSampler::new(data.len(), cfg.batch_size, rng.gen());
        Ok(Self {
            model,
            data,
            prior,
            cfg,
            rng,
            sampler,
            reference,
            undefined_events: 0,
        })
    }

    pub fn reference(&self) -> &Dataset {
        &self.reference
    }

    fn next_batch(&mut self) -> Dataset {
        self.data.subset(&self.sampler.next_batch())
    }

    fn penalty(w: &ParamVector, anchor: &ParamVector, gamma: f64) -> Result<f64> {
        Ok(param_distance_sq(w, anchor)? / (2.0 * gamma))
    }

    /// Closed-form weighted stability of the reference batch's aggregated posterior.
    pub fn stability_value(&self, params: &ParamVector) -> Result<f64> {
        let phi = params
            .segment(ENCODER)
            .ok_or_else(|| Error::ShapeMismatch("missing encoder segment".into()))?;
        let q = self.model.aggregate_posterior(&self.reference, phi)?;
        match weighted_stability(&q, &self.prior.gaussian, self.cfg.lambda_stab, self.cfg.alpha, self.cfg.order) {
            Ok(v) => Ok(v),
            Err(Error::RenyiUndefined { .. }) => Ok(UNDEFINED_PENALTY),
            Err(e) => Err(e),
        }
    }
}

impl ProxProblem for NeuralProblem<'_> {
    fn prox_f(&mut self, u: &ParamVector) -> Result<ParamVector> {
        let cfg = self.cfg;
        let mut w = u.clone();
        let mut adam = AdamState::new(u, cfg.inner_lr);
        for _ in 0..cfg.inner_steps_f {
            let batch = self.next_batch();
            let (_, grad) = self.model.task_loss_and_grad(&batch, &w, cfg.mc_samples, &mut self.rng)?;
            let pull = w.sub(u)?.scale(1.0 / cfg.gamma);
            let (next, state) = adam_step(&w, &grad.add(&pull)?, &adam)?;
            w = next;
            adam = state;
        }
        // Accept the last iterate only if it does not raise the prox objective
        // on the reference batch (shared noise); otherwise keep u.
        let noise = draw_noise(self.reference.len(), self.model.latent_dim(), cfg.mc_samples, &mut self.rng);
        let loss = TaskLoss::with_noise(self.model, noise);
        let at_u = forward(&loss, u, &self.reference)?;
        let at_w = forward(&loss, &w, &self.reference)? + Self::penalty(&w, u, cfg.gamma)?;
        Ok(if at_w <= at_u { w } else { u.clone() })
    }

    fn prox_g(&mut self, v: &ParamVector, x: &ParamVector) -> Result<ParamVector> {
        let cfg = self.cfg;
        let v_phi = encoder_only(v)?;
        if cfg.lambda_stab == 0.0 {
            return with_encoder(&v_phi, x);
        }
        let objective = AlignObjective::new(self.model, self.prior, v_phi.to_flat(), cfg);
        let mut w = v_phi.clone();
        let mut adam = AdamState::new(&w, cfg.inner_lr);
        for _ in 0..cfg.inner_steps_g {
            let batch = match cfg.align_data {
                AlignData::Minibatch => self.next_batch(),
                AlignData::Frozen => self.reference.clone(),
            };
            let (_, grad) = forward_backward(&objective, &w, batch.features())?;
            let (next, state) = adam_step(&w, &grad, &adam)?;
            w = next;
            adam = state;
        }
        let at_v = forward(&objective, &v_phi, self.reference.features())?;
        let at_w = forward(&objective, &w, self.reference.features())?;
        self.undefined_events += objective.undefined_count();
        let phi = if at_w <= at_v { w } else { v_phi };
        with_encoder(&phi, x)
    }

    fn values(&mut self, x: &ParamVector, y: &ParamVector) -> Result<(f64, f64)> {
        let noise = draw_noise(self.reference.len(), self.model.latent_dim(), 1, &mut self.rng);
        let loss = TaskLoss::with_noise(self.model, noise);
        let f = forward(&loss, x, &self.reference)?;
        Ok((f, self.stability_value(y)?))
    }
}

/// Output of [`drs_solve_task`].
#[derive(Debug, Clone)]
pub struct TaskSolve {
    pub params: ParamVector,
    pub state: DrsState,
    pub records: Vec<IterRecord>,
    pub undefined_events: usize,
}

/// Trains one task: DRS from `init` (the previous task's parameters) against `prior`.
pub fn drs_solve_task(
    model: &Model,
    init: &ParamVector,
    data: &Dataset,
    prior: &PriorState,
    cfg: &DrsConfig,
    seed: u64,
    task_id: usize,
) -> Result<TaskSolve> {
    model.check_params(init)?;
    let mut problem = NeuralProblem::new(model, data, prior, cfg, seed)?;
    let tolerance = cfg.early_stop.then(|| 1e-5 * (init.total_dim() as f64).sqrt());
    let settings = LoopSettings {
        lambda_r: cfg.lambda_r,
        iters: cfg.outer_iters,
        tolerance,
        task_id,
    };
    let (state, records) = drs_iterate(&mut problem, init, settings, |_| {})?;
    if problem.undefined_events > 0 {
        log::warn!(
            "task {task_id}: Renyi divergence undefined in {} alignment evaluations; penalty {UNDEFINED_PENALTY:e} reported",
            problem.undefined_events
        );
    }
    Ok(TaskSolve {
        params: state.x.clone(),
        state,
        records,
        undefined_events: problem.undefined_events,
    })
}

/// Appends diagnostics rows to an open CSV writer target without headers.
pub fn append_diagnostics<W: Write>(w: &mut csv::Writer<W>, records: &[IterRecord]) -> Result<()> {
    for r in records {
        w.serialize(r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, Activation};
    use crate::divergences::DiagGaussian;
    use crate::model::{Aggregation, DecoderConfig, DecoderInput, EncoderConfig, EncoderKind, ModelConfig};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::flat(v.to_vec())
    }

    #[test]
    fn reflection_examples() {
        let u = pv(&[0.3, -2.0]);
        assert_eq!(reflect(&u, &u).unwrap(), u);
        assert_eq!(reflect(&pv(&[1.0]), &pv(&[0.0])).unwrap(), pv(&[2.0]));
        assert!(matches!(reflect(&pv(&[1.0]), &pv(&[0.0, 1.0])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn relaxed_update_examples() {
        let u = pv(&[0.5, 1.5]);
        let x = pv(&[2.0, -1.0]);
        assert_eq!(relaxed_update(&u, &x, &x, 0.7).unwrap(), u);
        assert_eq!(relaxed_update(&pv(&[0.0]), &pv(&[1.0]), &pv(&[3.0]), 1.0).unwrap(), pv(&[2.0]));
    }

    #[test]
    fn residual_examples() {
        let x = pv(&[1.0, 2.0, 3.0]);
        assert_eq!(residual(&x, &x).unwrap(), 0.0);
        assert_eq!(residual(&x, &pv(&[1.0, 3.0, 3.0])).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn reflection_is_an_involution(xs in prop::collection::vec(-1e3..1e3f64, 1..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let us: Vec<f64> = xs.iter().map(|_| rng.gen_range(-1e3..1e3)).collect();
            let (x, u) = (pv(&xs), pv(&us));
            let back = reflect(&x, &reflect(&x, &u).unwrap()).unwrap();
            for (a, b) in back.iter().zip(u.iter()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }

        #[test]
        fn relaxed_update_matches_loop(
            triple in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64), 1..20),
            lambda in 0.01..1.99f64,
        ) {
            let u: Vec<f64> = triple.iter().map(|t| t.0).collect();
            let x: Vec<f64> = triple.iter().map(|t| t.1).collect();
            let y: Vec<f64> = triple.iter().map(|t| t.2).collect();
            let got = relaxed_update(&pv(&u), &pv(&x), &pv(&y), lambda).unwrap().to_flat();
            for i in 0..u.len() {
                prop_assert_eq!(got[i], u[i] + lambda * (y[i] - x[i]));
            }
        }

        #[test]
        fn residual_matches_distance(xs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..30)) {
            let a = pv(&xs.iter().map(|t| t.0).collect::<Vec<_>>());
            let b = pv(&xs.iter().map(|t| t.1).collect::<Vec<_>>());
            prop_assert_eq!(residual(&a, &b).unwrap(), param_distance_sq(&a, &b).unwrap().sqrt());
        }
    }

    fn quad_cfg(gamma: f64, lambda_r: f64, iters: usize) -> DrsConfig {
        DrsConfig {
            gamma,
            lambda_r,
            outer_iters: iters,
            early_stop: false,
            ..Default::default()
        }
    }

    #[test]
    fn quadratic_matches_scalar_recurrence() {
        for (gamma, lambda_r) in [(0.5, 0.7), (1.0, 1.9), (0.1, 0.5)] {
            let (a, b) = (-0.4, 3.1);
            let traj = drs_quadratic_reference(&[a], &[b], &quad_cfg(gamma, lambda_r, 60)).unwrap();
            let mut u = 0.0f64;
            for k in 0..60 {
                let x = (u + gamma * a) / (1.0 + gamma);
                let y = (2.0 * x - u + gamma * b) / (1.0 + gamma);
                u += lambda_r * (y - x);
                assert!((traj.x[k][0] - x).abs() <= 1e-12);
                assert!((traj.y[k][0] - y).abs() <= 1e-12);
                assert!((traj.u[k][0] - u).abs() <= 1e-12);
            }
            assert!((traj.x[59][0] - (a + b) / 2.0).abs() < 1e-6 || gamma == 0.1);
        }
    }

    #[test]
    fn quadratic_examples() {
        let same = drs_quadratic_reference(&[1.5, -2.0], &[1.5, -2.0], &quad_cfg(0.5, 0.7, 100)).unwrap();
        assert!(same.x[99].iter().zip([1.5, -2.0]).all(|(x, t)| (x - t).abs() < 1e-12));
        assert!(same.residual[99] < 1e-12);

        let t = drs_quadratic_reference(&[0.0], &[2.0], &quad_cfg(1.0, 1.0, 200)).unwrap();
        assert!((t.x[199][0] - 1.0).abs() <= 1e-8);

        let fast = drs_quadratic_reference(&[0.0, 4.0], &[2.0, -1.0], &quad_cfg(0.5, 1.9, 400)).unwrap();
        let slow = drs_quadratic_reference(&[0.0, 4.0], &[2.0, -1.0], &quad_cfg(0.5, 0.5, 400)).unwrap();
        for (f, s) in fast.x[399].iter().zip(&slow.x[399]) {
            assert!((f - s).abs() < 1e-9);
        }
        assert!((fast.x[399][0] - 1.0).abs() < 1e-9 && (fast.x[399][1] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn quadratic_residual_is_nonincreasing() {
        for gamma in [0.1, 0.5, 1.0] {
            for lambda_r in [0.5, 1.0, 1.9] {
                let t = drs_quadratic_reference(&[0.0], &[2.0], &quad_cfg(gamma, lambda_r, 200)).unwrap();
                for k in 1..t.residual.len() - 1 {
                    assert!(t.residual[k + 1] <= t.residual[k] * (1.0 + 1e-12) + 1e-300);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(DrsConfig::default().validate().is_ok());
        for bad in [
            DrsConfig { gamma: 0.0, ..Default::default() },
            DrsConfig { lambda_r: 2.0, ..Default::default() },
            DrsConfig { outer_iters: 0, ..Default::default() },
            DrsConfig { alpha: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn toy_model(deterministic: bool) -> Model {
        Model::new(ModelConfig {
            encoder: EncoderConfig {
                input_dim: 4,
                hidden: vec![8],
                latent_dim: 2,
                activation: Activation::Tanh,
                kind: EncoderKind::Mlp,
            },
            decoder: DecoderConfig {
                hidden: vec![8],
                num_classes: 2,
                input: DecoderInput::Concat,
                activation: Activation::Tanh,
            },
            deterministic_latent: deterministic,
            aggregation: Aggregation::Normalized,
        })
        .unwrap()
    }

    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let s = if y == 0 { -1.0 } else { 1.0 };
            rows.push((0..4).map(|_| s + 0.3 * rng.gen_range(-1.0..1.0)).collect());
            ys.push(y);
        }
        Dataset::new(Tensor::from_rows(&rows).unwrap(), ys, 2).unwrap()
    }

    fn small_cfg() -> DrsConfig {
        DrsConfig {
            outer_iters: 3,
            inner_steps_f: 20,
            inner_steps_g: 10,
            inner_lr: 1e-2,
            batch_size: 16,
            reference_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn prox_f_small_gamma_stays_near_u() {
        let m = toy_model(true);
        let data = separable(32, 0);
        let prior = PriorState::initial(2);
        let u = m.init(&mut ChaCha8Rng::seed_from_u64(1));
        let gamma = 1e-4;
        let cfg = DrsConfig { gamma, inner_lr: 1e-5, batch_size: 32, ..small_cfg() };
        let mut p = NeuralProblem::new(&m, &data, &prior, &cfg, 0).unwrap();
        let x = p.prox_f(&u).unwrap();
        let (_, grad) = m.task_loss_and_grad(&data, &u, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let moved = residual(&x, &u).unwrap();
        assert!(moved <= 10.0 * gamma * grad.norm(), "{moved} vs {}", grad.norm());
    }

    #[test]
    fn prox_f_never_raises_the_objective() {
        let m = toy_model(true);
        let data = separable(40, 2);
        let prior = PriorState::initial(2);
        let cfg = DrsConfig { batch_size: 40, reference_size: 40, ..small_cfg() };
        let mut p = NeuralProblem::new(&m, &data, &prior, &cfg, 5).unwrap();
        let u = m.init(&mut ChaCha8Rng::seed_from_u64(3));
        let x = p.prox_f(&u).unwrap();
        let loss = TaskLoss::with_noise(&m, vec![]);
        let at_u = forward(&loss, &u, &data).unwrap();
        let at_x = forward(&loss, &x, &data).unwrap() + param_distance_sq(&x, &u).unwrap() / (2.0 * cfg.gamma);
        assert!(at_x <= at_u);
        assert_ne!(x, u);
    }

    /// `f(p) = ½||p - a||²` driven through the Adam prox path via a flat-parameter model.
    #[test]
    fn adam_prox_of_quadratic_matches_closed_form() {
        let a = [1.0, -2.0, 0.5];
        let u = pv(&[0.0, 0.0, 3.0]);
        let gamma = 0.5;
        let f = |g: &mut Graph, p: &SegmentVars, _: &()| {
            let t = g.constant_row(a.to_vec());
            let d = g.sub(p.first(), t);
            let sq = g.square(d);
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        };
        let mut w = u.clone();
        let mut adam = AdamState::new(&w, 1e-2);
        for k in 0..20000 {
            if k == 10000 {
                adam.lr = 1e-4;
            }
            let (_, gf) = forward_backward(&f, &w, &()).unwrap();
            let grad = gf.add(&w.sub(&u).unwrap().scale(1.0 / gamma)).unwrap();
            let (n, s) = adam_step(&w, &grad, &adam).unwrap();
            w = n;
            adam = s;
        }
        for ((x, ui), ai) in w.iter().zip(u.iter()).zip(a) {
            assert!((x - (ui + gamma * ai) / (1.0 + gamma)).abs() <= 1e-6, "{x}");
        }
    }

    #[test]
    fn prox_g_zero_stability_returns_v_and_copies_decoder() {
        let m = toy_model(false);
        let data = separable(32, 1);
        let prior = PriorState::initial(2);
        let cfg = DrsConfig { lambda_stab: 0.0, ..small_cfg() };
        let mut p = NeuralProblem::new(&m, &data, &prior, &cfg, 0).unwrap();
        let v = m.init(&mut ChaCha8Rng::seed_from_u64(1));
        let x = m.init(&mut ChaCha8Rng::seed_from_u64(2));
        let y = p.prox_g(&v, &x).unwrap();
        assert_eq!(y.segment(ENCODER), v.segment(ENCODER));
        assert_eq!(y.segment(DECODER), x.segment(DECODER));
    }

    fn direct_model() -> Model {
        Model::new(ModelConfig {
            encoder: EncoderConfig { kind: EncoderKind::Direct, input_dim: 1, latent_dim: 1, ..Default::default() },
            decoder: DecoderConfig { hidden: vec![], num_classes: 2, input: DecoderInput::LatentOnly, ..Default::default() },
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn prox_g_at_prior_stays_put() {
        let m = direct_model();
        let data = Dataset::new(Tensor::zeros(4, 1), vec![0, 1, 0, 1], 2).unwrap();
        let prior = PriorState { gaussian: DiagGaussian::new(vec![0.7], vec![(2.0f64 * 0.3).exp()]).unwrap(), task_index: 1 };
        let cfg = small_cfg();
        let mut p = NeuralProblem::new(&m, &data, &prior, &cfg, 0).unwrap();
        let v = ParamVector::encoder_decoder(vec![0.7, 0.3], vec![0.0; m.decoder_params()]);
        let y = p.prox_g(&v, &v).unwrap();
        for (a, b) in y.segment(ENCODER).unwrap().iter().zip([0.7, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_passthrough_every_iteration() {
        let m = toy_model(false);
        let data = separable(48, 4);
        let prior = PriorState::initial(2);
        let cfg = small_cfg();
        let mut p = NeuralProblem::new(&m, &data, &prior, &cfg, 7).unwrap();
        let init = m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let settings = LoopSettings { lambda_r: 0.7, iters: 3, tolerance: None, task_id: 0 };
        let mut checked = 0;
        drs_iterate(&mut p, &init, settings, |s| {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(s.y.segment(DECODER).unwrap()), bits(s.x.segment(DECODER).unwrap()));
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, 3);
    }

    #[test]
    fn single_iteration_without_stability_is_one_prox_f() {
        let m = toy_model(true);
        let data = separable(32, 3);
        let prior = PriorState::initial(2);
        let cfg = DrsConfig { lambda_stab: 0.0, outer_iters: 1, ..small_cfg() };
        let init = m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let solved = drs_solve_task(&m, &init, &data, &prior, &cfg, 11, 0).unwrap();
        let mut p = NeuralProblem::new(&m, &data, &prior, &cfg, 11).unwrap();
        let x1 = p.prox_f(&init).unwrap();
        assert_eq!(solved.params, x1);
        assert_eq!(solved.records.len(), 1);
    }

    #[test]
    fn solve_task_is_deterministic_and_records_diagnostics() {
        let m = toy_model(false);
        let data = separable(48, 8);
        let prior = PriorState::initial(2);
        let cfg = small_cfg();
        let init = m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let a = drs_solve_task(&m, &init, &data, &prior, &cfg, 3, 2).unwrap();
        let b = drs_solve_task(&m, &init, &data, &prior, &cfg, 3, 2).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.state.residual_history.len(), a.state.iter);
        assert!(a.records.iter().all(|r| r.task_id == 2 && r.f_value.is_finite() && r.g_value >= 0.0));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        write_diagnostics_csv(&path, &a.records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("task_id,iter,residual,f_value,g_value,wall_ms\n"));
        assert_eq!(text.lines().count(), a.records.len() + 1);
    }

    #[test]
    fn align_objective_gradient_matches_finite_differences() {
        let m = toy_model(false);
        for seed in 0..3 {
            let data = separable(12, seed);
            let prior = PriorState {
                gaussian: DiagGaussian::new(vec![0.2, -0.1], vec![0.05, 0.08]).unwrap(),
                task_index: 1,
            };
            let params = m.init(&mut ChaCha8Rng::seed_from_u64(seed));
            let phi = encoder_only(&params).unwrap();
            for (alpha, order) in [(2.0, ArgumentOrder::Reverse), (0.5, ArgumentOrder::Reverse), (1.0, ArgumentOrder::Standard)] {
                let cfg = DrsConfig { alpha, order, ..Default::default() };
                let v: Vec<f64> = phi.iter().map(|w| w + 0.05).collect();
                let obj = AlignObjective::new(&m, &prior, v, &cfg);
                let err = finite_diff_check(&obj, &phi, data.features(), 1e-5, seed).unwrap();
                assert!(err <= 1e-4, "seed {seed} alpha {alpha}: {err}");
                assert_eq!(obj.undefined_count(), 0);
            }
        }
    }
}
