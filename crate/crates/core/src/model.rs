//! Gaussian-latent encoder/decoder: amortized diagonal posterior,
//! reparameterized sampling, classification likelihood, dataset-level
//! aggregation, and prior propagation.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    forward, forward_backward, Activation, Graph, LossModel, Mlp, ParamVector, SegmentVars, Tensor, Var, DECODER,
    ENCODER,
};
use crate::divergences::{weighted_stability_graph, ArgumentOrder, DiagGaussian, StabilityNode};
use crate::error::{Error, Result};
use crate::tasks::Dataset;

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;

/// Rows encoded per chunk when summarizing a whole dataset.
const ENCODE_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// MLP from the input to `[mean, log_sigma]`.
    #[default]
    Mlp,
    /// Input-independent: the parameters are `[mean, log_sigma]` themselves.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mlp,
            input_dim: 784,
            hidden: vec![1024, 512],
            latent_dim: 32,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// `concat(x, z)`.
    #[default]
    Concat,
    /// `z` alone.
    LatentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub input: DecoderInput,
    pub activation: Activation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512],
            num_classes: 10,
            input: DecoderInput::Concat,
            activation: Activation::Relu,
        }
    }
}

/// How per-example posteriors combine into one dataset-level Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Precision is the mean of per-example precisions.
    #[default]
    Normalized,
    /// Precision is the sum of per-example precisions.
    Product,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Use `z = mean` instead of sampling.
    pub deterministic_latent: bool,
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            deterministic_latent: false,
            aggregation: Aggregation::Normalized,
        }
    }
}

/// Per-example diagonal posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl LatentPosterior {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    pub fn to_gaussian(&self) -> Result<DiagGaussian> {
        DiagGaussian::new(self.mean.clone(), self.log_sigma.iter().map(|l| (2.0 * l).exp()).collect())
    }
}

/// `z = mean + sigma * eps`, or exactly `mean` in deterministic mode.
pub fn sample_latent<R: Rng>(post: &LatentPosterior, rng: &mut R, deterministic: bool) -> Vec<f64> {
    if deterministic {
        return post.mean.clone();
    }
    post.mean
        .iter()
        .zip(&post.log_sigma)
        .map(|(m, l)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + l.exp() * eps
        })
        .collect()
}

/// Standard-normal noise blocks, one `n x d` tensor per Monte-Carlo sample.
pub fn draw_noise<R: Rng>(n: usize, d: usize, samples: usize, rng: &mut R) -> Vec<Tensor> {
    (0..samples)
        .map(|_| {
            let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::new(vec![n, d], data).expect("noise shape")
        })
        .collect()
}

/// Prior over the latent space for the task about to be learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorState {
    pub gaussian: DiagGaussian,
    pub task_index: usize,
}

impl PriorState {
    pub fn initial(latent_dim: usize) -> Self {
        Self {
            gaussian: DiagGaussian::standard(latent_dim),
            task_index: 0,
        }
    }
}

/// Store a dataset-level posterior as the prior for the next task.
pub fn propagate_prior(posterior: &DiagGaussian, t: usize) -> PriorState {
    PriorState {
        gaussian: posterior.clone(),
        task_index: t,
    }
}

/// Encoder and decoder layouts plus the latent options.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    encoder_net: Option<Mlp>,
    decoder_net: Mlp,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let e = &cfg.encoder;
        let d = &cfg.decoder;
        if e.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if e.hidden.iter().chain(&d.hidden).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if d.num_classes < 2 {
            return Err(Error::Config("decoder needs at least 2 classes".into()));
        }
        if e.input_dim == 0 && (e.kind == EncoderKind::Mlp || d.input == DecoderInput::Concat) {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        let encoder_net = match e.kind {
            EncoderKind::Mlp => {
                let mut sizes = vec![e.input_dim];
                sizes.extend(&e.hidden);
                sizes.push(2 * e.latent_dim);
                Some(Mlp::new(sizes, e.activation))
            }
            EncoderKind::Direct => None,
        };
        let dec_in = match d.input {
            DecoderInput::Concat => e.input_dim + e.latent_dim,
            DecoderInput::LatentOnly => e.latent_dim,
        };
        let mut sizes = vec![dec_in];
        sizes.extend(&d.hidden);
        sizes.push(d.num_classes);
        Ok(Self {
            decoder_net: Mlp::new(sizes, d.activation),
            encoder_net,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.encoder.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.decoder.num_classes
    }

    pub fn deterministic(&self) -> bool {
        self.cfg.deterministic_latent
    }

    pub fn encoder_params(&self) -> usize {
        match &self.encoder_net {
            Some(net) => net.num_params(),
            None => 2 * self.latent_dim(),
        }
    }

    pub fn decoder_params(&self) -> usize {
        self.decoder_net.num_params()
    }

    /// Glorot weights and zero biases; a direct encoder starts at `N(0, I)`.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let enc = match &self.encoder_net {
            Some(net) => net.init(rng),
            None => vec![0.0; 2 * self.latent_dim()],
        };
        ParamVector::encoder_decoder(enc, self.decoder_net.init(rng))
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        let e = params.segment(ENCODER).map(<[f64]>::len);
        let d = params.segment(DECODER).map(<[f64]>::len);
        if e != Some(self.encoder_params()) || d != Some(self.decoder_params()) {
            return Err(Error::ShapeMismatch(format!(
                "parameters ({e:?}, {d:?}) do not fit model ({}, {})",
                self.encoder_params(),
                self.decoder_params()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if (self.encoder_net.is_some() || self.cfg.decoder.input == DecoderInput::Concat)
            && x.cols() != self.cfg.encoder.input_dim {
                return Err(Error::ShapeMismatch(format!(
                    "input has {} features, model expects {}",
                    x.cols(),
                    self.cfg.encoder.input_dim
                )));
            }
        Ok(())
    }

    /// `n x d` mean and clamped log-sigma nodes for the rows of `x`.
    pub fn posterior_graph(&self, g: &mut Graph, phi: Var, x: Var) -> (Var, Var) {
        let d = self.latent_dim();
        let n = g.value(x).rows();
        let (mean, raw) = match &self.encoder_net {
            Some(net) => {
                let out = net.forward(g, phi, x);
                (g.slice_cols(out, 0, d), g.slice_cols(out, d, 2 * d))
            }
            None => {
                let ones = g.leaf(Tensor::filled(n, 1, 1.0));
                let m = g.view(phi, 0, 1, d);
                let l = g.view(phi, d, 1, d);
                (g.matmul(ones, m), g.matmul(ones, l))
            }
        };
        (mean, g.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    }

    /// Dataset-level `(mean, var)` as `1 x d` nodes.
    pub fn aggregate_graph(&self, g: &mut Graph, mean: Var, log_sigma: Var) -> (Var, Var) {
        let n = g.value(mean).rows() as f64;
        let neg2 = g.scale(log_sigma, -2.0);
        let prec = g.exp(neg2);
        let weighted = g.mul(prec, mean);
        let sum_w = g.mean_rows(weighted);
        let mean_prec = g.mean_rows(prec);
        let agg_mean = g.div(sum_w, mean_prec);
        let total_prec = match self.cfg.aggregation {
            Aggregation::Normalized => mean_prec,
            Aggregation::Product => g.scale(mean_prec, n),
        };
        let ln_p = g.ln(total_prec);
        let neg = g.scale(ln_p, -1.0);
        let agg_var = g.exp(neg);
        (agg_mean, agg_var)
    }

    /// Latent codes for every row: `mean + sigma * noise`, or `mean`.
    fn latent_graph(&self, g: &mut Graph, mean: Var, log_sigma: Var, noise: Option<&Tensor>) -> Var {
        match noise {
            Some(eps) if !self.cfg.deterministic_latent => {
                let sigma = g.exp(log_sigma);
                let e = g.leaf(eps.clone());
                let s = g.mul(sigma, e);
                g.add(mean, s)
            }
            _ => mean,
        }
    }

    pub fn logits_graph(&self, g: &mut Graph, theta: Var, x: Var, z: Var) -> Var {
        let input = match self.cfg.decoder.input {
            DecoderInput::Concat => g.concat_cols(x, z),
            DecoderInput::LatentOnly => z,
        };
        self.decoder_net.forward(g, theta, input)
    }

    /// Mean over rows and noise blocks of `-log p(y | x, z)`.
    ///
    /// `noise` holds one `n x d` block per Monte-Carlo sample; in
    /// deterministic mode it is ignored and a single pass with `z = mean` is used.
    pub fn task_loss_graph(&self, g: &mut Graph, params: &SegmentVars, batch: &Dataset, noise: &[Tensor]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.check_input(batch.features())?;
        check_labels(batch.labels(), self.num_classes())?;
        let x = g.leaf(batch.features().clone());
        let (mean, log_sigma) = self.posterior_graph(g, params.get(ENCODER), x);
        let blocks: Vec<Option<&Tensor>> = if self.cfg.deterministic_latent || noise.is_empty() {
            vec![None]
        } else {
            noise.iter().map(Some).collect()
        };
        let mut total: Option<Var> = None;
        for eps in &blocks {
            let z = self.latent_graph(g, mean, log_sigma, *eps);
            let logits = self.logits_graph(g, params.get(DECODER), x, z);
            let ls = g.log_softmax(logits);
            let picked = g.pick(ls, batch.labels());
            let s = g.sum(picked);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
        let scale = -1.0 / (batch.len() * blocks.len()) as f64;
        Ok(g.scale(total.expect("at least one block"), scale))
    }

    /// Weighted stability term of the batch's aggregated posterior against `prior`.
    #[allow(clippy::too_many_arguments)]
    pub fn stability_graph(
        &self,
        g: &mut Graph,
        phi: Var,
        x: &Tensor,
        prior: &DiagGaussian,
        lambda: f64,
        alpha: f64,
        order: ArgumentOrder,
    ) -> Result<StabilityNode> {
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if prior.dim() != self.latent_dim() {
            return Err(Error::ShapeMismatch(format!(
                "prior has {} dims, latent space has {}",
                prior.dim(),
                self.latent_dim()
            )));
        }
        self.check_input(x)?;
        let xv = g.leaf(x.clone());
        let (mean, log_sigma) = self.posterior_graph(g, phi, xv);
        let (m, v) = self.aggregate_graph(g, mean, log_sigma);
        Ok(weighted_stability_graph(g, m, v, prior, lambda, alpha, order))
    }

    /// Posterior for every row of `x`.
    pub fn encode_batch(&self, x: &Tensor, phi: &[f64]) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        if phi.len() != self.encoder_params() {
            return Err(Error::ShapeMismatch(format!(
                "encoder has {} parameters, got {}",
                self.encoder_params(),
                phi.len()
            )));
        }
        let mut g = Graph::new();
        let p = g.leaf(Tensor::row(phi.to_vec()));
        let xv = g.leaf(x.clone());
        let (m, l) = self.posterior_graph(&mut g, p, xv);
        let (m, l) = (g.value(m).clone(), g.value(l).clone());
        if !m.is_finite() || !l.is_finite() {
            return Err(Error::NonFiniteActivation("encoder output".into()));
        }
        Ok((m, l))
    }

    pub fn encode(&self, x: &[f64], phi: &[f64]) -> Result<LatentPosterior> {
        let (m, l) = self.encode_batch(&Tensor::row(x.to_vec()), phi)?;
        Ok(LatentPosterior {
            mean: m.into_data(),
            log_sigma: l.into_data(),
        })
    }

    /// `log p(y | x, z)` for one example.
    pub fn decode_loglik(&self, z: &[f64], x: &[f64], y: usize, theta: &[f64]) -> Result<f64> {
        check_labels(&[y], self.num_classes())?;
        if z.len() != self.latent_dim() || theta.len() != self.decoder_params() {
            return Err(Error::ShapeMismatch("decoder input or parameters".into()));
        }
        let mut g = Graph::new();
        let t = g.leaf(Tensor::row(theta.to_vec()));
        let xv = g.leaf(Tensor::row(x.to_vec()));
        self.check_input(g.value(xv))?;
        let zv = g.leaf(Tensor::row(z.to_vec()));
        let logits = self.logits_graph(&mut g, t, xv, zv);
        let ls = g.log_softmax(logits);
        Ok(g.value(ls).at(0, y))
    }

    /// Monte-Carlo estimate of the batch-averaged negative log-likelihood.
    pub fn task_loss_f<R: Rng>(&self, batch: &Dataset, params: &ParamVector, mc_samples: usize, rng: &mut R) -> Result<f64> {
        let loss = self.task_loss(batch, mc_samples, rng)?;
        forward(&loss, params, batch)
    }

    /// Loss closure with freshly drawn noise, usable with `forward_backward`.
    pub fn task_loss<R: Rng>(&self, batch: &Dataset, mc_samples: usize, rng: &mut R) -> Result<TaskLoss<'_>> {
        if mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        let noise = if self.cfg.deterministic_latent {
            Vec::new()
        } else {
            draw_noise(batch.len(), self.latent_dim(), mc_samples, rng)
        };
        Ok(TaskLoss { model: self, noise })
    }

    pub fn task_loss_and_grad<R: Rng>(
        &self,
        batch: &Dataset,
        params: &ParamVector,
        mc_samples: usize,
        rng: &mut R,
    ) -> Result<(f64, ParamVector)> {
        let loss = self.task_loss(batch, mc_samples, rng)?;
        forward_backward(&loss, params, batch)
    }

    /// Dataset-level posterior of `data` under encoder parameters `phi`.
    pub fn aggregate_posterior(&self, data: &Dataset, phi: &[f64]) -> Result<DiagGaussian> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.latent_dim();
        let mut prec_sum = vec![0.0; d];
        let mut weighted_sum = vec![0.0; d];
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(ENCODE_CHUNK) {
            let part = data.subset(chunk);
            let (m, l) = self.encode_batch(part.features(), phi)?;
            for r in 0..m.rows() {
                for k in 0..d {
                    let p = (-2.0 * l.at(r, k)).exp();
                    prec_sum[k] += p;
                    weighted_sum[k] += p * m.at(r, k);
                }
            }
        }
        let n = data.len() as f64;
        let mean = weighted_sum.iter().zip(&prec_sum).map(|(w, p)| w / p).collect();
        let var = prec_sum
            .iter()
            .map(|p| match self.cfg.aggregation {
                Aggregation::Normalized => n / p,
                Aggregation::Product => 1.0 / p,
            })
            .collect();
        DiagGaussian::new(mean, var)
    }

    /// Class probabilities averaged over `mc_samples` latent draws.
    pub fn predict_proba<R: Rng>(&self, x: &Tensor, params: &ParamVector, mc_samples: usize, rng: &mut R) -> Result<Tensor> {
        self.check_params(params)?;
        self.check_input(x)?;
        let samples = if self.cfg.deterministic_latent { 1 } else { mc_samples.max(1) };
        let noise = if self.cfg.deterministic_latent {
            Vec::new()
        } else {
            draw_noise(x.rows(), self.latent_dim(), samples, rng)
        };
        let mut g = Graph::new();
        let phi = g.leaf(Tensor::row(params.segment(ENCODER).unwrap().to_vec()));
        let theta = g.leaf(Tensor::row(params.segment(DECODER).unwrap().to_vec()));
        let xv = g.leaf(x.clone());
        let (mean, log_sigma) = self.posterior_graph(&mut g, phi, xv);
        let c = self.num_classes();
        let mut probs = Tensor::zeros(x.rows(), c);
        for s in 0..samples {
            let z = self.latent_graph(&mut g, mean, log_sigma, noise.get(s));
            let logits = self.logits_graph(&mut g, theta, xv, z);
            let ls = g.log_softmax(logits);
            for (p, l) in probs.data_mut().iter_mut().zip(g.value(ls).data()) {
                *p += l.exp() / samples as f64;
            }
        }
        if !probs.is_finite() {
            return Err(Error::NonFiniteActivation("class probabilities".into()));
        }
        Ok(probs)
    }

    /// Fraction of rows whose argmax of MC-averaged probabilities matches the label.
    pub fn accuracy<R: Rng>(&self, data: &Dataset, params: &ParamVector, mc_samples: usize, rng: &mut R) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0usize;
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(ENCODE_CHUNK) {
            let part = data.subset(chunk);
            let probs = self.predict_proba(part.features(), params, mc_samples, rng)?;
            for (r, &y) in part.labels().iter().enumerate() {
                let row = probs.row_slice(r);
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc })
                    .0;
                correct += usize::from(best == y);
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::InvalidLabel { label, classes }),
        None => Ok(()),
    }
}

/// Task-fitting loss with its Monte-Carlo noise fixed at construction.
pub struct TaskLoss<'a> {
    model: &'a Model,
    noise: Vec<Tensor>,
}

impl<'a> TaskLoss<'a> {
    pub fn with_noise(model: &'a Model, noise: Vec<Tensor>) -> Self {
        Self { model, noise }
    }
}

impl LossModel<Dataset> for TaskLoss<'_> {
    fn build(&self, graph: &mut Graph, params: &SegmentVars, batch: &Dataset) -> Result<Var> {
        self.model.task_loss_graph(graph, params, batch, &self.noise)
    }
}

/// Everything needed to continue a run after task `task_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub prior: PriorState,
    pub seed: u64,
    pub task_index: usize,
}

impl Checkpoint {
    pub fn new(params: &ParamVector, prior: PriorState, seed: u64, task_index: usize) -> Result<Self> {
        let seg = |name| {
            params
                .segment(name)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing {name} segment")))
        };
        Ok(Self {
            encoder: seg(ENCODER)?,
            decoder: seg(DECODER)?,
            prior,
            seed,
            task_index,
        })
    }

    pub fn params(&self) -> ParamVector {
        ParamVector::encoder_decoder(self.encoder.clone(), self.decoder.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tmp = path.as_ref().with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
