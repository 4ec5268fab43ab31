//! Quick oracle and property checks for `drscl verify`.

use std::time::Instant;

use drscl_core::diffcore::{finite_diff_check, Activation, Tensor};
use drscl_core::divergences::{kl_1d, renyi_1d, renyi_quadrature_oracle, renyi_validity_ordered, ArgumentOrder, DiagGaussian};
use drscl_core::drs::{drs_quadratic_reference, encoder_only, AlignObjective, DrsConfig};
use drscl_core::metrics::{bwt, forgetting, AccuracyMatrix};
use drscl_core::model::{DecoderConfig, EncoderConfig, Model, ModelConfig, PriorState};
use drscl_core::tasks::Dataset;
use drscl_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<(bool, String), Error>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Orders sampled by the randomized checks.
pub const ALPHAS: [f64; 5] = [0.3, 0.5, 1.5, 2.0, 2.5];

/// Random `(mean, var)` pair with mean in [-5, 5] and variance in [0.1, 10].
pub fn random_gaussian(rng: &mut impl Rng) -> (f64, f64) {
    (rng.gen_range(-5.0..=5.0), rng.gen_range(0.1..=10.0))
}

/// Quadrature with the grid widened until its tails are negligible.
pub fn adaptive_quadrature(q: (f64, f64), p: (f64, f64), alpha: f64, order: ArgumentOrder) -> Result<f64, Error> {
    let (mut halfwidth, mut points) = (40.0, 40001);
    loop {
        match renyi_quadrature_oracle(q, p, alpha, halfwidth, points, order) {
            Err(Error::GridTooNarrow(_)) if halfwidth < 1e5 => {
                halfwidth *= 4.0;
                points = 4 * points - 3;
            }
            other => return other,
        }
    }
}

/// Closed form against quadrature on `n` random valid cases; returns the max deviation.
pub fn divergence_oracle(n: usize, seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < n {
        let (q, p) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        let alpha = ALPHAS[rng.gen_range(0..ALPHAS.len())];
        let order = if rng.gen_bool(0.5) { ArgumentOrder::Reverse } else { ArgumentOrder::Standard };
        if !renyi_validity_ordered(q.1, p.1, alpha, order) {
            continue;
        }
        let closed = renyi_1d(q.0, q.1, p.0, p.1, alpha, order)?;
        worst = worst.max((closed - adaptive_quadrature(q, p, alpha, order)?).abs());
        done += 1;
    }
    Ok(worst)
}

/// Rényi at `1 +/- 1e-3` against the matching KL branch; returns the max deviation.
pub fn kl_limit(n: usize, seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let ((qm, qv), (pm, pv)) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        for order in [ArgumentOrder::Reverse, ArgumentOrder::Standard] {
            let kl_branch = match order {
                ArgumentOrder::Reverse => kl_1d(pm, pv, qm, qv)?,
                ArgumentOrder::Standard => kl_1d(qm, qv, pm, pv)?,
            };
            for a in [1.0 - 1e-3, 1.0 + 1e-3] {
                if renyi_validity_ordered(qv, pv, a, order) {
                    worst = worst.max((renyi_1d(qm, qv, pm, pv, a, order)? - kl_branch).abs());
                }
            }
        }
    }
    Ok(worst)
}

fn tiny_model() -> Result<Model, Error> {
    Model::new(ModelConfig {
        encoder: EncoderConfig {
            input_dim: 5,
            hidden: vec![7],
            latent_dim: 3,
            activation: Activation::Tanh,
            ..Default::default()
        },
        decoder: DecoderConfig {
            hidden: vec![6],
            num_classes: 3,
            activation: Activation::Tanh,
            ..Default::default()
        },
        ..Default::default()
    })
}

fn tiny_batch(seed: u64, n: usize) -> Result<Dataset, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Dataset::new(Tensor::new(vec![n, 5], x)?, (0..n).map(|i| i % 3).collect(), 3)
}

/// Worst finite-difference error over the task loss and the alignment objective on seeds 0..3.
pub fn gradient_checks() -> Result<f64, Error> {
    let model = tiny_model()?;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let params = model.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let data = tiny_batch(seed, 8)?;
        let loss = model.task_loss(&data, 2, &mut ChaCha8Rng::seed_from_u64(seed + 100))?;
        worst = worst.max(finite_diff_check(&loss, &params, &data, 1e-5, seed)?);

        let prior = PriorState {
            gaussian: DiagGaussian::new(vec![0.1, -0.2, 0.05], vec![0.05, 0.08, 0.06])?,
            task_index: 1,
        };
        let phi = encoder_only(&params)?;
        let v: Vec<f64> = phi.iter().map(|w| w + 0.03).collect();
        let obj = AlignObjective::new(&model, &prior, v, &DrsConfig::default());
        worst = worst.max(finite_diff_check(&obj, &phi, data.features(), 1e-5, seed)?);
    }
    Ok(worst)
}

/// Quadratic DRS: worst final error to `(a+b)/2` and whether residuals never increase after iteration 1.
pub fn quadratic_oracle() -> Result<(f64, bool), Error> {
    let (a, b) = (vec![0.0, -1.0, 3.0], vec![2.0, 1.0, -0.5]);
    let target: Vec<f64> = a.iter().zip(&b).map(|(a, b)| (a + b) / 2.0).collect();
    let mut worst = 0.0f64;
    let mut monotone = true;
    for gamma in [0.1, 0.5, 1.0] {
        for lambda_r in [0.5, 1.0, 1.9] {
            let cfg = DrsConfig {
                gamma,
                lambda_r,
                outer_iters: 200,
                early_stop: false,
                ..Default::default()
            };
            let traj = drs_quadratic_reference(&a, &b, &cfg)?;
            let x = traj.x.last().expect("200 iterations");
            let err = x.iter().zip(&target).map(|(x, t)| (x - t).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(err);
            monotone &= traj.residual.windows(2).skip(1).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
        }
    }
    Ok((worst, monotone))
}

/// Number of random matrices where `bwt != -mean(forgetting)` exactly.
pub fn metric_algebra(n: usize, seed: u64) -> Result<usize, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..n {
        let t = rng.gen_range(2..12);
        let rows = (0..t).map(|i| (0..=i).map(|_| rng.gen::<f64>()).collect()).collect();
        let a = AccuracyMatrix::from_rows(rows)?;
        let f = forgetting(&a)?;
        if bwt(&a)? != -(f.iter().sum::<f64>() / f.len() as f64) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

pub fn run_all() -> Vec<Check> {
    let timed = |f: &dyn Fn() -> Result<(bool, String), Error>| {
        let start = Instant::now();
        f().map(|(ok, d)| (ok, format!("{d} ({:.2}s)", start.elapsed().as_secs_f64())))
    };
    vec![
        check(
            "divergence oracle",
            timed(&|| divergence_oracle(1000, 0).map(|w| (w <= 1e-6, format!("max |closed - quadrature| = {w:.3e}")))),
        ),
        check(
            "KL limit",
            timed(&|| kl_limit(100, 1).map(|w| (w <= 1e-3, format!("max |D_(1+-1e-3) - KL| = {w:.3e}")))),
        ),
        check(
            "gradient checks",
            timed(&|| gradient_checks().map(|w| (w <= 1e-4, format!("max finite-difference error = {w:.3e}")))),
        ),
        check(
            "quadratic DRS",
            timed(&|| {
                quadratic_oracle().map(|(w, mono)| {
                    (w <= 1e-8 && mono, format!("max error after 200 iterations = {w:.3e}, residual monotone = {mono}"))
                })
            }),
        ),
        check(
            "metric algebra",
            timed(&|| metric_algebra(1000, 2).map(|m| (m == 0, format!("{m} mismatches in 1000 matrices")))),
        ),
    ]
}
