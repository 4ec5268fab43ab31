//! Dense tensors, reverse-mode differentiation, Adam, and gradient checking.

mod adam;
mod graph;
mod mlp;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{Activation, Mlp};
pub use params::{param_distance_sq, ParamVector, Segment, DECODER, ENCODER};
pub use tensor::Tensor;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Graph handles for each segment of a [`ParamVector`], each a `1 x len` leaf.
pub struct SegmentVars {
    vars: Vec<(String, Var)>,
}

impl SegmentVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no parameter segment named {name}"))
    }

    pub fn first(&self) -> Var {
        self.vars[0].1
    }
}

/// A scalar loss built on a [`Graph`] from parameters and a batch.
pub trait LossModel<B: ?Sized> {
    fn build(&self, graph: &mut Graph, params: &SegmentVars, batch: &B) -> Result<Var>;
}

impl<B: ?Sized, F> LossModel<B> for F
where
    F: Fn(&mut Graph, &SegmentVars, &B) -> Result<Var>,
{
    fn build(&self, graph: &mut Graph, params: &SegmentVars, batch: &B) -> Result<Var> {
        self(graph, params, batch)
    }
}

fn load_params(graph: &mut Graph, params: &ParamVector) -> SegmentVars {
    SegmentVars {
        vars: params
            .segments()
            .iter()
            .map(|s| (s.name.clone(), graph.leaf(Tensor::row(s.values.clone()))))
            .collect(),
    }
}

/// Evaluates the loss without computing gradients.
pub fn forward<B: ?Sized>(model: &impl LossModel<B>, params: &ParamVector, batch: &B) -> Result<f64> {
    let mut g = Graph::new();
    let vars = load_params(&mut g, params);
    let loss = model.build(&mut g, &vars, batch)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!("loss = {v}")));
    }
    Ok(v)
}

/// Loss and gradient; the gradient has the same segment layout as `params`.
pub fn forward_backward<B: ?Sized>(
    model: &impl LossModel<B>,
    params: &ParamVector,
    batch: &B,
) -> Result<(f64, ParamVector)> {
    let mut g = Graph::new();
    let vars = load_params(&mut g, params);
    let loss = model.build(&mut g, &vars, batch)?;
    let value = g.value(loss);
    if value.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "loss must be scalar, got {}x{}",
            value.rows(),
            value.cols()
        )));
    }
    let value = value.item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("loss = {value}")));
    }
    let grads = g.backward(loss);
    let mut out = params.zeros_like();
    for (seg, (_, var)) in params.segments().iter().zip(&vars.vars) {
        if let Some(gr) = grads.get(*var) {
            out.segment_mut(&seg.name)
                .expect("segment present")
                .copy_from_slice(gr.data());
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFiniteLoss("non-finite gradient entry".into()));
    }
    Ok((value, out))
}

/// Coordinates checked by [`finite_diff_check`] when the model is larger than this.
pub const FD_MAX_COORDS: usize = 256;

/// Relative-error floor so near-zero gradient entries are compared absolutely.
const FD_REL_FLOOR: f64 = 1e-5;

/// Largest relative error between the analytic gradient and central
/// differences with step `eps`, over all coordinates or a seeded sample of
/// [`FD_MAX_COORDS`] of them.
pub fn finite_diff_check<B: ?Sized>(
    model: &impl LossModel<B>,
    params: &ParamVector,
    batch: &B,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let (_, analytic) = forward_backward(model, params, batch)?;
    let n = params.total_dim();
    let coords: Vec<usize> = if n > FD_MAX_COORDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, n, FD_MAX_COORDS).into_vec();
        c.sort_unstable();
        c
    } else {
        (0..n).collect()
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in coords {
        let orig = params.get(i).expect("index in range");
        probe.set(i, orig + eps);
        let fp = forward(model, &probe, batch)?;
        probe.set(i, orig - eps);
        let fm = forward(model, &probe, batch)?;
        probe.set(i, orig);
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.get(i).expect("index in range");
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn half_norm_sq(g: &mut Graph, p: &SegmentVars, _: &()) -> Result<Var> {
        let sq = g.square(p.first());
        let s = g.sum(sq);
        Ok(g.scale(s, 0.5))
    }

    #[test]
    fn quadratic_loss_and_gradient() {
        let p = ParamVector::flat(vec![3.0, 4.0]);
        let (loss, grads) = forward_backward(&half_norm_sq, &p, &()).unwrap();
        assert_eq!(loss, 12.5);
        assert_eq!(grads.to_flat(), vec![3.0, 4.0]);
        let err = finite_diff_check(&half_norm_sq, &p, &(), 1e-5, 0).unwrap();
        assert!(err <= 1e-8, "quadratic fd error {err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let constant = |g: &mut Graph, _: &SegmentVars, _: &()| Ok(g.leaf(Tensor::scalar(7.0)));
        let p = ParamVector::encoder_decoder(vec![1.0, 2.0], vec![3.0]);
        let (loss, grads) = forward_backward(&constant, &p, &()).unwrap();
        assert_eq!(loss, 7.0);
        assert!(grads.iter().all(|&g| g == 0.0));
        assert!(grads.check_aligned(&p).is_ok());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let bad = |g: &mut Graph, p: &SegmentVars, _: &()| {
            let l = g.ln(p.first());
            Ok(g.sum(l))
        };
        let p = ParamVector::flat(vec![-1.0]);
        assert!(matches!(forward_backward(&bad, &p, &()), Err(Error::NonFiniteLoss(_))));
    }

    struct Mlp2 {
        net: Mlp,
        x: Tensor,
        label: usize,
    }

    fn mlp_fixture(seed: u64, activation: Activation) -> (Mlp2, ParamVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(vec![5, 7, 6, 3], activation);
        let params = ParamVector::flat(net.init(&mut rng).iter().map(|w| w + rng.gen_range(-0.1..0.1)).collect());
        let x = Tensor::row((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (Mlp2 { net, x, label: 1 }, params)
    }

    impl LossModel<()> for Mlp2 {
        fn build(&self, g: &mut Graph, p: &SegmentVars, _: &()) -> Result<Var> {
            let x = g.leaf(self.x.clone());
            let logits = self.net.forward(g, p.first(), x);
            let ls = g.log_softmax(logits);
            let picked = g.pick(ls, &[self.label]);
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0))
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        for seed in 0..3 {
            for act in [Activation::Tanh, Activation::Softplus] {
                let (m, p) = mlp_fixture(seed, act);
                let err = finite_diff_check(&m, &p, &(), 1e-5, seed).unwrap();
                assert!(err <= 1e-4, "seed {seed} {act:?}: {err}");
            }
        }
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // Loss whose recorded gradient is twice the true one: value is p^2/2,
        // but it is built as (2p)^2/8 with the factor sneaked past the tape.
        struct Wrong;
        impl LossModel<()> for Wrong {
            fn build(&self, g: &mut Graph, p: &SegmentVars, _: &()) -> Result<Var> {
                let sq = g.square(p.first());
                let s = g.sum(sq);
                // scale(1.0) on the tape but the leaf below carries a correction
                // that only affects the value, doubling the gradient relative to it.
                let doubled = g.scale(s, 1.0);
                let correction = g.leaf(Tensor::scalar(-0.5 * g.value(s).item()));
                Ok(g.add(doubled, correction))
            }
        }
        let p = ParamVector::flat(vec![0.7, -1.2, 2.0]);
        let err = finite_diff_check(&Wrong, &p, &(), 1e-5, 0).unwrap();
        assert!(err >= 0.1, "fixture error {err}");
    }

    #[test]
    fn large_models_are_subsampled() {
        let p = ParamVector::flat((0..1000).map(|i| i as f64 * 1e-3).collect());
        let err = finite_diff_check(&half_norm_sq, &p, &(), 1e-5, 3).unwrap();
        assert!(err <= 1e-6);
        assert!(finite_diff_check(&half_norm_sq, &p, &(), 0.1, 3).is_err());
    }
}
