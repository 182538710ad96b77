//! Central finite-difference gradient checking.
//!
//! The harness treats a model as a closure that rebuilds its forward pass on
//! a fresh tape from a [`ParamSet`] and returns the scalar loss node. The
//! analytic gradient comes from one reverse sweep; the numeric gradient from
//! central differences `(f(x+h) - f(x-h)) / 2h` on sampled coordinates.
//!
//! Error metric: per parameter tensor, the L2 norm of the difference between
//! analytic and numeric gradients over the sampled coordinates, divided by
//! the larger of the two norms (floored at 1e-12 so an all-zero gradient
//! compares clean). This is robust to individual near-zero components where
//! a pointwise quotient would blow up.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamSet, Scalar, Tape, Var};

/// Identity funnel pinning the higher-rank lifetime of a loss-builder
/// closure, so call sites can pass plain closures.
pub fn objective<F, B>(build: B) -> B
where
    F: Scalar,
    B: for<'t> Fn(&'t Tape<F>, &ParamSet<F>) -> Var<'t, F>,
{
    build
}

/// Result of a gradient check for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Parameter name.
    pub name: String,
    /// Relative error between analytic and numeric gradients (see module
    /// docs for the metric).
    pub rel_error: f64,
    /// Number of coordinates compared.
    pub coords: usize,
}

/// Compare analytic and central finite-difference gradients for every
/// parameter in `params`, sampling at most `samples` coordinates per tensor
/// (deterministically, from `seed`). Returns one entry per tensor.
pub fn check_gradients<F, B>(
    build: B,
    params: &mut ParamSet<F>,
    step: F,
    samples: usize,
    seed: u64,
) -> Vec<GradCheck>
where
    F: Scalar,
    B: for<'t> Fn(&'t Tape<F>, &ParamSet<F>) -> Var<'t, F>,
{
    // Analytic pass.
    params.zero_grads();
    {
        let tape = Tape::new();
        let loss = build(&tape, params);
        tape.backward(loss, params);
    }
    let analytic: Vec<ndarray::ArrayD<F>> = params
        .ids()
        .map(|id| params.grad(id).clone())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let len = params.value(id).len();
        let take = samples.min(len);
        let coords: Vec<usize> = if take == len {
            (0..len).collect()
        } else {
            sample(&mut rng, len, take).into_vec()
        };
        let mut num = Vec::with_capacity(take);
        let mut ana = Vec::with_capacity(take);
        for &ci in &coords {
            let orig = params.value(id).as_slice().unwrap()[ci];
            let eval = |ps: &mut ParamSet<F>, v: F| -> F {
                ps.value_mut(id).as_slice_mut().unwrap()[ci] = v;
                let tape = Tape::new();
                let loss = build(&tape, ps);
                loss.scalar()
            };
            let fp = eval(params, orig + step);
            let fm = eval(params, orig - step);
            params.value_mut(id).as_slice_mut().unwrap()[ci] = orig;
            num.push((fp - fm) / (F::cast(2.0) * step));
            ana.push(analytic[id.0].as_slice().unwrap()[ci]);
        }
        let mut diff2 = 0.0f64;
        let mut na = 0.0f64;
        let mut nn = 0.0f64;
        for (a, n) in ana.iter().zip(num.iter()) {
            let (af, nf) = (a.as_f64(), n.as_f64());
            diff2 += (af - nf) * (af - nf);
            na += af * af;
            nn += nf * nf;
        }
        let denom = na.sqrt().max(nn.sqrt()).max(1e-12);
        out.push(GradCheck {
            name: params.name(id).to_string(),
            rel_error: diff2.sqrt() / denom,
            coords: take,
        });
    }
    out
}

/// Convenience wrapper: worst relative error over all parameter tensors.
pub fn max_param_rel_error<F, B>(
    build: B,
    params: &mut ParamSet<F>,
    step: F,
    samples: usize,
    seed: u64,
) -> f64
where
    F: Scalar,
    B: for<'t> Fn(&'t Tape<F>, &ParamSet<F>) -> Var<'t, F>,
{
    check_gradients(build, params, step, samples, seed)
        .into_iter()
        .map(|c| c.rel_error)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn quadratic_gradient_checks_to_machine_precision() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let wid = ps.register("w", arr1(&[0.3, -0.7, 1.1]).into_dyn());
        let build = objective(move |tape: &Tape<f64>, ps: &ParamSet<f64>| {
            let w = tape.param(ps, wid);
            w.sqr().mean_all()
        });
        let max_rel = max_param_rel_error(build, &mut ps, 1e-4, 16, 7);
        assert!(max_rel < 1e-9, "rel error {max_rel}");
    }

    #[test]
    fn nonlinear_chain_gradient_checks() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let wid = ps.register("w", arr1(&[0.2, 0.4, -0.3, 0.9]).into_dyn());
        let build = objective(move |tape: &Tape<f64>, ps: &ParamSet<f64>| {
            let w = tape.param(ps, wid);
            w.tanh().sigmoid().sqr().sum_all()
        });
        let max_rel = max_param_rel_error(build, &mut ps, 1e-4, 16, 7);
        assert!(max_rel < 1e-7, "rel error {max_rel}");
    }
}
