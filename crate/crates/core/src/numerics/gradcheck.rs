//! Finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward closure, so it is an
//! oracle independent of every backward rule.

use rand::Rng;

use super::nn::{Ctx, Mode, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(input, flat index, analytic, numeric)` for every probed coordinate.
    pub probes: Vec<(usize, usize, f64, f64)>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over the probes.
    pub rel_error: f64,
    /// Worst per-coordinate `|a − n| / max(|a|, |n|, floor)`.
    pub max_coord_error: f64,
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`. At most `max_probes` coordinates per input are
/// checked (chosen with `rng` when the input is larger).
pub fn check_gradients<F, R>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    max_probes: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    R: Rng + ?Sized,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = loss.backward()?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut probes = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            (0..max_probes).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            probes.push((i, j, analytic[i].data()[j], numeric));
        }
    }

    Ok(GradCheckReport::from_probes(probes))
}

/// Like [`check_gradients`], but differentiates with respect to the
/// trainable entries of `store` as bound through a [`Ctx`] in `mode`.
/// Probe indices refer to `ParamId::index()`.
pub fn check_param_gradients<F, R>(
    store: &ParamStore,
    mode: Mode,
    f: F,
    h: f64,
    max_probes: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>>,
    R: Rng + ?Sized,
{
    let analytic = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, mode).with_grad(true);
        let grads = f(&ctx)?.backward()?;
        ctx.param_grads(&grads)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, s, mode).with_grad(false);
        f(&ctx)?.value().item()
    };

    let mut probes = Vec::new();
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            (0..max_probes).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            probes.push((id.index(), j, a, (plus - minus) / (2.0 * h)));
        }
    }
    Ok(GradCheckReport::from_probes(probes))
}

impl GradCheckReport {
    fn from_probes(probes: Vec<(usize, usize, f64, f64)>) -> Self {
        let floor = 1e-8;
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        let mut max_coord_error: f64 = 0.0;
        for &(_, _, a, n) in &probes {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            max_coord_error = max_coord_error.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
        let rel_error = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor);
        GradCheckReport {
            probes,
            rel_error,
            max_coord_error,
        }
    }
}
