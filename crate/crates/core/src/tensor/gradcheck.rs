//! Central finite-difference gradient checking.

use rand::Rng;

use super::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub samples: usize,
    /// Denominator floor for the relative error, so gradients that are
    /// numerically zero compare absolutely.
    pub floor: f64,
}

impl CheckConfig {
    pub const F64: CheckConfig = CheckConfig {
        eps: 1e-5,
        samples: 100,
        floor: 1e-3,
    };

    pub const F32: CheckConfig = CheckConfig {
        eps: 1e-3,
        samples: 100,
        floor: 1e-2,
    };

    pub fn for_scalar<S: Scalar>() -> CheckConfig {
        if S::NAME == "f64" {
            Self::F64
        } else {
            Self::F32
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error seen for one tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    /// Analytic gradient had at least one nonzero entry among the samples.
    pub nonzero: bool,
}

fn sample_coords(numel: usize, samples: usize, rng: &mut impl Rng) -> Vec<usize> {
    if numel <= samples {
        (0..numel).collect()
    } else {
        (0..samples).map(|_| rng.gen_range(0..numel)).collect()
    }
}

fn eval_loss<S: Scalar>(tape: &mut Tape<S>, loss: Var) -> f64 {
    let v = tape.value(loss).data()[0].as_f64();
    tape.clear();
    v
}

/// Checks the gradient of `f(inputs)` with respect to every input tensor.
pub fn check_inputs<S, F>(inputs: &[Tensor<S>], f: F, cfg: CheckConfig, rng: &mut impl Rng) -> Result<Vec<TensorCheck>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    check_inputs_with_tape(inputs, f, cfg, rng, &mut Tape::new())
}

/// As [`check_inputs`] but on a caller-prepared tape (e.g. with an injected fault).
pub fn check_inputs_with_tape<S, F>(
    inputs: &[Tensor<S>],
    f: F,
    cfg: CheckConfig,
    rng: &mut impl Rng,
    tape: &mut Tape<S>,
) -> Result<Vec<TensorCheck>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    tape.clear();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut out = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).expect("leaf gradient").data().to_vec();
        let mut worst = 0.0f64;
        let mut nonzero = false;
        let coords = sample_coords(t.shape().numel(), cfg.samples, rng);
        for &c in &coords {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut p = inputs.to_vec();
                let d = p[i].data_mut();
                d[c] = S::lit(d[c].as_f64() + delta);
                let vars: Vec<Var> = p.into_iter().map(|t| tape.leaf(t)).collect();
                let loss = f(tape, &vars)?;
                Ok(eval_loss(tape, loss))
            };
            let numeric = (probe(cfg.eps)? - probe(-cfg.eps)?) / (2.0 * cfg.eps);
            let a = analytic[c].as_f64();
            nonzero |= a != 0.0;
            worst = worst.max(relative_error(a, numeric, cfg.floor));
        }
        out.push(TensorCheck {
            name: format!("input{i}"),
            max_rel_err: worst,
            coords: coords.len(),
            nonzero,
        });
    }
    Ok(out)
}

/// Checks the gradient of a model loss with respect to every parameter in
/// `store`. `f` must rebuild the forward pass from the store each call.
pub fn check_params<S, F>(
    store: &ParamStore<S>,
    f: F,
    cfg: CheckConfig,
    rng: &mut impl Rng,
    tape: &mut Tape<S>,
) -> Result<Vec<TensorCheck>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &ParamStore<S>) -> Result<Var>,
{
    tape.clear();
    let loss = f(tape, store)?;
    let grads = tape.backward(loss)?;

    let mut probe_store = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for (id, name, t) in store.iter() {
        let analytic: Vec<S> = match grads.param(id) {
            Some(g) => g.data().to_vec(),
            None => vec![S::zero(); t.shape().numel()],
        };
        let mut worst = 0.0f64;
        let mut nonzero = false;
        let coords = sample_coords(t.shape().numel(), cfg.samples, rng);
        for &c in &coords {
            let base = t.data()[c];
            let mut probe = |delta: f64| -> Result<f64> {
                let mut vals = base_values(store, id);
                vals[c] = S::lit(base.as_f64() + delta);
                probe_store.set_values(id, vals)?;
                let loss = f(tape, &probe_store)?;
                Ok(eval_loss(tape, loss))
            };
            let numeric = (probe(cfg.eps)? - probe(-cfg.eps)?) / (2.0 * cfg.eps);
            probe_store.set_values(id, base_values(store, id))?;
            let a = analytic[c].as_f64();
            nonzero |= a != 0.0;
            worst = worst.max(relative_error(a, numeric, cfg.floor));
        }
        out.push(TensorCheck {
            name: name.to_owned(),
            max_rel_err: worst,
            coords: coords.len(),
            nonzero,
        });
    }
    Ok(out)
}

fn base_values<S: Scalar>(store: &ParamStore<S>, id: super::ParamId) -> Vec<S> {
    store.get(id).data().to_vec()
}
