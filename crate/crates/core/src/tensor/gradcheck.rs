//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BackwardFault, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Anything owning named tensors, some of which are trainable.
pub trait Parameterized {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Trainable tensors only.
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.named_tensors_mut().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.numel()).sum()
    }

    fn zero_grad(&mut self) {
        self.named_tensors_mut().into_iter().for_each(|(_, t)| t.zero_grad());
    }

    /// Accumulates the tape's gradients into every trainable tensor it saw.
    fn collect_grads(&mut self, tape: &Tape) -> Result<()> {
        for (_, t) in self.named_params_mut() {
            tape.write_grad(t)?;
        }
        Ok(())
    }
}

impl Parameterized for Vec<Tensor> {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.iter().enumerate().map(|(i, t)| (i.to_string(), t)).collect()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.iter_mut().enumerate().map(|(i, t)| (i.to_string(), t)).collect()
    }
}

/// Prefixes child tensor names with `prefix.`.
pub fn prefixed<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Check only this many randomly chosen elements (across all
    /// parameters), drawn with the given seed.
    pub sample: Option<(usize, u64)>,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { tolerance: 1e-4, step: 1e-5, sample: None, fault: None }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckOptions { tolerance, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in self.params.iter().filter(|p| p.checked > 0) {
            writeln!(f, "{:<48} n={:<5} max_rel_err={:.3e}", p.name, p.checked, p.max_rel_error)?;
        }
        write!(
            f,
            "{} max_rel_err={:.3e} tolerance={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance
        )
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<M, F>(model: &mut M, f: &mut F) -> Result<f64>
where
    M: Parameterized + ?Sized,
    F: FnMut(&mut M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(model, &mut tape)?;
    let v = tape.value(out);
    ensure!(v.len() == 1, "grad_check: function must return a scalar");
    if !v[0].is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective evaluated to {}", v[0])));
    }
    Ok(v[0])
}

/// Compares tape gradients of the scalar `f(model)` against central finite
/// differences for every trainable tensor of `model` (or a random subset of
/// elements, see [`GradCheckOptions::sample`]).
pub fn grad_check<M, F>(model: &mut M, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized + ?Sized,
    F: FnMut(&mut M, &mut Tape) -> Result<Var>,
{
    model.zero_grad();
    let mut tape = match opts.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let loss = f(model, &mut tape)?;
    ensure!(tape.value(loss).len() == 1, "grad_check: function must return a scalar");
    if !tape.value(loss)[0].is_finite() {
        return Err(Error::NonFinite("grad_check objective is not finite".into()));
    }
    tape.backward(loss)?;
    model.collect_grads(&tape)?;

    let analytic: Vec<(String, Vec<f64>)> = model
        .named_params_mut()
        .into_iter()
        .map(|(name, t)| {
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            (name, g)
        })
        .collect();

    let mut targets: Vec<(usize, usize)> =
        analytic.iter().enumerate().flat_map(|(p, (_, g))| (0..g.len()).map(move |e| (p, e))).collect();
    if let Some((count, seed)) = opts.sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = sample(&mut rng, targets.len(), count.min(targets.len()));
        let mut chosen: Vec<_> = picked.into_iter().map(|i| targets[i]).collect();
        chosen.sort_unstable();
        targets = chosen;
    }

    let mut params: Vec<ParamCheck> =
        analytic.iter().map(|(name, _)| ParamCheck { name: name.clone(), checked: 0, max_rel_error: 0.0 }).collect();
    let h = opts.step;
    for (p, e) in targets {
        let orig = model.named_params_mut()[p].1.data()[e];
        model.named_params_mut()[p].1.data_mut()[e] = orig + h;
        let plus = eval_scalar(model, &mut f);
        model.named_params_mut()[p].1.data_mut()[e] = orig - h;
        let minus = eval_scalar(model, &mut f);
        model.named_params_mut()[p].1.data_mut()[e] = orig;
        let numeric = (plus? - minus?) / (2.0 * h);
        let err = relative_error(analytic[p].1[e], numeric);
        params[p].checked += 1;
        params[p].max_rel_error = params[p].max_rel_error.max(err);
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { params, max_rel_error, tolerance: opts.tolerance, pass: max_rel_error <= opts.tolerance })
}
