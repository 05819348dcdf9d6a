//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function; it never looks at
//! the tape's backward rules, so it is an independent oracle for them.

use crate::error::Result;
use crate::numcore::{Graph, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Absolute floor below which differences are not judged relatively.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` among
    /// coordinates whose difference exceeds [`ABS_FLOOR`].
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let diff = (analytic - numeric).abs();
        self.max_abs_err = self.max_abs_err.max(diff);
        if diff > ABS_FLOOR {
            let rel = diff / analytic.abs().max(numeric.abs());
            self.max_rel_err = self.max_rel_err.max(rel);
        }
        self.coords_checked += 1;
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.coords_checked += other.coords_checked;
    }
}

/// Checks every coordinate of every input of a scalar function built on a
/// fresh tape.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &f)?;
    let mut report = GradCheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let numeric = numeric_coord(inputs, i, j, h, &f)?;
            report.record(analytic[i].data()[j], numeric);
        }
    }
    Ok(report)
}

/// Like [`check`] but only probes `per_input` randomly chosen coordinates of
/// each input.
pub fn check_sampled<F>(inputs: &[Tensor], h: f64, per_input: usize, rng: &mut Rng, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &f)?;
    let mut report = GradCheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        for _ in 0..per_input.min(input.numel()) {
            let j = rng.below(input.numel());
            let numeric = numeric_coord(inputs, i, j, h, &f)?;
            report.record(analytic[i].data()[j], numeric);
        }
    }
    Ok(report)
}

fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect())
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn numeric_coord<F>(inputs: &[Tensor], i: usize, j: usize, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = inputs.to_vec();
    let x0 = probe[i].data()[j];
    probe[i].data_mut()[j] = x0 + h;
    let plus = eval(&probe, f)?;
    probe[i].data_mut()[j] = x0 - h;
    let minus = eval(&probe, f)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Checks gradients of a scalar built on a [`Graph`] with respect to stored
/// parameters. `per_param` limits the probes per tensor to randomly chosen
/// coordinates; `None` checks every coordinate.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    h: f64,
    per_param: Option<usize>,
    rng: &mut Rng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    let analytic: std::collections::HashMap<ParamId, Tensor> = g.param_grads(&grads).into_iter().collect();
    drop(g);

    let eval_at = |probe: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad(probe);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match per_param {
            None => (0..n).collect(),
            Some(k) => (0..k.min(n)).map(|_| rng.below(n)).collect(),
        };
        for j in coords {
            let mut probe = store.clone();
            let x0 = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = x0 + h;
            let plus = eval_at(&probe)?;
            probe.get_mut(id).data_mut()[j] = x0 - h;
            let minus = eval_at(&probe)?;
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[j]);
            report.record(a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
