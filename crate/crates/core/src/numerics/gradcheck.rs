//! Finite-difference verification of analytic gradients.

use rand::seq::index;
use serde::Serialize;

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;
use crate::rng;

/// Outcome of a [`finite_diff_check`].
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub passed: bool,
    pub probe_count: usize,
    /// `(input index, flat coordinate, analytic, numeric)` at the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Probed coordinates per input tensor (all of them if the tensor is smaller).
    pub probes: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(probes: usize, tolerance: f64) -> Self {
        Self {
            probes,
            tolerance,
            seed: 0,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Compares reverse-mode gradients of `op` against central differences.
///
/// `op` receives the inputs bound as differentiable leaves and returns a
/// node; non-scalar outputs are summed. The numeric derivative uses the
/// fourth-order central stencil `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`
/// and the relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T, F>(
    op_name: &str,
    inputs: &[Tensor<T>],
    options: GradCheckOptions,
    op: F,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (graph, out, vars) = scalar_graph(inputs, &op)?;
    let grads = graph.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    check_analytic(op_name, inputs, &analytic, options, op)
}

/// Like [`finite_diff_check`] but against caller-supplied analytic
/// gradients, one flat vector per input.
pub fn check_analytic<T, F>(
    op_name: &str,
    inputs: &[Tensor<T>],
    analytic: &[Vec<f64>],
    options: GradCheckOptions,
    op: F,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    // Relative steps, widest first. Wide steps limit round-off; narrow ones
    // limit the reach across ReLU kinks.
    let steps: &[f64] = if std::mem::size_of::<T>() >= 8 {
        &[1e-3, 1e-4, 1e-5, 1e-6]
    } else {
        &[1e-2, 3e-3, 1e-3]
    };
    let mut rng = rng::substream(options.seed, "gradcheck");
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut report = GradCheckReport {
        op_name: op_name.to_string(),
        max_relative_error: 0.0,
        passed: true,
        probe_count: 0,
        worst: None,
    };

    for (input_idx, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let coords: Vec<usize> = if numel <= options.probes {
            (0..numel).collect()
        } else {
            index::sample(&mut rng, numel, options.probes).into_vec()
        };
        for coord in coords {
            report.probe_count += 1;
            let a = analytic[input_idx][coord];
            if !a.is_finite() {
                report.passed = false;
                report.max_relative_error = f64::INFINITY;
                report.worst = Some((input_idx, coord, a, f64::NAN));
                continue;
            }
            let x0 = input.data()[coord];
            let scale = x0.as_f64().abs().max(1.0);
            let mut at = |delta: f64| -> Result<f64> {
                work[input_idx].data_mut()[coord] = T::lit(x0.as_f64() + delta);
                let v = scalar_graph(&work, &op).map(|(g, out, _)| g.value(out).data()[0].as_f64());
                work[input_idx].data_mut()[coord] = x0;
                v
            };
            // Returns the estimate and a bound on its floating-point round-off.
            let mut stencil = |h: f64| -> Result<(f64, f64)> {
                let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                let f_max = [p1, m1, p2, m2].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let noise = 4.0 * T::epsilon().as_f64() * f_max / h;
                Ok(((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h), noise))
            };
            // The widest step whose estimate agrees with the next narrower one
            // to within round-off has no kink inside its stencil.
            let mut prev = stencil(steps[0] * scale)?;
            let mut numeric = None;
            for &step in &steps[1..] {
                let next = stencil(step * scale)?;
                if (prev.0 - next.0).abs() <= prev.1 + next.1 {
                    numeric = Some(prev.0);
                    break;
                }
                prev = next;
            }
            let numeric = numeric.unwrap_or(prev.0);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((input_idx, coord, a, numeric));
            }
        }
    }
    if !(report.max_relative_error <= options.tolerance) {
        report.passed = false;
    }
    Ok(report)
}

fn scalar_graph<T, F>(tensors: &[Tensor<T>], op: &F) -> Result<(Graph<T>, Var, Vec<Var>)>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let mut out = op(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        out = g.sum(out)?;
    }
    Ok((g, out, vars))
}
