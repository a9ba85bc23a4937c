//! Central finite-difference checks of graph gradients.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterSet;
use crate::rng::RandomSource;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// Coordinates skipped because the loss is not smooth within ±ε there.
    pub kinks_skipped: usize,
    /// Checked coordinates large enough that the relative bound, not the
    /// absolute floor, decided them.
    pub resolved: usize,
    /// `(tensor, flat index, analytic, numeric)` for every failing coordinate.
    pub worst: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Options for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub coordinates: usize,
    pub eps: f32,
    pub rel_tol: f64,
    /// Differences below this are accepted regardless of relative error;
    /// covers single-precision rounding in the numeric estimate.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 100,
            eps: 1e-3,
            rel_tol: 1e-2,
            abs_floor: 1e-4,
        }
    }
}

/// Compares backward against `(L(w+ε) − L(w−ε)) / 2ε` on randomly sampled
/// coordinates. A coordinate whose one-sided differences disagree sits on a
/// kink (a ReLU switching inside ±ε) and is replaced by another sample.
/// `loss` must build a deterministic scalar from the bound set.
pub fn check_gradients<F>(
    params: &ParameterSet,
    loss: F,
    rng: &mut RandomSource,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParameterSet) -> Result<Var>,
{
    let total = params.param_count();
    if total == 0 {
        return Err(invalid!("no parameters to check"));
    }
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    let grads = g.backward(l)?;
    drop(g);
    let mut acc = params.clone();
    acc.zero_grads();
    acc.accumulate(&grads)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, p)?;
        Ok(g.scalar(l) as f64)
    };

    let mut offsets = Vec::with_capacity(params.len());
    let mut running = 0;
    for i in 0..params.len() {
        offsets.push(running);
        running += params.value_at(i).len();
    }
    let base = eval(params)?;
    let picks = rng.sample_without_replacement(total, total);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        kinks_skipped: 0,
        resolved: 0,
        worst: Vec::new(),
    };
    for flat in picks {
        if report.checked == options.coordinates {
            break;
        }
        let ti = offsets.partition_point(|o| *o <= flat) - 1;
        let j = flat - offsets[ti];
        let orig = work.value_at(ti).data()[j];
        work.value_at_mut(ti).data_mut()[j] = orig + options.eps;
        let plus = eval(&work)?;
        work.value_at_mut(ti).data_mut()[j] = orig - options.eps;
        let minus = eval(&work)?;
        work.value_at_mut(ti).data_mut()[j] = orig;
        let eps = options.eps as f64;
        let (right, left) = ((plus - base) / eps, (base - minus) / eps);
        if (right - left).abs() > options.rel_tol * right.abs().max(left.abs()) + 2.0 * options.abs_floor {
            report.kinks_skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = acc.grad_at(ti).data()[j] as f64;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        report.checked += 1;
        if scale * options.rel_tol >= options.abs_floor {
            report.resolved += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        if diff > options.abs_floor && rel > options.rel_tol {
            report.failures += 1;
            report.worst.push((params.names()[ti].clone(), j, analytic, numeric));
        }
    }
    Ok(report)
}
