use rand::seq::index;
use rand::Rng;

use super::ModelParams;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// A scalar objective over model parameters with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &ModelParams) -> Result<f64>;
    fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, ModelParams)>;
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter with the largest error, as `name[index]`.
    pub worst: String,
    pub checked: usize,
    /// Largest error per parameter group.
    pub per_group: Vec<(String, f64)>,
}

/// Compares analytic gradients with fourth-order central finite differences
/// (`step` and `2·step` on each side) on at least
/// `samples` scalars spread over every learnable tensor. Relative error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn gradcheck<O: Objective + ?Sized, R: Rng + ?Sized>(
    objective: &O,
    params: &ModelParams,
    samples: usize,
    step: f64,
    rng: &mut R,
) -> Result<GradcheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {step} must be positive")));
    }
    let (base, analytic) = objective.loss_and_grad(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base}")));
    }
    let groups = analytic.tensors();
    // Every group gets an equal share; budget a small group cannot use is
    // handed on to the larger ones.
    let mut quota = vec![0usize; groups.len()];
    let mut budget = samples.max(groups.len());
    loop {
        let open: Vec<usize> = (0..groups.len()).filter(|&i| quota[i] < groups[i].2.len()).collect();
        if budget == 0 || open.is_empty() {
            break;
        }
        let share = budget.div_ceil(open.len());
        for i in open {
            let add = share.min(groups[i].2.len() - quota[i]).min(budget);
            quota[i] += add;
            budget -= add;
        }
    }
    let picks: Vec<Vec<usize>> = groups
        .iter()
        .zip(&quota)
        .map(|((_, _, g), &k)| {
            let mut idx = index::sample(rng, g.len(), k).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();

    let mut probe = params.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        per_group: Vec::with_capacity(groups.len()),
    };
    for (t, ((name, _, grad), idx)) in groups.iter().zip(&picks).enumerate() {
        let mut group_max = 0.0f64;
        for &i in idx {
            let original = probe.tensors_mut()[t].1[i];
            let mut at = |offset: f64| -> Result<f64> {
                probe.tensors_mut()[t].1[i] = original + offset;
                let value = objective.loss(&probe)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
                }
                Ok(value)
            };
            let numeric = (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step);
            probe.tensors_mut()[t].1[i] = original;
            let a = grad[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            group_max = group_max.max(err);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
        report.per_group.push((name.clone(), group_max));
    }
    Ok(report)
}
