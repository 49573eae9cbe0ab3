//! The reconstruction objective: squared error on masked background patches
//! plus a transport loss over every crop patch.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::patching::MaskLayout;
use crate::transport::{cost_matrix, ot_loss, ot_loss_grad, sinkhorn_solve, TransportPlan, TransportProblem};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_ot: f64,
    pub l_rec: f64,
    pub step: usize,
}

impl LossReport {
    pub fn new(l_mse: f64, l_ot: f64) -> Self {
        LossReport {
            l_mse,
            l_ot,
            l_rec: l_mse + l_ot,
            step: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_mse.is_finite() && self.l_ot.is_finite() && self.l_rec.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub use_ot_loss: bool,
    pub epsilon_rule: f64,
}

/// Loss value, its gradient with respect to the predictions, and the plan
/// used for the crop term when transport is on.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub report: LossReport,
    pub d_predictions: Array2<f64>,
    pub plan: Option<TransportPlan>,
}

/// Mean squared error over `indices` rows and all their elements, with its
/// gradient scattered into `grad`.
fn masked_mse(
    targets: &Array2<f64>,
    predictions: &Array2<f64>,
    indices: &[usize],
    grad: &mut Array2<f64>,
) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let count = (indices.len() * targets.ncols()) as f64;
    let mut total = 0.0;
    for &k in indices {
        let mut g = grad.row_mut(k);
        for ((gv, &t), &p) in g.iter_mut().zip(targets.row(k)).zip(predictions.row(k)) {
            let diff = p - t;
            total += diff * diff;
            *gv += 2.0 * diff / count;
        }
    }
    total / count
}

/// Evaluates the objective. `targets` are the ORIGINAL image's patches;
/// `frozen_plan` skips the Sinkhorn solve and reuses a given coupling.
pub fn evaluate(
    targets: &Array2<f64>,
    layout: &MaskLayout,
    predictions: &Array2<f64>,
    options: LossOptions,
    frozen_plan: Option<&TransportPlan>,
) -> Result<LossEval> {
    if targets.dim() != predictions.dim() {
        return Err(Error::shape(format!(
            "targets {:?} vs predictions {:?}",
            targets.dim(),
            predictions.dim()
        )));
    }
    layout.validate(targets.nrows())?;
    let mut grad = Array2::zeros(predictions.raw_dim());
    let l_mse = masked_mse(targets, predictions, &layout.bg_masked, &mut grad);

    let crop = &layout.crop_indices;
    let (l_ot, plan) = if crop.is_empty() {
        (0.0, None)
    } else if options.use_ot_loss {
        let r = targets.select(Axis(0), crop);
        let r_hat = predictions.select(Axis(0), crop);
        let cost = cost_matrix(r.view(), r_hat.view())?;
        let plan = match frozen_plan {
            Some(p) => p.clone(),
            None => sinkhorn_solve(&TransportProblem::uniform(cost.clone(), options.epsilon_rule))?,
        };
        let value = ot_loss(&cost, &plan)?;
        let g = ot_loss_grad(r.view(), r_hat.view(), &plan)?;
        for (row, &k) in g.outer_iter().zip(crop) {
            let mut dst = grad.row_mut(k);
            dst += &row;
        }
        (value, Some(plan))
    } else {
        (masked_mse(targets, predictions, &layout.crop_masked, &mut grad), None)
    };
    Ok(LossEval {
        report: LossReport::new(l_mse, l_ot),
        d_predictions: grad,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::sample_mask;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Array2<f64>, Array2<f64>, MaskLayout) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Array2::from_shape_simple_fn((16, 12), || rng.random::<f64>());
        let p = Array2::from_shape_simple_fn((16, 12), || rng.random::<f64>());
        let crop = vec![5, 6, 9, 10];
        let bg: Vec<usize> = (0..16).filter(|k| !crop.contains(k)).collect();
        let layout = sample_mask(&crop, &bg, 0.5, 0.75, &mut rng).unwrap();
        (t, p, layout)
    }

    const ON: LossOptions = LossOptions {
        use_ot_loss: true,
        epsilon_rule: 0.1,
    };

    #[test]
    fn additivity() {
        let (t, p, layout) = setup(1);
        let r = evaluate(&t, &layout, &p, ON, None).unwrap().report;
        assert_eq!(r.l_rec, r.l_mse + r.l_ot);
        assert!(r.l_mse > 0.0 && r.l_ot > 0.0);
    }

    #[test]
    fn visible_background_targets_do_not_matter() {
        let (t, p, layout) = setup(2);
        let base = evaluate(&t, &layout, &p, ON, None).unwrap().report;
        let mut garbage = t.clone();
        for &k in &layout.bg_visible {
            garbage.row_mut(k).fill(0.123);
        }
        let after = evaluate(&garbage, &layout, &p, ON, None).unwrap().report;
        assert_eq!(base.l_mse, after.l_mse);
    }

    #[test]
    fn ot_off_scores_masked_crop_in_place() {
        let (t, p, layout) = setup(3);
        let off = LossOptions {
            use_ot_loss: false,
            ..ON
        };
        let r = evaluate(&t, &layout, &p, off, None).unwrap().report;
        let mut sum = 0.0;
        for &k in &layout.crop_masked {
            sum += (&t.row(k) - &p.row(k)).mapv(|v| v * v).sum();
        }
        let expected = sum / (layout.crop_masked.len() * 12) as f64;
        assert!((r.l_ot - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction() {
        let (t, _, layout) = setup(4);
        let eval = evaluate(&t, &layout, &t, ON, None).unwrap();
        assert_eq!(eval.report.l_mse, 0.0);
        assert!(eval.report.l_ot >= 0.0 && eval.report.l_ot < 0.05);
    }

    #[test]
    fn shape_mismatch() {
        let (t, _, layout) = setup(5);
        assert!(evaluate(&t, &layout, &array![[0.0]], ON, None).is_err());
    }
}
