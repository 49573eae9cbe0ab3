use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{prepare_sample, TrainConfig, TrainingSample};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::model::{forward, Checkpoint};
use crate::patching::{patchify, unpatchify, PatchSet};
use crate::transport::{cost_matrix, sinkhorn_solve, TransportPlan, TransportProblem};

const MASK_GRAY: f64 = 0.5;
const SEPARATOR: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct PanelOutput {
    /// original | composite | masked input | reconstruction, 1px separators.
    pub panel: Image,
    pub reconstruction: Image,
    pub sample: TrainingSample,
    pub predictions: Array2<f64>,
}

fn run_checkpoint(ck: &Checkpoint, image: &Image, seed: u64) -> Result<(TrainConfig, TrainingSample, Array2<f64>)> {
    let cfg = TrainConfig::from_kv(&ck.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = prepare_sample(image, &cfg, &mut rng)?;
    let (out, _) = forward(&sample.input_patches, &sample.layout, &ck.params, &ck.model_config)?;
    Ok((cfg, sample, out.predictions))
}

fn as_patch_set(patches: Array2<f64>, like: &PatchSet) -> PatchSet {
    PatchSet {
        patches,
        ..like.clone()
    }
}

/// Undoes per-patch standardization using the original patch statistics.
fn denormalize(predictions: &Array2<f64>, original: &Array2<f64>) -> Array2<f64> {
    let mut out = predictions.clone();
    for (mut row, orig) in out.outer_iter_mut().zip(original.outer_iter()) {
        let n = orig.len() as f64;
        let mean = orig.sum() / n;
        let var = orig.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = (var + 1e-6).sqrt();
        row.mapv_inplace(|v| v * std + mean);
    }
    out
}

fn hconcat(images: &[&Image]) -> Result<Image> {
    let h = images[0].height();
    let c = images[0].channels();
    if images.iter().any(|i| i.height() != h || i.channels() != c) {
        return Err(Error::shape("panel tiles differ in height or channels"));
    }
    let width: usize = images.iter().map(|i| i.width()).sum::<usize>() + images.len() - 1;
    let mut data = Vec::with_capacity(h * width * c);
    for r in 0..h {
        for (t, img) in images.iter().enumerate() {
            if t > 0 {
                data.extend(std::iter::repeat_n(SEPARATOR, c));
            }
            let start = img.index(r, 0, 0);
            data.extend_from_slice(&img.data()[start..start + img.width() * c]);
        }
    }
    Image::new(h, width, c, data)
}

pub fn reconstruct_panel(ck: &Checkpoint, image: &Image, seed: u64) -> Result<PanelOutput> {
    let (cfg, sample, predictions) = run_checkpoint(ck, image, seed)?;
    let p = cfg.model.p;
    let input_set = patchify(&sample.input, p)?;
    let shown = if cfg.normalize_targets {
        denormalize(&predictions, &patchify(&sample.original, p)?.patches)
    } else {
        predictions.clone()
    };
    let reconstruction = unpatchify(&as_patch_set(shown, &input_set))?;

    let mut masked = input_set.patches.clone();
    for k in sample.layout.crop_masked.iter().chain(&sample.layout.bg_masked) {
        masked.row_mut(*k).fill(MASK_GRAY);
    }
    let masked = unpatchify(&as_patch_set(masked, &input_set))?;

    let panel = hconcat(&[&sample.original, &sample.input, &masked, &reconstruction])?;
    Ok(PanelOutput {
        panel,
        reconstruction,
        sample,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub plan: TransportPlan,
    /// `N_r × N_r` grayscale, `ω·N_r²/2` so a uniform plan renders mid-gray.
    pub heatmap: Image,
    pub sample: TrainingSample,
}

impl PlanOutput {
    /// Whitespace-separated matrix, one row per target patch.
    pub fn matrix_text(&self) -> String {
        let mut out = String::new();
        for row in self.plan.plan.outer_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }
}

/// Solves the crop transport plan between the original crop patches and the
/// model's predictions for them.
pub fn plan_heatmap(ck: &Checkpoint, image: &Image, seed: u64) -> Result<PlanOutput> {
    let (cfg, sample, predictions) = run_checkpoint(ck, image, seed)?;
    let crop = &sample.layout.crop_indices;
    if crop.is_empty() {
        return Err(Error::invalid("checkpoint was trained without a rotated crop; no plan to show"));
    }
    let targets = sample.target_patches.select(Axis(0), crop);
    let preds = predictions.select(Axis(0), crop);
    let cost = cost_matrix(targets.view(), preds.view())?;
    let plan = sinkhorn_solve(&TransportProblem::uniform(cost, cfg.epsilon_rule))?;
    let n = plan.n();
    let scale = (n * n) as f64 / 2.0;
    let heatmap = Image::from_unclamped(n, n, 1, plan.plan.iter().map(|w| w * scale).collect())?;
    Ok(PlanOutput { plan, heatmap, sample })
}
