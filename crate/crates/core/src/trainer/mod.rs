//! Pretraining: sample preparation, the combined objective, the optimization
//! loop, checkpoints, metrics, and visual artifacts.

mod config;
mod loss;
mod optim;
mod panel;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DatasetSource, Toggles, TrainConfig};
pub use loss::{evaluate, LossEval, LossOptions, LossReport};
pub use optim::{lr_at, AdamW};
pub use panel::{plan_heatmap, reconstruct_panel, PanelOutput, PlanOutput};

use crate::error::{Error, Result};
use crate::geometry::{composite, sample_crop_spec, RotatedCropSpec};
use crate::imageio::{generate_synthetic, load_dir, Image};
use crate::model::{backward, forward, save_checkpoint, ForwardOutput, ModelParams, Objective};
use crate::patching::{normalize_patch_targets, patchify, sample_mask, sample_mask_joint, split_indices, MaskLayout};
use crate::transport::TransportPlan;

pub const METRICS_HEADER: &str = "step,l_mse,l_ot,l_rec,lr,seconds";

/// One prepared training example.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub original: Image,
    /// What the encoder sees: the composite, or the original when no crop is made.
    pub input: Image,
    pub spec: Option<RotatedCropSpec>,
    pub layout: MaskLayout,
    pub input_patches: Array2<f64>,
    pub target_patches: Array2<f64>,
}

/// Builds the composite and mask for one image. Without the scaling center
/// crop there is no crop region and every patch counts as background.
pub fn prepare_sample(img: &Image, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainingSample> {
    let m = &cfg.model;
    if img.height() != m.image_size || img.width() != m.image_size || img.channels() != m.channels {
        return Err(Error::shape(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            img.height(),
            img.width(),
            img.channels(),
            m.image_size,
            m.image_size,
            m.channels
        )));
    }
    let grid = m.grid();
    let (input, spec, crop, background) = if cfg.toggles.use_scaling_center_crop {
        let spec = sample_crop_spec(img.height(), img.width(), m.p, cfg.a, cfg.theta_range, rng)?;
        let (crop, background) = split_indices(&spec, grid, grid, m.p)?;
        (composite(img, &spec)?.composite, Some(spec), crop, background)
    } else {
        (img.clone(), None, Vec::new(), (0..grid * grid).collect())
    };
    let layout = if cfg.toggles.use_split_masking {
        sample_mask(&crop, &background, cfg.ratio_crop, cfg.ratio_bg, rng)?
    } else {
        sample_mask_joint(&crop, &background, cfg.ratio_bg, rng)?
    };
    let input_patches = patchify(&input, m.p)?.patches;
    let mut target_patches = patchify(img, m.p)?.patches;
    if cfg.normalize_targets {
        target_patches = normalize_patch_targets(&target_patches);
    }
    Ok(TrainingSample {
        original: img.clone(),
        input,
        spec,
        layout,
        input_patches,
        target_patches,
    })
}

fn loss_options(cfg: &TrainConfig) -> LossOptions {
    LossOptions {
        use_ot_loss: cfg.toggles.use_ot_loss,
        epsilon_rule: cfg.epsilon_rule,
    }
}

/// The combined objective for a prepared sample and a forward output.
pub fn total_loss(sample: &TrainingSample, output: &ForwardOutput, cfg: &TrainConfig) -> Result<LossReport> {
    Ok(evaluate(
        &sample.target_patches,
        &sample.layout,
        &output.predictions,
        loss_options(cfg),
        None,
    )?
    .report)
}

/// Forward, loss and backward for one sample; gradients are added into `grad`
/// scaled by `weight`.
fn sample_grad(
    params: &ModelParams,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    frozen_plan: Option<&TransportPlan>,
    weight: f64,
    grad: &mut ModelParams,
) -> Result<LossEval> {
    let model = cfg.model_config();
    let (out, cache) = forward(&sample.input_patches, &sample.layout, params, &model)?;
    let mut eval = evaluate(
        &sample.target_patches,
        &sample.layout,
        &out.predictions,
        loss_options(cfg),
        frozen_plan,
    )?;
    eval.d_predictions.mapv_inplace(|g| g * weight);
    backward(params, &model, &cache, &eval.d_predictions, grad);
    Ok(eval)
}

/// Batch-mean loss and gradient. Each sample's plan is solved at the current
/// parameters and treated as a constant.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(LossReport, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let (mut mse, mut ot) = (0.0, 0.0);
    for sample in batch {
        let eval = sample_grad(params, sample, cfg, None, weight, &mut grad)?;
        mse += eval.report.l_mse * weight;
        ot += eval.report.l_ot * weight;
    }
    Ok((LossReport::new(mse, ot), grad))
}

/// Objective over fixed samples with the transport plans frozen at the
/// parameters the objective was built from.
pub struct FrozenPlanObjective<'a> {
    pub batch: &'a [TrainingSample],
    pub cfg: &'a TrainConfig,
    plans: Vec<Option<TransportPlan>>,
}

impl<'a> FrozenPlanObjective<'a> {
    pub fn new(params: &ModelParams, batch: &'a [TrainingSample], cfg: &'a TrainConfig) -> Result<Self> {
        let model = cfg.model_config();
        let plans = batch
            .iter()
            .map(|s| {
                let (out, _) = forward(&s.input_patches, &s.layout, params, &model)?;
                Ok(evaluate(&s.target_patches, &s.layout, &out.predictions, loss_options(cfg), None)?.plan)
            })
            .collect::<Result<_>>()?;
        Ok(FrozenPlanObjective { batch, cfg, plans })
    }
}

impl Objective for FrozenPlanObjective<'_> {
    fn loss(&self, params: &ModelParams) -> Result<f64> {
        let model = self.cfg.model_config();
        let weight = 1.0 / self.batch.len() as f64;
        let mut total = 0.0;
        for (s, plan) in self.batch.iter().zip(&self.plans) {
            let (out, _) = forward(&s.input_patches, &s.layout, params, &model)?;
            let eval = evaluate(&s.target_patches, &s.layout, &out.predictions, loss_options(self.cfg), plan.as_ref())?;
            total += eval.report.l_rec * weight;
        }
        Ok(total)
    }

    fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, ModelParams)> {
        let weight = 1.0 / self.batch.len() as f64;
        let mut grad = params.zeros_like();
        let mut total = 0.0;
        for (s, plan) in self.batch.iter().zip(&self.plans) {
            total += sample_grad(params, s, self.cfg, plan.as_ref(), weight, &mut grad)?.report.l_rec * weight;
        }
        Ok((total, grad))
    }
}

/// One optimizer update on a prepared batch. `step` is 0-based.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
    optimizer: &mut AdamW,
    step: usize,
) -> Result<(LossReport, f64)> {
    let (mut report, grad) = batch_loss_and_grad(params, batch, cfg)?;
    report.step = step;
    if !report.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss diverged at step {step}: l_mse={} l_ot={} l_rec={}",
            report.l_mse, report.l_ot, report.l_rec
        )));
    }
    let lr = lr_at(step, cfg.steps, cfg.warmup_steps, cfg.peak_lr());
    optimizer.step(params, &grad, lr);
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("parameters diverged at step {step}")));
    }
    Ok((report, lr))
}

pub fn load_dataset(cfg: &TrainConfig) -> Result<Vec<Image>> {
    let images = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => generate_synthetic(spec)?,
        DatasetSource::Dir(dir) => load_dir(dir)?,
    };
    if images.is_empty() {
        return Err(Error::invalid("dataset has no images"));
    }
    Ok(images)
}

/// Deterministic data order and per-sample randomness for a run.
pub struct BatchSampler {
    seed: u64,
    count: usize,
    batch_size: usize,
    epoch: Option<(usize, Vec<usize>)>,
}

const ORDER_STREAM: u64 = 1 << 40;

impl BatchSampler {
    pub fn new(seed: u64, count: usize, batch_size: usize) -> Self {
        BatchSampler {
            seed,
            count,
            batch_size,
            epoch: None,
        }
    }

    fn order(&mut self, epoch: usize) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(ORDER_STREAM + epoch as u64);
            let mut order: Vec<usize> = (0..self.count).collect();
            order.shuffle(&mut rng);
            self.epoch = Some((epoch, order));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    /// `(image index, sample generator)` for each element of batch `step`.
    pub fn batch(&mut self, step: usize) -> Vec<(usize, ChaCha8Rng)> {
        let count = self.count;
        (0..self.batch_size)
            .map(|b| {
                let g = step * self.batch_size + b;
                let index = self.order(g / count)[g % count];
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(g as u64 + 1);
                (index, rng)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub reports: Vec<(LossReport, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

impl FitSummary {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("fit always writes the initial checkpoint")
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:06}.ckpt")
}

/// Runs the full optimization. Writes `config.txt`, `metrics.csv` (one row
/// per step) and a checkpoint at step 0, every `checkpoint_every` steps, and
/// at the end.
pub fn fit(cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<FitSummary> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let images = load_dataset(cfg)?;
    let config_text = cfg.to_text();
    fs::write(out_dir.join("config.txt"), &config_text).map_err(|e| Error::io(out_dir, e))?;

    let model = cfg.model_config();
    let mut params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut optimizer = AdamW::new(&params, cfg.betas, cfg.weight_decay);
    let mut sampler = BatchSampler::new(cfg.seed, images.len(), cfg.batch_size);

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|source| Error::Unwritable {
        path: metrics_path.clone(),
        source,
    })?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let mut checkpoints = Vec::new();
    let mut write_ckpt = |step: usize, params: &ModelParams| -> Result<()> {
        let path = out_dir.join(checkpoint_name(step));
        save_checkpoint(&path, &config_text, params)?;
        checkpoints.push(path);
        Ok(())
    };
    write_ckpt(0, &params)?;

    let start = Instant::now();
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler
            .batch(step)
            .into_iter()
            .map(|(i, mut rng)| prepare_sample(&images[i], cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (report, lr) = train_step(&mut params, &batch, cfg, &mut optimizer, step)?;
        writeln!(
            metrics,
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.3}",
            step,
            report.l_mse,
            report.l_ot,
            report.l_rec,
            lr,
            start.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        reports.push((report, lr));
        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            write_ckpt(done, &params)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(FitSummary {
        reports,
        checkpoints,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::DatasetSpec;
    use crate::model::ModelConfig;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            dataset: DatasetSource::Synthetic(DatasetSpec::new(6, 32, 3)),
            batch_size: 2,
            steps: 4,
            warmup_steps: 1,
            a: 8,
            checkpoint_every: 2,
            model: ModelConfig {
                image_size: 32,
                p: 4,
                enc_dim: 16,
                enc_depth: 1,
                enc_heads: 2,
                dec_dim: 8,
                dec_depth: 1,
                dec_heads: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sample_preparation_contract() {
        let cfg = small_cfg();
        let img = load_dataset(&cfg).unwrap().remove(0);
        let s = prepare_sample(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let spec = s.spec.unwrap();
        assert_eq!(s.layout.crop_indices.len(), 4);
        assert_eq!(s.layout.crop_visible.len(), 1);
        assert_eq!(s.layout.bg_visible.len(), 15);
        for r in 0..32 {
            for c in 0..32 {
                if !spec.contains(r, c) {
                    assert_eq!(s.input.get(r, c, 0), img.get(r, c, 0));
                }
            }
        }
        assert_eq!(s.target_patches, patchify(&img, 4).unwrap().patches);
    }

    #[test]
    fn no_crop_means_all_background() {
        let mut cfg = small_cfg();
        cfg.toggles = Toggles::all_off();
        let img = load_dataset(&cfg).unwrap().remove(0);
        let s = prepare_sample(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.spec.is_none() && s.layout.crop_indices.is_empty());
        assert_eq!(s.input, img);
        assert_eq!(s.layout.bg_visible.len(), 16);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut sampler = BatchSampler::new(4, 6, 2);
        let mut seen: Vec<usize> = (0..3).flat_map(|s| sampler.batch(s)).map(|(i, _)| i).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 0,
            warmup_steps: 0,
            ..small_cfg()
        };
        let summary = fit(&cfg, dir.path()).unwrap();
        assert_eq!(summary.checkpoints.len(), 1);
        let text = fs::read_to_string(&summary.metrics_path).unwrap();
        assert_eq!(text.trim(), METRICS_HEADER);
    }

    #[test]
    fn short_run_writes_periodic_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let summary = fit(&small_cfg(), dir.path()).unwrap();
        let names: Vec<String> = summary
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec![checkpoint_name(0), checkpoint_name(2), checkpoint_name(4)]);
        let text = fs::read_to_string(&summary.metrics_path).unwrap();
        assert_eq!(text.lines().count(), 5);
        for (report, _) in &summary.reports {
            assert!((report.l_rec - (report.l_mse + report.l_ot)).abs() <= 1e-9);
        }
    }
}
