//! Optimization protocol: augmentation, synthetic warm-up with natural-image
//! mixing, plateau learning-rate decay, class rebalancing and checkpointing.

mod checkpoint;
mod data;
mod schedule;

pub use checkpoint::{
    load_checkpoint, load_into, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_KIND,
};
pub use data::{augment, rebalance_dataset, rebalance_records, AugmentConfig, ImageStore};
pub use schedule::{lr_schedule_step, mix_schedule, trailing_plateau_epochs, PlateauScheduler};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{FeatureMap, Optimizer, OptimizerKind};
use crate::perceptual::{
    FeatureExtractor, FeatureExtractorSpec, WeightsSource, DEFAULT_BUILTIN_SEED,
};
use crate::scenegen::{DatasetManifest, SceneRecord, Split};
use crate::seed::{derive_seed, stream_seed, with_worker_pool};
use crate::vae::{
    image_batch, ArchitectureConfig, LossBreakdown, ObjectiveConfig, Pass, Preset, ReconReduction,
    Vae,
};

pub const STATS_FILE: &str = "epoch_stats.jsonl";
pub const SAMPLE_LOG_FILE: &str = "sampled_records.log";
pub const BEST_CHECKPOINT: &str = "best.nvta";
pub const FINAL_CHECKPOINT: &str = "final.nvta";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.nvta";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

/// Training hyperparameters. Field names double as configuration keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Preset,
    pub alpha: f64,
    pub beta: f64,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub plateau_epochs: usize,
    pub plateau_min_rel_improvement: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub mix_ramp_end_epoch: usize,
    /// Natural-image fraction reached at the end of the ramp.
    pub mix_target_fraction: f64,
    pub batch_size: usize,
    pub master_seed: u64,
    pub rebalance_fraction: f64,
    pub aug_hflip: bool,
    pub aug_crop: bool,
    pub aug_crop_min_area: f64,
    pub aug_color_shift: f64,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub recon_reduction: ReconReduction,
    pub perceptual: bool,
    pub pixel_term: bool,
    /// Comma-separated extractor taps.
    pub perceptual_layers: String,
    /// `builtin`, `identity`, or a path to an extractor weights archive.
    pub extractor_weights: String,
    /// Cap on validation records (0 = all).
    pub max_val_records: usize,
    /// Write every sampled record per epoch to `sampled_records.log`.
    pub log_samples: bool,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            arch: Preset::Paper,
            alpha: 1.0,
            beta: 0.03,
            lr_initial: 0.0015,
            lr_decay_factor: 5.0,
            plateau_epochs: 4,
            plateau_min_rel_improvement: 0.001,
            total_epochs: 140,
            warmup_epochs: 20,
            mix_ramp_end_epoch: 60,
            mix_target_fraction: 0.5,
            batch_size: 32,
            master_seed: 0,
            rebalance_fraction: 0.10,
            aug_hflip: true,
            aug_crop: true,
            aug_crop_min_area: 0.9,
            aug_color_shift: 0.1,
            optimizer: OptimizerChoice::Sgd,
            momentum: 0.9,
            recon_reduction: ReconReduction::ElementMean,
            perceptual: true,
            pixel_term: false,
            perceptual_layers: "relu1,relu2,relu3".into(),
            extractor_weights: "builtin".into(),
            max_val_records: 0,
            log_samples: false,
        }
    }

    pub fn desk() -> Self {
        Self {
            arch: Preset::Desk,
            total_epochs: 30,
            warmup_epochs: 5,
            mix_ramp_end_epoch: 15,
            // Element-mean collapses the posterior at this scale and SGD barely
            // moves the latents within the desk epoch budget.
            optimizer: OptimizerChoice::Adam,
            lr_initial: 0.0005,
            recon_reduction: ReconReduction::SampleSum,
            ..Self::paper()
        }
    }

    pub fn tiny() -> Self {
        Self {
            arch: Preset::Tiny,
            total_epochs: 5,
            warmup_epochs: 1,
            mix_ramp_end_epoch: 3,
            batch_size: 8,
            ..Self::desk()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
            Preset::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_initial > 0.0) {
            return fail(format!(
                "lr_initial must be positive, got {}",
                self.lr_initial
            ));
        }
        if !(self.lr_decay_factor > 1.0) {
            return fail(format!(
                "lr_decay_factor must exceed 1, got {}",
                self.lr_decay_factor
            ));
        }
        if !(0.0..1.0).contains(&self.rebalance_fraction) {
            return fail(format!(
                "rebalance_fraction must be in [0, 1), got {}",
                self.rebalance_fraction
            ));
        }
        if !(self.warmup_epochs <= self.mix_ramp_end_epoch
            && self.mix_ramp_end_epoch <= self.total_epochs)
        {
            return fail(format!(
                "need warmup_epochs ({}) <= mix_ramp_end_epoch ({}) <= total_epochs ({})",
                self.warmup_epochs, self.mix_ramp_end_epoch, self.total_epochs
            ));
        }
        if !(0.0..=1.0).contains(&self.mix_target_fraction) {
            return fail(format!(
                "mix_target_fraction must be in [0, 1], got {}",
                self.mix_target_fraction
            ));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 (batch normalization)".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return fail("alpha and beta must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.aug_crop_min_area > 0.0 && self.aug_crop_min_area <= 1.0) {
            return fail(format!(
                "aug_crop_min_area must be in (0, 1], got {}",
                self.aug_crop_min_area
            ));
        }
        if !self.perceptual && !self.pixel_term {
            return fail("at least one of perceptual and pixel_term must be enabled".into());
        }
        Ok(())
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            hflip: self.aug_hflip,
            crop: self.aug_crop,
            crop_min_area: self.aug_crop_min_area,
            color_shift: self.aug_color_shift,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd {
                momentum: self.momentum,
            },
            OptimizerChoice::Adam => OptimizerKind::adam(),
        }
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.perceptual_layers
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            beta: self.beta,
            pixel_term: self.pixel_term,
            perceptual_layers: if self.perceptual {
                self.layer_names()
            } else {
                Vec::new()
            },
            reduction: self.recon_reduction,
        }
    }

    pub fn architecture(&self) -> ArchitectureConfig {
        ArchitectureConfig::preset(self.arch)
    }

    pub fn extractor_spec(&self) -> FeatureExtractorSpec {
        let input = self.architecture().input_size;
        let mut spec = match self.extractor_weights.as_str() {
            "builtin" => FeatureExtractorSpec::builtin(input),
            "identity" => FeatureExtractorSpec::identity(input),
            path => FeatureExtractorSpec {
                extractor_id: "external".into(),
                weights_source: WeightsSource::ExternalFile {
                    path: PathBuf::from(path),
                },
                ..FeatureExtractorSpec::builtin(input)
            },
        };
        if let WeightsSource::BuiltinFixed { .. } = spec.weights_source {
            spec.weights_source = WeightsSource::BuiltinFixed {
                seed: DEFAULT_BUILTIN_SEED,
            };
        }
        if self.extractor_weights != "identity" {
            spec.layer_names = self.layer_names();
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: LossBreakdown,
    pub val_loss: LossBreakdown,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub natural_fraction: f64,
    pub natural_samples: usize,
    pub synthetic_samples: usize,
    pub wall_time: f64,
}

impl EpochStats {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &EpochStats) -> bool {
        EpochStats {
            wall_time: 0.0,
            ..self.clone()
        } == EpochStats {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

pub struct TrainingOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub stats: Vec<EpochStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Synthetic,
    Natural,
}

struct Pool {
    store: ImageStore,
}

/// Trains a VAE on `synthetic` (plus `natural` after warm-up). With `out_dir`,
/// the stats log and best/final checkpoints are written there.
pub fn run_training(
    config: &TrainConfig,
    synthetic: &DatasetManifest,
    natural: Option<&DatasetManifest>,
    arch: &ArchitectureConfig,
    extractor_spec: &FeatureExtractorSpec,
    out_dir: Option<&Path>,
) -> Result<TrainingOutcome> {
    config.validate()?;
    arch.validate()?;
    let master = config.master_seed;
    let input = (arch.input_size.0, arch.input_size.1);

    let train_records = rebalance_records(
        &owned(synthetic.split(Split::Train)),
        config.rebalance_fraction,
        stream_seed(master, "rebalance-synthetic"),
    );
    let mut val_records = owned(synthetic.split(Split::Val));
    if val_records.is_empty() {
        val_records = owned(synthetic.split(Split::Test));
    }
    if config.max_val_records > 0 {
        val_records.truncate(config.max_val_records);
    }
    if train_records.is_empty() {
        return Err(Error::Format(
            "synthetic manifest has no training records".into(),
        ));
    }
    if val_records.len() < 2 {
        return Err(Error::Format(
            "synthetic manifest needs at least 2 validation records".into(),
        ));
    }
    let natural_records = natural
        .map(|m| {
            rebalance_records(
                &owned(m.split(Split::Train)),
                config.rebalance_fraction,
                stream_seed(master, "rebalance-natural"),
            )
        })
        .unwrap_or_default();
    if natural.is_some() && natural_records.is_empty() {
        return Err(Error::Format(
            "natural manifest has no training records".into(),
        ));
    }

    log::info!(
        "loading {} synthetic, {} natural, {} validation images",
        train_records.len(),
        natural_records.len(),
        val_records.len()
    );
    let syn = Pool {
        store: ImageStore::load(synthetic, &train_records)?,
    };
    let nat = match natural {
        Some(m) => Some(Pool {
            store: ImageStore::load(m, &natural_records)?,
        }),
        None => None,
    };
    let val_images: Vec<Image> = {
        let store = ImageStore::load(synthetic, &val_records)?;
        (0..store.len())
            .map(|i| store.get(i).resize(input.0, input.1))
            .collect()
    };

    let mut model = Vae::<f32>::new(arch.clone(), stream_seed(master, "init"))?;
    let objective = config.objective();
    let extractor = if objective.perceptual_layers.is_empty() {
        None
    } else {
        Some(FeatureExtractor::<f32>::from_spec(extractor_spec)?)
    };
    let mut optimizer = Optimizer::new(config.optimizer_kind());
    let mut scheduler = PlateauScheduler::new(config.lr_initial);
    let augment_cfg = config.augment_config();

    let meta_for = |epoch: usize, lr: f64, history: &[f64]| CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        arch: arch.clone(),
        objective: objective.clone(),
        extractor: extractor_spec.clone(),
        epoch,
        master_seed: master,
        lr,
        val_loss_history: history.to_vec(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for f in [STATS_FILE, SAMPLE_LOG_FILE] {
            let p = dir.join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }

    let mut stats = Vec::with_capacity(config.total_epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last_good = Checkpoint::from_model(&model, meta_for(0, config.lr_initial, &[]));

    for epoch in 0..config.total_epochs {
        let started = Instant::now();
        let lr = scheduler.lr();
        let epoch_seed = derive_seed(stream_seed(master, "epoch"), epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);

        let fraction = if nat.is_some() {
            mix_schedule(epoch, config)
        } else {
            0.0
        };
        let total = syn.store.len();
        let n_nat = (fraction * total as f64).round() as usize;
        let mut syn_order: Vec<usize> = (0..syn.store.len()).collect();
        syn_order.shuffle(&mut rng);
        let mut plan: Vec<(Source, usize)> = syn_order[..total - n_nat]
            .iter()
            .map(|&i| (Source::Synthetic, i))
            .collect();
        if let Some(nat) = &nat {
            let mut nat_order: Vec<usize> = (0..nat.store.len()).collect();
            nat_order.shuffle(&mut rng);
            plan.extend(
                nat_order
                    .iter()
                    .cycle()
                    .take(n_nat)
                    .map(|&i| (Source::Natural, i)),
            );
        }
        plan.shuffle(&mut rng);

        if config.log_samples {
            if let Some(dir) = out_dir {
                log_samples(dir, epoch, &plan, &train_records, &natural_records)?;
            }
        }

        let noise_seed = derive_seed(stream_seed(master, "noise"), epoch as u64);
        let mut batch_losses = Vec::new();
        for (b, chunk) in plan.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<Image> = with_worker_pool(|| {
                chunk
                    .par_iter()
                    .enumerate()
                    .map(|(j, &(src, i))| {
                        let img = match src {
                            Source::Synthetic => syn.store.get(i),
                            Source::Natural => nat.as_ref().expect("natural pool").store.get(i),
                        };
                        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(
                            epoch_seed,
                            (b * config.batch_size + j) as u64,
                        ));
                        augment(&img, &augment_cfg, input, &mut r)
                    })
                    .collect()
            });
            let refs: Vec<&Image> = images.iter().collect();
            let x = image_batch::<f32>(&refs)?;
            let noise = gaussian_noise(
                arch.latent_dim,
                chunk.len(),
                derive_seed(noise_seed, b as u64),
            );
            let (loss, _) = model.objective(
                &x,
                &noise,
                extractor.as_ref(),
                &objective,
                Pass::TrainWithGrad,
            )?;
            if !loss.total.is_finite() {
                return Err(diverged(out_dir, &last_good, epoch, b, &loss));
            }
            optimizer.step(&mut model.params_mut(), lr);
            if model
                .params_mut()
                .iter()
                .any(|p| p.value.iter().any(|v| !v.is_finite()))
            {
                return Err(diverged(out_dir, &last_good, epoch, b, &loss));
            }
            batch_losses.push(loss);
        }
        let train_loss = LossBreakdown::mean(&batch_losses)
            .ok_or_else(|| Error::Config("batch_size exceeds the training set".into()))?;
        let val_loss = evaluate(
            &mut model,
            &val_images,
            config,
            extractor.as_ref(),
            &objective,
            master,
        )?;
        if !val_loss.total.is_finite() {
            return Err(diverged(out_dir, &last_good, epoch, usize::MAX, &val_loss));
        }
        scheduler.observe(val_loss.total, config);

        let s = EpochStats {
            epoch,
            train_loss,
            val_loss: val_loss.clone(),
            lr,
            natural_fraction: if plan.is_empty() {
                0.0
            } else {
                n_nat as f64 / plan.len() as f64
            },
            natural_samples: n_nat,
            synthetic_samples: total - n_nat,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} (kl {:.4}) lr {lr:.2e} natural {:.2} [{:.1}s]",
            s.train_loss.total,
            s.val_loss.total,
            s.val_loss.kl,
            s.natural_fraction,
            s.wall_time
        );
        if let Some(dir) = out_dir {
            append_line(
                &dir.join(STATS_FILE),
                &serde_json::to_string(&s).expect("stats serialize"),
            )?;
        }
        stats.push(s);

        let ckpt =
            Checkpoint::from_model(&model, meta_for(epoch, scheduler.lr(), scheduler.history()));
        if best.as_ref().is_none_or(|(v, _)| val_loss.total < *v) {
            if let Some(dir) = out_dir {
                save_checkpoint(&ckpt, &dir.join(BEST_CHECKPOINT))?;
            }
            best = Some((val_loss.total, ckpt.clone()));
        }
        last_good = ckpt;
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&last_good, &dir.join(FINAL_CHECKPOINT))?;
    }
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last_good.clone());
    Ok(TrainingOutcome {
        best,
        last: last_good,
        stats,
    })
}

fn owned(records: Vec<&SceneRecord>) -> Vec<SceneRecord> {
    records.into_iter().cloned().collect()
}

/// Standard-normal `[latent][batch]` matrix.
pub fn gaussian_noise(latent: usize, batch: usize, seed: u64) -> FeatureMap<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..latent * batch)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    FeatureMap::matrix(latent, batch, data).expect("sizes agree")
}

/// Validation loss with running statistics and fixed noise.
fn evaluate(
    model: &mut Vae<f32>,
    images: &[Image],
    config: &TrainConfig,
    extractor: Option<&FeatureExtractor<f32>>,
    objective: &ObjectiveConfig,
    master: u64,
) -> Result<LossBreakdown> {
    let noise_seed = stream_seed(master, "val-noise");
    let mut losses = Vec::new();
    let mut weights = Vec::new();
    for (b, chunk) in images.chunks(config.batch_size).enumerate() {
        let refs: Vec<&Image> = chunk.iter().collect();
        let x = image_batch::<f32>(&refs)?;
        let noise = gaussian_noise(
            model.latent_dim(),
            chunk.len(),
            derive_seed(noise_seed, b as u64),
        );
        let (loss, _) = model.objective(&x, &noise, extractor, objective, Pass::Eval)?;
        losses.push(loss);
        weights.push(chunk.len() as f64);
    }
    weighted_mean(&losses, &weights).ok_or_else(|| Error::Format("no validation images".into()))
}

fn weighted_mean(items: &[LossBreakdown], weights: &[f64]) -> Option<LossBreakdown> {
    let first = items.first()?;
    let total: f64 = weights.iter().sum();
    let mut out = first.clone();
    out.kl = items
        .iter()
        .zip(weights)
        .map(|(b, w)| b.kl * w)
        .sum::<f64>()
        / total;
    out.pixel = items
        .iter()
        .zip(weights)
        .map(|(b, w)| b.pixel * w)
        .sum::<f64>()
        / total;
    for (k, v) in out.perceptual_per_layer.iter_mut() {
        *v = items
            .iter()
            .zip(weights)
            .map(|(b, w)| b.perceptual_per_layer.get(k).copied().unwrap_or(0.0) * w)
            .sum::<f64>()
            / total;
    }
    out.total = out.recompose();
    Some(out)
}

fn diverged(
    out_dir: Option<&Path>,
    last_good: &Checkpoint,
    epoch: usize,
    batch: usize,
    loss: &LossBreakdown,
) -> Error {
    let mut msg = format!(
        "non-finite loss or parameters at epoch {epoch}{} (total {}, kl {})",
        if batch == usize::MAX {
            " validation".to_string()
        } else {
            format!(" batch {batch}")
        },
        loss.total,
        loss.kl
    );
    if let Some(dir) = out_dir {
        let path = dir.join(LAST_GOOD_CHECKPOINT);
        match save_checkpoint(last_good, &path) {
            Ok(()) => msg.push_str(&format!("; last good state saved to {}", path.display())),
            Err(e) => msg.push_str(&format!("; saving last good state failed: {e}")),
        }
    }
    Error::Divergence(msg)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn log_samples(
    dir: &Path,
    epoch: usize,
    plan: &[(Source, usize)],
    synthetic: &[SceneRecord],
    natural: &[SceneRecord],
) -> Result<()> {
    let mut text = String::new();
    for &(src, i) in plan {
        let (tag, rec) = match src {
            Source::Synthetic => ("synthetic", &synthetic[i]),
            Source::Natural => ("natural", &natural[i]),
        };
        text.push_str(&format!("{epoch}\t{tag}\t{}\n", rec.image_path));
    }
    let path = dir.join(SAMPLE_LOG_FILE);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(&path, e))
}
