//! Probes on the frozen latent space: the log-linear regression probe and
//! detector classification, a softmax readout scored by count average
//! precision, response profiles and latent traversals.

mod profile;
mod readout;
mod regression;

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::scenegen::{DatasetManifest, SceneRecord};
use crate::trainer::Checkpoint;
use crate::vae::{image_batch, Pass, Vae};

pub use profile::{
    latent_std, latent_traversal, response_profile, ProfileCell, ResponseProfile, TraversalGrid,
};
pub use readout::{
    average_precision, chance_ap, count_ap, evaluate_readout, train_readout, ApReport, Readout,
    ReadoutConfig, NUM_CLASSES,
};
pub use regression::{
    classify_detector, fit_dimension, probe_all_dimensions, DetectorClass, DetectorCriteria,
    DetectorKind, DetectorReport, RegressionFit,
};

const ENCODE_BATCH: usize = 64;

/// Posterior means with the scene labels they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    /// Row-major `[num_samples][latent_dim]`.
    pub latents: Vec<f64>,
    pub latent_dim: usize,
    pub numerosity: Vec<usize>,
    /// Cumulative object area in pixels; absent for ingested data.
    pub cumulative_area: Option<Vec<f64>>,
    pub source_manifest: Option<PathBuf>,
}

impl ProbeDataset {
    pub fn new(
        latents: Vec<f64>,
        latent_dim: usize,
        numerosity: Vec<usize>,
        cumulative_area: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = numerosity.len();
        if latent_dim == 0 || latents.len() != n * latent_dim {
            return Err(Error::Shape(format!(
                "{} latent values for {n} rows of width {latent_dim}",
                latents.len()
            )));
        }
        if let Some(a) = &cumulative_area {
            if a.len() != n {
                return Err(Error::Shape(format!("{} areas for {n} rows", a.len())));
            }
        }
        Ok(Self {
            latents,
            latent_dim,
            numerosity,
            cumulative_area,
            source_manifest: None,
        })
    }

    pub fn len(&self) -> usize {
        self.numerosity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerosity.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.latents[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn column(&self, dim: usize) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.latents[i * self.latent_dim + dim])
            .collect()
    }

    pub fn area(&self) -> Result<&[f64]> {
        self.cumulative_area
            .as_deref()
            .ok_or_else(|| Error::AreaUnavailable("probe dataset has no cumulative area".into()))
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if dim >= self.latent_dim {
            return Err(Error::Shape(format!(
                "dimension {dim} out of range for latent width {}",
                self.latent_dim
            )));
        }
        Ok(())
    }
}

/// Encodes every record of `manifest` with the checkpointed model.
pub fn collect_latents(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
) -> Result<ProbeDataset> {
    let mut model = checkpoint.model()?;
    let mut probe = collect_latents_from(&mut model, manifest, &manifest.records)?;
    probe.source_manifest = Some(manifest.dir.clone());
    Ok(probe)
}

/// Posterior means for `records`; images whose size differs from the model
/// input are resized.
pub fn collect_latents_from(
    model: &mut Vae<f32>,
    manifest: &DatasetManifest,
    records: &[SceneRecord],
) -> Result<ProbeDataset> {
    let (h, w, _) = model.config().input_size;
    if let Some(canvas) = manifest.canvas_size() {
        if canvas != (h, w) {
            return Err(Error::Shape(format!(
                "manifest canvas {}x{} does not match model input {h}x{w}",
                canvas.0, canvas.1
            )));
        }
    }
    let dim = model.latent_dim();
    let mut latents = Vec::with_capacity(records.len() * dim);
    for chunk in records.chunks(ENCODE_BATCH) {
        let images = chunk
            .iter()
            .map(|r| {
                let img = manifest.load_image(r)?;
                Ok(if (img.height, img.width) == (h, w) {
                    img
                } else {
                    img.resize(h, w)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = images.iter().collect();
        let x: FeatureMap<f32> = image_batch(&refs)?;
        let post = model.encode_batch(&x, Pass::Eval)?;
        for n in 0..chunk.len() {
            latents.extend(post.sample(n).mu);
        }
    }
    let numerosity = records.iter().map(|r| r.numerosity).collect();
    let area = records
        .iter()
        .map(|r| r.cumulative_area.map(|a| a as f64))
        .collect::<Option<Vec<_>>>();
    ProbeDataset::new(latents, dim, numerosity, area)
}
