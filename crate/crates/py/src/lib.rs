//! Python bindings for a small slice of the numvae workbench: scene
//! synthesis, the KL term, and the latent probes.

use std::path::PathBuf;

use numvae::cli::commands::{self, RunConfig};
use numvae::probes::{self, DetectorCriteria, ProbeDataset};
use numvae::scenegen::{self, SceneAssets, SceneSpec};
use numvae::vae::{self, EncoderOutput};
use numvae::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

create_exception!(numvae_py, DivergenceError, PyException);

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Divergence(_) => DivergenceError::new_err(err.to_string()),
        Error::Io { .. } | Error::Image { .. } | Error::MissingImage(_) => {
            PyOSError::new_err(err.to_string())
        }
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// A rendered scene. `image` is height x width x 3 in [0, 1], row-major.
#[pyclass(get_all, frozen)]
struct Scene {
    height: usize,
    width: usize,
    image: Vec<f32>,
    labels: Vec<u8>,
    numerosity: usize,
    cumulative_area: u64,
    class_ids: Vec<usize>,
    boxes: Vec<(usize, usize, usize, usize)>,
}

#[pymethods]
impl Scene {
    fn __repr__(&self) -> String {
        format!(
            "Scene({}x{}, numerosity={}, cumulative_area={})",
            self.height, self.width, self.numerosity, self.cumulative_area
        )
    }
}

/// Renders one scene from the procedural asset bank.
#[pyfunction]
#[pyo3(signature = (numerosity, seed, canvas=64, same_asset=false, asset_seed=0))]
fn synthesize_scene(
    py: Python<'_>,
    numerosity: usize,
    seed: u64,
    canvas: usize,
    same_asset: bool,
    asset_seed: u64,
) -> PyResult<Scene> {
    let spec = SceneSpec {
        canvas_size: (canvas, canvas),
        numerosity,
        same_asset,
        seed,
        ..SceneSpec::default()
    };
    let scene = py
        .detach(|| {
            let assets = SceneAssets::procedural(asset_seed);
            scenegen::synthesize_scene(&spec, &assets)
        })
        .map_err(to_py)?;
    let area = scene.composite_area() as u64;
    Ok(Scene {
        height: scene.image.height,
        width: scene.image.width,
        image: scene.image.data,
        labels: scene.labels,
        numerosity: scene.record.numerosity,
        cumulative_area: area,
        class_ids: scene.record.class_ids,
        boxes: scene.record.object_boxes,
    })
}

/// KL divergence of N(mu, sigma^2) from the standard normal.
#[pyfunction]
fn kl_divergence(mu: Vec<f64>, sigma: Vec<f64>) -> PyResult<f64> {
    vae::kl_divergence(&EncoderOutput { mu, sigma }).map_err(to_py)
}

#[pyclass(get_all, frozen)]
struct RegressionFit {
    dim_index: usize,
    beta1: f64,
    beta2: f64,
    r_squared: f64,
    n_samples: usize,
    class_: String,
    ambiguous: bool,
}

#[pymethods]
impl RegressionFit {
    fn __repr__(&self) -> String {
        format!(
            "RegressionFit(dim={}, beta1={:.4}, beta2={:.4}, r_squared={:.4}, class={})",
            self.dim_index, self.beta1, self.beta2, self.r_squared, self.class_
        )
    }
}

fn probe_dataset(
    latents: Vec<Vec<f64>>,
    numerosity: Vec<usize>,
    area: Vec<f64>,
) -> PyResult<ProbeDataset> {
    let dim = latents.first().map_or(0, Vec::len);
    if latents.iter().any(|row| row.len() != dim) {
        return Err(PyValueError::new_err("latent rows have different lengths"));
    }
    ProbeDataset::new(latents.concat(), dim, numerosity, Some(area)).map_err(to_py)
}

/// Fits z_dim ~ b1 log N + b2 log A on standardized variables for every
/// latent dimension and classifies each one.
#[pyfunction]
#[pyo3(signature = (latents, numerosity, area, r2_threshold=0.05, complementary_max=0.1))]
fn probe_dimensions(
    py: Python<'_>,
    latents: Vec<Vec<f64>>,
    numerosity: Vec<usize>,
    area: Vec<f64>,
    r2_threshold: f64,
    complementary_max: f64,
) -> PyResult<Vec<RegressionFit>> {
    let probe = probe_dataset(latents, numerosity, area)?;
    let criteria = DetectorCriteria {
        r2_threshold,
        complementary_max,
    };
    let report = py
        .detach(|| probes::probe_all_dimensions(&probe, &criteria))
        .map_err(to_py)?;
    Ok(report
        .fits
        .iter()
        .zip(&report.classes)
        .map(|(f, c)| RegressionFit {
            dim_index: f.dim_index,
            beta1: f.beta1,
            beta2: f.beta2,
            r_squared: f.r_squared,
            n_samples: f.n_samples,
            class_: c.kind.to_string(),
            ambiguous: c.ambiguous,
        })
        .collect())
}

/// All-points average precision; `None` when there are no positives.
#[pyfunction]
fn average_precision(scores: Vec<f64>, positives: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != positives.len() {
        return Err(PyValueError::new_err(
            "scores and positives differ in length",
        ));
    }
    Ok(probes::average_precision(&scores, &positives))
}

/// Generates a dataset preset ("warmup", "probe" or "desk") into `out` and
/// returns the number of records written.
#[pyfunction]
#[pyo3(signature = (out, preset="desk", count=100, master_seed=0))]
fn gen_data(
    py: Python<'_>,
    out: PathBuf,
    preset: &str,
    count: usize,
    master_seed: u64,
) -> PyResult<usize> {
    let run = RunConfig {
        command: "gen-data".into(),
        config_path: None,
        overrides: vec![format!("preset={preset}"), format!("count={count}")],
        out,
        master_seed: Some(master_seed),
    };
    let manifest = py.detach(|| commands::gen_data(&run)).map_err(to_py)?;
    Ok(manifest.records.len())
}

#[pymodule]
fn numvae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add_class::<Scene>()?;
    m.add_class::<RegressionFit>()?;
    m.add_function(wrap_pyfunction!(synthesize_scene, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(probe_dimensions, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    Ok(())
}
