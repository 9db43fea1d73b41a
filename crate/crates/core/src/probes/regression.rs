//! Log-linear regression of one latent coordinate on numerosity and area.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ProbeDataset;
use crate::error::{Error, Result};
use crate::seed::with_worker_pool;

/// Standardized fit `z = beta1 * log N + beta2 * log A + e` over rows with `N >= 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub dim_index: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub r_squared: f64,
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorCriteria {
    pub r2_threshold: f64,
    /// Bound on the absolute coefficient of the complementary property.
    pub complementary_max: f64,
}

impl Default for DetectorCriteria {
    fn default() -> Self {
        Self {
            r2_threshold: 0.05,
            complementary_max: 0.1,
        }
    }
}

impl DetectorCriteria {
    pub fn strict() -> Self {
        Self {
            r2_threshold: 0.10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r2_threshold > 0.0 && self.complementary_max > 0.0) {
            return Err(Error::Config(format!(
                "detector criteria must be positive (r2={}, comp={})",
                self.r2_threshold, self.complementary_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Numerosity,
    Area,
    Neither,
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetectorKind::Numerosity => "numerosity",
            DetectorKind::Area => "area",
            DetectorKind::Neither => "neither",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectorClass {
    pub kind: DetectorKind,
    /// Both complementary coefficients were small; resolved by the larger one.
    pub ambiguous: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorReport {
    pub criteria: DetectorCriteria,
    pub fits: Vec<RegressionFit>,
    pub classes: Vec<DetectorClass>,
    /// Dimensions whose fit failed, with the reason.
    pub failures: Vec<(usize, String)>,
    pub numerosity_detectors: Vec<usize>,
    pub area_detectors: Vec<usize>,
    pub opposite_sign_area_pairs: Vec<(usize, usize)>,
}

fn standardize(v: &mut [f64], what: &str) -> Result<()> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if !(var > 1e-24 * (1.0 + mean * mean)) || !var.is_finite() {
        return Err(Error::DegenerateInput(format!("{what} has zero variance")));
    }
    let sd = var.sqrt();
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits dimension `dim` by ordinary least squares on z-scored variables.
pub fn fit_dimension(probe: &ProbeDataset, dim: usize) -> Result<RegressionFit> {
    probe.check_dim(dim)?;
    let area = probe.area()?;
    let rows: Vec<usize> = (0..probe.len())
        .filter(|&i| probe.numerosity[i] >= 1)
        .collect();
    if rows.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "{} rows with N >= 1, need at least 3",
            rows.len()
        )));
    }
    if let Some(&i) = rows.iter().find(|&&i| !(area[i] > 0.0)) {
        return Err(Error::DegenerateInput(format!(
            "row {i} has N >= 1 but area {}",
            area[i]
        )));
    }
    let mut z: Vec<f64> = rows
        .iter()
        .map(|&i| probe.latents[i * probe.latent_dim + dim])
        .collect();
    let mut log_n: Vec<f64> = rows
        .iter()
        .map(|&i| (probe.numerosity[i] as f64).ln())
        .collect();
    let mut log_a: Vec<f64> = rows.iter().map(|&i| area[i].ln()).collect();
    standardize(&mut z, &format!("dimension {dim}"))?;
    standardize(&mut log_n, "log N")?;
    standardize(&mut log_a, "log A")?;
    let n = rows.len() as f64;
    let r1 = dot(&z, &log_n) / n;
    let r2 = dot(&z, &log_a) / n;
    let r12 = dot(&log_n, &log_a) / n;
    let det = 1.0 - r12 * r12;
    if det < 1e-12 {
        return Err(Error::DegenerateInput(
            "log N and log A are collinear".into(),
        ));
    }
    let beta1 = (r1 - r12 * r2) / det;
    let beta2 = (r2 - r12 * r1) / det;
    let r_squared = (beta1 * r1 + beta2 * r2).clamp(0.0, 1.0);
    Ok(RegressionFit {
        dim_index: dim,
        beta1,
        beta2,
        r_squared,
        n_samples: rows.len(),
    })
}

pub fn classify_detector(fit: &RegressionFit, criteria: &DetectorCriteria) -> DetectorClass {
    let explained = fit.r_squared >= criteria.r2_threshold;
    let numerosity = explained && fit.beta2.abs() < criteria.complementary_max;
    let area = explained && fit.beta1.abs() < criteria.complementary_max;
    let kind = match (numerosity, area) {
        (true, true) if fit.beta2.abs() > fit.beta1.abs() => DetectorKind::Area,
        (true, _) => DetectorKind::Numerosity,
        (false, true) => DetectorKind::Area,
        (false, false) => DetectorKind::Neither,
    };
    DetectorClass {
        kind,
        ambiguous: numerosity && area,
    }
}

/// Fits and classifies every dimension. Per-dimension failures are recorded
/// in the report; a missing area column is an error.
pub fn probe_all_dimensions(
    probe: &ProbeDataset,
    criteria: &DetectorCriteria,
) -> Result<DetectorReport> {
    criteria.validate()?;
    probe.area()?;
    let results: Vec<Result<RegressionFit>> = with_worker_pool(|| {
        (0..probe.latent_dim)
            .into_par_iter()
            .map(|d| fit_dimension(probe, d))
            .collect()
    });
    let mut report = DetectorReport {
        criteria: *criteria,
        fits: Vec::new(),
        classes: Vec::new(),
        failures: Vec::new(),
        numerosity_detectors: Vec::new(),
        area_detectors: Vec::new(),
        opposite_sign_area_pairs: Vec::new(),
    };
    for (dim, result) in results.into_iter().enumerate() {
        match result {
            Ok(fit) => {
                let class = classify_detector(&fit, criteria);
                match class.kind {
                    DetectorKind::Numerosity => report.numerosity_detectors.push(dim),
                    DetectorKind::Area => report.area_detectors.push(dim),
                    DetectorKind::Neither => {}
                }
                report.fits.push(fit);
                report.classes.push(class);
            }
            Err(e) => report.failures.push((dim, e.to_string())),
        }
    }
    let beta2 = |d: usize| {
        report
            .fits
            .iter()
            .find(|f| f.dim_index == d)
            .map_or(0.0, |f| f.beta2)
    };
    let area = &report.area_detectors;
    let mut pairs = Vec::new();
    for (i, &a) in area.iter().enumerate() {
        for &b in &area[i + 1..] {
            if beta2(a) * beta2(b) < 0.0 {
                pairs.push((a, b));
            }
        }
    }
    report.opposite_sign_area_pairs = pairs;
    Ok(report)
}
