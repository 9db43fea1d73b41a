//! Response profiles over numerosity and log-area bins, and latent traversals.

use serde::{Deserialize, Serialize};

use super::ProbeDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scenegen::MAX_NUMEROSITY;
use crate::vae::Vae;

/// Statistics of one latent dimension for one (numerosity, area bin) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileCell {
    pub numerosity: usize,
    /// `None` for empty scenes, which have no area.
    pub area_bin: Option<usize>,
    pub count: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; absent below two samples.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseProfile {
    pub dim: usize,
    /// `n_bins + 1` log-spaced bin edges in pixels.
    pub area_edges: Vec<f64>,
    /// Empty scenes first, then numerosity-major over area bins.
    pub cells: Vec<ProfileCell>,
}

impl ResponseProfile {
    pub fn cell(&self, numerosity: usize, area_bin: Option<usize>) -> Option<&ProfileCell> {
        self.cells
            .iter()
            .find(|c| c.numerosity == numerosity && c.area_bin == area_bin)
    }
}

fn stats(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Groups dimension `dim` by numerosity and `n_bins` log-spaced area bins.
pub fn response_profile(
    probe: &ProbeDataset,
    dim: usize,
    n_bins: usize,
) -> Result<ResponseProfile> {
    probe.check_dim(dim)?;
    if n_bins == 0 {
        return Err(Error::Config(
            "response profile needs at least one area bin".into(),
        ));
    }
    let area = probe.area()?;
    let positive: Vec<f64> = area.iter().copied().filter(|a| *a > 0.0).collect();
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let area_edges: Vec<f64> = if positive.is_empty() {
        Vec::new()
    } else {
        let (l, h) = (lo.ln(), hi.ln());
        (0..=n_bins)
            .map(|i| (l + (h - l) * i as f64 / n_bins as f64).exp())
            .collect()
    };
    let bin_of = |a: f64| -> Option<usize> {
        if !(a > 0.0) || area_edges.is_empty() {
            return None;
        }
        let (l, h) = (lo.ln(), hi.ln());
        if h <= l {
            return Some(0);
        }
        Some((((a.ln() - l) / (h - l) * n_bins as f64) as usize).min(n_bins - 1))
    };
    let max_n = probe
        .numerosity
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(MAX_NUMEROSITY);
    let mut groups: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n_bins + 1]; max_n + 1];
    for i in 0..probe.len() {
        let slot = bin_of(area[i]).map_or(n_bins, |b| b);
        groups[probe.numerosity[i]][slot].push(probe.latents[i * probe.latent_dim + dim]);
    }
    let mut cells = Vec::new();
    let empty = &groups[0][n_bins];
    let (mean, std) = stats(empty);
    cells.push(ProfileCell {
        numerosity: 0,
        area_bin: None,
        count: empty.len(),
        mean,
        std,
    });
    for (n, row) in groups.iter().enumerate().skip(1) {
        for (b, values) in row.iter().take(n_bins).enumerate() {
            let (mean, std) = stats(values);
            cells.push(ProfileCell {
                numerosity: n,
                area_bin: Some(b),
                count: values.len(),
                mean,
                std,
            });
        }
    }
    Ok(ResponseProfile {
        dim,
        area_edges,
        cells,
    })
}

/// Empirical standard deviation of every latent dimension.
pub fn latent_std(probe: &ProbeDataset) -> Vec<f64> {
    (0..probe.latent_dim)
        .map(|d| {
            let col = probe.column(d);
            let n = col.len().max(1) as f64;
            let mean = col.iter().sum::<f64>() / n;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Reconstructions with single latent coordinates shifted, one row per dimension.
#[derive(Clone, Debug)]
pub struct TraversalGrid {
    pub dims: Vec<usize>,
    pub deltas: Vec<f64>,
    /// `images[row][col]` decodes the mean with `dims[row]` moved by `deltas[col]` standard deviations.
    pub images: Vec<Vec<Image>>,
}

/// Decodes `mu + delta * sigma_hat[dim]` for every dim and delta, where `mu`
/// is the posterior mean of `image`.
pub fn latent_traversal(
    model: &mut Vae<f32>,
    image: &Image,
    dims: &[usize],
    deltas: &[f64],
    sigma_hat: &[f64],
) -> Result<TraversalGrid> {
    let latent = model.latent_dim();
    if sigma_hat.len() != latent {
        return Err(Error::Shape(format!(
            "{} reference deviations for latent width {latent}",
            sigma_hat.len()
        )));
    }
    if let Some(&d) = dims.iter().find(|&&d| d >= latent) {
        return Err(Error::Shape(format!(
            "dimension {d} out of range for latent width {latent}"
        )));
    }
    let mu = model.encode(image)?.mu;
    let mut images = Vec::with_capacity(dims.len());
    for &d in dims {
        let mut row = Vec::with_capacity(deltas.len());
        for &delta in deltas {
            let mut z = mu.clone();
            if delta != 0.0 {
                z[d] += delta * sigma_hat[d];
            }
            row.push(model.decode(&z)?);
        }
        images.push(row);
    }
    Ok(TraversalGrid {
        dims: dims.to_vec(),
        deltas: deltas.to_vec(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::{ArchitectureConfig, Preset};

    fn planted() -> ProbeDataset {
        // dim 0 tracks N, dim 1 tracks log A
        let mut latents = Vec::new();
        let mut n = Vec::new();
        let mut a = Vec::new();
        for k in 1..=4usize {
            for j in 0..40 {
                let area = 50.0 * (1.0 + j as f64 * 0.5) * k as f64;
                n.push(k);
                a.push(area);
                latents.extend([k as f64, area.ln()]);
            }
        }
        n.push(0);
        a.push(0.0);
        latents.extend([0.0, -1.0]);
        ProbeDataset::new(latents, 2, n, Some(a)).unwrap()
    }

    #[test]
    fn numerosity_profile_is_flat_across_area() {
        let p = response_profile(&planted(), 0, 6).unwrap();
        assert_eq!(p.area_edges.len(), 7);
        assert_eq!(p.cell(0, None).unwrap().count, 1);
        for cell in p.cells.iter().filter(|c| c.count > 0 && c.numerosity > 0) {
            assert_eq!(cell.mean, Some(cell.numerosity as f64));
        }
        let total: usize = p.cells.iter().map(|c| c.count).sum();
        assert_eq!(total, 161);
    }

    #[test]
    fn area_profile_is_monotone() {
        let p = response_profile(&planted(), 1, 5).unwrap();
        for n in 1..=4 {
            let means: Vec<f64> = (0..5)
                .filter_map(|b| p.cell(n, Some(b)).and_then(|c| c.mean))
                .collect();
            assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
        }
    }

    #[test]
    fn single_sample_profile() {
        let probe = ProbeDataset::new(vec![0.3], 1, vec![2], Some(vec![100.0])).unwrap();
        let p = response_profile(&probe, 0, 3).unwrap();
        let populated: Vec<&ProfileCell> = p.cells.iter().filter(|c| c.count > 0).collect();
        assert_eq!(populated.len(), 1);
        assert_eq!((populated[0].mean, populated[0].std), (Some(0.3), None));
        assert!(p
            .cells
            .iter()
            .filter(|c| c.count == 0)
            .all(|c| c.mean.is_none()));
    }

    #[test]
    fn traversal_grid_contract() {
        let mut model = Vae::<f32>::new(ArchitectureConfig::preset(Preset::Tiny), 3).unwrap();
        let image = Image::filled(8, 8, 0.4);
        let sigma = vec![1.0; 4];
        let mu = model.encode(&image).unwrap().mu;
        let base = model.decode(&mu).unwrap();
        let g = latent_traversal(&mut model, &image, &[0], &[0.0], &sigma).unwrap();
        assert_eq!(g.images[0][0], base);
        let g = latent_traversal(
            &mut model,
            &image,
            &[1, 3],
            &[-2.0, -1.0, 0.0, 1.0, 2.0],
            &sigma,
        )
        .unwrap();
        assert_eq!((g.images.len(), g.images[0].len()), (2, 5));
        assert_eq!(g.images[1][2], base);
        assert_ne!(g.images[1][4], base);
        assert!(matches!(
            latent_traversal(&mut model, &image, &[4], &[0.0], &sigma),
            Err(Error::Shape(_))
        ));
    }
}
