//! Raster plots of response profiles and traversal grids.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::probes::{ResponseProfile, TraversalGrid};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: i64 = 40;
const GAP: usize = 2;
/// Line colours for numerosity 0 to 4.
const PALETTE: [[u8; 3]; 5] = [
    [120, 120, 120],
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        put(img, x, y, c);
    }
}

fn marker(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    for dy in -2..=2 {
        for dx in -2..=2 {
            put(img, x + dx, y + dy, c);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    crate::archive::write_atomic(path, &bytes)
}

/// Mean and one standard deviation per (numerosity, area bin), one line per
/// numerosity over log-area bins. Empty bins leave gaps.
pub fn profile_plot(profile: &ResponseProfile) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as i64, HEIGHT as i64);
    let bins = profile.area_edges.len().saturating_sub(1).max(1);
    let populated = profile
        .cells
        .iter()
        .filter_map(|c| c.mean.map(|m| (m, c.std.unwrap_or(0.0))));
    let (lo, hi) = populated.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (m, s)| {
        (lo.min(m - s), hi.max(m + s))
    });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 1.0, lo + 1.0)
    } else {
        (-1.0, 1.0)
    };
    let x_of = |bin: Option<usize>| match bin {
        None => MARGIN / 2,
        Some(b) => MARGIN + 10 + ((w - 2 * MARGIN - 20) * (2 * b as i64 + 1)) / (2 * bins as i64),
    };
    let y_of =
        |v: f64| h - MARGIN - (((v - lo) / (hi - lo)) * (h - 2 * MARGIN) as f64).round() as i64;
    let axis = [0, 0, 0];
    line(
        &mut img,
        (MARGIN, h - MARGIN),
        (w - MARGIN, h - MARGIN),
        axis,
    );
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);
    for b in 0..=bins {
        let x = MARGIN + 10 + ((w - 2 * MARGIN - 20) * b as i64) / bins as i64;
        line(&mut img, (x, h - MARGIN), (x, h - MARGIN + 4), axis);
    }
    let max_n = profile
        .cells
        .iter()
        .map(|c| c.numerosity)
        .max()
        .unwrap_or(0);
    for n in 0..=max_n {
        let color = PALETTE[n.min(PALETTE.len() - 1)];
        let mut prev: Option<(i64, i64)> = None;
        for cell in profile.cells.iter().filter(|c| c.numerosity == n) {
            let Some(mean) = cell.mean else {
                prev = None;
                continue;
            };
            let x = x_of(cell.area_bin) + n as i64 - 2;
            let y = y_of(mean);
            if let Some(std) = cell.std {
                line(
                    &mut img,
                    (x, y_of(mean - std)),
                    (x, y_of(mean + std)),
                    color,
                );
            }
            marker(&mut img, x, y, color);
            if let (Some(p), Some(_)) = (prev, cell.area_bin) {
                line(&mut img, p, (x, y), color);
            }
            prev = cell.area_bin.map(|_| (x, y));
        }
    }
    img
}

/// Tiles reconstructions, one row per traversed dimension.
pub fn traversal_image(grid: &TraversalGrid) -> Result<RgbImage> {
    let first = grid
        .images
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Shape("empty traversal grid".into()))?;
    let (th, tw) = (first.height, first.width);
    let rows = grid.images.len();
    let cols = grid.images[0].len();
    let mut img = RgbImage::from_pixel(
        (cols * tw + (cols - 1) * GAP) as u32,
        (rows * th + (rows - 1) * GAP) as u32,
        Rgb([255, 255, 255]),
    );
    for (r, row) in grid.images.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Shape("ragged traversal grid".into()));
        }
        for (c, tile) in row.iter().enumerate() {
            if (tile.height, tile.width) != (th, tw) {
                return Err(Error::Shape("traversal tiles differ in size".into()));
            }
            let rgb: RgbImage = Image::to_rgb8(tile);
            image::imageops::replace(
                &mut img,
                &rgb,
                (c * (tw + GAP)) as i64,
                (r * (th + GAP)) as i64,
            );
        }
    }
    Ok(img)
}

pub fn render_profile_plot(profile: &ResponseProfile, path: &Path) -> Result<()> {
    save(&profile_plot(profile), path)
}

pub fn render_traversal_grid(grid: &TraversalGrid, path: &Path) -> Result<()> {
    save(&traversal_image(grid)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{response_profile, ProbeDataset};

    #[test]
    fn traversal_layout() {
        let tile = |v: f32| Image::filled(8, 8, v);
        let grid = TraversalGrid {
            dims: vec![0, 1],
            deltas: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            images: (0..2)
                .map(|r| (0..5).map(|c| tile((r * 5 + c) as f32 / 10.0)).collect())
                .collect(),
        };
        let img = traversal_image(&grid).unwrap();
        assert_eq!(
            (img.width(), img.height()),
            (5 * 8 + 4 * GAP as u32, 2 * 8 + GAP as u32)
        );
        let expected = tile(0.7).to_rgb8();
        assert_eq!(
            img.get_pixel(2 * (8 + GAP as u32) + 3, 8 + GAP as u32 + 3),
            expected.get_pixel(0, 0)
        );
    }

    #[test]
    fn profile_with_empty_bins_is_deterministic() {
        let probe = ProbeDataset::new(
            vec![0.1, 0.5, 0.9, 0.2],
            1,
            vec![1, 2, 2, 0],
            Some(vec![10.0, 400.0, 420.0, 0.0]),
        )
        .unwrap();
        let profile = response_profile(&probe, 0, 6).unwrap();
        assert!(profile.cells.iter().any(|c| c.count == 0));
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_profile_plot(&profile, &a).unwrap();
        render_profile_plot(&profile, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
