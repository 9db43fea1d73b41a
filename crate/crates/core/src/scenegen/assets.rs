//! Foreground object bank and background sources.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Number of procedural object classes.
pub const PROCEDURAL_CLASSES: usize = 15;
const ASSET_SIZE: usize = 48;

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// A cut-out foreground object.
#[derive(Clone, Debug)]
pub struct ObjectAsset {
    pub asset_id: String,
    pub pixels: Image,
    pub mask: Mask,
    pub class_id: usize,
}

impl ObjectAsset {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.mask.height != self.pixels.height || self.mask.width != self.pixels.width {
            return Err(Error::Asset(format!(
                "{}: mask {}x{} does not match pixels {}x{}",
                self.asset_id,
                self.mask.height,
                self.mask.width,
                self.pixels.height,
                self.pixels.width
            )));
        }
        if self.mask.count() == 0 {
            return Err(Error::Asset(format!(
                "{}: mask has no foreground pixels",
                self.asset_id
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::Asset(format!(
                "{}: class {} outside [0, {num_classes})",
                self.asset_id, self.class_id
            )));
        }
        Ok(())
    }
}

/// Where foreground objects come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BankSource {
    Procedural {
        seed: u64,
        variants_per_class: usize,
    },
    Directory {
        path: PathBuf,
    },
}

/// Where backgrounds come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundSource {
    Procedural,
    Directory { path: PathBuf },
}

/// Loaded object bank and backgrounds.
#[derive(Clone, Debug)]
pub struct SceneAssets {
    pub objects: Vec<ObjectAsset>,
    pub num_classes: usize,
    pub backgrounds: Vec<Image>,
}

impl SceneAssets {
    pub fn load(bank: &BankSource, backgrounds: &BackgroundSource) -> Result<Self> {
        let (objects, num_classes) = match bank {
            BankSource::Procedural {
                seed,
                variants_per_class,
            } => (
                procedural_bank(*seed, *variants_per_class),
                PROCEDURAL_CLASSES,
            ),
            BankSource::Directory { path } => load_bank_dir(path)?,
        };
        let backgrounds = match backgrounds {
            BackgroundSource::Procedural => Vec::new(),
            BackgroundSource::Directory { path } => load_background_dir(path)?,
        };
        let assets = Self {
            objects,
            num_classes,
            backgrounds,
        };
        for obj in &assets.objects {
            obj.validate(assets.num_classes)?;
        }
        Ok(assets)
    }

    pub fn procedural(seed: u64) -> Self {
        Self::load(
            &BankSource::Procedural {
                seed,
                variants_per_class: 4,
            },
            &BackgroundSource::Procedural,
        )
        .expect("procedural assets are valid")
    }

    /// Indices of the assets belonging to `class_id`.
    pub fn class_members(&self, class_id: usize) -> Vec<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.class_id == class_id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Classes that have at least one asset.
    pub fn populated_classes(&self) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&c| self.objects.iter().any(|o| o.class_id == c))
            .collect()
    }
}

fn shape_inside(class_id: usize, x: f64, y: f64) -> bool {
    let r = (x * x + y * y).sqrt();
    let theta = y.atan2(x);
    let polygon = |n: f64, radius: f64| {
        let seg = 2.0 * PI / n;
        let a = (theta + PI / 2.0).rem_euclid(seg) - seg / 2.0;
        r < radius * (PI / n).cos() / a.cos()
    };
    match class_id {
        0 => r < 0.9,
        1 => (x / 0.95).powi(2) + (y / 0.55).powi(2) < 1.0,
        2 => x.abs().max(y.abs()) < 0.75,
        3 => x.abs() < 0.95 && y.abs() < 0.5,
        4 => y > -0.8 && y < 0.8 && x.abs() < (y + 0.8) / 1.6 * 0.95,
        5 => x.abs() + y.abs() < 0.92,
        6 => polygon(5.0, 0.92),
        7 => polygon(6.0, 0.92),
        8 => r < 0.55 + 0.38 * (5.0 * theta).cos(),
        9 => (x.abs() < 0.3 && y.abs() < 0.9) || (y.abs() < 0.3 && x.abs() < 0.9),
        10 => r > 0.45 && r < 0.9,
        11 => r < 0.9 && ((x - 0.45).powi(2) + y * y).sqrt() > 0.68,
        12 => {
            let (hx, hy) = (x * 1.25, -y * 1.25 + 0.2);
            (hx * hx + hy * hy - 1.0).powi(3) - hx * hx * hy.powi(3) < 0.0
        }
        13 => {
            ((x + 0.45).abs() < 0.35 && y.abs() < 0.9) || ((y - 0.55).abs() < 0.35 && x.abs() < 0.8)
        }
        _ => ((y + 0.55).abs() < 0.3 && x.abs() < 0.9) || (x.abs() < 0.28 && y.abs() < 0.9),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Textured geometric objects: `PROCEDURAL_CLASSES` shapes, each in several
/// colour/texture variants.
pub fn procedural_bank(seed: u64, variants_per_class: usize) -> Vec<ObjectAsset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class_id in 0..PROCEDURAL_CLASSES {
        for variant in 0..variants_per_class.max(1) {
            let mut mask = Mask::new(ASSET_SIZE, ASSET_SIZE);
            for yy in 0..ASSET_SIZE {
                for xx in 0..ASSET_SIZE {
                    let x = (xx as f64 + 0.5) / ASSET_SIZE as f64 * 2.0 - 1.0;
                    let y = (yy as f64 + 0.5) / ASSET_SIZE as f64 * 2.0 - 1.0;
                    mask.set(yy, xx, shape_inside(class_id, x, y));
                }
            }
            let hue =
                (class_id as f64 * 0.618_033_988_7 + rng.random_range(-0.06..0.06)).rem_euclid(1.0);
            let base = hsv_to_rgb(hue, rng.random_range(0.65..1.0), rng.random_range(0.7..1.0));
            let accent = hsv_to_rgb(
                hue + 0.5,
                rng.random_range(0.5..0.9),
                rng.random_range(0.5..0.9),
            );
            let texture = rng.random_range(0..3);
            let freq = rng.random_range(3.0..7.0);
            let mut pixels = Image::new(ASSET_SIZE, ASSET_SIZE, 3);
            for yy in 0..ASSET_SIZE {
                for xx in 0..ASSET_SIZE {
                    let u = xx as f64 / ASSET_SIZE as f64;
                    let v = yy as f64 / ASSET_SIZE as f64;
                    let w = match texture {
                        0 => 0.5 + 0.5 * (2.0 * PI * freq * (u + v) / 2.0).sin(),
                        1 => (((u * freq).floor() + (v * freq).floor()) as i64 % 2) as f64,
                        _ => u * 0.6 + v * 0.4,
                    } * 0.35;
                    let edge = mask.get(yy, xx)
                        && [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)]
                            .iter()
                            .any(|(dy, dx)| {
                                let (ny, nx) = (yy as i64 + dy, xx as i64 + dx);
                                ny < 0
                                    || nx < 0
                                    || ny >= ASSET_SIZE as i64
                                    || nx >= ASSET_SIZE as i64
                                    || !mask.get(ny as usize, nx as usize)
                            });
                    for c in 0..3 {
                        let mut val = base[c] * (1.0 - w) + accent[c] * w;
                        if edge {
                            val *= 0.35;
                        }
                        pixels.set(yy, xx, c, val as f32);
                    }
                }
            }
            out.push(ObjectAsset {
                asset_id: format!("proc-c{class_id:02}-v{variant}"),
                pixels,
                mask,
                class_id,
            });
        }
    }
    out
}

/// Smooth low-saturation background.
#[allow(clippy::needless_range_loop)]
pub fn procedural_background<R: Rng>(height: usize, width: usize, rng: &mut R) -> Image {
    const GRID: usize = 4;
    let hue = rng.random_range(0.0..1.0);
    let base = hsv_to_rgb(hue, rng.random_range(0.0..0.3), rng.random_range(0.3..0.75));
    let mut grid = [[[0.0f64; 3]; GRID + 1]; GRID + 1];
    for row in grid.iter_mut() {
        for cell in row.iter_mut() {
            let shade = rng.random_range(-0.15..0.15);
            for (c, v) in cell.iter_mut().enumerate() {
                *v = base[c] + shade + rng.random_range(-0.03..0.03);
            }
        }
    }
    let mut img = Image::new(height, width, 3);
    for y in 0..height {
        for x in 0..width {
            let gy = y as f64 / height.max(2) as f64 * GRID as f64;
            let gx = x as f64 / width.max(2) as f64 * GRID as f64;
            let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - iy as f64, gx - ix as f64);
            let noise = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                let v = grid[iy][ix][c] * (1.0 - fy) * (1.0 - fx)
                    + grid[iy][ix + 1][c] * (1.0 - fy) * fx
                    + grid[iy + 1][ix][c] * fy * (1.0 - fx)
                    + grid[iy + 1][ix + 1][c] * fy * fx
                    + noise;
                img.set(y, x, c, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Loads a bank directory described by `bank.csv` with rows
/// `asset_id,image_file,mask_file,class_id` (paths relative to the directory).
/// Mask pixels brighter than mid-grey are foreground.
pub fn load_bank_dir(dir: &Path) -> Result<(Vec<ObjectAsset>, usize)> {
    let index = dir.join("bank.csv");
    let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut objects = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("asset_id,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Asset(format!(
                "{}:{}: expected 4 fields",
                index.display(),
                lineno + 1
            )));
        }
        let class_id: usize = fields[3].parse().map_err(|_| {
            Error::Asset(format!("{}:{}: bad class id", index.display(), lineno + 1))
        })?;
        let pixels = Image::load(&dir.join(fields[1]))?;
        let mask_img = Image::load(&dir.join(fields[2]))?;
        let mut mask = Mask::new(mask_img.height, mask_img.width);
        for y in 0..mask_img.height {
            for x in 0..mask_img.width {
                mask.set(y, x, mask_img.get(y, x, 0) > 0.5);
            }
        }
        objects.push(ObjectAsset {
            asset_id: fields[0].to_string(),
            pixels,
            mask,
            class_id,
        });
    }
    if objects.is_empty() {
        return Err(Error::Asset(format!("{}: bank is empty", index.display())));
    }
    let num_classes = objects.iter().map(|o| o.class_id).max().unwrap_or(0) + 1;
    Ok((objects, num_classes))
}

/// Writes a bank in the directory layout read by [`load_bank_dir`].
pub fn save_bank_dir(objects: &[ObjectAsset], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("asset_id,image_file,mask_file,class_id\n");
    for obj in objects {
        let img_name = format!("{}.png", obj.asset_id);
        let mask_name = format!("{}.mask.png", obj.asset_id);
        obj.pixels.save_png(&dir.join(&img_name))?;
        let mut m = Image::new(obj.mask.height, obj.mask.width, 3);
        for (i, &v) in obj.mask.data.iter().enumerate() {
            let val = if v { 1.0 } else { 0.0 };
            m.data[i * 3..i * 3 + 3].iter_mut().for_each(|p| *p = val);
        }
        m.save_png(&dir.join(&mask_name))?;
        index.push_str(&format!(
            "{},{img_name},{mask_name},{}\n",
            obj.asset_id, obj.class_id
        ));
    }
    let path = dir.join("bank.csv");
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

fn load_background_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Asset(format!(
            "{}: no background images",
            dir.display()
        )));
    }
    paths.iter().map(|p| Image::load(p)).collect()
}
