//! Rebalancing, augmentation and in-memory image storage.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::scenegen::{DatasetManifest, SceneRecord};
use crate::seed::with_worker_pool;

/// Drops `floor(fraction * count)` records, chosen uniformly at random, from
/// every label whose count exceeds the mean label count. Survivors keep their
/// order.
pub fn rebalance_records(records: &[SceneRecord], fraction: f64, seed: u64) -> Vec<SceneRecord> {
    if records.is_empty() || fraction <= 0.0 {
        return records.to_vec();
    }
    let labels = records.iter().map(|r| r.numerosity).max().unwrap_or(0) + 1;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); labels];
    for (i, r) in records.iter().enumerate() {
        by_label[r.numerosity].push(i);
    }
    // mean over the labels that occur
    let present: Vec<&Vec<usize>> = by_label.iter().filter(|v| !v.is_empty()).collect();
    let mean = records.len() as f64 / present.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; records.len()];
    for members in &by_label {
        if (members.len() as f64) <= mean {
            continue;
        }
        let remove = (fraction * members.len() as f64).floor() as usize;
        for j in sample(&mut rng, members.len(), remove) {
            keep[members[j]] = false;
        }
    }
    records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect()
}

/// [`rebalance_records`] on a manifest; the histogram is recomputed.
pub fn rebalance_dataset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> DatasetManifest {
    manifest.with_records(rebalance_records(&manifest.records, fraction, seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub crop: bool,
    /// Smallest crop, as a fraction of the image area.
    pub crop_min_area: f64,
    /// Per-channel additive shift drawn from `±color_shift`; 0 disables.
    pub color_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            crop: true,
            crop_min_area: 0.9,
            color_shift: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip: false,
            crop: false,
            crop_min_area: 1.0,
            color_shift: 0.0,
        }
    }
}

/// Random flip, crop (then resize to `out_size`) and colour shift.
pub fn augment<R: Rng>(
    image: &Image,
    config: &AugmentConfig,
    out_size: (usize, usize),
    rng: &mut R,
) -> Image {
    let mut img = if config.hflip && rng.random_bool(0.5) {
        image.flip_horizontal()
    } else {
        image.clone()
    };
    if config.crop && config.crop_min_area < 1.0 {
        let area = rng.random_range(config.crop_min_area..=1.0);
        let side = area.sqrt();
        let h = ((img.height as f64 * side).round() as usize).clamp(1, img.height);
        let w = ((img.width as f64 * side).round() as usize).clamp(1, img.width);
        let y = rng.random_range(0..=img.height - h);
        let x = rng.random_range(0..=img.width - w);
        img = img.crop(y, x, h, w);
    }
    let mut img = img.resize(out_size.0, out_size.1);
    if config.color_shift > 0.0 {
        let shift: Vec<f32> = (0..img.channels)
            .map(|_| rng.random_range(-config.color_shift..=config.color_shift) as f32)
            .collect();
        for px in img.data.chunks_exact_mut(shift.len()) {
            for (v, d) in px.iter_mut().zip(&shift) {
                *v = (*v + d).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Decoded 8-bit images kept in memory.
#[derive(Clone, Debug)]
pub struct ImageStore {
    images: Vec<(usize, usize, Vec<u8>)>,
}

impl ImageStore {
    pub fn load(manifest: &DatasetManifest, records: &[SceneRecord]) -> Result<Self> {
        let images = with_worker_pool(|| {
            records
                .par_iter()
                .map(|r| {
                    let img = manifest.load_image(r)?;
                    let bytes = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
                    Ok((img.height, img.width, bytes))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self { images })
    }

    pub fn from_images(images: &[Image]) -> Self {
        Self {
            images: images
                .iter()
                .map(|img| {
                    (
                        img.height,
                        img.width,
                        img.data
                            .iter()
                            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> Image {
        let (h, w, bytes) = &self.images[i];
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Image::from_vec(*h, *w, 3, data).expect("stored image is consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::Split;
    use proptest::prelude::*;

    fn records(counts: &[usize]) -> Vec<SceneRecord> {
        let mut out = Vec::new();
        for (label, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.push(SceneRecord {
                    image_path: format!("{}.png", out.len()),
                    numerosity: label,
                    cumulative_area: None,
                    class_ids: vec![],
                    object_boxes: vec![],
                    split: Split::Train,
                    seed: out.len() as u64,
                });
            }
        }
        out
    }

    fn histogram(r: &[SceneRecord], n: usize) -> Vec<usize> {
        let mut h = vec![0; n];
        r.iter().for_each(|r| h[r.numerosity] += 1);
        h
    }

    #[test]
    fn rebalance_examples() {
        assert_eq!(
            histogram(&rebalance_records(&records(&[100, 50, 30]), 0.1, 1), 3),
            vec![90, 50, 30]
        );
        assert_eq!(
            histogram(&rebalance_records(&records(&[40, 40, 40]), 0.1, 1), 3),
            vec![40, 40, 40]
        );
        assert_eq!(
            histogram(&rebalance_records(&records(&[10, 10, 1000]), 0.1, 1), 3),
            vec![10, 10, 900]
        );
    }

    #[test]
    fn rebalance_preserves_order_and_is_seeded() {
        let r = records(&[100, 50, 30]);
        let a = rebalance_records(&r, 0.1, 7);
        let b = rebalance_records(&r, 0.1, 7);
        assert_eq!(a, b);
        let seeds: Vec<u64> = a.iter().map(|r| r.seed).collect();
        assert!(seeds.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn rebalance_rule(counts in proptest::collection::vec(1usize..200, 1..6), fraction in 0.0f64..0.99, seed in any::<u64>()) {
            let r = records(&counts);
            let out = rebalance_records(&r, fraction, seed);
            let h = histogram(&out, counts.len());
            let mean = r.len() as f64 / counts.len() as f64;
            let mut removed = 0;
            for (c, after) in counts.iter().zip(&h) {
                if (*c as f64) <= mean {
                    prop_assert_eq!(c, after);
                } else {
                    let k = (fraction * *c as f64).floor() as usize;
                    prop_assert_eq!(*after, c - k);
                    removed += k;
                }
            }
            prop_assert_eq!(out.len(), r.len() - removed);
        }
    }

    fn gradient_image() -> Image {
        let mut img = Image::new(16, 16, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 97) as f32 / 96.0;
        }
        img
    }

    #[test]
    fn disabled_augmentation_only_resizes() {
        let img = gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            augment(&img, &AugmentConfig::disabled(), (16, 16), &mut rng),
            img
        );
        let a = augment(&img, &AugmentConfig::disabled(), (8, 8), &mut rng);
        assert_eq!(a, img.resize(8, 8));
    }

    #[test]
    fn seeded_augmentation_repeats() {
        let img = gradient_image();
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, (12, 12), &mut ChaCha8Rng::seed_from_u64(3));
        let b = augment(&img, &cfg, (12, 12), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (12, 12));
    }

    #[test]
    fn color_shift_is_bounded() {
        let img = Image::filled(4, 4, 0.5);
        let cfg = AugmentConfig {
            color_shift: 0.1,
            ..AugmentConfig::disabled()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut max_delta = 0.0f32;
        for _ in 0..1000 {
            let out = augment(&img, &cfg, (4, 4), &mut rng);
            for (a, b) in out.data.iter().zip(&img.data) {
                max_delta = max_delta.max((a - b).abs());
            }
        }
        assert!(max_delta <= 0.1 + 1e-6, "{max_delta}");
        assert!(max_delta > 0.09);
    }
}
