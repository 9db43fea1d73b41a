//! Softmax readout on frozen latents and count average precision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ActivationLayer, FeatureMap, Linear, Optimizer, OptimizerKind, Param};

/// Count labels 0, 1, 2, 3 and 4+.
pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutConfig {
    pub latent_dim: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    /// Per-class loss weights; `None` uses inverse class frequency.
    pub class_weights: Option<Vec<f64>>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ReadoutConfig {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            hidden_units: 160,
            hidden_layers: 2,
            class_weights: None,
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_units == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "readout latent_dim, hidden_units and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "readout lr must be positive, got {}",
                self.lr
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != NUM_CLASSES || w.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!(
                    "readout class_weights needs {NUM_CLASSES} non-negative values"
                )));
            }
        }
        Ok(())
    }
}

/// A trained multilayer perceptron from latent codes to class scores.
pub struct Readout {
    pub config: ReadoutConfig,
    layers: Vec<Linear<f64>>,
    acts: Vec<ActivationLayer<f64>>,
}

impl Readout {
    fn new(config: ReadoutConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        let mut width = config.latent_dim;
        for i in 0..config.hidden_layers {
            layers.push(Linear::new(
                &format!("readout.hidden{i}"),
                width,
                config.hidden_units,
                &mut rng,
            ));
            width = config.hidden_units;
        }
        layers.push(Linear::new("readout.out", width, NUM_CLASSES, &mut rng));
        let acts = (0..config.hidden_layers)
            .map(|_| ActivationLayer::new(Activation::Relu))
            .collect();
        Self {
            config,
            layers,
            acts,
        }
    }

    fn check(&self, latents: &[f64]) -> Result<usize> {
        let d = self.config.latent_dim;
        if !latents.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "{} latent values are not a multiple of the readout width {d}",
                latents.len()
            )));
        }
        Ok(latents.len() / d)
    }

    /// Column-major `[latent][batch]` matrix for the given rows.
    fn batch(&self, latents: &[f64], rows: &[usize]) -> FeatureMap<f64> {
        let d = self.config.latent_dim;
        let mut data = vec![0.0; d * rows.len()];
        for (j, &r) in rows.iter().enumerate() {
            for k in 0..d {
                data[k * rows.len() + j] = latents[r * d + k];
            }
        }
        FeatureMap::matrix(d, rows.len(), data).expect("batch shape")
    }

    fn logits(&mut self, x: &FeatureMap<f64>, train: bool) -> Result<FeatureMap<f64>> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for i in 0..last {
            let y = self.layers[i].forward(&h, train)?;
            h = self.acts[i].forward(&y, train);
        }
        self.layers[last].forward(&h, train)
    }

    fn backward(&mut self, grad: &FeatureMap<f64>) -> Result<()> {
        let last = self.layers.len() - 1;
        let mut g = self.layers[last].backward(grad)?;
        for i in (0..last).rev() {
            g = self.acts[i].backward(&g)?;
            g = self.layers[i].backward(&g)?;
        }
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    /// Softmax class probabilities, one row per latent row.
    pub fn scores(&mut self, latents: &[f64]) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let n = self.check(latents)?;
        let mut out = Vec::with_capacity(n);
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(1024) {
            let logits = self.logits(&self.batch(latents, chunk), false)?;
            for j in 0..chunk.len() {
                out.push(softmax(&logits, j));
            }
        }
        Ok(out)
    }

    pub fn predict(&mut self, latents: &[f64]) -> Result<Vec<usize>> {
        Ok(self
            .scores(latents)?
            .iter()
            .map(|s| {
                (0..NUM_CLASSES)
                    .max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect())
    }
}

fn softmax(logits: &FeatureMap<f64>, j: usize) -> [f64; NUM_CLASSES] {
    let n = logits.batch;
    let mut p = [0.0; NUM_CLASSES];
    let max = (0..NUM_CLASSES)
        .map(|c| logits.data[c * n + j])
        .fold(f64::NEG_INFINITY, f64::max);
    for (c, v) in p.iter_mut().enumerate() {
        *v = (logits.data[c * n + j] - max).exp();
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn inverse_frequency(labels: &[usize]) -> Vec<f64> {
    let mut counts = [0usize; NUM_CLASSES];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                labels.len() as f64 / (present as f64 * c as f64)
            }
        })
        .collect()
}

/// Trains a readout with class-weighted cross-entropy and Adam.
/// `latents` is row-major `[labels.len()][config.latent_dim]`.
pub fn train_readout(latents: &[f64], labels: &[usize], config: &ReadoutConfig) -> Result<Readout> {
    config.validate()?;
    let mut readout = Readout::new(config.clone());
    let n = readout.check(latents)?;
    if n != labels.len() {
        return Err(Error::Shape(format!(
            "{n} latent rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::DegenerateInput(
            "no samples to train the readout on".into(),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Domain(format!("label {l} outside 0..{NUM_CLASSES}")));
    }
    let weights = config
        .class_weights
        .clone()
        .unwrap_or_else(|| inverse_frequency(labels));
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7ead0_u64);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(config.batch_size) {
            let b = rows.len();
            let logits = readout.logits(&readout.batch(latents, rows), true)?;
            let mut grad = FeatureMap::zeros(NUM_CLASSES, b, 1, 1);
            let mut loss = 0.0;
            for (j, &r) in rows.iter().enumerate() {
                let p = softmax(&logits, j);
                let w = weights[labels[r]];
                loss -= w * p[labels[r]].ln();
                for (c, pc) in p.iter().enumerate() {
                    let target = if c == labels[r] { 1.0 } else { 0.0 };
                    grad.data[c * b + j] = w * (pc - target) / b as f64;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "readout loss is {loss} in epoch {epoch}"
                )));
            }
            readout.backward(&grad)?;
            opt.step(&mut readout.params_mut(), config.lr);
        }
    }
    Ok(readout)
}

/// Per-class and mean count average precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes that have an AP.
    pub mean: f64,
}

/// All-points average precision of `scores` (higher ranks first, ties broken
/// by index) against `positives`. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

fn mean_present(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Count AP from per-sample class scores.
pub fn count_ap(scores: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<ApReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let per_class: Vec<Option<f64>> = (0..NUM_CLASSES)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let ap = average_precision(&s, &pos);
            if ap.is_none() {
                log::warn!("class {c} has no positives; AP undefined and excluded from the mean");
            }
            ap
        })
        .collect();
    let mean = mean_present(&per_class);
    Ok(ApReport { per_class, mean })
}

pub fn evaluate_readout(
    readout: &mut Readout,
    latents: &[f64],
    labels: &[usize],
) -> Result<ApReport> {
    let scores = readout.scores(latents)?;
    count_ap(&scores, labels)
}

/// Expected AP of an uninformative ranking: the prevalence of each class.
pub fn chance_ap(labels: &[usize]) -> ApReport {
    let per_class: Vec<Option<f64>> = (0..NUM_CLASSES)
        .map(|c| {
            let k = labels.iter().filter(|&&l| l == c).count();
            (k > 0).then(|| k as f64 / labels.len() as f64)
        })
        .collect();
    let mean = mean_present(&per_class);
    ApReport { per_class, mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn ap_examples() {
        assert!(
            (average_precision(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap()
                - (1.0 + 2.0 / 3.0) / 2.0)
                .abs()
                < 1e-15
        );
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
        // ties go to the lower index
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        let labels = [0, 1, 2, 3, 4, 4, 2];
        let scores: Vec<[f64; 5]> = labels
            .iter()
            .map(|&l| {
                let mut s = [0.0; 5];
                s[l] = 1.0;
                s
            })
            .collect();
        let r = count_ap(&scores, &labels).unwrap();
        assert!(r.per_class.iter().all(|a| *a == Some(1.0)));
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn missing_class_is_excluded() {
        let scores = vec![[0.2, 0.8, 0.0, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0, 0.0]];
        let r = count_ap(&scores, &[1, 0]).unwrap();
        assert_eq!(r.per_class[2..], [None, None, None]);
        assert_eq!(r.mean, 1.0);
    }

    proptest! {
        #[test]
        fn ap_is_order_invariant(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse scores so that ties occur; distinct scores make the
            // ranking independent of sample order
            let scores: Vec<f64> = (0..n).map(|i| rng.random_range(0..1000) as f64 + i as f64 * 1e-6).collect();
            let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let s2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let p2: Vec<bool> = perm.iter().map(|&i| pos[i]).collect();
            prop_assert_eq!(average_precision(&scores, &pos), average_precision(&s2, &p2));
        }
    }

    #[test]
    fn readout_overfits_small_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..20).map(|i| i % 5).collect();
        let latents: Vec<f64> = (0..20 * 6).map(|_| rng.sample(StandardNormal)).collect();
        let cfg = ReadoutConfig {
            epochs: 500,
            batch_size: 20,
            ..ReadoutConfig::new(6)
        };
        let mut r = train_readout(&latents, &labels, &cfg).unwrap();
        assert_eq!(r.predict(&latents).unwrap(), labels);
    }

    #[test]
    fn constant_labels_predict_that_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let latents: Vec<f64> = (0..30 * 4).map(|_| rng.sample(StandardNormal)).collect();
        let cfg = ReadoutConfig {
            epochs: 20,
            ..ReadoutConfig::new(4)
        };
        let mut r = train_readout(&latents, &[3; 30], &cfg).unwrap();
        let probe: Vec<f64> = (0..50 * 4).map(|_| rng.sample(StandardNormal)).collect();
        assert!(r.predict(&probe).unwrap().iter().all(|&p| p == 3));
    }

    #[test]
    fn shape_and_label_errors() {
        let cfg = ReadoutConfig {
            epochs: 1,
            ..ReadoutConfig::new(4)
        };
        assert!(matches!(
            train_readout(&[0.0; 10], &[0, 1], &cfg),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            train_readout(&[0.0; 8], &[0, 7], &cfg),
            Err(Error::Domain(_))
        ));
        let mut r = train_readout(&[0.0; 8], &[0, 1], &cfg).unwrap();
        assert!(matches!(
            evaluate_readout(&mut r, &[0.0; 6], &[0, 1]),
            Err(Error::Shape(_))
        ));
        let bad = ReadoutConfig {
            hidden_units: 0,
            ..cfg
        };
        assert!(matches!(
            train_readout(&[0.0; 8], &[0, 1], &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inverse_frequency_weights() {
        let w = inverse_frequency(&[0, 0, 0, 1]);
        assert_eq!(w, vec![4.0 / 6.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn chance_is_prevalence() {
        let r = chance_ap(&[0, 0, 1, 1, 1, 4, 4, 4]);
        assert_eq!(
            r.per_class,
            vec![Some(0.25), Some(0.375), None, None, Some(0.375)]
        );
    }
}
