//! Feature perceptual reconstruction loss over a frozen, layered feature
//! extractor.
//!
//! The loss is the sum over the selected tap points of the mean squared error
//! between the extractor activations of the input and of the reconstruction.
//! Each per-layer MSE is averaged over every element of that layer's tensor
//! (channels, batch and spatial positions) and all layers carry equal weight.
//!
//! The builtin extractor is a fixed, seeded three-block network
//! (8/16/32 channels, 3x3 kernels, stride 2, ReLU) tapped after each ReLU.
//! Pretrained networks can be supplied through the named-tensor archive
//! format with their graph declared in the archive header.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive, NamedTensor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvGeometry, FeatureMap, Scalar};

pub const BUILTIN_EXTRACTOR_ID: &str = "builtin-3block";
pub const DEFAULT_BUILTIN_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightsSource {
    BuiltinFixed {
        seed: u64,
    },
    ExternalFile {
        path: PathBuf,
    },
    /// Single tap on the raw input; useful as a reference point.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub extractor_id: String,
    pub layer_names: Vec<String>,
    pub weights_source: WeightsSource,
    /// `(height, width, channels)` of accepted inputs.
    pub input_size: (usize, usize, usize),
    pub frozen: bool,
}

impl FeatureExtractorSpec {
    pub fn builtin(input_size: (usize, usize, usize)) -> Self {
        Self {
            extractor_id: BUILTIN_EXTRACTOR_ID.into(),
            layer_names: vec!["relu1".into(), "relu2".into(), "relu3".into()],
            weights_source: WeightsSource::BuiltinFixed {
                seed: DEFAULT_BUILTIN_SEED,
            },
            input_size,
            frozen: true,
        }
    }

    pub fn identity(input_size: (usize, usize, usize)) -> Self {
        Self {
            extractor_id: "identity".into(),
            layer_names: vec!["input".into()],
            weights_source: WeightsSource::Identity,
            input_size,
            frozen: true,
        }
    }
}

/// Declared layer of an extractor graph (stored in archive headers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDecl {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu {
        name: String,
    },
    MaxPool {
        name: String,
        kernel: usize,
        stride: usize,
    },
}

impl LayerDecl {
    pub fn name(&self) -> &str {
        match self {
            LayerDecl::Conv { name, .. }
            | LayerDecl::Relu { name }
            | LayerDecl::MaxPool { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorHeader {
    pub extractor_id: String,
    pub layers: Vec<LayerDecl>,
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

#[allow(clippy::large_enum_variant)]
enum Stage<F> {
    Conv(Conv2d<F>),
    Relu,
    MaxPool { kernel: usize, stride: usize },
}

/// Frozen parameters plus graph of a feature extractor.
pub struct FeatureExtractor<F> {
    header: ExtractorHeader,
    stages: Vec<Stage<F>>,
}

/// Activations keyed by tap name.
pub type ActivationSet<F> = BTreeMap<String, FeatureMap<F>>;

/// Per-layer perceptual loss terms and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualLoss {
    pub total: f64,
    pub per_layer: BTreeMap<String, f64>,
}

impl<F: Scalar> FeatureExtractor<F> {
    /// The seeded 3-block stand-in network.
    pub fn builtin(seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &cout) in [8usize, 16, 32].iter().enumerate() {
            layers.push(LayerDecl::Conv {
                name: format!("conv{}", i + 1),
                in_channels: cin,
                out_channels: cout,
                kernel: 3,
                stride: 2,
                padding: 1,
            });
            layers.push(LayerDecl::Relu {
                name: format!("relu{}", i + 1),
            });
            cin = cout;
        }
        let header = ExtractorHeader {
            extractor_id: BUILTIN_EXTRACTOR_ID.into(),
            layers,
            input_mean: [0.5; 3],
            input_std: [0.5; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = build_stages(&header, &mut rng);
        Self { header, stages }
    }

    pub fn identity() -> Self {
        Self {
            header: ExtractorHeader {
                extractor_id: "identity".into(),
                layers: Vec::new(),
                input_mean: [0.0; 3],
                input_std: [1.0; 3],
            },
            stages: Vec::new(),
        }
    }

    pub fn from_spec(spec: &FeatureExtractorSpec) -> Result<Self> {
        let extractor = match &spec.weights_source {
            WeightsSource::BuiltinFixed { seed } => Self::builtin(*seed),
            WeightsSource::Identity => Self::identity(),
            WeightsSource::ExternalFile { path } => load_extractor_weights(path)?,
        };
        for name in &spec.layer_names {
            extractor.tap_index(name)?;
        }
        Ok(extractor)
    }

    pub fn header(&self) -> &ExtractorHeader {
        &self.header
    }

    /// Names of every tap point, including `input`.
    pub fn tap_names(&self) -> Vec<String> {
        std::iter::once("input".to_string())
            .chain(self.header.layers.iter().map(|l| l.name().to_string()))
            .collect()
    }

    /// Position of the tap in the stage list (`0` = normalized input).
    fn tap_index(&self, name: &str) -> Result<usize> {
        if name == "input" {
            return Ok(0);
        }
        self.header
            .layers
            .iter()
            .position(|l| l.name() == name)
            .map(|i| i + 1)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    fn normalize(&self, x: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        if x.channels != 3 {
            return Err(Error::Shape(format!(
                "extractor expects 3 channels, got {}",
                x.channels
            )));
        }
        let mut out = x.clone();
        let per = x.per_channel();
        for c in 0..3 {
            let m = F::of(self.header.input_mean[c]);
            let s = F::of(self.header.input_std[c]);
            for v in &mut out.data[c * per..(c + 1) * per] {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    /// Runs the graph up to the deepest requested tap, returning every
    /// intermediate (`outputs[0]` is the normalized input).
    fn run(&self, x: &FeatureMap<F>, depth: usize) -> Result<Vec<FeatureMap<F>>> {
        let mut outputs = Vec::with_capacity(depth + 1);
        outputs.push(self.normalize(x)?);
        for stage in &self.stages[..depth] {
            let prev = outputs.last().expect("non-empty");
            let next = match stage {
                Stage::Conv(conv) => conv.forward_frozen(prev)?,
                Stage::Relu => {
                    let mut y = prev.clone();
                    y.data.iter_mut().for_each(|v| *v = v.max(F::zero()));
                    y
                }
                Stage::MaxPool { kernel, stride } => max_pool(prev, *kernel, *stride)?.0,
            };
            outputs.push(next);
        }
        Ok(outputs)
    }

    pub fn extract_features(
        &self,
        x: &FeatureMap<F>,
        layer_names: &[String],
    ) -> Result<ActivationSet<F>> {
        let indices = layer_names
            .iter()
            .map(|n| self.tap_index(n))
            .collect::<Result<Vec<_>>>()?;
        let depth = indices.iter().copied().max().unwrap_or(0);
        let outputs = self.run(x, depth)?;
        Ok(layer_names
            .iter()
            .zip(indices)
            .map(|(n, i)| (n.clone(), outputs[i].clone()))
            .collect())
    }

    /// Loss value plus the gradient with respect to `x_recon` (scaled by `scale`).
    ///
    /// `normalizer` divides each layer's summed squared error; `None` uses the
    /// element count of that layer (a plain mean).
    pub fn loss_and_grad(
        &self,
        x: &FeatureMap<F>,
        x_recon: &FeatureMap<F>,
        layer_names: &[String],
        per_sample_sum: bool,
        scale: f64,
        want_grad: bool,
    ) -> Result<(PerceptualLoss, Option<FeatureMap<F>>)> {
        if !x.same_shape(x_recon) {
            return Err(Error::Shape(format!(
                "perceptual loss inputs differ: {} vs {}",
                x.shape_str(),
                x_recon.shape_str()
            )));
        }
        let indices = layer_names
            .iter()
            .map(|n| self.tap_index(n))
            .collect::<Result<Vec<_>>>()?;
        let depth = indices.iter().copied().max().unwrap_or(0);
        let target = self.run(x, depth)?;
        let recon = self.run(x_recon, depth)?;

        let mut per_layer = BTreeMap::new();
        let mut tap_grads: Vec<Option<FeatureMap<F>>> = vec![None; depth + 1];
        for (name, &i) in layer_names.iter().zip(&indices) {
            let (a, b) = (&recon[i], &target[i]);
            let denom = if per_sample_sum {
                a.batch as f64
            } else {
                a.len() as f64
            };
            let sse: f64 = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&p, &q)| {
                    let d = (p - q).as_f64();
                    d * d
                })
                .sum();
            per_layer.insert(name.clone(), sse / denom);
            if want_grad {
                let coef = F::of(2.0 * scale / denom);
                let g = tap_grads[i].get_or_insert_with(|| {
                    FeatureMap::zeros(a.channels, a.batch, a.height, a.width)
                });
                for ((gv, &p), &q) in g.data.iter_mut().zip(&a.data).zip(&b.data) {
                    *gv += coef * (p - q);
                }
            }
        }
        let total = per_layer.values().sum();
        let loss = PerceptualLoss { total, per_layer };
        if !want_grad {
            return Ok((loss, None));
        }

        let mut grad = tap_grads[depth].take();
        for idx in (1..=depth).rev() {
            let input = &recon[idx - 1];
            let g_out = match grad.take() {
                Some(g) => g,
                None => FeatureMap::zeros(
                    recon[idx].channels,
                    recon[idx].batch,
                    recon[idx].height,
                    recon[idx].width,
                ),
            };
            let mut g_in = match &self.stages[idx - 1] {
                Stage::Conv(conv) => conv.backward_input(&g_out, input.height, input.width),
                Stage::Relu => {
                    let mut g = g_out;
                    for (gv, &v) in g.data.iter_mut().zip(&input.data) {
                        if v <= F::zero() {
                            *gv = F::zero();
                        }
                    }
                    g
                }
                Stage::MaxPool { kernel, stride } => {
                    let (_, argmax) = max_pool(input, *kernel, *stride)?;
                    let mut g =
                        FeatureMap::zeros(input.channels, input.batch, input.height, input.width);
                    for (o, &src) in argmax.iter().enumerate() {
                        g.data[src] += g_out.data[o];
                    }
                    g
                }
            };
            if let Some(tap) = tap_grads[idx - 1].take() {
                g_in.data
                    .iter_mut()
                    .zip(&tap.data)
                    .for_each(|(a, &b)| *a += b);
            }
            grad = Some(g_in);
        }
        let mut g = match grad.or_else(|| tap_grads[0].take()) {
            Some(g) => g,
            None => FeatureMap::zeros(x.channels, x.batch, x.height, x.width),
        };
        // undo input normalization
        let per = g.per_channel();
        for c in 0..3 {
            let s = F::of(self.header.input_std[c]);
            for v in &mut g.data[c * per..(c + 1) * per] {
                *v /= s;
            }
        }
        Ok((loss, Some(g)))
    }

    pub fn feature_perceptual_loss(
        &self,
        x: &FeatureMap<F>,
        x_recon: &FeatureMap<F>,
        layer_names: &[String],
    ) -> Result<PerceptualLoss> {
        Ok(self
            .loss_and_grad(x, x_recon, layer_names, false, 1.0, false)?
            .0)
    }

    /// Sum of absolute values of every extractor parameter gradient.
    pub fn parameter_grad_norm(&self) -> f64 {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv(c) => Some(c.params()),
                _ => None,
            })
            .flatten()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64().abs())
            .sum()
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv(c) => Some(c.params()),
                _ => None,
            })
            .flatten()
            .map(|p| {
                NamedTensor::new(
                    p.name.clone(),
                    p.shape.clone(),
                    p.value.iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.header)
            .map_err(|e| Error::Weights(format!("header serialization: {e}")))?;
        write_archive(path, &meta, &self.named_tensors())
    }
}

fn build_stages<F: Scalar>(header: &ExtractorHeader, rng: &mut ChaCha8Rng) -> Vec<Stage<F>> {
    header
        .layers
        .iter()
        .map(|l| match l {
            LayerDecl::Conv {
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Stage::Conv(Conv2d::new(
                name,
                *in_channels,
                *out_channels,
                ConvGeometry::new(*kernel, *stride, *padding, *padding),
                true,
                rng,
            )),
            LayerDecl::Relu { .. } => Stage::Relu,
            LayerDecl::MaxPool { kernel, stride, .. } => Stage::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
        })
        .collect()
}

/// Max pooling without padding; returns the output and, per output element,
/// the flat index of the selected input element.
fn max_pool<F: Scalar>(
    x: &FeatureMap<F>,
    kernel: usize,
    stride: usize,
) -> Result<(FeatureMap<F>, Vec<usize>)> {
    let g = ConvGeometry::new(kernel, stride, 0, 0);
    let (oh, ow) = g
        .conv_out(x.height)
        .zip(g.conv_out(x.width))
        .ok_or_else(|| Error::Shape("max-pool input too small".into()))?;
    let mut out = FeatureMap::zeros(x.channels, x.batch, oh, ow);
    let mut argmax = vec![0; out.len()];
    for c in 0..x.channels {
        for n in 0..x.batch {
            let base = (c * x.batch + n) * x.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * x.width + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * x.width + ox * stride + kx;
                            if x.data[i] > x.data[best] {
                                best = i;
                            }
                        }
                    }
                    let o = ((c * x.batch + n) * oh + oy) * ow + ox;
                    out.data[o] = x.data[best];
                    argmax[o] = best;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Loads an extractor from a named-tensor archive whose header declares the graph.
pub fn load_extractor_weights<F: Scalar>(path: &Path) -> Result<FeatureExtractor<F>> {
    let archive =
        read_archive(path).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    let header: ExtractorHeader = serde_json::from_value(archive.meta.clone())
        .map_err(|e| Error::Weights(format!("extractor header: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stages = build_stages::<F>(&header, &mut rng);
    for stage in &mut stages {
        if let Stage::Conv(conv) = stage {
            for p in conv.params_mut() {
                let t = archive
                    .get(&p.name)
                    .ok_or_else(|| Error::Weights(format!("missing tensor {}", p.name)))?;
                if t.shape != p.shape {
                    return Err(Error::Weights(format!(
                        "tensor {} has shape {:?}, graph declares {:?}",
                        p.name, t.shape, p.shape
                    )));
                }
                p.value = t.data.iter().map(|&v| F::of(v as f64)).collect();
            }
        }
    }
    Ok(FeatureExtractor { header, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, size: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * n * size * size)
            .map(|_| rng.random::<f64>())
            .collect();
        FeatureMap::from_vec(3, n, size, size, data).unwrap()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn extraction_is_pure_and_keyed_by_request() {
        let ext = FeatureExtractor::<f64>::builtin(DEFAULT_BUILTIN_SEED);
        let x = FeatureMap::zeros(3, 1, 16, 16);
        let a = ext
            .extract_features(&x, &names(&["relu1", "relu2", "relu3"]))
            .unwrap();
        let b = ext
            .extract_features(&x, &names(&["relu1", "relu2", "relu3"]))
            .unwrap();
        assert_eq!(a, b);
        let one = ext.extract_features(&x, &names(&["conv1"])).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one["conv1"].channels, 8);
        assert!(matches!(
            ext.extract_features(&x, &names(&["relu9_9"])),
            Err(Error::UnknownLayer(n)) if n == "relu9_9"
        ));
    }

    #[test]
    fn identity_extractor_reduces_to_pixel_mse() {
        let ext = FeatureExtractor::<f64>::identity();
        let zeros = FeatureMap::zeros(3, 2, 4, 4);
        let mut ones = zeros.clone();
        ones.data.iter_mut().for_each(|v| *v = 1.0);
        let l = ext
            .feature_perceptual_loss(&zeros, &ones, &names(&["input"]))
            .unwrap();
        assert_eq!(l.total, 1.0);
    }

    #[test]
    fn loss_is_symmetric_and_zero_on_identity() {
        let ext = FeatureExtractor::<f64>::builtin(3);
        let layers = names(&["relu1", "relu2", "relu3"]);
        let a = random_batch(2, 16, 1);
        let b = random_batch(2, 16, 2);
        let same = ext.feature_perceptual_loss(&a, &a, &layers).unwrap();
        assert_eq!(same.total, 0.0);
        assert!(same.per_layer.values().all(|&v| v == 0.0));
        let ab = ext.feature_perceptual_loss(&a, &b, &layers).unwrap();
        let ba = ext.feature_perceptual_loss(&b, &a, &layers).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.total > 0.0);
    }

    #[test]
    fn adding_layers_never_decreases_loss() {
        let ext = FeatureExtractor::<f64>::builtin(3);
        let a = random_batch(1, 16, 4);
        let b = random_batch(1, 16, 5);
        let mut prev = 0.0;
        let all = [
            "input", "conv1", "relu1", "conv2", "relu2", "conv3", "relu3",
        ];
        for k in 1..=all.len() {
            let l = ext
                .feature_perceptual_loss(&a, &b, &names(&all[..k]))
                .unwrap()
                .total;
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn gradient_matches_finite_differences_and_spares_extractor() {
        let ext = FeatureExtractor::<f64>::builtin(11);
        let layers = names(&["relu1", "relu2", "relu3"]);
        let x = random_batch(2, 8, 6);
        let y = random_batch(2, 8, 7);
        let (_, grad) = ext
            .loss_and_grad(&x, &y, &layers, false, 1.0, true)
            .unwrap();
        let grad = grad.unwrap();
        let h = 1e-6;
        for i in (0..y.len()).step_by(7) {
            let mut yp = y.clone();
            yp.data[i] += h;
            let mut ym = y.clone();
            ym.data[i] -= h;
            let lp = ext.feature_perceptual_loss(&x, &yp, &layers).unwrap().total;
            let lm = ext.feature_perceptual_loss(&x, &ym, &layers).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad.data[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "i={i}: {fd} vs {}",
                grad.data[i]
            );
        }
        assert_eq!(ext.parameter_grad_norm(), 0.0);
    }

    #[test]
    fn weights_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.nvta");
        let ext = FeatureExtractor::<f32>::builtin(9);
        ext.save(&path).unwrap();
        let back = load_extractor_weights::<f32>(&path).unwrap();
        assert_eq!(back.named_tensors(), ext.named_tensors());
        assert_eq!(back.header(), ext.header());

        // drop one tensor
        let mut tensors = ext.named_tensors();
        let removed = tensors.remove(2);
        let meta = serde_json::to_value(ext.header()).unwrap();
        let missing = dir.path().join("missing.nvta");
        write_archive(&missing, &meta, &tensors).unwrap();
        match load_extractor_weights::<f32>(&missing) {
            Err(Error::Weights(msg)) => assert!(msg.contains(&removed.name), "{msg}"),
            other => panic!("expected WeightsError, got {:?}", other.err()),
        }

        // truncate the file
        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.nvta");
        std::fs::write(&truncated, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(
            load_extractor_weights::<f32>(&truncated),
            Err(Error::Weights(_))
        ));
    }

    #[test]
    fn max_pool_graph_is_supported() {
        let header = ExtractorHeader {
            extractor_id: "vgg-like".into(),
            layers: vec![
                LayerDecl::Conv {
                    name: "conv1_1".into(),
                    in_channels: 3,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerDecl::Relu {
                    name: "relu1_1".into(),
                },
                LayerDecl::MaxPool {
                    name: "pool1".into(),
                    kernel: 2,
                    stride: 2,
                },
                LayerDecl::Conv {
                    name: "conv2_1".into(),
                    in_channels: 4,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerDecl::Relu {
                    name: "relu2_1".into(),
                },
            ],
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ext = FeatureExtractor::<f64> {
            stages: build_stages(&header, &mut rng),
            header,
        };
        let layers = names(&["relu1_1", "relu2_1"]);
        let x = random_batch(1, 8, 1);
        let y = random_batch(1, 8, 2);
        let (_, grad) = ext
            .loss_and_grad(&x, &y, &layers, false, 1.0, true)
            .unwrap();
        let grad = grad.unwrap();
        let h = 1e-6;
        for i in (0..y.len()).step_by(5) {
            let mut yp = y.clone();
            yp.data[i] += h;
            let mut ym = y.clone();
            ym.data[i] -= h;
            let fd = (ext.feature_perceptual_loss(&x, &yp, &layers).unwrap().total
                - ext.feature_perceptual_loss(&x, &ym, &layers).unwrap().total)
                / (2.0 * h);
            assert!((fd - grad.data[i]).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }
}
