//! Convolutional variational autoencoder: architecture presets, the
//! reparametrized Gaussian posterior and the closed-form loss terms.
//!
//! Encoder blocks are `conv -> leaky ReLU -> batch norm`; the flattened final
//! map feeds two dense heads for the posterior mean and standard deviation
//! (softplus keeps `sigma > 0`). The decoder maps `z` through a dense layer to
//! the encoder's final map shape, then `transposed conv -> leaky ReLU -> batch
//! norm` blocks, and a 3-filter 3x3 convolution with a sigmoid produces the
//! image.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::NamedTensor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    Activation, ActivationLayer, BatchNorm, Conv2d, ConvGeometry, ConvTranspose2d, FeatureMap,
    Linear, Param, Scalar,
};
use crate::perceptual::FeatureExtractor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Tiny => "tiny",
        })
    }
}

/// One (transposed) convolution block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

impl LayerSpec {
    pub const fn new(
        filters: usize,
        kernel: usize,
        stride: usize,
        pad_begin: usize,
        pad_end: usize,
    ) -> Self {
        Self {
            filters,
            kernel,
            stride,
            pad_begin,
            pad_end,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.kernel, self.stride, self.pad_begin, self.pad_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub preset: Preset,
    /// `(height, width, channels)`.
    pub input_size: (usize, usize, usize),
    pub encoder_layers: Vec<LayerSpec>,
    /// Transposed convolutions; `pad_end` is padding minus output padding.
    pub decoder_layers: Vec<LayerSpec>,
    pub latent_dim: usize,
    pub leaky_slope: f64,
    pub use_batchnorm: bool,
}

impl ArchitectureConfig {
    pub fn preset(preset: Preset) -> Self {
        // 4x4 stride-1 layers use (1, 2) padding to keep the spatial size;
        // 4x4 stride-2 layers use (1, 1) and halve it. 3x3 transposed layers
        // use padding 1, with output padding 1 when the stride is 2.
        let enc = |f: [usize; 4]| {
            vec![
                LayerSpec::new(f[0], 4, 1, 1, 2),
                LayerSpec::new(f[1], 4, 2, 1, 1),
                LayerSpec::new(f[2], 4, 2, 1, 1),
                LayerSpec::new(f[3], 4, 2, 1, 1),
            ]
        };
        let dec = |f: [usize; 4]| {
            vec![
                LayerSpec::new(f[0], 3, 1, 1, 1),
                LayerSpec::new(f[1], 3, 2, 1, 0),
                LayerSpec::new(f[2], 3, 2, 1, 0),
                LayerSpec::new(f[3], 3, 2, 1, 0),
            ]
        };
        let (input, e, d, latent) = match preset {
            Preset::Paper => ((160, 160, 3), [64, 64, 128, 768], [768, 768, 256, 64], 180),
            Preset::Desk => ((64, 64, 3), [32, 32, 64, 128], [128, 64, 32, 32], 32),
            Preset::Tiny => ((8, 8, 3), [4, 4, 8, 8], [8, 8, 4, 4], 4),
        };
        Self {
            preset,
            input_size: input,
            encoder_layers: enc(e),
            decoder_layers: dec(d),
            latent_dim: latent,
            leaky_slope: 0.01,
            use_batchnorm: true,
        }
    }

    /// Spatial size and channel count of the final encoder map.
    pub fn encoder_output(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = self.input_size;
        for (i, l) in self.encoder_layers.iter().enumerate() {
            let g = l.geometry();
            h = g
                .conv_out(h)
                .ok_or_else(|| Error::Shape(format!("encoder layer {i} collapses the height")))?;
            w = g
                .conv_out(w)
                .ok_or_else(|| Error::Shape(format!("encoder layer {i} collapses the width")))?;
            c = l.filters;
        }
        Ok((h, w, c))
    }

    /// Spatial size of the decoder output.
    pub fn decoder_output(&self) -> Result<(usize, usize)> {
        let (mut h, mut w, _) = self.encoder_output()?;
        for (i, l) in self.decoder_layers.iter().enumerate() {
            let g = l.geometry();
            h = g
                .transposed_out(h)
                .ok_or_else(|| Error::Shape(format!("decoder layer {i} collapses the height")))?;
            w = g
                .transposed_out(w)
                .ok_or_else(|| Error::Shape(format!("decoder layer {i} collapses the width")))?;
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Shape("latent_dim must be at least 2".into()));
        }
        if self.encoder_layers.is_empty() {
            return Err(Error::Shape("encoder needs at least one layer".into()));
        }
        let (h, w) = self.decoder_output()?;
        if (h, w) != (self.input_size.0, self.input_size.1) {
            return Err(Error::Shape(format!(
                "decoder produces {h}x{w}, input is {}x{}",
                self.input_size.0, self.input_size.1
            )));
        }
        Ok(())
    }
}

/// Posterior parameters for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Vec<f64>,
    /// Standard deviations (softplus outputs).
    pub sigma: Vec<f64>,
}

/// A reparametrized draw `z = mu + sigma * noise` with the noise retained.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub noise: Vec<f64>,
}

pub fn sample_latent<R: Rng>(enc: &EncoderOutput, rng: &mut R) -> LatentSample {
    let noise: Vec<f64> = (0..enc.mu.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    sample_latent_with_noise(enc, &noise).expect("noise length matches")
}

pub fn sample_latent_with_noise(enc: &EncoderOutput, noise: &[f64]) -> Result<LatentSample> {
    if noise.len() != enc.mu.len() {
        return Err(Error::Shape(format!(
            "noise has {} entries, latent has {}",
            noise.len(),
            enc.mu.len()
        )));
    }
    let z = enc
        .mu
        .iter()
        .zip(&enc.sigma)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(LatentSample {
        z,
        noise: noise.to_vec(),
    })
}

/// The posterior mean as a sample with zero noise.
pub fn deterministic_latent(enc: &EncoderOutput) -> LatentSample {
    LatentSample {
        z: enc.mu.clone(),
        noise: vec![0.0; enc.mu.len()],
    }
}

/// `KL(N(mu, sigma^2) || N(0, I)) = 1/2 * sum(mu^2 + sigma^2 - ln sigma^2 - 1)`.
pub fn kl_divergence(enc: &EncoderOutput) -> Result<f64> {
    if enc.mu.len() != enc.sigma.len() {
        return Err(Error::Shape("mu and sigma lengths differ".into()));
    }
    let mut acc = 0.0;
    for (&m, &s) in enc.mu.iter().zip(&enc.sigma) {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Domain(format!(
                "sigma must be positive and finite, got {s}"
            )));
        }
        acc += m * m + s * s - (s * s).ln() - 1.0;
    }
    Ok(0.5 * acc)
}

/// Mean squared error over every element.
pub fn pixel_reconstruction_loss(x: &[f64], x_recon: &[f64]) -> Result<f64> {
    if x.len() != x_recon.len() {
        return Err(Error::Shape(format!(
            "reconstruction has {} values, input has {}",
            x_recon.len(),
            x.len()
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.iter()
        .zip(x_recon)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// How the reconstruction terms are reduced over elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconReduction {
    /// Mean over every element of the tensor (batch included).
    ElementMean,
    /// Squared error summed over each sample's elements, averaged over the batch.
    SampleSum,
}

impl std::str::FromStr for ReconReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "element_mean" => Ok(ReconReduction::ElementMean),
            "sample_sum" => Ok(ReconReduction::SampleSum),
            other => Err(Error::Config(format!("unknown reduction {other:?}"))),
        }
    }
}

impl std::fmt::Display for ReconReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReconReduction::ElementMean => "element_mean",
            ReconReduction::SampleSum => "sample_sum",
        })
    }
}

/// Weighting and enabled terms of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub pixel_term: bool,
    pub perceptual_layers: Vec<String>,
    pub reduction: ReconReduction,
}

impl ObjectiveConfig {
    /// KL plus feature perceptual loss on the builtin taps.
    pub fn perceptual(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            pixel_term: false,
            perceptual_layers: vec!["relu1".into(), "relu2".into(), "relu3".into()],
            reduction: ReconReduction::ElementMean,
        }
    }

    /// KL plus pixel MSE only.
    pub fn pixel_only(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            pixel_term: true,
            perceptual_layers: Vec::new(),
            reduction: ReconReduction::ElementMean,
        }
    }
}

/// Per-term training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub pixel: f64,
    /// Whether `pixel` contributes to `total` (it is always reported).
    pub pixel_enabled: bool,
    pub perceptual_per_layer: BTreeMap<String, f64>,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn reconstruction(&self) -> f64 {
        let pixel = if self.pixel_enabled { self.pixel } else { 0.0 };
        pixel + self.perceptual_per_layer.values().sum::<f64>()
    }

    /// `alpha * kl + beta * (enabled reconstruction terms)`.
    pub fn recompose(&self) -> f64 {
        self.alpha * self.kl + self.beta * self.reconstruction()
    }

    /// Running mean over several breakdowns (same layer set).
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let mut out = first.clone();
        out.kl = items.iter().map(|b| b.kl).sum::<f64>() / n;
        out.pixel = items.iter().map(|b| b.pixel).sum::<f64>() / n;
        for (k, v) in out.perceptual_per_layer.iter_mut() {
            *v = items
                .iter()
                .map(|b| b.perceptual_per_layer.get(k).copied().unwrap_or(0.0))
                .sum::<f64>()
                / n;
        }
        out.total = out.recompose();
        Some(out)
    }
}

/// Combines precomputed terms into a breakdown.
pub fn total_loss(
    x: &[f64],
    x_recon: &[f64],
    enc: &EncoderOutput,
    alpha: f64,
    beta: f64,
    pixel_enabled: bool,
    perceptual_terms: &BTreeMap<String, f64>,
) -> Result<LossBreakdown> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Domain("loss weights must be non-negative".into()));
    }
    let kl = kl_divergence(enc)?;
    let pixel = pixel_reconstruction_loss(x, x_recon)?;
    let mut b = LossBreakdown {
        kl,
        pixel,
        pixel_enabled,
        perceptual_per_layer: perceptual_terms.clone(),
        total: 0.0,
        alpha,
        beta,
    };
    b.total = b.recompose();
    Ok(b)
}

/// Batched posterior parameters, `[latent][batch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<F> {
    pub mu: FeatureMap<F>,
    pub sigma: FeatureMap<F>,
}

impl<F: Scalar> Posterior<F> {
    pub fn sample(&self, n: usize) -> EncoderOutput {
        EncoderOutput {
            mu: self.mu.column(n).iter().map(|v| v.as_f64()).collect(),
            sigma: self.sigma.column(n).iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// How a batch is pushed through the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Batch statistics, gradients accumulated into the parameters.
    TrainWithGrad,
    /// Batch statistics, no caches or gradients.
    TrainNoGrad,
    /// Running statistics, no gradients.
    Eval,
}

struct Block<F> {
    act: ActivationLayer<F>,
    bn: Option<BatchNorm<F>>,
}

impl<F: Scalar> Block<F> {
    fn new(name: &str, channels: usize, slope: f64, bn: bool) -> Self {
        Self {
            act: ActivationLayer::new(Activation::LeakyRelu(slope)),
            bn: bn.then(|| BatchNorm::new(name, channels)),
        }
    }

    fn forward(
        &mut self,
        x: &FeatureMap<F>,
        train_stats: bool,
        cache: bool,
    ) -> Result<FeatureMap<F>> {
        let y = self.act.forward(x, cache);
        match &mut self.bn {
            Some(bn) => {
                if train_stats && !cache {
                    // batch statistics without touching running estimates
                    let (m, v) = (bn.running_mean.value.clone(), bn.running_var.value.clone());
                    let out = bn.forward(&y, true);
                    bn.running_mean.value = m;
                    bn.running_var.value = v;
                    out
                } else {
                    bn.forward(&y, train_stats)
                }
            }
            None => Ok(y),
        }
    }

    fn backward(&mut self, g: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        let g = match &mut self.bn {
            Some(bn) => bn.backward(g)?,
            None => g.clone(),
        };
        self.act.backward(&g)
    }
}

/// The variational autoencoder with its parameters.
pub struct Vae<F> {
    config: ArchitectureConfig,
    enc_convs: Vec<Conv2d<F>>,
    enc_blocks: Vec<Block<F>>,
    fc_mu: Linear<F>,
    fc_sigma: Linear<F>,
    sigma_act: ActivationLayer<F>,
    dec_fc: Linear<F>,
    dec_fc_act: ActivationLayer<F>,
    dec_convs: Vec<ConvTranspose2d<F>>,
    dec_blocks: Vec<Block<F>>,
    out_conv: Conv2d<F>,
    out_act: ActivationLayer<F>,
    seed_shape: (usize, usize, usize),
}

impl<F: Scalar> Vae<F> {
    /// Builds the network with fan-in scaled uniform weights drawn from `seed`.
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bn = config.use_batchnorm;
        let slope = config.leaky_slope;
        let mut cin = config.input_size.2;
        let mut enc_convs = Vec::new();
        let mut enc_blocks = Vec::new();
        for (i, l) in config.encoder_layers.iter().enumerate() {
            enc_convs.push(Conv2d::new(
                &format!("encoder.conv{i}"),
                cin,
                l.filters,
                l.geometry(),
                !bn,
                &mut rng,
            ));
            enc_blocks.push(Block::new(&format!("encoder.bn{i}"), l.filters, slope, bn));
            cin = l.filters;
        }
        let (eh, ew, ec) = config.encoder_output()?;
        let flat = eh * ew * ec;
        let fc_mu = Linear::new("encoder.fc_mu", flat, config.latent_dim, &mut rng);
        let fc_sigma = Linear::new("encoder.fc_sigma", flat, config.latent_dim, &mut rng);
        let dec_fc = Linear::new("decoder.fc", config.latent_dim, flat, &mut rng);
        let mut dec_convs = Vec::new();
        let mut dec_blocks = Vec::new();
        let mut cin = ec;
        for (i, l) in config.decoder_layers.iter().enumerate() {
            dec_convs.push(ConvTranspose2d::new(
                &format!("decoder.deconv{i}"),
                cin,
                l.filters,
                l.geometry(),
                !bn,
                &mut rng,
            ));
            dec_blocks.push(Block::new(&format!("decoder.bn{i}"), l.filters, slope, bn));
            cin = l.filters;
        }
        let out_conv = Conv2d::new(
            "decoder.out",
            cin,
            config.input_size.2,
            ConvGeometry::new(3, 1, 1, 1),
            true,
            &mut rng,
        );
        Ok(Self {
            seed_shape: (ec, eh, ew),
            config,
            enc_convs,
            enc_blocks,
            fc_mu,
            fc_sigma,
            sigma_act: ActivationLayer::new(Activation::Softplus),
            dec_fc,
            dec_fc_act: ActivationLayer::new(Activation::LeakyRelu(slope)),
            dec_convs,
            dec_blocks,
            out_conv,
            out_act: ActivationLayer::new(Activation::Sigmoid),
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_input(&self, x: &FeatureMap<F>) -> Result<()> {
        let (h, w, c) = self.config.input_size;
        if (x.height, x.width, x.channels) != (h, w, c) {
            return Err(Error::Shape(format!(
                "input is {}x{}x{}, architecture expects {h}x{w}x{c}",
                x.height, x.width, x.channels
            )));
        }
        Ok(())
    }

    /// Encodes a channel-major batch.
    pub fn encode_batch(&mut self, x: &FeatureMap<F>, pass: Pass) -> Result<Posterior<F>> {
        self.check_input(x)?;
        let cache = pass == Pass::TrainWithGrad;
        let train_stats = pass != Pass::Eval;
        let mut h = x.clone();
        for (conv, block) in self.enc_convs.iter_mut().zip(self.enc_blocks.iter_mut()) {
            let y = conv.forward(&h, cache)?;
            h = block.forward(&y, train_stats, cache)?;
        }
        let flat = h.flatten_to_matrix();
        let mu = self.fc_mu.forward(&flat, cache)?;
        let pre = self.fc_sigma.forward(&flat, cache)?;
        let sigma = self.sigma_act.forward(&pre, cache);
        Ok(Posterior { mu, sigma })
    }

    /// Decodes a `[latent][batch]` matrix to images in `[0, 1]`.
    pub fn decode_batch(&mut self, z: &FeatureMap<F>, pass: Pass) -> Result<FeatureMap<F>> {
        if z.channels * z.plane() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {} entries, architecture expects {}",
                z.channels * z.plane(),
                self.config.latent_dim
            )));
        }
        let cache = pass == Pass::TrainWithGrad;
        let train_stats = pass != Pass::Eval;
        let h = self.dec_fc.forward(z, cache)?;
        let h = self.dec_fc_act.forward(&h, cache);
        let (c, sh, sw) = self.seed_shape;
        let mut h = h.unflatten_from_matrix(c, sh, sw)?;
        for (deconv, block) in self.dec_convs.iter_mut().zip(self.dec_blocks.iter_mut()) {
            let y = deconv.forward(&h, cache)?;
            h = block.forward(&y, train_stats, cache)?;
        }
        let y = self.out_conv.forward(&h, cache)?;
        Ok(self.out_act.forward(&y, cache))
    }

    fn decoder_backward(&mut self, grad: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        let g = self.out_act.backward(grad)?;
        let mut g = self.out_conv.backward(&g)?;
        for (deconv, block) in self
            .dec_convs
            .iter_mut()
            .zip(self.dec_blocks.iter_mut())
            .rev()
        {
            let gb = block.backward(&g)?;
            g = deconv.backward(&gb)?;
        }
        let flat = g.flatten_to_matrix();
        let g = self.dec_fc_act.backward(&flat)?;
        self.dec_fc.backward(&g)
    }

    fn encoder_backward(&mut self, d_mu: &FeatureMap<F>, d_sigma: &FeatureMap<F>) -> Result<()> {
        let mut g_flat = self.fc_mu.backward(d_mu)?;
        let d_pre = self.sigma_act.backward(d_sigma)?;
        let g2 = self.fc_sigma.backward(&d_pre)?;
        g_flat
            .data
            .iter_mut()
            .zip(&g2.data)
            .for_each(|(a, &b)| *a += b);
        let (c, h, w) = self.seed_shape;
        let mut g = g_flat.unflatten_from_matrix(c, h, w)?;
        for (conv, block) in self
            .enc_convs
            .iter_mut()
            .zip(self.enc_blocks.iter_mut())
            .rev()
        {
            let gb = block.backward(&g)?;
            g = conv.backward(&gb)?;
        }
        Ok(())
    }

    /// Evaluates the objective on a batch with the given standard-normal noise
    /// (`[latent][batch]`). With [`Pass::TrainWithGrad`] the parameter
    /// gradients are accumulated. Returns the loss and the reconstruction.
    pub fn objective(
        &mut self,
        x: &FeatureMap<F>,
        noise: &FeatureMap<F>,
        extractor: Option<&FeatureExtractor<F>>,
        objective: &ObjectiveConfig,
        pass: Pass,
    ) -> Result<(LossBreakdown, FeatureMap<F>)> {
        let latent = self.config.latent_dim;
        let n = x.batch;
        if noise.channels != latent || noise.batch != n || noise.plane() != 1 {
            return Err(Error::Shape(format!(
                "noise is {}, expected {latent}x{n}",
                noise.shape_str()
            )));
        }
        if objective.alpha < 0.0 || objective.beta < 0.0 {
            return Err(Error::Domain("loss weights must be non-negative".into()));
        }
        let want_grad = pass == Pass::TrainWithGrad;
        let post = self.encode_batch(x, pass)?;
        let mut z = post.mu.clone();
        for ((zv, &s), &e) in z.data.iter_mut().zip(&post.sigma.data).zip(&noise.data) {
            *zv += s * e;
        }
        let recon = self.decode_batch(&z, pass)?;

        // KL, averaged over the batch
        let mut kl = 0.0;
        for (&m, &s) in post.mu.data.iter().zip(&post.sigma.data) {
            let (m, s) = (m.as_f64(), s.as_f64());
            kl += m * m + s * s - (s * s).ln() - 1.0;
        }
        let kl = 0.5 * kl / n as f64;

        let sample_sum = objective.reduction == ReconReduction::SampleSum;
        let pixel_denom = if sample_sum {
            n as f64
        } else {
            recon.len() as f64
        };
        let pixel_sse: f64 = recon
            .data
            .iter()
            .zip(&x.data)
            .map(|(&a, &b)| {
                let d = (a - b).as_f64();
                d * d
            })
            .sum();
        let pixel = pixel_sse / pixel_denom;

        let mut d_recon = FeatureMap::zeros(recon.channels, n, recon.height, recon.width);
        if want_grad && objective.pixel_term {
            let coef = F::of(2.0 * objective.beta / pixel_denom);
            for ((g, &a), &b) in d_recon.data.iter_mut().zip(&recon.data).zip(&x.data) {
                *g = coef * (a - b);
            }
        }
        let mut perceptual = BTreeMap::new();
        if !objective.perceptual_layers.is_empty() {
            let ext = extractor
                .ok_or_else(|| Error::Config("perceptual loss requires an extractor".into()))?;
            let (loss, grad) = ext.loss_and_grad(
                x,
                &recon,
                &objective.perceptual_layers,
                sample_sum,
                objective.beta,
                want_grad,
            )?;
            perceptual = loss.per_layer;
            if let Some(g) = grad {
                d_recon
                    .data
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(a, &b)| *a += b);
            }
        }
        let mut breakdown = LossBreakdown {
            kl,
            pixel,
            pixel_enabled: objective.pixel_term,
            perceptual_per_layer: perceptual,
            total: 0.0,
            alpha: objective.alpha,
            beta: objective.beta,
        };
        breakdown.total = breakdown.recompose();

        if want_grad {
            let dz = self.decoder_backward(&d_recon)?;
            let inv_n = 1.0 / n as f64;
            let mut d_mu = dz.clone();
            let mut d_sigma = dz;
            for i in 0..d_mu.data.len() {
                let m = post.mu.data[i];
                let s = post.sigma.data[i];
                d_mu.data[i] += F::of(objective.alpha * inv_n) * m;
                d_sigma.data[i] = d_sigma.data[i] * noise.data[i]
                    + F::of(objective.alpha * inv_n) * (s - F::one() / s);
            }
            self.encoder_backward(&d_mu, &d_sigma)?;
        }
        Ok((breakdown, recon))
    }

    /// Encodes one HWC image (evaluation statistics).
    pub fn encode(&mut self, image: &Image) -> Result<EncoderOutput> {
        let x = image_batch::<F>(&[image])?;
        let post = self.encode_batch(&x, Pass::Eval)?;
        let enc = post.sample(0);
        debug_assert!(enc.mu.iter().chain(&enc.sigma).all(|v| v.is_finite()));
        Ok(enc)
    }

    /// Decodes one latent vector (evaluation statistics).
    pub fn decode(&mut self, z: &[f64]) -> Result<Image> {
        let zm = FeatureMap::matrix(z.len(), 1, z.iter().map(|&v| F::of(v)).collect())?;
        let out = self.decode_batch(&zm, Pass::Eval)?;
        let data = out.hwc_image(0).iter().map(|v| v.as_f64() as f32).collect();
        Image::from_vec(out.height, out.width, out.channels, data)
    }

    /// Trainable parameters in a stable order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = Vec::new();
        for (conv, block) in self.enc_convs.iter_mut().zip(self.enc_blocks.iter_mut()) {
            v.extend(conv.params_mut());
            if let Some(bn) = &mut block.bn {
                v.extend(bn.params_mut());
            }
        }
        v.extend(self.fc_mu.params_mut());
        v.extend(self.fc_sigma.params_mut());
        v.extend(self.dec_fc.params_mut());
        for (conv, block) in self.dec_convs.iter_mut().zip(self.dec_blocks.iter_mut()) {
            v.extend(conv.params_mut());
            if let Some(bn) = &mut block.bn {
                v.extend(bn.params_mut());
            }
        }
        v.extend(self.out_conv.params_mut());
        v
    }

    /// Every stored tensor (parameters and batch-norm running statistics).
    pub fn tensors(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> = Vec::new();
        for (conv, block) in self.enc_convs.iter().zip(self.enc_blocks.iter()) {
            v.extend(conv.params());
            if let Some(bn) = &block.bn {
                v.extend(bn.params());
                v.extend(bn.buffers());
            }
        }
        v.extend(self.fc_mu.params());
        v.extend(self.fc_sigma.params());
        v.extend(self.dec_fc.params());
        for (conv, block) in self.dec_convs.iter().zip(self.dec_blocks.iter()) {
            v.extend(conv.params());
            if let Some(bn) = &block.bn {
                v.extend(bn.params());
                v.extend(bn.buffers());
            }
        }
        v.extend(self.out_conv.params());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = Vec::new();
        for (conv, block) in self.enc_convs.iter_mut().zip(self.enc_blocks.iter_mut()) {
            v.extend(conv.params_mut());
            if let Some(bn) = &mut block.bn {
                let BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } = bn;
                v.extend([gamma, beta, running_mean, running_var]);
            }
        }
        v.extend(self.fc_mu.params_mut());
        v.extend(self.fc_sigma.params_mut());
        v.extend(self.dec_fc.params_mut());
        for (conv, block) in self.dec_convs.iter_mut().zip(self.dec_blocks.iter_mut()) {
            v.extend(conv.params_mut());
            if let Some(bn) = &mut block.bn {
                let BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } = bn;
                v.extend([gamma, beta, running_mean, running_var]);
            }
        }
        v.extend(self.out_conv.params_mut());
        v
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|p| p.value.len()).sum::<usize>() - self.buffer_count()
    }

    fn buffer_count(&self) -> usize {
        self.enc_blocks
            .iter()
            .chain(&self.dec_blocks)
            .filter_map(|b| b.bn.as_ref())
            .map(|bn| bn.running_mean.value.len() * 2)
            .sum()
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.tensors()
            .into_iter()
            .map(|p| {
                NamedTensor::new(
                    p.name.clone(),
                    p.shape.clone(),
                    p.value.iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect()
    }

    /// Loads stored tensors, failing on the first missing or mismatched name.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut targets = self.tensors_mut();
        if tensors.len() != targets.len() {
            // report the first name that does not line up
            for (i, t) in targets.iter().enumerate() {
                if tensors.get(i).map(|s| &s.name) != Some(&t.name) {
                    return Err(Error::Format(format!(
                        "tensor {} missing or out of place",
                        t.name
                    )));
                }
            }
            return Err(Error::Format(format!(
                "archive holds {} tensors, architecture has {}",
                tensors.len(),
                targets.len()
            )));
        }
        for (dst, src) in targets.iter_mut().zip(tensors) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Format(format!(
                    "tensor {} (shape {:?}) does not match stored {} (shape {:?})",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
        }
        for (dst, src) in targets.iter_mut().zip(tensors) {
            dst.value = src.data.iter().map(|&v| F::of(v as f64)).collect();
        }
        Ok(())
    }

    /// Copies parameters across precisions (e.g. an `f32` model into `f64`).
    pub fn cast<G: Scalar>(&self) -> Result<Vae<G>> {
        let mut out = Vae::<G>::new(self.config.clone(), 0)?;
        let tensors: Vec<NamedTensor> = self.named_tensors();
        out.load_tensors(&tensors)?;
        Ok(out)
    }
}

/// Packs HWC images into a channel-major batch.
pub fn image_batch<F: Scalar>(images: &[&Image]) -> Result<FeatureMap<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let converted: Vec<Vec<F>> = images
        .iter()
        .map(|img| img.data.iter().map(|&v| F::of(v as f64)).collect())
        .collect();
    for img in images {
        if (img.height, img.width, img.channels) != (first.height, first.width, first.channels) {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
    }
    let refs: Vec<&[F]> = converted.iter().map(|v| v.as_slice()).collect();
    FeatureMap::from_hwc_images(&refs, first.height, first.width, first.channels)
}
