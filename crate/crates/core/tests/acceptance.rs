//! Acceptance suite. Runs as a plain binary so that every criterion prints one
//! PASS/FAIL line even under a captured `cargo test`.
//!
//! The desk-scale emergence run (criterion 6) takes hours on a single core and
//! is skipped unless `NUMVAE_ACCEPT_EMERGENCE=1`. Its scale can be reduced with
//! `NUMVAE_EMERGENCE_SCENES`, `_EPOCHS`, `_SEEDS`, `_PROBE_SCENES`; a reduced
//! run is labelled as such in its line.

use std::path::Path;
use std::time::Instant;

use numvae::image::Image;
use numvae::nn::FeatureMap;
use numvae::perceptual::FeatureExtractor;
use numvae::probes::*;
use numvae::scenegen::*;
use numvae::trainer::*;
use numvae::vae::{
    image_batch, kl_divergence, ArchitectureConfig, EncoderOutput, Pass, Preset, Vae,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- criterion 1

fn kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let dim = rng.random_range(1..=8);
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(0.25f64.ln()..4f64.ln()).exp())
            .collect();
        let closed = kl_divergence(&EncoderOutput {
            mu: mu.clone(),
            sigma: sigma.clone(),
        })
        .unwrap();
        // E_q[log q(z) - log p(z)], the normalising constants cancel
        let mut acc = 0.0;
        for _ in 0..samples {
            let mut log_ratio = 0.0;
            for d in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                let z = mu[d] + sigma[d] * e;
                log_ratio += -sigma[d].ln() - 0.5 * e * e + 0.5 * z * z;
            }
            acc += log_ratio;
        }
        let mc = acc / samples as f64;
        worst = worst.max((mc - closed).abs() / closed);
    }
    outcome(
        worst <= 0.01,
        format!("max relative error {worst:.2e} (tol 1e-2) over 10 pairs, 1e6 samples"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn gradient_check() -> Outcome {
    let cfg = TrainConfig::tiny();
    let objective = cfg.objective();
    let ext = FeatureExtractor::<f64>::from_spec(&cfg.extractor_spec()).unwrap();
    let mut model = Vae::<f64>::new(ArchitectureConfig::preset(Preset::Tiny), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images: Vec<Image> = (0..4)
        .map(|_| {
            let mut img = Image::new(8, 8, 3);
            img.data.iter_mut().for_each(|v| *v = rng.random());
            img
        })
        .collect();
    let x: FeatureMap<f64> = image_batch(&images.iter().collect::<Vec<_>>()).unwrap();
    let latent = model.latent_dim();
    let noise = FeatureMap::matrix(
        latent,
        images.len(),
        (0..latent * images.len())
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
    .unwrap();

    for p in model.params_mut() {
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    model
        .objective(&x, &noise, Some(&ext), &objective, Pass::TrainWithGrad)
        .unwrap();
    let analytic: Vec<Vec<f64>> = model.params_mut().iter().map(|p| p.grad.clone()).collect();

    let mut agreement = |h: f64| {
        let mut total = 0usize;
        let mut ok = 0usize;
        let mut worst: f64 = 0.0;
        for (pi, grads) in analytic.iter().enumerate() {
            for (j, &a) in grads.iter().enumerate() {
                let mut loss_at = |delta: f64| {
                    let orig = model.params_mut()[pi].value[j];
                    model.params_mut()[pi].value[j] = orig + delta;
                    let l = model
                        .objective(&x, &noise, Some(&ext), &objective, Pass::TrainNoGrad)
                        .unwrap()
                        .0
                        .total;
                    model.params_mut()[pi].value[j] = orig;
                    l
                };
                let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                total += 1;
                ok += (rel <= 1e-3) as usize;
                worst = worst.max(rel);
            }
        }
        (ok, total, worst)
    };
    let (ok, total, worst) = agreement(1e-4);
    // diagnostic only: shows whether disagreement shrinks with the stencil
    let (ok_fine, _, worst_fine) = agreement(1e-6);
    let frac = ok as f64 / total as f64;
    outcome(
        frac >= 0.99,
        format!(
            "h=1e-4: {ok}/{total} parameters within rel 1e-3 ({:.2}%, need 99%), worst {worst:.2e}; \
             h=1e-6: {ok_fine}/{total}, worst {worst_fine:.2e}",
            100.0 * frac
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Ordinary least squares with intercept on the raw design, solved through the
/// 3x3 normal equations, then converted to standardized coefficients.
fn normal_equations_fit(y: &[f64], x1: &[f64], x2: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let cols = [vec![1.0; y.len()], x1.to_vec(), x2.to_vec()];
    let mut a = [[0.0f64; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = cols[i].iter().zip(&cols[j]).map(|(p, q)| p * q).sum();
        }
        a[i][3] = cols[i].iter().zip(y).map(|(p, q)| p * q).sum();
    }
    // Gauss-Jordan with partial pivoting
    for c in 0..3 {
        let piv = (c..3)
            .max_by(|&p, &q| a[p][c].abs().total_cmp(&a[q][c].abs()))
            .unwrap();
        a.swap(c, piv);
        for r in 0..3 {
            if r != c {
                let f = a[r][c] / a[c][c];
                let pivot = a[c];
                for (v, p) in a[r].iter_mut().zip(pivot).skip(c) {
                    *v -= f * p;
                }
            }
        }
    }
    let b: Vec<f64> = (0..3).map(|i| a[i][3] / a[i][i]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let my = mean(y);
    let sse: f64 = (0..y.len())
        .map(|i| (y[i] - b[0] - b[1] * x1[i] - b[2] * x2[i]).powi(2))
        .sum();
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    (
        b[1] * sd(x1) / sd(y),
        b[2] * sd(x2) / sd(y),
        1.0 - sse / sst,
    )
}

fn random_probe(rng: &mut ChaCha8Rng, rows: usize) -> (Vec<usize>, Vec<f64>) {
    let numerosity: Vec<usize> = (0..rows).map(|_| rng.random_range(0..=4)).collect();
    let area = numerosity
        .iter()
        .map(|&n| n as f64 * rng.random_range(40.0..160.0))
        .collect();
    (numerosity, area)
}

fn probe_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let rows = rng.random_range(30..300);
        let dims = 3;
        let (numerosity, area) = random_probe(&mut rng, rows);
        let latents: Vec<f64> = (0..rows * dims)
            .map(|i| {
                let r = i / dims;
                let base = if numerosity[r] > 0 {
                    0.3 * (numerosity[r] as f64).ln() - 0.2 * area[r].ln()
                } else {
                    0.0
                };
                base * (i % dims) as f64 + rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let probe =
            ProbeDataset::new(latents, dims, numerosity.clone(), Some(area.clone())).unwrap();
        for d in 0..dims {
            let fit = fit_dimension(&probe, d).unwrap();
            let keep: Vec<usize> = (0..rows).filter(|&r| numerosity[r] >= 1).collect();
            let y: Vec<f64> = keep.iter().map(|&r| probe.row(r)[d]).collect();
            let x1: Vec<f64> = keep.iter().map(|&r| (numerosity[r] as f64).ln()).collect();
            let x2: Vec<f64> = keep.iter().map(|&r| area[r].ln()).collect();
            let (b1, b2, r2) = normal_equations_fit(&y, &x1, &x2);
            worst = worst
                .max((fit.beta1 - b1).abs())
                .max((fit.beta2 - b2).abs())
                .max((fit.r_squared - r2).abs());
        }
    }

    let criteria = DetectorCriteria::default();
    let mut recovered = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let rows = 500;
        let (numerosity, area) = random_probe(&mut rng, rows);
        let mut latents = Vec::with_capacity(rows * 3);
        for r in 0..rows {
            let (ln, la) = if numerosity[r] > 0 {
                ((numerosity[r] as f64).ln(), area[r].ln())
            } else {
                (0.0, 0.0)
            };
            let e = |rng: &mut ChaCha8Rng| 0.1 * rng.sample::<f64, _>(StandardNormal);
            latents.push(ln + e(&mut rng));
            latents.push(-la + e(&mut rng));
            latents.push(rng.sample(StandardNormal));
        }
        let probe = ProbeDataset::new(latents, 3, numerosity, Some(area)).unwrap();
        let report = probe_all_dimensions(&probe, &criteria).unwrap();
        let kinds: Vec<DetectorKind> = report.classes.iter().map(|c| c.kind).collect();
        if kinds
            == [
                DetectorKind::Numerosity,
                DetectorKind::Area,
                DetectorKind::Neither,
            ]
        {
            recovered += 1;
        }
    }
    outcome(
        worst <= 1e-8 && recovered == 100,
        format!("max |fit - normal equations| {worst:.2e} (tol 1e-8); planted detectors recovered {recovered}/100"),
    )
}

// ---------------------------------------------------------------- criterion 4

/// AP by enumerating every score threshold: sum over thresholds of
/// (recall gain) * precision at that threshold.
fn enumerated_ap(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| positives[i]).count();
        let recall = tp as f64 / total as f64;
        let precision = tp as f64 / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut mismatched_none = 0;
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        for pattern in 0u32..64 {
            let pos: Vec<bool> = (0..6).map(|i| pattern >> i & 1 == 1).collect();
            match (
                average_precision(&scores, &pos),
                enumerated_ap(&scores, &pos),
            ) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched_none += 1,
            }
        }
        let matrix: Vec<[f64; NUM_CLASSES]> = (0..6)
            .map(|_| std::array::from_fn(|_| rng.random()))
            .collect();
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
        let report = count_ap(&matrix, &labels).unwrap();
        for c in 0..NUM_CLASSES {
            let col: Vec<f64> = matrix.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            match (report.per_class[c], enumerated_ap(&col, &pos)) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched_none += 1,
            }
        }
    }

    // evaluate_readout on a trained readout against the same oracle
    let latents: Vec<f64> = (0..6 * 2).map(|_| rng.random()).collect();
    let labels = vec![0, 1, 2, 3, 4, 0];
    let cfg = ReadoutConfig {
        epochs: 5,
        ..ReadoutConfig::new(2)
    };
    let mut readout = train_readout(&latents, &labels, &cfg).unwrap();
    let report = evaluate_readout(&mut readout, &latents, &labels).unwrap();
    let scores = readout.scores(&latents).unwrap();
    for c in 0..NUM_CLASSES {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        worst =
            worst.max((report.per_class[c].unwrap() - enumerated_ap(&col, &pos).unwrap()).abs());
    }

    let n = 10_000;
    let prevalence = [0.1, 0.3, 0.2, 0.25, 0.15];
    let labels: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            prevalence
                .iter()
                .position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(4)
        })
        .collect();
    let random: Vec<[f64; NUM_CLASSES]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random()))
        .collect();
    let report = count_ap(&random, &labels).unwrap();
    let chance = chance_ap(&labels);
    let chance_gap = (0..NUM_CLASSES)
        .map(|c| (report.per_class[c].unwrap() - chance.per_class[c].unwrap()).abs())
        .fold(0.0, f64::max);
    outcome(
        worst <= 1e-12 && mismatched_none == 0 && chance_gap <= 0.02,
        format!(
            "max |AP - enumeration| {worst:.1e} over 64000 patterns + 5000 class columns; \
             random-score AP vs prevalence max gap {chance_gap:.4} (tol 0.02)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn generator_exactness() -> Outcome {
    let config = GeneratorConfig::preset(ScenePreset::Desk, 5);
    let assets = SceneAssets::procedural(0);
    let count = 10_000;
    let mut area_mismatch = 0;
    let mut intersections = 0;
    let mut replay_mismatch = 0;
    let mut hist = [0usize; MAX_NUMEROSITY + 1];
    for i in 0..count {
        let (spec, _) = config.record_spec(i);
        let scene = synthesize_scene(&spec, &assets).unwrap();
        let (h, w) = spec.canvas_size;
        hist[scene.record.numerosity] += 1;
        let masks: Vec<Mask> = scene.objects.iter().map(|o| o.canvas_mask(h, w)).collect();
        let mut union = vec![0u8; h * w];
        for m in &masks {
            for (u, &b) in union.iter_mut().zip(&m.data) {
                *u += b as u8;
            }
        }
        intersections += union.iter().filter(|&&u| u > 1).count();
        let recomputed = union.iter().filter(|&&u| u > 0).count() as u64;
        let labelled = scene.labels.iter().filter(|&&l| l != 0).count() as u64;
        if scene.record.cumulative_area != Some(recomputed) || labelled != recomputed {
            area_mismatch += 1;
        }
        let again = synthesize_scene(&spec, &assets).unwrap();
        if again.image.to_rgb8().into_raw() != scene.image.to_rgb8().into_raw()
            || again.labels != scene.labels
            || again.record != scene.record
        {
            replay_mismatch += 1;
        }
    }
    let marginal_gap = hist
        .iter()
        .map(|&k| (k as f64 / count as f64 - 1.0 / hist.len() as f64).abs())
        .fold(0.0, f64::max);
    outcome(
        area_mismatch == 0 && intersections == 0 && marginal_gap <= 0.02 && replay_mismatch == 0,
        format!(
            "{count} scenes: area mismatches {area_mismatch}, overlapping pixels {intersections}, \
             label marginal max gap {marginal_gap:.4} (tol 0.02), replay mismatches {replay_mismatch}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn emergence_seed(
    seed: u64,
    data: &DatasetManifest,
    probe_set: &DatasetManifest,
    epochs: usize,
    out: &Path,
) -> (bool, String) {
    let desk = TrainConfig::desk();
    // no natural data here, so the ramp only has to fit inside the run
    let cfg = TrainConfig {
        total_epochs: epochs,
        warmup_epochs: desk.warmup_epochs.min(epochs),
        mix_ramp_end_epoch: desk.mix_ramp_end_epoch.min(epochs),
        master_seed: seed,
        ..desk
    };
    let trained = run_training(
        &cfg,
        data,
        None,
        &cfg.architecture(),
        &cfg.extractor_spec(),
        Some(out),
    )
    .unwrap();
    let mut model = trained.last.model().unwrap();
    let train: Vec<SceneRecord> = data.split(Split::Train).into_iter().cloned().collect();
    let test: Vec<SceneRecord> = data.split(Split::Test).into_iter().cloned().collect();
    let tr = collect_latents_from(&mut model, data, &train).unwrap();
    let te = collect_latents_from(&mut model, data, &test).unwrap();
    let mut readout = train_readout(
        &tr.latents,
        &tr.numerosity,
        &ReadoutConfig {
            seed,
            ..ReadoutConfig::new(tr.latent_dim)
        },
    )
    .unwrap();
    let ap = evaluate_readout(&mut readout, &te.latents, &te.numerosity).unwrap();
    let chance = chance_ap(&te.numerosity);
    let probe = collect_latents_from(&mut model, probe_set, &probe_set.records).unwrap();
    let report = probe_all_dimensions(&probe, &DetectorCriteria::default()).unwrap();
    let best = report
        .fits
        .iter()
        .max_by(|a, b| a.r_squared.total_cmp(&b.r_squared))
        .unwrap();
    let a = ap.mean >= 1.5 * chance.mean;
    let b = !report.numerosity_detectors.is_empty();
    (
        a && b,
        format!(
            "seed {seed}: AP {:.3} vs chance {:.3} ({:.2}x) {}; numerosity dims {:?} (best R2 {:.3} at dim {}, beta2 {:.3}) {}",
            ap.mean,
            chance.mean,
            ap.mean / chance.mean,
            if a { "ok" } else { "low" },
            report.numerosity_detectors,
            best.r_squared,
            best.dim_index,
            best.beta2,
            if b { "ok" } else { "none" },
        ),
    )
}

fn emergence() -> Option<Outcome> {
    if std::env::var("NUMVAE_ACCEPT_EMERGENCE").ok().as_deref() != Some("1") {
        return None;
    }
    let scenes = env_usize("NUMVAE_EMERGENCE_SCENES", 20_000);
    let epochs = env_usize("NUMVAE_EMERGENCE_EPOCHS", 30);
    let seeds = env_usize("NUMVAE_EMERGENCE_SEEDS", 3);
    let probe_scenes = env_usize("NUMVAE_EMERGENCE_PROBE_SCENES", 10_000);
    let reduced = scenes < 20_000 || epochs < 30 || seeds < 3 || probe_scenes < 10_000;
    let work = std::env::var("NUMVAE_EMERGENCE_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::env::temp_dir().join("numvae-emergence"));
    let assets = SceneAssets::procedural(0);
    let data = build_dataset(
        &GeneratorConfig::preset(ScenePreset::Desk, 101),
        scenes,
        &assets,
        &work.join("desk"),
    )
    .unwrap();
    let probe_set = build_dataset(
        &GeneratorConfig::preset(ScenePreset::Probe, 202),
        probe_scenes,
        &assets,
        &work.join("probe"),
    )
    .unwrap();
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..seeds as u64 {
        let (ok, line) = emergence_seed(
            seed,
            &data,
            &probe_set,
            epochs,
            &work.join(format!("run{seed}")),
        );
        eprintln!("    {line}");
        passed += ok as usize;
        lines.push(line);
    }
    let need = (2 * seeds).div_ceil(3);
    Some(outcome(
        passed >= need,
        format!(
            "{passed}/{seeds} seeds pass (need {need}); {scenes} scenes, {epochs} epochs, {probe_scenes} probe scenes{}",
            if reduced { " [REDUCED SCALE]" } else { "" }
        ),
    ))
}

// ---------------------------------------------------------------- criterion 7

fn record(numerosity: usize, i: usize) -> SceneRecord {
    SceneRecord {
        image_path: format!("images/{i}.png"),
        numerosity,
        cumulative_area: Some(0),
        class_ids: vec![],
        object_boxes: vec![],
        split: Split::Train,
        seed: i as u64,
    }
}

fn protocol_conformance() -> Outcome {
    let mut problems = Vec::new();
    let cfg = TrainConfig::paper();

    // flat after the opener: 4 flat epochs decay, 3 do not
    let flat = |k: usize| {
        let mut h = vec![10.0, 8.0];
        h.extend(std::iter::repeat_n(8.0, k));
        h
    };
    if lr_schedule_step(&flat(3), 1.5e-3, &cfg) != 1.5e-3 {
        problems.push("decayed after 4 plateau epochs".to_string());
    }
    if lr_schedule_step(&flat(4), 1.5e-3, &cfg) != 1.5e-3 / 5.0 {
        problems.push("no decay by 5 after >4 plateau epochs".to_string());
    }
    let improving: Vec<f64> = (0..12).map(|i| 10.0 * 0.99f64.powi(i)).collect();
    if lr_schedule_step(&improving, 1.5e-3, &cfg) != 1.5e-3 {
        problems.push("decayed on improving history".to_string());
    }
    let tiny_gain: Vec<f64> = (0..8).map(|i| 10.0 * 0.9999f64.powi(i)).collect();
    if lr_schedule_step(&tiny_gain, 1.5e-3, &cfg) != 1.5e-3 / 5.0 {
        problems.push("sub-threshold improvement not treated as plateau".to_string());
    }
    let mut sched = PlateauScheduler::new(1.5e-3);
    let mut lrs = Vec::new();
    for _ in 0..30 {
        lrs.push(sched.observe(5.0, &cfg));
    }
    let steps_ok = lrs.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] / 5.0);
    if !steps_ok || lrs.windows(2).any(|w| w[1] > w[0]) {
        problems.push(format!("scheduler trace {lrs:?}"));
    }

    for (i, counts) in [
        [10, 50, 30, 30, 80],
        [20, 20, 20, 20, 20],
        [0, 100, 1, 1, 1],
        [7, 13, 29, 41, 3],
    ]
    .iter()
    .enumerate()
    {
        let records: Vec<SceneRecord> = counts
            .iter()
            .enumerate()
            .flat_map(|(label, &k)| (0..k).map(move |j| record(label, label * 1000 + j)))
            .collect();
        let present = counts.iter().filter(|&&k| k > 0).count() as f64;
        let mean = records.len() as f64 / present;
        let expected: Vec<usize> = counts
            .iter()
            .map(|&k| {
                if k as f64 > mean {
                    k - (0.1 * k as f64).floor() as usize
                } else {
                    k
                }
            })
            .collect();
        let out = rebalance_records(&records, 0.1, i as u64);
        let got: Vec<usize> = (0..5)
            .map(|l| out.iter().filter(|r| r.numerosity == l).count())
            .collect();
        if got != expected {
            problems.push(format!(
                "rebalance {counts:?}: got {got:?}, want {expected:?}"
            ));
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let tcfg = TrainConfig::tiny();
    let model = Vae::<f32>::new(tcfg.architecture(), 3).unwrap();
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        arch: tcfg.architecture(),
        objective: tcfg.objective(),
        extractor: tcfg.extractor_spec(),
        epoch: 0,
        master_seed: 0,
        lr: tcfg.lr_initial,
        val_loss_history: vec![],
    };
    let path = dir.path().join("c.nvta");
    save_checkpoint(&Checkpoint::from_model(&model, meta), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap().model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images: Vec<Image> = (0..6)
        .map(|_| {
            let mut img = Image::new(8, 8, 3);
            img.data.iter_mut().for_each(|v| *v = rng.random());
            img
        })
        .collect();
    let x: FeatureMap<f32> = image_batch(&images.iter().collect::<Vec<_>>()).unwrap();
    let noise = gaussian_noise(tcfg.architecture().latent_dim, 6, 9);
    let ext = FeatureExtractor::<f32>::from_spec(&tcfg.extractor_spec()).unwrap();
    let loss = |mut m: Vae<f32>| {
        m.objective(&x, &noise, Some(&ext), &tcfg.objective(), Pass::Eval)
            .unwrap()
            .0
            .total
    };
    let delta = loss(model) - loss(loaded);
    if delta != 0.0 {
        problems.push(format!("checkpoint loss delta {delta}"));
    }

    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "plateau decay /5 after >4 flat epochs, 4 rebalance histograms, checkpoint loss delta 0"
                .into()
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let _ = env_logger::try_init();
    // honour a test-name filter the way the default harness would, loosely
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    type Criterion = (&'static str, fn() -> Option<Outcome>);
    let criteria: Vec<Criterion> = vec![
        ("1 kl_oracle", || Some(kl_oracle())),
        ("2 gradient_check", || Some(gradient_check())),
        ("3 probe_oracle", || Some(probe_oracle())),
        ("4 ap_oracle", || Some(ap_oracle())),
        ("5 generator_exactness", || Some(generator_exactness())),
        ("6 emergence", emergence),
        ("7 protocol_conformance", || Some(protocol_conformance())),
    ];
    let mut failed = 0;
    let mut run_count = 0;
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let line = match run() {
            Some(o) => {
                failed += !o.pass as usize;
                format!(
                    "criterion {name}: {} ({}) [{:.1}s]",
                    if o.pass { "PASS" } else { "FAIL" },
                    o.detail,
                    start.elapsed().as_secs_f64()
                )
            }
            None => format!("criterion {name}: SKIP (set NUMVAE_ACCEPT_EMERGENCE=1)"),
        };
        println!("{line}");
        run_count += 1;
    }
    println!("acceptance: {} criteria run, {failed} failed", run_count);
    if failed > 0 {
        std::process::exit(1);
    }
}
