//! The eight workbench commands. Each resolves its configuration, writes
//! `resolved_config.txt` next to its outputs and returns a machine-readable
//! result file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::{resolve, RawConfig, RESOLVED_CONFIG_FILE};
use super::plot::{render_profile_plot, render_traversal_grid};
use super::report::{emit_report, fmt_num, fmt_opt, Report, ReportFormat};
use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::probes::{
    chance_ap, collect_latents_from, evaluate_readout, latent_std, latent_traversal,
    probe_all_dimensions, response_profile, train_readout, ApReport, DetectorCriteria,
    ProbeDataset, ReadoutConfig, NUM_CLASSES,
};
use crate::scenegen::{
    build_dataset, ingest_external_dataset, read_manifest, verify_manifest, write_manifest,
    BackgroundSource, BankSource, DatasetManifest, GeneratorConfig, NumerositySampling,
    SceneAssets, ScenePreset, SceneRecord, Split,
};
use crate::trainer::{load_checkpoint, run_training, TrainConfig};
use crate::vae::Preset;

/// Command-level settings shared by every command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Output directory, or output file for report-producing commands.
    pub out: PathBuf,
    pub master_seed: Option<u64>,
}

impl RunConfig {
    fn raw(&self) -> Result<RawConfig> {
        let mut raw = RawConfig::load(self.config_path.as_deref(), &[])?;
        if let Some(seed) = self.master_seed {
            raw.set("master_seed", seed);
        }
        for o in &self.overrides {
            raw.push_override(o)?;
        }
        Ok(raw)
    }

    /// Directory receiving outputs and `resolved_config.txt`.
    fn out_dir(&self, out_is_file: bool) -> PathBuf {
        if out_is_file {
            self.out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
        } else {
            self.out.clone()
        }
    }

    fn header(&self, inputs: &[(&str, &Path)]) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("command".into(), Value::String(self.command.clone()));
        m.insert(
            "config_path".into(),
            self.config_path
                .as_ref()
                .map_or(Value::Null, |p| Value::String(p.display().to_string())),
        );
        m.insert("out".into(), Value::String(self.out.display().to_string()));
        for (k, p) in inputs {
            m.insert((*k).into(), Value::String(p.display().to_string()));
        }
        m
    }
}

fn record<T: Serialize>(map: &mut Map<String, Value>, t: &T) -> Result<()> {
    match serde_json::to_value(t).map_err(|e| Error::Config(e.to_string()))? {
        Value::Object(m) => {
            map.extend(m);
            Ok(())
        }
        _ => Err(Error::Config("configuration is not a record".into())),
    }
}

fn write_resolved_map(map: &Map<String, Value>, dir: &Path) -> Result<()> {
    let mut keys: Vec<&String> = map.keys().collect();
    keys.sort();
    let text: String = keys
        .into_iter()
        .map(|k| {
            let v = match &map[k] {
                Value::String(s) => s.clone(),
                Value::Null => "none".into(),
                other => other.to_string(),
            };
            format!("{k} = {v}\n")
        })
        .collect();
    write_atomic(&dir.join(RESOLVED_CONFIG_FILE), text.as_bytes())
}

fn resolve_and_record<T: Serialize + for<'de> Deserialize<'de>>(
    run: &RunConfig,
    defaults: &T,
    raw: &RawConfig,
    inputs: &[(&str, &Path)],
    out_is_file: bool,
) -> Result<T> {
    let cfg = resolve(defaults, raw)?;
    let mut map = run.header(inputs);
    record(&mut map, &cfg)?;
    let dir = run.out_dir(out_is_file);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_resolved_map(&map, &dir)?;
    Ok(cfg)
}

/// Settings of `gen-data`; defaults depend on `preset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataSettings {
    pub preset: String,
    pub count: usize,
    pub master_seed: u64,
    /// `uniform` or a fixed label 0..4.
    pub numerosity: String,
    pub canvas_size: usize,
    pub base_scale: f64,
    pub scale_jitter: f64,
    pub allow_overlap: bool,
    pub same_asset: bool,
    pub max_attempts: usize,
    pub hflip: bool,
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub color_shift: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    /// `procedural` or a bank directory with `bank.csv`.
    pub bank: String,
    pub bank_seed: u64,
    pub bank_variants: usize,
    /// `procedural` or a directory of images.
    pub backgrounds: String,
}

impl GenDataSettings {
    pub fn for_preset(preset: ScenePreset) -> Self {
        let g = GeneratorConfig::preset(preset, 0);
        let (bank_seed, bank_variants) = match g.bank {
            BankSource::Procedural {
                seed,
                variants_per_class,
            } => (seed, variants_per_class),
            BankSource::Directory { .. } => (0, 4),
        };
        let t = &g.template;
        Self {
            preset: match preset {
                ScenePreset::Warmup => "warmup",
                ScenePreset::Probe => "probe",
                ScenePreset::Desk => "desk",
            }
            .into(),
            count: 1000,
            master_seed: 0,
            numerosity: "uniform".into(),
            canvas_size: t.canvas_size.0,
            base_scale: t.base_scale,
            scale_jitter: t.scale_jitter,
            allow_overlap: t.allow_overlap,
            same_asset: t.same_asset,
            max_attempts: t.max_attempts,
            hflip: t.transform_set.hflip,
            rotation_deg: t.transform_set.rotation_deg,
            scale_min: t.transform_set.scale_range.0,
            scale_max: t.transform_set.scale_range.1,
            color_shift: t.transform_set.color_shift,
            split_train: g.split_fractions.0,
            split_val: g.split_fractions.1,
            split_test: g.split_fractions.2,
            bank: "procedural".into(),
            bank_seed,
            bank_variants,
            backgrounds: "procedural".into(),
        }
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let preset: ScenePreset = self.preset.parse()?;
        let mut g = GeneratorConfig::preset(preset, self.master_seed);
        g.numerosity = match self.numerosity.as_str() {
            "uniform" => NumerositySampling::Uniform,
            n => NumerositySampling::Fixed(n.parse().map_err(|_| {
                Error::Config(format!("numerosity must be uniform or 0..4, got {n:?}"))
            })?),
        };
        let t = &mut g.template;
        t.canvas_size = (self.canvas_size, self.canvas_size);
        t.base_scale = self.base_scale;
        t.scale_jitter = self.scale_jitter;
        t.allow_overlap = self.allow_overlap;
        t.same_asset = self.same_asset;
        t.max_attempts = self.max_attempts;
        t.transform_set.hflip = self.hflip;
        t.transform_set.rotation_deg = self.rotation_deg;
        t.transform_set.scale_range = (self.scale_min, self.scale_max);
        t.transform_set.color_shift = self.color_shift;
        g.split_fractions = (self.split_train, self.split_val, self.split_test);
        g.bank = match self.bank.as_str() {
            "procedural" => BankSource::Procedural {
                seed: self.bank_seed,
                variants_per_class: self.bank_variants,
            },
            dir => BankSource::Directory { path: dir.into() },
        };
        g.backgrounds = match self.backgrounds.as_str() {
            "procedural" => BackgroundSource::Procedural,
            dir => BackgroundSource::Directory { path: dir.into() },
        };
        g.validate().map_err(|e| match e {
            Error::Domain(m) => Error::Config(m),
            other => other,
        })?;
        Ok(g)
    }
}

pub fn gen_data(run: &RunConfig) -> Result<DatasetManifest> {
    let raw = run.raw()?;
    let preset: ScenePreset = raw.get("preset").unwrap_or("desk").parse()?;
    let settings = resolve_and_record(run, &GenDataSettings::for_preset(preset), &raw, &[], false)?;
    let config = settings.generator_config()?;
    let assets = SceneAssets::load(&config.bank, &config.backgrounds)?;
    build_dataset(&config, settings.count, &assets, &run.out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSettings {}

pub fn ingest(run: &RunConfig, root: &Path, labels: &Path) -> Result<DatasetManifest> {
    let raw = run.raw()?;
    let _: IngestSettings = resolve_and_record(
        run,
        &IngestSettings {},
        &raw,
        &[("root", root), ("labels", labels)],
        false,
    )?;
    let manifest = ingest_external_dataset(root, labels)?;
    write_manifest(&manifest, &run.out)?;
    Ok(manifest)
}

pub fn train(
    run: &RunConfig,
    data: &Path,
    natural: Option<&Path>,
) -> Result<crate::trainer::TrainingOutcome> {
    let raw = run.raw()?;
    let arch: Preset = raw.get("arch").unwrap_or("desk").parse()?;
    let mut inputs: Vec<(&str, &Path)> = vec![("synthetic", data)];
    if let Some(n) = natural {
        inputs.push(("natural", n));
    }
    let config = resolve_and_record(run, &TrainConfig::for_preset(arch), &raw, &inputs, false)?;
    config.validate()?;
    let synthetic = read_manifest(data)?;
    let natural = natural.map(read_manifest).transpose()?;
    run_training(
        &config,
        &synthetic,
        natural.as_ref(),
        &config.architecture(),
        &config.extractor_spec(),
        Some(&run.out),
    )
}

fn select(manifest: &DatasetManifest, split: &str, max: usize) -> Result<Vec<SceneRecord>> {
    let mut records: Vec<SceneRecord> = match split {
        "all" => manifest.records.clone(),
        s => {
            let s: Split = serde_json::from_value(Value::String(s.into())).map_err(|_| {
                Error::Config(format!("split must be all, train, val or test, got {s:?}"))
            })?;
            manifest.split(s).into_iter().cloned().collect()
        }
    };
    if max > 0 {
        records.truncate(max);
    }
    Ok(records)
}

fn latents(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    records: &[SceneRecord],
) -> Result<ProbeDataset> {
    let mut model = load_checkpoint(checkpoint)?.model()?;
    let mut probe = collect_latents_from(&mut model, manifest, records)?;
    probe.source_manifest = Some(manifest.dir.clone());
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub r2_threshold: f64,
    pub complementary_max: f64,
    pub split: String,
    /// Cap on probed records (0 = all).
    pub max_records: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let c = DetectorCriteria::default();
        Self {
            r2_threshold: c.r2_threshold,
            complementary_max: c.complementary_max,
            split: "all".into(),
            max_records: 0,
        }
    }
}

/// Parses `r2=0.05,comp=0.1` into config overrides.
pub fn criteria_overrides(text: &str) -> Result<Vec<String>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::Config(format!("criteria entry {part:?} is not key=value"))
            })?;
            let key = match k.trim() {
                "r2" | "r2_threshold" => "r2_threshold",
                "comp" | "complementary_max" => "complementary_max",
                other => return Err(Error::Config(format!("unknown criteria key {other:?}"))),
            };
            Ok(format!("{key}={}", v.trim()))
        })
        .collect()
}

pub fn probe(run: &RunConfig, checkpoint: &Path, manifest_dir: &Path) -> Result<Report> {
    let raw = run.raw()?;
    let s = resolve_and_record(
        run,
        &ProbeSettings::default(),
        &raw,
        &[("checkpoint", checkpoint), ("manifest", manifest_dir)],
        true,
    )?;
    let criteria = DetectorCriteria {
        r2_threshold: s.r2_threshold,
        complementary_max: s.complementary_max,
    };
    criteria.validate()?;
    let manifest = read_manifest(manifest_dir)?;
    let records = select(&manifest, &s.split, s.max_records)?;
    let probe = latents(checkpoint, &manifest, &records)?;
    let report = probe_all_dimensions(&probe, &criteria)?;
    let mut out = Report::new([
        "dim",
        "beta1",
        "beta2",
        "r_squared",
        "r",
        "n_samples",
        "class",
        "ambiguous",
        "error",
    ]);
    for (fit, class) in report.fits.iter().zip(&report.classes) {
        out.push([
            fit.dim_index.to_string(),
            fmt_num(fit.beta1),
            fmt_num(fit.beta2),
            fmt_num(fit.r_squared),
            fmt_num(fit.r_squared.sqrt()),
            fit.n_samples.to_string(),
            class.kind.to_string(),
            class.ambiguous.to_string(),
            String::new(),
        ])?;
    }
    for (dim, err) in &report.failures {
        out.push([
            dim.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            "failed".into(),
            "false".into(),
            err.clone(),
        ])?;
    }
    out.rows
        .sort_by_key(|r| r[0].parse::<usize>().unwrap_or(usize::MAX));
    emit_report(&out, ReportFormat::Csv, &run.out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutSettings {
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub master_seed: u64,
    /// `inverse` (inverse class frequency) or five comma-separated weights.
    pub class_weights: String,
    pub train_split: String,
    pub eval_split: String,
    pub max_records: usize,
}

impl Default for ReadoutSettings {
    fn default() -> Self {
        let r = ReadoutConfig::new(1);
        Self {
            hidden_units: r.hidden_units,
            hidden_layers: r.hidden_layers,
            epochs: r.epochs,
            lr: r.lr,
            batch_size: r.batch_size,
            master_seed: 0,
            class_weights: "inverse".into(),
            train_split: "all".into(),
            eval_split: "all".into(),
            max_records: 0,
        }
    }
}

const CLASS_LABELS: [&str; NUM_CLASSES] = ["0", "1", "2", "3", "4+"];

/// Table-1-style `label,ap` report: five classes then the mean.
pub fn ap_report(ap: &ApReport) -> Result<Report> {
    let mut out = Report::new(["label", "ap"]);
    for (label, v) in CLASS_LABELS.iter().zip(&ap.per_class) {
        out.push([label.to_string(), fmt_opt(*v)])?;
    }
    out.push(["mean".to_string(), fmt_num(ap.mean)])?;
    Ok(out)
}

/// Trains the readout on `train` latents and scores `eval`. Returns the
/// readout AP and the chance AP of the evaluation labels.
pub fn readout(
    run: &RunConfig,
    checkpoint: &Path,
    train: &Path,
    eval: &Path,
) -> Result<(ApReport, ApReport)> {
    let raw = run.raw()?;
    let s = resolve_and_record(
        run,
        &ReadoutSettings::default(),
        &raw,
        &[("checkpoint", checkpoint), ("train", train), ("eval", eval)],
        true,
    )?;
    let class_weights = match s.class_weights.as_str() {
        "inverse" => None,
        list => Some(
            list.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| {
                    Error::Config(format!(
                        "class_weights must be inverse or numbers, got {list:?}"
                    ))
                })?,
        ),
    };
    let train_manifest = read_manifest(train)?;
    let eval_manifest = read_manifest(eval)?;
    let train_probe = latents(
        checkpoint,
        &train_manifest,
        &select(&train_manifest, &s.train_split, s.max_records)?,
    )?;
    let eval_probe = latents(
        checkpoint,
        &eval_manifest,
        &select(&eval_manifest, &s.eval_split, s.max_records)?,
    )?;
    let config = ReadoutConfig {
        latent_dim: train_probe.latent_dim,
        hidden_units: s.hidden_units,
        hidden_layers: s.hidden_layers,
        class_weights,
        epochs: s.epochs,
        lr: s.lr,
        batch_size: s.batch_size,
        seed: s.master_seed,
    };
    let mut model = train_readout(&train_probe.latents, &train_probe.numerosity, &config)?;
    let ap = evaluate_readout(&mut model, &eval_probe.latents, &eval_probe.numerosity)?;
    let chance = chance_ap(&eval_probe.numerosity);
    emit_report(&ap_report(&ap)?, ReportFormat::Csv, &run.out)?;
    emit_report(
        &ap_report(&chance)?,
        ReportFormat::Csv,
        &run.out_dir(true).join("chance_ap.csv"),
    )?;
    Ok((ap, chance))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraverseSettings {
    /// Comma-separated latent indices.
    pub dims: String,
    /// `a..b` (integer steps) or a comma-separated list, in reference standard deviations.
    pub deltas: String,
    pub reference_records: usize,
}

impl Default for TraverseSettings {
    fn default() -> Self {
        Self {
            dims: "0".into(),
            deltas: "-2..2".into(),
            reference_records: 1000,
        }
    }
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry {v:?}")))
        })
        .collect()
}

pub fn parse_deltas(text: &str) -> Result<Vec<f64>> {
    if let Some((a, b)) = text.split_once("..") {
        let a: i64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad delta range {text:?}")))?;
        let b: i64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad delta range {text:?}")))?;
        if a > b {
            return Err(Error::Config(format!("empty delta range {text:?}")));
        }
        return Ok((a..=b).map(|v| v as f64).collect());
    }
    parse_list(text, "delta")
}

pub fn traverse(
    run: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    reference: &Path,
) -> Result<Report> {
    let raw = run.raw()?;
    let s = resolve_and_record(
        run,
        &TraverseSettings::default(),
        &raw,
        &[
            ("checkpoint", checkpoint),
            ("image", image),
            ("reference", reference),
        ],
        true,
    )?;
    let dims: Vec<usize> = parse_list(&s.dims, "dimension")?;
    let deltas = parse_deltas(&s.deltas)?;
    let manifest = read_manifest(reference)?;
    let records = select(&manifest, "all", s.reference_records)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let mut model = ckpt.model()?;
    let sigma = latent_std(&collect_latents_from(&mut model, &manifest, &records)?);
    let (h, w, _) = model.config().input_size;
    let img = Image::load(image)?;
    let img = if (img.height, img.width) == (h, w) {
        img
    } else {
        img.resize(h, w)
    };
    let grid = latent_traversal(&mut model, &img, &dims, &deltas, &sigma)?;
    render_traversal_grid(&grid, &run.out)?;
    let mut out = Report::new(["row", "col", "dim", "delta", "sigma_hat", "mean_intensity"]);
    for (r, &d) in grid.dims.iter().enumerate() {
        for (c, &delta) in grid.deltas.iter().enumerate() {
            let tile = &grid.images[r][c];
            let mean = tile.data.iter().map(|&v| v as f64).sum::<f64>() / tile.data.len() as f64;
            out.push([
                r.to_string(),
                c.to_string(),
                d.to_string(),
                fmt_num(delta),
                fmt_num(sigma[d]),
                fmt_num(mean),
            ])?;
        }
    }
    emit_report(&out, ReportFormat::Csv, &run.out.with_extension("csv"))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSettings {
    pub dim: usize,
    pub area_bins: usize,
    pub split: String,
    pub max_records: usize,
    /// Also render `<out>.png`.
    pub plot: bool,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            dim: 0,
            area_bins: 8,
            split: "all".into(),
            max_records: 0,
            plot: true,
        }
    }
}

pub fn profile(run: &RunConfig, checkpoint: &Path, manifest_dir: &Path) -> Result<Report> {
    let raw = run.raw()?;
    let s = resolve_and_record(
        run,
        &ProfileSettings::default(),
        &raw,
        &[("checkpoint", checkpoint), ("manifest", manifest_dir)],
        true,
    )?;
    let manifest = read_manifest(manifest_dir)?;
    let records = select(&manifest, &s.split, s.max_records)?;
    let probe = latents(checkpoint, &manifest, &records)?;
    let profile = response_profile(&probe, s.dim, s.area_bins)?;
    let mut out = Report::new([
        "numerosity",
        "area_bin",
        "area_lo",
        "area_hi",
        "count",
        "mean",
        "std",
    ]);
    for cell in &profile.cells {
        let (lo, hi) = match cell.area_bin {
            Some(b) => (
                fmt_num(profile.area_edges[b]),
                fmt_num(profile.area_edges[b + 1]),
            ),
            None => (String::new(), String::new()),
        };
        out.push([
            cell.numerosity.to_string(),
            cell.area_bin.map(|b| b.to_string()).unwrap_or_default(),
            lo,
            hi,
            cell.count.to_string(),
            fmt_opt(cell.mean),
            fmt_opt(cell.std),
        ])?;
    }
    emit_report(&out, ReportFormat::Csv, &run.out)?;
    if s.plot {
        render_profile_plot(&profile, &run.out.with_extension("png"))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySettings {
    /// Regenerate synthetic records from their seeds and compare.
    pub rerender: bool,
}

/// Writes `verify.csv` into the output directory; violations are a data error.
pub fn verify(run: &RunConfig, manifest_dir: &Path) -> Result<Report> {
    let raw = run.raw()?;
    let s = resolve_and_record(
        run,
        &VerifySettings { rerender: false },
        &raw,
        &[("manifest", manifest_dir)],
        false,
    )?;
    let manifest = read_manifest(manifest_dir)?;
    let assets = match (&manifest.header.generator_config, s.rerender) {
        (Some(g), true) => Some(SceneAssets::load(&g.bank, &g.backgrounds)?),
        _ => None,
    };
    let violations = verify_manifest(&manifest, assets.as_ref(), s.rerender);
    let mut out = Report::new(["violation"]);
    for v in &violations {
        out.push([v.to_string()])?;
    }
    emit_report(&out, ReportFormat::Csv, &run.out.join("verify.csv"))?;
    if !violations.is_empty() {
        return Err(Error::Format(format!(
            "{} manifest violations, first: {}",
            violations.len(),
            violations[0]
        )));
    }
    Ok(out)
}
