//! Dataset manifests: building, ingesting, persisting and verifying.
//!
//! `manifest.jsonl` holds one JSON header line followed by one JSON record per
//! line. Image paths are relative to `image_root`, which is itself relative to
//! the manifest directory unless absolute.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    synthesize_scene, BackgroundSource, BankSource, SceneAssets, SceneSpec, TransformSet,
    MAX_NUMEROSITY,
};
use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{derive_seed, with_worker_pool};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_path: String,
    pub numerosity: usize,
    /// `None` when the source has no area ground truth.
    pub cumulative_area: Option<u64>,
    pub class_ids: Vec<usize>,
    /// (x, y, w, h)
    pub object_boxes: Vec<(usize, usize, usize, usize)>,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NumerositySampling {
    Uniform,
    Fixed(usize),
}

/// Everything needed to regenerate a synthetic dataset record by record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Scene template; `numerosity` and `seed` are filled per record.
    pub template: SceneSpec,
    pub numerosity: NumerositySampling,
    /// (train, val, test)
    pub split_fractions: (f64, f64, f64),
    pub master_seed: u64,
    pub bank: BankSource,
    pub backgrounds: BackgroundSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenePreset {
    /// 160x160 mixed-object scenes for warm-up at the full input size.
    Warmup,
    /// Single-asset scenes from 15 classes for the area/numerosity probe.
    Probe,
    /// 64x64 mixed-object scenes for desk-scale training.
    Desk,
}

impl std::str::FromStr for ScenePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Self::Warmup),
            "probe" => Ok(Self::Probe),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!(
                "unknown data preset {other:?} (warmup|probe|desk)"
            ))),
        }
    }
}

impl GeneratorConfig {
    pub fn preset(preset: ScenePreset, master_seed: u64) -> Self {
        let canvas = match preset {
            ScenePreset::Warmup => (160, 160),
            ScenePreset::Probe | ScenePreset::Desk => (64, 64),
        };
        Self {
            template: SceneSpec {
                canvas_size: canvas,
                same_asset: preset == ScenePreset::Probe,
                transform_set: TransformSet::default(),
                ..SceneSpec::default()
            },
            numerosity: NumerositySampling::Uniform,
            split_fractions: match preset {
                ScenePreset::Probe => (1.0, 0.0, 0.0),
                _ => (0.8, 0.1, 0.1),
            },
            master_seed,
            bank: BankSource::Procedural {
                seed: 0,
                variants_per_class: 4,
            },
            backgrounds: BackgroundSource::Procedural,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split_fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {a}, {b}, {c} must be non-negative and sum to 1"
            )));
        }
        if let NumerositySampling::Fixed(n) = self.numerosity {
            if n > MAX_NUMEROSITY {
                return Err(Error::Config(format!(
                    "fixed numerosity {n} outside [0, {MAX_NUMEROSITY}]"
                )));
            }
        }
        let mut probe = self.template.clone();
        probe.numerosity = 0;
        probe.validate()
    }

    /// The scene spec and split for record `index`.
    pub fn record_spec(&self, index: usize) -> (SceneSpec, Split) {
        let seed = derive_seed(self.master_seed, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe1);
        let numerosity = match self.numerosity {
            NumerositySampling::Uniform => rng.random_range(0..=MAX_NUMEROSITY),
            NumerositySampling::Fixed(n) => n,
        };
        let u: f64 = rng.random();
        let (a, b, _) = self.split_fractions;
        let split = if u < a {
            Split::Train
        } else if u < a + b {
            Split::Val
        } else {
            Split::Test
        };
        let spec = SceneSpec {
            numerosity,
            seed,
            ..self.template.clone()
        };
        (spec, split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    #[serde(rename = "type")]
    pub kind: String,
    pub format_version: u32,
    pub generator_config: Option<GeneratorConfig>,
    pub class_counts: [usize; MAX_NUMEROSITY + 1],
    pub image_root: String,
    pub record_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<SceneRecord>,
    /// Directory the manifest was read from or written to.
    pub dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        records: Vec<SceneRecord>,
        generator_config: Option<GeneratorConfig>,
        image_root: String,
        dir: PathBuf,
    ) -> Self {
        let header = ManifestHeader {
            kind: "header".into(),
            format_version: MANIFEST_FORMAT_VERSION,
            generator_config,
            class_counts: histogram(&records),
            image_root,
            record_count: records.len(),
        };
        Self {
            header,
            records,
            dir,
        }
    }

    pub fn class_counts(&self) -> [usize; MAX_NUMEROSITY + 1] {
        histogram(&self.records)
    }

    pub fn image_path(&self, record: &SceneRecord) -> PathBuf {
        self.dir
            .join(&self.header.image_root)
            .join(&record.image_path)
    }

    pub fn load_image(&self, record: &SceneRecord) -> Result<Image> {
        Image::load(&self.image_path(record))
    }

    /// Canvas size declared by the generator, if synthetic.
    pub fn canvas_size(&self) -> Option<(usize, usize)> {
        self.header
            .generator_config
            .as_ref()
            .map(|g| g.template.canvas_size)
    }

    pub fn split(&self, split: Split) -> Vec<&SceneRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Copy with `records` replaced and the histogram recomputed.
    pub fn with_records(&self, records: Vec<SceneRecord>) -> Self {
        Self::new(
            records,
            self.header.generator_config.clone(),
            self.header.image_root.clone(),
            self.dir.clone(),
        )
    }
}

pub fn histogram(records: &[SceneRecord]) -> [usize; MAX_NUMEROSITY + 1] {
    let mut h = [0; MAX_NUMEROSITY + 1];
    for r in records {
        if r.numerosity <= MAX_NUMEROSITY {
            h[r.numerosity] += 1;
        }
    }
    h
}

/// Serializes the manifest to `dir/manifest.jsonl` atomically.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let mut text =
        serde_json::to_string(&manifest.header).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    for r in &manifest.records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Reads `manifest.jsonl` from a directory (or the file itself).
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty manifest", file.display())))?;
    let header: ManifestHeader = serde_json::from_str(first)
        .map_err(|e| Error::Format(format!("{}:1: header: {e}", file.display())))?;
    if header.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: manifest format_version {} unsupported (expected {MANIFEST_FORMAT_VERSION})",
            file.display(),
            header.format_version
        )));
    }
    let records = lines
        .map(|(i, l)| {
            serde_json::from_str::<SceneRecord>(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", file.display(), i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        header,
        records,
        dir,
    })
}

/// Generates `count` scenes into `out_dir/images` and writes the manifest.
pub fn build_dataset(
    config: &GeneratorConfig,
    count: usize,
    assets: &SceneAssets,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records = with_worker_pool(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let (spec, split) = config.record_spec(i);
                let scene = synthesize_with_reseed(spec, assets)?;
                let name = format!("{i:06}.png");
                scene.image.save_png(&images.join(&name))?;
                Ok(SceneRecord {
                    image_path: name,
                    split,
                    ..scene.record
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = DatasetManifest::new(
        records,
        Some(config.clone()),
        "images".into(),
        out_dir.to_path_buf(),
    );
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

/// Rare layouts cannot be packed; those records move to a derived seed.
fn synthesize_with_reseed(mut spec: SceneSpec, assets: &SceneAssets) -> Result<super::Scene> {
    const RESEEDS: u64 = 16;
    let base = spec.seed;
    let mut retry = 0;
    loop {
        match synthesize_scene(&spec, assets) {
            Err(Error::PackingFailure { .. }) if retry < RESEEDS => {
                retry += 1;
                spec.seed = derive_seed(base, retry);
            }
            other => return other,
        }
    }
}

fn parse_label(raw: &str) -> Option<usize> {
    match raw.trim() {
        "4+" => Some(4),
        s => s.parse::<usize>().ok().filter(|&n| n <= MAX_NUMEROSITY),
    }
}

/// Reads a `name,label` CSV (labels 0..3, 4 or 4+) for images under `root`.
pub fn ingest_external_dataset(root: &Path, label_file: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(label_file).map_err(|e| Error::io(label_file, e))?;
    let mut records = Vec::new();
    let mut missing = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, label) = line.rsplit_once(',').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected name,label",
                label_file.display(),
                i + 1
            ))
        })?;
        let (name, label) = (name.trim(), label.trim());
        if records.is_empty() && missing.is_empty() && label.eq_ignore_ascii_case("label") {
            continue;
        }
        let numerosity = parse_label(label).ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: label {label:?} not in {{0,1,2,3,4,4+}}",
                label_file.display(),
                i + 1
            ))
        })?;
        if !root.join(name).is_file() {
            missing.push(root.join(name));
        }
        records.push(SceneRecord {
            image_path: name.to_string(),
            numerosity,
            cumulative_area: None,
            class_ids: Vec::new(),
            object_boxes: Vec::new(),
            split: Split::Train,
            seed: 0,
        });
    }
    if records.is_empty() {
        return Err(Error::Format(format!(
            "{}: no labelled rows",
            label_file.display()
        )));
    }
    if !missing.is_empty() {
        return Err(Error::MissingImage(missing));
    }
    let root = std::path::absolute(root).map_err(|e| Error::io(root, e))?;
    Ok(DatasetManifest::new(
        records,
        None,
        root.to_string_lossy().into_owned(),
        PathBuf::new(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    HistogramMismatch {
        label: usize,
        declared: usize,
        actual: usize,
    },
    RecordCount {
        declared: usize,
        actual: usize,
    },
    MissingImage {
        path: PathBuf,
    },
    UnreadableImage {
        path: PathBuf,
        reason: String,
    },
    WrongCanvas {
        path: PathBuf,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    LabelLength {
        index: usize,
    },
    AreaMismatch {
        index: usize,
        recorded: Option<u64>,
        rerendered: u64,
    },
    Overlap {
        index: usize,
    },
    RerenderMismatch {
        index: usize,
        detail: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::HistogramMismatch {
                label,
                declared,
                actual,
            } => {
                write!(
                    f,
                    "histogram mismatch for label {label}: declared {declared}, actual {actual}"
                )
            }
            Violation::RecordCount { declared, actual } => {
                write!(f, "record count declared {declared}, actual {actual}")
            }
            Violation::MissingImage { path } => write!(f, "missing image {}", path.display()),
            Violation::UnreadableImage { path, reason } => {
                write!(f, "unreadable image {}: {reason}", path.display())
            }
            Violation::WrongCanvas {
                path,
                expected,
                actual,
            } => write!(
                f,
                "{} is {}x{}, expected {}x{}",
                path.display(),
                actual.0,
                actual.1,
                expected.0,
                expected.1
            ),
            Violation::LabelLength { index } => write!(
                f,
                "record {index}: class_ids length differs from numerosity"
            ),
            Violation::AreaMismatch {
                index,
                recorded,
                rerendered,
            } => {
                write!(
                    f,
                    "record {index}: recorded area {recorded:?}, re-rendered {rerendered}"
                )
            }
            Violation::Overlap { index } => write!(f, "record {index}: object masks overlap"),
            Violation::RerenderMismatch { index, detail } => write!(f, "record {index}: {detail}"),
        }
    }
}

/// Checks manifest invariants. With `rerender`, synthetic records are
/// regenerated from their seeds and compared with the stored image and labels.
pub fn verify_manifest(
    manifest: &DatasetManifest,
    assets: Option<&SceneAssets>,
    rerender: bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let actual = manifest.class_counts();
    for (label, (&declared, &actual)) in
        manifest.header.class_counts.iter().zip(&actual).enumerate()
    {
        if declared != actual {
            out.push(Violation::HistogramMismatch {
                label,
                declared,
                actual,
            });
        }
    }
    if manifest.header.record_count != manifest.records.len() {
        out.push(Violation::RecordCount {
            declared: manifest.header.record_count,
            actual: manifest.records.len(),
        });
    }
    let canvas = manifest.canvas_size();
    let generator = manifest.header.generator_config.as_ref();
    let per_record: Vec<Vec<Violation>> = with_worker_pool(|| {
        manifest
            .records
            .par_iter()
            .enumerate()
            .map(|(index, record)| {
                let mut v = Vec::new();
                let path = manifest.image_path(record);
                if !path.is_file() {
                    v.push(Violation::MissingImage { path });
                    return v;
                }
                let image = match Image::load(&path) {
                    Ok(img) => img,
                    Err(e) => {
                        v.push(Violation::UnreadableImage {
                            path,
                            reason: e.to_string(),
                        });
                        return v;
                    }
                };
                if let Some(expected) = canvas {
                    if (image.height, image.width) != expected {
                        v.push(Violation::WrongCanvas {
                            path: path.clone(),
                            expected,
                            actual: (image.height, image.width),
                        });
                    }
                }
                if generator.is_some() && record.class_ids.len() != record.numerosity {
                    v.push(Violation::LabelLength { index });
                }
                if let (true, Some(gen), Some(assets)) = (rerender, generator, assets) {
                    let spec = SceneSpec {
                        numerosity: record.numerosity,
                        seed: record.seed,
                        ..gen.template.clone()
                    };
                    match synthesize_scene(&spec, assets) {
                        Err(e) => v.push(Violation::RerenderMismatch {
                            index,
                            detail: e.to_string(),
                        }),
                        Ok(scene) => {
                            let area = scene.composite_area() as u64;
                            if record.cumulative_area != Some(area) {
                                v.push(Violation::AreaMismatch {
                                    index,
                                    recorded: record.cumulative_area,
                                    rerendered: area,
                                });
                            }
                            let summed: usize = scene.objects.iter().map(|o| o.area()).sum();
                            if !spec.allow_overlap && summed != area as usize {
                                v.push(Violation::Overlap { index });
                            }
                            if scene.image != image {
                                v.push(Violation::RerenderMismatch {
                                    index,
                                    detail: "stored image differs from re-rendered scene".into(),
                                });
                            }
                        }
                    }
                }
                v
            })
            .collect()
    });
    out.extend(per_record.into_iter().flatten());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(dir: &Path, count: usize, seed: u64) -> DatasetManifest {
        let cfg = GeneratorConfig::preset(ScenePreset::Desk, seed);
        build_dataset(&cfg, count, &SceneAssets::procedural(0), dir).unwrap()
    }

    #[test]
    fn build_write_read_verify() {
        let dir = tempfile::tempdir().unwrap();
        let m = build(dir.path(), 100, 11);
        assert_eq!(m.records.len(), 100);
        assert_eq!(m.class_counts().iter().sum::<usize>(), 100);
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.header, m.header);
        let assets = SceneAssets::procedural(0);
        assert_eq!(verify_manifest(&back, Some(&assets), true), vec![]);
    }

    #[test]
    fn identical_builds_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        build(a.path(), 20, 5);
        build(b.path(), 20, 5);
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
        for i in 0..20 {
            let f = format!("images/{i:06}.png");
            assert_eq!(read(a.path(), &f), read(b.path(), &f));
        }
    }

    #[test]
    fn fixed_numerosity() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GeneratorConfig::preset(ScenePreset::Desk, 1);
        cfg.numerosity = NumerositySampling::Fixed(2);
        let m = build_dataset(&cfg, 1, &SceneAssets::procedural(0), dir.path()).unwrap();
        assert_eq!(m.records[0].class_ids.len(), 2);
    }

    #[test]
    fn verify_reports_missing_and_tampered() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build(dir.path(), 10, 2);
        std::fs::remove_file(dir.path().join("images/000003.png")).unwrap();
        let v = verify_manifest(&m, None, false);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::MissingImage { .. }));
        m.header.class_counts[0] += 1;
        let v = verify_manifest(&m, None, false);
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::HistogramMismatch { label: 0, .. })));
    }

    #[test]
    fn verify_catches_tampered_area() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build(dir.path(), 10, 2);
        let idx = m.records.iter().position(|r| r.numerosity > 0).unwrap();
        m.records[idx].cumulative_area = Some(m.records[idx].cumulative_area.unwrap() + 1);
        let v = verify_manifest(&m, Some(&SceneAssets::procedural(0)), true);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::AreaMismatch { .. }));
    }

    fn write_images(dir: &Path, names: &[&str]) {
        for n in names {
            Image::filled(8, 8, 0.5).save_png(&dir.join(n)).unwrap();
        }
    }

    #[test]
    fn ingest_maps_labels() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png", "b.png", "c.png"]);
        let labels = dir.path().join("labels.csv");
        std::fs::write(&labels, "name,label\na.png,0\nb.png,2\nc.png,4+\n").unwrap();
        let m = ingest_external_dataset(dir.path(), &labels).unwrap();
        let n: Vec<usize> = m.records.iter().map(|r| r.numerosity).collect();
        assert_eq!(n, vec![0, 2, 4]);
        assert!(m.records.iter().all(|r| r.cumulative_area.is_none()));
        assert_eq!(verify_manifest(&m, None, false), vec![]);
    }

    #[test]
    fn ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a.png"]);
        let labels = dir.path().join("labels.csv");
        std::fs::write(&labels, "").unwrap();
        assert!(matches!(
            ingest_external_dataset(dir.path(), &labels),
            Err(Error::Format(_))
        ));
        std::fs::write(&labels, "a.png,5\n").unwrap();
        assert!(matches!(
            ingest_external_dataset(dir.path(), &labels),
            Err(Error::Format(_))
        ));
        std::fs::write(&labels, "a.png,two\n").unwrap();
        assert!(matches!(
            ingest_external_dataset(dir.path(), &labels),
            Err(Error::Format(_))
        ));
        std::fs::write(&labels, "a.png,1\nzz.png,3\nyy.png,0\n").unwrap();
        match ingest_external_dataset(dir.path(), &labels) {
            Err(Error::MissingImage(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
