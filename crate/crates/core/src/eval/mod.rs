//! Benchmark suites, reports and embedding export.

mod export;
mod metrics;

pub use export::{export_embeddings, silhouette_score, EmbeddingInput, EmbeddingRow, EmbeddingTable, Silhouette, EMBEDDINGS_FILE, EMBEDDINGS_MANIFEST};
pub use metrics::{gaussian_kernel, psnr, psnr_slices, ssim, ssim_planes, PSNR_CAP, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::TensorImage;
use crate::network::{Network, NetworkConfig};
use crate::priors::{sha256_hex, BundleStore, PriorBundle, PriorPipeline};
use crate::train::{BundleIndex, Degradation, Pair};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const AVERAGE: &str = "Average";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub suite: String,
    pub setting: String,
    pub psnr: f64,
    pub ssim: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model_id: String,
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(model_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, model_id: model_id.into(), config_hash: config_hash.into(), rows: Vec::new() }
    }

    /// Appends the setting rows of one suite followed by their unweighted
    /// mean as the `Average` row.
    pub fn push_suite(&mut self, suite: &str, rows: Vec<EvalRow>) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::DatasetEmpty(format!("suite {suite} has no settings")));
        }
        let k = rows.len() as f64;
        let average = EvalRow {
            suite: suite.to_string(),
            setting: AVERAGE.to_string(),
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / k,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / k,
            n_images: rows.iter().map(|r| r.n_images).sum(),
        };
        self.rows.extend(rows);
        self.rows.push(average);
        Ok(())
    }

    pub fn suites(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.suite.as_str()) {
                out.push(&r.suite);
            }
        }
        out
    }

    pub fn settings(&self, suite: &str) -> Vec<&EvalRow> {
        self.rows.iter().filter(|r| r.suite == suite && r.setting != AVERAGE).collect()
    }

    pub fn average(&self, suite: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.suite == suite && r.setting == AVERAGE)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(r.psnr >= 0.0 && (-1.0..=1.0).contains(&r.ssim) && r.n_images >= 1) {
                return Err(Error::InvalidArgument(format!("report row {}/{} out of range", r.suite, r.setting)));
            }
        }
        Ok(())
    }

    /// One block per suite: settings as columns, `PSNR/SSIM` cells.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model {}  config {}", self.model_id, self.config_hash);
        for suite in self.suites() {
            let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.suite == suite).collect();
            let name_w = self.model_id.len().max(suite.len()).max(6);
            let cells: Vec<String> = rows.iter().map(|r| format!("{:.2}/{:.3}", r.psnr, r.ssim)).collect();
            let widths: Vec<usize> = rows.iter().zip(&cells).map(|(r, c)| r.setting.len().max(c.len())).collect();
            let _ = write!(out, "\n{suite:<name_w$}");
            for (r, w) in rows.iter().zip(&widths) {
                let _ = write!(out, " | {:>w$}", r.setting);
            }
            let _ = write!(out, "\n{:<name_w$}", self.model_id);
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(out, " | {c:>w$}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `report.json` and `report.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let json = dir.join(REPORT_JSON);
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(Error::io(&json))?;
        let txt = dir.join(REPORT_TXT);
        std::fs::write(&txt, self.to_table()).map_err(Error::io(&txt))
    }
}

/// Anything that maps a degraded image and its priors to a restoration.
pub trait Restorer: Sync {
    fn model_id(&self) -> String;
    fn config_hash(&self) -> String;
    fn restore(&self, image: &TensorImage, bundle: &PriorBundle) -> Result<TensorImage>;
}

pub fn config_hash(config: &NetworkConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

impl Restorer for Network {
    /// Digest of the parameter bytes.
    fn model_id(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.params.iter() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend(t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()));
        }
        format!("lmdir-{}", &sha256_hex(&bytes)[..12])
    }

    fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    fn restore(&self, image: &TensorImage, bundle: &PriorBundle) -> Result<TensorImage> {
        Network::restore(self, image, bundle)
    }
}

/// Baseline that returns the degraded input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct DegradedInput;

impl Restorer for DegradedInput {
    fn model_id(&self) -> String {
        "degraded-input".into()
    }

    fn config_hash(&self) -> String {
        "-".into()
    }

    fn restore(&self, image: &TensorImage, _bundle: &PriorBundle) -> Result<TensorImage> {
        Ok(image.clone())
    }
}

/// Where a suite's prior bundles come from.
pub enum BundleSource<'a> {
    Index(&'a BundleIndex),
    Store(&'a BundleStore),
    /// Builds missing bundles (through the pipeline cache when it has one).
    Pipeline { pipeline: &'a PriorPipeline, seed: u64 },
}

impl BundleSource<'_> {
    pub fn fetch(&self, image: &TensorImage, image_id: &str) -> Result<Arc<PriorBundle>> {
        match self {
            BundleSource::Index(index) => index.get(image_id).cloned(),
            BundleSource::Store(store) => match store.load(image_id) {
                Err(Error::NotFound(_)) => Err(Error::MissingBundle(image_id.to_string())),
                other => other.map(Arc::new),
            },
            BundleSource::Pipeline { pipeline, seed } => pipeline.build_bundle(image, *seed).map(Arc::new),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSetting {
    pub label: String,
    pub pairs: Vec<Pair>,
}

/// Degraded/clean pairs grouped by setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub name: String,
    pub settings: Vec<SuiteSetting>,
}

impl Suite {
    /// Applies every setting to every clean image with a per-image keyed RNG.
    pub fn synthetic(name: &str, clean: &[(String, TensorImage)], settings: &[Degradation], seed: u64) -> Result<Self> {
        if clean.is_empty() {
            return Err(Error::DatasetEmpty(format!("suite {name} has no images")));
        }
        let settings = settings
            .iter()
            .map(|d| {
                let pairs = clean
                    .iter()
                    .map(|(stem, img)| {
                        let degraded = d.apply_keyed(img, seed, &format!("{name}/{stem}/{}", d.label()));
                        Pair::new(format!("{stem}@{}", d.label()), degraded, img.clone())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SuiteSetting { label: d.label(), pairs })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { name: name.to_string(), settings })
    }

    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        self.settings.iter().flat_map(|s| s.pairs.iter())
    }
}

/// A suite on disk: `<root>/clean` plus synthesized settings, or
/// `<root>/{degraded,clean}` pairs when `paired`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub name: String,
    pub dataset_root: PathBuf,
    #[serde(default)]
    pub paired: bool,
    #[serde(default)]
    pub settings: Vec<Degradation>,
    #[serde(default)]
    pub seed: u64,
}

impl SuiteSpec {
    /// Unseen noise levels σ = 60 and 75.
    pub fn ood_noise(dataset_root: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            name: "ood-noise".into(),
            dataset_root: dataset_root.into(),
            paired: false,
            settings: ood_noise_settings(),
            seed,
        }
    }

    pub fn load(&self) -> Result<Suite> {
        let clean_dir = self.dataset_root.join("clean");
        if self.paired {
            let mut pairs = Vec::new();
            for path in image_files(&self.dataset_root.join("degraded"))? {
                let name = stem(&path);
                let clean = image_files(&clean_dir)?
                    .into_iter()
                    .find(|p| stem(p) == name)
                    .ok_or_else(|| Error::NotFound(format!("clean image for {}", path.display())))?;
                pairs.push(Pair::new(name, TensorImage::load(&path)?, TensorImage::load(&clean)?)?);
            }
            if pairs.is_empty() {
                return Err(Error::DatasetEmpty(format!("suite {} has no images", self.name)));
            }
            return Ok(Suite { name: self.name.clone(), settings: vec![SuiteSetting { label: "paired".into(), pairs }] });
        }
        if self.settings.is_empty() {
            return Err(Error::InvalidArgument(format!("suite {} lists no degradation settings", self.name)));
        }
        let clean = image_files(&clean_dir)?
            .into_iter()
            .map(|p| Ok((stem(&p), TensorImage::load(&p)?)))
            .collect::<Result<Vec<_>>>()?;
        Suite::synthetic(&self.name, &clean, &self.settings, self.seed)
    }
}

pub fn ood_noise_settings() -> Vec<Degradation> {
    vec![Degradation::Noise { sigma: 60.0 }, Degradation::Noise { sigma: 75.0 }]
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Full-image evaluation of one suite. Every setting yields a row with
/// mean PSNR/SSIM, followed by the suite's `Average` row.
pub fn run_suite(model: &dyn Restorer, suite: &Suite, bundles: &BundleSource<'_>) -> Result<EvalReport> {
    let mut report = EvalReport::new(model.model_id(), model.config_hash());
    append_suite(&mut report, model, suite, bundles)?;
    Ok(report)
}

pub fn run_suites(model: &dyn Restorer, suites: &[Suite], bundles: &BundleSource<'_>) -> Result<EvalReport> {
    let mut report = EvalReport::new(model.model_id(), model.config_hash());
    for suite in suites {
        append_suite(&mut report, model, suite, bundles)?;
    }
    Ok(report)
}

fn append_suite(report: &mut EvalReport, model: &dyn Restorer, suite: &Suite, bundles: &BundleSource<'_>) -> Result<()> {
    let mut rows = Vec::with_capacity(suite.settings.len());
    for setting in &suite.settings {
        if setting.pairs.is_empty() {
            return Err(Error::DatasetEmpty(format!("{}/{} has no images", suite.name, setting.label)));
        }
        let (mut p, mut s) = (0.0, 0.0);
        for pair in &setting.pairs {
            let bundle = bundles.fetch(&pair.degraded, &pair.image_id)?;
            let out = model.restore(&pair.degraded, &bundle)?;
            p += psnr(&out, &pair.clean, 1.0)?;
            s += ssim(&out, &pair.clean, 1.0)?;
        }
        let n = setting.pairs.len();
        log::info!("{}/{}: {:.2} dB over {n} images", suite.name, setting.label, p / n as f64);
        rows.push(EvalRow {
            suite: suite.name.clone(),
            setting: setting.label.clone(),
            psnr: p / n as f64,
            ssim: s / n as f64,
            n_images: n,
        });
    }
    report.push_suite(&suite.name, rows)
}
