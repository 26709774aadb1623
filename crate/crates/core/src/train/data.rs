use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::degrade::{add_gaussian_noise, synthesize_lowlight, synthesize_rain, RainParams};
use crate::autodiff::reflect_index;
use crate::error::{Error, Result};
use crate::image::TensorImage;
use crate::priors::{BundleStore, PriorBundle, PriorPipeline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Denoise,
    Derain,
    Lowlight,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Denoise, TaskId::Derain, TaskId::Lowlight];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Denoise => "denoise",
            TaskId::Derain => "derain",
            TaskId::Lowlight => "lowlight",
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

/// One training task.
///
/// Synthesized tasks read `degradation_params`: `sigma` (0–255 scale) for
/// denoising, `gamma` and `scale` (all combinations) for low light, and
/// `count` (streaks per 64×64 area) for rain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub dataset_root: PathBuf,
    #[serde(default)]
    pub degradation_params: BTreeMap<String, Vec<f64>>,
    pub paired: bool,
}

impl TaskSpec {
    pub fn new(task_id: TaskId, dataset_root: impl Into<PathBuf>, paired: bool) -> Self {
        Self { task_id, dataset_root: dataset_root.into(), degradation_params: BTreeMap::new(), paired }
    }

    pub fn with_param(mut self, key: &str, values: &[f64]) -> Self {
        self.degradation_params.insert(key.to_string(), values.to_vec());
        self
    }

    fn param(&self, key: &str, default: &[f64]) -> Vec<f64> {
        self.degradation_params.get(key).cloned().unwrap_or_else(|| default.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_root.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "dataset root {} does not exist",
                self.dataset_root.display()
            )));
        }
        if let Some(s) = self.degradation_params.get("sigma") {
            if s.iter().any(|&v| !(v > 0.0 && v <= 255.0)) {
                return Err(Error::InvalidConfig(format!("sigma values {s:?} must lie in (0, 255]")));
            }
        }
        Ok(())
    }

    /// Concrete degradation settings of a synthesized task.
    pub fn settings(&self) -> Vec<Degradation> {
        match self.task_id {
            TaskId::Denoise => {
                self.param("sigma", &[15.0, 25.0, 50.0]).into_iter().map(|sigma| Degradation::Noise { sigma }).collect()
            }
            TaskId::Lowlight => {
                let scales = self.param("scale", &[0.3]);
                self.param("gamma", &[1.8])
                    .into_iter()
                    .flat_map(|gamma| scales.iter().map(move |&scale| Degradation::LowLight { gamma, scale }))
                    .collect()
            }
            TaskId::Derain => self
                .param("count", &[40.0])
                .into_iter()
                .map(|c| Degradation::Rain(RainParams { count: c.max(0.0) as usize, ..RainParams::default() }))
                .collect(),
        }
    }
}

/// A concrete synthetic degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    Identity,
    Noise { sigma: f64 },
    LowLight { gamma: f64, scale: f64 },
    Rain(RainParams),
}

impl Degradation {
    pub fn label(&self) -> String {
        match self {
            Degradation::Identity => "identity".into(),
            Degradation::Noise { sigma } => format!("sigma={sigma}"),
            Degradation::LowLight { gamma, scale } => format!("gamma={gamma},scale={scale}"),
            Degradation::Rain(p) => format!("rain={}", p.count),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, clean: &TensorImage, rng: &mut R) -> TensorImage {
        match self {
            Degradation::Identity => clean.clone(),
            Degradation::Noise { sigma } => add_gaussian_noise(clean, *sigma, rng),
            Degradation::LowLight { gamma, scale } => synthesize_lowlight(clean, *gamma, *scale),
            Degradation::Rain(p) => synthesize_rain(clean, p, rng),
        }
    }

    /// Applies with an RNG derived from `(seed, key)` so a given source image
    /// always degrades the same way.
    pub fn apply_keyed(&self, clean: &TensorImage, seed: u64, key: &str) -> TensorImage {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(key.as_bytes());
        h.update(self.label().as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        self.apply(clean, &mut rng)
    }
}

/// A degraded/clean pair with the degraded image's content id.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub degraded: TensorImage,
    pub clean: TensorImage,
    pub image_id: String,
}

impl Pair {
    pub fn new(name: impl Into<String>, degraded: TensorImage, clean: TensorImage) -> Result<Self> {
        if (degraded.height(), degraded.width()) != (clean.height(), clean.width()) {
            return Err(Error::shape(
                "Pair::new",
                format!("{}x{}", clean.height(), clean.width()),
                (degraded.height(), degraded.width()),
            ));
        }
        let image_id = degraded.content_id();
        Ok(Self { name: name.into(), degraded, clean, image_id })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: TaskId,
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskData>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(Error::io(dir))?;
    let mut files: Vec<PathBuf> = entries
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

impl Dataset {
    pub fn new(tasks: Vec<TaskData>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::DatasetEmpty("no tasks".into()));
        }
        if let Some(t) = tasks.iter().find(|t| t.pairs.is_empty()) {
            return Err(Error::DatasetEmpty(format!("task {} has no images", t.task)));
        }
        Ok(Self { tasks })
    }

    /// Reads `<root>/<task>/{degraded,clean}` for paired tasks and
    /// `<root>/<task>/clean` for synthesized ones.
    pub fn load(specs: &[TaskSpec], seed: u64) -> Result<Self> {
        let mut tasks = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let base = spec.dataset_root.join(spec.task_id.as_str());
            let clean_dir = base.join("clean");
            let mut pairs = Vec::new();
            if spec.paired {
                for path in image_files(&base.join("degraded"))? {
                    let name = stem(&path);
                    let clean_path = image_files(&clean_dir)?
                        .into_iter()
                        .find(|p| stem(p) == name)
                        .ok_or_else(|| Error::NotFound(format!("clean image for {}", path.display())))?;
                    pairs.push(Pair::new(name, TensorImage::load(&path)?, TensorImage::load(&clean_path)?)?);
                }
            } else {
                for path in image_files(&clean_dir)? {
                    let clean = TensorImage::load(&path)?;
                    let name = stem(&path);
                    for setting in spec.settings() {
                        let degraded = setting.apply_keyed(&clean, seed, &format!("{}/{name}", spec.task_id));
                        pairs.push(Pair::new(format!("{name}@{}", setting.label()), degraded, clean.clone())?);
                    }
                }
            }
            if pairs.is_empty() {
                return Err(Error::DatasetEmpty(format!("{} has no images", base.display())));
            }
            tasks.push(TaskData { task: spec.task_id, pairs });
        }
        Self::new(tasks)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        self.tasks.iter().flat_map(|t| t.pairs.iter())
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(|t| t.pairs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform task, then uniform image within the task.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let t = rng.random_range(0..self.tasks.len());
        let i = rng.random_range(0..self.tasks[t].pairs.len());
        (t, i)
    }
}

/// Prior bundles of a dataset keyed by degraded image id.
#[derive(Clone, Debug, Default)]
pub struct BundleIndex {
    bundles: HashMap<String, Arc<PriorBundle>>,
}

impl BundleIndex {
    pub fn insert(&mut self, bundle: PriorBundle) {
        self.bundles.insert(bundle.image_id.clone(), Arc::new(bundle));
    }

    pub fn get(&self, image_id: &str) -> Result<&Arc<PriorBundle>> {
        self.bundles.get(image_id).ok_or_else(|| Error::MissingBundle(image_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Loads the bundle of every degraded image from a cache directory.
    pub fn load(data: &Dataset, root: &Path) -> Result<Self> {
        let store = BundleStore::new(root);
        let mut index = Self::default();
        for pair in data.pairs() {
            if index.bundles.contains_key(&pair.image_id) {
                continue;
            }
            if !store.contains(&pair.image_id) {
                return Err(Error::MissingBundle(pair.image_id.clone()));
            }
            index.insert(store.load(&pair.image_id)?);
        }
        Ok(index)
    }

    /// Builds (or fetches from the pipeline cache) every missing bundle.
    pub fn build(data: &Dataset, pipeline: &PriorPipeline, seed: u64) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let images: Vec<TensorImage> = data
            .pairs()
            .filter(|p| seen.insert(p.image_id.clone()))
            .map(|p| p.degraded.clone())
            .collect();
        let mut index = Self::default();
        for bundle in pipeline.build_bundles(&images, seed) {
            index.insert(bundle?);
        }
        Ok(index)
    }
}

/// One training example: aligned crops plus the parent image's priors.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub task: TaskId,
    pub image_id: String,
    pub degraded: TensorImage,
    pub clean: TensorImage,
    pub bundle: Arc<PriorBundle>,
}

/// Extends the image to at least `min_h × min_w` by reflection at the
/// bottom/right edges.
pub fn reflect_pad_to(img: &TensorImage, min_h: usize, min_w: usize) -> TensorImage {
    let (h, w) = (img.height(), img.width());
    if h >= min_h && w >= min_w {
        return img.clone();
    }
    let (nh, nw) = (h.max(min_h), w.max(min_w));
    TensorImage::from_fn(nh, nw, |y, x, c| img.get(reflect_index(y as isize, h), reflect_index(x as isize, w), c))
}

pub fn crop(img: &TensorImage, top: usize, left: usize, height: usize, width: usize) -> TensorImage {
    assert!(top + height <= img.height() && left + width <= img.width(), "crop out of bounds");
    TensorImage::from_fn(height, width, |y, x, c| img.get(top + y, left + x, c))
}

pub fn flip_horizontal(img: &TensorImage) -> TensorImage {
    let w = img.width();
    TensorImage::from_fn(img.height(), w, |y, x, c| img.get(y, w - 1 - x, c))
}

/// Same random `size × size` window (and flip) on both images. Images
/// smaller than the window are reflect-padded first.
pub fn aligned_crop<R: Rng + ?Sized>(
    degraded: &TensorImage,
    clean: &TensorImage,
    size: usize,
    flip: bool,
    rng: &mut R,
) -> (TensorImage, TensorImage) {
    let a = reflect_pad_to(degraded, size, size);
    let b = reflect_pad_to(clean, size, size);
    let top = rng.random_range(0..=a.height() - size);
    let left = rng.random_range(0..=a.width() - size);
    let (mut a, mut b) = (crop(&a, top, left, size, size), crop(&b, top, left, size, size));
    if flip && rng.random::<bool>() {
        a = flip_horizontal(&a);
        b = flip_horizontal(&b);
    }
    (a, b)
}

pub fn sample_batch<R: Rng + ?Sized>(
    data: &Dataset,
    bundles: &BundleIndex,
    crop_size: usize,
    batch: usize,
    flip: bool,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    if data.tasks.is_empty() || data.tasks.iter().any(|t| t.pairs.is_empty()) {
        return Err(Error::DatasetEmpty("a task has no images".into()));
    }
    (0..batch)
        .map(|_| {
            let (t, i) = data.draw(rng);
            let pair = &data.tasks[t].pairs[i];
            let bundle = bundles.get(&pair.image_id)?.clone();
            let (degraded, clean) = aligned_crop(&pair.degraded, &pair.clean, crop_size, flip, rng);
            Ok(TrainingSample { task: data.tasks[t].task, image_id: pair.image_id.clone(), degraded, clean, bundle })
        })
        .collect()
}

/// `n` synthetic scenes of `size × size` with Gaussian noise of `sigma`
/// (on the 0..255 scale), as a single denoising task.
pub fn synthetic_denoise_dataset(n: usize, size: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|i| {
            let clean = super::degrade::synthetic_scene(size, size, &mut rng);
            let degraded = add_gaussian_noise(&clean, sigma, &mut rng);
            Pair::new(format!("scene{i:03}@sigma{sigma}"), degraded, clean)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(vec![TaskData { task: TaskId::Denoise, pairs }])
}
