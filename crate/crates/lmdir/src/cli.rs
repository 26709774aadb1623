//! Command line entry points.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmdir_core::eval::{
    export_embeddings, ood_noise_settings, psnr, run_suites, BundleSource, DegradedInput, EmbeddingInput, Suite,
    SuiteSpec,
};
use lmdir_core::network::{guided_restore, Checkpoint, Network, NetworkConfig};
use lmdir_core::priors::{PriorPipeline, ProviderConfig};
use lmdir_core::train::{
    synthetic_denoise_dataset, synthetic_scene, train, BundleIndex, Dataset, Degradation, TaskId, TaskSpec,
    TrainConfig, TrainState, CHECKPOINT_FILE,
};
use lmdir_core::{Error, Result, TensorImage};
use rand::SeedableRng;

use crate::server::{router, router_with_ui, AppState};

#[derive(Debug, Parser)]
#[command(name = "lmdir", version, about = "Prior-conditioned multiple-in-one image restoration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and cache prior bundles for images or training data.
    PriorGen(PriorGenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on benchmark suites.
    Eval(EvalArgs),
    /// Restore one image, automatically or from an instruction.
    Restore(RestoreArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Export degradation embeddings for external projection.
    ExportEmbeddings(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProviderMode {
    Fixture,
    Live,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    fn network(self) -> NetworkConfig {
        match self {
            Profile::Desk => NetworkConfig::tiny(),
            Profile::Paper => NetworkConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    /// `fixture` uses the deterministic offline providers; `live` reads
    /// endpoints from `--provider-config`.
    #[arg(long, env = "LMDIR_PROVIDER_MODE", value_enum, default_value = "fixture")]
    pub provider_mode: ProviderMode,
    /// JSON provider configuration.
    #[arg(long)]
    pub provider_config: Option<PathBuf>,
    /// Diffusion seed for reference synthesis.
    #[arg(long, default_value_t = 0)]
    pub prior_seed: u64,
}

impl ProviderArgs {
    pub fn config(&self) -> Result<ProviderConfig> {
        let mut config = match &self.provider_config {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                serde_json::from_slice::<ProviderConfig>(&bytes)?
            }
            None => ProviderConfig::default(),
        };
        match self.provider_mode {
            ProviderMode::Fixture => {
                let fixture = ProviderConfig::default();
                config.mllm_endpoint = fixture.mllm_endpoint;
                config.text_encoder_endpoint = fixture.text_encoder_endpoint;
                config.diffusion_endpoint = fixture.diffusion_endpoint;
                config.image_encoder_endpoint = fixture.image_encoder_endpoint;
            }
            ProviderMode::Live if config.all_fixture() => {
                return Err(Error::InvalidArgument(
                    "live provider mode needs endpoints in --provider-config".into(),
                ));
            }
            ProviderMode::Live => {}
        }
        config.validate()?;
        Ok(config)
    }

    pub fn pipeline(&self, bundle_root: Option<&Path>) -> Result<PriorPipeline> {
        let pipeline = PriorPipeline::from_config(self.config()?)?;
        Ok(match bundle_root {
            Some(root) => pipeline.with_cache(root),
            None => pipeline,
        })
    }
}

#[derive(Debug, Args)]
pub struct PriorGenArgs {
    /// An image file or a directory of images.
    #[arg(long, conflicts_with = "data_root")]
    pub input: Option<PathBuf>,
    /// Training data root with one directory per task.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = TaskId::ALL)]
    pub tasks: Vec<TaskId>,
    /// Use existing degraded/clean pairs instead of synthesizing.
    #[arg(long)]
    pub paired: bool,
    #[arg(long, env = "LMDIR_BUNDLE_ROOT")]
    pub bundle_root: PathBuf,
    /// Seed for synthesized degradations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
    #[arg(long, required_unless_present = "synthetic")]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = TaskId::ALL)]
    pub tasks: Vec<TaskId>,
    #[arg(long)]
    pub paired: bool,
    /// Train on this many synthetic noisy scenes instead of `--data-root`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub synthetic_size: usize,
    #[arg(long, env = "LMDIR_BUNDLE_ROOT")]
    pub bundle_root: Option<PathBuf>,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint.lmdir`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_flip: bool,
    /// Single-worker, seeded, serialized execution. Training always runs
    /// this way.
    #[arg(long)]
    pub deterministic: bool,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "LMDIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// JSON file holding a list of suite specifications.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Directory with `clean/` images for the unseen-noise suite.
    #[arg(long)]
    pub ood: Option<PathBuf>,
    /// Evaluate on this many synthetic scenes (seen and unseen noise levels).
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub synthetic_size: usize,
    /// Also report the degraded input as a baseline.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "LMDIR_BUNDLE_ROOT")]
    pub bundle_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, env = "LMDIR_BUNDLE_ROOT")]
    pub bundle_root: Option<PathBuf>,
    /// Degradation description replacing the automatic one.
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long, env = "LMDIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Require the checkpoint to hold this profile's network.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Clean image; reports the PSNR gain.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "LMDIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, env = "LMDIR_BUNDLE_ROOT")]
    pub bundle_root: Option<PathBuf>,
    /// Static frontend assets served under `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, env = "LMDIR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Directory with one subdirectory of images per class.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "LMDIR_BUNDLE_ROOT")]
    pub bundle_root: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PriorGen(a) => prior_gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Restore(a) => restore_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::ExportEmbeddings(a) => export_cmd(a),
    }
}

pub fn load_network(path: &Path, profile: Option<Profile>) -> Result<Network> {
    let ckpt = match profile {
        Some(p) => Checkpoint::load_expecting(path, &p.network())?,
        None => Checkpoint::load(path)?,
    };
    Ok(Network { config: ckpt.config, params: ckpt.params })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?
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

fn task_specs(root: &Path, tasks: &[TaskId], paired: bool) -> Vec<TaskSpec> {
    tasks.iter().map(|&t| TaskSpec::new(t, root, paired)).collect()
}

fn prior_gen(a: PriorGenArgs) -> Result<()> {
    let pipeline = a.provider.pipeline(Some(&a.bundle_root))?;
    let images: Vec<TensorImage> = match (&a.input, &a.data_root) {
        (Some(input), _) if input.is_dir() => image_files(input)?.iter().map(|p| TensorImage::load(p)).collect::<Result<_>>()?,
        (Some(input), _) => vec![TensorImage::load(input)?],
        (None, Some(root)) => {
            let data = Dataset::load(&task_specs(root, &a.tasks, a.paired), a.seed)?;
            let mut seen = std::collections::HashSet::new();
            data.pairs().filter(|p| seen.insert(p.image_id.clone())).map(|p| p.degraded.clone()).collect()
        }
        (None, None) => return Err(Error::InvalidArgument("prior-gen needs --input or --data-root".into())),
    };
    let mut failures = 0;
    for (image, result) in images.iter().zip(pipeline.build_bundles(&images, a.provider.prior_seed)) {
        match result {
            Ok(bundle) => println!("{}\t{}", bundle.image_id, bundle.texts.degradation_text),
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", image.content_id());
            }
        }
    }
    if failures > 0 {
        return Err(Error::ProviderUnavailable(format!("{failures} of {} bundles failed", images.len())));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let (data, tasks) = match a.synthetic {
        Some(n) => (synthetic_denoise_dataset(n, a.synthetic_size, 25.0, seed)?, Vec::new()),
        None => {
            let root = a.data_root.as_ref().expect("clap requires --data-root");
            let specs = task_specs(root, &a.tasks, a.paired);
            (Dataset::load(&specs, seed)?, specs)
        }
    };
    let bundle_root = a.bundle_root.clone().unwrap_or_else(|| a.out.join("bundles"));
    let mut config = TrainConfig::profile(a.profile.name(), tasks, &bundle_root)?;
    config.out_dir = Some(a.out.clone());
    config.seed = seed;
    if let Some(v) = a.iters {
        config.iters = v;
    }
    if let Some(v) = a.crop {
        config.crop = v;
    } else if a.synthetic.is_some() {
        config.crop = a.synthetic_size;
    }
    if let Some(v) = a.batch {
        config.batch = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    config.flip = !a.no_flip;
    config.validate()?;

    let pipeline = a.provider.pipeline(Some(&bundle_root))?;
    let bundles = BundleIndex::build(&data, &pipeline, a.provider.prior_seed)?;
    let state = if a.resume { Some(TrainState::load(&a.out.join(CHECKPOINT_FILE))?) } else { None };
    log::info!("training on {} pairs for {} iterations", data.len(), config.iters);
    let state = train(&config, &data, &bundles, state)?;
    println!(
        "step {} loss {:.5} checkpoint {}",
        state.step,
        state.running_loss(20).unwrap_or(f64::NAN),
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn synthetic_clean(n: usize, size: usize, seed: u64) -> Vec<(String, TensorImage)> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    (0..n).map(|i| (format!("scene{i:03}"), synthetic_scene(size, size, &mut rng))).collect()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let network = load_network(&a.checkpoint, None)?;
    let mut suites = Vec::new();
    if let Some(path) = &a.suite {
        let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        for spec in serde_json::from_slice::<Vec<SuiteSpec>>(&bytes)? {
            suites.push(spec.load()?);
        }
    }
    if let Some(root) = &a.ood {
        suites.push(SuiteSpec::ood_noise(root, a.seed).load()?);
    }
    if let Some(n) = a.synthetic {
        let clean = synthetic_clean(n, a.synthetic_size, a.seed);
        let seen: Vec<Degradation> = [15.0, 25.0, 50.0].map(|sigma| Degradation::Noise { sigma }).to_vec();
        suites.push(Suite::synthetic("synthetic-noise", &clean, &seen, a.seed)?);
        suites.push(Suite::synthetic("synthetic-ood-noise", &clean, &ood_noise_settings(), a.seed)?);
    }
    if suites.is_empty() {
        return Err(Error::InvalidArgument("eval needs --suite, --ood or --synthetic".into()));
    }
    let pipeline = a.provider.pipeline(a.bundle_root.as_deref())?;
    let source = BundleSource::Pipeline { pipeline: &pipeline, seed: a.provider.prior_seed };
    let report = run_suites(&network, &suites, &source)?;
    report.write(&a.out)?;
    print!("{}", report.to_table());
    if a.baseline {
        let baseline = run_suites(&DegradedInput, &suites, &source)?;
        baseline.write(&a.out.join("baseline"))?;
        print!("{}", baseline.to_table());
    }
    Ok(())
}

fn restore_cmd(a: RestoreArgs) -> Result<()> {
    let network = load_network(&a.checkpoint, a.profile)?;
    let pipeline = a.provider.pipeline(a.bundle_root.as_deref())?;
    let image = TensorImage::load(&a.input)?;
    let bundle = pipeline.build_bundle(&image, a.provider.prior_seed)?;
    let output = match &a.instruction {
        Some(text) => guided_restore(&network, &image, text, &bundle, &pipeline)?,
        None => network.restore(&image, &bundle)?,
    };
    output.save_png(&a.output)?;
    log::info!("degradation prior: {}", a.instruction.as_deref().unwrap_or(&bundle.texts.degradation_text));
    if let Some(gt) = &a.ground_truth {
        let clean = TensorImage::load(gt)?;
        let (before, after) = (psnr(&image, &clean, 1.0)?, psnr(&output, &clean, 1.0)?);
        log::info!("PSNR {before:.2} dB -> {after:.2} dB (gain {:+.2} dB)", after - before);
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let network = load_network(&a.checkpoint, a.profile)?;
    let pipeline = a.provider.pipeline(a.bundle_root.as_deref())?;
    let mut state = AppState::new(network, pipeline);
    state.seed = a.provider.prior_seed;
    let state = Arc::new(state);
    let app = match a.ui {
        Some(dir) => router_with_ui(state, dir),
        None => router(state),
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: PathBuf::from("<runtime>"), source: e })?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| Error::Io { path: PathBuf::from(&a.bind), source: e })?;
        log::info!("listening on {}", a.bind);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Io { path: PathBuf::from(&a.bind), source: e })
    })
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let network = load_network(&a.checkpoint, None)?;
    let pipeline = a.provider.pipeline(a.bundle_root.as_deref())?;
    let mut classes: Vec<PathBuf> = std::fs::read_dir(&a.input)
        .map_err(|e| Error::Io { path: a.input.clone(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut loaded = Vec::new();
    for dir in &classes {
        let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for path in image_files(dir)? {
            let image = TensorImage::load(&path)?;
            let bundle = pipeline.build_bundle(&image, a.provider.prior_seed)?;
            loaded.push((label.clone(), image, bundle));
        }
    }
    if loaded.is_empty() {
        return Err(Error::DatasetEmpty(format!("no class directories with images under {}", a.input.display())));
    }
    let inputs: Vec<EmbeddingInput<'_>> = loaded
        .iter()
        .map(|(label, image, bundle)| EmbeddingInput { class_label: label.clone(), image, bundle })
        .collect();
    let table = export_embeddings(&network, &inputs)?;
    table.write(&a.out)?;
    println!("{} rows written to {}", table.rows.len(), a.out.display());
    if let Some(s) = &table.silhouette {
        println!("silhouette z_d_pooled {:.4} e_d {:.4}", s.z_d_pooled, s.e_d);
    }
    Ok(())
}
