use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use petseg::classifier::ClassifierReport;
use petseg::guidance::CurriculumPreset;
use petseg::{
    build_network, generate_dataset, interactive_sweep, save_volume, train, train_classifier, CaseData,
    ClassifierSample, ClickList, DatasetFingerprint, DatasetManifest, ExperimentConfig, MipPair, ModelRegistry,
    Pipeline, RunManifest, SamplingDistribution, SegNet, SessionStore, Tracer, TracerClassifier,
};

use crate::api;

#[derive(Debug, Parser)]
#[command(name = "petseg", version, about = "Click-guided PET/CT lesion segmentation")]
pub struct Cli {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Train a segmentation network.
    Train(TrainArgs),
    /// Train the tracer classifier on PET maximum intensity projections.
    TrainClassifier(ClassifierArgs),
    /// Evaluate k = 0..10 clicks on a case set and write the sweep CSV.
    Sweep(SweepArgs),
    /// Segment one case.
    Predict(PredictArgs),
    /// Serve the interactive session API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_cases: Option<usize>,
    /// Fraction of FDG cases.
    #[arg(long)]
    pub tracer_mix: Option<f64>,
    #[arg(long)]
    pub negative_fraction: Option<f64>,
    /// Cubic grid edge in voxels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Isotropic spacing in mm.
    #[arg(long)]
    pub spacing: Option<f64>,
}

/// Where the networks come from.
#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Registry JSON (`models.json`).
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// A single checkpoint, registered under `--model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use this model for every case instead of hybrid dispatch.
    #[arg(long)]
    pub model: Option<String>,
    /// Tracer classifier checkpoint; without it the manifest tracer labels are used.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Fingerprint JSON; defaults to the one next to the registry, then the dataset's.
    #[arg(long)]
    pub fingerprint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// FULL, V1_SPARSE or V4_BALANCED.
    #[arg(long)]
    pub curriculum: Option<String>,
    #[arg(long)]
    pub iterations_per_epoch: Option<usize>,
    /// Start from this checkpoint (fine-tuning).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub no_organ_head: bool,
    /// Id under which the result is added to `<out>/models.json`.
    #[arg(long, default_value = "desk")]
    pub model_id: String,
}

#[derive(Debug, Args)]
pub struct ClassifierArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fraction of cases held out for the accuracy report.
    #[arg(long, default_value_t = 0.5)]
    pub held_out: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset directory with the cases to evaluate.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub case: String,
    /// Click list JSON; without it clicks are simulated from the ground truth.
    #[arg(long)]
    pub clicks: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Session snapshots are written here on every mutation.
    #[arg(long)]
    pub snapshots: Option<PathBuf>,
    #[command(flatten)]
    pub models: ModelArgs,
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn dataset_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.dataset.as_deref().ok_or_else(|| anyhow!("no dataset given (--dataset/--cases or config `dataset`)"))
}

/// Runs one command; the caller maps errors to a non-zero exit code.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::GenData(a) => {
            set(&mut cfg.output_dir, a.out);
            cfg.propagate();
            let p = &mut cfg.phantoms;
            set(&mut p.n_cases, a.n_cases);
            set(&mut p.tracer_mix, a.tracer_mix);
            set(&mut p.negative_fraction, a.negative_fraction);
            if a.size.is_some() || a.spacing.is_some() {
                let shape = a.size.map(|s| [s; 3]).unwrap_or(p.template.grid.shape);
                let spacing = a.spacing.map(|s| [s; 3]).unwrap_or(p.template.grid.spacing);
                p.template.grid = petseg::ImageGrid::with_shape_spacing(shape, spacing)?;
            }
            gen_data(&cfg)
        }
        Command::Train(a) => {
            set(&mut cfg.dataset, a.dataset.map(Some));
            set(&mut cfg.output_dir, a.out);
            cfg.propagate();
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.initial_lr, a.lr);
            if let Some(name) = &a.curriculum {
                cfg.train.curriculum = SamplingDistribution::preset(name.parse::<CurriculumPreset>()?);
            }
            if a.iterations_per_epoch.is_some() {
                cfg.train.iterations_per_epoch = a.iterations_per_epoch;
            }
            if a.no_organ_head {
                cfg.network.organ_head = false;
            }
            train_cmd(&cfg, a.init.as_deref(), &a.model_id)
        }
        Command::TrainClassifier(a) => {
            set(&mut cfg.dataset, a.dataset.map(Some));
            set(&mut cfg.output_dir, a.out);
            cfg.propagate();
            train_classifier_cmd(&cfg, a.held_out)
        }
        Command::Sweep(a) => {
            set(&mut cfg.dataset, a.cases.map(Some));
            set(&mut cfg.output_dir, a.out);
            cfg.propagate();
            set(&mut cfg.sweep.k_max, a.k_max);
            sweep_cmd(&cfg, &a.models)
        }
        Command::Predict(a) => {
            set(&mut cfg.dataset, a.dataset.map(Some));
            set(&mut cfg.output_dir, a.out);
            cfg.propagate();
            predict_cmd(&cfg, &a.models, &a.case, a.clicks.as_deref(), a.k)
        }
        Command::Serve(a) => {
            set(&mut cfg.dataset, a.dataset.map(Some));
            cfg.propagate();
            let store = build_store(&cfg, &a.models, a.snapshots)?;
            serve(store, &a.host, a.port)
        }
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.output_dir;
    let manifest = generate_dataset(&cfg.phantoms, out)?;
    write_json(&out.join("config.json"), cfg)?;
    let run = RunManifest::build("gen-data", cfg, out, &[], &[out.clone()])?;
    run.write(out)?;
    log::info!("wrote {} cases to {}", manifest.cases.len(), out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<CaseData>)> {
    let manifest = DatasetManifest::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let cases = manifest.load_all()?;
    Ok((manifest, cases))
}

fn dataset_fingerprint(manifest: &DatasetManifest, cases: &[CaseData]) -> Result<DatasetFingerprint> {
    if let Some(fp) = manifest.fingerprint {
        return Ok(fp);
    }
    Ok(petseg::fingerprint_cases(cases)?)
}

pub fn train_cmd(cfg: &ExperimentConfig, init: Option<&Path>, model_id: &str) -> Result<()> {
    cfg.validate()?;
    let data_dir = dataset_dir(cfg)?;
    let (manifest, cases) = load_dataset(data_dir)?;
    let fp = dataset_fingerprint(&manifest, &cases)?;
    let mut net = match init {
        Some(p) => SegNet::load_for(p, &cfg.network)?,
        None => build_network(&cfg.network)?,
    };
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let report = train(&mut net, &cases, &fp, &cfg.train, Some(out))?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("fingerprint.json"), &fp)?;
    let registry_path = out.join("models.json");
    let mut registry = if registry_path.exists() {
        ModelRegistry::load(&registry_path)?
    } else {
        ModelRegistry::new()
    };
    registry.models.remove(model_id);
    let ckpt = report.checkpoints.last().cloned().ok_or_else(|| anyhow!("training wrote no checkpoint"))?;
    registry.register_checkpoint(model_id, &ckpt, vec![Tracer::Fdg, Tracer::Psma])?;
    // store the checkpoint relative to the registry file
    if let Some(m) = registry.models.get_mut(model_id) {
        m.checkpoint = ckpt.file_name().map(PathBuf::from);
    }
    registry.save(&registry_path)?;
    let mut inputs = vec![data_dir.join(DatasetManifest::FILE_NAME)];
    inputs.extend(init.map(Path::to_path_buf));
    RunManifest::build("train", cfg, out, &inputs, &[out.join("loss.csv"), ckpt])?.write(out)?;
    Ok(())
}

pub fn train_classifier_cmd(cfg: &ExperimentConfig, held_out: f64) -> Result<()> {
    if !(0.0..1.0).contains(&held_out) {
        bail!("--held-out must be in [0, 1)");
    }
    cfg.classifier.validate()?;
    let data_dir = dataset_dir(cfg)?;
    let (_, cases) = load_dataset(data_dir)?;
    let samples = cases
        .iter()
        .map(|c| {
            let t = c.tracer.ok_or_else(|| anyhow!("case {} has no tracer label", c.id))?;
            Ok(ClassifierSample::new(&MipPair::from_pet(&c.pet), t))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_held = (samples.len() as f64 * held_out).round() as usize;
    let (train_set, held) = samples.split_at(samples.len() - n_held);
    let (clf, report): (TracerClassifier, ClassifierReport) = train_classifier(train_set, held, &cfg.classifier)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let path = out.join("classifier.safetensors");
    clf.save(&path)?;
    write_json(&out.join("classifier_report.json"), &report)?;
    write_json(&out.join("config.json"), cfg)?;
    if let Some(acc) = report.held_out_accuracy {
        log::info!("held-out accuracy {acc:.3}");
    }
    RunManifest::build("train-classifier", cfg, out, &[data_dir.join(DatasetManifest::FILE_NAME)], &[path])?
        .write(out)?;
    Ok(())
}

/// Builds the inference pipeline from the model flags and config.
pub fn build_pipeline(cfg: &ExperimentConfig, m: &ModelArgs, fallback_fp: Option<DatasetFingerprint>) -> Result<Pipeline> {
    let registry_path = m.registry.clone().or_else(|| cfg.registry.clone());
    let mut registry = match &registry_path {
        Some(p) => ModelRegistry::load(p).with_context(|| format!("loading registry {}", p.display()))?,
        None => ModelRegistry::new(),
    };
    if let Some(ckpt) = &m.checkpoint {
        let id = m.model.clone().unwrap_or_else(|| "desk".into());
        registry.models.remove(&id);
        registry.register_checkpoint(&id, ckpt, vec![Tracer::Fdg, Tracer::Psma])?;
    }
    let mut inference = cfg.inference.clone();
    if m.model.is_some() {
        inference.model_override = m.model.clone();
    } else if m.checkpoint.is_some() {
        inference.model_override = Some("desk".into());
    }
    if inference.model_override.is_none() {
        cfg.policy.validate(&registry)?;
    }
    let fp_path = m.fingerprint.clone().or_else(|| {
        registry_path
            .as_ref()
            .and_then(|p| p.parent().map(|d| d.join("fingerprint.json")))
            .filter(|p| p.exists())
    });
    let fingerprint = match fp_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
            .with_context(|| format!("reading fingerprint {}", p.display()))?,
        None => fallback_fp.ok_or_else(|| anyhow!("no fingerprint available"))?,
    };
    let classifier_path = m.classifier.clone().or_else(|| cfg.classifier_checkpoint.clone());
    let classifier = classifier_path.map(TracerClassifier::load).transpose()?;
    Ok(Pipeline {
        registry,
        policy: cfg.policy.clone(),
        classifier,
        fingerprint,
        config: inference,
    })
}

pub fn sweep_cmd(cfg: &ExperimentConfig, m: &ModelArgs) -> Result<()> {
    let data_dir = dataset_dir(cfg)?;
    let (manifest, cases) = load_dataset(data_dir)?;
    let pipeline = build_pipeline(cfg, m, Some(dataset_fingerprint(&manifest, &cases)?))?;
    let report = interactive_sweep(&pipeline, &cases, &cfg.sweep)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let csv = out.join("sweep.csv");
    report.write_csv(&csv)?;
    write_json(&out.join("sweep.json"), &report)?;
    let mut inputs = vec![data_dir.join(DatasetManifest::FILE_NAME)];
    inputs.extend(m.registry.iter().chain(m.checkpoint.iter()).chain(m.classifier.iter()).cloned());
    RunManifest::build("sweep", cfg, out, &inputs, &[csv])?.write(out)?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn predict_cmd(cfg: &ExperimentConfig, m: &ModelArgs, case_id: &str, clicks_path: Option<&Path>, k: usize) -> Result<()> {
    let data_dir = dataset_dir(cfg)?;
    let manifest = DatasetManifest::load(data_dir)?;
    let entry = manifest.case(case_id).ok_or_else(|| anyhow!("case {case_id} not in {}", data_dir.display()))?;
    let case = manifest.load_case(entry)?;
    let fp = dataset_fingerprint(&manifest, std::slice::from_ref(&case))?;
    let pipeline = build_pipeline(cfg, m, Some(fp))?;
    let clicks = clicks_path
        .map(|p| -> Result<ClickList> {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading clicks {}", p.display()))?;
            Ok(ClickList::from_json(&text, *case.grid())?)
        })
        .transpose()?;
    let pred = pipeline.predict_case(&case, clicks.as_ref(), k)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let mask_path = out.join(format!("{case_id}_mask.nii.gz"));
    save_volume(&pred.mask, &mask_path)?;
    write_json(&out.join(format!("{case_id}_provenance.json")), &pred.provenance)?;
    std::fs::write(out.join(format!("{case_id}_clicks.json")), pred.clicks.to_json())?;
    let mut inputs = vec![data_dir.join(DatasetManifest::FILE_NAME)];
    inputs.extend(clicks_path.map(Path::to_path_buf));
    RunManifest::build("predict", cfg, out, &inputs, &[mask_path])?.write(out)?;
    println!("{}", serde_json::to_string(&pred.provenance)?);
    Ok(())
}

pub fn build_store(cfg: &ExperimentConfig, m: &ModelArgs, snapshots: Option<PathBuf>) -> Result<Arc<SessionStore>> {
    let data_dir = dataset_dir(cfg)?;
    let (manifest, cases) = load_dataset(data_dir)?;
    let pipeline = build_pipeline(cfg, m, Some(dataset_fingerprint(&manifest, &cases)?))?;
    let store = SessionStore::new(cases, pipeline, snapshots)?;
    let n = store.restore()?;
    if n > 0 {
        log::info!("restored {n} sessions");
    }
    Ok(Arc::new(store))
}

pub fn serve(store: Arc<SessionStore>, host: &str, port: u16) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, api::router(store))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
