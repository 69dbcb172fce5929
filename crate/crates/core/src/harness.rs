//! Experiment configuration, run manifests and the end-to-end desk experiment.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::guidance::{CurriculumPreset, GuidanceConfig, SamplingDistribution};
use crate::inference::{HybridPolicy, InferenceConfig, MirrorAxis, ModelRegistry, Pipeline, TtaMode};
use crate::io::CaseData;
use crate::metrics::{interactive_sweep, spearman_rho, SweepConfig, SweepReport};
use crate::model::{build_network, NetworkConfig};
use crate::phantom::{generate_cases, DatasetConfig, PhantomSpec};
use crate::train::{train, TrainConfig, TrainReport};
use crate::util::sha256_hex;
use crate::volume::{compute_fingerprint, DatasetFingerprint, ImageGrid, ScalarVolume, Tracer};

/// Settings shared by the CLI subcommands; every field can be overridden by a flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Directory holding `manifest.json`.
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub inference: InferenceConfig,
    pub classifier: ClassifierConfig,
    pub sweep: SweepConfig,
    pub phantoms: DatasetConfig,
    pub policy: HybridPolicy,
    /// `models.json` of a model registry.
    pub registry: Option<PathBuf>,
    /// Tracer classifier checkpoint.
    pub classifier_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            output_dir: PathBuf::from("runs"),
            seed: 0,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            inference: InferenceConfig::default(),
            classifier: ClassifierConfig::default(),
            sweep: SweepConfig::default(),
            phantoms: DatasetConfig::default(),
            policy: HybridPolicy::default(),
            registry: None,
            classifier_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Pushes the top-level seed and guidance into the sub-configs that carry their own copies.
    pub fn propagate(&mut self) {
        self.network.seed = self.seed;
        self.train.seed = self.seed;
        self.train.guidance = self.guidance;
        self.inference.guidance = self.guidance;
        self.inference.click_seed = self.seed;
        self.sweep.seed = self.seed;
        self.sweep.guidance = self.guidance;
        self.phantoms.seed = self.seed;
        self.classifier.seed = self.seed;
    }

    /// Checks sub-configs and that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        self.classifier.validate()?;
        for p in [&self.dataset, &self.registry, &self.classifier_checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

/// Input or output file recorded in a run manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written next to every CLI run's outputs so that a rerun can be checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Hash over the sorted `(path, sha256)` pairs of all inputs.
    pub inputs_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub version: String,
}

impl RunManifest {
    pub const FILE_NAME: &'static str = "run_manifest.json";

    /// Digests `inputs` and `outputs`; directories are walked recursively.
    /// Paths are recorded relative to `base` where possible.
    pub fn build(
        command: &str,
        config: &ExperimentConfig,
        base: &Path,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Self> {
        let inputs = digest_all(base, inputs)?;
        let outputs = digest_all(base, outputs)?;
        let mut joined = String::new();
        for d in &inputs {
            joined.push_str(&format!("{}\t{}\n", d.path.display(), d.sha256));
        }
        Ok(RunManifest {
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            inputs_hash: sha256_hex(joined.as_bytes()),
            inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(Self::FILE_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(path, e)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == RunManifest::FILE_NAME) {
                continue;
            }
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn digest_all(base: &Path, paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    files.sort();
    files.dedup();
    files
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let rel = f.strip_prefix(base).map(Path::to_path_buf).unwrap_or(f);
            Ok(FileDigest {
                path: rel,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// CT fingerprint of a case set with the default 0.5/99.5 percentiles.
pub fn fingerprint_cases(cases: &[CaseData]) -> Result<DatasetFingerprint> {
    let cts: Vec<&ScalarVolume> = cases.iter().map(|c| &c.ct).collect();
    compute_fingerprint(&cts, 0.5, 99.5)
}

/// The small train-and-sweep experiment that checks the click-count trend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskExperimentConfig {
    pub dataset: DatasetConfig,
    pub n_train: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub sweep: SweepConfig,
}

impl Default for DeskExperimentConfig {
    fn default() -> Self {
        let seed = 2024;
        let grid = ImageGrid::with_shape_spacing([32; 3], [4.0; 3]).expect("valid grid");
        let dataset = DatasetConfig {
            n_cases: 50,
            tracer_mix: 0.5,
            template: PhantomSpec {
                grid,
                lesion_radius_mm: (4.0, 8.0),
                lesion_suv: (1.6, 4.0),
                noise_sigma: 0.25,
                ..PhantomSpec::default()
            },
            lesion_count: (5, 10),
            negative_fraction: 0.14,
            seed,
            ..DatasetConfig::default()
        };
        let network = NetworkConfig {
            n_stages: 3,
            features_per_stage: vec![8, 16, 32],
            blocks_per_stage: vec![1, 1, 1],
            patch_size: [32; 3],
            seed,
            ..NetworkConfig::default()
        };
        let mut train = TrainConfig::new(
            150,
            0.01,
            SamplingDistribution::preset(CurriculumPreset::V4Balanced),
            seed,
        );
        train.iterations_per_epoch = Some(4);
        let inference = InferenceConfig {
            tta: TtaMode::Fixed {
                axes: vec![MirrorAxis::X],
            },
            ..InferenceConfig::default()
        };
        let sweep = SweepConfig {
            seed,
            ..SweepConfig::default()
        };
        DeskExperimentConfig {
            dataset,
            n_train: 40,
            network,
            train,
            inference,
            sweep,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskExperimentReport {
    pub n_train: usize,
    pub n_val: usize,
    pub train_tracers: [usize; 2],
    pub val_tracers: [usize; 2],
    pub negative_controls: usize,
    pub train_seconds: f64,
    pub sweep_seconds: f64,
    pub train_report: TrainReport,
    pub sweep: SweepReport,
    pub dice_rho: Option<f64>,
    pub fnv_rho: Option<f64>,
}

fn tracer_counts(cases: &[CaseData]) -> [usize; 2] {
    let fdg = cases.iter().filter(|c| c.tracer == Some(Tracer::Fdg)).count();
    [fdg, cases.len() - fdg]
}

/// Generates phantoms, trains one network on the first `n_train` cases and sweeps `k = 0..=10`
/// on the rest. With `out_dir` set, the loss log, checkpoint and sweep CSV are written there.
pub fn run_desk_experiment(cfg: &DeskExperimentConfig, out_dir: Option<&Path>) -> Result<DeskExperimentReport> {
    if cfg.n_train == 0 || cfg.n_train >= cfg.dataset.n_cases {
        return Err(Error::InvalidConfig(format!(
            "n_train {} must leave a non-empty validation split of {} cases",
            cfg.n_train, cfg.dataset.n_cases
        )));
    }
    let cases = generate_cases(&cfg.dataset)?;
    let negative_controls = cases
        .iter()
        .filter(|c| c.lesion_gt.as_ref().is_some_and(|g| g.count_foreground() == 0))
        .count();
    let (train_set, val_set) = cases.split_at(cfg.n_train);
    let cts: Vec<&ScalarVolume> = train_set.iter().map(|c| &c.ct).collect();
    let fingerprint = compute_fingerprint(&cts, cfg.dataset.fingerprint_low_pct, cfg.dataset.fingerprint_high_pct)?;

    let mut net = build_network(&cfg.network)?;
    let start = Instant::now();
    let train_report = train(&mut net, train_set, &fingerprint, &cfg.train, out_dir)?;
    let train_seconds = start.elapsed().as_secs_f64();

    let mut registry = ModelRegistry::new();
    registry.register_net("desk", net, vec![Tracer::Fdg, Tracer::Psma])?;
    let pipeline = Pipeline {
        registry,
        policy: HybridPolicy::default(),
        classifier: None,
        fingerprint,
        config: InferenceConfig {
            model_override: Some("desk".into()),
            ..cfg.inference.clone()
        },
    };
    let start = Instant::now();
    let sweep = interactive_sweep(&pipeline, val_set, &cfg.sweep)?;
    let sweep_seconds = start.elapsed().as_secs_f64();
    let k: Vec<f64> = sweep.rows.iter().map(|r| r.k as f64).collect();
    let dice_rho = spearman_rho(&k, &sweep.column(|m| m.dice));
    let fnv_rho = spearman_rho(&k, &sweep.column(|m| m.fnv_ml));
    if let Some(dir) = out_dir {
        sweep.write_csv(dir.join("sweep.csv"))?;
    }
    Ok(DeskExperimentReport {
        n_train: train_set.len(),
        n_val: val_set.len(),
        train_tracers: tracer_counts(train_set),
        val_tracers: tracer_counts(val_set),
        negative_controls,
        train_seconds,
        sweep_seconds,
        train_report,
        sweep,
        dice_rho,
        fnv_rho,
    })
}
