//! Prediction path: input assembly, sliding-window inference, mirroring TTA,
//! hybrid model dispatch and SUV-threshold post-processing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::TracerClassifier;
use crate::error::{Error, Result, StageExt};
use crate::guidance::{render_guidance_pair, simulate_clicks, take_first_k, ClickList, GuidanceConfig, MAX_CLICKS_PER_KIND};
use crate::io::CaseData;
use crate::metrics::{connected_components, CasePredictor, Connectivity};
use crate::model::{softmax_channels, NetworkConfig, SegNet};
use crate::nn::Tensor;
use crate::util::derive_seed;
use crate::volume::{
    normalize_ct, zscore_array, DatasetFingerprint, ImageGrid, LabelVolume, Modality, MultiChannelVolume, ScalarVolume,
    Tracer,
};

/// CT and PET of one case after normalization; guidance is added per click set.
#[derive(Clone, Debug)]
pub struct NormalizedCase {
    pub grid: ImageGrid,
    pub ct: Array3<f32>,
    pub pet: Array3<f32>,
}

pub fn normalize_case(case: &CaseData, fp: &DatasetFingerprint) -> Result<NormalizedCase> {
    case.ct.grid().ensure_same(case.pet.grid(), "PET vs CT")?;
    Ok(NormalizedCase {
        grid: *case.grid(),
        ct: normalize_ct(&case.ct, fp)?.into_values(),
        pet: zscore_array(case.pet.values()),
    })
}

/// Renders the clicks, z-scores the two guidance maps and stacks all four channels.
pub fn assemble_input(case: &NormalizedCase, clicks: &ClickList, cfg: &GuidanceConfig) -> Result<MultiChannelVolume> {
    case.grid.ensure_same(clicks.grid(), "clicks vs image")?;
    let (fg, bg) = render_guidance_pair(clicks, cfg)?;
    Ok(MultiChannelVolume::from_arrays(
        case.grid,
        [case.ct.clone(), case.pet.clone(), zscore_array(&fg), zscore_array(&bg)],
    ))
}

pub fn volume_to_tensor(v: &MultiChannelVolume) -> Tensor {
    let [d, h, w] = v.grid().shape;
    let mut t = Tensor::zeros([1, 4, d, h, w]);
    for (c, ch) in v.channels().iter().enumerate() {
        for (dst, &src) in t.plane_mut(0, c).iter_mut().zip(ch.iter()) {
            *dst = src;
        }
    }
    t
}

pub(crate) fn flip_axis<T: Clone>(a: &Array3<T>, axis: usize) -> Array3<T> {
    let mut v = a.view();
    v.invert_axis(Axis(axis));
    v.as_standard_layout().into_owned()
}

/// Tile origins along one axis: evenly spread so that neighbours overlap by at
/// least `overlap · patch`, first at 0 and last flush with the end.
pub fn tile_starts(len: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let step = (patch as f64 * (1.0 - overlap)).max(1.0);
    let span = (len - patch) as f64;
    let n = (span / step).ceil() as usize + 1;
    (0..n).map(|i| (i as f64 * span / (n - 1) as f64).round() as usize).collect()
}

/// Centre-weighted patch importance: Gaussian with σ = patch/8, peak 1, no zeros.
pub fn gaussian_importance(patch: [usize; 3]) -> Array3<f32> {
    let sig = patch.map(|p| p as f64 / 8.0);
    let mut g = Array3::from_shape_fn(patch, |(z, y, x)| {
        let mut e = 0.0;
        for (a, i) in [z, y, x].into_iter().enumerate() {
            let d = i as f64 - (patch[a] as f64 - 1.0) / 2.0;
            e += d * d / (2.0 * sig[a] * sig[a]);
        }
        (-e).exp() as f32
    });
    let max = g.iter().copied().fold(0.0f32, f32::max);
    g.mapv_inplace(|v| v / max);
    let floor = g.iter().copied().filter(|&v| v > 0.0).fold(f32::INFINITY, f32::min);
    g.mapv_inplace(|v| if v > 0.0 { v } else { floor });
    g
}

fn check_patch(net: &SegNet, patch: [usize; 3], overlap: f64) -> Result<()> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap must be in [0, 1), got {overlap}")));
    }
    let div = net.config().size_divisor();
    if patch.iter().any(|&p| p == 0 || p % div != 0) {
        return Err(Error::InvalidArgument(format!("patch {patch:?} must be positive multiples of {div}")));
    }
    Ok(())
}

/// Foreground probability per voxel from Gaussian-weighted overlapping tiles.
pub fn sliding_window_predict(
    net: &SegNet,
    input: &MultiChannelVolume,
    patch: [usize; 3],
    overlap: f64,
) -> Result<Array3<f32>> {
    check_patch(net, patch, overlap)?;
    Ok(window_pass(net, input.channels(), patch, overlap, None))
}

/// Runs the tiles; with `first_tile` set, stores the wall time of the first tile there.
fn window_pass(
    net: &SegNet,
    channels: &[Array3<f32>; 4],
    patch: [usize; 3],
    overlap: f64,
    mut first_tile: Option<&mut (f64, usize)>,
) -> Array3<f32> {
    let sh = channels[0].shape();
    let shape = [sh[0], sh[1], sh[2]];
    let padded = [0, 1, 2].map(|a| shape[a].max(patch[a]));
    let needs_pad = padded != shape;
    // pad with each channel's minimum, i.e. air / no uptake / no click
    let owned;
    let chans: &[Array3<f32>; 4] = if needs_pad {
        owned = channels.clone().map(|c| {
            let fill = c.iter().copied().fold(f32::INFINITY, f32::min);
            let mut p = Array3::from_elem(padded, fill);
            p.slice_mut(s![..shape[0], ..shape[1], ..shape[2]]).assign(&c);
            p
        });
        &owned
    } else {
        channels
    };
    let starts = [0, 1, 2].map(|a| tile_starts(padded[a], patch[a], overlap));
    let n_tiles = starts.iter().map(Vec::len).product::<usize>();
    let run_tile = |origin: [usize; 3]| -> Array3<f32> {
        let sl = s![
            origin[0]..origin[0] + patch[0],
            origin[1]..origin[1] + patch[1],
            origin[2]..origin[2] + patch[2]
        ];
        let mut t = Tensor::zeros([1, 4, patch[0], patch[1], patch[2]]);
        for (c, ch) in chans.iter().enumerate() {
            for (dst, &src) in t.plane_mut(0, c).iter_mut().zip(ch.slice(sl).iter()) {
                *dst = src;
            }
        }
        let probs = softmax_channels(&net.forward_lesion(&t));
        Array3::from_shape_vec(patch, probs.plane(0, 1).to_vec()).expect("patch-shaped plane")
    };

    let mut out = if n_tiles == 1 {
        let t0 = Instant::now();
        let p = run_tile([0; 3]);
        if let Some(ft) = first_tile.as_deref_mut() {
            *ft = (t0.elapsed().as_secs_f64(), 1);
        }
        p
    } else {
        let imp = gaussian_importance(patch);
        let mut acc = Array3::<f32>::zeros(padded);
        let mut wsum = Array3::<f32>::zeros(padded);
        let mut first = true;
        for &z in &starts[0] {
            for &y in &starts[1] {
                for &x in &starts[2] {
                    let t0 = Instant::now();
                    let p = run_tile([z, y, x]);
                    if first {
                        if let Some(ft) = first_tile.as_deref_mut() {
                            *ft = (t0.elapsed().as_secs_f64(), n_tiles);
                        }
                        first = false;
                    }
                    let sl = s![z..z + patch[0], y..y + patch[1], x..x + patch[2]];
                    acc.slice_mut(sl).zip_mut_with(&(&p * &imp), |a, &b| *a += b);
                    wsum.slice_mut(sl).zip_mut_with(&imp, |a, &b| *a += b);
                }
            }
        }
        acc.zip_mut_with(&wsum, |a, &w| *a /= w);
        acc
    };
    if needs_pad {
        out = out.slice(s![..shape[0], ..shape[1], ..shape[2]]).to_owned();
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// A mirroring axis, named in world order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MirrorAxis {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "z")]
    Z,
}

impl MirrorAxis {
    /// Axes in the order they are granted by the planner.
    pub const PLAN_ORDER: [MirrorAxis; 3] = [MirrorAxis::X, MirrorAxis::Y, MirrorAxis::Z];

    /// Array axis in `(z, y, x)` storage.
    pub fn array_axis(self) -> usize {
        match self {
            MirrorAxis::Z => 0,
            MirrorAxis::Y => 1,
            MirrorAxis::X => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaPlan {
    pub mirror_axes: Vec<MirrorAxis>,
    pub n_passes: usize,
    pub est_total_seconds: f64,
    /// Even the unmirrored pass exceeds the budget.
    pub over_budget: bool,
}

impl TtaPlan {
    pub fn fixed(mirror_axes: Vec<MirrorAxis>) -> Self {
        TtaPlan {
            n_passes: 1 << mirror_axes.len(),
            mirror_axes,
            est_total_seconds: 0.0,
            over_budget: false,
        }
    }
}

pub const DEFAULT_TTA_BUDGET_SECONDS: f64 = 40.0;

/// Grants the most mirror axes `m` with `base_seconds · 2^m ≤ budget_seconds`.
pub fn plan_tta(base_seconds: f64, budget_seconds: f64) -> Result<TtaPlan> {
    if !(base_seconds > 0.0) || !base_seconds.is_finite() {
        return Err(Error::InvalidArgument(format!("base_seconds must be > 0, got {base_seconds}")));
    }
    if !(budget_seconds > 0.0) {
        return Err(Error::InvalidArgument(format!("budget_seconds must be > 0, got {budget_seconds}")));
    }
    let m = (0..=3).rev().find(|&m| base_seconds * (1u32 << m) as f64 <= budget_seconds).unwrap_or(0);
    Ok(TtaPlan {
        mirror_axes: MirrorAxis::PLAN_ORDER[..m].to_vec(),
        n_passes: 1 << m,
        est_total_seconds: base_seconds * (1u32 << m) as f64,
        over_budget: base_seconds > budget_seconds,
    })
}

fn flip_channels(ch: &[Array3<f32>; 4], axes: &[usize]) -> [Array3<f32>; 4] {
    ch.clone().map(|mut c| {
        for &a in axes {
            c = flip_axis(&c, a);
        }
        c
    })
}

fn mirrored_passes(
    net: &SegNet,
    channels: &[Array3<f32>; 4],
    axes: &[MirrorAxis],
    patch: [usize; 3],
    overlap: f64,
    mut acc: Array3<f32>,
    skip_identity: bool,
) -> Array3<f32> {
    let n = 1usize << axes.len();
    if n == 1 && !skip_identity {
        return window_pass(net, channels, patch, overlap, None);
    }
    for combo in (skip_identity as usize)..n {
        let flip: Vec<usize> = (0..axes.len()).filter(|b| combo >> b & 1 == 1).map(|b| axes[b].array_axis()).collect();
        let mut p = window_pass(net, &flip_channels(channels, &flip), patch, overlap, None);
        for &a in flip.iter().rev() {
            p = flip_axis(&p, a);
        }
        acc += &p;
    }
    if n > 1 {
        acc.mapv_inplace(|v| v / n as f32);
    }
    acc
}

/// Mean foreground probability over every flip combination of the plan's axes.
pub fn tta_predict(
    net: &SegNet,
    input: &MultiChannelVolume,
    plan: &TtaPlan,
    patch: [usize; 3],
    overlap: f64,
) -> Result<Array3<f32>> {
    check_patch(net, patch, overlap)?;
    let zeros = Array3::zeros(input.grid().shape);
    Ok(mirrored_passes(net, input.channels(), &plan.mirror_axes, patch, overlap, zeros, false))
}

/// Runs the unmirrored pass, estimates the base time from its first tile,
/// plans mirroring within `budget_seconds` and runs the remaining passes.
pub fn budgeted_tta_predict(
    net: &SegNet,
    input: &MultiChannelVolume,
    budget_seconds: f64,
    patch: [usize; 3],
    overlap: f64,
) -> Result<(Array3<f32>, TtaPlan)> {
    check_patch(net, patch, overlap)?;
    let mut timing = (0.0, 1);
    let base = window_pass(net, input.channels(), patch, overlap, Some(&mut timing));
    let base_seconds = (timing.0 * timing.1 as f64).max(1e-9);
    let plan = plan_tta(base_seconds, budget_seconds)?;
    if plan.mirror_axes.is_empty() {
        return Ok((base, plan));
    }
    let probs = mirrored_passes(net, input.channels(), &plan.mirror_axes, patch, overlap, base, true);
    Ok((probs, plan))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TtaMode {
    /// Plan mirroring from a timed pass.
    Budget { budget_seconds: f64 },
    /// Always mirror over these axes.
    Fixed { axes: Vec<MirrorAxis> },
}

impl Default for TtaMode {
    fn default() -> Self {
        TtaMode::Budget {
            budget_seconds: DEFAULT_TTA_BUDGET_SECONDS,
        }
    }
}

/// Click-count based model choice per tracer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridPolicy {
    pub fdg_early: String,
    pub fdg_dense: String,
    /// Last click count served by `fdg_early`.
    pub fdg_early_max_k: usize,
    pub psma: String,
}

impl Default for HybridPolicy {
    fn default() -> Self {
        HybridPolicy {
            fdg_early: "V4".into(),
            fdg_dense: "V3".into(),
            fdg_early_max_k: 4,
            psma: "V2".into(),
        }
    }
}

impl HybridPolicy {
    pub fn model_for(&self, tracer: Tracer, k: usize) -> Result<&str> {
        if k > MAX_CLICKS_PER_KIND {
            return Err(Error::InvalidArgument(format!("k must be in 0..=10, got {k}")));
        }
        Ok(match tracer {
            Tracer::Fdg if k <= self.fdg_early_max_k => &self.fdg_early,
            Tracer::Fdg => &self.fdg_dense,
            Tracer::Psma => &self.psma,
        })
    }

    pub fn model_ids(&self) -> [&str; 3] {
        [&self.fdg_early, &self.fdg_dense, &self.psma]
    }

    pub fn validate(&self, registry: &ModelRegistry) -> Result<()> {
        for id in self.model_ids() {
            if !registry.contains(id) {
                return Err(Error::UnknownName(format!("policy references unregistered model {id}")));
            }
        }
        Ok(())
    }
}

pub fn select_model(tracer: Tracer, k: usize, policy: &HybridPolicy, registry: &ModelRegistry) -> Result<String> {
    let id = policy.model_for(tracer, k)?;
    if !registry.contains(id) {
        return Err(Error::UnknownName(format!("model {id} is not registered")));
    }
    Ok(id.to_string())
}

#[derive(Clone, Default, Serialize, Deserialize)]
pub struct RegisteredModel {
    pub checkpoint: Option<PathBuf>,
    pub config: NetworkConfig,
    pub tracers: Vec<Tracer>,
    #[serde(skip)]
    net: OnceLock<Arc<SegNet>>,
}

impl std::fmt::Debug for RegisteredModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegisteredModel")
            .field("checkpoint", &self.checkpoint)
            .field("tracers", &self.tracers)
            .field("loaded", &self.net.get().is_some())
            .finish()
    }
}

/// Model id → checkpoint, network config and tracer scope. Networks load lazily.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub models: BTreeMap<String, RegisteredModel>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.models.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    fn insert(&mut self, id: &str, model: RegisteredModel) -> Result<()> {
        if self.models.contains_key(id) {
            return Err(Error::InvalidArgument(format!("model id {id} already registered")));
        }
        self.models.insert(id.to_string(), model);
        Ok(())
    }

    pub fn register_net(&mut self, id: &str, net: SegNet, tracers: Vec<Tracer>) -> Result<()> {
        let config = net.config().clone();
        let cell = OnceLock::new();
        let _ = cell.set(Arc::new(net));
        self.insert(id, RegisteredModel { checkpoint: None, config, tracers, net: cell })
    }

    /// Registers a checkpoint, reading its config now and its weights on first use.
    pub fn register_checkpoint(&mut self, id: &str, path: impl AsRef<Path>, tracers: Vec<Tracer>) -> Result<()> {
        let path = path.as_ref();
        let net = SegNet::load(path)?;
        let config = net.config().clone();
        let cell = OnceLock::new();
        let _ = cell.set(Arc::new(net));
        self.insert(id, RegisteredModel { checkpoint: Some(path.to_path_buf()), config, tracers, net: cell })
    }

    pub fn get(&self, id: &str) -> Result<Arc<SegNet>> {
        let m = self
            .models
            .get(id)
            .ok_or_else(|| Error::UnknownName(format!("model {id} is not registered")))?;
        if let Some(net) = m.net.get() {
            return Ok(net.clone());
        }
        let path = m
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("model {id} has neither weights nor a checkpoint")))?;
        let net = Arc::new(SegNet::load_for(path, &m.config)?);
        Ok(m.net.get_or_init(|| net).clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reg: ModelRegistry = serde_json::from_str(&text)?;
        // checkpoint paths are relative to the registry file
        let base = path.parent().unwrap_or(Path::new(""));
        for m in reg.models.values_mut() {
            if let Some(c) = m.checkpoint.as_mut().filter(|c| c.is_relative()) {
                *c = base.join(&*c);
            }
        }
        Ok(reg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostprocessMode {
    /// Drop whole components whose maximum SUV is below the threshold.
    #[default]
    ComponentMax,
    /// Drop individual voxels below the threshold.
    PerVoxel,
}

pub const FDG_SUV_THRESHOLD: f32 = 1.5;
pub const PSMA_SUV_THRESHOLD: f32 = 1.0;

pub fn suv_threshold(tracer: Tracer) -> f32 {
    match tracer {
        Tracer::Fdg => FDG_SUV_THRESHOLD,
        Tracer::Psma => PSMA_SUV_THRESHOLD,
    }
}

/// Removes predicted lesion regions whose raw SUV is below `threshold`.
pub fn suv_threshold_postprocess(
    mask: &LabelVolume,
    pet_suv: &ScalarVolume,
    threshold: f32,
    mode: PostprocessMode,
    connectivity: Connectivity,
) -> Result<LabelVolume> {
    mask.grid().ensure_same(pet_suv.grid(), "mask vs PET")?;
    let fg = mask.mask();
    let suv = pet_suv.values();
    let keep = match mode {
        PostprocessMode::PerVoxel => Array3::from_shape_fn(fg.raw_dim(), |p| fg[p] && suv[p] >= threshold),
        PostprocessMode::ComponentMax => {
            let comps = connected_components(fg.view(), connectivity);
            let mut peak = vec![f32::NEG_INFINITY; comps.count()];
            for (p, &l) in comps.labels.indexed_iter() {
                if l > 0 {
                    let m = &mut peak[l as usize - 1];
                    *m = m.max(suv[p]);
                }
            }
            comps.labels.mapv(|l| l > 0 && peak[l as usize - 1] >= threshold)
        }
    };
    LabelVolume::from_mask(*mask.grid(), &keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Defaults to the network's training patch.
    pub patch: Option<[usize; 3]>,
    pub overlap: f64,
    pub tta: TtaMode,
    pub prob_threshold: f32,
    pub postprocess: PostprocessMode,
    pub connectivity: Connectivity,
    pub fdg_suv_threshold: f32,
    pub psma_suv_threshold: f32,
    pub guidance: GuidanceConfig,
    /// Bypass the hybrid policy and always use this model.
    pub model_override: Option<String>,
    /// Master seed for clicks simulated when none are supplied.
    pub click_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            patch: None,
            overlap: 0.5,
            tta: TtaMode::default(),
            prob_threshold: 0.5,
            postprocess: PostprocessMode::ComponentMax,
            connectivity: Connectivity::TwentySix,
            fdg_suv_threshold: FDG_SUV_THRESHOLD,
            psma_suv_threshold: PSMA_SUV_THRESHOLD,
            guidance: GuidanceConfig::default(),
            model_override: None,
            click_seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn threshold_for(&self, tracer: Tracer) -> f32 {
        match tracer {
            Tracer::Fdg => self.fdg_suv_threshold,
            Tracer::Psma => self.psma_suv_threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracerSource {
    Classifier,
    CaseLabel,
}

/// What the pipeline decided for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub tracer: Tracer,
    /// Classifier probability of FDG, when the classifier was used.
    pub confidence: Option<f64>,
    pub tracer_source: TracerSource,
    pub model_id: String,
    pub k_clicks: usize,
    pub mirror_axes: Vec<MirrorAxis>,
    pub tta_plan: TtaPlan,
    pub prob_threshold: f32,
    pub suv_threshold: f32,
    pub postprocess: PostprocessMode,
}

#[derive(Clone, Debug)]
pub struct CasePrediction {
    pub mask: LabelVolume,
    pub probabilities: Array3<f32>,
    pub clicks: ClickList,
    pub provenance: Provenance,
}

/// Everything `predict_case` needs: models, dispatch policy, optional tracer
/// classifier, the training fingerprint and settings.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub registry: ModelRegistry,
    pub policy: HybridPolicy,
    pub classifier: Option<TracerClassifier>,
    pub fingerprint: DatasetFingerprint,
    pub config: InferenceConfig,
}

impl Pipeline {
    /// Classify the tracer, take the first `k` clicks (simulated from the
    /// ground truth when `clicks` is `None`), dispatch a model, run TTA,
    /// threshold at `prob_threshold` and apply the SUV filter.
    pub fn predict_case(&self, case: &CaseData, clicks: Option<&ClickList>, k: usize) -> Result<CasePrediction> {
        let cfg = &self.config;
        if k > MAX_CLICKS_PER_KIND {
            return Err(Error::InvalidArgument(format!("k must be in 0..=10, got {k}")));
        }
        let (tracer, confidence, tracer_source) = match (&self.classifier, case.tracer) {
            (Some(clf), _) => {
                let p = clf.classify(&case.pet).stage("classify")?;
                (p.label, Some(p.confidence), TracerSource::Classifier)
            }
            (None, Some(t)) => (t, None, TracerSource::CaseLabel),
            (None, None) => {
                return Err(Error::InvalidArgument("no tracer label and no classifier".into()).at_stage("classify"))
            }
        };
        let clicks = match clicks {
            Some(c) => take_first_k(c, k),
            None => {
                let gt = case.lesion_gt.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("clicks must be supplied for cases without ground truth".into())
                });
                gt.and_then(|gt| {
                    let seed = derive_seed(cfg.click_seed, &case.id);
                    let sim = simulate_clicks(gt, None, MAX_CLICKS_PER_KIND, MAX_CLICKS_PER_KIND, &cfg.guidance, seed)?;
                    take_first_k(&sim.clicks, k)
                })
            }
        }
        .stage("clicks")?;
        let model_id = match &cfg.model_override {
            Some(id) if self.registry.contains(id) => id.clone(),
            Some(id) => return Err(Error::UnknownName(format!("model {id} is not registered")).at_stage("dispatch")),
            None => select_model(tracer, k, &self.policy, &self.registry).stage("dispatch")?,
        };
        let net = self.registry.get(&model_id).stage("dispatch")?;
        let input = normalize_case(case, &self.fingerprint)
            .and_then(|n| assemble_input(&n, &clicks, &cfg.guidance))
            .stage("normalize")?;
        let patch = cfg.patch.unwrap_or(net.config().patch_size);
        let (probs, plan) = match &cfg.tta {
            TtaMode::Budget { budget_seconds } => budgeted_tta_predict(&net, &input, *budget_seconds, patch, cfg.overlap),
            TtaMode::Fixed { axes } => {
                let plan = TtaPlan::fixed(axes.clone());
                tta_predict(&net, &input, &plan, patch, cfg.overlap).map(|p| (p, plan))
            }
        }
        .stage("predict")?;
        let threshold = cfg.threshold_for(tracer);
        let raw = probs.mapv(|p| p >= cfg.prob_threshold);
        let mask = LabelVolume::from_mask(*case.grid(), &raw)
            .and_then(|m| suv_threshold_postprocess(&m, &case.pet, threshold, cfg.postprocess, cfg.connectivity))
            .stage("postprocess")?;
        let provenance = Provenance {
            case_id: case.id.clone(),
            tracer,
            confidence,
            tracer_source,
            model_id,
            k_clicks: k,
            mirror_axes: plan.mirror_axes.clone(),
            tta_plan: plan,
            prob_threshold: cfg.prob_threshold,
            suv_threshold: threshold,
            postprocess: cfg.postprocess,
        };
        Ok(CasePrediction {
            mask,
            probabilities: probs,
            clicks,
            provenance,
        })
    }
}

impl CasePredictor for Pipeline {
    fn model_id(&self) -> String {
        self.config.model_override.clone().unwrap_or_else(|| "hybrid".into())
    }

    fn predict_mask(&self, case: &CaseData, clicks: &ClickList, k: usize) -> Result<Array3<bool>> {
        Ok(self.predict_case(case, Some(clicks), k)?.mask.mask())
    }
}

/// Probabilities as a guidance-range volume, e.g. for writing to disk.
pub fn probability_volume(grid: ImageGrid, probs: Array3<f32>) -> Result<ScalarVolume> {
    ScalarVolume::new(grid, probs, Modality::Guidance)
}
