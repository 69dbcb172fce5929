//! Training loop with curriculum-sampled click guidance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    simulate_clicks, take_first_k, ClickList, CurriculumPreset, GuidanceConfig, SamplingDistribution,
    MAX_CLICKS_PER_KIND,
};
use crate::inference::{assemble_input, flip_axis, normalize_case, NormalizedCase};
use crate::io::CaseData;
use crate::model::{dice_ce_loss, LossTerms, LossWeights, SegNet};
use crate::nn::{clip_grad_norm, zero_grads, Sgd, Tensor};
use crate::util::derive_seed;
use crate::volume::{DatasetFingerprint, ImageGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Random mirroring along each spatial axis.
    pub flips: bool,
    /// Random multiples of 90° in the axial (y, x) plane; only for square planes.
    pub rot90: bool,
    /// Probability and maximum standard deviation of additive noise on CT and PET.
    pub noise_prob: f64,
    pub noise_max_std: f32,
    /// Probability and range of gamma correction on CT and PET.
    pub gamma_prob: f64,
    pub gamma_range: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flips: true,
            rot90: true,
            noise_prob: 0.15,
            noise_max_std: 0.1,
            gamma_prob: 0.3,
            gamma_range: (0.7, 1.5),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flips: false,
            rot90: false,
            noise_prob: 0.0,
            noise_max_std: 0.0,
            gamma_prob: 0.0,
            gamma_range: (1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub curriculum: SamplingDistribution,
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Defaults to one pass over the cases per epoch.
    #[serde(default)]
    pub iterations_per_epoch: Option<usize>,
    /// Probability that a patch is centred on a lesion voxel.
    #[serde(default = "default_fg_oversample")]
    pub fg_oversample: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_poly")]
    pub poly_exponent: f64,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    /// Write a checkpoint every this many epochs (the final epoch is always written).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_batch() -> usize {
    2
}
fn default_fg_oversample() -> f64 {
    0.5
}
fn default_momentum() -> f64 {
    0.99
}
fn default_true() -> bool {
    true
}
fn default_weight_decay() -> f64 {
    3e-5
}
fn default_clip() -> Option<f64> {
    Some(12.0)
}
fn default_poly() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(250, 0.01, SamplingDistribution::preset(CurriculumPreset::V4Balanced), 0)
    }
}

impl TrainConfig {
    pub fn new(epochs: usize, initial_lr: f64, curriculum: SamplingDistribution, seed: u64) -> Self {
        TrainConfig {
            epochs,
            initial_lr,
            curriculum,
            seed,
            augment: AugmentConfig::default(),
            batch_size: default_batch(),
            iterations_per_epoch: None,
            fg_oversample: default_fg_oversample(),
            momentum: default_momentum(),
            nesterov: true,
            weight_decay: default_weight_decay(),
            grad_clip: default_clip(),
            poly_exponent: default_poly(),
            loss: LossWeights::default(),
            guidance: GuidanceConfig::default(),
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::InvalidConfig(format!("initial_lr must be > 0, got {}", self.initial_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_oversample) {
            return Err(Error::InvalidConfig("fg_oversample must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        self.curriculum.validate()?;
        self.loss.validate()?;
        self.guidance.validate()
    }

    /// Learning rate for a zero-based epoch: `initial_lr · (1 − epoch/epochs)^exponent`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * (1.0 - epoch as f64 / self.epochs as f64).powf(self.poly_exponent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lesion_loss: f64,
    pub organ_loss: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    /// Learning rate used by the very first optimizer step.
    pub first_step_lr: Option<f64>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<LossTerms>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,lesion_loss,organ_loss,total";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.lesion_loss, e.organ_loss, e.total);
        }
        out
    }
}

/// Preprocessed training case with its full simulated click set.
pub struct TrainingCase {
    pub id: String,
    pub input: NormalizedCase,
    pub lesion: Array3<u16>,
    pub organ: Option<Array3<u16>>,
    pub clicks: ClickList,
    lesion_voxels: Vec<[usize; 3]>,
}

impl TrainingCase {
    pub fn prepare(case: &CaseData, fp: &DatasetFingerprint, guidance: &GuidanceConfig, seed: u64) -> Result<Self> {
        let gt = case
            .lesion_gt
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("case {} has no lesion ground truth", case.id)))?;
        let input = normalize_case(case, fp)?;
        let sim = simulate_clicks(gt, None, MAX_CLICKS_PER_KIND, MAX_CLICKS_PER_KIND, guidance, derive_seed(seed, &case.id))?;
        let lesion = gt.labels().mapv(|v| (v > 0) as u16);
        let lesion_voxels = lesion
            .indexed_iter()
            .filter(|(_, &v)| v > 0)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        Ok(TrainingCase {
            id: case.id.clone(),
            input,
            lesion,
            organ: case.organ_gt.as_ref().map(|o| o.labels().clone()),
            clicks: sim.clicks,
            lesion_voxels,
        })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.input.grid
    }
}

/// One training sample: the four input channels and the targets, all patch-sized.
pub struct TrainingSample {
    pub k: usize,
    pub channels: [Array3<f32>; 4],
    pub lesion: Array3<u16>,
    pub organ: Option<Array3<u16>>,
}

/// Draws k from the curriculum, renders the first-k guidance and crops a patch.
pub struct SampleBuilder<'a> {
    pub cases: &'a [TrainingCase],
    pub patch: [usize; 3],
    pub curriculum: &'a SamplingDistribution,
    pub guidance: &'a GuidanceConfig,
    pub fg_oversample: f64,
}

impl SampleBuilder<'_> {
    /// With `patch` unset the whole volume is returned.
    pub fn draw<R: Rng + ?Sized>(&self, case_idx: usize, crop: bool, rng: &mut R) -> Result<TrainingSample> {
        let case = &self.cases[case_idx];
        let k = self.curriculum.sample(rng);
        let clicks = take_first_k(&case.clicks, k)?;
        let vol = assemble_input(&case.input, &clicks, self.guidance)?;
        let shape = case.grid().shape;
        let [c0, c1, c2, c3] = vol.channels().clone();
        let mut sample = TrainingSample {
            k,
            channels: [c0, c1, c2, c3],
            lesion: case.lesion.clone(),
            organ: case.organ.clone(),
        };
        if crop && shape != self.patch {
            let start = self.patch_start(case, shape, rng);
            let sl = s![
                start[0]..start[0] + self.patch[0],
                start[1]..start[1] + self.patch[1],
                start[2]..start[2] + self.patch[2]
            ];
            for c in sample.channels.iter_mut() {
                *c = c.slice(sl).to_owned();
            }
            sample.lesion = sample.lesion.slice(sl).to_owned();
            sample.organ = sample.organ.map(|o| o.slice(sl).to_owned());
        }
        Ok(sample)
    }

    fn patch_start<R: Rng + ?Sized>(&self, case: &TrainingCase, shape: [usize; 3], rng: &mut R) -> [usize; 3] {
        let mut start = [0; 3];
        let fg = !case.lesion_voxels.is_empty() && rng.gen_bool(self.fg_oversample);
        let centre = fg.then(|| case.lesion_voxels[rng.gen_range(0..case.lesion_voxels.len())]);
        for a in 0..3 {
            let max = shape[a] - self.patch[a];
            start[a] = match centre {
                Some(c) => c[a].saturating_sub(self.patch[a] / 2).min(max),
                None => rng.gen_range(0..=max),
            };
        }
        start
    }
}

/// Applies random mirroring, axial rotation, noise and gamma in place.
pub fn augment<R: Rng + ?Sized>(sample: &mut TrainingSample, cfg: &AugmentConfig, rng: &mut R) {
    if cfg.flips {
        for axis in 0..3 {
            if rng.gen_bool(0.5) {
                map_spatial(sample, |a| flip_axis(a, axis), |a| flip_axis(a, axis));
            }
        }
    }
    let [_, h, w] = dims(&sample.lesion);
    if cfg.rot90 && h == w {
        let turns = rng.gen_range(0..4);
        for _ in 0..turns {
            map_spatial(sample, rot90, rot90);
        }
    }
    for c in 0..2 {
        if cfg.noise_prob > 0.0 && rng.gen_bool(cfg.noise_prob) {
            let std = rng.gen_range(0.0..=cfg.noise_max_std.max(0.0));
            if std > 0.0 {
                let n = Normal::new(0.0, std).expect("positive std");
                sample.channels[c].mapv_inplace(|v| v + n.sample(rng));
            }
        }
        if cfg.gamma_prob > 0.0 && rng.gen_bool(cfg.gamma_prob) {
            let (lo, hi) = cfg.gamma_range;
            let g = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            gamma(&mut sample.channels[c], g);
        }
    }
}

fn dims<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

fn map_spatial(
    s: &mut TrainingSample,
    f: impl Fn(&Array3<f32>) -> Array3<f32>,
    g: impl Fn(&Array3<u16>) -> Array3<u16>,
) {
    for c in s.channels.iter_mut() {
        *c = f(c);
    }
    s.lesion = g(&s.lesion);
    if let Some(o) = &s.organ {
        s.organ = Some(g(o));
    }
}

/// Quarter turn in the (y, x) plane.
fn rot90<T: Clone>(a: &Array3<T>) -> Array3<T> {
    let mut v = a.view().permuted_axes([0, 2, 1]);
    v.invert_axis(Axis(2));
    v.as_standard_layout().into_owned()
}

/// Gamma on the intensity range of the channel, preserving its min and max.
fn gamma(a: &mut Array3<f32>, g: f32) {
    let (lo, hi) = a.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return;
    }
    a.mapv_inplace(|v| lo + range * ((v - lo) / range).powf(g));
}

fn batch_tensors(samples: &[TrainingSample]) -> (Tensor, Vec<u16>, Option<Vec<u16>>) {
    let [d, h, w] = dims(&samples[0].lesion);
    let mut x = Tensor::zeros([samples.len(), 4, d, h, w]);
    let mut lesion = Vec::with_capacity(samples.len() * d * h * w);
    let mut organ = samples[0].organ.as_ref().map(|_| Vec::with_capacity(samples.len() * d * h * w));
    for (n, s) in samples.iter().enumerate() {
        for c in 0..4 {
            let plane = x.plane_mut(n, c);
            for (dst, &src) in plane.iter_mut().zip(s.channels[c].iter()) {
                *dst = src;
            }
        }
        lesion.extend(s.lesion.iter().copied());
        if let (Some(o), Some(src)) = (organ.as_mut(), s.organ.as_ref()) {
            o.extend(src.iter().copied());
        }
    }
    (x, lesion, organ)
}

/// Trains `net` in place. With `out_dir` set, writes checkpoints and `loss.csv` there.
pub fn train(
    net: &mut SegNet,
    cases: &[CaseData],
    fp: &DatasetFingerprint,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    tc.validate()?;
    if cases.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let dual = net.config().organ_head;
    let prepared = cases
        .iter()
        .map(|c| {
            if dual && c.organ_gt.is_none() {
                return Err(Error::InvalidArgument("organ head needs organ labels".into()).for_case(&c.id));
            }
            TrainingCase::prepare(c, fp, &tc.guidance, tc.seed).map_err(|e| e.for_case(&c.id))
        })
        .collect::<Result<Vec<_>>>()?;
    train_prepared(net, &prepared, tc, out_dir)
}

/// As [`train`], on cases already prepared with [`TrainingCase::prepare`].
pub fn train_prepared(
    net: &mut SegNet,
    cases: &[TrainingCase],
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    tc.validate()?;
    if cases.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let patch = net.config().patch_size;
    for c in cases {
        let shape = c.grid().shape;
        if (0..3).any(|a| shape[a] < patch[a]) {
            return Err(Error::InvalidConfig(format!(
                "case {} of shape {shape:?} is smaller than the patch {patch:?}",
                c.id
            )));
        }
    }
    let dual = net.config().organ_head;
    let builder = SampleBuilder {
        cases,
        patch,
        curriculum: &tc.curriculum,
        guidance: &tc.guidance,
        fg_oversample: tc.fg_oversample,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let iters = tc
        .iterations_per_epoch
        .unwrap_or_else(|| cases.len().div_ceil(tc.batch_size))
        .max(1);
    let mut report = TrainReport::default();
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let opt = Sgd {
            lr: lr as f32,
            momentum: tc.momentum as f32,
            nesterov: tc.nesterov,
            weight_decay: tc.weight_decay as f32,
        };
        let (mut sum_l, mut sum_o, mut sum_t) = (0.0, 0.0, 0.0);
        for it in 0..iters {
            let mut samples = Vec::with_capacity(tc.batch_size);
            for _ in 0..tc.batch_size {
                let idx = rng.gen_range(0..cases.len());
                let mut s = builder.draw(idx, true, &mut rng)?;
                augment(&mut s, &tc.augment, &mut rng);
                samples.push(s);
            }
            let (x, lesion, organ) = batch_tensors(&samples);
            zero_grads(net);
            let out = net.forward_train(&x);
            let organ_target = if dual { organ.as_deref() } else { None };
            let loss = dice_ce_loss(&out, &lesion, organ_target, &tc.loss)?;
            let t = &loss.terms;
            if !t.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: it,
                    lesion_loss: t.lesion,
                    organ_loss: t.organ,
                });
            }
            net.backward(&loss.grad_lesion, loss.grad_organ.as_ref());
            if let Some(max) = tc.grad_clip {
                clip_grad_norm(net, max as f32);
            }
            opt.step(net);
            report.first_step_lr.get_or_insert(lr);
            sum_l += t.lesion;
            sum_o += t.organ;
            sum_t += t.total;
            report.step_losses.push(loss.terms);
        }
        let n = iters as f64;
        let e = EpochLoss {
            epoch,
            lesion_loss: sum_l / n,
            organ_loss: sum_o / n,
            total: sum_t / n,
            lr,
        };
        log::info!(
            "epoch {epoch}: lesion {:.4} organ {:.4} total {:.4} lr {lr:.2e}",
            e.lesion_loss,
            e.organ_loss,
            e.total
        );
        report.epochs.push(e);
        if let Some(dir) = out_dir {
            let last = epoch + 1 == tc.epochs;
            let periodic = tc.checkpoint_every.is_some_and(|k| k > 0 && (epoch + 1) % k == 0);
            if last || periodic {
                let path = dir.join(format!("checkpoint_epoch_{:04}.safetensors", epoch + 1));
                net.save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let final_path = dir.join("checkpoint_final.safetensors");
        net.save(&final_path)?;
        report.checkpoints.push(final_path);
        let csv = dir.join("loss.csv");
        std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(report)
}
