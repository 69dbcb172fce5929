//! Residual-encoder 3D U-Net with lesion and organ heads, its losses and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array5, ArrayView5, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{assign_params, read_checkpoint, write_checkpoint, StoredTensor};
use crate::nn::{Conv3d, ConvNormAct, ConvTranspose3d, Layer, Param, Parameterized, ResidualBlock, Tensor};

/// The ten organ classes of the auxiliary head, in label order starting at 1.
pub struct OrganSchema;

impl OrganSchema {
    pub const NAMES: [&'static str; 10] = [
        "spleen",
        "kidneys",
        "liver",
        "urinary_bladder",
        "lung",
        "brain",
        "heart",
        "stomach",
        "prostate",
        "head_glands",
    ];

    pub const fn len() -> usize {
        Self::NAMES.len()
    }

    pub fn id(name: &str) -> Option<u16> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| i as u16 + 1)
    }

    pub fn label_schema() -> BTreeMap<u16, String> {
        std::iter::once((0, "background".to_string()))
            .chain(Self::NAMES.iter().enumerate().map(|(i, n)| (i as u16 + 1, n.to_string())))
            .collect()
    }
}

fn default_blocks() -> Vec<usize> {
    vec![1, 2, 2, 2]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_stages: usize,
    pub features_per_stage: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: Vec<usize>,
    pub patch_size: [usize; 3],
    pub lesion_classes: usize,
    pub organ_classes: usize,
    /// Build the organ head. Disabling it gives a single-head network with otherwise identical initialization.
    #[serde(default = "default_true")]
    pub organ_head: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 4,
            n_stages: 4,
            features_per_stage: vec![16, 32, 64, 128],
            blocks_per_stage: default_blocks(),
            patch_size: [64, 64, 64],
            lesion_classes: 2,
            organ_classes: OrganSchema::len() + 1,
            organ_head: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Full-scale 192³ patch.
    pub fn full_scale_patch() -> [usize; 3] {
        [192, 192, 192]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 4 {
            return Err(Error::InvalidConfig(format!(
                "in_channels must be 4 (CT, PET, FG, BG), got {}",
                self.in_channels
            )));
        }
        self.validate_shape()
    }

    /// Checks that hold for both the 4-channel network and single-channel pretraining sources.
    pub fn validate_shape(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be positive".into()));
        }
        if self.n_stages == 0 {
            return Err(Error::InvalidConfig("n_stages must be at least 1".into()));
        }
        if self.features_per_stage.len() != self.n_stages || self.blocks_per_stage.len() != self.n_stages {
            return Err(Error::InvalidConfig(format!(
                "features_per_stage ({}) and blocks_per_stage ({}) must have n_stages = {} entries",
                self.features_per_stage.len(),
                self.blocks_per_stage.len(),
                self.n_stages
            )));
        }
        if self.features_per_stage.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(Error::InvalidConfig("features and blocks must be positive".into()));
        }
        let div = 1usize << (self.n_stages - 1);
        if self.patch_size.iter().any(|&p| p == 0 || p % div != 0) {
            return Err(Error::InvalidConfig(format!(
                "patch {:?} is not divisible by 2^(n_stages-1) = {div}",
                self.patch_size
            )));
        }
        if self.lesion_classes != 2 {
            return Err(Error::InvalidConfig(format!("lesion_classes must be 2, got {}", self.lesion_classes)));
        }
        if self.organ_classes != OrganSchema::len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "organ_classes must be {}, got {}",
                OrganSchema::len() + 1,
                self.organ_classes
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this for a forward pass.
    pub fn size_divisor(&self) -> usize {
        1 << (self.n_stages - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub dice_w: f64,
    pub ce_w: f64,
    pub lesion_head_w: f64,
    pub organ_head_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice_w: 2.0,
            ce_w: 1.0,
            lesion_head_w: 1.0,
            organ_head_w: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.dice_w, self.ce_w, self.lesion_head_w, self.organ_head_w];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        if (self.dice_w == 0.0 && self.ce_w == 0.0) || (self.lesion_head_w == 0.0 && self.organ_head_w == 0.0) {
            return Err(Error::InvalidConfig("loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DualHeadOutput {
    pub lesion_logits: Tensor,
    /// Absent for single-head networks.
    pub organ_logits: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvTranspose3d,
    block: ConvNormAct,
    skip_channels: usize,
}

/// The segmentation network.
#[derive(Clone, Debug)]
pub struct SegNet {
    cfg: NetworkConfig,
    stem: ConvNormAct,
    encoder: Vec<Vec<ResidualBlock>>,
    decoder: Vec<DecoderStage>,
    lesion_head: Conv3d,
    organ_head: Option<Conv3d>,
}

/// Builds a freshly initialized network; weights are a pure function of `cfg.seed`.
pub fn build_network(cfg: &NetworkConfig) -> Result<SegNet> {
    cfg.validate()?;
    Ok(SegNet::construct(cfg.clone()))
}

impl SegNet {
    /// Builds a network that may take a single input channel, for use as a pretraining source.
    pub fn pretraining_source(cfg: &NetworkConfig) -> Result<SegNet> {
        cfg.validate_shape()?;
        Ok(SegNet::construct(cfg.clone()))
    }

    fn construct(cfg: NetworkConfig) -> SegNet {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let f = &cfg.features_per_stage;
        let k = [3, 3, 3];
        let stem = ConvNormAct::new(cfg.in_channels, f[0], k, [1, 1, 1], &mut rng);
        let mut encoder = Vec::new();
        for s in 0..cfg.n_stages {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage[s] {
                let (cin, stride) = if b == 0 && s > 0 { (f[s - 1], [2, 2, 2]) } else { (f[s], [1, 1, 1]) };
                blocks.push(ResidualBlock::new(cin, f[s], k, stride, &mut rng));
            }
            encoder.push(blocks);
        }
        let mut decoder = Vec::new();
        for s in (0..cfg.n_stages - 1).rev() {
            decoder.push(DecoderStage {
                up: ConvTranspose3d::new(f[s + 1], f[s], &mut rng),
                block: ConvNormAct::new(2 * f[s], f[s], k, [1, 1, 1], &mut rng),
                skip_channels: f[s],
            });
        }
        let lesion_head = Conv3d::new(f[0], cfg.lesion_classes, [1, 1, 1], [1, 1, 1], &mut rng);
        let organ_head = cfg
            .organ_head
            .then(|| Conv3d::new(f[0], cfg.organ_classes, [1, 1, 1], [1, 1, 1], &mut rng));
        SegNet {
            cfg,
            stem,
            encoder,
            decoder,
            lesion_head,
            organ_head,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor) {
        assert_eq!(x.channels(), self.cfg.in_channels, "network input channel mismatch");
        let d = self.cfg.size_divisor();
        assert!(
            x.spatial().iter().all(|s| s % d == 0),
            "spatial size {:?} not divisible by {d}",
            x.spatial()
        );
    }

    fn features(&self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let mut h = self.stem.forward(x);
        let mut skips = Vec::with_capacity(self.cfg.n_stages);
        for blocks in &self.encoder {
            for b in blocks {
                h = b.forward(&h);
            }
            skips.push(h.clone());
        }
        skips.pop();
        for stage in &self.decoder {
            let up = stage.up.forward(&h);
            let skip = skips.pop().expect("one skip per decoder stage");
            h = stage.block.forward(&Tensor::concat_channels(&up, &skip));
        }
        h
    }

    pub fn forward(&self, x: &Tensor) -> DualHeadOutput {
        let h = self.features(x);
        DualHeadOutput {
            lesion_logits: self.lesion_head.forward(&h),
            organ_logits: self.organ_head.as_ref().map(|o| o.forward(&h)),
        }
    }

    /// Lesion logits only; skips the organ head.
    pub fn forward_lesion(&self, x: &Tensor) -> Tensor {
        self.lesion_head.forward(&self.features(x))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> DualHeadOutput {
        self.check_input(x);
        let mut h = self.stem.forward_train(x);
        let mut skips = Vec::with_capacity(self.cfg.n_stages);
        for blocks in &mut self.encoder {
            for b in blocks {
                h = b.forward_train(&h);
            }
            skips.push(h.clone());
        }
        skips.pop();
        for stage in &mut self.decoder {
            let up = stage.up.forward_train(&h);
            let skip = skips.pop().expect("one skip per decoder stage");
            h = stage.block.forward_train(&Tensor::concat_channels(&up, &skip));
        }
        DualHeadOutput {
            lesion_logits: self.lesion_head.forward_train(&h),
            organ_logits: self.organ_head.as_mut().map(|o| o.forward_train(&h)),
        }
    }

    /// Accumulates parameter gradients from logit gradients of a preceding `forward_train`.
    pub fn backward(&mut self, grad_lesion: &Tensor, grad_organ: Option<&Tensor>) {
        let mut g = self.lesion_head.backward(grad_lesion);
        if let Some(head) = &mut self.organ_head {
            let go = grad_organ.expect("organ gradient required for a dual-head network");
            g.add_assign(&head.backward(go));
        }
        let n = self.cfg.n_stages;
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; n];
        // decoder entry j consumes the skip of encoder stage n - 2 - j
        for (j, stage) in self.decoder.iter_mut().enumerate().rev() {
            let gc = stage.block.backward(&g);
            let up_c = gc.channels() - stage.skip_channels;
            let (gu, gs) = gc.split_channels(up_c);
            skip_grads[n - 2 - j] = Some(gs);
            g = stage.up.backward(&gu);
        }
        for s in (0..n).rev() {
            if let Some(sg) = skip_grads[s].take() {
                g.add_assign(&sg);
            }
            for b in self.encoder[s].iter_mut().rev() {
                g = b.backward(&g);
            }
        }
        let _ = self.stem.backward(&g);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(self, CHECKPOINT_KIND, serde_json::to_string(&self.cfg)?, path.as_ref())
    }

    /// Loads a checkpoint with the architecture stored in it.
    pub fn load(path: impl AsRef<Path>) -> Result<SegNet> {
        let (tensors, cfg_json) = read_checkpoint(path.as_ref(), CHECKPOINT_KIND)?;
        let cfg: NetworkConfig = serde_json::from_str(&cfg_json)?;
        cfg.validate_shape().map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        let mut net = SegNet::construct(cfg);
        assign_params(&mut net, &tensors)?;
        Ok(net)
    }

    /// Loads a checkpoint into a network shaped by `target`. A single-channel checkpoint
    /// is widened to the 4-channel input with [`expand_pretrained_channels`].
    pub fn load_for(path: impl AsRef<Path>, target: &NetworkConfig) -> Result<SegNet> {
        target.validate()?;
        let (mut tensors, cfg_json) = read_checkpoint(path.as_ref(), CHECKPOINT_KIND)?;
        let stored: NetworkConfig = serde_json::from_str(&cfg_json)?;
        if stored.in_channels == 1 && target.in_channels == 4 {
            let w = tensors
                .get(STEM_WEIGHT)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {STEM_WEIGHT}")))?;
            let arr = ArrayView5::from_shape(shape5(&w.shape)?, &w.data[..])
                .map_err(|e| Error::Checkpoint(format!("{STEM_WEIGHT}: {e}")))?;
            let expanded = expand_pretrained_channels(arr)?;
            tensors.insert(
                STEM_WEIGHT.to_string(),
                StoredTensor {
                    shape: expanded.shape().to_vec(),
                    data: expanded.iter().copied().collect(),
                },
            );
        }
        let mut net = SegNet::construct(target.clone());
        if !target.organ_head {
            tensors.retain(|k, _| !k.starts_with("organ_head."));
        }
        assign_params(&mut net, &tensors)?;
        Ok(net)
    }

    pub fn stem_weight(&self) -> ArrayView5<'_, f32> {
        let w = &self.stem.conv.weight;
        ArrayView5::from_shape(shape5(&w.shape).expect("5d kernel"), &w.value[..]).expect("stem shape")
    }
}

const CHECKPOINT_KIND: &str = "segnet";
const STEM_WEIGHT: &str = "stem.conv.weight";

fn shape5(s: &[usize]) -> Result<[usize; 5]> {
    s.try_into()
        .map_err(|_| Error::Checkpoint(format!("expected a 5-d kernel, got shape {s:?}")))
}

impl Parameterized for SegNet {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit_params("stem", f);
        for (s, blocks) in self.encoder.iter().enumerate() {
            for (b, blk) in blocks.iter().enumerate() {
                blk.visit_params(&format!("encoder.{s}.{b}"), f);
            }
        }
        for (j, st) in self.decoder.iter().enumerate() {
            st.up.visit_params(&format!("decoder.{j}.up"), f);
            st.block.visit_params(&format!("decoder.{j}.block"), f);
        }
        self.lesion_head.visit_params("lesion_head", f);
        if let Some(o) = &self.organ_head {
            o.visit_params("organ_head", f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params_mut("stem", f);
        for (s, blocks) in self.encoder.iter_mut().enumerate() {
            for (b, blk) in blocks.iter_mut().enumerate() {
                blk.visit_params_mut(&format!("encoder.{s}.{b}"), f);
            }
        }
        for (j, st) in self.decoder.iter_mut().enumerate() {
            st.up.visit_params_mut(&format!("decoder.{j}.up"), f);
            st.block.visit_params_mut(&format!("decoder.{j}.block"), f);
        }
        self.lesion_head.visit_params_mut("lesion_head", f);
        if let Some(o) = &mut self.organ_head {
            o.visit_params_mut("organ_head", f);
        }
    }
}

/// Widens a single-channel stem kernel `[out, 1, kd, kh, kw]` to the four network inputs:
/// CT and PET receive copies, the two guidance channels start at zero.
pub fn expand_pretrained_channels(stem: ArrayView5<'_, f32>) -> Result<Array5<f32>> {
    let s = stem.shape();
    if s[1] != 1 {
        return Err(Error::InvalidArgument(format!(
            "channel expansion needs a 1-channel stem, got {} input channels",
            s[1]
        )));
    }
    let mut out = Array5::zeros((s[0], 4, s[2], s[3], s[4]));
    let src = stem.index_axis(Axis(1), 0);
    out.index_axis_mut(Axis(1), 0).assign(&src);
    out.index_axis_mut(Axis(1), 1).assign(&src);
    Ok(out)
}

/// Softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let c = logits.channels();
    let s = logits.spatial_len();
    let mut out = Tensor::zeros(logits.shape);
    for n in 0..logits.batch() {
        let src = logits.sample(n);
        let dst = out.sample_mut(n);
        for i in 0..s {
            let mut m = f32::NEG_INFINITY;
            for k in 0..c {
                m = m.max(src[k * s + i]);
            }
            let mut z = 0.0f32;
            for k in 0..c {
                let e = (src[k * s + i] - m).exp();
                dst[k * s + i] = e;
                z += e;
            }
            for k in 0..c {
                dst[k * s + i] /= z;
            }
        }
    }
    out
}

/// Soft Dice loss without a smoothing term; an empty prediction against an empty target scores 0.
pub fn dice_loss_nosmooth(probs: &[f32], target: &[bool]) -> Result<f64> {
    if probs.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "dice loss: {} probabilities vs {} targets",
            probs.len(),
            target.len()
        )));
    }
    let (i, s) = dice_sums(probs, target);
    Ok(if s == 0.0 { 0.0 } else { 1.0 - 2.0 * i / s })
}

/// Gradient of [`dice_loss_nosmooth`] with respect to each probability.
pub fn dice_loss_nosmooth_grad(probs: &[f32], target: &[bool]) -> Result<Vec<f64>> {
    if probs.len() != target.len() {
        return Err(Error::InvalidArgument("dice loss gradient: length mismatch".into()));
    }
    let (i, s) = dice_sums(probs, target);
    if s == 0.0 {
        return Ok(vec![0.0; probs.len()]);
    }
    Ok(target
        .iter()
        .map(|&t| -2.0 * ((t as u8 as f64) * s - i) / (s * s))
        .collect())
}

fn dice_sums(probs: &[f32], target: &[bool]) -> (f64, f64) {
    let mut inter = 0.0f64;
    let mut sum = 0.0f64;
    for (&p, &t) in probs.iter().zip(target) {
        let p = p as f64;
        if t {
            inter += p;
            sum += 1.0;
        }
        sum += p;
    }
    (inter, sum)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub lesion_dice: f64,
    pub lesion_ce: f64,
    pub organ_dice: f64,
    pub organ_ce: f64,
    /// `dice_w * lesion_dice + ce_w * lesion_ce`
    pub lesion: f64,
    pub organ: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub grad_lesion: Tensor,
    pub grad_organ: Option<Tensor>,
}

/// Per-head Dice + CE on softmax outputs. `dice_classes` lists the channels that enter the Dice mean.
/// Returns (mean Dice loss, CE, dL/dlogits for unit weights split as (dice grad, ce grad)).
fn head_loss(
    logits: &Tensor,
    target: &[u16],
    dice_classes: DiceClasses,
    dice_w: f64,
    ce_w: f64,
) -> Result<(f64, f64, Tensor)> {
    let c = logits.channels();
    let s = logits.spatial_len();
    let nb = logits.batch();
    if target.len() != nb * s {
        return Err(Error::InvalidArgument(format!(
            "target has {} voxels, logits have {}",
            target.len(),
            nb * s
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::InvalidArgument(format!("unknown label {bad} for a {c}-class head")));
    }
    let probs = softmax_channels(logits);
    let total_vox = (nb * s) as f64;
    let mut ce = 0.0f64;
    let mut dice_sum = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape);
    for n in 0..nb {
        let p = probs.sample(n);
        let t = &target[n * s..(n + 1) * s];
        // dL/dp, accumulated per channel
        let mut gp = vec![0.0f64; c * s];
        let classes: Vec<usize> = match dice_classes {
            DiceClasses::Foreground => vec![1],
            DiceClasses::PresentNonBackground => (1..c).filter(|&k| t.iter().any(|&v| v as usize == k)).collect(),
        };
        if !classes.is_empty() {
            let scale = 1.0 / (classes.len() as f64 * nb as f64);
            for &k in &classes {
                let pk = &p[k * s..(k + 1) * s];
                let tk: Vec<bool> = t.iter().map(|&v| v as usize == k).collect();
                dice_sum += dice_loss_nosmooth(pk, &tk)? / classes.len() as f64;
                let g = dice_loss_nosmooth_grad(pk, &tk)?;
                for i in 0..s {
                    gp[k * s + i] += dice_w * scale * g[i];
                }
            }
        }
        let gs = grad.sample_mut(n);
        for i in 0..s {
            let ti = t[i] as usize;
            ce -= (p[ti * s + i].max(f32::MIN_POSITIVE) as f64).ln();
            // softmax Jacobian applied to the Dice gradient, plus the CE gradient (p - onehot)
            let dot: f64 = (0..c).map(|k| p[k * s + i] as f64 * gp[k * s + i]).sum();
            for k in 0..c {
                let pk = p[k * s + i] as f64;
                let onehot = (k == ti) as u8 as f64;
                let g = pk * (gp[k * s + i] - dot) + ce_w * (pk - onehot) / total_vox;
                gs[k * s + i] = g as f32;
            }
        }
    }
    Ok((dice_sum / nb as f64, ce / total_vox, grad))
}

#[derive(Clone, Copy)]
enum DiceClasses {
    Foreground,
    PresentNonBackground,
}

/// Weighted Dice + CE over both heads; returns decomposed terms and gradients w.r.t. the logits.
///
/// Targets are flattened `[batch, d, h, w]` label arrays. The organ Dice averages over the
/// organ classes present in each sample's target.
pub fn dice_ce_loss(
    output: &DualHeadOutput,
    lesion_gt: &[u16],
    organ_gt: Option<&[u16]>,
    w: &LossWeights,
) -> Result<LossOutput> {
    w.validate()?;
    let (ld, lce, mut gl) = head_loss(&output.lesion_logits, lesion_gt, DiceClasses::Foreground, w.dice_w, w.ce_w)?;
    gl.data.iter_mut().for_each(|g| *g *= w.lesion_head_w as f32);
    let mut terms = LossTerms {
        lesion_dice: ld,
        lesion_ce: lce,
        lesion: w.dice_w * ld + w.ce_w * lce,
        ..Default::default()
    };
    let mut grad_organ = None;
    if let Some(ol) = &output.organ_logits {
        let gt = organ_gt.ok_or_else(|| Error::InvalidArgument("organ head present but no organ target".into()))?;
        let (od, oce, mut go) = head_loss(ol, gt, DiceClasses::PresentNonBackground, w.dice_w, w.ce_w)?;
        go.data.iter_mut().for_each(|g| *g *= w.organ_head_w as f32);
        terms.organ_dice = od;
        terms.organ_ce = oce;
        terms.organ = w.dice_w * od + w.ce_w * oce;
        grad_organ = Some(go);
    }
    terms.total = w.lesion_head_w * terms.lesion + w.organ_head_w * terms.organ;
    Ok(LossOutput {
        terms,
        grad_lesion: gl,
        grad_organ,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_fd, nudge};
    use crate::nn::{parameter_count, zero_grads, Sgd};
    use rand::Rng;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            n_stages: 3,
            features_per_stage: vec![4, 8, 8],
            blocks_per_stage: vec![1, 1, 1],
            patch_size: [8, 8, 8],
            ..Default::default()
        }
    }

    fn random_input(shape: [usize; 5], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    }

    #[test]
    fn organ_schema_is_stable() {
        assert_eq!(OrganSchema::len(), 10);
        assert_eq!(OrganSchema::id("spleen"), Some(1));
        assert_eq!(OrganSchema::id("head_glands"), Some(10));
        assert_eq!(OrganSchema::label_schema()[&0], "background");
        assert_eq!(OrganSchema::label_schema().len(), 11);
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        let mut c = NetworkConfig::default();
        c.patch_size = [60, 64, 64];
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = NetworkConfig::default();
        c.in_channels = 3;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::default();
        c.organ_classes = 5;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::default();
        c.features_per_stage.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_default_shapes_and_parameter_count() {
        let net = build_network(&NetworkConfig::default()).unwrap();
        let n = parameter_count(&net);
        assert!((1_000_000..=20_000_000).contains(&n), "{n} parameters");
        let small = NetworkConfig { patch_size: [16, 16, 16], ..Default::default() };
        let net = build_network(&small).unwrap();
        let out = net.forward(&random_input([1, 4, 16, 16, 16], 0));
        assert_eq!(out.lesion_logits.shape, [1, 2, 16, 16, 16]);
        assert_eq!(out.organ_logits.unwrap().shape, [1, 11, 16, 16, 16]);
    }

    #[test]
    fn forward_is_deterministic_under_seed() {
        let a = build_network(&tiny_cfg()).unwrap();
        let b = build_network(&tiny_cfg()).unwrap();
        let x = random_input([1, 4, 8, 8, 8], 1);
        assert_eq!(a.forward(&x).lesion_logits, b.forward(&x).lesion_logits);
        assert_eq!(a.forward_lesion(&x), a.forward(&x).lesion_logits);
        let c = build_network(&NetworkConfig { seed: 9, ..tiny_cfg() }).unwrap();
        assert_ne!(a.forward(&x).lesion_logits, c.forward(&x).lesion_logits);
    }

    #[test]
    fn dice_loss_examples() {
        assert_eq!(dice_loss_nosmooth(&[1.0, 0.0, 1.0], &[true, false, true]).unwrap(), 0.0);
        assert_eq!(dice_loss_nosmooth(&[0.0; 5], &[false; 5]).unwrap(), 0.0);
        let t = [true, true, true, true, false, false, false, false];
        assert!((dice_loss_nosmooth(&[0.5; 8], &t).unwrap() - 0.5).abs() < 1e-12);
        assert!(dice_loss_nosmooth(&[0.5; 3], &[true; 2]).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let p: Vec<f32> = (0..64).map(|_| rng.gen_range(0.05f32..0.95)).collect();
            let t: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.3)).collect();
            let g = dice_loss_nosmooth_grad(&p, &t).unwrap();
            for i in 0..64 {
                let h = 1e-3f32;
                let mut pp = p.clone();
                pp[i] += h;
                let mut pm = p.clone();
                pm[i] -= h;
                let fd = (dice_loss_nosmooth(&pp, &t).unwrap() - dice_loss_nosmooth(&pm, &t).unwrap())
                    / ((pp[i] - pm[i]) as f64);
                assert!((fd - g[i]).abs() <= 1e-3 * g[i].abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
            }
        }
    }

    fn single_voxel_output(p_fg: f64) -> DualHeadOutput {
        let l = (p_fg / (1.0 - p_fg)).ln() as f32;
        DualHeadOutput {
            lesion_logits: Tensor::from_vec([1, 2, 1, 1, 1], vec![0.0, l]),
            organ_logits: None,
        }
    }

    #[test]
    fn single_voxel_loss_matches_hand_computation() {
        let out = single_voxel_output(0.8);
        let l = dice_ce_loss(&out, &[1], None, &LossWeights::default()).unwrap();
        let dice = 1.0 - 1.6 / 1.8;
        let ce = -(0.8f64).ln();
        assert!((l.terms.lesion_dice - dice).abs() < 1e-6);
        assert!((l.terms.lesion_ce - ce).abs() < 1e-6);
        assert!((l.terms.total - (2.0 * dice + ce)).abs() < 1e-6);
    }

    #[test]
    fn doubling_dice_weight_only_scales_dice() {
        let out = single_voxel_output(0.3);
        let a = dice_ce_loss(&out, &[1], None, &LossWeights::default()).unwrap().terms;
        let b = dice_ce_loss(&out, &[1], None, &LossWeights { dice_w: 4.0, ..Default::default() })
            .unwrap()
            .terms;
        assert_eq!(a.lesion_dice, b.lesion_dice);
        assert_eq!(a.lesion_ce, b.lesion_ce);
        assert!((b.total - a.total - 2.0 * a.lesion_dice).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let s = 8;
        let lesion: Vec<u16> = (0..s).map(|i| (i % 3 == 0) as u16).collect();
        let organ: Vec<u16> = (0..s).map(|i| (i % 11) as u16).collect();
        let mut ll = vec![0.0f32; 2 * s];
        let mut ol = vec![0.0f32; 11 * s];
        for i in 0..s {
            ll[lesion[i] as usize * s + i] = 40.0;
            ol[organ[i] as usize * s + i] = 40.0;
        }
        let out = DualHeadOutput {
            lesion_logits: Tensor::from_vec([1, 2, 2, 2, 2], ll),
            organ_logits: Some(Tensor::from_vec([1, 11, 2, 2, 2], ol)),
        };
        let l = dice_ce_loss(&out, &lesion, Some(&organ), &LossWeights::default()).unwrap();
        assert!(l.terms.total < 1e-5, "{:?}", l.terms);
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let out = single_voxel_output(0.5);
        assert!(matches!(
            dice_ce_loss(&out, &[2], None, &LossWeights::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn loss_logit_gradient_matches_finite_differences() {
        let shape = [2, 11, 2, 2, 2];
        let ol = random_input(shape, 5);
        let ll = random_input([2, 2, 2, 2, 2], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lesion: Vec<u16> = (0..16).map(|_| rng.gen_range(0..2)).collect();
        let organ: Vec<u16> = (0..16).map(|_| rng.gen_range(0..4)).collect();
        let w = LossWeights { organ_head_w: 0.5, ..Default::default() };
        let eval = |ll: &Tensor, ol: &Tensor| {
            let out = DualHeadOutput { lesion_logits: ll.clone(), organ_logits: Some(ol.clone()) };
            dice_ce_loss(&out, &lesion, Some(&organ), &w).unwrap()
        };
        let base = eval(&ll, &ol);
        let h = 1e-2f32;
        for i in (0..ll.data.len()).step_by(3) {
            let mut p = ll.clone();
            p.data[i] += h;
            let mut m = ll.clone();
            m.data[i] -= h;
            let fd = (eval(&p, &ol).terms.total - eval(&m, &ol).terms.total) / (2.0 * h as f64);
            let an = base.grad_lesion.data[i] as f64;
            assert!((fd - an).abs() < 1e-3 + 1e-2 * an.abs(), "lesion {i}: {fd} vs {an}");
        }
        let go = base.grad_organ.as_ref().unwrap();
        for i in (0..ol.data.len()).step_by(7) {
            let mut p = ol.clone();
            p.data[i] += h;
            let mut m = ol.clone();
            m.data[i] -= h;
            let fd = (eval(&ll, &p).terms.total - eval(&ll, &m).terms.total) / (2.0 * h as f64);
            let an = go.data[i] as f64;
            assert!((fd - an).abs() < 1e-3 + 1e-2 * an.abs(), "organ {i}: {fd} vs {an}");
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut net = build_network(&NetworkConfig {
            n_stages: 2,
            features_per_stage: vec![2, 3],
            blocks_per_stage: vec![1, 1],
            patch_size: [4, 4, 4],
            ..Default::default()
        })
        .unwrap();
        let x = random_input([1, 4, 4, 4, 4], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lesion: Vec<u16> = (0..64).map(|_| rng.gen_bool(0.3) as u16).collect();
        let organ: Vec<u16> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let w = LossWeights::default();
        let loss_of = |net: &SegNet| {
            dice_ce_loss(&net.forward(&x), &lesion, Some(&organ), &w).unwrap().terms.total
        };
        zero_grads(&mut net);
        let out = net.forward_train(&x);
        let l = dice_ce_loss(&out, &lesion, Some(&organ), &w).unwrap();
        net.backward(&l.grad_lesion, l.grad_organ.as_ref());
        let mut names = Vec::new();
        net.for_each_param(&mut |n, p| names.push((n.to_string(), p.len())));
        for (name, len) in names {
            let i = rng.gen_range(0..len);
            let mut an = 0.0;
            net.for_each_param(&mut |n, p| {
                if n == name {
                    an = p.grad[i] as f64
                }
            });
            let fd = |h: f32| {
                nudge(&mut net, &name, i, h);
                let fp = loss_of(&net);
                nudge(&mut net, &name, i, -2.0 * h);
                let fm = loss_of(&net);
                nudge(&mut net, &name, i, h);
                (fp - fm) / (2.0 * h as f64)
            };
            assert_fd(fd, an, 5e-2, &format!("{name}[{i}]"));
        }
    }

    #[test]
    fn gradient_descent_decreases_loss_on_fixed_batch() {
        let mut net = build_network(&tiny_cfg()).unwrap();
        let x = random_input([2, 4, 8, 8, 8], 10);
        let lesion: Vec<u16> = (0..1024).map(|i| ((i % 512) < 100) as u16).collect();
        let organ: Vec<u16> = (0..1024).map(|i| ((i % 512) / 128) as u16).collect();
        let opt = Sgd { lr: 0.01, momentum: 0.0, nesterov: false, weight_decay: 0.0 };
        let w = LossWeights::default();
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            zero_grads(&mut net);
            let out = net.forward_train(&x);
            let l = dice_ce_loss(&out, &lesion, Some(&organ), &w).unwrap();
            assert!(l.terms.total < prev, "step {step}: {} !< {prev}", l.terms.total);
            prev = l.terms.total;
            net.backward(&l.grad_lesion, l.grad_organ.as_ref());
            opt.step(&mut net);
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.safetensors");
        let net = build_network(&NetworkConfig { seed: 4, ..tiny_cfg() }).unwrap();
        net.save(&path).unwrap();
        let back = SegNet::load(&path).unwrap();
        let x = random_input([1, 4, 8, 8, 8], 11);
        let (a, b) = (net.forward(&x), back.forward(&x));
        assert_eq!(a.lesion_logits, b.lesion_logits);
        assert_eq!(a.organ_logits, b.organ_logits);
        assert_eq!(back.config(), net.config());

        std::fs::write(&path, b"\x08\x00\x00\x00\x00\x00\x00\x00{broken}").unwrap();
        assert!(matches!(SegNet::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn expansion_copies_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let src = Array5::from_shape_fn((3, 1, 3, 3, 3), |_| rng.gen_range(-1.0f32..1.0));
        let e = expand_pretrained_channels(src.view()).unwrap();
        assert_eq!(e.shape(), &[3, 4, 3, 3, 3]);
        assert_eq!(e.index_axis(Axis(1), 0), src.index_axis(Axis(1), 0));
        assert_eq!(e.index_axis(Axis(1), 1), src.index_axis(Axis(1), 0));
        assert!(e.index_axis(Axis(1), 2).iter().all(|&v| v == 0.0));
        assert!(e.index_axis(Axis(1), 3).iter().all(|&v| v == 0.0));
        let bad = Array5::<f32>::zeros((3, 2, 3, 3, 3));
        assert!(expand_pretrained_channels(bad.view()).is_err());
    }

    #[test]
    fn single_channel_checkpoint_is_expanded_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.safetensors");
        let src_cfg = NetworkConfig { in_channels: 1, seed: 5, ..tiny_cfg() };
        let src = SegNet::pretraining_source(&src_cfg).unwrap();
        src.save(&path).unwrap();
        let net = SegNet::load_for(&path, &tiny_cfg()).unwrap();
        let w = net.stem_weight();
        assert_eq!(w.index_axis(Axis(1), 0), src.stem_weight().index_axis(Axis(1), 0));
        assert_eq!(w.index_axis(Axis(1), 1), src.stem_weight().index_axis(Axis(1), 0));

        let mut x = random_input([1, 4, 8, 8, 8], 13);
        let zeroed = {
            let mut z = x.clone();
            z.plane_mut(0, 2).fill(0.0);
            z.plane_mut(0, 3).fill(0.0);
            z
        };
        let g = random_input([1, 2, 8, 8, 8], 14);
        x.plane_mut(0, 2).copy_from_slice(g.plane(0, 0));
        x.plane_mut(0, 3).copy_from_slice(g.plane(0, 1));
        let a = net.forward(&x).lesion_logits;
        let b = net.forward(&zeroed).lesion_logits;
        let diff = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "{diff}");
    }
}
