//! Tracer classification from coronal and sagittal PET maximum-intensity projections.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{assign_params, read_checkpoint, write_checkpoint};
use crate::nn::{join, zero_grads, Conv3d, ConvNormAct, Layer, LeakyRelu, Param, Parameterized, ResidualBlock, Sgd, Tensor};
use crate::volume::{ImageGrid, Modality, ScalarVolume, Tracer};

/// Classifier input size per view: rows (z) × columns.
pub const MIP_SIZE: [usize; 2] = [128, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MipAxis {
    /// Maximum over y; image is (z, x).
    Coronal,
    /// Maximum over x; image is (z, y).
    Sagittal,
}

pub fn compute_mip(pet: &ScalarVolume, axis: MipAxis) -> Array2<f32> {
    if pet.modality() != Modality::PetSuv {
        log::warn!("maximum-intensity projection of a {:?} volume", pet.modality());
    }
    let ax = match axis {
        MipAxis::Coronal => Axis(1),
        MipAxis::Sagittal => Axis(2),
    };
    pet.values().fold_axis(ax, f32::NEG_INFINITY, |&m, &v| m.max(v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MipPair {
    pub coronal: Array2<f32>,
    pub sagittal: Array2<f32>,
    pub source_grid: ImageGrid,
}

impl MipPair {
    pub fn from_pet(pet: &ScalarVolume) -> Self {
        MipPair {
            coronal: compute_mip(pet, MipAxis::Coronal),
            sagittal: compute_mip(pet, MipAxis::Sagittal),
            source_grid: *pet.grid(),
        }
    }
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear(img: &Array2<f32>, out: [usize; 2]) -> Array2<f32> {
    let (h, w) = img.dim();
    let map = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    Array2::from_shape_fn((out[0], out[1]), |(r, c)| {
        let (r0, r1, fr) = map(r, out[0], h);
        let (c0, c1, fc) = map(c, out[1], w);
        let top = img[[r0, c0]] * (1.0 - fc) + img[[r0, c1]] * fc;
        let bot = img[[r1, c0]] * (1.0 - fc) + img[[r1, c1]] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Min-max scaling to [0, 1] followed by resizing to [`MIP_SIZE`].
pub fn prepare_view(img: &Array2<f32>) -> Array2<f32> {
    let (lo, hi) = img.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let scaled = if hi > lo { img.mapv(|v| (v - lo) / (hi - lo)) } else { Array2::zeros(img.raw_dim()) };
    resize_bilinear(&scaled, MIP_SIZE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Encoder widths; each stage halves the resolution.
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub backbone_epochs: usize,
    pub head_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train encoders and perceptron together in one phase.
    pub joint: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            channels: vec![8, 16, 32],
            hidden: 16,
            backbone_epochs: 15,
            head_epochs: 40,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 0,
            joint: false,
        }
    }
}

impl ClassifierConfig {
    /// Length of one view's feature vector.
    pub fn feature_len(&self) -> usize {
        let n = self.channels.len() as u32;
        self.channels.last().copied().unwrap_or(0) * MIP_SIZE.iter().map(|&s| s.div_ceil(1 << n)).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::InvalidConfig("classifier widths must be positive".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("classifier batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Reshapes `[n, c, d, h, w]` to `[n, c·d·h·w, 1, 1, 1]`, keeping where uptake sits.
#[derive(Clone, Debug, Default)]
struct Flatten {
    cache: Option<[usize; 5]>,
}

impl Layer for Flatten {
    fn forward(&self, x: &Tensor) -> Tensor {
        Tensor::from_vec([x.batch(), x.sample_len(), 1, 1, 1], x.data.clone())
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.shape);
        self.forward(x)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let shape = self.cache.take().expect("flatten backward without forward_train");
        Tensor::from_vec(shape, g.data.clone())
    }

    fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

/// 2D residual encoder on one MIP view; the final map is flattened into the feature vector.
#[derive(Clone, Debug)]
struct ViewEncoder {
    stem: ConvNormAct,
    blocks: Vec<ResidualBlock>,
    pool: Flatten,
}

impl ViewEncoder {
    fn new(channels: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let (k, s) = ([1, 3, 3], [1, 2, 2]);
        let stem = ConvNormAct::new(1, channels[0], k, s, rng);
        let blocks = channels.windows(2).map(|w| ResidualBlock::new(w[0], w[1], k, s, rng)).collect();
        ViewEncoder { stem, blocks, pool: Flatten::default() }
    }
}

impl Layer for ViewEncoder {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = self.stem.forward(x);
        for b in &self.blocks {
            h = b.forward(&h);
        }
        self.pool.forward(&h)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut h = self.stem.forward_train(x);
        for b in &mut self.blocks {
            h = b.forward_train(&h);
        }
        self.pool.forward_train(&h)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut g = self.pool.backward(g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.stem.backward(&g)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Two-layer perceptron on `[n, c, 1, 1, 1]` features.
#[derive(Clone, Debug)]
struct Mlp {
    fc1: Conv3d,
    act: LeakyRelu,
    fc2: Conv3d,
}

impl Mlp {
    fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            fc1: Conv3d::new(input, hidden, [1, 1, 1], [1, 1, 1], rng),
            act: LeakyRelu::new(),
            fc2: Conv3d::new(hidden, 1, [1, 1, 1], [1, 1, 1], rng),
        }
    }
}

impl Layer for Mlp {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&self.act.forward(&self.fc1.forward(x)))
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.fc1.forward_train(x);
        let h = self.act.forward_train(&h);
        self.fc2.forward_train(&h)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.fc2.backward(g);
        let g = self.act.backward(&g);
        self.fc1.backward(&g)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracerPrediction {
    pub label: Tracer,
    /// Probability of FDG.
    pub confidence: f64,
}

/// Per-view encoders with per-view auxiliary heads (used while pretraining
/// each encoder) and a perceptron over the concatenated features.
#[derive(Clone, Debug)]
pub struct TracerClassifier {
    cfg: ClassifierConfig,
    coronal: ViewEncoder,
    sagittal: ViewEncoder,
    coronal_aux: Conv3d,
    sagittal_aux: Conv3d,
    mlp: Mlp,
    trained: bool,
}

const CHECKPOINT_KIND: &str = "tracer-classifier";

impl Parameterized for TracerClassifier {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.coronal.visit_params("coronal", f);
        self.sagittal.visit_params("sagittal", f);
        self.coronal_aux.visit_params("coronal_aux", f);
        self.sagittal_aux.visit_params("sagittal_aux", f);
        self.mlp.visit_params("mlp", f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.coronal.visit_params_mut("coronal", f);
        self.sagittal.visit_params_mut("sagittal", f);
        self.coronal_aux.visit_params_mut("coronal_aux", f);
        self.sagittal_aux.visit_params_mut("sagittal_aux", f);
        self.mlp.visit_params_mut("mlp", f);
    }
}

fn sigmoid(z: f32) -> f64 {
    1.0 / (1.0 + (-(z as f64)).exp())
}

fn target(t: Tracer) -> f32 {
    (t == Tracer::Fdg) as u8 as f32
}

/// Mean binary cross-entropy on logits `[n, 1, 1, 1, 1]` and its gradient.
fn bce_with_logits(logits: &Tensor, y: &[f32]) -> (f64, Tensor) {
    let n = y.len() as f64;
    let mut g = Tensor::zeros(logits.shape);
    let mut loss = 0.0;
    for (i, (&z, &t)) in logits.data.iter().zip(y).enumerate() {
        let z64 = z as f64;
        loss += z64.max(0.0) - z64 * t as f64 + (-z64.abs()).exp().ln_1p();
        g.data[i] = ((sigmoid(z) - t as f64) / n) as f32;
    }
    (loss / n, g)
}

fn stack_views(views: &[&Array2<f32>]) -> Tensor {
    let [h, w] = MIP_SIZE;
    let mut t = Tensor::zeros([views.len(), 1, 1, h, w]);
    for (i, v) in views.iter().enumerate() {
        t.plane_mut(i, 0).copy_from_slice(v.as_slice().expect("standard layout"));
    }
    t
}

/// A prepared training example.
#[derive(Clone, Debug)]
pub struct ClassifierSample {
    pub coronal: Array2<f32>,
    pub sagittal: Array2<f32>,
    pub label: Tracer,
}

impl ClassifierSample {
    pub fn new(mips: &MipPair, label: Tracer) -> Self {
        ClassifierSample {
            coronal: prepare_view(&mips.coronal),
            sagittal: prepare_view(&mips.sagittal),
            label,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub backbone_losses: Vec<f64>,
    pub head_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub held_out_accuracy: Option<f64>,
}

impl TracerClassifier {
    pub fn new(cfg: &ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let feat = cfg.feature_len();
        Ok(TracerClassifier {
            coronal: ViewEncoder::new(&cfg.channels, &mut rng),
            sagittal: ViewEncoder::new(&cfg.channels, &mut rng),
            coronal_aux: Conv3d::new(feat, 1, [1, 1, 1], [1, 1, 1], &mut rng),
            sagittal_aux: Conv3d::new(feat, 1, [1, 1, 1], [1, 1, 1], &mut rng),
            mlp: Mlp::new(2 * feat, cfg.hidden, &mut rng),
            cfg: cfg.clone(),
            trained: false,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn features(&self, cor: &Tensor, sag: &Tensor) -> Tensor {
        Tensor::concat_channels(&self.coronal.forward(cor), &self.sagittal.forward(sag))
    }

    fn logits(&self, samples: &[&ClassifierSample]) -> Tensor {
        let cor = stack_views(&samples.iter().map(|s| &s.coronal).collect::<Vec<_>>());
        let sag = stack_views(&samples.iter().map(|s| &s.sagittal).collect::<Vec<_>>());
        self.mlp.forward(&self.features(&cor, &sag))
    }

    pub fn predict_sample(&self, sample: &ClassifierSample) -> Result<TracerPrediction> {
        if !self.trained {
            return Err(Error::InvalidArgument("tracer classifier has not been trained".into()));
        }
        let z = self.logits(&[sample]).data[0];
        let confidence = sigmoid(z).clamp(0.0, 1.0);
        if !confidence.is_finite() {
            return Err(Error::NonFinite("classifier output".into()));
        }
        Ok(TracerPrediction {
            label: if confidence >= 0.5 { Tracer::Fdg } else { Tracer::Psma },
            confidence,
        })
    }

    pub fn classify_mips(&self, mips: &MipPair) -> Result<TracerPrediction> {
        // the label is a placeholder; only the views are used
        self.predict_sample(&ClassifierSample::new(mips, Tracer::Fdg))
    }

    pub fn classify(&self, pet: &ScalarVolume) -> Result<TracerPrediction> {
        self.classify_mips(&MipPair::from_pet(pet))
    }

    pub fn accuracy(&self, samples: &[ClassifierSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("no samples to score".into()));
        }
        let mut hits = 0;
        for s in samples {
            hits += (self.predict_sample(s)?.label == s.label) as usize;
        }
        Ok(hits as f64 / samples.len() as f64)
    }

    fn optimizer(&self) -> Sgd {
        Sgd {
            lr: self.cfg.lr as f32,
            momentum: self.cfg.momentum as f32,
            nesterov: true,
            weight_decay: self.cfg.weight_decay as f32,
        }
    }

    /// Phase one: each encoder learns the tracer alone through its auxiliary head.
    pub fn train_backbones(&mut self, data: &[ClassifierSample]) -> Result<Vec<f64>> {
        check_classes(data)?;
        let opt = self.optimizer();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_0001);
        let mut losses = Vec::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..self.cfg.backbone_epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let y: Vec<f32> = chunk.iter().map(|&i| target(data[i].label)).collect();
                for view in [MipAxis::Coronal, MipAxis::Sagittal] {
                    let imgs: Vec<&Array2<f32>> = chunk
                        .iter()
                        .map(|&i| match view {
                            MipAxis::Coronal => &data[i].coronal,
                            MipAxis::Sagittal => &data[i].sagittal,
                        })
                        .collect();
                    let x = stack_views(&imgs);
                    let (enc, aux) = match view {
                        MipAxis::Coronal => (&mut self.coronal, &mut self.coronal_aux),
                        MipAxis::Sagittal => (&mut self.sagittal, &mut self.sagittal_aux),
                    };
                    zero_grads(enc);
                    zero_grads(aux);
                    let f = enc.forward_train(&x);
                    let z = aux.forward_train(&f);
                    let (l, g) = bce_with_logits(&z, &y);
                    if !l.is_finite() {
                        return Err(Error::NonFinite("classifier backbone loss".into()));
                    }
                    let gf = aux.backward(&g);
                    enc.backward(&gf);
                    opt.step(enc);
                    opt.step(aux);
                    sum += l * chunk.len() as f64;
                }
            }
            losses.push(sum / (2 * data.len()) as f64);
        }
        Ok(losses)
    }

    /// Phase two: the perceptron learns on features from the frozen encoders.
    pub fn train_head(&mut self, data: &[ClassifierSample]) -> Result<Vec<f64>> {
        check_classes(data)?;
        let opt = self.optimizer();
        let feats: Vec<Tensor> = data
            .iter()
            .map(|s| self.features(&stack_views(&[&s.coronal]), &stack_views(&[&s.sagittal])))
            .collect();
        let c = feats[0].channels();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_0002);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::new();
        for _ in 0..self.cfg.head_epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let mut x = Tensor::zeros([chunk.len(), c, 1, 1, 1]);
                for (j, &i) in chunk.iter().enumerate() {
                    x.sample_mut(j).copy_from_slice(&feats[i].data);
                }
                let y: Vec<f32> = chunk.iter().map(|&i| target(data[i].label)).collect();
                zero_grads(&mut self.mlp);
                let z = self.mlp.forward_train(&x);
                let (l, g) = bce_with_logits(&z, &y);
                if !l.is_finite() {
                    return Err(Error::NonFinite("classifier head loss".into()));
                }
                self.mlp.backward(&g);
                opt.step(&mut self.mlp);
                sum += l * chunk.len() as f64;
            }
            losses.push(sum / data.len() as f64);
        }
        Ok(losses)
    }

    /// Single-phase alternative: encoders and perceptron trained together.
    pub fn train_joint(&mut self, data: &[ClassifierSample], epochs: usize) -> Result<Vec<f64>> {
        check_classes(data)?;
        let opt = self.optimizer();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_0003);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::new();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let cor = stack_views(&chunk.iter().map(|&i| &data[i].coronal).collect::<Vec<_>>());
                let sag = stack_views(&chunk.iter().map(|&i| &data[i].sagittal).collect::<Vec<_>>());
                let y: Vec<f32> = chunk.iter().map(|&i| target(data[i].label)).collect();
                zero_grads(self);
                let fc = self.coronal.forward_train(&cor);
                let fs = self.sagittal.forward_train(&sag);
                let z = self.mlp.forward_train(&Tensor::concat_channels(&fc, &fs));
                let (l, g) = bce_with_logits(&z, &y);
                if !l.is_finite() {
                    return Err(Error::NonFinite("classifier loss".into()));
                }
                let gf = self.mlp.backward(&g);
                let (gc, gs) = gf.split_channels(fc.channels());
                self.coronal.backward(&gc);
                self.sagittal.backward(&gs);
                opt.step(self);
                sum += l * chunk.len() as f64;
            }
            losses.push(sum / data.len() as f64);
        }
        Ok(losses)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(self, CHECKPOINT_KIND, serde_json::to_string(&self.cfg)?, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (tensors, cfg_json) = read_checkpoint(path.as_ref(), CHECKPOINT_KIND)?;
        let cfg: ClassifierConfig = serde_json::from_str(&cfg_json)?;
        let mut clf = TracerClassifier::new(&cfg)?;
        assign_params(&mut clf, &tensors)?;
        clf.trained = true;
        Ok(clf)
    }

    /// Snapshot of the encoder weights, for checking that they stay frozen.
    pub fn backbone_weights(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.coronal.visit_params("", &mut |_, p| out.extend_from_slice(&p.value));
        self.sagittal.visit_params("", &mut |_, p| out.extend_from_slice(&p.value));
        out
    }
}

fn check_classes(data: &[ClassifierSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput("classifier training set is empty".into()));
    }
    if Tracer::ALL.iter().any(|t| data.iter().all(|s| s.label != *t)) {
        return Err(Error::InvalidArgument("classifier training needs both tracers".into()));
    }
    Ok(())
}

/// Trains a classifier, two-phase unless `cfg.joint`, and scores it.
pub fn train_classifier(
    train: &[ClassifierSample],
    held_out: &[ClassifierSample],
    cfg: &ClassifierConfig,
) -> Result<(TracerClassifier, ClassifierReport)> {
    let mut clf = TracerClassifier::new(cfg)?;
    let mut report = ClassifierReport::default();
    if cfg.joint {
        report.head_losses = clf.train_joint(train, cfg.backbone_epochs + cfg.head_epochs)?;
    } else {
        report.backbone_losses = clf.train_backbones(train)?;
        report.head_losses = clf.train_head(train)?;
    }
    clf.trained = true;
    report.train_accuracy = clf.accuracy(train)?;
    if !held_out.is_empty() {
        report.held_out_accuracy = Some(clf.accuracy(held_out)?);
    }
    Ok((clf, report))
}
