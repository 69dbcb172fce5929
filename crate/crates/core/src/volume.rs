//! Volume data model: voxel geometry, scalar and label volumes, intensity
//! normalization, resampling and 4-channel network input assembly.
//!
//! All arrays are stored in `(z, y, x)` order with `z` the cranio-caudal axis.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel geometry shared by every volume of a case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    /// Voxel counts along `(z, y, x)`.
    pub shape: [usize; 3],
    /// Millimetres per voxel along `(z, y, x)`.
    pub spacing: [f64; 3],
    /// Physical position of voxel `(0, 0, 0)` in millimetres.
    pub origin: [f64; 3],
}

impl ImageGrid {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = ImageGrid {
            shape,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with unit origin at zero.
    pub fn with_shape_spacing(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(shape, spacing, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidGrid(format!(
                "shape entries must be >= 1, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing entries must be positive and finite, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, idx: [i64; 3]) -> bool {
        idx.iter()
            .zip(self.shape.iter())
            .all(|(&i, &s)| i >= 0 && (i as usize) < s)
    }

    /// Physical position (mm) of a voxel index.
    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + idx[0] * self.spacing[0],
            self.origin[1] + idx[1] * self.spacing[1],
            self.origin[2] + idx[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a physical position (mm).
    pub fn world_to_voxel(&self, pos: [f64; 3]) -> [f64; 3] {
        [
            (pos[0] - self.origin[0]) / self.spacing[0],
            (pos[1] - self.origin[1]) / self.spacing[1],
            (pos[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Grid covering the same physical extent at a new spacing.
    pub fn respaced(&self, spacing: [f64; 3]) -> Result<ImageGrid> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "target spacing must be positive, got {spacing:?}"
            )));
        }
        let mut shape = [0usize; 3];
        for a in 0..3 {
            let extent = self.shape[a] as f64 * self.spacing[a];
            shape[a] = ((extent / spacing[a]).round() as usize).max(1);
        }
        ImageGrid::new(shape, spacing, self.origin)
    }

    /// True when two grids describe the same voxel lattice.
    pub fn same_lattice(&self, other: &ImageGrid) -> bool {
        const TOL: f64 = 1e-6;
        self.shape == other.shape
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= TOL * a.abs().max(1.0))
            && self
                .origin
                .iter()
                .zip(other.origin.iter())
                .all(|(a, b)| (a - b).abs() <= TOL * a.abs().max(1.0))
    }

    pub(crate) fn ensure_same(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.same_lattice(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.shape, self.spacing, other.shape, other.spacing
            )))
        }
    }
}

/// Intensity semantics of a scalar volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    CtHu,
    PetSuv,
    Guidance,
    Normalized,
}

/// PET radiotracer of a study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tracer {
    #[serde(rename = "FDG")]
    Fdg,
    #[serde(rename = "PSMA")]
    Psma,
}

impl Tracer {
    pub const ALL: [Tracer; 2] = [Tracer::Fdg, Tracer::Psma];

    pub fn as_str(&self) -> &'static str {
        match self {
            Tracer::Fdg => "FDG",
            Tracer::Psma => "PSMA",
        }
    }
}

impl fmt::Display for Tracer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Tracer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FDG" => Ok(Tracer::Fdg),
            "PSMA" => Ok(Tracer::Psma),
            other => Err(Error::UnknownName(format!("tracer {other:?}"))),
        }
    }
}

/// A real-valued volume (CT in HU, PET in SUV, guidance, or normalized).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    grid: ImageGrid,
    values: Array3<f32>,
    modality: Modality,
}

impl ScalarVolume {
    pub fn new(grid: ImageGrid, values: Array3<f32>, modality: Modality) -> Result<Self> {
        grid.validate()?;
        if values.shape() != grid.shape {
            return Err(Error::GridMismatch(format!(
                "values shape {:?} != grid shape {:?}",
                values.shape(),
                grid.shape
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar volume".into()));
        }
        match modality {
            Modality::PetSuv if values.iter().any(|&v| v < 0.0) => {
                return Err(Error::InvalidVolume("PET SUV values must be >= 0".into()))
            }
            Modality::Guidance if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) => {
                return Err(Error::InvalidVolume(
                    "guidance values must lie in [0, 1]".into(),
                ))
            }
            _ => {}
        }
        Ok(ScalarVolume {
            grid,
            values,
            modality,
        })
    }

    pub fn zeros(grid: ImageGrid, modality: Modality) -> Self {
        ScalarVolume {
            grid,
            values: Array3::zeros(grid.shape),
            modality,
        }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.values.view()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    /// Same values, different modality tag (validated).
    pub fn with_modality(self, modality: Modality) -> Result<Self> {
        ScalarVolume::new(self.grid, self.values, modality)
    }
}

/// Schema used by every binary lesion mask.
pub fn lesion_schema() -> BTreeMap<u16, String> {
    BTreeMap::from([(0, "background".to_string()), (1, "lesion".to_string())])
}

/// An integer label volume with a label-id to name schema.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    grid: ImageGrid,
    labels: Array3<u16>,
    schema: BTreeMap<u16, String>,
}

impl LabelVolume {
    pub fn new(grid: ImageGrid, labels: Array3<u16>, schema: BTreeMap<u16, String>) -> Result<Self> {
        grid.validate()?;
        if labels.shape() != grid.shape {
            return Err(Error::GridMismatch(format!(
                "labels shape {:?} != grid shape {:?}",
                labels.shape(),
                grid.shape
            )));
        }
        match schema.get(&0) {
            Some(name) if name == "background" => {}
            _ => {
                return Err(Error::InvalidVolume(
                    "label 0 must be named \"background\"".into(),
                ))
            }
        }
        let mut seen = vec![false; 1 << 16];
        for &l in labels.iter() {
            seen[l as usize] = true;
        }
        for (l, present) in seen.iter().enumerate() {
            if *present && !schema.contains_key(&(l as u16)) {
                return Err(Error::InvalidVolume(format!("label {l} is not in the schema")));
            }
        }
        Ok(LabelVolume {
            grid,
            labels,
            schema,
        })
    }

    /// Binary lesion mask (`true` → label 1).
    pub fn from_mask(grid: ImageGrid, mask: &Array3<bool>) -> Result<Self> {
        LabelVolume::new(grid, mask.mapv(u16::from), lesion_schema())
    }

    pub fn empty(grid: ImageGrid, schema: BTreeMap<u16, String>) -> Result<Self> {
        LabelVolume::new(grid, Array3::zeros(grid.shape), schema)
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn labels(&self) -> &Array3<u16> {
        &self.labels
    }

    pub fn schema(&self) -> &BTreeMap<u16, String> {
        &self.schema
    }

    /// Foreground mask (any non-zero label).
    pub fn mask(&self) -> Array3<bool> {
        self.labels.mapv(|l| l > 0)
    }

    pub fn count_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn into_labels(self) -> Array3<u16> {
        self.labels
    }
}

/// Fixed 4-channel network input, in this order.
pub const CHANNEL_NAMES: [&str; 4] = ["CT", "PET", "FG_CLICKS", "BG_CLICKS"];

#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelVolume {
    grid: ImageGrid,
    channels: [Array3<f32>; 4],
}

impl MultiChannelVolume {
    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn channel_names(&self) -> [&'static str; 4] {
        CHANNEL_NAMES
    }

    pub fn channel(&self, i: usize) -> &Array3<f32> {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Array3<f32>; 4] {
        &self.channels
    }

    pub(crate) fn from_arrays(grid: ImageGrid, channels: [Array3<f32>; 4]) -> Self {
        debug_assert!(channels.iter().all(|c| c.shape() == grid.shape));
        MultiChannelVolume { grid, channels }
    }
}

/// Assembles the network input in `[CT, PET, FG_CLICKS, BG_CLICKS]` order.
pub fn stack_channels(
    ct_norm: &ScalarVolume,
    pet_norm: &ScalarVolume,
    fg_map: &ScalarVolume,
    bg_map: &ScalarVolume,
) -> Result<MultiChannelVolume> {
    let grid = *ct_norm.grid();
    for (name, v) in [("PET", pet_norm), ("FG", fg_map), ("BG", bg_map)] {
        grid.ensure_same(v.grid(), &format!("stack_channels {name}"))?;
    }
    Ok(MultiChannelVolume {
        grid,
        channels: [
            ct_norm.values().clone(),
            pet_norm.values().clone(),
            fg_map.values().clone(),
            bg_map.values().clone(),
        ],
    })
}

/// CT intensity statistics pooled over a training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub ct_clip_low: f64,
    pub ct_clip_high: f64,
    pub ct_mean: f64,
    pub ct_std: f64,
}

/// CT voxels above this value (HU) count as body foreground.
pub const BODY_THRESHOLD_HU: f32 = -500.0;

/// Linear-interpolated percentile of a sorted slice (`pct` in `[0, 100]`).
pub fn percentile_sorted(sorted: &[f32], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

pub fn compute_fingerprint(
    ct_volumes: &[&ScalarVolume],
    low_pct: f64,
    high_pct: f64,
) -> Result<DatasetFingerprint> {
    if ct_volumes.is_empty() {
        return Err(Error::EmptyInput("no CT volumes for fingerprint".into()));
    }
    if !(0.0..=100.0).contains(&low_pct) || !(0.0..=100.0).contains(&high_pct) || low_pct > high_pct
    {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= low <= high <= 100, got {low_pct}/{high_pct}"
        )));
    }
    let mut pooled: Vec<f32> = ct_volumes
        .iter()
        .flat_map(|v| v.values().iter().copied())
        .filter(|&v| v > BODY_THRESHOLD_HU)
        .collect();
    if pooled.is_empty() {
        return Err(Error::EmptyInput(
            "no foreground voxels (CT > -500 HU) in fingerprint input".into(),
        ));
    }
    pooled.sort_by(f32::total_cmp);
    let lo = percentile_sorted(&pooled, low_pct);
    let hi = percentile_sorted(&pooled, high_pct);
    let n = pooled.len() as f64;
    let clipped = pooled.iter().map(|&v| (v as f64).clamp(lo, hi));
    let mean = clipped.clone().sum::<f64>() / n;
    let var = clipped.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::DegenerateStd(format!(
            "pooled clipped CT foreground has std {std}"
        )));
    }
    Ok(DatasetFingerprint {
        ct_clip_low: lo,
        ct_clip_high: hi,
        ct_mean: mean,
        ct_std: std,
    })
}

/// Clip to the fingerprint percentiles, then standardize.
pub fn normalize_ct(vol: &ScalarVolume, fp: &DatasetFingerprint) -> Result<ScalarVolume> {
    if vol.modality() != Modality::CtHu {
        return Err(Error::InvalidArgument(format!(
            "normalize_ct expects CT_HU, got {:?}",
            vol.modality()
        )));
    }
    if !(fp.ct_std > 0.0) {
        return Err(Error::DegenerateStd(format!("fingerprint std {}", fp.ct_std)));
    }
    let values = vol
        .values()
        .mapv(|v| (((v as f64).clamp(fp.ct_clip_low, fp.ct_clip_high) - fp.ct_mean) / fp.ct_std) as f32);
    Ok(ScalarVolume {
        grid: *vol.grid(),
        values,
        modality: Modality::Normalized,
    })
}

/// Per-volume z-score over all voxels; constant volumes map to all zeros.
pub fn zscore_normalize(vol: &ScalarVolume) -> ScalarVolume {
    ScalarVolume {
        grid: *vol.grid(),
        values: zscore_array(vol.values()),
        modality: Modality::Normalized,
    }
}

pub(crate) fn zscore_array(values: &Array3<f32>) -> Array3<f32> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Array3::zeros(values.raw_dim());
    }
    values.mapv(|v| ((v as f64 - mean) / std) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Resampling onto another voxel lattice through physical coordinates.
/// Positions outside the source are clamped to its border voxels.
pub trait Resample: Sized {
    fn resample_to_grid(&self, target: &ImageGrid, mode: Interpolation) -> Result<Self>;
}

fn source_index(target: &ImageGrid, source: &ImageGrid, idx: [usize; 3]) -> [f64; 3] {
    let world = target.voxel_to_world([idx[0] as f64, idx[1] as f64, idx[2] as f64]);
    let mut c = source.world_to_voxel(world);
    for a in 0..3 {
        c[a] = c[a].clamp(0.0, (source.shape[a] - 1) as f64);
    }
    c
}

impl Resample for ScalarVolume {
    fn resample_to_grid(&self, target: &ImageGrid, mode: Interpolation) -> Result<Self> {
        target.validate()?;
        if self.grid.same_lattice(target) {
            return Ok(self.clone());
        }
        let src = &self.values;
        let sg = self.grid;
        let values = Array3::from_shape_fn(target.shape, |(z, y, x)| {
            let c = source_index(target, &sg, [z, y, x]);
            match mode {
                Interpolation::Nearest => {
                    src[[c[0].round() as usize, c[1].round() as usize, c[2].round() as usize]]
                }
                Interpolation::Trilinear => trilinear(src, &sg, c),
            }
        });
        Ok(ScalarVolume {
            grid: *target,
            values,
            modality: self.modality,
        })
    }
}

fn trilinear(src: &Array3<f32>, grid: &ImageGrid, c: [f64; 3]) -> f32 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        lo[a] = c[a].floor() as usize;
        hi[a] = (lo[a] + 1).min(grid.shape[a] - 1);
        f[a] = c[a] - lo[a] as f64;
    }
    let at = |z: usize, y: usize, x: usize| src[[z, y, x]] as f64;
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    let c00 = lerp(at(lo[0], lo[1], lo[2]), at(lo[0], lo[1], hi[2]), f[2]);
    let c01 = lerp(at(lo[0], hi[1], lo[2]), at(lo[0], hi[1], hi[2]), f[2]);
    let c10 = lerp(at(hi[0], lo[1], lo[2]), at(hi[0], lo[1], hi[2]), f[2]);
    let c11 = lerp(at(hi[0], hi[1], lo[2]), at(hi[0], hi[1], hi[2]), f[2]);
    let c0 = lerp(c00, c01, f[1]);
    let c1 = lerp(c10, c11, f[1]);
    lerp(c0, c1, f[0]) as f32
}

impl Resample for LabelVolume {
    fn resample_to_grid(&self, target: &ImageGrid, mode: Interpolation) -> Result<Self> {
        target.validate()?;
        if mode != Interpolation::Nearest {
            return Err(Error::InvalidArgument(
                "label volumes can only be resampled with nearest-neighbour".into(),
            ));
        }
        if self.grid.same_lattice(target) {
            return Ok(self.clone());
        }
        let src = &self.labels;
        let sg = self.grid;
        let labels = Array3::from_shape_fn(target.shape, |(z, y, x)| {
            let c = source_index(target, &sg, [z, y, x]);
            src[[c[0].round() as usize, c[1].round() as usize, c[2].round() as usize]]
        });
        Ok(LabelVolume {
            grid: *target,
            labels,
            schema: self.schema.clone(),
        })
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn zscore_output_is_standardized(values in prop::collection::vec(-1000.0f32..1000.0, 27)) {
            let g = ImageGrid::with_shape_spacing([3, 3, 3], [1.0; 3]).unwrap();
            let arr = Array3::from_shape_vec(g.shape, values).unwrap();
            let spread = arr.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
                - arr.iter().cloned().fold(f32::INFINITY, f32::min);
            prop_assume!(spread > 1e-2);
            let v = ScalarVolume::new(g, arr, Modality::CtHu).unwrap();
            let z = zscore_normalize(&v);
            let n = z.values().len() as f64;
            let mean = z.values().iter().map(|&x| x as f64).sum::<f64>() / n;
            let std = (z.values().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((std - 1.0).abs() < 1e-5);
        }

        #[test]
        fn ct_clipping_is_idempotent(values in prop::collection::vec(-2000.0f32..3000.0, 8)) {
            let g = ImageGrid::with_shape_spacing([2, 2, 2], [1.0; 3]).unwrap();
            let v = ScalarVolume::new(g, Array3::from_shape_vec(g.shape, values).unwrap(), Modality::CtHu).unwrap();
            let fp = DatasetFingerprint { ct_clip_low: -100.0, ct_clip_high: 250.0, ct_mean: 0.0, ct_std: 1.0 };
            let once = normalize_ct(&v, &fp).unwrap();
            let twice = normalize_ct(&once.clone().with_modality(Modality::CtHu).unwrap(), &fp).unwrap();
            prop_assert_eq!(once.values(), twice.values());
        }
    }
}
