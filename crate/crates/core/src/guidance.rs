//! Click guidance: simulated expert clicks, Gaussian guidance maps, and the
//! click-count curricula used during training.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Zip};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edt::squared_edt;
use crate::error::{Error, Result};
use crate::metrics::{connected_components, Connectivity};
use crate::volume::{zscore_array, ImageGrid, LabelVolume, Modality, ScalarVolume};

/// At most this many clicks of each kind per case.
pub const MAX_CLICKS_PER_KIND: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClickKind {
    #[serde(rename = "FG")]
    Foreground,
    #[serde(rename = "BG")]
    Background,
}

impl fmt::Display for ClickKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClickKind::Foreground => "FG",
            ClickKind::Background => "BG",
        })
    }
}

/// A single point annotation in voxel coordinates `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    #[serde(rename = "pos")]
    pub position: [usize; 3],
    pub kind: ClickKind,
    /// Presentation order within its kind, starting at 0.
    pub ordinal: usize,
}

/// Ordered clicks on one grid.
///
/// Within each kind, ordinals are `0, 1, 2, ...` in list order, so removing
/// the last click (undo) or keeping the first `k` keeps them contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickList {
    clicks: Vec<Click>,
    grid: ImageGrid,
}

impl ClickList {
    pub fn new(grid: ImageGrid) -> Self {
        ClickList {
            clicks: Vec::new(),
            grid,
        }
    }

    pub fn from_clicks(grid: ImageGrid, clicks: Vec<Click>) -> Result<Self> {
        let mut list = ClickList::new(grid);
        for c in clicks {
            list.check_position(c.position)?;
            let expected = list.count(c.kind);
            if c.ordinal != expected {
                return Err(Error::InvalidArgument(format!(
                    "{} click ordinals must be contiguous from 0 in list order; expected {expected}, got {}",
                    c.kind, c.ordinal
                )));
            }
            if expected >= MAX_CLICKS_PER_KIND {
                return Err(Error::ClickLimit(format!(
                    "at most {MAX_CLICKS_PER_KIND} {} clicks",
                    c.kind
                )));
            }
            list.clicks.push(c);
        }
        Ok(list)
    }

    /// Parses the JSON list form `[{"pos":[z,y,x],"kind":"FG","ordinal":0}, ...]`.
    pub fn from_json(text: &str, grid: ImageGrid) -> Result<Self> {
        let clicks: Vec<Click> = serde_json::from_str(text)?;
        Self::from_clicks(grid, clicks)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.clicks).expect("clicks always serialize")
    }

    fn check_position(&self, pos: [usize; 3]) -> Result<()> {
        if pos.iter().zip(self.grid.shape.iter()).any(|(&p, &s)| p >= s) {
            return Err(Error::OutOfBounds(format!(
                "click {pos:?} outside grid {:?}",
                self.grid.shape
            )));
        }
        Ok(())
    }

    /// Appends a click with the next ordinal of its kind.
    pub fn push(&mut self, kind: ClickKind, position: [usize; 3]) -> Result<Click> {
        self.check_position(position)?;
        let ordinal = self.count(kind);
        if ordinal >= MAX_CLICKS_PER_KIND {
            return Err(Error::ClickLimit(format!(
                "at most {MAX_CLICKS_PER_KIND} {kind} clicks"
            )));
        }
        let c = Click {
            position,
            kind,
            ordinal,
        };
        self.clicks.push(c);
        Ok(c)
    }

    pub fn pop_last(&mut self) -> Option<Click> {
        self.clicks.pop()
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn count(&self, kind: ClickKind) -> usize {
        self.clicks.iter().filter(|c| c.kind == kind).count()
    }

    pub fn of_kind(&self, kind: ClickKind) -> impl Iterator<Item = &Click> {
        self.clicks.iter().filter(move |c| c.kind == kind)
    }
}

/// Keeps the first `k` clicks of each kind, preserving order.
pub fn take_first_k(clicks: &ClickList, k: usize) -> Result<ClickList> {
    if k > MAX_CLICKS_PER_KIND {
        return Err(Error::InvalidArgument(format!(
            "k must be in 0..={MAX_CLICKS_PER_KIND}, got {k}"
        )));
    }
    Ok(ClickList {
        clicks: clicks.clicks.iter().filter(|c| c.ordinal < k).copied().collect(),
        grid: clicks.grid,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Gaussian standard deviation in millimetres.
    pub sigma_mm: f64,
    /// Maps are zero beyond this many sigmas from a click.
    pub truncation_radius_sigmas: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            sigma_mm: 4.0,
            truncation_radius_sigmas: 3.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_mm > 0.0) || !self.sigma_mm.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma_mm must be > 0, got {}", self.sigma_mm)));
        }
        if !(self.truncation_radius_sigmas >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "truncation_radius_sigmas must be >= 1, got {}",
                self.truncation_radius_sigmas
            )));
        }
        Ok(())
    }

    pub fn support_radius_mm(&self) -> f64 {
        self.sigma_mm * self.truncation_radius_sigmas
    }
}

/// Visits every voxel within `radius_mm` of `center`, passing the squared
/// physical distance.
fn for_each_in_ball(
    grid: &ImageGrid,
    center: [usize; 3],
    radius_mm: f64,
    mut f: impl FnMut([usize; 3], f64),
) {
    let r2 = radius_mm * radius_mm;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let reach = (radius_mm / grid.spacing[a]).floor() as usize;
        lo[a] = center[a].saturating_sub(reach);
        hi[a] = (center[a] + reach).min(grid.shape[a] - 1);
    }
    for z in lo[0]..=hi[0] {
        let dz = (z as f64 - center[0] as f64) * grid.spacing[0];
        for y in lo[1]..=hi[1] {
            let dy = (y as f64 - center[1] as f64) * grid.spacing[1];
            for x in lo[2]..=hi[2] {
                let dx = (x as f64 - center[2] as f64) * grid.spacing[2];
                let d2 = dz * dz + dy * dy + dx * dx;
                if d2 <= r2 {
                    f([z, y, x], d2);
                }
            }
        }
    }
}

/// Gaussian guidance map for the clicks of one kind: `exp(-d²/2σ²)` in
/// physical mm, peak 1 at each click, zero beyond the truncation radius,
/// overlapping clicks combined by voxelwise maximum.
pub fn render_clicks(clicks: &ClickList, kind: ClickKind, cfg: &GuidanceConfig) -> Result<ScalarVolume> {
    Ok(ScalarVolume::new(
        *clicks.grid(),
        render_array(clicks, kind, cfg)?,
        Modality::Guidance,
    )?)
}

fn render_array(clicks: &ClickList, kind: ClickKind, cfg: &GuidanceConfig) -> Result<Array3<f32>> {
    cfg.validate()?;
    let grid = clicks.grid();
    let mut map = Array3::<f32>::zeros(grid.shape);
    let inv = 1.0 / (2.0 * cfg.sigma_mm * cfg.sigma_mm);
    for c in clicks.of_kind(kind) {
        clicks.check_position(c.position)?;
        for_each_in_ball(grid, c.position, cfg.support_radius_mm(), |p, d2| {
            let v = (-d2 * inv).exp() as f32;
            let cell = &mut map[p];
            if v > *cell {
                *cell = v;
            }
        });
    }
    Ok(map)
}

/// Raw `(FG, BG)` guidance maps.
pub fn render_guidance_pair(clicks: &ClickList, cfg: &GuidanceConfig) -> Result<(Array3<f32>, Array3<f32>)> {
    Ok((
        render_array(clicks, ClickKind::Foreground, cfg)?,
        render_array(clicks, ClickKind::Background, cfg)?,
    ))
}

/// Guidance maps as network channels: rendered, then z-scored per volume.
pub fn guidance_channels(clicks: &ClickList, cfg: &GuidanceConfig) -> Result<(ScalarVolume, ScalarVolume)> {
    let (fg, bg) = render_guidance_pair(clicks, cfg)?;
    let g = *clicks.grid();
    Ok((
        ScalarVolume::new(g, zscore_array(&fg), Modality::Normalized)?,
        ScalarVolume::new(g, zscore_array(&bg), Modality::Normalized)?,
    ))
}

/// Output of the click simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedClicks {
    pub clicks: ClickList,
    /// Fewer foreground clicks than requested could be placed.
    pub fg_shortfall: bool,
    pub bg_shortfall: bool,
}

/// Background clicks without a prediction are placed in this shell (mm) around lesions.
pub const BG_SHELL_MM: (f64, f64) = (5.0, 15.0);

/// Deterministic expert-click simulator.
///
/// Foreground clicks target the false-negative region (ground truth minus
/// prediction; the whole ground truth without a prediction), background
/// clicks the false-positive region (or, without one, a 5–15 mm shell around
/// the lesions). Each click lands on the voxel with maximal distance-to-edge
/// inside the largest 26-connected component of its target region after
/// removing the Gaussian support of earlier clicks of the same kind; ties go
/// to the lowest `(z, y, x)` index. When the target region is exhausted the
/// simulator falls back to the ground-truth interior (FG) or the shell (BG),
/// shrinking the exclusion radius by halves so clicks stay distinct.
///
/// The procedure is deterministic; `seed` is accepted for interface
/// compatibility with randomized simulators and is not consumed.
pub fn simulate_clicks(
    gt: &LabelVolume,
    prediction: Option<&LabelVolume>,
    n_fg: usize,
    n_bg: usize,
    cfg: &GuidanceConfig,
    _seed: u64,
) -> Result<SimulatedClicks> {
    cfg.validate()?;
    if n_fg > MAX_CLICKS_PER_KIND || n_bg > MAX_CLICKS_PER_KIND {
        return Err(Error::InvalidArgument(format!(
            "click counts must be <= {MAX_CLICKS_PER_KIND}, got {n_fg}/{n_bg}"
        )));
    }
    let grid = *gt.grid();
    let fg = gt.mask();
    let pred = match prediction {
        Some(p) => {
            grid.ensure_same(p.grid(), "prediction vs ground truth")?;
            Some(p.mask())
        }
        None => None,
    };

    let fg_error = match &pred {
        Some(p) => Zip::from(&fg).and(p).map_collect(|&g, &p| g && !p),
        None => fg.clone(),
    };
    let bg_error = match &pred {
        Some(p) => Zip::from(&fg).and(p).map_collect(|&g, &p| p && !g),
        None => Array3::from_elem(grid.shape, false),
    };
    let shell = background_shell(&fg, &grid);

    let radius = cfg.support_radius_mm();
    let fg_clicks = place_clicks(&grid, &fg_error, &fg, n_fg, radius);
    let bg_clicks = place_clicks(&grid, &bg_error, &shell, n_bg, radius);

    let mut list = ClickList::new(grid);
    for i in 0..fg_clicks.len().max(bg_clicks.len()) {
        if let Some(p) = fg_clicks.get(i) {
            list.push(ClickKind::Foreground, *p)?;
        }
        if let Some(p) = bg_clicks.get(i) {
            list.push(ClickKind::Background, *p)?;
        }
    }
    let fg_shortfall = fg_clicks.len() < n_fg;
    let bg_shortfall = bg_clicks.len() < n_bg;
    if fg_shortfall || bg_shortfall {
        log::debug!(
            "click simulation placed {}/{} FG and {}/{} BG clicks",
            fg_clicks.len(),
            n_fg,
            bg_clicks.len(),
            n_bg
        );
    }
    Ok(SimulatedClicks {
        clicks: list,
        fg_shortfall,
        bg_shortfall,
    })
}

fn background_shell(fg: &Array3<bool>, grid: &ImageGrid) -> Array3<bool> {
    // distance from each background voxel to the nearest lesion voxel
    let not_fg = fg.mapv(|v| !v);
    let d2 = squared_edt(&not_fg, grid.spacing);
    let (lo, hi) = (BG_SHELL_MM.0 * BG_SHELL_MM.0, BG_SHELL_MM.1 * BG_SHELL_MM.1);
    Zip::from(&not_fg)
        .and(&d2)
        .map_collect(|&bg, &d| bg && d >= lo && d <= hi)
}

fn place_clicks(
    grid: &ImageGrid,
    primary: &Array3<bool>,
    fallback: &Array3<bool>,
    n: usize,
    support_radius: f64,
) -> Vec<[usize; 3]> {
    let min_spacing = grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut placed: Vec<[usize; 3]> = Vec::with_capacity(n);
    'outer: while placed.len() < n {
        let mut r = support_radius;
        loop {
            for source in [primary, fallback] {
                let cand = exclude_balls(grid, source, &placed, r);
                if let Some(p) = edt_peak_of_largest_component(&cand, grid) {
                    placed.push(p);
                    continue 'outer;
                }
            }
            if r == 0.0 {
                break 'outer;
            }
            r /= 2.0;
            if r < min_spacing / 2.0 {
                r = 0.0;
            }
        }
    }
    placed
}

fn exclude_balls(grid: &ImageGrid, source: &Array3<bool>, centers: &[[usize; 3]], r: f64) -> Array3<bool> {
    let mut out = source.clone();
    for &c in centers {
        out[c] = false;
        if r > 0.0 {
            for_each_in_ball(grid, c, r, |p, _| out[p] = false);
        }
    }
    out
}

fn edt_peak_of_largest_component(region: &Array3<bool>, grid: &ImageGrid) -> Option<[usize; 3]> {
    let comps = connected_components(region.view(), Connectivity::TwentySix);
    let largest = comps.largest()? as u32 + 1;
    let component = comps.mask_of(largest);
    let d2 = squared_edt(&component, grid.spacing);
    let mut best: Option<([usize; 3], f64)> = None;
    for ((z, y, x), &inside) in component.indexed_iter() {
        if !inside {
            continue;
        }
        let d = d2[[z, y, x]];
        // strict comparison in scan order keeps the lexicographically lowest index on ties
        if best.map_or(true, |(_, b)| d > b) {
            best = Some(([z, y, x], d));
        }
    }
    best.map(|(p, _)| p)
}

/// Categorical distribution over click counts `k = 0..=10`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    pub name: String,
    pub probs: [f64; MAX_CLICKS_PER_KIND + 1],
}

/// Named training curricula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CurriculumPreset {
    /// Always all ten clicks.
    Full,
    /// Skewed to few clicks, for second-stage fine-tuning.
    V1Sparse,
    /// Mass on both zero and dense guidance.
    V4Balanced,
}

impl FromStr for CurriculumPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FULL" => Ok(CurriculumPreset::Full),
            "V1_SPARSE" => Ok(CurriculumPreset::V1Sparse),
            "V4_BALANCED" => Ok(CurriculumPreset::V4Balanced),
            other => Err(Error::UnknownName(format!("curriculum preset {other:?}"))),
        }
    }
}

pub const V4_BALANCED_PROBS: [f64; 11] =
    [0.10, 0.10, 0.10, 0.08, 0.04, 0.04, 0.04, 0.04, 0.08, 0.08, 0.30];
pub const V1_SPARSE_PROBS: [f64; 11] =
    [0.40, 0.20, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.00];

impl SamplingDistribution {
    pub fn new(name: impl Into<String>, probs: [f64; MAX_CLICKS_PER_KIND + 1]) -> Result<Self> {
        let d = SamplingDistribution {
            name: name.into(),
            probs,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "{}: probabilities must be finite and >= 0",
                self.name
            )));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "{}: probabilities sum to {sum}, expected 1",
                self.name
            )));
        }
        Ok(())
    }

    pub fn preset(preset: CurriculumPreset) -> Self {
        let (name, probs) = match preset {
            CurriculumPreset::Full => {
                let mut p = [0.0; 11];
                p[MAX_CLICKS_PER_KIND] = 1.0;
                ("FULL", p)
            }
            CurriculumPreset::V1Sparse => ("V1_SPARSE", V1_SPARSE_PROBS),
            CurriculumPreset::V4Balanced => ("V4_BALANCED", V4_BALANCED_PROBS),
        };
        SamplingDistribution {
            name: name.into(),
            probs,
        }
    }

    /// Looks up a preset by its name (`FULL`, `V1_SPARSE`, `V4_BALANCED`).
    pub fn preset_named(name: &str) -> Result<Self> {
        Ok(Self::preset(name.parse()?))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        WeightedIndex::new(self.probs)
            .expect("validated distribution has positive mass")
            .sample(rng)
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn render_is_bounded_and_monotone(
            positions in prop::collection::vec((0usize..10, 0usize..10, 0usize..10), 0..5),
            sigma in 1.0f64..6.0,
        ) {
            let g = ImageGrid::with_shape_spacing([10, 10, 10], [2.0, 1.5, 1.0]).unwrap();
            let cfg = GuidanceConfig { sigma_mm: sigma, truncation_radius_sigmas: 3.0 };
            let mut clicks = ClickList::new(g);
            for (z, y, x) in &positions {
                clicks.push(ClickKind::Foreground, [*z, *y, *x]).unwrap();
            }
            let m = render_clicks(&clicks, ClickKind::Foreground, &cfg).unwrap();
            for c in clicks.clicks() {
                prop_assert_eq!(m.values()[c.position], 1.0);
            }
            let mut samples: Vec<(f64, f32)> = Vec::new();
            for ((z, y, x), &v) in m.values().indexed_iter() {
                prop_assert!((0.0..=1.0).contains(&v));
                let d = clicks.clicks().iter().map(|c| {
                    let dz = (z as f64 - c.position[0] as f64) * 2.0;
                    let dy = (y as f64 - c.position[1] as f64) * 1.5;
                    let dx = x as f64 - c.position[2] as f64;
                    (dz * dz + dy * dy + dx * dx).sqrt()
                }).fold(f64::INFINITY, f64::min);
                samples.push((d, v));
            }
            samples.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in samples.windows(2) {
                if w[1].0 > w[0].0 + 1e-9 {
                    prop_assert!(w[1].1 <= w[0].1 + 1e-6);
                }
            }
            let none = take_first_k(&clicks, 0).unwrap();
            prop_assert!(render_clicks(&none, ClickKind::Foreground, &cfg).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }
}
