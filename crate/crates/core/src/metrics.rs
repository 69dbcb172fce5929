//! Lesion segmentation metrics (Dice, false-positive and false-negative
//! volume), connected-component labelling, and the 0..=10 click sweep.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{simulate_clicks, take_first_k, ClickList, GuidanceConfig, MAX_CLICKS_PER_KIND};
use crate::io::CaseData;
use crate::util::derive_seed;
use crate::volume::{ImageGrid, LabelVolume};

/// Voxel adjacency used for component analysis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nonzero = (dz != 0) as u8 + (dy != 0) as u8 + (dx != 0) as u8;
                    let keep = match self {
                        Connectivity::Six => nonzero == 1,
                        Connectivity::Eighteen => nonzero == 1 || nonzero == 2,
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

/// Component labelling of a binary mask. Label 0 is background; labels
/// `1..=count` are assigned in order of each component's first voxel in
/// `(z, y, x)` scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub labels: Array3<u32>,
    /// `sizes[i]` is the voxel count of label `i + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Index (0-based) of the largest component, ties to the lowest label.
    pub fn largest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &s) in self.sizes.iter().enumerate() {
            if best.map_or(true, |b| s > self.sizes[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn mask_of(&self, label: u32) -> Array3<bool> {
        self.labels.mapv(|l| l == label)
    }

    pub fn to_label_volume(&self, grid: ImageGrid) -> Result<LabelVolume> {
        if self.count() > u16::MAX as usize {
            return Err(Error::InvalidVolume("too many components for a label volume".into()));
        }
        let mut schema = crate::volume::lesion_schema();
        schema.remove(&1);
        for i in 1..=self.count() {
            schema.insert(i as u16, format!("component_{i}"));
        }
        LabelVolume::new(grid, self.labels.mapv(|l| l as u16), schema)
    }
}

pub fn connected_components(mask: ArrayView3<'_, bool>, connectivity: Connectivity) -> Components {
    let shape = mask.shape();
    let dims = [shape[0] as i64, shape[1] as i64, shape[2] as i64];
    let offsets = connectivity.offsets();
    let mut labels = Array3::<u32>::zeros((shape[0], shape[1], shape[2]));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                if !mask[[z, y, x]] || labels[[z, y, x]] != 0 {
                    continue;
                }
                let label = sizes.len() as u32 + 1;
                let mut size = 0usize;
                labels[[z, y, x]] = label;
                queue.push_back([z as i64, y as i64, x as i64]);
                while let Some(p) = queue.pop_front() {
                    size += 1;
                    for o in &offsets {
                        let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a]) {
                            continue;
                        }
                        let qi = [q[0] as usize, q[1] as usize, q[2] as usize];
                        if mask[qi] && labels[qi] == 0 {
                            labels[qi] = label;
                            queue.push_back(q);
                        }
                    }
                }
                sizes.push(size);
            }
        }
    }
    Components { labels, sizes }
}

fn ensure_same_shape(a: &ArrayView3<'_, bool>, b: &ArrayView3<'_, bool>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::GridMismatch(format!(
            "masks have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.0.
pub fn dice(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>) -> Result<f64> {
    ensure_same_shape(&pred, &gt)?;
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        np += p as usize;
        ng += g as usize;
        inter += (p && g) as usize;
    });
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Total volume (ml) of components of `a` that do not touch `b` at all.
fn unmatched_component_volume(
    a: ArrayView3<'_, bool>,
    b: ArrayView3<'_, bool>,
    voxel_ml: f64,
    connectivity: Connectivity,
) -> f64 {
    let comps = connected_components(a, connectivity);
    let mut touched = vec![false; comps.count()];
    Zip::from(&comps.labels).and(&b).for_each(|&l, &hit| {
        if l > 0 && hit {
            touched[l as usize - 1] = true;
        }
    });
    let voxels: usize = comps
        .sizes
        .iter()
        .zip(touched.iter())
        .filter(|(_, &t)| !t)
        .map(|(s, _)| *s)
        .sum();
    voxels as f64 * voxel_ml
}

/// Volume (ml) of predicted components with no ground-truth overlap.
pub fn false_positive_volume(
    pred: ArrayView3<'_, bool>,
    gt: ArrayView3<'_, bool>,
    grid: &ImageGrid,
    connectivity: Connectivity,
) -> Result<f64> {
    ensure_same_shape(&pred, &gt)?;
    check_grid(&pred, grid)?;
    Ok(unmatched_component_volume(pred, gt, grid.voxel_volume_ml(), connectivity))
}

/// Volume (ml) of ground-truth components entirely missed by the prediction.
pub fn false_negative_volume(
    pred: ArrayView3<'_, bool>,
    gt: ArrayView3<'_, bool>,
    grid: &ImageGrid,
    connectivity: Connectivity,
) -> Result<f64> {
    ensure_same_shape(&pred, &gt)?;
    check_grid(&gt, grid)?;
    Ok(unmatched_component_volume(gt, pred, grid.voxel_volume_ml(), connectivity))
}

fn check_grid(mask: &ArrayView3<'_, bool>, grid: &ImageGrid) -> Result<()> {
    if mask.shape() != grid.shape {
        return Err(Error::GridMismatch(format!(
            "mask shape {:?} vs grid {:?}",
            mask.shape(),
            grid.shape
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub fpv_ml: f64,
    pub fnv_ml: f64,
}

impl SegMetrics {
    pub fn compute(
        pred: ArrayView3<'_, bool>,
        gt: ArrayView3<'_, bool>,
        grid: &ImageGrid,
        connectivity: Connectivity,
    ) -> Result<Self> {
        Ok(SegMetrics {
            dice: dice(pred, gt)?,
            fpv_ml: false_positive_volume(pred, gt, grid, connectivity)?,
            fnv_ml: false_negative_volume(pred, gt, grid, connectivity)?,
        })
    }

    fn mean(items: &[SegMetrics]) -> SegMetrics {
        let n = items.len().max(1) as f64;
        SegMetrics {
            dice: items.iter().map(|m| m.dice).sum::<f64>() / n,
            fpv_ml: items.iter().map(|m| m.fpv_ml).sum::<f64>() / n,
            fnv_ml: items.iter().map(|m| m.fnv_ml).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    #[serde(flatten)]
    pub metrics: SegMetrics,
}

/// Mean metrics per click count over a case set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub model_id: String,
    pub n_cases: usize,
    /// Per-case metrics, `per_case[i][j]` for case `i` and row `j`.
    #[serde(default)]
    pub per_case: Vec<(String, Vec<SegMetrics>)>,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "k,dice,fpv_ml,fnv_ml,n_cases,model_id";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{},{}",
                r.k, r.metrics.dice, r.metrics.fpv_ml, r.metrics.fnv_ml, self.n_cases, self.model_id
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn column(&self, f: impl Fn(&SegMetrics) -> f64) -> Vec<f64> {
        self.rows.iter().map(|r| f(&r.metrics)).collect()
    }
}

/// Anything that turns a case plus its clicks (already truncated to the first
/// `k` of each kind) into a binary lesion mask on the case grid.
pub trait CasePredictor {
    fn model_id(&self) -> String;
    fn predict_mask(&self, case: &CaseData, clicks: &ClickList, k: usize) -> Result<Array3<bool>>;
}

/// Returns the ground truth unchanged; for plumbing checks.
pub struct GroundTruthOracle;

impl CasePredictor for GroundTruthOracle {
    fn model_id(&self) -> String {
        "gt-oracle".into()
    }

    fn predict_mask(&self, case: &CaseData, _clicks: &ClickList, _k: usize) -> Result<Array3<bool>> {
        case.lesion_gt
            .as_ref()
            .map(LabelVolume::mask)
            .ok_or_else(|| Error::InvalidArgument("case has no lesion ground truth".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub k_max: usize,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    pub connectivity: Connectivity,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            k_max: MAX_CLICKS_PER_KIND,
            seed: 0,
            guidance: GuidanceConfig::default(),
            connectivity: Connectivity::TwentySix,
        }
    }
}

/// Simulates 10+10 clicks once per case (seeded from the case id), then for
/// every `k` in `0..=k_max` predicts with the first `k` clicks of each kind
/// and averages the metrics over cases.
pub fn interactive_sweep(
    predictor: &dyn CasePredictor,
    cases: &[CaseData],
    cfg: &SweepConfig,
) -> Result<SweepReport> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("interactive sweep needs at least one case".into()));
    }
    if cfg.k_max > MAX_CLICKS_PER_KIND {
        return Err(Error::InvalidArgument(format!("k_max {} > 10", cfg.k_max)));
    }
    let mut per_case = Vec::with_capacity(cases.len());
    for case in cases {
        let run = || -> Result<Vec<SegMetrics>> {
            let gt = case
                .lesion_gt
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("case has no lesion ground truth".into()))?;
            let seed = derive_seed(cfg.seed, &case.id);
            let sim = simulate_clicks(
                gt,
                None,
                MAX_CLICKS_PER_KIND,
                MAX_CLICKS_PER_KIND,
                &cfg.guidance,
                seed,
            )?;
            let gt_mask = gt.mask();
            (0..=cfg.k_max)
                .map(|k| {
                    let clicks = take_first_k(&sim.clicks, k)?;
                    let pred = predictor.predict_mask(case, &clicks, k)?;
                    SegMetrics::compute(pred.view(), gt_mask.view(), case.grid(), cfg.connectivity)
                })
                .collect()
        };
        let metrics = run().map_err(|e| e.for_case(&case.id))?;
        log::debug!("sweep case {} done", case.id);
        per_case.push((case.id.clone(), metrics));
    }
    let rows = (0..=cfg.k_max)
        .map(|k| {
            let at_k: Vec<SegMetrics> = per_case.iter().map(|(_, m)| m[k]).collect();
            SweepRow {
                k,
                metrics: SegMetrics::mean(&at_k),
            }
        })
        .collect();
    Ok(SweepReport {
        rows,
        model_id: predictor.model_id(),
        n_cases: cases.len(),
        per_case,
    })
}

/// Spearman rank correlation with average ranks for ties. Returns `None`
/// when either series is constant.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(rb.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn grid(shape: [usize; 3], spacing: f64) -> ImageGrid {
        ImageGrid::with_shape_spacing(shape, [spacing; 3]).unwrap()
    }

    #[test]
    fn dice_examples() {
        let mut p = Array3::from_elem((1, 1, 6), false);
        let mut g = p.clone();
        assert_eq!(dice(p.view(), g.view()).unwrap(), 1.0);
        for i in 0..4 {
            p[[0, 0, i]] = true;
        }
        assert_eq!(dice(p.view(), p.view()).unwrap(), 1.0);
        for i in 2..6 {
            g[[0, 0, i]] = true;
        }
        assert_eq!(dice(p.view(), g.view()).unwrap(), 0.5);
        let mut disjoint = Array3::from_elem((1, 1, 6), false);
        disjoint[[0, 0, 5]] = true;
        let mut q = Array3::from_elem((1, 1, 6), false);
        q[[0, 0, 0]] = true;
        assert_eq!(dice(q.view(), disjoint.view()).unwrap(), 0.0);
        assert!(dice(q.view(), Array3::from_elem((1, 1, 5), false).view()).is_err());
    }

    #[test]
    fn corner_neighbours_depend_on_connectivity() {
        let mut m = Array3::from_elem((2, 2, 2), false);
        m[[0, 0, 0]] = true;
        m[[1, 1, 1]] = true;
        assert_eq!(connected_components(m.view(), Connectivity::TwentySix).count(), 1);
        assert_eq!(connected_components(m.view(), Connectivity::Eighteen).count(), 2);
        assert_eq!(connected_components(m.view(), Connectivity::Six).count(), 2);
        assert_eq!(
            connected_components(Array3::from_elem((3, 3, 3), false).view(), Connectivity::TwentySix)
                .count(),
            0
        );
    }

    #[test]
    fn labels_follow_scan_order() {
        let mut m = Array3::from_elem((1, 3, 5), false);
        m[[0, 2, 0]] = true;
        m[[0, 0, 4]] = true;
        let c = connected_components(m.view(), Connectivity::TwentySix);
        assert_eq!(c.labels[[0, 0, 4]], 1);
        assert_eq!(c.labels[[0, 2, 0]], 2);
        let lv = c.to_label_volume(grid([1, 3, 5], 1.0)).unwrap();
        assert_eq!(lv.schema()[&2], "component_2");
    }

    #[test]
    fn fpv_examples() {
        let g = grid([4, 4, 10], 3.0);
        let mut pred = Array3::from_elem(g.shape, false);
        let gt = Array3::from_elem(g.shape, false);
        for x in 0..10 {
            pred[[0, 0, x]] = true;
        }
        let fpv = false_positive_volume(pred.view(), gt.view(), &g, Connectivity::TwentySix).unwrap();
        assert!((fpv - 0.27).abs() < 1e-12, "{fpv}");

        let mut touching = gt.clone();
        touching[[0, 0, 9]] = true;
        assert_eq!(
            false_positive_volume(pred.view(), touching.view(), &g, Connectivity::TwentySix).unwrap(),
            0.0
        );
        // pred ⊆ gt
        assert_eq!(
            false_positive_volume(touching.view(), pred.view(), &g, Connectivity::TwentySix).unwrap(),
            0.0
        );
    }

    #[test]
    fn fnv_examples() {
        let g = grid([3, 3, 3], 2.0);
        let mut gt = Array3::from_elem(g.shape, false);
        gt[[0, 0, 0]] = true;
        gt[[0, 0, 1]] = true;
        gt[[2, 2, 2]] = true;
        let empty = Array3::from_elem(g.shape, false);
        let fnv = false_negative_volume(empty.view(), gt.view(), &g, Connectivity::TwentySix).unwrap();
        assert!((fnv - 3.0 * 0.008).abs() < 1e-15);
        let mut hit = empty.clone();
        hit[[0, 0, 1]] = true;
        let fnv = false_negative_volume(hit.view(), gt.view(), &g, Connectivity::TwentySix).unwrap();
        assert!((fnv - 0.008).abs() < 1e-15);
        assert_eq!(
            false_negative_volume(gt.view(), gt.view(), &g, Connectivity::TwentySix).unwrap(),
            0.0
        );
    }

    #[test]
    fn spearman_basics() {
        let k: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let up: Vec<f64> = k.iter().map(|x| x * x).collect();
        assert!((spearman_rho(&k, &up).unwrap() - 1.0).abs() < 1e-12);
        let down: Vec<f64> = k.iter().map(|x| -x).collect();
        assert!((spearman_rho(&k, &down).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman_rho(&k, &[1.0; 11]).is_none());
        // ties use average ranks
        let r = ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn connectivity_serializes_as_number() {
        assert_eq!(serde_json::to_string(&Connectivity::Eighteen).unwrap(), "18");
        let c: Connectivity = serde_json::from_str("6").unwrap();
        assert_eq!(c, Connectivity::Six);
        assert!(serde_json::from_str::<Connectivity>("7").is_err());
    }
}
