//! Synthetic PET/CT phantoms with lesion ground truth and organ labels for both tracers.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{save_volume, CaseData, CaseEntry, DatasetManifest};
use crate::model::OrganSchema;
use crate::util::derive_seed;
use crate::volume::{compute_fingerprint, lesion_schema, ImageGrid, LabelVolume, Modality, ScalarVolume, Tracer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid: ImageGrid,
    pub tracer: Tracer,
    pub n_lesions: usize,
    pub lesion_radius_mm: (f64, f64),
    pub lesion_suv: (f64, f64),
    /// Standard deviation of additive PET noise (SUV).
    pub noise_sigma: f64,
    #[serde(default = "default_ct_noise")]
    pub ct_noise_hu: f64,
    pub seed: u64,
}

fn default_ct_noise() -> f64 {
    15.0
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: ImageGrid::with_shape_spacing([64; 3], [3.0; 3]).expect("valid default grid"),
            tracer: Tracer::Fdg,
            n_lesions: 3,
            lesion_radius_mm: (6.0, 15.0),
            lesion_suv: (3.0, 8.0),
            noise_sigma: 0.2,
            ct_noise_hu: default_ct_noise(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let (r0, r1) = self.lesion_radius_mm;
        if !(r0 > 0.0 && r1 >= r0) {
            return Err(Error::InvalidConfig(format!("lesion radius range ({r0}, {r1}) must be positive")));
        }
        let (s0, s1) = self.lesion_suv;
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(Error::InvalidConfig(format!("lesion SUV range ({s0}, {s1}) must be positive")));
        }
        let bg = background_suv(self.tracer);
        if s0 <= bg {
            return Err(Error::InvalidConfig(format!(
                "lesion SUV must exceed the {} background SUV {bg}",
                self.tracer
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.ct_noise_hu >= 0.0) {
            return Err(Error::InvalidConfig("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// Soft-tissue HU of the body and air outside it.
pub const SOFT_TISSUE_HU: f32 = 40.0;
pub const AIR_HU: f32 = -1000.0;

pub fn background_suv(tracer: Tracer) -> f64 {
    match tracer {
        Tracer::Fdg => 1.0,
        Tracer::Psma => 0.6,
    }
}

/// An organ analog: ellipsoid(s) at fractional grid positions.
struct OrganAnalog {
    name: &'static str,
    hu: f32,
    suv_fdg: f64,
    suv_psma: f64,
    /// Centres and semi-axes, both as fractions of the grid extent in (z, y, x).
    parts: &'static [([f64; 3], [f64; 3])],
}

const ORGANS: [OrganAnalog; 6] = [
    OrganAnalog { name: "brain", hu: 35.0, suv_fdg: 6.0, suv_psma: 0.3, parts: &[([0.12, 0.5, 0.5], [0.08, 0.13, 0.13])] },
    OrganAnalog {
        name: "head_glands",
        hu: 45.0,
        suv_fdg: 1.5,
        suv_psma: 8.0,
        parts: &[([0.22, 0.45, 0.36], [0.03, 0.035, 0.035]), ([0.22, 0.45, 0.64], [0.03, 0.035, 0.035])],
    },
    OrganAnalog { name: "heart", hu: 45.0, suv_fdg: 3.0, suv_psma: 1.0, parts: &[([0.37, 0.46, 0.56], [0.06, 0.08, 0.08])] },
    OrganAnalog { name: "liver", hu: 60.0, suv_fdg: 2.0, suv_psma: 3.5, parts: &[([0.5, 0.5, 0.34], [0.07, 0.12, 0.12])] },
    OrganAnalog {
        name: "kidneys",
        hu: 30.0,
        suv_fdg: 4.0,
        suv_psma: 10.0,
        parts: &[([0.62, 0.6, 0.33], [0.06, 0.04, 0.035]), ([0.62, 0.6, 0.67], [0.06, 0.04, 0.035])],
    },
    OrganAnalog { name: "urinary_bladder", hu: 10.0, suv_fdg: 8.0, suv_psma: 8.0, parts: &[([0.86, 0.45, 0.5], [0.05, 0.07, 0.07])] },
];

/// Body ellipsoid, fractions of the grid extent.
const BODY: ([f64; 3], [f64; 3]) = ([0.5, 0.5, 0.5], [0.48, 0.32, 0.44]);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionInfo {
    /// Centre voxel `(z, y, x)`.
    pub center: [usize; 3],
    pub radii_mm: [f64; 3],
    pub suv: f64,
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub ct: ScalarVolume,
    pub pet: ScalarVolume,
    pub lesion_gt: LabelVolume,
    pub organ_gt: LabelVolume,
    pub tracer: Tracer,
    pub lesions: Vec<LesionInfo>,
    /// Fewer lesions than requested could be placed.
    pub placement_shortfall: bool,
}

impl PhantomCase {
    pub fn into_case_data(self, id: impl Into<String>) -> CaseData {
        CaseData {
            id: id.into(),
            ct: self.ct,
            pet: self.pet,
            lesion_gt: Some(self.lesion_gt),
            organ_gt: Some(self.organ_gt),
            tracer: Some(self.tracer),
        }
    }
}

fn inside(p: [usize; 3], centre: [f64; 3], semi: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] as f64 - centre[a]) / semi[a]).powi(2)).sum::<f64>() <= 1.0
}

const PLACEMENT_RETRIES: usize = 200;

/// Builds one phantom; a pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = spec.grid;
    let shape = g.shape;
    let frac = |f: [f64; 3]| [0, 1, 2].map(|a| f[a] * (shape[a] as f64 - 1.0));
    let semi = |f: [f64; 3]| [0, 1, 2].map(|a| (f[a] * shape[a] as f64).max(0.75));

    let body_c = frac(BODY.0);
    let body_r = semi(BODY.1);
    let body = Array3::from_shape_fn(shape, |(z, y, x)| inside([z, y, x], body_c, body_r));

    let bg = background_suv(spec.tracer);
    let mut ct = body.mapv(|b| if b { SOFT_TISSUE_HU } else { AIR_HU });
    let mut pet = body.mapv(|b| if b { bg } else { 0.05 });
    let mut organs = Array3::<u16>::zeros(shape);

    for organ in &ORGANS {
        let id = OrganSchema::id(organ.name).expect("organ analog in schema");
        // per-case variation keeps the tracer patterns overlapping a little
        let scale = rng.gen_range(0.75..1.25);
        let suv = scale
            * match spec.tracer {
                Tracer::Fdg => organ.suv_fdg,
                Tracer::Psma => organ.suv_psma,
            };
        let jitter: [f64; 3] = [0; 3].map(|_| rng.gen_range(-0.015..0.015));
        for &(c, r) in organ.parts {
            let centre = frac([c[0] + jitter[0], c[1] + jitter[1], c[2] + jitter[2]]);
            let radii = semi(r);
            let lo = [0, 1, 2].map(|a| (centre[a] - radii[a]).floor().max(0.0) as usize);
            let hi = [0, 1, 2].map(|a| ((centre[a] + radii[a]).ceil() as usize).min(shape[a] - 1));
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        let p = [z, y, x];
                        if body[p] && inside(p, centre, radii) {
                            organs[p] = id;
                            ct[p] = organ.hu;
                            pet[p] = suv;
                        }
                    }
                }
            }
        }
    }

    let mut lesion = Array3::<u16>::zeros(shape);
    let mut lesions: Vec<LesionInfo> = Vec::new();
    let mut occupied = organs.mapv(|o| o > 0);
    let (r0, r1) = spec.lesion_radius_mm;
    let (s0, s1) = spec.lesion_suv;
    for _ in 0..spec.n_lesions {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let r_mm = rng.gen_range(r0..=r1);
            let radii_mm: [f64; 3] = [0; 3].map(|_| r_mm * rng.gen_range(0.8..1.2));
            let radii = [0, 1, 2].map(|a| radii_mm[a] / g.spacing[a]);
            let centre = [0, 1, 2].map(|a| rng.gen_range(0.0..shape[a] as f64 - 1.0).round());
            let lo = [0, 1, 2].map(|a| (centre[a] - radii[a] - 1.0).floor());
            let hi = [0, 1, 2].map(|a| (centre[a] + radii[a] + 1.0).ceil());
            if (0..3).any(|a| lo[a] < 0.0 || hi[a] > shape[a] as f64 - 1.0) {
                continue;
            }
            let lo = lo.map(|v| v as usize);
            let hi = hi.map(|v| v as usize);
            let mut voxels = Vec::new();
            let mut ok = true;
            // the one-voxel margin keeps lesions apart from organs and each other
            'scan: for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        let p = [z, y, x];
                        let grown = [radii[0] + 1.0, radii[1] + 1.0, radii[2] + 1.0];
                        if inside(p, centre, grown) && (occupied[p] || !body[p]) {
                            ok = false;
                            break 'scan;
                        }
                        if inside(p, centre, radii) {
                            voxels.push(p);
                        }
                    }
                }
            }
            if !ok || voxels.is_empty() {
                continue;
            }
            let suv = rng.gen_range(s0..=s1);
            for &p in &voxels {
                lesion[p] = 1;
                occupied[p] = true;
                pet[p] = suv;
                ct[p] = SOFT_TISSUE_HU + 10.0;
            }
            lesions.push(LesionInfo {
                center: centre.map(|v| v as usize),
                radii_mm,
                suv,
            });
            placed = true;
            break;
        }
        if !placed {
            log::warn!("lesion placement failed after {PLACEMENT_RETRIES} attempts");
        }
    }
    let placement_shortfall = lesions.len() < spec.n_lesions;

    let pet_noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("finite sigma");
    let ct_noise = Normal::new(0.0, spec.ct_noise_hu.max(1e-12)).expect("finite sigma");
    let pet = pet.mapv(|v| {
        let n = if spec.noise_sigma > 0.0 { pet_noise.sample(&mut rng) } else { 0.0 };
        (v + n).max(0.0) as f32
    });
    let ct = ct.mapv(|v| {
        let n = if spec.ct_noise_hu > 0.0 { ct_noise.sample(&mut rng) } else { 0.0 };
        (v as f64 + n) as f32
    });

    Ok(PhantomCase {
        ct: ScalarVolume::new(g, ct, Modality::CtHu)?,
        pet: ScalarVolume::new(g, pet, Modality::PetSuv)?,
        lesion_gt: LabelVolume::new(g, lesion, lesion_schema())?,
        organ_gt: LabelVolume::new(g, organs, OrganSchema::label_schema())?,
        tracer: spec.tracer,
        lesions,
        placement_shortfall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_cases: usize,
    /// Fraction of FDG cases.
    pub tracer_mix: f64,
    /// Grid, lesion and noise settings; tracer, lesion count and seed are set per case.
    pub template: PhantomSpec,
    /// Inclusive range of lesion counts for non-control cases.
    pub lesion_count: (usize, usize),
    pub negative_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_low_pct")]
    pub fingerprint_low_pct: f64,
    #[serde(default = "default_high_pct")]
    pub fingerprint_high_pct: f64,
}

fn default_low_pct() -> f64 {
    0.5
}
fn default_high_pct() -> f64 {
    99.5
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_cases: 40,
            tracer_mix: 0.5,
            template: PhantomSpec::default(),
            lesion_count: (1, 4),
            negative_fraction: 0.15,
            seed: 0,
            fingerprint_low_pct: default_low_pct(),
            fingerprint_high_pct: default_high_pct(),
        }
    }
}

/// Per-case plan of a dataset, before any volume is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasePlan {
    pub id: String,
    pub spec: PhantomSpec,
    pub negative_control: bool,
}

pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Vec<CasePlan>> {
    if cfg.n_cases == 0 {
        return Err(Error::InvalidConfig("n_cases must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.tracer_mix) || !(0.0..=1.0).contains(&cfg.negative_fraction) {
        return Err(Error::InvalidConfig("tracer_mix and negative_fraction must be in [0, 1]".into()));
    }
    if cfg.lesion_count.0 == 0 || cfg.lesion_count.1 < cfg.lesion_count.0 {
        return Err(Error::InvalidConfig("lesion_count must be a range starting at >= 1".into()));
    }
    cfg.template.validate()?;
    let n = cfg.n_cases;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dataset-plan"));
    let n_fdg = (n as f64 * cfg.tracer_mix).round() as usize;
    let mut tracers: Vec<Tracer> = (0..n).map(|i| if i < n_fdg { Tracer::Fdg } else { Tracer::Psma }).collect();
    tracers.shuffle(&mut rng);
    let n_neg = (n as f64 * cfg.negative_fraction).round() as usize;
    let mut neg: Vec<bool> = (0..n).map(|i| i < n_neg).collect();
    neg.shuffle(&mut rng);
    let width = n.to_string().len().max(3);
    (0..n)
        .map(|i| {
            let id = format!("case_{i:0width$}");
            let n_lesions = if neg[i] { 0 } else { rng.gen_range(cfg.lesion_count.0..=cfg.lesion_count.1) };
            let mut spec = cfg.template.clone();
            spec.tracer = tracers[i];
            spec.n_lesions = n_lesions;
            spec.seed = derive_seed(cfg.seed, &id);
            spec.validate().map_err(|e| e.for_case(&id))?;
            Ok(CasePlan {
                id,
                spec,
                negative_control: neg[i],
            })
        })
        .collect()
}

/// Generates the cases in memory.
pub fn generate_cases(cfg: &DatasetConfig) -> Result<Vec<CaseData>> {
    plan_dataset(cfg)?
        .into_iter()
        .map(|p| Ok(generate_phantom(&p.spec).map_err(|e| e.for_case(&p.id))?.into_case_data(p.id)))
        .collect()
}

/// Writes every case as NIfTI plus `manifest.json` with the CT fingerprint.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    let plans = plan_dataset(cfg)?;
    let cases_dir = out.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;
    let mut entries = Vec::with_capacity(plans.len());
    let mut cts = Vec::with_capacity(plans.len());
    for p in &plans {
        let case = generate_phantom(&p.spec).map_err(|e| e.for_case(&p.id))?;
        let rel = |suffix: &str| PathBuf::from("cases").join(format!("{}_{suffix}.nii.gz", p.id));
        let entry = CaseEntry {
            id: p.id.clone(),
            ct: rel("ct"),
            pet: rel("pet"),
            lesion_gt: Some(rel("lesion")),
            organ_gt: Some(rel("organs")),
            tracer: Some(case.tracer),
        };
        save_volume(&case.ct, out.join(&entry.ct))?;
        save_volume(&case.pet, out.join(&entry.pet))?;
        save_volume(&case.lesion_gt, out.join(entry.lesion_gt.as_ref().expect("set above")))?;
        save_volume(&case.organ_gt, out.join(entry.organ_gt.as_ref().expect("set above")))?;
        entries.push(entry);
        cts.push(case.ct);
    }
    let refs: Vec<&ScalarVolume> = cts.iter().collect();
    let fingerprint = compute_fingerprint(&refs, cfg.fingerprint_low_pct, cfg.fingerprint_high_pct)?;
    let manifest = DatasetManifest {
        cases: entries,
        fingerprint: Some(fingerprint),
        root: out.to_path_buf(),
    };
    manifest.save(out.join(DatasetManifest::FILE_NAME))?;
    let plan_path = out.join("plan.json");
    std::fs::write(&plan_path, serde_json::to_string_pretty(&plans)? + "\n").map_err(|e| Error::io(&plan_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::sha256_hex;

    fn small(tracer: Tracer, n_lesions: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid: ImageGrid::with_shape_spacing([32; 3], [6.0; 3]).unwrap(),
            tracer,
            n_lesions,
            seed,
            ..Default::default()
        }
    }

    fn mean_in(vol: &ScalarVolume, organs: &LabelVolume, id: u16) -> f64 {
        let (s, n) = vol
            .values()
            .iter()
            .zip(organs.labels())
            .filter(|(_, &l)| l == id)
            .fold((0.0, 0), |(s, n), (&v, _)| (s + v as f64, n + 1));
        s / n as f64
    }

    #[test]
    fn negative_control_has_organs_but_no_lesions() {
        let c = generate_phantom(&small(Tracer::Psma, 0, 1)).unwrap();
        assert_eq!(c.lesion_gt.count_foreground(), 0);
        let glands = OrganSchema::id("head_glands").unwrap();
        assert!(mean_in(&c.pet, &c.organ_gt, glands) > 3.0);
        assert!(!c.placement_shortfall);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(&small(Tracer::Fdg, 3, 7)).unwrap();
        let b = generate_phantom(&small(Tracer::Fdg, 3, 7)).unwrap();
        assert_eq!(a.ct, b.ct);
        assert_eq!(a.pet, b.pet);
        assert_eq!(a.lesion_gt, b.lesion_gt);
        let c = generate_phantom(&small(Tracer::Fdg, 3, 8)).unwrap();
        assert_ne!(a.pet, c.pet);
    }

    #[test]
    fn brain_uptake_separates_tracers() {
        let brain = OrganSchema::id("brain").unwrap();
        for seed in 0..5 {
            let f = generate_phantom(&small(Tracer::Fdg, 2, seed)).unwrap();
            let p = generate_phantom(&small(Tracer::Psma, 2, seed)).unwrap();
            let diff = mean_in(&f.pet, &f.organ_gt, brain) - mean_in(&p.pet, &p.organ_gt, brain);
            assert!(diff > 2.0, "seed {seed}: {diff}");
        }
    }

    #[test]
    fn lesions_are_hot_inside_the_body_and_apart_from_organs() {
        let spec = PhantomSpec { noise_sigma: 0.0, ct_noise_hu: 0.0, ..small(Tracer::Fdg, 4, 3) };
        let c = generate_phantom(&spec).unwrap();
        assert!(c.lesions.len() >= 3);
        let bg = background_suv(Tracer::Fdg) as f32;
        for ((&l, &o), (&suv, &hu)) in c
            .lesion_gt
            .labels()
            .iter()
            .zip(c.organ_gt.labels())
            .zip(c.pet.values().iter().zip(c.ct.values()))
        {
            if l > 0 {
                assert_eq!(o, 0);
                assert!(suv > bg);
                assert!(hu > -500.0);
            }
        }
        assert!(c.pet.values().iter().all(|&v| v >= 0.0));
        let used: Vec<u16> = c.organ_gt.schema().keys().copied().collect();
        assert!(c.organ_gt.labels().iter().all(|l| used.contains(l)));
    }

    #[test]
    fn crowded_phantoms_report_shortfall() {
        let spec = PhantomSpec { lesion_radius_mm: (40.0, 45.0), ..small(Tracer::Fdg, 6, 2) };
        let c = generate_phantom(&spec).unwrap();
        assert!(c.placement_shortfall);
        assert!(c.lesions.len() < 6);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_phantom(&PhantomSpec { lesion_radius_mm: (0.0, 1.0), ..Default::default() }).is_err());
        assert!(generate_phantom(&PhantomSpec { lesion_suv: (0.5, 2.0), ..Default::default() }).is_err());
    }

    fn tiny_dataset(n: usize) -> DatasetConfig {
        DatasetConfig {
            n_cases: n,
            template: PhantomSpec {
                grid: ImageGrid::with_shape_spacing([16; 3], [12.0; 3]).unwrap(),
                lesion_radius_mm: (12.0, 18.0),
                ..Default::default()
            },
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_plan_balances_tracers_and_controls() {
        let plans = plan_dataset(&DatasetConfig { n_cases: 40, ..tiny_dataset(40) }).unwrap();
        let fdg = plans.iter().filter(|p| p.spec.tracer == Tracer::Fdg).count();
        assert_eq!(fdg, 20);
        let neg = plans.iter().filter(|p| p.negative_control).count();
        assert_eq!(neg, 6);
        assert!(plans.iter().all(|p| p.negative_control == (p.spec.n_lesions == 0)));
    }

    #[test]
    fn dataset_round_trips_and_is_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny_dataset(4);
        let m = generate_dataset(&cfg, d1.path()).unwrap();
        generate_dataset(&cfg, d2.path()).unwrap();
        let loaded = DatasetManifest::load(d1.path()).unwrap();
        assert_eq!(loaded.cases, m.cases);
        let cases = loaded.load_all().unwrap();
        let cts: Vec<&ScalarVolume> = cases.iter().map(|c| &c.ct).collect();
        assert_eq!(Some(compute_fingerprint(&cts, 0.5, 99.5).unwrap()), loaded.fingerprint);
        for name in ["manifest.json", "cases/case_000_pet.nii.gz", "cases/case_003_organs.nii.gz"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(sha256_hex(&a), sha256_hex(&b), "{name}");
        }
    }
}
