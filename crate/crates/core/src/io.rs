//! NIfTI-1 volume I/O and the dataset manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, NiftiType, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DatasetFingerprint, ImageGrid, LabelVolume, Modality, ScalarVolume, Tracer};

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a 3D NIfTI file into a `(z, y, x)` f64 array plus its grid.
fn read_nifti(path: &Path) -> Result<(ImageGrid, Array3<f64>)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file does not exist"),
        ));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    let dims: Vec<usize> = header.dim[1..=ndim.min(7)].iter().map(|&d| d as usize).collect();
    let effective = dims.iter().rev().skip_while(|&&d| d == 1).count();
    if effective > 3 || ndim < 1 {
        return Err(nifti_err(path, format!("expected a 3D image, got dims {dims:?}")));
    }
    let mut xyz = [1usize; 3];
    for (i, d) in dims.iter().take(3).enumerate() {
        xyz[i] = *d;
    }
    let data = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| nifti_err(path, e))?;
    let flat: Vec<f64> = data.iter().copied().collect();
    if flat.len() != xyz.iter().product::<usize>() {
        return Err(nifti_err(path, "voxel count does not match header dims"));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{}: non-finite values", path.display())));
    }
    // `data.iter()` walks the array in logical (x, y, z) order with z fastest.
    let xyz_arr = Array3::from_shape_vec(xyz, flat).map_err(|e| nifti_err(path, e))?;
    let zyx = xyz_arr.permuted_axes([2, 1, 0]).as_standard_layout().to_owned();

    let spacing = [
        header.pixdim[3].abs() as f64,
        header.pixdim[2].abs() as f64,
        header.pixdim[1].abs() as f64,
    ];
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    let origin = if header.sform_code > 0 {
        [
            header.srow_z[3] as f64,
            header.srow_y[3] as f64,
            header.srow_x[3] as f64,
        ]
    } else {
        [
            header.quatern_z as f64,
            header.quatern_y as f64,
            header.quatern_x as f64,
        ]
    };
    let grid = ImageGrid::new([xyz[2], xyz[1], xyz[0]], spacing, origin)?;
    Ok((grid, zyx))
}

fn header_for(grid: &ImageGrid) -> NiftiHeader {
    let [sz, sy, sx] = grid.spacing;
    let [oz, oy, ox] = grid.origin;
    NiftiHeader {
        pixdim: [1.0, sx as f32, sy as f32, sz as f32, 1.0, 1.0, 1.0, 1.0],
        xyzt_units: 2, // millimetres
        qform_code: 1,
        sform_code: 1,
        quatern_b: 0.0,
        quatern_c: 0.0,
        quatern_d: 0.0,
        quatern_x: ox as f32,
        quatern_y: oy as f32,
        quatern_z: oz as f32,
        srow_x: [sx as f32, 0.0, 0.0, ox as f32],
        srow_y: [0.0, sy as f32, 0.0, oy as f32],
        srow_z: [0.0, 0.0, sz as f32, oz as f32],
        ..NiftiHeader::default()
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn write_array<T>(path: &Path, grid: &ImageGrid, zyx: &Array3<T>, dtype: NiftiType) -> Result<()>
where
    T: bytemuck::Pod,
{
    ensure_parent(path)?;
    let header = header_for(grid);
    // (x, y, z) view over the (z, y, x) buffer; the writer transposes to Fortran order.
    let xyz = zyx.view().permuted_axes([2, 1, 0]);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti_with_type(&xyz, dtype)
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => Error::io(path, io),
            other => nifti_err(path, other),
        })
}

pub fn load_volume(path: impl AsRef<Path>, modality: Modality) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let (grid, data) = read_nifti(path)?;
    ScalarVolume::new(grid, data.mapv(|v| v as f32), modality)
}

pub fn load_label_volume(
    path: impl AsRef<Path>,
    schema: BTreeMap<u16, String>,
) -> Result<LabelVolume> {
    let path = path.as_ref();
    let (grid, data) = read_nifti(path)?;
    if data
        .iter()
        .any(|&v| v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64)
    {
        return Err(Error::InvalidVolume(format!(
            "{}: label volume must hold non-negative integers",
            path.display()
        )));
    }
    LabelVolume::new(grid, data.mapv(|v| v as u16), schema)
}

/// Volumes that can be written as NIfTI-1 (`.nii` or `.nii.gz`).
pub trait SaveVolume {
    fn save_volume(&self, path: impl AsRef<Path>) -> Result<()>;
}

impl SaveVolume for ScalarVolume {
    fn save_volume(&self, path: impl AsRef<Path>) -> Result<()> {
        let std = self.values().as_standard_layout();
        let owned = std.to_owned();
        write_array(path.as_ref(), self.grid(), &owned, NiftiType::Float32)
    }
}

impl SaveVolume for LabelVolume {
    fn save_volume(&self, path: impl AsRef<Path>) -> Result<()> {
        write_array(path.as_ref(), self.grid(), self.labels(), NiftiType::Uint16)
    }
}

pub fn save_volume<V: SaveVolume>(vol: &V, path: impl AsRef<Path>) -> Result<()> {
    vol.save_volume(path)
}

/// One case entry of a dataset manifest. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub ct: PathBuf,
    pub pet: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_gt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ_gt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracer: Option<Tracer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<DatasetFingerprint>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    /// Loads a manifest from a JSON file, or from `manifest.json` inside a directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(Self::FILE_NAME);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    pub fn case(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn load_case(&self, entry: &CaseEntry) -> Result<CaseData> {
        let ct = load_volume(self.resolve(&entry.ct), Modality::CtHu)?;
        let pet = load_volume(self.resolve(&entry.pet), Modality::PetSuv)?;
        let lesion_gt = entry
            .lesion_gt
            .as_ref()
            .map(|p| load_label_volume(self.resolve(p), crate::volume::lesion_schema()))
            .transpose()?;
        let organ_gt = entry
            .organ_gt
            .as_ref()
            .map(|p| load_label_volume(self.resolve(p), crate::model::OrganSchema::label_schema()))
            .transpose()?;
        let case = CaseData {
            id: entry.id.clone(),
            ct,
            pet,
            lesion_gt,
            organ_gt,
            tracer: entry.tracer,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn load_all(&self) -> Result<Vec<CaseData>> {
        self.cases
            .iter()
            .map(|c| self.load_case(c).map_err(|e| e.for_case(&c.id)))
            .collect()
    }
}

/// A fully loaded case.
#[derive(Clone, Debug)]
pub struct CaseData {
    pub id: String,
    pub ct: ScalarVolume,
    pub pet: ScalarVolume,
    pub lesion_gt: Option<LabelVolume>,
    pub organ_gt: Option<LabelVolume>,
    pub tracer: Option<Tracer>,
}

impl CaseData {
    pub fn grid(&self) -> &ImageGrid {
        self.ct.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.ct.grid();
        g.ensure_same(self.pet.grid(), "PET vs CT")?;
        if let Some(l) = &self.lesion_gt {
            g.ensure_same(l.grid(), "lesion GT vs CT")?;
        }
        if let Some(o) = &self.organ_gt {
            g.ensure_same(o.grid(), "organ GT vs CT")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::lesion_schema;

    fn random_volume(shape: [usize; 3], spacing: [f64; 3], seed: u64) -> ScalarVolume {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = ImageGrid::new(shape, spacing, [-12.5, 3.0, 7.25]).unwrap();
        let values = Array3::from_shape_simple_fn(shape, || rng.gen_range(-1000.0f32..1000.0));
        ScalarVolume::new(grid, values, Modality::CtHu).unwrap()
    }

    #[test]
    fn scalar_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.nii", "b.nii.gz"] {
            let v = random_volume([16, 12, 10], [3.0, 2.0, 2.0], 7);
            let p = dir.path().join(name);
            v.save_volume(&p).unwrap();
            let r = load_volume(&p, Modality::CtHu).unwrap();
            assert_eq!(r.grid().shape, [16, 12, 10]);
            assert_eq!(r.grid().spacing, [3.0, 2.0, 2.0]);
            assert_eq!(r.grid().origin, v.grid().origin);
            let max_diff = r
                .values()
                .iter()
                .zip(v.values().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff <= 1e-6, "max diff {max_diff}");
        }
    }

    #[test]
    fn label_round_trip_is_exact_and_overwrite_works() {
        let dir = tempfile::tempdir().unwrap();
        let g = ImageGrid::with_shape_spacing([8, 8, 8], [1.0; 3]).unwrap();
        let labels = Array3::from_shape_fn(g.shape, |(z, y, x)| ((z + y + x) % 2) as u16);
        let l = LabelVolume::new(g, labels, lesion_schema()).unwrap();
        let p = dir.path().join("l.nii.gz");
        l.save_volume(&p).unwrap();
        l.save_volume(&p).unwrap();
        let r = load_label_volume(&p, lesion_schema()).unwrap();
        assert_eq!(r, l);
    }

    #[test]
    fn non_finite_and_missing_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = ImageGrid::with_shape_spacing([2, 2, 2], [1.0; 3]).unwrap();
        let mut arr = Array3::<f32>::zeros(g.shape);
        arr[[1, 0, 1]] = f32::NAN;
        let p = dir.path().join("nan.nii");
        write_array(&p, &g, &arr, NiftiType::Float32).unwrap();
        let err = load_volume(&p, Modality::CtHu).unwrap_err();
        assert!(err.to_string().contains("non-finite values"), "{err}");
        assert!(matches!(
            load_volume(dir.path().join("missing.nii"), Modality::CtHu),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn four_d_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("4d.nii");
        let data = ndarray::Array4::<f32>::zeros((2, 2, 2, 3));
        WriterOptions::new(&p).write_nifti(&data).unwrap();
        assert!(load_volume(&p, Modality::CtHu).is_err());
    }

    #[test]
    fn unwritable_path_errors() {
        let v = random_volume([2, 2, 2], [1.0; 3], 1);
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(v.save_volume(file.join("sub/v.nii")).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            cases: vec![CaseEntry {
                id: "c0".into(),
                ct: "c0/ct.nii.gz".into(),
                pet: "c0/pet.nii.gz".into(),
                lesion_gt: Some("c0/lesion.nii.gz".into()),
                organ_gt: None,
                tracer: Some(Tracer::Psma),
            }],
            fingerprint: None,
            root: PathBuf::new(),
        };
        let p = dir.path().join(DatasetManifest::FILE_NAME);
        m.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"tracer\": \"PSMA\""));
        let r = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(r.cases, m.cases);
        assert_eq!(r.root, dir.path());
    }
}
