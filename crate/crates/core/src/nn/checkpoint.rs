//! Named-parameter storage in the safetensors format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::Parameterized;
use crate::error::{Error, Result};

/// A raw tensor read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub const FORMAT: &str = "petseg-checkpoint";
pub const VERSION: &str = "1";

/// Writes every parameter of `model` plus string metadata to `path`.
pub fn save_params<P: Parameterized + ?Sized>(model: &P, metadata: HashMap<String, String>, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.for_each_param(&mut |name, p| {
        entries.push((name.to_string(), p.shape.clone(), bytemuck::cast_slice(&p.value).to_vec()));
    });
    save_tensors(entries, metadata, path)
}

pub(crate) fn save_tensors(
    entries: Vec<(String, Vec<usize>, Vec<u8>)>,
    metadata: HashMap<String, String>,
    path: &Path,
) -> Result<()> {
    let views = entries
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, &Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads all tensors and the metadata map from a safetensors file.
pub fn load_tensors(path: &Path) -> Result<(BTreeMap<String, StoredTensor>, HashMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&buf).map_err(bad)?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&buf).map_err(bad)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, StoredTensor { shape: view.shape().to_vec(), data });
    }
    Ok((out, metadata))
}

/// Saves a model with the standard header: format, version, kind and config JSON.
pub fn write_checkpoint<P: Parameterized + ?Sized>(model: &P, kind: &str, config_json: String, path: &Path) -> Result<()> {
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("kind".to_string(), kind.to_string()),
        ("config".to_string(), config_json),
    ]);
    save_params(model, meta, path)
}

/// Reads a checkpoint written by [`write_checkpoint`], checking format, version and kind.
/// Returns the tensors and the config JSON.
pub fn read_checkpoint(path: &Path, kind: &str) -> Result<(BTreeMap<String, StoredTensor>, String)> {
    let (tensors, meta) = load_tensors(path)?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata field {k}", path.display())))
    };
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("{}: not a {FORMAT} file", path.display())));
    }
    let version = field("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version mismatch (file {version}, supported {VERSION})",
            path.display()
        )));
    }
    let found = field("kind")?;
    if found != kind {
        return Err(Error::Checkpoint(format!("{}: holds a {found}, expected a {kind}", path.display())));
    }
    Ok((tensors, field("config")?))
}

/// Copies stored tensors into `model`, requiring an exact name and shape match.
pub fn assign_params<P: Parameterized + ?Sized>(model: &mut P, tensors: &BTreeMap<String, StoredTensor>) -> Result<()> {
    let mut err = None;
    let mut seen = 0usize;
    model.for_each_param_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.get(name) {
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(t) if t.shape != p.shape => {
                err = Some(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match expected {:?}",
                    t.shape, p.shape
                )))
            }
            Some(t) => {
                p.value.copy_from_slice(&t.data);
                p.velocity.iter_mut().for_each(|v| *v = 0.0);
                p.zero_grad();
                seen += 1;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, network expects {seen}",
            tensors.len()
        )));
    }
    Ok(())
}
