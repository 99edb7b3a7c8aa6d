//! Named-tensor containers on disk (safetensors) and JSON sidecars.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array4;
use safetensors::tensor::{SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real};

/// Writes named 4-D tensors to a safetensors file.
pub fn save_tensors<'a, F: Real>(
    path: &Path,
    tensors: impl IntoIterator<Item = (String, &'a Array4<F>)>,
) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(name, t)| {
            let t = t.as_standard_layout();
            (name, t.shape().to_vec(), F::to_le_bytes_vec(t.as_slice().unwrap()))
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(F::DTYPE, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, None, path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

/// Reads every tensor of a safetensors file. All tensors must be rank 4 and of type `F`.
pub fn load_tensors<F: Real>(path: &Path) -> Result<BTreeMap<String, Array4<F>>> {
    let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = SafeTensors::deserialize(&buffer)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (name, view) in file.tensors() {
        if view.dtype() != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{name}: stored as {:?}, expected {:?}",
                view.dtype(),
                F::DTYPE
            )));
        }
        let shape: [usize; 4] = view
            .shape()
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("{name}: expected a rank-4 tensor")))?;
        let values = F::from_le_bytes_slice(view.data());
        let array = Array4::from_shape_vec(shape, values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.insert(name, array);
    }
    Ok(out)
}

/// Saves every parameter of `store` under its own name.
pub fn save_params<F: Real>(path: &Path, store: &ParamStore<F>) -> Result<()> {
    save_tensors(path, store.iter().map(|(n, v)| (n.to_string(), v)))
}

/// Overwrites `store` with the values in `path`. The file must hold exactly the
/// store's parameter names with matching shapes.
pub fn load_params_into<F: Real>(path: &Path, store: &mut ParamStore<F>) -> Result<()> {
    let mut loaded = load_tensors::<F>(path)?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let value = loaded
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing parameter {name}", path.display())))?;
        let slot = store.by_name_mut(name).unwrap();
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{}: unexpected parameter {extra}",
            path.display()
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
