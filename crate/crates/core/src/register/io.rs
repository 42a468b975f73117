use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::WarpField;
use crate::error::{Error, Result};
use crate::volume::{read_nifti, write_nifti, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    dims: [usize; 2],
    units: String,
    components: [String; 2],
}

/// `warp.nii` pairs with `warp.json`.
fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the field as a float32 NIfTI of dims `(width, height, 2)` holding
/// `dx` in plane 0 and `dy` in plane 1, plus a JSON sidecar.
pub fn write_warp(w: &WarpField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut data = w.dx().to_vec();
    data.extend_from_slice(w.dy());
    let vol = Volume::new([w.width(), w.height(), 2], [1.0; 3], data)?;
    write_nifti(&vol, path)?;
    let side = Sidecar {
        dims: w.dims(),
        units: "pixels".into(),
        components: ["dx".into(), "dy".into()],
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(sp, e))
}

pub fn read_warp(path: impl AsRef<Path>) -> Result<WarpField> {
    let path = path.as_ref();
    let vol = read_nifti(path)?;
    let [w, h, c] = vol.dims();
    if c != 2 {
        return Err(Error::InvalidVolume(format!(
            "warp file needs 2 planes, found {c}"
        )));
    }
    let sp = sidecar_path(path);
    if sp.exists() {
        let text = std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_slice(&text)?;
        if side.dims != [w, h] || side.units != "pixels" {
            return Err(Error::dims(side.dims, [w, h]));
        }
    }
    let data = vol.into_data();
    let (dx, dy) = data.split_at(w * h);
    WarpField::new(w, h, dx.to_vec(), dy.to_vec())
}
