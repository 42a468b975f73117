//! Volumetric and planar image carriers plus their on-disk formats.
//!
//! A [`Volume`] stores a 3D scalar grid in x-fastest order together with the
//! voxel spacing in millimetres and an optional boolean mask. A [`Slice2D`]
//! is the planar counterpart used by the metrics, the GAN and registration.
//! Both are validated on construction and immutable afterwards.

mod nifti;
mod scheme;

pub use nifti::{read_mask, read_nifti, write_nifti, NIFTI_HEADER_BYTES, NIFTI_VOX_OFFSET};
pub use scheme::{hemisphere_directions, parse_gradient_scheme, read_gradient_scheme, write_gradient_scheme, GradientScheme};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            mask: None,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n])
    }

    /// Attaches a mask with the same dims as the volume.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::InvalidVolume(format!(
                "mask length {} does not match {} voxels",
                mask.len(),
                self.data.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Same geometry, new payload. The mask is carried over.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut v = Self::new(self.dims, self.spacing, data)?;
        v.mask = self.mask.clone();
        Ok(v)
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    /// Builds a volume by stacking equally sized slices along z.
    pub fn from_slices(slices: &[Slice2D], spacing: [f64; 3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidVolume("no slices to stack".into()))?;
        let (w, h) = (first.width(), first.height());
        let mut data = Vec::with_capacity(w * h * slices.len());
        for s in slices {
            if s.width() != w || s.height() != h {
                return Err(Error::dims([w, h], [s.width(), s.height()]));
            }
            data.extend_from_slice(s.data());
        }
        Self::new([w, h, slices.len()], spacing, data)
    }

    pub fn slices(&self, axis: usize) -> Result<Vec<Slice2D>> {
        if axis > 2 {
            return Err(Error::IndexOutOfRange {
                axis: 3,
                index: axis,
                len: 3,
            });
        }
        (0..self.dims[axis])
            .map(|i| extract_slice(self, axis, i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Slice2D {
    /// Row-major: pixel `(x, y)` lives at `y * width + x`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidVolume(format!(
                "slice dims must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidVolume(format!(
                "slice data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            mask: None,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::InvalidVolume(format!(
                "mask length {} does not match {} pixels",
                mask.len(),
                self.data.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `[width, height]`
    pub fn dims(&self) -> [usize; 2] {
        [self.width, self.height]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut s = Self::new(self.width, self.height, data)?;
        s.mask = self.mask.clone();
        Ok(s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// In-plane axes `(u, v)` of a slice taken perpendicular to `axis`; `u` runs fastest.
fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Copies one plane of `vol` perpendicular to `axis`.
///
/// For axis 2 the slice is `(x, y)`, for axis 1 it is `(x, z)` and for
/// axis 0 it is `(y, z)`; the first in-plane axis becomes the slice width.
pub fn extract_slice(vol: &Volume, axis: usize, index: usize) -> Result<Slice2D> {
    if axis > 2 {
        return Err(Error::IndexOutOfRange {
            axis: 3,
            index: axis,
            len: 3,
        });
    }
    let dims = vol.dims();
    if index >= dims[axis] {
        return Err(Error::IndexOutOfRange {
            axis,
            index,
            len: dims[axis],
        });
    }
    let (u_ax, v_ax) = plane_axes(axis);
    let (w, h) = (dims[u_ax], dims[v_ax]);
    let mut data = Vec::with_capacity(w * h);
    let mut mask = vol.mask().map(|_| Vec::with_capacity(w * h));
    for v in 0..h {
        for u in 0..w {
            let mut p = [0usize; 3];
            p[axis] = index;
            p[u_ax] = u;
            p[v_ax] = v;
            let i = vol.index(p[0], p[1], p[2]);
            data.push(vol.data[i]);
            if let (Some(m), Some(src)) = (mask.as_mut(), vol.mask()) {
                m.push(src[i]);
            }
        }
    }
    let s = Slice2D::new(w, h, data)?;
    match mask {
        Some(m) => s.with_mask(m),
        None => Ok(s),
    }
}

/// Writes `slice` back into plane `index` of `vol`, the inverse of [`extract_slice`].
pub fn embed_slice(vol: &Volume, axis: usize, index: usize, slice: &Slice2D) -> Result<Volume> {
    let dims = vol.dims();
    if axis > 2 || index >= dims[axis] {
        return Err(Error::IndexOutOfRange {
            axis,
            index,
            len: dims.get(axis).copied().unwrap_or(0),
        });
    }
    let (u_ax, v_ax) = plane_axes(axis);
    if slice.width() != dims[u_ax] || slice.height() != dims[v_ax] {
        return Err(Error::dims(
            [dims[u_ax], dims[v_ax]],
            [slice.width(), slice.height()],
        ));
    }
    let mut data = vol.data().to_vec();
    for v in 0..slice.height() {
        for u in 0..slice.width() {
            let mut p = [0usize; 3];
            p[axis] = index;
            p[u_ax] = u;
            p[v_ax] = v;
            data[vol.index(p[0], p[1], p[2])] = slice.get(u, v);
        }
    }
    vol.with_data(data)
}
