//! Windowed structural similarity (SSIM) and its mask average (MSSIM).
//!
//! Local moments are weighted by a Gaussian or uniform window that is cropped
//! at the image border and renormalized, so no intensities are invented
//! outside the image. A pixel contributes to MSSIM iff its centre lies inside
//! the mask; its window may still reach outside.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{extract_slice, Slice2D, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Window {
    Gaussian { sigma: f64 },
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window_radius: usize,
    pub window: Window,
    pub k1: f64,
    pub k2: f64,
    /// Fixed dynamic range `L`; `None` uses `max − min` of both images over the mask.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimParams {
    /// 11x11 Gaussian window with σ = 1.5, k1 = 0.01, k2 = 0.03.
    fn default() -> Self {
        Self {
            window_radius: 5,
            window: Window::Gaussian { sigma: 1.5 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range: None,
        }
    }
}

impl SsimParams {
    pub fn uniform(radius: usize) -> Self {
        Self {
            window_radius: radius,
            window: Window::Uniform,
            ..Self::default()
        }
    }

    pub fn with_range(mut self, l: f64) -> Self {
        self.dynamic_range = Some(l);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_radius < 1 {
            return Err(Error::Config("SSIM window radius must be >= 1".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config("SSIM k1 and k2 must be positive".into()));
        }
        if let Window::Gaussian { sigma } = self.window {
            if !(sigma > 0.0) {
                return Err(Error::Config("Gaussian window sigma must be positive".into()));
            }
        }
        if let Some(l) = self.dynamic_range {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config("dynamic range must be positive".into()));
            }
        }
        Ok(())
    }

    /// `(c1, c2) = ((k1 L)², (k2 L)²)`
    pub fn constants(&self, l: f64) -> (f64, f64) {
        ((self.k1 * l).powi(2), (self.k2 * l).powi(2))
    }

    /// One-dimensional window profile of length `2r + 1`, normalized to unit sum.
    pub fn profile(&self) -> Vec<f64> {
        let r = self.window_radius as i64;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| match self.window {
                Window::Gaussian { sigma } => (-((i * i) as f64) / (2.0 * sigma * sigma)).exp(),
                Window::Uniform => 1.0,
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsimResult {
    pub map: Slice2D,
    pub mssim: f64,
}

/// Weighted local moments at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LocalStats {
    pub mu_a: f64,
    pub mu_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

pub(crate) fn local_stats(a: &Slice2D, b: &Slice2D, p: &SsimParams) -> Vec<LocalStats> {
    let (w, h) = (a.width(), a.height());
    let r = p.window_radius as isize;
    let prof = p.profile();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        let y0 = (y - r).max(0);
        let y1 = (y + r).min(h as isize - 1);
        for x in 0..w as isize {
            let x0 = (x - r).max(0);
            let x1 = (x + r).min(w as isize - 1);
            let (mut wsum, mut sa, mut sb) = (0.0, 0.0, 0.0);
            for yy in y0..=y1 {
                let wy = prof[(yy - y + r) as usize];
                let row = yy as usize * w;
                for xx in x0..=x1 {
                    let wt = wy * prof[(xx - x + r) as usize];
                    let i = row + xx as usize;
                    wsum += wt;
                    sa += wt * ad[i];
                    sb += wt * bd[i];
                }
            }
            let (mu_a, mu_b) = (sa / wsum, sb / wsum);
            let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
            for yy in y0..=y1 {
                let wy = prof[(yy - y + r) as usize];
                let row = yy as usize * w;
                for xx in x0..=x1 {
                    let wt = wy * prof[(xx - x + r) as usize];
                    let i = row + xx as usize;
                    let (da, db) = (ad[i] - mu_a, bd[i] - mu_b);
                    va += wt * (da * da);
                    vb += wt * (db * db);
                    cab += wt * (da * db);
                }
            }
            out.push(LocalStats {
                mu_a,
                mu_b,
                var_a: va / wsum,
                var_b: vb / wsum,
                cov: cab / wsum,
            });
        }
    }
    out
}

fn resolve_mask<'m>(a: &'m Slice2D, b: &'m Slice2D, mask: Option<&'m [bool]>) -> Result<Option<&'m [bool]>> {
    if let (Some(ma), Some(mb)) = (a.mask(), b.mask()) {
        if ma != mb {
            return Err(Error::Config("images carry different masks".into()));
        }
    }
    let m = mask.or(a.mask()).or(b.mask());
    if let Some(m) = m {
        if m.len() != a.data().len() {
            return Err(Error::dims(format!("mask of {} pixels", m.len()), a.dims()));
        }
        if !m.iter().any(|&v| v) {
            return Err(Error::EmptyMask);
        }
    }
    Ok(m)
}

/// Dynamic range over the mask: `max(a, b) − min(a, b)`, or 1 when both images are one constant.
pub fn auto_range(a: &Slice2D, b: &Slice2D, mask: Option<&[bool]>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, (&va, &vb)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        lo = lo.min(va).min(vb);
        hi = hi.max(va).max(vb);
    }
    let l = hi - lo;
    if l > 0.0 && l.is_finite() {
        l
    } else {
        1.0
    }
}

/// SSIM map between `a` and `b` and its mean over `mask`.
///
/// The explicit `mask` wins over masks carried by the slices; without any
/// mask the whole image is averaged.
pub fn ssim_map(a: &Slice2D, b: &Slice2D, mask: Option<&[bool]>, p: &SsimParams) -> Result<SsimResult> {
    if a.dims() != b.dims() {
        return Err(Error::dims(a.dims(), b.dims()));
    }
    p.validate()?;
    let mask = resolve_mask(a, b, mask)?;
    let l = p.dynamic_range.unwrap_or_else(|| auto_range(a, b, mask));
    let (c1, c2) = p.constants(l);

    let map: Vec<f64> = local_stats(a, b, p)
        .iter()
        .map(|s| {
            let num = (2.0 * s.mu_a * s.mu_b + c1) * (2.0 * s.cov + c2);
            let den = (s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1) * (s.var_a + s.var_b + c2);
            (num / den).clamp(-1.0, 1.0)
        })
        .collect();

    let (sum, count) = map
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.map_or(true, |m| m[*i]))
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    let mut slice = Slice2D::new(a.width(), a.height(), map)?;
    if let Some(m) = mask {
        slice = slice.with_mask(m.to_vec())?;
    }
    Ok(SsimResult {
        map: slice,
        mssim: sum / count as f64,
    })
}

/// MSSIM for each requested slice of two volumes.
pub fn mssim_volume(
    a: &Volume,
    b: &Volume,
    mask: Option<&[bool]>,
    p: &SsimParams,
    axis: usize,
    slices: &[usize],
) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::dims(a.dims(), b.dims()));
    }
    let mask_vol = match mask.or(a.mask()).or(b.mask()) {
        Some(m) => Some(
            Volume::new(a.dims(), a.spacing(), m.iter().map(|&v| f64::from(u8::from(v))).collect())?,
        ),
        None => None,
    };
    slices
        .par_iter()
        .map(|&i| {
            let sa = extract_slice(a, axis, i)?.without_mask();
            let sb = extract_slice(b, axis, i)?.without_mask();
            let m = match &mask_vol {
                Some(mv) => Some(extract_slice(mv, axis, i)?.data().iter().map(|&v| v != 0.0).collect::<Vec<_>>()),
                None => None,
            };
            Ok(ssim_map(&sa, &sb, m.as_deref(), p)?.mssim)
        })
        .collect()
}
