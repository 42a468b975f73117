//! Dense 2D displacement fields and demons registration.
//!
//! A [`WarpField`] `d` resamples an image as `out(x) = img(x + d(x))`, so a
//! registration of `moving` onto `fixed` looks for `d` with
//! `moving(x + d(x)) ≈ fixed(x)`.

mod io;

pub use io::{read_warp, write_warp};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_blur;
use crate::volume::Slice2D;

#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl WarpField {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if n == 0 || dx.len() != n || dy.len() != n {
            return Err(Error::dims(
                format!("{width}x{height}"),
                format!("dx {} / dy {} values", dx.len(), dy.len()),
            ));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("warp field".into()));
        }
        Ok(Self {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::uniform(width, height, 0.0, 0.0)
    }

    pub fn uniform(width: usize, height: usize, dx: f64, dy: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dx: vec![dx; n],
            dy: vec![dy; n],
        }
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

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    fn check(&self, dims: [usize; 2]) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::dims(self.dims(), dims));
        }
        Ok(())
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.dx.iter().zip(&self.dy).map(|(a, b)| a.hypot(*b)).collect()
    }

    /// Mean displacement length over `mask` (or every pixel).
    pub fn mean_magnitude(&self, mask: Option<&[bool]>) -> f64 {
        masked_mean(&self.magnitudes(), mask)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().into_iter().fold(0.0, f64::max)
    }

    /// Mean `|self − other|` over `mask`, the endpoint error.
    pub fn endpoint_error(&self, other: &WarpField, mask: Option<&[bool]>) -> Result<f64> {
        self.check(other.dims())?;
        let e: Vec<f64> = (0..self.dx.len())
            .map(|i| (self.dx[i] - other.dx[i]).hypot(self.dy[i] - other.dy[i]))
            .collect();
        Ok(masked_mean(&e, mask))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            dx: self.dx.iter().map(|v| v * s).collect(),
            dy: self.dy.iter().map(|v| v * s).collect(),
        }
    }

    /// Determinant of `I + ∇d` by central differences (one-sided at edges).
    pub fn jacobian_det(&self) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let diff = |f: &[f64], x: usize, y: usize, along_x: bool| -> f64 {
            let (lo, hi, n) = if along_x { (x.saturating_sub(1), (x + 1).min(w - 1), w) } else { (y.saturating_sub(1), (y + 1).min(h - 1), h) };
            if n == 1 {
                return 0.0;
            }
            let at = |i: usize| if along_x { f[y * w + i] } else { f[i * w + x] };
            (at(hi) - at(lo)) / (hi - lo) as f64
        };
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let a = 1.0 + diff(&self.dx, x, y, true);
                let b = diff(&self.dx, x, y, false);
                let c = diff(&self.dy, x, y, true);
                let d = 1.0 + diff(&self.dy, x, y, false);
                out.push(a * d - b * c);
            }
        }
        out
    }

    fn smoothed(&self, sigma: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            dx: gaussian_blur(&self.dx, self.width, self.height, sigma),
            dy: gaussian_blur(&self.dy, self.width, self.height, sigma),
        }
    }
}

fn masked_mean(v: &[f64], mask: Option<&[bool]>) -> f64 {
    let (s, n) = v
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.map_or(true, |m| m[*i]))
        .fold((0.0, 0usize), |(s, n), (_, x)| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Bilinear sample of a row-major grid; coordinates are clamped to the grid.
#[inline]
pub(crate) fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn resample(data: &[f64], w: usize, h: usize, warp: &WarpField) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.push(bilinear(data, w, h, x as f64 + warp.dx[i], y as f64 + warp.dy[i]));
        }
    }
    out
}

/// `out(x, y) = img(x + dx, y + dy)` with bilinear interpolation; samples
/// outside the image take the nearest border value.
pub fn warp_apply(img: &Slice2D, w: &WarpField) -> Result<Slice2D> {
    w.check(img.dims())?;
    Slice2D::new(img.width(), img.height(), resample(img.data(), img.width(), img.height(), w))
}

/// `(w1 ∘ w2)(x) = w2(x) + w1(x + w2(x))`: applying the result equals
/// applying `w1` and then `w2`.
pub fn warp_compose(w1: &WarpField, w2: &WarpField) -> Result<WarpField> {
    w1.check(w2.dims())?;
    let (w, h) = (w1.width, w1.height);
    let mut dx = Vec::with_capacity(w * h);
    let mut dy = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (px, py) = (x as f64 + w2.dx[i], y as f64 + w2.dy[i]);
            dx.push(w2.dx[i] + bilinear(&w1.dx, w, h, px, py));
            dy.push(w2.dy[i] + bilinear(&w1.dy, w, h, px, py));
        }
    }
    WarpField::new(w, h, dx, dy)
}

/// Inverse by fixed-point iteration of `v(x) = −w(x + v(x))`.
pub fn warp_invert(w: &WarpField, iterations: usize) -> WarpField {
    let (wd, ht) = (w.width, w.height);
    let mut v = WarpField::zeros(wd, ht);
    for _ in 0..iterations {
        let mut next = WarpField::zeros(wd, ht);
        for y in 0..ht {
            for x in 0..wd {
                let i = y * wd + x;
                let (px, py) = (x as f64 + v.dx[i], y as f64 + v.dy[i]);
                next.dx[i] = -bilinear(&w.dx, wd, ht, px, py);
                next.dy[i] = -bilinear(&w.dy, wd, ht, px, py);
            }
        }
        v = next;
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub n_levels: usize,
    pub iters_per_level: usize,
    /// Smoothing of each update (fluid regularisation), pixels.
    pub sigma_fluid: f64,
    /// Smoothing of the accumulated field (elastic regularisation), pixels.
    pub sigma_elastic: f64,
    pub step_scale: f64,
    /// A level stops once the relative MSE decrease of an iteration falls below this.
    pub convergence_tol: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            n_levels: 3,
            iters_per_level: 150,
            sigma_fluid: 1.0,
            sigma_elastic: 1.5,
            step_scale: 1.0,
            convergence_tol: 1e-5,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_levels >= 1
            && self.sigma_fluid >= 0.0
            && self.sigma_elastic >= 0.0
            && self.step_scale > 0.0
            && self.convergence_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid registration config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    /// 0 is the coarsest level.
    pub level: usize,
    pub iteration: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub warp: WarpField,
    /// MSE between the warped moving and the fixed image (both normalised),
    /// starting with the value before the first iteration of each level.
    pub residuals: Vec<Residual>,
    pub min_jacobian: f64,
}

fn normalise(data: &[f64]) -> Vec<f64> {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let r = hi - lo;
    if r > 0.0 {
        data.iter().map(|v| (v - lo) / r).collect()
    } else {
        vec![0.0; data.len()]
    }
}

/// Gaussian blur then keep every second pixel.
fn downsample(data: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let b = gaussian_blur(data, w, h, 1.0);
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for x in 0..nw {
            out.push(b[2 * y * w + 2 * x]);
        }
    }
    (out, nw, nh)
}

/// Bilinear upsampling to `w x h`, displacements doubled.
fn upsample(f: &WarpField, w: usize, h: usize) -> WarpField {
    let mut dx = Vec::with_capacity(w * h);
    let mut dy = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (x as f64 / 2.0, y as f64 / 2.0);
            dx.push(2.0 * bilinear(&f.dx, f.width, f.height, cx, cy));
            dy.push(2.0 * bilinear(&f.dy, f.width, f.height, cx, cy));
        }
    }
    WarpField {
        width: w,
        height: h,
        dx,
        dy,
    }
}

fn gradient(data: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            if xr > xl {
                gx[i] = (data[y * w + xr] - data[y * w + xl]) / (xr - xl) as f64;
            }
            if yd > yu {
                gy[i] = (data[yd * w + x] - data[yu * w + x]) / (yd - yu) as f64;
            }
        }
    }
    (gx, gy)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Runs one pyramid level starting from `warp`, appending to `residuals`.
fn demons_level(
    moving: &[f64],
    fixed: &[f64],
    w: usize,
    h: usize,
    mut warp: WarpField,
    cfg: &RegConfig,
    level: usize,
    residuals: &mut Vec<Residual>,
) -> Result<WarpField> {
    let (fgx, fgy) = gradient(fixed, w, h);
    let mut warped = resample(moving, w, h, &warp);
    let mut err = mse(&warped, fixed);
    residuals.push(Residual {
        level,
        iteration: 0,
        mse: err,
    });
    for it in 1..=cfg.iters_per_level {
        let (mgx, mgy) = gradient(&warped, w, h);
        let mut ux = vec![0.0; w * h];
        let mut uy = vec![0.0; w * h];
        for i in 0..w * h {
            let diff = fixed[i] - warped[i];
            let jx = 0.5 * (fgx[i] + mgx[i]);
            let jy = 0.5 * (fgy[i] + mgy[i]);
            let den = jx * jx + jy * jy + diff * diff;
            if den > 1e-12 {
                ux[i] = cfg.step_scale * diff * jx / den;
                uy[i] = cfg.step_scale * diff * jy / den;
            }
        }
        let update = WarpField {
            width: w,
            height: h,
            dx: ux,
            dy: uy,
        }
        .smoothed(cfg.sigma_fluid);
        let candidate = warp_compose(&warp, &update)?.smoothed(cfg.sigma_elastic);
        let cand_warped = resample(moving, w, h, &candidate);
        let cand_err = mse(&cand_warped, fixed);
        if !cand_err.is_finite() {
            return Err(Error::NonFinite(format!("registration residual at level {level}")));
        }
        if cand_err > err {
            break;
        }
        let rel = (err - cand_err) / err.max(f64::MIN_POSITIVE);
        warp = candidate;
        warped = cand_warped;
        err = cand_err;
        residuals.push(Residual {
            level,
            iteration: it,
            mse: err,
        });
        if rel < cfg.convergence_tol {
            break;
        }
    }
    Ok(warp)
}

/// Registers `moving` onto `fixed` with coarse-to-fine demons on SSD.
/// Both images are rescaled to `[0, 1]` first.
pub fn register_demons(moving: &Slice2D, fixed: &Slice2D, cfg: &RegConfig) -> Result<Registration> {
    if moving.dims() != fixed.dims() {
        return Err(Error::dims(moving.dims(), fixed.dims()));
    }
    cfg.validate()?;
    if moving.data().iter().chain(fixed.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("registration input image".into()));
    }
    let mut pyramid = vec![(normalise(moving.data()), normalise(fixed.data()), moving.width(), moving.height())];
    for _ in 1..cfg.n_levels {
        let (m, f, w, h) = pyramid.last().expect("non-empty");
        if *w < 8 || *h < 8 {
            break;
        }
        let (md, nw, nh) = downsample(m, *w, *h);
        let (fd, _, _) = downsample(f, *w, *h);
        pyramid.push((md, fd, nw, nh));
    }
    let mut residuals = Vec::new();
    let n = pyramid.len();
    let mut warp: Option<WarpField> = None;
    for (k, (m, f, w, h)) in pyramid.iter().rev().enumerate() {
        let start = match warp {
            Some(ref c) => upsample(c, *w, *h),
            None => WarpField::zeros(*w, *h),
        };
        warp = Some(demons_level(m, f, *w, *h, start, cfg, k, &mut residuals)?);
        log::debug!("demons level {}/{n}: mse {:.3e}", k + 1, residuals.last().map_or(0.0, |r| r.mse));
    }
    let warp = warp.expect("at least one level");
    let min_jacobian = warp.jacobian_det().into_iter().fold(f64::INFINITY, f64::min);
    Ok(Registration {
        warp,
        residuals,
        min_jacobian,
    })
}
