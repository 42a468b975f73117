use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dti::{eig_sym3, fa, Tensor3x3Sym};
use crate::error::{Error, Result};
use crate::filter::gaussian_blur;
use crate::register::WarpField;
use crate::volume::Slice2D;

/// Invertible intensity map from domain A to domain B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainMap {
    Identity,
    /// `b = 1 − a`
    Inversion,
    /// `b = blur(1 − a)` with a Gaussian of `sigma` pixels.
    InversionBlur { sigma: f64 },
}

impl Default for DomainMap {
    fn default() -> Self {
        DomainMap::InversionBlur { sigma: 0.7 }
    }
}

impl DomainMap {
    pub fn apply(&self, a: &Slice2D) -> Slice2D {
        match *self {
            DomainMap::Identity => a.clone(),
            DomainMap::Inversion => a.map(|v| 1.0 - v),
            DomainMap::InversionBlur { sigma } => {
                let inv: Vec<f64> = a.data().iter().map(|v| 1.0 - v).collect();
                a.with_data(gaussian_blur(&inv, a.width(), a.height(), sigma))
                    .expect("same dims")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub n_images: usize,
    /// `[width, height]`
    pub dims: [usize; 2],
    #[serde(default)]
    pub domain_map: DomainMap,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationDataset {
    pub set_a: Vec<Slice2D>,
    pub set_b: Vec<Slice2D>,
    /// `set_b[pairing[i]]` is the image of `set_a[i]`. Training never sees it.
    pub pairing: Vec<usize>,
}

impl TranslationDataset {
    pub fn partner_of(&self, i: usize) -> &Slice2D {
        &self.set_b[self.pairing[i]]
    }
}

/// Filled ellipse test with rotation `theta`.
fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64, theta: f64) -> bool {
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    let u = (c * dx + s * dy) / rx;
    let v = (-s * dx + c * dy) / ry;
    u * u + v * v <= 1.0
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
    value: f64,
}

/// A head-like ellipse holding a few inner ellipses; values in `[0, 1]`.
fn head_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Slice2D {
    let (fw, fh) = (w as f64, h as f64);
    let head = Ellipse {
        cx: fw / 2.0 + rng.gen_range(-0.04..0.04) * fw,
        cy: fh / 2.0 + rng.gen_range(-0.04..0.04) * fh,
        rx: rng.gen_range(0.36..0.46) * fw,
        ry: rng.gen_range(0.38..0.47) * fh,
        theta: rng.gen_range(-0.2..0.2),
        value: rng.gen_range(0.3..0.45),
    };
    let inner: Vec<Ellipse> = (0..rng.gen_range(3..7))
        .map(|_| {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad = rng.gen_range(0.0..0.55);
            Ellipse {
                cx: head.cx + rad * head.rx * ang.cos(),
                cy: head.cy + rad * head.ry * ang.sin(),
                rx: rng.gen_range(0.08..0.3) * head.rx,
                ry: rng.gen_range(0.08..0.3) * head.ry,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
                value: rng.gen_range(0.05..0.95),
            }
        })
        .collect();
    let img = Slice2D::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if !in_ellipse(px, py, head.cx, head.cy, head.rx, head.ry, head.theta) {
            return 0.0;
        }
        inner
            .iter()
            .rev()
            .find(|e| in_ellipse(px, py, e.cx, e.cy, e.rx, e.ry, e.theta))
            .map_or(head.value, |e| e.value)
    })
    .expect("positive dims");
    let smooth = gaussian_blur(img.data(), w, h, 0.5);
    img.with_data(smooth).expect("same dims")
}

/// Domain-A images and their shuffled domain-B partners.
pub fn make_translation_dataset(cfg: &PairConfig) -> Result<TranslationDataset> {
    if cfg.n_images == 0 || cfg.dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!(
            "translation dataset needs images and positive dims, got {} x {:?}",
            cfg.n_images, cfg.dims
        )));
    }
    if let DomainMap::InversionBlur { sigma } = cfg.domain_map {
        if !(sigma >= 0.0) {
            return Err(Error::Config("domain map blur sigma must be non-negative".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let set_a: Vec<Slice2D> = (0..cfg.n_images)
        .map(|_| head_image(cfg.dims[0], cfg.dims[1], &mut rng))
        .collect();
    let mut order: Vec<usize> = (0..cfg.n_images).collect();
    order.shuffle(&mut rng);
    // order[j] is the a-index shown at b position j
    let mut pairing = vec![0; cfg.n_images];
    for (j, &i) in order.iter().enumerate() {
        pairing[i] = j;
    }
    let set_b = order.iter().map(|&i| cfg.domain_map.apply(&set_a[i])).collect();
    Ok(TranslationDataset {
        set_a,
        set_b,
        pairing,
    })
}

/// Smooth random displacements scaled so the largest has length
/// `amplitude` pixels. `amplitude >= sigma` risks folding and is logged.
pub fn make_warp(dims: [usize; 2], amplitude: f64, sigma: f64, seed: u64) -> WarpField {
    let [w, h] = dims;
    if amplitude <= 0.0 {
        return WarpField::zeros(w, h);
    }
    if amplitude >= sigma {
        log::warn!("warp amplitude {amplitude} >= smoothness {sigma}: the field may fold");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // noise is drawn on a margin wide enough that the crop never sees the
    // replicated border of the blur
    let m = (3.0 * sigma).ceil() as usize;
    let (pw, ph) = (w + 2 * m, h + 2 * m);
    let mut noise = |_| -> Vec<f64> {
        let raw: Vec<f64> = (0..pw * ph).map(|_| rng.sample(StandardNormal)).collect();
        let b = gaussian_blur(&raw, pw, ph, sigma);
        (0..h).flat_map(|y| b[(y + m) * pw + m..][..w].to_vec()).collect()
    };
    let (dx, dy) = (noise(0), noise(1));
    let peak = dx.iter().zip(&dy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
    let s = if peak > 0.0 { amplitude / peak } else { 0.0 };
    WarpField::new(
        w,
        h,
        dx.iter().map(|v| v * s).collect(),
        dy.iter().map(|v| v * s).collect(),
    )
    .expect("finite field")
}

/// FA of an axially symmetric tensor with mean diffusivity `md` and the
/// given FA-like shape parameter.
fn region_fa(target: f64, md: f64) -> f64 {
    // λ1 = md (1 + 2k), λ2 = λ3 = md (1 − k) spans FA from 0 to 1 as k goes 0..1
    let k = target.clamp(0.0, 0.99);
    let t = Tensor3x3Sym::diag(md * (1.0 + 2.0 * k), md * (1.0 - k), md * (1.0 - k));
    fa(&eig_sym3(&t))
}

/// A 2D FA-like map: an elliptical head of low anisotropy with tract-like
/// bands and blobs of high anisotropy, plus mild smooth texture. Returns the
/// image and the head mask.
pub fn fa_slice_phantom(dims: [usize; 2], seed: u64) -> (Slice2D, Vec<bool>) {
    let [w, h] = dims;
    let (fw, fh) = (w as f64, h as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy, rx, ry) = (fw / 2.0, fh / 2.0, 0.44 * fw, 0.45 * fh);
    let regions: Vec<Ellipse> = (0..rng.gen_range(10..16))
        .map(|_| {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad = rng.gen_range(0.0..0.75);
            let elongated = rng.gen_bool(0.5);
            let major = rng.gen_range(0.15..0.4) * rx;
            Ellipse {
                cx: cx + rad * rx * ang.cos(),
                cy: cy + rad * ry * ang.sin(),
                rx: major,
                ry: if elongated { major * rng.gen_range(0.15..0.3) } else { major * rng.gen_range(0.5..1.0) },
                theta: rng.gen_range(0.0..std::f64::consts::PI),
                value: region_fa(rng.gen_range(0.3..0.9), 0.7e-3),
            }
        })
        .collect();
    let base = region_fa(0.15, 0.8e-3);
    let mut mask = Vec::with_capacity(w * h);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = in_ellipse(px, py, cx, cy, rx, ry, 0.0);
            mask.push(inside);
            data.push(if inside {
                regions
                    .iter()
                    .rev()
                    .find(|e| in_ellipse(px, py, e.cx, e.cy, e.rx, e.ry, e.theta))
                    .map_or(base, |e| e.value)
            } else {
                0.0
            });
        }
    }
    let raw: Vec<f64> = (0..w * h).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let texture = gaussian_blur(&raw, w, h, 2.0);
    let sharp = gaussian_blur(&data, w, h, 0.8);
    let img: Vec<f64> = sharp
        .iter()
        .zip(&texture)
        .zip(&mask)
        .map(|((v, t), &m)| if m { (v + 0.1 * t).clamp(0.0, 1.0) } else { *v })
        .collect();
    (Slice2D::new(w, h, img).expect("positive dims"), mask)
}
