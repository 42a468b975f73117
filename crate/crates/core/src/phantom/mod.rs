//! Synthetic ground truth: tensor phantoms with simulated DWI, 2D image
//! pairs for translation and smooth random warps.

mod images;

pub use images::{
    fa_slice_phantom, make_translation_dataset, make_warp, DomainMap, PairConfig, TranslationDataset,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dti::{eig_sym3, Tensor3x3Sym, TensorField};
use crate::error::{Error, Result};
use crate::volume::{GradientScheme, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    /// Voxels with `min <= index < max` on every axis.
    Box { min: [usize; 3], max: [usize; 3] },
    /// Voxel centres within `radius` of `center`, in voxel units.
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        match self {
            Shape::Box { min, max } => {
                let p = [x, y, z];
                (0..3).all(|k| p[k] >= min[k] && p[k] < max[k])
            }
            Shape::Sphere { center, radius } => {
                let d2: f64 = [x, y, z]
                    .iter()
                    .zip(center)
                    .map(|(&p, c)| (p as f64 - c).powi(2))
                    .sum();
                d2 <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub shape: Shape,
    /// `[dxx, dyy, dzz, dxy, dxz, dyz]` in mm²/s.
    pub tensor: [f64; 6],
    pub s0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Noise {
    #[default]
    None,
    Gaussian { sigma: f64 },
    /// Magnitude of a complex signal with independent Gaussian parts.
    Rician { sigma: f64 },
}

/// Later regions overwrite earlier ones; voxels outside every region are
/// background with `S0 = 0` and are left out of the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub regions: Vec<Region>,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default)]
    pub seed: u64,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("phantom dims {:?} must be positive", self.dims)));
        }
        for (i, r) in self.regions.iter().enumerate() {
            let e = eig_sym3(&Tensor3x3Sym::from_components(r.tensor));
            if !(e.lambda3() > 0.0) {
                return Err(Error::Config(format!("region {i}: tensor is not positive definite")));
            }
            if !(r.s0 >= 0.0) {
                return Err(Error::Config(format!("region {i}: s0 must be non-negative")));
            }
        }
        let sigma = match self.noise {
            Noise::None => 0.0,
            Noise::Gaussian { sigma } | Noise::Rician { sigma } => sigma,
        };
        if !(sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Ground-truth tensors and `S0`, with the region mask as `fit_ok`.
    pub fn truth(&self) -> Result<TensorField> {
        self.validate()?;
        let [nx, ny, nz] = self.dims;
        let n = nx * ny * nz;
        let mut tf = TensorField {
            dims: self.dims,
            spacing: self.spacing,
            tensors: vec![Tensor3x3Sym::zero(); n],
            s0: vec![0.0; n],
            fit_ok: vec![false; n],
            clamped_voxels: 0,
        };
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    if let Some(r) = self.regions.iter().rev().find(|r| r.shape.contains(x, y, z)) {
                        tf.tensors[i] = Tensor3x3Sym::from_components(r.tensor);
                        tf.s0[i] = r.s0;
                        tf.fit_ok[i] = true;
                    }
                }
            }
        }
        Ok(tf)
    }
}

/// Simulated acquisition and the field that produced it.
#[derive(Debug, Clone)]
pub struct DwiPhantom {
    /// One volume per scheme entry, carrying the region mask.
    pub volumes: Vec<Volume>,
    pub truth: TensorField,
}

/// `S_i = S0 exp(−b_i g_iᵀ D g_i)` per voxel, followed by the configured noise.
pub fn simulate_dwi(cfg: &PhantomConfig, scheme: &GradientScheme) -> Result<DwiPhantom> {
    let truth = cfg.truth()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut volumes = Vec::with_capacity(scheme.len());
    for (&b, g) in scheme.bvals().iter().zip(scheme.dirs()) {
        let mut data: Vec<f64> = truth
            .tensors
            .iter()
            .zip(&truth.s0)
            .map(|(d, &s0)| s0 * (-b * d.quadratic_form(g)).exp())
            .collect();
        match cfg.noise {
            Noise::None => {}
            Noise::Gaussian { sigma } if sigma > 0.0 => {
                let n = Normal::new(0.0, sigma).expect("sigma checked");
                data.iter_mut().for_each(|s| *s += n.sample(&mut rng));
            }
            Noise::Rician { sigma } if sigma > 0.0 => {
                let n = Normal::new(0.0, sigma).expect("sigma checked");
                data.iter_mut().for_each(|s| {
                    let (re, im) = (*s + n.sample(&mut rng), n.sample(&mut rng));
                    *s = re.hypot(im);
                });
            }
            _ => {}
        }
        volumes.push(Volume::new(cfg.dims, cfg.spacing, data)?.with_mask(truth.fit_ok.clone())?);
    }
    Ok(DwiPhantom { volumes, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dti::{fit_volume, scalar_maps};

    fn two_region(noise: Noise) -> PhantomConfig {
        PhantomConfig {
            dims: [6, 5, 4],
            spacing: [2.0, 2.0, 2.0],
            regions: vec![
                Region {
                    shape: Shape::Box {
                        min: [0, 0, 0],
                        max: [6, 5, 4],
                    },
                    tensor: [0.8e-3, 0.8e-3, 0.8e-3, 0.0, 0.0, 0.0],
                    s0: 900.0,
                },
                Region {
                    shape: Shape::Sphere {
                        center: [2.5, 2.0, 1.5],
                        radius: 1.6,
                    },
                    tensor: [1.7e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0],
                    s0: 1000.0,
                },
            ],
            noise,
            seed: 4,
        }
    }

    fn scheme() -> GradientScheme {
        let dirs: Vec<[f64; 3]> = (0..12)
            .map(|i| {
                let t = i as f64 * 0.9;
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / 12.0;
                let r = (1.0 - z * z).sqrt();
                [r * t.cos(), r * t.sin(), z]
            })
            .collect();
        GradientScheme::single_shell(1, 1000.0, &dirs).unwrap()
    }

    #[test]
    fn b0_volumes_equal_s0() {
        let s = GradientScheme::new(vec![0.0, 0.0], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let p = simulate_dwi(&two_region(Noise::None), &s).unwrap();
        for v in &p.volumes {
            assert_eq!(v.data(), p.truth.s0.as_slice());
        }
    }

    #[test]
    fn isotropic_signal_ignores_direction() {
        let mut cfg = two_region(Noise::None);
        cfg.regions.truncate(1);
        let p = simulate_dwi(&cfg, &scheme()).unwrap();
        let want = 900.0 * (-1000.0f64 * 0.8e-3).exp();
        for v in &p.volumes[1..] {
            assert!(v.data().iter().all(|s| (s - want).abs() < 1e-9));
        }
    }

    #[test]
    fn single_direction_attenuation() {
        let cfg = PhantomConfig {
            dims: [1, 1, 1],
            spacing: [1.0; 3],
            regions: vec![Region {
                shape: Shape::Box {
                    min: [0; 3],
                    max: [1; 3],
                },
                tensor: [1.7e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0],
                s0: 1.0,
            }],
            noise: Noise::None,
            seed: 0,
        };
        let s = GradientScheme::new(vec![1000.0], vec![[1.0, 0.0, 0.0]]).unwrap();
        let p = simulate_dwi(&cfg, &s).unwrap();
        let r = p.volumes[0].data()[0];
        assert!((r - (-1.7f64).exp()).abs() < 1e-15);
        assert!((r - 0.1827).abs() < 1e-4);
    }

    #[test]
    fn noiseless_fit_recovers_truth() {
        let p = simulate_dwi(&two_region(Noise::None), &scheme()).unwrap();
        let tf = fit_volume(&p.volumes, &scheme(), None).unwrap();
        for (i, ok) in p.truth.fit_ok.iter().enumerate() {
            assert_eq!(tf.fit_ok[i], *ok);
            if *ok {
                assert!(tf.tensors[i].sub(&p.truth.tensors[i]).max_abs() < 1e-12);
            }
        }
        let (fa, _) = scalar_maps(&tf).unwrap();
        assert!(fa.data().iter().any(|&v| v > 0.7));
    }

    #[test]
    fn noise_is_seeded() {
        let cfg = two_region(Noise::Rician { sigma: 20.0 });
        let a = simulate_dwi(&cfg, &scheme()).unwrap();
        let b = simulate_dwi(&cfg, &scheme()).unwrap();
        assert_eq!(a.volumes, b.volumes);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(simulate_dwi(&other, &scheme()).unwrap().volumes, a.volumes);
        assert!(a.volumes.iter().all(|v| v.data().iter().all(|&s| s >= 0.0)));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut s = two_region(Noise::None);
        s.regions[0].tensor = [1e-3, -1e-3, 1e-3, 0.0, 0.0, 0.0];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = two_region(Noise::Gaussian { sigma: -1.0 });
        assert!(s.validate().is_err());
    }

    #[test]
    fn json_is_strict() {
        let s = two_region(Noise::Rician { sigma: 2.0 });
        let text = serde_json::to_string(&s).unwrap();
        let back: PhantomConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad = text.replacen("\"seed\"", "\"sede\"", 1);
        assert!(serde_json::from_str::<PhantomConfig>(&bad).is_err());
    }
}
