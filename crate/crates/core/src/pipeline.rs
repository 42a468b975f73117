//! Distortion correction through a synthetic contrast: translate the
//! undistorted structural image into the distorted modality, register the
//! distorted image onto that synthetic target, and resample.

use crate::cyclegan::Generator;
use crate::error::Result;
use crate::register::{register_demons, warp_apply, RegConfig, Registration};
use crate::volume::Slice2D;

#[derive(Debug, Clone)]
pub struct Correction {
    pub synthetic: Slice2D,
    pub corrected: Slice2D,
    pub registration: Registration,
}

/// `gen` maps the structural contrast of `reference` to the contrast of
/// `distorted`. The warp found maps reference coordinates into `distorted`.
pub fn correct_distortion(
    gen: &Generator,
    distorted: &Slice2D,
    reference: &Slice2D,
    cfg: &RegConfig,
) -> Result<Correction> {
    let synthetic = gen.translate(reference)?;
    let registration = register_demons(distorted, &synthetic, cfg)?;
    let corrected = warp_apply(distorted, &registration.warp)?;
    Ok(Correction {
        synthetic,
        corrected,
        registration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cyclegan::GeneratorConfig;
    use crate::phantom::make_warp;
    use rand::SeedableRng;

    #[test]
    fn shapes_and_inputs_flow_through() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let gen = Generator::new(GeneratorConfig { base_channels: 2, n_res_blocks: 1, ..Default::default() }, "g", &mut rng).unwrap();
        let img = Slice2D::from_fn(16, 16, |x, y| ((x * y) % 5) as f64 / 5.0).unwrap();
        let distorted = warp_apply(&img, &make_warp([16, 16], 1.0, 4.0, 2)).unwrap();
        let c = correct_distortion(&gen, &distorted, &img, &RegConfig::default()).unwrap();
        assert_eq!(c.synthetic, gen.translate(&img).unwrap());
        assert_eq!(c.corrected, warp_apply(&distorted, &c.registration.warp).unwrap());
        assert_eq!(c.corrected.dims(), [16, 16]);
    }
}
