//! Separable Gaussian smoothing of 2D grids.

/// Normalised taps for `sigma`, radius `ceil(3 sigma)`. `sigma <= 0` gives
/// the identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Blurs a row-major `width x height` grid; samples beyond the edge repeat
/// the border value.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return data.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..][..width];
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * row[clampi(x as isize + j as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[clampi(y as isize + j as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(1.3);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..4 {
            assert_eq!(k[i], k[8 - i]);
        }
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn constants_and_ramps_survive() {
        let c = vec![2.5; 30];
        assert!(gaussian_blur(&c, 6, 5, 1.0).iter().all(|v| (v - 2.5).abs() < 1e-14));
        // linear ramps are preserved away from the clamped border
        let ramp: Vec<f64> = (0..20 * 3).map(|i| (i % 20) as f64).collect();
        let b = gaussian_blur(&ramp, 20, 3, 1.0);
        for x in 4..16 {
            assert!((b[20 + x] - x as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_conserves_interior_mass() {
        let mut d = vec![0.0; 21 * 21];
        d[10 * 21 + 10] = 1.0;
        let b = gaussian_blur(&d, 21, 21, 1.5);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
