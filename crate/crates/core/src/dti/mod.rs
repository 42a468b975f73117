//! Diffusion tensor estimation and the scalar maps derived from it.
//!
//! Signals follow `S = S0 exp(-b gᵀ D g)`. Taking logs gives a model linear
//! in `θ = [ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]`, which is fitted per voxel by
//! weighted least squares with weights `S²`.

mod eig;

pub use eig::{eig_sym3, EigenTriple};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{GradientScheme, Volume};

/// Normal equations with an (equilibrated) condition estimate above this are singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Symmetric diffusion tensor in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tensor3x3Sym {
    pub dxx: f64,
    pub dyy: f64,
    pub dzz: f64,
    pub dxy: f64,
    pub dxz: f64,
    pub dyz: f64,
}

impl Tensor3x3Sym {
    pub const fn new(dxx: f64, dyy: f64, dzz: f64, dxy: f64, dxz: f64, dyz: f64) -> Self {
        Self {
            dxx,
            dyy,
            dzz,
            dxy,
            dxz,
            dyz,
        }
    }

    pub const fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    pub const fn diag(a: f64, b: f64, c: f64) -> Self {
        Self::new(a, b, c, 0.0, 0.0, 0.0)
    }

    /// Reads the upper triangle; the lower one is ignored.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        Self::new(m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2])
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.dxx, self.dxy, self.dxz],
            [self.dxy, self.dyy, self.dyz],
            [self.dxz, self.dyz, self.dzz],
        ]
    }

    /// `[Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]`
    pub fn components(&self) -> [f64; 6] {
        [self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz]
    }

    pub fn from_components(c: [f64; 6]) -> Self {
        Self::new(c[0], c[1], c[2], c[3], c[4], c[5])
    }

    /// `gᵀ D g`
    pub fn quadratic_form(&self, g: &[f64; 3]) -> f64 {
        self.dxx * g[0] * g[0]
            + self.dyy * g[1] * g[1]
            + self.dzz * g[2] * g[2]
            + 2.0 * (self.dxy * g[0] * g[1] + self.dxz * g[0] * g[2] + self.dyz * g[1] * g[2])
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_components(self.components().map(|c| c * s))
    }

    pub fn sub(&self, o: &Self) -> Self {
        let (a, b) = (self.components(), o.components());
        Self::from_components(std::array::from_fn(|i| a[i] - b[i]))
    }

    pub fn max_abs(&self) -> f64 {
        self.components().iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        let c = self.components();
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2] + 2.0 * (c[3] * c[3] + c[4] * c[4] + c[5] * c[5]))
            .sqrt()
    }

    pub fn trace(&self) -> f64 {
        self.dxx + self.dyy + self.dzz
    }

    /// `R D Rᵀ`
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Self {
        let d = self.to_matrix();
        let mut rd = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rd[i][j] = (0..3).map(|k| r[i][k] * d[k][j]).sum();
            }
        }
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| rd[i][k] * r[j][k]).sum();
            }
        }
        Self::from_matrix(&out)
    }
}

/// Result of a single-voxel fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorFit {
    pub tensor: Tensor3x3Sym,
    pub s0: f64,
    pub ok: bool,
    /// Number of non-positive signals that were floored before the log.
    pub clamped: usize,
}

impl TensorFit {
    fn failed(clamped: usize) -> Self {
        Self {
            tensor: Tensor3x3Sym::zero(),
            s0: 0.0,
            ok: false,
            clamped,
        }
    }
}

/// Row `i` is `[1, -b gx², -b gy², -b gz², -2b gx gy, -2b gx gz, -2b gy gz]`.
pub fn design_matrix(scheme: &GradientScheme) -> Vec<[f64; 7]> {
    scheme
        .bvals()
        .iter()
        .zip(scheme.dirs())
        .map(|(&b, g)| {
            [
                1.0,
                -b * g[0] * g[0],
                -b * g[1] * g[1],
                -b * g[2] * g[2],
                -2.0 * b * g[0] * g[1],
                -2.0 * b * g[0] * g[2],
                -2.0 * b * g[1] * g[2],
            ]
        })
        .collect()
}

/// Replaces non-positive signals by `1e-6 · max(signal)`. Returns the count replaced.
fn clamp_signals(signals: &[f64]) -> (Vec<f64>, usize) {
    let max = signals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = 1e-6 * max;
    let mut n = 0;
    let out = signals
        .iter()
        .map(|&s| {
            if s > 0.0 {
                s
            } else {
                n += 1;
                floor
            }
        })
        .collect();
    (out, n)
}

/// Weighted least squares fit of the log-linearized signal model.
pub fn fit_wls(signals: &[f64], scheme: &GradientScheme) -> Result<TensorFit> {
    let design = design_matrix(scheme);
    fit_wls_with(signals, &design)
}

/// As [`fit_wls`] with a precomputed design matrix.
pub fn fit_wls_with(signals: &[f64], design: &[[f64; 7]]) -> Result<TensorFit> {
    if signals.len() != design.len() {
        return Err(Error::dims(
            format!("{} signals", signals.len()),
            format!("{} scheme entries", design.len()),
        ));
    }
    if signals.iter().any(|s| !s.is_finite()) {
        return Ok(TensorFit::failed(0));
    }
    let (clamped, n_clamped) = clamp_signals(signals);
    if !(clamped.iter().all(|&s| s > 0.0)) || design.len() < 7 {
        return Ok(TensorFit::failed(n_clamped));
    }
    let logs: Vec<f64> = clamped.iter().map(|s| s.ln()).collect();
    let weights: Vec<f64> = clamped.iter().map(|s| s * s).collect();
    let mut fit = solve_weighted(design, &logs, &weights);
    fit.clamped = n_clamped;
    Ok(fit)
}

/// Minimizes `Σ wᵢ (yᵢ − rowᵢ·θ)²` via equilibrated normal equations and Cholesky.
pub(crate) fn solve_weighted(design: &[[f64; 7]], y: &[f64], w: &[f64]) -> TensorFit {
    let mut ata = [[0.0f64; 7]; 7];
    let mut aty = [0.0f64; 7];
    for ((row, &yi), &wi) in design.iter().zip(y).zip(w) {
        for r in 0..7 {
            let wr = wi * row[r];
            aty[r] += wr * yi;
            for c in r..7 {
                ata[r][c] += wr * row[c];
            }
        }
    }
    for r in 0..7 {
        for c in 0..r {
            ata[r][c] = ata[c][r];
        }
    }
    // Jacobi equilibration: columns of the design carry b (~1e3) while column 0 is 1.
    let mut scale = [0.0f64; 7];
    for i in 0..7 {
        if !(ata[i][i] > 0.0) {
            return TensorFit::failed(0);
        }
        scale[i] = 1.0 / ata[i][i].sqrt();
    }
    let mut m = [[0.0f64; 7]; 7];
    for r in 0..7 {
        for c in 0..7 {
            m[r][c] = ata[r][c] * scale[r] * scale[c];
        }
    }
    let cond = condition_estimate(&m);
    if !(cond <= CONDITION_LIMIT) {
        return TensorFit::failed(0);
    }
    let Some(l) = cholesky7(&m) else {
        return TensorFit::failed(0);
    };
    let rhs: [f64; 7] = std::array::from_fn(|i| aty[i] * scale[i]);
    let z = cholesky_solve(&l, &rhs);
    let theta: [f64; 7] = std::array::from_fn(|i| z[i] * scale[i]);
    TensorFit {
        tensor: Tensor3x3Sym::new(theta[1], theta[2], theta[3], theta[4], theta[5], theta[6]),
        s0: theta[0].exp(),
        ok: theta.iter().all(|t| t.is_finite()),
        clamped: 0,
    }
}

fn cholesky7(m: &[[f64; 7]; 7]) -> Option<[[f64; 7]; 7]> {
    let mut l = [[0.0f64; 7]; 7];
    for i in 0..7 {
        for j in 0..=i {
            let s: f64 = m[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[[f64; 7]; 7], b: &[f64; 7]) -> [f64; 7] {
    let mut y = [0.0f64; 7];
    for i in 0..7 {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0f64; 7];
    for i in (0..7).rev() {
        x[i] = (y[i] - (i + 1..7).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// λmax/λmin of a symmetric positive semi-definite 7x7 matrix via cyclic Jacobi.
fn condition_estimate(m: &[[f64; 7]; 7]) -> f64 {
    let mut a = *m;
    for _ in 0..50 {
        let mut off = 0.0;
        for p in 0..7 {
            for q in p + 1..7 {
                off += a[p][q] * a[p][q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..7 {
            for q in p + 1..7 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..7 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..7 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (i, row) in a.iter().enumerate() {
        lo = lo.min(row[i]);
        hi = hi.max(row[i]);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Mean diffusivity; negative eigenvalues count as zero.
pub fn md(e: &EigenTriple) -> f64 {
    let [l1, l2, l3] = e.values.map(|l| l.max(0.0));
    (l1 + l2 + l3) / 3.0
}

/// Fractional anisotropy in [0, 1]; negative eigenvalues count as zero and
/// the zero tensor has FA 0.
pub fn fa(e: &EigenTriple) -> f64 {
    let [l1, l2, l3] = e.values.map(|l| l.max(0.0));
    let den = 2.0 * (l1 * l1 + l2 * l2 + l3 * l3);
    if den == 0.0 {
        return 0.0;
    }
    let num = (l1 - l2).powi(2) + (l2 - l3).powi(2) + (l3 - l1).powi(2);
    (num / den).sqrt().clamp(0.0, 1.0)
}

/// Per-voxel tensors with the unweighted signal and fit status.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub tensors: Vec<Tensor3x3Sym>,
    pub s0: Vec<f64>,
    pub fit_ok: Vec<bool>,
    /// Voxels in which at least one signal was floored before the log.
    pub clamped_voxels: usize,
}

impl TensorField {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// One volume per unique component, named `dxx`, `dyy`, `dzz`, `dxy`, `dxz`, `dyz`.
    pub fn component_volumes(&self) -> Result<Vec<(&'static str, Volume)>> {
        const NAMES: [&str; 6] = ["dxx", "dyy", "dzz", "dxy", "dxz", "dyz"];
        NAMES
            .iter()
            .enumerate()
            .map(|(k, &name)| {
                let data = self.tensors.iter().map(|t| t.components()[k]).collect();
                Ok((name, Volume::new(self.dims, self.spacing, data)?))
            })
            .collect()
    }

    pub fn s0_volume(&self) -> Result<Volume> {
        Volume::new(self.dims, self.spacing, self.s0.clone())
    }
}

/// Fits every voxel inside `mask` (or the first volume's mask, or everything).
pub fn fit_volume(dwi: &[Volume], scheme: &GradientScheme, mask: Option<&[bool]>) -> Result<TensorField> {
    let first = dwi
        .first()
        .ok_or_else(|| Error::InvalidVolume("no diffusion-weighted volumes".into()))?;
    if dwi.len() != scheme.len() {
        return Err(Error::dims(
            format!("{} volumes", dwi.len()),
            format!("{} scheme entries", scheme.len()),
        ));
    }
    for v in dwi {
        if v.dims() != first.dims() {
            return Err(Error::dims(first.dims(), v.dims()));
        }
    }
    let n = first.len();
    let mask = mask.or(first.mask());
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::dims(format!("mask of {} voxels", m.len()), first.dims()));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
    }
    scheme.check_identifiable()?;
    let design = design_matrix(scheme);

    let fits: Vec<TensorFit> = (0..n)
        .into_par_iter()
        .map(|i| {
            if mask.is_some_and(|m| !m[i]) {
                return TensorFit::failed(0);
            }
            let signals: Vec<f64> = dwi.iter().map(|v| v.data()[i]).collect();
            fit_wls_with(&signals, &design).unwrap_or(TensorFit::failed(0))
        })
        .collect();

    let mut tf = TensorField {
        dims: first.dims(),
        spacing: first.spacing(),
        tensors: Vec::with_capacity(n),
        s0: Vec::with_capacity(n),
        fit_ok: Vec::with_capacity(n),
        clamped_voxels: 0,
    };
    for f in fits {
        let ok = f.ok;
        tf.tensors.push(if ok { f.tensor } else { Tensor3x3Sym::zero() });
        tf.s0.push(if ok { f.s0 } else { 0.0 });
        tf.fit_ok.push(ok);
        tf.clamped_voxels += usize::from(f.clamped > 0);
    }
    Ok(tf)
}

/// FA and MD volumes; voxels without a successful fit are 0.
pub fn scalar_maps(tf: &TensorField) -> Result<(Volume, Volume)> {
    let (fa_data, md_data): (Vec<f64>, Vec<f64>) = tf
        .tensors
        .par_iter()
        .zip(&tf.fit_ok)
        .map(|(t, &ok)| {
            if !ok {
                return (0.0, 0.0);
            }
            let e = eig_sym3(t);
            (fa(&e), md(&e))
        })
        .unzip();
    let mask = tf.fit_ok.clone();
    Ok((
        Volume::new(tf.dims, tf.spacing, fa_data)?.with_mask(mask.clone())?,
        Volume::new(tf.dims, tf.spacing, md_data)?.with_mask(mask)?,
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Uniform random rotation from a normalized quaternion.
    pub(crate) fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|c| c / n);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Forward model, written out independently of the design matrix.
    fn forward(s0: f64, d: &Tensor3x3Sym, scheme: &GradientScheme) -> Vec<f64> {
        scheme
            .bvals()
            .iter()
            .zip(scheme.dirs())
            .map(|(&b, g)| {
                let m = d.to_matrix();
                let mut q = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        q += g[i] * m[i][j] * g[j];
                    }
                }
                s0 * (-b * q).exp()
            })
            .collect()
    }

    fn fibonacci_dirs(n: usize) -> Vec<[f64; 3]> {
        crate::volume::hemisphere_directions(n)
    }

    fn six_dirs() -> Vec<[f64; 3]> {
        let s = 0.5f64.sqrt();
        vec![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [s, s, 0.0],
            [s, 0.0, s],
            [0.0, s, s],
        ]
    }

    fn random_spd(rng: &mut impl Rng) -> Tensor3x3Sym {
        let l = [
            rng.gen_range(0.1e-3..3.0e-3),
            rng.gen_range(0.1e-3..3.0e-3),
            rng.gen_range(0.1e-3..3.0e-3),
        ];
        Tensor3x3Sym::diag(l[0], l[1], l[2]).rotated(&random_rotation(rng))
    }

    #[test]
    fn design_rows() {
        let scheme = GradientScheme::new(vec![0.0, 1000.0], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let a = design_matrix(&scheme);
        assert_eq!(a[0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(a[1], [1.0, -1000.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn design_row_reproduces_forward_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scheme = GradientScheme::single_shell(2, 2000.0, &fibonacci_dirs(20)).unwrap();
        let a = design_matrix(&scheme);
        for _ in 0..20 {
            let d = random_spd(&mut rng);
            let s0: f64 = rng.gen_range(100.0..2000.0);
            let theta = [s0.ln(), d.dxx, d.dyy, d.dzz, d.dxy, d.dxz, d.dyz];
            for (row, want) in a.iter().zip(forward(s0, &d, &scheme)) {
                let got = row.iter().zip(&theta).map(|(r, t)| r * t).sum::<f64>().exp();
                assert!(((got - want) / want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_fit_isotropic_six_directions() {
        let scheme = GradientScheme::single_shell(1, 1000.0, &six_dirs()).unwrap();
        let d = Tensor3x3Sym::diag(1e-3, 1e-3, 1e-3);
        let fit = fit_wls(&forward(1000.0, &d, &scheme), &scheme).unwrap();
        assert!(fit.ok);
        assert!(fit.tensor.sub(&d).max_abs() < 1e-9, "{:?}", fit.tensor);
        assert!((fit.s0 - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn equal_signals_give_zero_tensor() {
        let scheme = GradientScheme::single_shell(2, 1000.0, &six_dirs()).unwrap();
        let fit = fit_wls(&vec![321.0; 8], &scheme).unwrap();
        assert!(fit.ok);
        assert!(fit.tensor.max_abs() < 1e-15);
        assert!((fit.s0 - 321.0).abs() < 1e-9);
    }

    #[test]
    fn anisotropic_fa_matches_truth() {
        let scheme = GradientScheme::single_shell(1, 1000.0, &fibonacci_dirs(30)).unwrap();
        let d = Tensor3x3Sym::diag(1.7e-3, 0.3e-3, 0.3e-3);
        let fit = fit_wls(&forward(1000.0, &d, &scheme), &scheme).unwrap();
        // FA straight from the formula on the true eigenvalues.
        let (l1, l2, l3) = (1.7e-3f64, 0.3e-3f64, 0.3e-3f64);
        let truth = (((l1 - l2).powi(2) + (l2 - l3).powi(2) + (l3 - l1).powi(2))
            / (2.0 * (l1 * l1 + l2 * l2 + l3 * l3)))
            .sqrt();
        assert!((fa(&eig_sym3(&fit.tensor)) - truth).abs() < 1e-6);
    }

    #[test]
    fn signal_scheme_length_mismatch() {
        let scheme = GradientScheme::single_shell(1, 1000.0, &six_dirs()).unwrap();
        assert!(matches!(fit_wls(&[1.0; 6], &scheme), Err(Error::DimsMismatch { .. })));
    }

    #[test]
    fn degenerate_scheme_is_not_ok() {
        // all directions identical: Dyy, Dzz, ... are unidentifiable
        let scheme = GradientScheme::single_shell(1, 1000.0, &[[1.0, 0.0, 0.0]; 8]).unwrap();
        let fit = fit_wls(&[1000.0; 9], &scheme).unwrap();
        assert!(!fit.ok);
    }

    #[test]
    fn non_positive_signals_are_clamped() {
        let scheme = GradientScheme::single_shell(1, 1000.0, &fibonacci_dirs(12)).unwrap();
        let mut s = forward(1000.0, &Tensor3x3Sym::diag(1e-3, 1e-3, 1e-3), &scheme);
        s[3] = 0.0;
        s[5] = -2.0;
        let fit = fit_wls(&s, &scheme).unwrap();
        assert!(fit.ok);
        assert_eq!(fit.clamped, 2);
        assert!(fit.tensor.components().iter().all(|c| c.is_finite()));
    }

    /// Ordinary least squares by Householder QR, sharing nothing with `solve_weighted`.
    fn ols_householder(a: &[[f64; 7]], y: &[f64]) -> [f64; 7] {
        let m = a.len();
        let mut r: Vec<Vec<f64>> = a.iter().map(|row| row.to_vec()).collect();
        let mut b = y.to_vec();
        for k in 0..7 {
            let norm = (k..m).map(|i| r[i][k] * r[i][k]).sum::<f64>().sqrt();
            let alpha = if r[k][k] > 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = (0..m).map(|i| if i < k { 0.0 } else { r[i][k] }).collect();
            v[k] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            for j in k..7 {
                let dotp: f64 = (k..m).map(|i| v[i] * r[i][j]).sum();
                for i in k..m {
                    r[i][j] -= 2.0 * v[i] * dotp / vnorm2;
                }
            }
            let dotp: f64 = (k..m).map(|i| v[i] * b[i]).sum();
            for i in k..m {
                b[i] -= 2.0 * v[i] * dotp / vnorm2;
            }
        }
        let mut x = [0.0; 7];
        for i in (0..7).rev() {
            let s: f64 = (i + 1..7).map(|j| r[i][j] * x[j]).sum();
            x[i] = (b[i] - s) / r[i][i];
        }
        x
    }

    #[test]
    fn unit_weights_reduce_to_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scheme = GradientScheme::single_shell(2, 1000.0, &fibonacci_dirs(10)).unwrap();
        let a = design_matrix(&scheme);
        for _ in 0..20 {
            let y: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(4.0..7.0)).collect();
            let fit = solve_weighted(&a, &y, &vec![1.0; a.len()]);
            let x = ols_householder(&a, &y);
            assert!((fit.s0.ln() - x[0]).abs() < 1e-9);
            for (got, want) in fit.tensor.components().iter().zip(&x[1..]) {
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn noiseless_round_trip_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let schemes = [
            GradientScheme::single_shell(1, 1000.0, &six_dirs()).unwrap(),
            GradientScheme::single_shell(1, 1000.0, &fibonacci_dirs(30)).unwrap(),
            GradientScheme::single_shell(3, 3000.0, &fibonacci_dirs(64)).unwrap(),
        ];
        for scheme in &schemes {
            for _ in 0..100 {
                let d = random_spd(&mut rng);
                let fit = fit_wls(&forward(1000.0, &d, scheme), scheme).unwrap();
                assert!(fit.ok);
                assert!(fit.tensor.sub(&d).max_abs() < 1e-9);
            }
        }
    }

    #[test]
    fn md_fa_values() {
        assert_eq!(md(&EigenTriple::from_values(3.0, 0.0, 0.0)), 1.0);
        let c = 0.8e-3;
        assert!((md(&EigenTriple::from_values(c, c, c)) - c).abs() < 1e-18);
        assert!((md(&EigenTriple::from_values(2e-3, 1e-3, 1e-3)) - 4e-3 / 3.0).abs() < 1e-18);
        assert_eq!(fa(&EigenTriple::from_values(c, c, c)), 0.0);
        assert_eq!(fa(&EigenTriple::from_values(1.0, 0.0, 0.0)), 1.0);
        // sqrt(2 / 12) by hand
        assert!((fa(&EigenTriple::from_values(2.0, 1.0, 1.0)) - 0.408_248_290_463_863).abs() < 1e-12);
        assert_eq!(fa(&EigenTriple::from_values(0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn fa_bounded_with_negative_eigenvalues() {
        for vals in [(1.0, -1.0, 0.0), (0.0, 0.0, -1.0), (-1.0, -2.0, -3.0), (1e-3, 1e-3, -5e-4)] {
            let f = fa(&EigenTriple::from_values(vals.0, vals.1, vals.2));
            assert!((0.0..=1.0).contains(&f), "{vals:?} -> {f}");
        }
    }

    #[test]
    fn fa_md_rotation_invariant_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let d = random_spd(&mut rng);
            let r = random_rotation(&mut rng);
            let (e, er) = (eig_sym3(&d), eig_sym3(&d.rotated(&r)));
            assert!((fa(&e) - fa(&er)).abs() < 1e-9);
            assert!((md(&e) - md(&er)).abs() < 1e-9 * md(&e));
            let c = rng.gen_range(0.1..10.0);
            let ec = eig_sym3(&d.scaled(c));
            assert!((md(&ec) - c * md(&e)).abs() < 1e-12 * md(&ec));
            assert!((fa(&ec) - fa(&e)).abs() < 1e-9);
        }
    }

    fn two_region_phantom(scheme: &GradientScheme) -> (Vec<Volume>, Vec<bool>, Vec<f64>) {
        let dims = [6, 5, 4];
        let n = 6 * 5 * 4;
        let iso = Tensor3x3Sym::diag(0.9e-3, 0.9e-3, 0.9e-3);
        let aniso = Tensor3x3Sym::diag(1.7e-3, 0.3e-3, 0.3e-3);
        let mut mask = vec![true; n];
        mask[0] = false;
        let mut fa_truth = vec![0.0; n];
        let mut per_voxel = Vec::with_capacity(n);
        for i in 0..n {
            let x = i % 6;
            let d = if x < 3 { iso } else { aniso };
            fa_truth[i] = if mask[i] { fa(&eig_sym3(&d)) } else { 0.0 };
            per_voxel.push(forward(800.0, &d, scheme));
        }
        let vols = (0..scheme.len())
            .map(|k| Volume::new(dims, [1.25; 3], per_voxel.iter().map(|s| s[k]).collect()).unwrap())
            .collect();
        (vols, mask, fa_truth)
    }

    #[test]
    fn two_compartment_volume_fit() {
        let scheme = GradientScheme::single_shell(1, 1000.0, &fibonacci_dirs(30)).unwrap();
        let (vols, mask, truth) = two_region_phantom(&scheme);
        let tf = fit_volume(&vols, &scheme, Some(&mask)).unwrap();
        assert!(!tf.fit_ok[0]);
        assert_eq!(tf.tensors[0], Tensor3x3Sym::zero());
        let (fa_map, md_map) = scalar_maps(&tf).unwrap();
        assert_eq!(fa_map.data()[0], 0.0);
        assert_eq!(md_map.data()[0], 0.0);
        for (got, want) in fa_map.data().iter().zip(&truth) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_and_zero_fields() {
        let scheme = GradientScheme::single_shell(1, 1000.0, &six_dirs()).unwrap();
        let d = Tensor3x3Sym::diag(1.2e-3, 0.6e-3, 0.5e-3);
        let sig = forward(500.0, &d, &scheme);
        let vols: Vec<Volume> = sig
            .iter()
            .map(|&s| Volume::filled([3, 3, 2], [1.0; 3], s).unwrap())
            .collect();
        let tf = fit_volume(&vols, &scheme, None).unwrap();
        assert!(tf.fit_ok.iter().all(|&b| b));
        let (fa_map, md_map) = scalar_maps(&tf).unwrap();
        let (f0, m0) = (fa_map.data()[0], md_map.data()[0]);
        assert!(fa_map.data().iter().all(|&v| v == f0));
        assert!(md_map.data().iter().all(|&v| v == m0));

        let zero = TensorField {
            dims: [2, 2, 1],
            spacing: [1.0; 3],
            tensors: vec![Tensor3x3Sym::zero(); 4],
            s0: vec![1.0; 4],
            fit_ok: vec![true; 4],
            clamped_voxels: 0,
        };
        let (fz, mz) = scalar_maps(&zero).unwrap();
        assert!(fz.data().iter().chain(mz.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn volume_fit_errors() {
        let scheme = GradientScheme::single_shell(1, 1000.0, &six_dirs()).unwrap();
        let mut vols: Vec<Volume> = (0..7).map(|_| Volume::filled([2, 2, 2], [1.0; 3], 1.0).unwrap()).collect();
        assert!(matches!(
            fit_volume(&vols, &scheme, Some(&[false; 8])),
            Err(Error::EmptyMask)
        ));
        vols[3] = Volume::filled([2, 2, 3], [1.0; 3], 1.0).unwrap();
        assert!(matches!(fit_volume(&vols, &scheme, None), Err(Error::DimsMismatch { .. })));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn noiseless_fit_recovers_tensor(seed in proptest::prelude::any::<u64>(), n_b0 in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scheme = GradientScheme::single_shell(n_b0, 1000.0, &fibonacci_dirs(30)).unwrap();
            let d = random_spd(&mut rng);
            let s0: f64 = rng.gen_range(100.0..5000.0);
            let fit = fit_wls(&forward(s0, &d, &scheme), &scheme).unwrap();
            proptest::prop_assert!(fit.ok);
            proptest::prop_assert!(fit.tensor.sub(&d).max_abs() < 1e-10 * d.max_abs() + 1e-15);
            proptest::prop_assert!(((fit.s0 - s0) / s0).abs() < 1e-9);
        }

        #[test]
        fn fa_md_bounded_and_rotation_invariant(seed in proptest::prelude::any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_spd(&mut rng);
            let r = d.rotated(&random_rotation(&mut rng));
            let (e, er) = (eig_sym3(&d), eig_sym3(&r));
            let f = fa(&e);
            proptest::prop_assert!((0.0..=1.0).contains(&f));
            proptest::prop_assert!((f - fa(&er)).abs() < 1e-9);
            proptest::prop_assert!((md(&e) - md(&er)).abs() < 1e-12);
            proptest::prop_assert!((md(&e) - d.trace() / 3.0).abs() < 1e-15);
        }
    }
}
