use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Tolerance on |g| for directions given to [`GradientScheme::new`].
const UNIT_TOL: f64 = 1e-6;
/// Looser tolerance applied to text files before renormalization.
const FILE_UNIT_TOL: f64 = 1e-3;

/// Acquisition protocol: one b-value (s/mm²) and gradient direction per measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme {
    bvals: Vec<f64>,
    dirs: Vec<[f64; 3]>,
}

impl GradientScheme {
    pub fn new(bvals: Vec<f64>, dirs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != dirs.len() {
            return Err(Error::CountMismatch {
                bvals: bvals.len(),
                dirs: dirs.len(),
            });
        }
        for (i, (&b, g)) in bvals.iter().zip(&dirs).enumerate() {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidScheme(format!("b-value {i} is {b}")));
            }
            let norm = norm3(g);
            if b > 0.0 && (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::NonUnitDirection { index: i, norm, bval: b });
            }
        }
        Ok(Self { bvals, dirs })
    }

    /// `n_b0` unweighted entries followed by `dirs` at a single b-value.
    pub fn single_shell(n_b0: usize, bval: f64, dirs: &[[f64; 3]]) -> Result<Self> {
        let mut bvals = vec![0.0; n_b0];
        let mut all = vec![[0.0; 3]; n_b0];
        for g in dirs {
            let n = norm3(g);
            bvals.push(bval);
            all.push([g[0] / n, g[1] / n, g[2] / n]);
        }
        Self::new(bvals, all)
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn dirs(&self) -> &[[f64; 3]] {
        &self.dirs
    }

    pub fn n_b0(&self) -> usize {
        self.bvals.iter().filter(|&&b| b == 0.0).count()
    }

    pub fn n_weighted(&self) -> usize {
        self.len() - self.n_b0()
    }

    /// At least one b = 0 and six weighted measurements, the minimum for a tensor fit.
    pub fn check_identifiable(&self) -> Result<()> {
        if self.n_b0() < 1 || self.n_weighted() < 6 {
            return Err(Error::InvalidScheme(format!(
                "tensor fitting needs at least 1 b=0 and 6 b>0 entries, have {} and {}",
                self.n_b0(),
                self.n_weighted()
            )));
        }
        Ok(())
    }
}

fn norm3(g: &[f64; 3]) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

fn parse_numbers(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::Parse(format!("{what}: cannot parse {tok:?} as a number")))
        })
        .collect()
}

/// Parses b-values (whitespace separated) and directions (three numbers per line).
/// `n` unit vectors spread over the upper hemisphere on a Fibonacci spiral.
pub fn hemisphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect()
}

pub fn parse_gradient_scheme(bvals_text: &str, dirs_text: &str) -> Result<GradientScheme> {
    let bvals = parse_numbers(bvals_text, "bvals")?;
    let mut dirs = Vec::new();
    for (lineno, line) in dirs_text.lines().enumerate() {
        let nums = parse_numbers(line, "bvecs")?;
        match nums.len() {
            0 => continue,
            3 => dirs.push([nums[0], nums[1], nums[2]]),
            n => {
                return Err(Error::Parse(format!(
                    "bvecs line {} has {n} columns, expected 3",
                    lineno + 1
                )))
            }
        }
    }
    if bvals.len() != dirs.len() {
        return Err(Error::CountMismatch {
            bvals: bvals.len(),
            dirs: dirs.len(),
        });
    }
    for (i, (g, &b)) in dirs.iter_mut().zip(&bvals).enumerate() {
        let n = norm3(g);
        if b > 0.0 {
            if (n - 1.0).abs() > FILE_UNIT_TOL {
                return Err(Error::NonUnitDirection { index: i, norm: n, bval: b });
            }
            for c in g.iter_mut() {
                *c /= n;
            }
        }
    }
    GradientScheme::new(bvals, dirs)
}

pub fn read_gradient_scheme(
    bvals_path: impl AsRef<Path>,
    dirs_path: impl AsRef<Path>,
) -> Result<GradientScheme> {
    let (bp, dp) = (bvals_path.as_ref(), dirs_path.as_ref());
    let bvals = fs::read_to_string(bp).map_err(|e| Error::io(bp, e))?;
    let dirs = fs::read_to_string(dp).map_err(|e| Error::io(dp, e))?;
    parse_gradient_scheme(&bvals, &dirs)
}

pub fn write_gradient_scheme(
    scheme: &GradientScheme,
    bvals_path: impl AsRef<Path>,
    dirs_path: impl AsRef<Path>,
) -> Result<()> {
    let (bp, dp) = (bvals_path.as_ref(), dirs_path.as_ref());
    let bvals: Vec<String> = scheme.bvals.iter().map(|b| format!("{b}")).collect();
    let mut dirs = String::new();
    for g in &scheme.dirs {
        dirs.push_str(&format!("{} {} {}\n", g[0], g[1], g[2]));
    }
    fs::write(bp, bvals.join(" ") + "\n").map_err(|e| Error::io(bp, e))?;
    fs::write(dp, dirs).map_err(|e| Error::io(dp, e))
}
