//! Symmetric 3x3 eigendecomposition.
//!
//! Eigenvalues come from the trigonometric solution of the characteristic
//! polynomial. The eigenvector of the most isolated eigenvalue is taken from
//! the best-conditioned cross product of rows of `D - λI`; the remaining pair
//! is resolved by a 2x2 rotation inside its orthogonal complement. Nearly
//! isotropic tensors, and any result that fails the reconstruction check,
//! go through cyclic Jacobi instead.

use super::Tensor3x3Sym;

/// (λmax − λmin) / max|λ| below which the closed form is not trusted.
const SPREAD_RATIO_FALLBACK: f64 = 1e-12;
const RECONSTRUCTION_TOL: f64 = 1e-10;

/// Eigenvalues in descending order with matching unit eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenTriple {
    pub values: [f64; 3],
    pub vectors: [[f64; 3]; 3],
}

impl EigenTriple {
    pub fn lambda1(&self) -> f64 {
        self.values[0]
    }

    pub fn lambda2(&self) -> f64 {
        self.values[1]
    }

    pub fn lambda3(&self) -> f64 {
        self.values[2]
    }

    /// Eigenvalue-only triple, for evaluating scalar measures directly.
    pub fn from_values(l1: f64, l2: f64, l3: f64) -> Self {
        let mut values = [l1, l2, l3];
        values.sort_by(|a, b| b.total_cmp(a));
        Self {
            values,
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// `Σ λᵢ eᵢ eᵢᵀ`
    pub fn reconstruct(&self) -> Tensor3x3Sym {
        let mut m = [[0.0; 3]; 3];
        for (l, e) in self.values.iter().zip(&self.vectors) {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += l * e[r] * e[c];
                }
            }
        }
        Tensor3x3Sym::from_matrix(&m)
    }
}

pub fn eig_sym3(d: &Tensor3x3Sym) -> EigenTriple {
    let scale = d.max_abs();
    if scale == 0.0 || !scale.is_finite() {
        return finish([0.0; 3], identity());
    }
    // Work on the unit-scaled matrix so the trigonometric formulas see O(1) numbers.
    let a = d.scaled(1.0 / scale).to_matrix();
    let (vals, vecs) = closed_form(&a)
        .filter(|(vals, vecs)| reconstruction_ok(&a, vals, vecs))
        .unwrap_or_else(|| jacobi(&a));
    finish(vals.map(|v| v * scale), vecs)
}

fn identity() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = dot(&v, &v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn mat_vec(a: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot(&a[0], v), dot(&a[1], v), dot(&a[2], v)]
}

fn closed_form(a: &[[f64; 3]; 3]) -> Option<([f64; 3], [[f64; 3]; 3])> {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return None;
    }
    let mut b = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            b[r][c] = (a[r][c] - if r == c { q } else { 0.0 }) / p;
        }
    }
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let l2 = 3.0 * q - l1 - l3;

    let max_abs = l1.abs().max(l2.abs()).max(l3.abs());
    if (l1 - l3) <= SPREAD_RATIO_FALLBACK * max_abs {
        return None;
    }

    // Isolated eigenvalue: λ1 when the upper gap is the larger one.
    let isolated = if l1 - l2 >= l2 - l3 { l1 } else { l3 };
    let mut m = *a;
    for (i, row) in m.iter_mut().enumerate() {
        row[i] -= isolated;
    }
    let candidates = [cross(&m[0], &m[1]), cross(&m[0], &m[2]), cross(&m[1], &m[2])];
    let best = candidates
        .iter()
        .max_by(|x, y| dot(x, x).total_cmp(&dot(y, y)))
        .copied()?;
    if dot(&best, &best) == 0.0 {
        return None;
    }
    let v = normalized(best);

    // Orthonormal basis (u, w) of the complement of v.
    let u = if v[0].abs() > v[1].abs() {
        normalized([-v[2], 0.0, v[0]])
    } else {
        normalized([0.0, v[2], -v[1]])
    };
    let w = cross(&v, &u);
    let au = mat_vec(a, &u);
    let aw = mat_vec(a, &w);
    let (m00, m01, m11) = (dot(&u, &au), dot(&u, &aw), dot(&w, &aw));
    let (c, s) = jacobi_rotation(m00, m01, m11);
    let e_a = [
        c * u[0] - s * w[0],
        c * u[1] - s * w[1],
        c * u[2] - s * w[2],
    ];
    let e_b = [
        s * u[0] + c * w[0],
        s * u[1] + c * w[1],
        s * u[2] + c * w[2],
    ];
    let la = c * c * m00 - 2.0 * s * c * m01 + s * s * m11;
    let lb = s * s * m00 + 2.0 * s * c * m01 + c * c * m11;
    let iso = dot(&v, &mat_vec(a, &v));
    Some(([iso, la, lb], [v, normalized(e_a), normalized(e_b)]))
}

/// Rotation `(c, s)` diagonalizing `[[a, b], [b, d]]`.
fn jacobi_rotation(a: f64, b: f64, d: f64) -> (f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0);
    }
    let theta = (d - a) / (2.0 * b);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    (c, t * c)
}

fn reconstruction_ok(a: &[[f64; 3]; 3], vals: &[f64; 3], vecs: &[[f64; 3]; 3]) -> bool {
    let mut err = 0.0;
    let mut norm = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            let rec: f64 = (0..3).map(|k| vals[k] * vecs[k][r] * vecs[k][c]).sum();
            err += (rec - a[r][c]).powi(2);
            norm += a[r][c] * a[r][c];
        }
    }
    let ortho = (0..3)
        .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
        .all(|(i, j)| dot(&vecs[i], &vecs[j]).abs() < 1e-9);
    ortho && err.sqrt() <= RECONSTRUCTION_TOL * norm.sqrt()
}

/// Cyclic Jacobi sweeps; columns of the accumulated rotation are eigenvectors.
fn jacobi(a: &[[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut m = *a;
    let mut v = identity();
    for _sweep in 0..64 {
        let off = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
        if off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if m[p][q] == 0.0 {
                continue;
            }
            let (c, s) = jacobi_rotation(m[p][p], m[p][q], m[q][q]);
            // m <- Jᵀ m J with J the rotation in the (p, q) plane
            for k in 0..3 {
                let (mkp, mkq) = (m[k][p], m[k][q]);
                m[k][p] = c * mkp - s * mkq;
                m[k][q] = s * mkp + c * mkq;
            }
            for k in 0..3 {
                let (mpk, mqk) = (m[p][k], m[q][k]);
                m[p][k] = c * mpk - s * mqk;
                m[q][k] = s * mpk + c * mqk;
            }
            m[p][q] = 0.0;
            m[q][p] = 0.0;
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let vals = [m[0][0], m[1][1], m[2][2]];
    let vecs = [
        [v[0][0], v[1][0], v[2][0]],
        [v[0][1], v[1][1], v[2][1]],
        [v[0][2], v[1][2], v[2][2]],
    ];
    (vals, vecs)
}

/// Sorts descending and fixes signs: first component above 1e-12 in magnitude is positive.
fn finish(vals: [f64; 3], vecs: [[f64; 3]; 3]) -> EigenTriple {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let mut out = EigenTriple {
        values: [0.0; 3],
        vectors: [[0.0; 3]; 3],
    };
    for (k, &i) in order.iter().enumerate() {
        out.values[k] = vals[i];
        let mut e = vecs[i];
        if let Some(first) = e.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                e = e.map(|c| -c);
            }
        }
        out.vectors[k] = e;
    }
    out
}
