//! Direct 2D convolution kernels on NCHW data.
//!
//! `gather` is the forward convolution, `scatter` its exact adjoint with
//! respect to the input and `weight_grad` its adjoint with respect to the
//! kernel. A transposed convolution is `scatter` run forward, so the two
//! layer types share all three kernels.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    /// Channels and spatial size on the "image" side of a forward convolution.
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    /// Channels and spatial size on the "feature" side.
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn in_plane(&self) -> usize {
        self.h_in * self.w_in
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

/// Output positions `o` in `[lo, hi)` with `o * stride + off` inside `[0, n_in)`.
#[inline]
fn valid(off: isize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    // largest o with o*s + off <= n_in - 1
    let top = n_in as isize - 1 - off;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / s + 1).min(n_out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// `y[n,o] = b[o] + Σ_c w[o,c] ⋆ x[n,c]`
pub(crate) fn gather(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; g.n * g.c_out * g.out_plane()];
    let kk = g.k * g.k;
    y.par_chunks_mut(g.out_plane())
        .enumerate()
        .for_each(|(plane, out)| {
            let (n, o) = (plane / g.c_out, plane % g.c_out);
            if let Some(b) = bias {
                out.fill(b[o]);
            }
            for c in 0..g.c_in {
                let xin = &x[(n * g.c_in + c) * g.in_plane()..][..g.in_plane()];
                let wk = &w[(o * g.c_in + c) * kk..][..kk];
                for ky in 0..g.k {
                    let offy = ky as isize - g.pad as isize;
                    let (oy0, oy1) = valid(offy, g.stride, g.h_in, g.h_out);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let offx = kx as isize - g.pad as isize;
                        let (ox0, ox1) = valid(offx, g.stride, g.w_in, g.w_out);
                        for oy in oy0..oy1 {
                            let iy = (oy * g.stride) as isize + offy;
                            let xrow = &xin[iy as usize * g.w_in..][..g.w_in];
                            let yrow = &mut out[oy * g.w_out..][..g.w_out];
                            if g.stride == 1 {
                                let ix0 = (ox0 as isize + offx) as usize;
                                for (yv, xv) in yrow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * g.stride) as isize + offx) as usize;
                                    yrow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Adjoint of [`gather`] in `x`: `x[n,c] = Σ_o w[o,c] ⋆ᵀ y[n,o]`.
pub(crate) fn scatter(g: &ConvGeom, y: &[f64], w: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; g.n * g.c_in * g.in_plane()];
    let kk = g.k * g.k;
    x.par_chunks_mut(g.in_plane())
        .enumerate()
        .for_each(|(plane, xin)| {
            let (n, c) = (plane / g.c_in, plane % g.c_in);
            for o in 0..g.c_out {
                let yout = &y[(n * g.c_out + o) * g.out_plane()..][..g.out_plane()];
                let wk = &w[(o * g.c_in + c) * kk..][..kk];
                for ky in 0..g.k {
                    let offy = ky as isize - g.pad as isize;
                    let (oy0, oy1) = valid(offy, g.stride, g.h_in, g.h_out);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let offx = kx as isize - g.pad as isize;
                        let (ox0, ox1) = valid(offx, g.stride, g.w_in, g.w_out);
                        for oy in oy0..oy1 {
                            let iy = (oy * g.stride) as isize + offy;
                            let xrow = &mut xin[iy as usize * g.w_in..][..g.w_in];
                            let yrow = &yout[oy * g.w_out..][..g.w_out];
                            if g.stride == 1 {
                                let ix0 = (ox0 as isize + offx) as usize;
                                for (xv, yv) in xrow[ix0..].iter_mut().zip(&yrow[ox0..ox1]) {
                                    *xv += wv * yv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * g.stride) as isize + offx) as usize;
                                    xrow[ix] += wv * yrow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    x
}

/// Adjoint of [`gather`] in `w`: `w[o,c,ky,kx] = Σ_n Σ_oy,ox y[n,o,oy,ox] x[n,c,iy,ix]`.
pub(crate) fn weight_grad(g: &ConvGeom, x: &[f64], y: &[f64]) -> Vec<f64> {
    let kk = g.k * g.k;
    let mut w = vec![0.0; g.kernel_len()];
    w.par_chunks_mut(kk).enumerate().for_each(|(oc, wk)| {
        let (o, c) = (oc / g.c_in, oc % g.c_in);
        for ky in 0..g.k {
            let offy = ky as isize - g.pad as isize;
            let (oy0, oy1) = valid(offy, g.stride, g.h_in, g.h_out);
            for kx in 0..g.k {
                let offx = kx as isize - g.pad as isize;
                let (ox0, ox1) = valid(offx, g.stride, g.w_in, g.w_out);
                let mut acc = 0.0;
                for n in 0..g.n {
                    let xin = &x[(n * g.c_in + c) * g.in_plane()..][..g.in_plane()];
                    let yout = &y[(n * g.c_out + o) * g.out_plane()..][..g.out_plane()];
                    for oy in oy0..oy1 {
                        let iy = (oy * g.stride) as isize + offy;
                        let xrow = &xin[iy as usize * g.w_in..][..g.w_in];
                        let yrow = &yout[oy * g.w_out..][..g.w_out];
                        if g.stride == 1 {
                            let ix0 = (ox0 as isize + offx) as usize;
                            acc += yrow[ox0..ox1]
                                .iter()
                                .zip(&xrow[ix0..])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ((ox * g.stride) as isize + offx) as usize;
                                acc += yrow[ox] * xrow[ix];
                            }
                        }
                    }
                }
                wk[ky * g.k + kx] = acc;
            }
        }
    });
    w
}

/// Per-channel sum over batch and space, the bias gradient.
pub(crate) fn channel_sums(y: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += y[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges() {
        // stride 1, pad 1, k offset -1: o=0 reads -1
        assert_eq!(valid(-1, 1, 4, 4), (1, 4));
        assert_eq!(valid(1, 1, 4, 4), (0, 3));
        // stride 2 on 8 -> 4 with pad 1
        assert_eq!(valid(-1, 2, 8, 4), (1, 4));
        assert_eq!(valid(2, 2, 8, 4), (0, 3));
        assert_eq!(valid(9, 2, 8, 4), (0, 0));
    }

    /// Plain six-loop convolution as an oracle.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.n * g.c_out * g.out_plane()];
        for n in 0..g.n {
            for o in 0..g.c_out {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = 0.0;
                        for c in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h_in as isize || ix >= g.w_in as isize {
                                        continue;
                                    }
                                    acc += w[((o * g.c_in + c) * g.k + ky) * g.k + kx]
                                        * x[((n * g.c_in + c) * g.h_in + iy as usize) * g.w_in + ix as usize];
                                }
                            }
                        }
                        y[((n * g.c_out + o) * g.h_out + oy) * g.w_out + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gather_matches_naive() {
        for (stride, pad, k, h) in [(1, 0, 3, 6), (1, 1, 3, 5), (2, 1, 3, 7), (2, 1, 4, 8), (1, 3, 7, 9)] {
            let h_out = (h + 2 * pad - k) / stride + 1;
            let g = ConvGeom {
                n: 2,
                c_in: 3,
                h_in: h,
                w_in: h + 1,
                c_out: 2,
                h_out,
                w_out: (h + 1 + 2 * pad - k) / stride + 1,
                k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..g.n * g.c_in * g.in_plane()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..g.kernel_len()).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
            let got = gather(&g, &x, &w, None);
            let want = naive(&g, &x, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
