//! Finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::graph::{Graph, Var};
use super::params::Params;
use crate::error::Result;

/// Lower bound on the denominator of the relative error, so entries whose
/// gradient is near zero are judged on absolute difference.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, SCALE_FLOOR)`
    /// over all checked entries.
    pub max_rel_err: f64,
    /// Largest `|analytic - numeric|` over all checked entries.
    pub max_abs_err: f64,
    pub n_checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(SCALE_FLOOR)
}

fn eval(inputs: &[Array], f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.constant(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the gradient of the scalar `f(inputs)` with central differences
/// of step `eps` for every input entry.
pub fn gradcheck<F>(inputs: &[Array], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut n = 0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v);
        for i in 0..work[k].len() {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + eps;
            let fp = eval(&work, &f)?;
            work[k].data_mut()[i] = x0 - eps;
            let fm = eval(&work, &f)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            worst_abs = worst_abs.max((analytic.data()[i] - numeric).abs());
            n += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        max_abs_err: worst_abs,
        n_checked: n,
    })
}

/// Same check against the parameters of a store. At most `per_param`
/// entries of each parameter are probed, spread evenly.
pub fn gradcheck_params<F>(params: &mut Params, eps: f64, per_param: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    g.backward(out)?;
    g.export_grads(params);
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut n = 0;
    for id in params.ids() {
        let analytic = params.grad(id).expect("exported").clone();
        let len = analytic.len();
        let step = (len / per_param.max(1)).max(1);
        for i in (0..len).step_by(step).take(per_param) {
            let x0 = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = x0 + eps;
            let fp = {
                let mut g = Graph::new();
                let o = f(&mut g, params)?;
                g.value(o).item()
            };
            params.value_mut(id).data_mut()[i] = x0 - eps;
            let fm = {
                let mut g = Graph::new();
                let o = f(&mut g, params)?;
                g.value(o).item()
            };
            params.value_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            worst_abs = worst_abs.max((analytic.data()[i] - numeric).abs());
            n += 1;
        }
    }
    params.clear_grads();
    Ok(GradCheck {
        max_rel_err: worst,
        max_abs_err: worst_abs,
        n_checked: n,
    })
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero, so
/// kinked ops are not probed across their kink.
pub fn random_array(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Array::new(shape, data).expect("positive shape")
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Conv3(usize),
    DownUp,
    Norm,
    Relu,
    Leaky,
    Tanh,
    Sigmoid,
    PadConv,
    Residual,
    ConcatMix,
    Gate,
    Sub,
}

/// A seeded random network over a `[1, 2, 6, 6]` input, built from every
/// operator. Returns the inputs (image first, then weights) and the loss
/// builder.
pub fn random_composite(seed: u64) -> (Vec<Array>, impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = [
        Step::Conv3(0),
        Step::DownUp,
        Step::Norm,
        Step::Relu,
        Step::Leaky,
        Step::Tanh,
        Step::Sigmoid,
        Step::PadConv,
        Step::Residual,
        Step::ConcatMix,
        Step::Gate,
        Step::Sub,
    ];
    let depth = rng.gen_range(3..7);
    let mut plan = Vec::with_capacity(depth);
    let mut inputs = vec![random_array(&[1, 2, 6, 6], 0.05, &mut rng)];
    let mut c = 2;
    for _ in 0..depth {
        let step = match steps[rng.gen_range(0..steps.len())] {
            Step::Conv3(_) => Step::Conv3(rng.gen_range(1..4)),
            s => s,
        };
        match step {
            Step::Conv3(co) => {
                inputs.push(random_array(&[co, c, 3, 3], 0.0, &mut rng).map(|v| v * 0.5));
                inputs.push(random_array(&[co], 0.0, &mut rng));
                c = co;
            }
            Step::DownUp => {
                inputs.push(random_array(&[c, c, 4, 4], 0.0, &mut rng).map(|v| v * 0.5));
                inputs.push(random_array(&[c, c, 4, 4], 0.0, &mut rng).map(|v| v * 0.5));
                inputs.push(random_array(&[c], 0.0, &mut rng));
            }
            Step::PadConv | Step::Residual => {
                inputs.push(random_array(&[c, c, 3, 3], 0.0, &mut rng).map(|v| v * 0.5));
            }
            Step::ConcatMix => {
                inputs.push(random_array(&[c, 2 * c, 1, 1], 0.0, &mut rng));
            }
            _ => {}
        }
        plan.push(step);
    }
    let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let mut h = v[0];
        let mut next = 1;
        let mut take = || {
            next += 1;
            v[next - 1]
        };
        for step in &plan {
            h = match *step {
                Step::Conv3(_) => {
                    let (w, b) = (take(), take());
                    g.conv2d(h, w, Some(b), 1, 1)?
                }
                Step::DownUp => {
                    let (wd, wu, b) = (take(), take(), take());
                    let d = g.conv2d(h, wd, None, 2, 1)?;
                    g.conv2d_transpose(d, wu, Some(b), 2, 1)?
                }
                Step::Norm => g.instance_norm(h, 1e-5)?,
                Step::Relu => g.relu(h),
                Step::Leaky => g.leaky_relu(h, 0.2),
                Step::Tanh => g.tanh(h),
                Step::Sigmoid => g.sigmoid(h),
                Step::PadConv => {
                    let w = take();
                    let p = g.pad_reflect(h, 1)?;
                    g.conv2d(p, w, None, 1, 0)?
                }
                Step::Residual => {
                    let w = take();
                    let r = g.conv2d(h, w, None, 1, 1)?;
                    let r = g.tanh(r);
                    g.add(h, r)?
                }
                Step::ConcatMix => {
                    let w = take();
                    let half = g.scale(h, 0.5);
                    let cat = g.concat(&[h, half], 1)?;
                    g.conv2d(cat, w, None, 1, 0)?
                }
                Step::Gate => {
                    let s = g.sigmoid(h);
                    g.mul(h, s)?
                }
                Step::Sub => {
                    let t = g.add_scalar(h, 0.3);
                    let t = g.square(t);
                    g.sub(h, t)?
                }
            };
        }
        let sq = g.square(h);
        let a = g.mean(sq);
        let ab = g.abs(h);
        let b = g.sum(ab);
        let b = g.scale(b, 0.1);
        g.add(a, b)
    };
    (inputs, f)
}
