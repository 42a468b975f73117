use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// A network as seen by the loss code: one batch in, one batch out.
pub type Net<'a> = &'a dyn Fn(&mut Graph, Var) -> Result<Var>;

/// Least-squares critic objective: `E[(D(real) − 1)²] + E[D(fake)²]`.
pub fn critic_loss(g: &mut Graph, d: Net, real: Var, fake: Var) -> Result<Var> {
    let r = d(g, real)?;
    let r = g.add_scalar(r, -1.0);
    let r = g.square(r);
    let r = g.mean(r);
    let f = d(g, fake)?;
    let f = g.square(f);
    let f = g.mean(f);
    g.add(r, f)
}

/// Least-squares generator objective against one critic: `E[(D(fake) − 1)²]`.
pub fn fooling_loss(g: &mut Graph, d: Net, fake: Var) -> Result<Var> {
    let f = d(g, fake)?;
    let f = g.add_scalar(f, -1.0);
    let f = g.square(f);
    Ok(g.mean(f))
}

/// `mean|rec − orig|`
pub fn l1(g: &mut Graph, rec: Var, orig: Var) -> Result<Var> {
    let d = g.sub(rec, orig)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

#[derive(Debug, Clone, Copy)]
pub struct AdversarialLosses {
    pub d_a: Var,
    pub d_b: Var,
    pub g_adv: Var,
}

/// The six least-squares terms for one pair of batches.
///
/// The critic terms see detached translations, so their gradients never
/// reach a generator. The generator terms flow through the critics; callers
/// update only generator weights from them.
pub fn adversarial_losses(
    g: &mut Graph,
    d_a: Net,
    d_b: Net,
    g_a2b: Net,
    g_b2a: Net,
    a: Var,
    b: Var,
) -> Result<AdversarialLosses> {
    let fake_b = g_a2b(g, a)?;
    let fake_a = g_b2a(g, b)?;
    let fb = g.detach(fake_b);
    let fa = g.detach(fake_a);
    let la = critic_loss(g, d_a, a, fa)?;
    let lb = critic_loss(g, d_b, b, fb)?;
    let gb = fooling_loss(g, d_b, fake_b)?;
    let ga = fooling_loss(g, d_a, fake_a)?;
    let g_adv = g.add(gb, ga)?;
    Ok(AdversarialLosses {
        d_a: la,
        d_b: lb,
        g_adv,
    })
}

/// `mean|G_B2A(G_A2B(a)) − a| + mean|G_A2B(G_B2A(b)) − b|`, unweighted.
pub fn cycle_loss(g: &mut Graph, g_a2b: Net, g_b2a: Net, a: Var, b: Var) -> Result<Var> {
    let fb = g_a2b(g, a)?;
    let ra = g_b2a(g, fb)?;
    let fa = g_b2a(g, b)?;
    let rb = g_a2b(g, fa)?;
    let la = l1(g, ra, a)?;
    let lb = l1(g, rb, b)?;
    g.add(la, lb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Array;

    fn batch(v: f64, seed: usize) -> Array {
        let data = (0..2 * 16).map(|i| v + 0.01 * ((i * 7 + seed) % 5) as f64).collect();
        Array::new(&[2, 1, 4, 4], data).unwrap()
    }

    fn constant_critic(c: f64) -> impl Fn(&mut Graph, Var) -> Result<Var> {
        move |g: &mut Graph, x: Var| {
            let n = g.shape(x)[0];
            Ok(g.constant(Array::full(&[n, 1, 2, 2], c)))
        }
    }

    fn identity(_: &mut Graph, x: Var) -> Result<Var> {
        Ok(x)
    }

    fn eval(d: Net, a: &Array, b: &Array) -> (f64, f64, f64) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let shift = |g: &mut Graph, x: Var| Ok(g.add_scalar(x, 0.25));
        let l = adversarial_losses(&mut g, d, d, &shift, &shift, va, vb).unwrap();
        (g.value(l.d_a).item(), g.value(l.d_b).item(), g.value(l.g_adv).item())
    }

    #[test]
    fn oracle_critic_separates_real_from_fake() {
        let (a, b) = (batch(0.2, 1), batch(0.6, 2));
        let reals = [a.clone(), b.clone()];
        let oracle = |g: &mut Graph, x: Var| {
            let n = g.shape(x)[0];
            let real = reals.iter().any(|r| r == g.value(x));
            Ok(g.constant(Array::full(&[n, 1, 2, 2], if real { 1.0 } else { 0.0 })))
        };
        assert_eq!(eval(&oracle, &a, &b), (0.0, 0.0, 2.0));
    }

    #[test]
    fn constant_critics() {
        let (a, b) = (batch(0.2, 1), batch(0.6, 2));
        assert_eq!(eval(&constant_critic(0.5), &a, &b), (0.5, 0.5, 0.5));
        assert_eq!(eval(&constant_critic(0.0), &a, &b), (1.0, 1.0, 2.0));
    }

    #[test]
    fn terms_are_non_negative() {
        let (a, b) = (batch(0.2, 1), batch(0.6, 2));
        for c in [-3.0, -0.2, 0.0, 0.4, 1.0, 2.5] {
            let (x, y, z) = eval(&constant_critic(c), &a, &b);
            assert!(x >= 0.0 && y >= 0.0 && z >= 0.0);
        }
    }

    #[test]
    fn cycle_of_inverse_pairs_is_zero() {
        let (a, b) = (batch(0.2, 1), batch(0.7, 3));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let l = cycle_loss(&mut g, &identity, &identity, va, vb).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        // 0.25 is exact in binary, so the round trip is exact too
        let up = |g: &mut Graph, x: Var| Ok(g.add_scalar(x, 0.25));
        let down = |g: &mut Graph, x: Var| Ok(g.add_scalar(x, -0.25));
        let l = cycle_loss(&mut g, &up, &down, va, vb).unwrap();
        assert!(g.value(l).item() < 1e-15);
    }
}
