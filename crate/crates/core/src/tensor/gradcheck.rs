use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("grad_check step must be > 0, got {step}")));
    }
    let eval = |input: &Tensor| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.constant(input.clone());
        let out = f(&tape, v)?.value();
        let y = out.item()?;
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(y)
    };

    let tape = Tape::new();
    let v = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&tape, v)?;
    let analytic = tape.backward(out)?.wrt(v);

    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([7], 1.0, &mut rng);
        let err = grad_check(|_, v| v.mul(v)?.sum(), &x, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|_, v| v.sum(), &x, 0.0).is_err());
    }
}
