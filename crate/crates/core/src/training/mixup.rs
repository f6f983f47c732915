use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Symmetric `Beta(alpha, alpha)` as `X / (X + Y)` with `X, Y ~ Gamma(alpha)`.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "Beta parameter must be positive, got {alpha}"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    loop {
        let x: f64 = gamma.sample(rng);
        let y: f64 = gamma.sample(rng);
        if x + y > 0.0 {
            return Ok(x / (x + y));
        }
    }
}

/// `λ·a + (1-λ)·b`, kept inside `[min(a,b), max(a,b)]` despite rounding.
fn mix<T: Element>(lambda: f64, a: T, b: T) -> T {
    if a == b {
        return a;
    }
    let (af, bf) = (
        a.to_f64().unwrap_or(f64::NAN),
        b.to_f64().unwrap_or(f64::NAN),
    );
    let v = T::from_f64_lossy(lambda * af + (1.0 - lambda) * bf);
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    v.max(lo).min(hi)
}

/// Mixes each row of `x` and `y` with row `perm[i]` using one shared `λ`.
pub fn mixup_with<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda: f64,
    perm: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = x.shape().first().copied().unwrap_or(0);
    if y.shape().len() != 2 || y.shape()[0] != b || perm.len() != b {
        return shape_err(format!(
            "mixup: inputs {:?}, labels {:?}, permutation of {}",
            x.shape(),
            y.shape(),
            perm.len()
        ));
    }
    if !(0.0..=1.0).contains(&lambda) || perm.iter().any(|&p| p >= b) {
        return Err(Error::Validation(
            "mixup: λ outside [0,1] or bad permutation".into(),
        ));
    }
    let mix_rows = |t: &Tensor<T>| {
        let row = t.numel() / b;
        let d = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for (i, &j) in perm.iter().enumerate() {
            let (ri, rj) = (&d[i * row..(i + 1) * row], &d[j * row..(j + 1) * row]);
            out.extend(ri.iter().zip(rj).map(|(&a, &c)| mix(lambda, a, c)));
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    Ok((mix_rows(x)?, mix_rows(y)?))
}

/// Draws `λ ~ Beta(alpha, alpha)` and a random pairing, then mixes inputs
/// and soft labels.
pub fn mixup_batch<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!(
            "mixup needs alpha > 0 (got {alpha}); bypass mixup instead"
        )));
    }
    let b = x.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return shape_err(format!("mixup needs a batch of at least 2, got {b}"));
    }
    let lambda = sample_beta(alpha, rng)?;
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    mixup_with(x, y, lambda, &perm)
}
