use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradient components smaller than this are compared on an absolute scale.
///
/// Central differences in double precision carry absolute noise around
/// `1e-10` for O(1) losses, so a pure relative measure would flag
/// components that are numerically zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the tape's analytic gradient of the scalar `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, component by component, for every
/// tensor in `inputs`. Returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for t in &mut work {
        t.set_requires_grad(false);
    }
    let mut worst: f64 = 0.0;
    for (ti, grads) in analytic.iter().enumerate() {
        for ci in 0..work[ti].numel() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grads.get(ci).copied().unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_exact_up_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let err = grad_check(|t, v| Ok(t.sum_squares(v[0])), &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.2))),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn matmul_relu_cross_entropy_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let w2 = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.relu(h);
                let o = t.matmul(h, v[2])?;
                t.cross_entropy(o, &[0, 2, 1])
            },
            &[x, w, w2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn layer_norm_attention_pool_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let g = Tensor::randn(&[4], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let pos = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let x = t.add_periodic(v[0], v[3])?;
                let n = t.layer_norm(x, v[1], v[2], 1e-5)?;
                let a = t.attention(n, n, x, 3, 2)?;
                let p = t.mean_pool(a, 3)?;
                let sq = t.sum_squares(p);
                let gn = t.group_norm(&[v[1], v[2]]);
                let s = t.add(sq, gn)?;
                Ok(t.affine(s, -0.5, 3.0))
            },
            &[x, g, b, pos],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
