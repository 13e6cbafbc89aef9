//! Gradient checking against central finite differences.
//!
//! Relative error uses denominator max(|analytic|, |numeric|, 1e-8), so
//! zero gradients compare exactly and tiny gradients do not explode the
//! ratio.

use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: &[f64], shape: &[usize]) -> Result<f64>
where
    F: Fn(&Tape, Tensor<'_>) -> Result<Tensor<'_>>,
{
    let tape = Tape::new();
    let xt = tape.leaf(x.to_vec(), shape)?;
    let y = f(&tape, xt)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check requires a scalar-valued function, got shape {:?}",
            y.shape()
        )));
    }
    Ok(y.item())
}

/// Max relative error between reverse-mode gradients and central
/// differences of step `h`, over every coordinate of `x`.
pub fn finite_difference_check<F>(f: &F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tape, Tensor<'_>) -> Result<Tensor<'_>>,
{
    let tape = Tape::new();
    let xt = tape.leaf_grad(x.to_vec(), shape)?;
    let y = f(&tape, xt)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check requires a scalar-valued function, got shape {:?}",
            y.shape()
        )));
    }
    tape.backward(y)?;
    let analytic = xt.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_rel: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = eval_scalar(f, &probe, shape)?;
        probe[i] = x[i] - h;
        let fm = eval_scalar(f, &probe, shape)?;
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        max_rel = max_rel.max(rel_err(analytic[i], numeric));
    }
    Ok(max_rel)
}

/// Gradient check for a function of several leaves, probing a deterministic
/// random subset of coordinates per leaf (full sweeps are too slow for
/// whole-model losses). Returns the max relative error over all probes.
pub fn check_leaf_gradients<F>(
    build: &F,
    leaves: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    probes_per_leaf: usize,
    seed: u64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>>,
{
    let forward = |values: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let ts: Vec<Tensor<'_>> = values
            .iter()
            .zip(leaves)
            .map(|(v, (_, shape))| tape.leaf(v.clone(), shape))
            .collect::<Result<_>>()?;
        let y = build(&tape, &ts)?;
        if y.numel() != 1 {
            return Err(Error::Contract(
                "gradient check requires a scalar-valued function".into(),
            ));
        }
        Ok(y.item())
    };

    // Analytic gradients for every leaf in one reverse pass.
    let tape = Tape::new();
    let ts: Vec<Tensor<'_>> = leaves
        .iter()
        .map(|(v, shape)| tape.leaf_grad(v.clone(), shape))
        .collect::<Result<_>>()?;
    let y = build(&tape, &ts)?;
    if y.numel() != 1 {
        return Err(Error::Contract(
            "gradient check requires a scalar-valued function".into(),
        ));
    }
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = ts
        .iter()
        .zip(leaves)
        .map(|(t, (v, _))| t.grad().unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let root = Rng::new(seed);
    let mut values: Vec<Vec<f64>> = leaves.iter().map(|(v, _)| v.clone()).collect();
    let mut max_rel: f64 = 0.0;
    for (li, (base, _)) in leaves.iter().enumerate() {
        let mut rng = root.stream(li as u64);
        let n = base.len();
        let probes = probes_per_leaf.min(n);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < probes {
            picked.insert(rng.below(n));
        }
        for &i in &picked {
            values[li][i] = base[i] + h;
            let fp = forward(&values)?;
            values[li][i] = base[i] - h;
            let fm = forward(&values)?;
            values[li][i] = base[i];
            let numeric = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[li][i], numeric));
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // f(x) = Σ cᵢ xᵢ — central differences are exact for linear maps.
        let coeffs = [1.5, -2.0, 0.25, 3.0];
        let f = move |tape: &Tape, x: Tensor<'_>| {
            let c = tape.leaf(coeffs.to_vec(), &[4])?;
            x.mul(&c)?.sum(None)
        };
        let err = finite_difference_check(&f, &[0.3, -1.2, 4.0, 0.0], &[4], 1e-5).unwrap();
        assert!(err <= 1e-10, "max rel err {err}");
    }

    #[test]
    fn relu_passes_away_from_the_kink() {
        // Inputs nudged away from 0 so the kink is never straddled.
        let f = |_: &Tape, x: Tensor<'_>| x.relu()?.sum(None);
        let x = [0.5, -0.7, 1.3, -2.1, 0.01];
        let err = finite_difference_check(&f, &x, &[5], 1e-5).unwrap();
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn multi_leaf_probe_matches_full_check() {
        let build = |tape: &Tape, ts: &[Tensor<'_>]| {
            let prod = ts[0].matmul(&ts[1])?;
            prod.tanh()?.sum(None)
        };
        let a = (vec![0.3, -0.2, 0.5, 0.9, -1.1, 0.2], vec![2, 3]);
        let b = (vec![0.7, -0.4, 0.1, 0.6, -0.9, 0.8], vec![3, 2]);
        let err = check_leaf_gradients(&build, &[a, b], 1e-5, 6, 42).unwrap();
        assert!(err <= 1e-7, "max rel err {err}");
    }
}
