//! Central finite differences as an independent gradient oracle.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Central-difference gradient of a pure scalar function, element by element.
///
/// Differences are taken against the actually realized f32 step (`x+h` and
/// `x-h` round to f32 before evaluation), and accumulated in f64, so linear
/// functions come out exact to f64 rounding.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f32,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite difference step must be > 0, got {h}")));
    }
    let mut grad = vec![0.0f32; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let v = x.data()[i];
        let vp = v + h;
        let vm = v - h;
        probe.data_mut()[i] = vp;
        let fp = f(&probe)?;
        probe.data_mut()[i] = vm;
        let fm = f(&probe)?;
        probe.data_mut()[i] = v;
        grad[i] = ((fp - fm) / (vp as f64 - vm as f64)) as f32;
    }
    Tensor::new(x.dims().to_vec(), grad)
}

/// Worst relative mismatch between an analytic gradient and the oracle,
/// over elements where the analytic gradient clears `gate`.
/// Relative error is |a-f| / max(|a|, |f|).
pub fn max_rel_err(analytic: &Tensor, fd: &Tensor, gate: f32) -> f32 {
    let mut worst = 0.0f32;
    for (&a, &f) in analytic.data().iter().zip(fd.data()) {
        if a.abs() <= gate {
            continue;
        }
        let denom = a.abs().max(f.abs());
        let rel = (a - f).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::Graph;

    #[test]
    fn linear_function_is_exact() {
        // f = sum(x): gradient is exactly 1 everywhere, to within 1e-9.
        let x = Tensor::from_fn(&[3, 3], |i| 0.1 * i as f32 - 0.3);
        let mut f = |t: &Tensor| -> crate::Result<f64> {
            let mut g = Graph::new();
            let leaf = g.leaf(t.clone());
            let s = g.sum_reduce(leaf);
            Ok(g.scalar_value(s))
        };
        let grad = finite_difference_grad(&mut f, &x, 1e-3).unwrap();
        for &v in grad.data() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn quadratic_matches_closed_form() {
        // f = sum(x^2) at x=[3]: derivative 6, central difference exact up
        // to rounding.
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let mut f = |t: &Tensor| -> crate::Result<f64> {
            let mut g = Graph::new();
            let leaf = g.leaf(t.clone());
            let sq = g.square(leaf);
            let s = g.sum_reduce(sq);
            Ok(g.scalar_value(s))
        };
        let grad = finite_difference_grad(&mut f, &x, 1e-3).unwrap();
        assert!((grad.data()[0] - 6.0).abs() < 1e-6, "{}", grad.data()[0]);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        let mut f = |_: &Tensor| Ok(0.0);
        assert!(finite_difference_grad(&mut f, &x, 0.0).is_err());
    }
}
