//! Finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::ndgrad::graph::{Bindings, Graph, NodeId};

/// Compare analytic gradients against central differences at `point`.
///
/// Perturbs every coordinate of every input named in `wrt`, computes
/// (f(x+eps) − f(x−eps)) / (2·eps), and returns the worst relative error
/// with denominator max(|analytic|, |numeric|, 1e−8).
pub fn finite_difference_check(
    graph: &Graph,
    output: NodeId,
    point: &Bindings,
    wrt: &[(&str, NodeId)],
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let eval = graph.evaluate(point)?;
    let ids: Vec<NodeId> = wrt.iter().map(|&(_, id)| id).collect();
    let grads = graph.gradients(&eval, output, &ids)?;

    let mut worst = 0.0f64;
    for &(name, id) in wrt {
        let base = point
            .get(name)
            .ok_or_else(|| Error::Contract(format!("input {name:?} not bound at point")))?
            .clone();
        let analytic = &grads[&id];
        for i in 0..base.len() {
            let mut plus = point.clone();
            let mut arr = base.clone();
            arr.data_mut()[i] += eps;
            plus.set(name, arr);
            let f_plus = graph.evaluate(&plus)?.scalar(output)?;

            let mut minus = point.clone();
            let mut arr = base.clone();
            arr.data_mut()[i] -= eps;
            minus.set(name, arr);
            let f_minus = graph.evaluate(&minus)?.scalar(output)?;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::array::Array;
    use crate::rng::{Stream, StreamKind};

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let mut g = Graph::new();
        let x = g.input("x", &[]).unwrap();
        let y = g.mul(x, x).unwrap();
        let mut b = Bindings::new();
        b.set("x", Array::scalar(3.0));
        let err = finite_difference_check(&g, y, &b, &[("x", x)], 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn tanh_matches() {
        let mut g = Graph::new();
        let x = g.input("x", &[]).unwrap();
        let y = g.tanh(x);
        let mut b = Bindings::new();
        b.set("x", Array::scalar(0.7));
        let err = finite_difference_check(&g, y, &b, &[("x", x)], 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn two_layer_mlp_loss_matches() {
        // Hand-rolled 3→5→1 network with tanh hidden layer, ~100 params.
        let mut g = Graph::new();
        let x = g.input("x", &[4, 3]).unwrap();
        let w1 = g.input("w1", &[3, 5]).unwrap();
        let b1 = g.input("b1", &[5]).unwrap();
        let w2 = g.input("w2", &[5, 1]).unwrap();
        let b2 = g.input("b2", &[1]).unwrap();
        let h = g.affine(x, w1, b1).unwrap();
        let h = g.tanh(h);
        let o = g.affine(h, w2, b2).unwrap();
        let sq = g.mul(o, o).unwrap();
        let loss = g.mean_all(sq);

        let mut rng = Stream::derive(11, StreamKind::Init, 0);
        let mut bind = Bindings::new();
        for (name, shape) in [
            ("x", vec![4usize, 3]),
            ("w1", vec![3, 5]),
            ("b1", vec![5]),
            ("w2", vec![5, 1]),
            ("b2", vec![1]),
        ] {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            bind.set(name, Array::new(shape, data).unwrap());
        }
        let err = finite_difference_check(
            &g,
            loss,
            &bind,
            &[("x", x), ("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
