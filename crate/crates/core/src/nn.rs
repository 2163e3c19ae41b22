//! Dense layers and MLP stacks on top of the ndgrad graph.
//!
//! Every stack exists in two forms: an eager `forward` for evaluation-time
//! encoding, and a `nodes` builder that inserts the same computation into a
//! graph with parameters as named inputs (so the trainer can bind current
//! values and pull gradients by name).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Array, Bindings, Graph, NodeId, Reduce};
use crate::rng::{Stream, StreamKind};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply_eager(&self, x: Array) -> Array {
        match self {
            Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Identity => x,
            Activation::Sigmoid => x.map(stable_sigmoid),
        }
    }

    fn apply_node(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: weight [in, out], bias [out].
#[derive(Clone, Debug)]
pub struct DenseParams {
    pub weight: Array,
    pub bias: Array,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Sizes from input to output, e.g. [784, 256, 16] is two layers.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Validation(format!(
                "MLP needs at least one layer (got sizes {:?})",
                layer_sizes
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Validation(format!(
                "MLP layer sizes must be positive (got {:?})",
                layer_sizes
            )));
        }
        Ok(MlpSpec {
            layer_sizes,
            hidden_activation,
            output_activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// An MLP: spec plus initialized parameters.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<DenseParams>,
}

/// Glorot-uniform weights (Uniform(−b, b), b = sqrt(6/(fan_in+fan_out))),
/// zero biases; deterministic in `seed`.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> Result<Mlp> {
    let mut layers = Vec::with_capacity(spec.layer_sizes.len() - 1);
    for (i, pair) in spec.layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = Stream::derive(seed, StreamKind::Init, i as u64);
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        layers.push(DenseParams {
            weight: Array::new(vec![fan_in, fan_out], data)?,
            bias: Array::zeros(&[fan_out]),
        });
    }
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

impl Mlp {
    /// Eager forward pass for a [batch, in] input.
    pub fn forward(&self, x: &Array) -> Result<Array> {
        if x.rank() != 2 || x.shape()[1] != self.spec.in_dim() {
            return Err(Error::Validation(format!(
                "MLP expects [batch, {}] input, got {:?}",
                self.spec.in_dim(),
                x.shape()
            )));
        }
        let n_layers = self.layers.len();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = affine_eager(&h, &layer.weight, &layer.bias);
            let act = if i + 1 == n_layers {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            h = act.apply_eager(h);
        }
        Ok(h)
    }

    /// Insert the forward pass into `g`, with parameters as inputs named
    /// `{prefix}.{layer}.w` and `{prefix}.{layer}.b`.
    pub fn nodes(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        self.nodes_opts(g, x, prefix, false)
    }

    /// Like `nodes`, but `freeze` wraps every parameter in a stop-gradient so
    /// this use of the MLP contributes no parameter gradients (the branch
    /// still backpropagates into `x`). Parameter inputs already present in
    /// the graph (e.g. from an unfrozen use of the same MLP) are reused.
    pub fn nodes_opts(
        &self,
        g: &mut Graph,
        x: NodeId,
        prefix: &str,
        freeze: bool,
    ) -> Result<NodeId> {
        let n_layers = self.layers.len();
        let mut h = x;
        for (i, pair) in self.spec.layer_sizes.windows(2).enumerate() {
            let mut w = self.param_input(g, format!("{prefix}.{i}.w"), &[pair[0], pair[1]])?;
            let mut b = self.param_input(g, format!("{prefix}.{i}.b"), &[pair[1]])?;
            if freeze {
                w = g.stop_gradient(w);
                b = g.stop_gradient(b);
            }
            h = g.affine(h, w, b)?;
            let act = if i + 1 == n_layers {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            h = act.apply_node(g, h);
        }
        Ok(h)
    }

    fn param_input(&self, g: &mut Graph, name: String, shape: &[usize]) -> Result<NodeId> {
        match g.input_id(&name) {
            Some(id) => {
                if g.shape(id) != shape {
                    return Err(Error::shape(
                        &name,
                        format!("reused as {:?}, declared {:?}", shape, g.shape(id)),
                    ));
                }
                Ok(id)
            }
            None => g.input(name, shape),
        }
    }

    /// Bind this MLP's current parameter values under `prefix`.
    pub fn bind(&self, bindings: &mut Bindings, prefix: &str) {
        for (i, layer) in self.layers.iter().enumerate() {
            bindings.set(format!("{prefix}.{i}.w"), layer.weight.clone());
            bindings.set(format!("{prefix}.{i}.b"), layer.bias.clone());
        }
    }

    /// Visit `(name, array)` for every parameter under `prefix`.
    pub fn visit_params<'a>(
        &'a self,
        prefix: &str,
        visit: &mut impl FnMut(String, &'a Array),
    ) {
        for (i, layer) in self.layers.iter().enumerate() {
            visit(format!("{prefix}.{i}.w"), &layer.weight);
            visit(format!("{prefix}.{i}.b"), &layer.bias);
        }
    }

    /// Visit `(name, array)` mutably for every parameter under `prefix`.
    pub fn visit_params_mut(
        &mut self,
        prefix: &str,
        visit: &mut impl FnMut(String, &mut Array),
    ) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit(format!("{prefix}.{i}.w"), &mut layer.weight);
            visit(format!("{prefix}.{i}.b"), &mut layer.bias);
        }
    }
}

fn affine_eager(x: &Array, w: &Array, b: &Array) -> Array {
    let (batch, in_dim) = (x.shape()[0], x.shape()[1]);
    let out_dim = w.shape()[1];
    debug_assert_eq!(in_dim, w.shape()[0]);
    let mut out = vec![0.0; batch * out_dim];
    unsafe {
        matrixmultiply::dgemm(
            batch,
            in_dim,
            out_dim,
            1.0,
            x.data().as_ptr(),
            in_dim as isize,
            1,
            w.data().as_ptr(),
            out_dim as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            out_dim as isize,
            1,
        );
    }
    for r in 0..batch {
        for (o, bv) in out[r * out_dim..(r + 1) * out_dim].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Array::new(vec![batch, out_dim], out).expect("affine shape")
}

fn validate_logits_labels(logits: &Array, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::Validation(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::Validation(format!(
            "{} labels for batch of {}",
            labels.len(),
            batch
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!(
            "label {} out of range for {} classes",
            bad, classes
        )));
    }
    Ok((batch, classes))
}

fn row_lse(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

/// Mean over the batch of −log softmax(logits)[label], in nats.
pub fn softmax_cross_entropy(logits: &Array, labels: &[usize]) -> Result<f64> {
    let (batch, _) = validate_logits_labels(logits, labels)?;
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        total += row_lse(row) - row[label];
    }
    Ok(total / batch as f64)
}

/// Mean over the batch of the softmax distribution's entropy, in nats.
pub fn predictive_entropy(logits: &Array) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[1] < 2 {
        return Err(Error::Validation(format!(
            "entropy needs [batch, n≥2] logits, got {:?}",
            logits.shape()
        )));
    }
    let batch = logits.shape()[0];
    let mut total = 0.0;
    for r in 0..batch {
        let row = logits.row(r);
        let lse = row_lse(row);
        // H = lse − Σ p·logit with p = exp(logit − lse).
        let mean_logit: f64 = row.iter().map(|&x| (x - lse).exp() * x).sum();
        total += lse - mean_logit;
    }
    Ok(total / batch as f64)
}

/// One-hot rows for a label vector.
pub fn one_hot(labels: &[usize], classes: usize) -> Array {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        data[r * classes + l] = 1.0;
    }
    Array::new(vec![labels.len(), classes], data).expect("one-hot shape")
}

/// Graph form of `softmax_cross_entropy` with the one-hot targets as a node
/// (an input bound per batch, or a constant).
pub fn cross_entropy_from_onehot_nodes(
    g: &mut Graph,
    logits: NodeId,
    onehot: NodeId,
) -> Result<NodeId> {
    let lse = g.log_sum_exp(logits)?;
    let picked = g.mul(logits, onehot)?;
    let picked = g.reduce_sum(picked, Reduce::LastAxis)?;
    let per_row = g.sub(lse, picked)?;
    g.reduce_mean(per_row, Reduce::All)
}

/// Graph form of `softmax_cross_entropy`: labels enter as a one-hot constant.
pub fn cross_entropy_nodes(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Validation(format!(
            "logits must be [batch, classes], got {:?}",
            shape
        )));
    }
    validate_logits_labels(&Array::zeros(&shape), labels)?;
    let onehot = g.constant(one_hot(labels, shape[1]));
    cross_entropy_from_onehot_nodes(g, logits, onehot)
}

/// Graph form of `predictive_entropy`.
pub fn entropy_nodes(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let lse = g.log_sum_exp(logits)?;
    let probs = g.softmax(logits)?;
    let weighted = g.mul(probs, logits)?;
    let mean_logit = g.reduce_sum(weighted, Reduce::LastAxis)?;
    let per_row = g.sub(lse, mean_logit)?;
    g.reduce_mean(per_row, Reduce::All)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::finite_difference_check;

    fn spec(sizes: &[usize]) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), Activation::Relu, Activation::Identity).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = spec(&[4, 3]);
        let a = init_mlp(&s, 7).unwrap();
        let b = init_mlp(&s, 7).unwrap();
        let c = init_mlp(&s, 8).unwrap();
        assert_eq!(a.layers[0].weight.data(), b.layers[0].weight.data());
        assert_ne!(a.layers[0].weight.data(), c.layers[0].weight.data());

        let bound = (6.0f64 / 7.0).sqrt();
        assert!((bound - 0.9258).abs() < 1e-4);
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() < bound));
        assert!(a.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_constant_bias() {
        let s = spec(&[3, 2]);
        let mut mlp = init_mlp(&s, 1).unwrap();
        for w in mlp.layers[0].weight.data_mut() {
            *w = 0.0;
        }
        for b in mlp.layers[0].bias.data_mut() {
            *b = 4.5;
        }
        let x = Array::matrix(2, 3, vec![1., 2., 3., -1., -2., -3.]).unwrap();
        let y = mlp.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let s = spec(&[2, 2]);
        let mut mlp = init_mlp(&s, 1).unwrap();
        mlp.layers[0].weight = Array::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let x = Array::matrix(3, 2, vec![0.5, -1.5, 2.0, 0.0, -7.0, 3.25]).unwrap();
        let y = mlp.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn sigmoid_output_in_unit_interval() {
        let s = MlpSpec::new(vec![5, 4, 3], Activation::Relu, Activation::Sigmoid).unwrap();
        let mlp = init_mlp(&s, 3).unwrap();
        let x = Array::matrix(4, 5, (0..20).map(|i| i as f64 - 10.0).collect()).unwrap();
        let y = mlp.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let s = spec(&[3, 2]);
        let mlp = init_mlp(&s, 1).unwrap();
        let x = Array::matrix(2, 4, vec![0.0; 8]).unwrap();
        assert!(mlp.forward(&x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array::matrix(5, 10, vec![0.3; 50]).unwrap();
        let labels = vec![0, 3, 9, 5, 1];
        let ce = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((ce - 10.0f64.ln()).abs() < 1e-12);
        assert!((ce - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_two_logits() {
        let logits = Array::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let ce = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((ce - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_monotone_in_correct_logit() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 3.0, 10.0, 30.0] {
            let logits = Array::matrix(1, 4, vec![margin, 0.0, 0.0, 0.0]).unwrap();
            let ce = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-12); // margin 30 is effectively one-hot confident
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Array::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn entropy_uniform_and_skewed() {
        let logits = Array::matrix(2, 3, vec![1.0; 6]).unwrap();
        let h = predictive_entropy(&logits).unwrap();
        assert!((h - 3.0f64.ln()).abs() < 1e-9);

        let logits = Array::matrix(1, 2, vec![3.0f64.ln(), 0.0]).unwrap();
        let h = predictive_entropy(&logits).unwrap();
        assert!((h - 0.56233).abs() < 1e-4); // entropy of (0.75, 0.25)
    }

    #[test]
    fn entropy_near_one_hot_vanishes() {
        let logits = Array::matrix(1, 4, vec![40.0, 0.0, 0.0, 0.0]).unwrap();
        let h = predictive_entropy(&logits).unwrap();
        assert!(h.abs() < 1e-12);
    }

    #[test]
    fn entropy_bounded_by_ln_n() {
        let mut rng = Stream::derive(5, StreamKind::Metrics, 0);
        for _ in 0..50 {
            let n = 2 + rng.below(6);
            let data: Vec<f64> = (0..3 * n).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
            let logits = Array::new(vec![3, n], data).unwrap();
            let h = predictive_entropy(&logits).unwrap();
            assert!(h <= (n as f64).ln() + 1e-12);
            assert!(h >= 0.0);
        }
    }

    #[test]
    fn graph_losses_match_eager_and_differentiate() {
        let labels = vec![2, 0, 1];
        let data: Vec<f64> = vec![0.3, -1.2, 0.8, 1.4, 0.2, -0.5, -0.9, 0.6, 0.1];
        let logits = Array::matrix(3, 3, data.clone()).unwrap();

        let mut g = Graph::new();
        let l = g.input("logits", &[3, 3]).unwrap();
        let ce = cross_entropy_nodes(&mut g, l, &labels).unwrap();
        let ent = entropy_nodes(&mut g, l).unwrap();
        let mut b = Bindings::new();
        b.set("logits", logits.clone());
        let eval = g.evaluate(&b).unwrap();

        let ce_eager = softmax_cross_entropy(&logits, &labels).unwrap();
        let ent_eager = predictive_entropy(&logits).unwrap();
        assert!((eval.scalar(ce).unwrap() - ce_eager).abs() < 1e-12);
        assert!((eval.scalar(ent).unwrap() - ent_eager).abs() < 1e-12);

        for out in [ce, ent] {
            let err = finite_difference_check(&g, out, &b, &[("logits", l)], 1e-5).unwrap();
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn mlp_graph_matches_eager_forward() {
        let s = MlpSpec::new(vec![4, 6, 2], Activation::Tanh, Activation::Sigmoid).unwrap();
        let mlp = init_mlp(&s, 99).unwrap();
        let x = Array::matrix(3, 4, (0..12).map(|i| (i as f64) / 7.0 - 0.8).collect()).unwrap();

        let mut g = Graph::new();
        let xn = g.input("x", &[3, 4]).unwrap();
        let out = mlp.nodes(&mut g, xn, "net").unwrap();
        let mut b = Bindings::new();
        b.set("x", x.clone());
        mlp.bind(&mut b, "net");
        let eval = g.evaluate(&b).unwrap();

        let eager = mlp.forward(&x).unwrap();
        for (a, e) in eval.value(out).data().iter().zip(eager.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
