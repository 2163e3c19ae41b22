//! Flat-tape computation graph with reverse-mode gradients.
//!
//! Nodes are appended to a tape in topological order (builders can only
//! reference ids that already exist, so the order is correct by
//! construction). `evaluate` walks the tape forward, `gradients` walks it
//! backward accumulating adjoints. Arrays are dense row-major f64.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::ndgrad::array::Array;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

/// Which axes a reduction collapses.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduce {
    /// Collapse everything to a scalar.
    All,
    /// Collapse the last axis only.
    LastAxis,
}

#[derive(Clone, Debug)]
enum OpKind {
    Input,
    Constant(Array),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    ReduceSum(NodeId, Reduce),
    ReduceMean(NodeId, Reduce),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize, usize),
    Softmax(NodeId),
    LogSumExp(NodeId),
    /// Clamp to [1e-6, 1-1e-6]; gradient passes through inside the interval.
    ClampUnit(NodeId),
    /// Identity forward, zero gradient backward.
    StopGradient(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    kind: OpKind,
    shape: Vec<usize>,
    label: String,
}

/// Values bound to graph inputs by name.
#[derive(Clone, Default, Debug)]
pub struct Bindings {
    map: HashMap<String, Array>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: Array) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }
}

/// Forward-pass results for one set of bindings.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Array>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Array {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.values[id.0].item()
    }
}

#[derive(Clone, Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    named: Vec<(String, NodeId)>,
}

const CLAMP_LO: f64 = 1e-6;
const CLAMP_HI: f64 = 1.0 - 1e-6;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    /// Tag a node so `evaluate_named` reports its value.
    pub fn name(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        let label = label.into();
        self.nodes[id.0].label = label.clone();
        self.named.push((label, id));
        id
    }

    fn push(&mut self, kind: OpKind, shape: Vec<usize>, label: String) -> NodeId {
        self.nodes.push(Node { kind, shape, label });
        NodeId(self.nodes.len() - 1)
    }

    fn auto_label(&self, op: &str) -> String {
        format!("{}#{}", op, self.nodes.len())
    }

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        let name = name.into();
        if self.inputs.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate input name {:?}", name)));
        }
        let id = self.push(OpKind::Input, shape.to_vec(), name.clone());
        self.inputs.insert(name, id);
        Ok(id)
    }

    /// Look up an input node by its name.
    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    /// All input nodes whose names start with `prefix`, as (name, id).
    pub fn inputs_with_prefix(&self, prefix: &str) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = self
            .inputs
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, id)| (n.clone(), *id))
            .collect();
        out.sort();
        out
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        let label = self.auto_label("const");
        self.push(OpKind::Constant(value), shape, label)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let label = self.auto_label("matmul");
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                &label,
                format!(
                    "matmul needs [m,k]x[k,n]; got {:?} ({}) x {:?} ({})",
                    sa,
                    self.label(a),
                    sb,
                    self.label(b)
                ),
            ));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(OpKind::MatMul(a, b), shape, label))
    }

    fn binary_elementwise(
        &mut self,
        op: &str,
        a: NodeId,
        b: NodeId,
        make: impl Fn(NodeId, NodeId) -> OpKind,
    ) -> Result<NodeId> {
        let label = self.auto_label(op);
        let shape = match broadcast_shape(self.shape(a), self.shape(b)) {
            Some(s) => s,
            None => {
                return Err(Error::shape(
                    &label,
                    format!(
                        "{} cannot broadcast {:?} ({}) with {:?} ({})",
                        op,
                        self.shape(a),
                        self.label(a),
                        self.shape(b),
                        self.label(b)
                    ),
                ))
            }
        };
        Ok(self.push(make(a, b), shape, label))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, OpKind::Add)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, OpKind::Mul)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Multiply by a fixed scalar.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let label = self.auto_label("neg");
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Neg(a), shape, label)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let label = self.auto_label("relu");
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Relu(a), shape, label)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let label = self.auto_label("tanh");
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Tanh(a), shape, label)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let label = self.auto_label("sigmoid");
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Sigmoid(a), shape, label)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let label = self.auto_label("exp");
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Exp(a), shape, label)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let label = self.auto_label("log");
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Log(a), shape, label)
    }

    fn reduced_shape(&self, a: NodeId, reduce: Reduce, label: &str) -> Result<Vec<usize>> {
        match reduce {
            Reduce::All => Ok(vec![]),
            Reduce::LastAxis => {
                let s = self.shape(a);
                if s.is_empty() {
                    return Err(Error::shape(
                        label,
                        format!("last-axis reduction of scalar node {}", self.label(a)),
                    ));
                }
                Ok(s[..s.len() - 1].to_vec())
            }
        }
    }

    pub fn reduce_sum(&mut self, a: NodeId, reduce: Reduce) -> Result<NodeId> {
        let label = self.auto_label("sum");
        let shape = self.reduced_shape(a, reduce, &label)?;
        Ok(self.push(OpKind::ReduceSum(a, reduce), shape, label))
    }

    pub fn reduce_mean(&mut self, a: NodeId, reduce: Reduce) -> Result<NodeId> {
        let label = self.auto_label("mean");
        let shape = self.reduced_shape(a, reduce, &label)?;
        Ok(self.push(OpKind::ReduceMean(a, reduce), shape, label))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.reduce_sum(a, Reduce::All).expect("All never fails")
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.reduce_mean(a, Reduce::All).expect("All never fails")
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let label = self.auto_label("concat");
        if parts.is_empty() {
            return Err(Error::shape(&label, "concat of zero parts".to_string()));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.is_empty() {
            return Err(Error::shape(
                &label,
                format!("concat of scalar node {}", self.label(parts[0])),
            ));
        }
        let prefix = &first[..first.len() - 1];
        let mut last = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != prefix {
                return Err(Error::shape(
                    &label,
                    format!(
                        "concat parts disagree: {:?} ({}) vs {:?} ({})",
                        first,
                        self.label(parts[0]),
                        s,
                        self.label(p)
                    ),
                ));
            }
            last += s[s.len() - 1];
        }
        let mut shape = prefix.to_vec();
        shape.push(last);
        Ok(self.push(OpKind::Concat(parts.to_vec()), shape, label))
    }

    /// Slice `len` coordinates of the last axis starting at `start`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let label = self.auto_label("slice");
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Error::shape(
                &label,
                format!("slice of scalar node {}", self.label(a)),
            ));
        }
        let width = s[s.len() - 1];
        if len == 0 || start + len > width {
            return Err(Error::shape(
                &label,
                format!(
                    "slice {}..{} out of last axis width {} of {}",
                    start,
                    start + len,
                    width,
                    self.label(a)
                ),
            ));
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(len);
        Ok(self.push(OpKind::Slice(a, start, len), shape, label))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let label = self.auto_label("softmax");
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Error::shape(
                &label,
                format!("softmax of scalar node {}", self.label(a)),
            ));
        }
        let shape = s.to_vec();
        Ok(self.push(OpKind::Softmax(a), shape, label))
    }

    /// Numerically stable log-sum-exp over the last axis.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let label = self.auto_label("lse");
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Error::shape(
                &label,
                format!("log-sum-exp of scalar node {}", self.label(a)),
            ));
        }
        let shape = s[..s.len() - 1].to_vec();
        Ok(self.push(OpKind::LogSumExp(a), shape, label))
    }

    pub fn clamp_unit(&mut self, a: NodeId) -> NodeId {
        let label = self.auto_label("clamp");
        let shape = self.shape(a).to_vec();
        self.push(OpKind::ClampUnit(a), shape, label)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let label = self.auto_label("sg");
        let shape = self.shape(a).to_vec();
        self.push(OpKind::StopGradient(a), shape, label)
    }

    /// x·W + b for x [batch,in], W [in,out], b [out].
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn evaluate(&self, bindings: &Bindings) -> Result<Evaluation> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = self.forward(node, &values, bindings)?;
            if !value.all_finite() {
                return Err(Error::numeric(&node.label, "non-finite value produced"));
            }
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    /// Evaluate and return the values of all nodes tagged with `name`.
    pub fn evaluate_named(&self, bindings: &Bindings) -> Result<BTreeMap<String, Array>> {
        let eval = self.evaluate(bindings)?;
        Ok(self
            .named
            .iter()
            .map(|(n, id)| (n.clone(), eval.value(*id).clone()))
            .collect())
    }

    fn forward(&self, node: &Node, values: &[Array], bindings: &Bindings) -> Result<Array> {
        let v = |id: NodeId| &values[id.0];
        Ok(match &node.kind {
            OpKind::Input => {
                let bound = bindings.get(&node.label).ok_or_else(|| {
                    Error::Contract(format!("input {:?} not bound", node.label))
                })?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(Error::shape(
                        &node.label,
                        format!(
                            "input declared {:?} but bound {:?}",
                            node.shape,
                            bound.shape()
                        ),
                    ));
                }
                bound.clone()
            }
            OpKind::Constant(c) => c.clone(),
            OpKind::MatMul(a, b) => matmul_forward(v(*a), v(*b)),
            OpKind::Add(a, b) => broadcast_zip(v(*a), v(*b), |x, y| x + y),
            OpKind::Mul(a, b) => broadcast_zip(v(*a), v(*b), |x, y| x * y),
            OpKind::Neg(a) => v(*a).map(|x| -x),
            OpKind::Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            OpKind::Tanh(a) => v(*a).map(f64::tanh),
            OpKind::Sigmoid(a) => v(*a).map(sigmoid),
            OpKind::Exp(a) => v(*a).map(f64::exp),
            OpKind::Log(a) => v(*a).map(f64::ln),
            OpKind::ReduceSum(a, r) => reduce_forward(v(*a), *r, false),
            OpKind::ReduceMean(a, r) => reduce_forward(v(*a), *r, true),
            OpKind::Concat(parts) => {
                let arrays: Vec<&Array> = parts.iter().map(|&p| v(p)).collect();
                concat_forward(&arrays)
            }
            OpKind::Slice(a, start, len) => slice_forward(v(*a), *start, *len),
            OpKind::Softmax(a) => softmax_forward(v(*a)),
            OpKind::LogSumExp(a) => lse_forward(v(*a)),
            OpKind::ClampUnit(a) => v(*a).map(|x| x.clamp(CLAMP_LO, CLAMP_HI)),
            OpKind::StopGradient(a) => v(*a).clone(),
        })
    }

    /// Adjoints of a scalar `output` with respect to each node in `wrt`.
    ///
    /// Nodes the output does not depend on get zero arrays of their shape.
    pub fn gradients(
        &self,
        eval: &Evaluation,
        output: NodeId,
        wrt: &[NodeId],
    ) -> Result<HashMap<NodeId, Array>> {
        if !self.nodes[output.0].shape.is_empty() {
            return Err(Error::Contract(format!(
                "gradients of non-scalar output {} with shape {:?}",
                self.label(output),
                self.shape(output)
            )));
        }
        let mut adjoints: Vec<Option<Array>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(Array::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let g = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if wrt.contains(&NodeId(idx)) {
                // Keep a copy for the result; upstream flow continues below.
                adjoints[idx] = Some(g.clone());
            }
            let node = &self.nodes[idx];
            let v = |id: NodeId| eval.value(id);
            match &node.kind {
                OpKind::Input | OpKind::Constant(_) => {}
                OpKind::MatMul(a, b) => {
                    let (da, db) = matmul_backward(&g, v(*a), v(*b));
                    accumulate(&mut adjoints[a.0], da);
                    accumulate(&mut adjoints[b.0], db);
                }
                OpKind::Add(a, b) => {
                    accumulate(&mut adjoints[a.0], reduce_to_shape(&g, v(*a).shape()));
                    accumulate(&mut adjoints[b.0], reduce_to_shape(&g, v(*b).shape()));
                }
                OpKind::Mul(a, b) => {
                    let ga = broadcast_zip(&g, v(*b), |gv, bv| gv * bv);
                    let gb = broadcast_zip(&g, v(*a), |gv, av| gv * av);
                    accumulate(&mut adjoints[a.0], reduce_to_shape(&ga, v(*a).shape()));
                    accumulate(&mut adjoints[b.0], reduce_to_shape(&gb, v(*b).shape()));
                }
                OpKind::Neg(a) => accumulate(&mut adjoints[a.0], g.map(|x| -x)),
                OpKind::Relu(a) => {
                    let delta = zip_same(&g, v(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adjoints[a.0], delta);
                }
                OpKind::Tanh(a) => {
                    let y = eval.value(NodeId(idx));
                    let delta = zip_same(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut adjoints[a.0], delta);
                }
                OpKind::Sigmoid(a) => {
                    let y = eval.value(NodeId(idx));
                    let delta = zip_same(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                    accumulate(&mut adjoints[a.0], delta);
                }
                OpKind::Exp(a) => {
                    let y = eval.value(NodeId(idx));
                    let delta = zip_same(&g, y, |gv, yv| gv * yv);
                    accumulate(&mut adjoints[a.0], delta);
                }
                OpKind::Log(a) => {
                    let delta = zip_same(&g, v(*a), |gv, x| gv / x);
                    accumulate(&mut adjoints[a.0], delta);
                }
                OpKind::ReduceSum(a, r) => {
                    accumulate(&mut adjoints[a.0], reduce_backward(&g, v(*a), *r, false));
                }
                OpKind::ReduceMean(a, r) => {
                    accumulate(&mut adjoints[a.0], reduce_backward(&g, v(*a), *r, true));
                }
                OpKind::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = v(p).last_dim();
                        accumulate(&mut adjoints[p.0], slice_forward(&g, offset, w));
                        offset += w;
                    }
                }
                OpKind::Slice(a, start, len) => {
                    accumulate(&mut adjoints[a.0], slice_backward(&g, v(*a), *start, *len));
                }
                OpKind::Softmax(a) => {
                    let y = eval.value(NodeId(idx));
                    accumulate(&mut adjoints[a.0], softmax_backward(&g, y));
                }
                OpKind::LogSumExp(a) => {
                    let lse = eval.value(NodeId(idx));
                    accumulate(&mut adjoints[a.0], lse_backward(&g, v(*a), lse));
                }
                OpKind::ClampUnit(a) => {
                    let delta = zip_same(&g, v(*a), |gv, x| {
                        if (CLAMP_LO..=CLAMP_HI).contains(&x) {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adjoints[a.0], delta);
                }
                OpKind::StopGradient(_) => {}
            }
        }

        let mut out = HashMap::with_capacity(wrt.len());
        for &id in wrt {
            let grad = match &adjoints[id.0] {
                Some(g) => g.clone(),
                None => Array::zeros(self.shape(id)),
            };
            out.insert(id, grad);
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Array>, delta: Array) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), delta.shape());
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Broadcast rules: identical shapes; a scalar with anything; a rank-1 [n]
/// against a rank-2 [b,n] (bias-add pattern). Anything else is rejected.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if a.is_empty() {
        return Some(b.to_vec());
    }
    if b.is_empty() {
        return Some(a.to_vec());
    }
    if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        return Some(a.to_vec());
    }
    if b.len() == 2 && a.len() == 1 && b[1] == a[0] {
        return Some(b.to_vec());
    }
    None
}

/// Elementwise combine under the broadcast rules above; shapes prevalidated.
fn broadcast_zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return zip_same(a, b, f);
    }
    if sa.is_empty() {
        let x = a.data()[0];
        return b.map(|y| f(x, y));
    }
    if sb.is_empty() {
        let y = b.data()[0];
        return a.map(|x| f(x, y));
    }
    if sa.len() == 2 && sb.len() == 1 {
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            for (x, y) in row.iter().zip(b.data()) {
                data.push(f(*x, *y));
            }
        }
        return Array::new(sa.to_vec(), data).expect("shape prevalidated");
    }
    if sb.len() == 2 && sa.len() == 1 {
        let (rows, cols) = (sb[0], sb[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &b.data()[r * cols..(r + 1) * cols];
            for (x, y) in a.data().iter().zip(row) {
                data.push(f(*x, *y));
            }
        }
        return Array::new(sb.to_vec(), data).expect("shape prevalidated");
    }
    unreachable!("broadcast shapes validated at build time")
}

fn zip_same(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sum an adjoint back down to a broadcast operand's shape.
fn reduce_to_shape(g: &Array, target: &[usize]) -> Array {
    if g.shape() == target {
        return g.clone();
    }
    if target.is_empty() {
        return Array::scalar(g.data().iter().sum());
    }
    // [b,n] adjoint reduced onto an [n] operand: column sums.
    debug_assert!(g.rank() == 2 && target.len() == 1 && g.shape()[1] == target[0]);
    let (rows, cols) = (g.shape()[0], g.shape()[1]);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, x) in out.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
            *o += x;
        }
    }
    Array::vector(out)
}

/// C = A·B via the gemm kernel. `ta`/`tb` mark logically transposed operands
/// (stored row-major in the untransposed layout); `beta` scales existing C.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul_forward(a: &Array, b: &Array) -> Array {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = Array::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, c.data_mut());
    c
}

fn matmul_backward(g: &Array, a: &Array, b: &Array) -> (Array, Array) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    // dA = g·Bᵀ, dB = Aᵀ·g
    let mut da = Array::zeros(&[m, k]);
    gemm(m, n, k, g.data(), false, b.data(), true, 0.0, da.data_mut());
    let mut db = Array::zeros(&[k, n]);
    gemm(k, m, n, a.data(), true, g.data(), false, 0.0, db.data_mut());
    (da, db)
}

fn reduce_forward(a: &Array, reduce: Reduce, mean: bool) -> Array {
    match reduce {
        Reduce::All => {
            let mut s: f64 = a.data().iter().sum();
            if mean {
                s /= a.len() as f64;
            }
            Array::scalar(s)
        }
        Reduce::LastAxis => {
            let w = a.last_dim();
            let rows = a.len() / w;
            let mut data = Vec::with_capacity(rows);
            for r in 0..rows {
                let mut s: f64 = a.data()[r * w..(r + 1) * w].iter().sum();
                if mean {
                    s /= w as f64;
                }
                data.push(s);
            }
            Array::new(a.shape()[..a.rank() - 1].to_vec(), data).expect("reduced shape")
        }
    }
}

fn reduce_backward(g: &Array, input: &Array, reduce: Reduce, mean: bool) -> Array {
    match reduce {
        Reduce::All => {
            let mut gv = g.data()[0];
            if mean {
                gv /= input.len() as f64;
            }
            Array::filled(input.shape(), gv)
        }
        Reduce::LastAxis => {
            let w = input.last_dim();
            let rows = input.len() / w;
            let scale = if mean { 1.0 / w as f64 } else { 1.0 };
            let mut data = Vec::with_capacity(input.len());
            for r in 0..rows {
                let gv = g.data()[r] * scale;
                data.extend(std::iter::repeat(gv).take(w));
            }
            Array::new(input.shape().to_vec(), data).expect("input shape")
        }
    }
}

fn concat_forward(parts: &[&Array]) -> Array {
    let prefix_rows = parts[0].len() / parts[0].last_dim();
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut shape = parts[0].shape()[..parts[0].rank() - 1].to_vec();
    shape.push(total);
    let mut data = Vec::with_capacity(prefix_rows * total);
    for r in 0..prefix_rows {
        for p in parts {
            let w = p.last_dim();
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Array::new(shape, data).expect("concat shape")
}

fn slice_forward(a: &Array, start: usize, len: usize) -> Array {
    let w = a.last_dim();
    let rows = a.len() / w;
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(len);
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * w + start..r * w + start + len]);
    }
    Array::new(shape, data).expect("slice shape")
}

fn slice_backward(g: &Array, input: &Array, start: usize, len: usize) -> Array {
    let w = input.last_dim();
    let rows = input.len() / w;
    let mut out = Array::zeros(input.shape());
    for r in 0..rows {
        let dst = &mut out.data_mut()[r * w + start..r * w + start + len];
        dst.copy_from_slice(&g.data()[r * len..(r + 1) * len]);
    }
    out
}

fn softmax_forward(a: &Array) -> Array {
    let w = a.last_dim();
    let rows = a.len() / w;
    let mut data = Vec::with_capacity(a.len());
    for r in 0..rows {
        let row = &a.data()[r * w..(r + 1) * w];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / sum));
    }
    Array::new(a.shape().to_vec(), data).expect("softmax shape")
}

fn softmax_backward(g: &Array, y: &Array) -> Array {
    let w = y.last_dim();
    let rows = y.len() / w;
    let mut data = Vec::with_capacity(y.len());
    for r in 0..rows {
        let yr = &y.data()[r * w..(r + 1) * w];
        let gr = &g.data()[r * w..(r + 1) * w];
        let dot: f64 = yr.iter().zip(gr).map(|(&p, &gv)| p * gv).sum();
        data.extend(yr.iter().zip(gr).map(|(&p, &gv)| p * (gv - dot)));
    }
    Array::new(y.shape().to_vec(), data).expect("softmax shape")
}

fn lse_forward(a: &Array) -> Array {
    let w = a.last_dim();
    let rows = a.len() / w;
    let mut data = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &a.data()[r * w..(r + 1) * w];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
        data.push(mx + sum.ln());
    }
    Array::new(a.shape()[..a.rank() - 1].to_vec(), data).expect("lse shape")
}

fn lse_backward(g: &Array, input: &Array, lse: &Array) -> Array {
    let w = input.last_dim();
    let rows = input.len() / w;
    let mut data = Vec::with_capacity(input.len());
    for r in 0..rows {
        let row = &input.data()[r * w..(r + 1) * w];
        let (l, gv) = (lse.data()[r], g.data()[r]);
        data.extend(row.iter().map(|&x| gv * (x - l).exp()));
    }
    Array::new(input.shape().to_vec(), data).expect("input shape")
}
