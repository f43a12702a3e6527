//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Graph` is an append-only tape of nodes. Every op records its operands
//! and a backward rule; `backward` sweeps the tape in reverse creation order,
//! which is a topological order by construction, so gradient accumulation is
//! deterministic. Graphs are rebuilt per training step and dropped.
//!
//! Gradients only flow into nodes transitively reachable from a `leaf`;
//! subtrees built purely from `constant` inputs skip gradient work entirely.

use crate::error::{HgError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Rule {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Matmul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowMean(NodeId),
    ChannelMean(NodeId, usize),
    ConcatCols(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    rule: Rule,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, rule: Rule) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            rule,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Rule::Leaf)
    }

    /// Non-differentiable input (data, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Rule::Constant)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, needs, Rule::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, needs, Rule::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, needs, Rule::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(v, needs, Rule::ScalarMul(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, needs, Rule::Matmul(a, b)))
    }

    /// Add a [cols] bias vector to every row of a [rows, cols] tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (cols, ok) = match (xv.shape(), bv.shape()) {
            ([_, c], [bc]) => (*c, c == bc),
            _ => (0, false),
        };
        if !ok {
            return Err(HgError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let rows = xv.shape()[0];
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(xv.data()[i * cols + j] + bv.data()[j]);
            }
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(v, needs, Rule::AddBias(x, bias)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(v, needs, Rule::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let needs = self.needs(a);
        self.push(v, needs, Rule::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(log_sigmoid);
        let needs = self.needs(a);
        self.push(v, needs, Rule::LogSigmoid(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let needs = self.needs(a);
        self.push(v, needs, Rule::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(v, needs, Rule::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        let needs = self.needs(a);
        self.push(v, needs, Rule::Mean(a))
    }

    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).row_mean()?;
        let needs = self.needs(a);
        Ok(self.push(v, needs, Rule::RowMean(a)))
    }

    pub fn channel_mean(&mut self, a: NodeId, channels: usize) -> Result<NodeId> {
        let v = self.value(a).channel_mean(channels)?;
        let needs = self.needs(a);
        Ok(self.push(v, needs, Rule::ChannelMean(a, channels)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, needs, Rule::ConcatCols(parts.to_vec())))
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match node.grad.as_mut() {
            Some(g) => {
                // Scalar-broadcast operands collect the sum of downstream grads.
                if g.shape() == delta.shape() {
                    for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                        *gv += dv;
                    }
                } else {
                    debug_assert!(g.is_scalar());
                    g.data_mut()[0] += delta.sum();
                }
            }
            None => {
                let g = if node.value.shape() == delta.shape() {
                    delta.clone()
                } else {
                    debug_assert!(node.value.is_scalar());
                    Tensor::scalar(delta.sum())
                };
                node.grad = Some(g);
            }
        }
    }

    /// Populate gradients of every differentiable node reachable from `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(HgError::validation(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("checked above");
            self.step_back(i, &grad)?;
        }
        Ok(())
    }

    fn step_back(&mut self, i: usize, grad: &Tensor) -> Result<()> {
        // Rules are cheap to describe by id; borrow checker wants the match
        // decoupled from the mutable accumulate calls.
        enum Todo {
            One(NodeId, Tensor),
            Two(NodeId, Tensor, NodeId, Tensor),
            Many(Vec<(NodeId, Tensor)>),
            None,
        }
        let todo = match &self.nodes[i].rule {
            Rule::Leaf | Rule::Constant => Todo::None,
            Rule::Add(a, b) => Todo::Two(*a, grad.clone(), *b, grad.clone()),
            Rule::Sub(a, b) => Todo::Two(*a, grad.clone(), *b, grad.scale(-1.0)),
            Rule::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                // grad wrt a is grad*b, wrt b is grad*a; zip handles the
                // scalar-broadcast case and accumulate reduces it.
                let ga = grad.zip(&bv, "mul_back", |g, b| g * b)?;
                let gb = grad.zip(&av, "mul_back", |g, a| g * a)?;
                Todo::Two(a, ga, b, gb)
            }
            Rule::ScalarMul(a, c) => Todo::One(*a, grad.scale(*c)),
            Rule::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = grad.matmul_nt(&self.nodes[b.0].value)?;
                let gb = self.nodes[a.0].value.matmul_tn(grad)?;
                Todo::Two(a, ga, b, gb)
            }
            Rule::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let (rows, cols) = (grad.shape()[0], grad.shape()[1]);
                let mut bg = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        bg[c] += grad.data()[r * cols + c];
                    }
                }
                Todo::Two(x, grad.clone(), bias, Tensor::new(vec![cols], bg)?)
            }
            Rule::Relu(a) => {
                let a = *a;
                let av = &self.nodes[a.0].value;
                let g = Tensor::new(
                    grad.shape().to_vec(),
                    grad.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                )?;
                Todo::One(a, g)
            }
            Rule::Sigmoid(a) => {
                let a = *a;
                let sv = &self.nodes[i].value;
                let g = Tensor::new(
                    grad.shape().to_vec(),
                    grad.data()
                        .iter()
                        .zip(sv.data())
                        .map(|(&g, &s)| g * s * (1.0 - s))
                        .collect(),
                )?;
                Todo::One(a, g)
            }
            Rule::LogSigmoid(a) => {
                let a = *a;
                let av = &self.nodes[a.0].value;
                let g = Tensor::new(
                    grad.shape().to_vec(),
                    grad.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&g, &x)| g * sigmoid(-x))
                        .collect(),
                )?;
                Todo::One(a, g)
            }
            Rule::Square(a) => {
                let a = *a;
                let av = &self.nodes[a.0].value;
                let g = Tensor::new(
                    grad.shape().to_vec(),
                    grad.data()
                        .iter()
                        .zip(av.data())
                        .map(|(&g, &x)| g * 2.0 * x)
                        .collect(),
                )?;
                Todo::One(a, g)
            }
            Rule::Sum(a) => {
                let a = *a;
                let g = Tensor::full(self.nodes[a.0].value.shape().to_vec(), grad.item());
                Todo::One(a, g)
            }
            Rule::Mean(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.numel() as f64;
                let g = Tensor::full(self.nodes[a.0].value.shape().to_vec(), grad.item() / n);
                Todo::One(a, g)
            }
            Rule::RowMean(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let (rows, cols) = (shape[0], shape[1]);
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let gr = grad.data()[r] / cols as f64;
                    data.extend(std::iter::repeat(gr).take(cols));
                }
                Todo::One(a, Tensor::new(shape, data)?)
            }
            Rule::ChannelMean(a, channels) => {
                let (a, channels) = (*a, *channels);
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g = match shape.as_slice() {
                    [rows, cols] => {
                        let block = cols / channels;
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..*rows {
                            for ch in 0..channels {
                                let gv = grad.data()[r * channels + ch] / block as f64;
                                data.extend(std::iter::repeat(gv).take(block));
                            }
                        }
                        Tensor::new(shape.clone(), data)?
                    }
                    [c, h, w] => {
                        let block = h * w;
                        let mut data = Vec::with_capacity(c * block);
                        for ch in 0..*c {
                            let gv = grad.data()[ch] / block as f64;
                            data.extend(std::iter::repeat(gv).take(block));
                        }
                        Tensor::new(shape.clone(), data)?
                    }
                    _ => unreachable!("validated at op creation"),
                };
                Todo::One(a, g)
            }
            Rule::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = grad.shape()[0];
                let total = grad.shape()[1];
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        let start = r * total + offset;
                        data.extend_from_slice(&grad.data()[start..start + w]);
                    }
                    out.push((p, Tensor::new(vec![rows, w], data)?));
                    offset += w;
                }
                Todo::Many(out)
            }
        };
        match todo {
            Todo::None => {}
            Todo::One(a, g) => self.accumulate(a, &g),
            Todo::Two(a, ga, b, gb) => {
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Todo::Many(items) => {
                for (id, g) in items {
                    self.accumulate(id, &g);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(sigma(x)), computed without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.square(x);
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_sigmoid_gradient_at_zero_weight() {
        // root = log_sigmoid(w * 1) at w = 0 -> d/dw = sigma(0) = 0.5
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(0.0));
        let one = g.constant(Tensor::scalar(1.0));
        let prod = g.mul(w, one).unwrap();
        let root = g.log_sigmoid(prod);
        g.backward(root).unwrap();
        assert!((g.grad(w).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_collect_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, c).unwrap();
        let root = g.sum(y);
        g.backward(root).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
    }

    /// Builds a small random feed-forward graph and returns the scalar root.
    /// Used both for direct evaluation (finite differences) and backprop.
    fn random_net(params: &[Tensor], input: &Tensor) -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let x = g.constant(input.clone());
        // x [1,4] * w0 [4,3] + b0 -> relu -> * w1 [3,2] + b1 -> sigmoid -> mean
        let h = g.matmul(x, ids[0]).unwrap();
        let h = g.add_bias(h, ids[1]).unwrap();
        let h = g.relu(h);
        let h = g.matmul(h, ids[2]).unwrap();
        let h = g.add_bias(h, ids[3]).unwrap();
        let h = g.sigmoid(h);
        let root = g.mean(h);
        (g, ids, root)
    }

    #[test]
    fn two_layer_net_matches_central_finite_differences() {
        let mut rng = RngStream::new(99);
        let mut max_rel = 0.0f64;
        for _trial in 0..20 {
            let mut params = vec![
                rng.normal_tensor(vec![4, 3]),
                rng.normal_tensor(vec![3]),
                rng.normal_tensor(vec![3, 2]),
                rng.normal_tensor(vec![2]),
            ];
            let input = rng.normal_tensor(vec![1, 4]);

            let (mut g, ids, root) = random_net(&params, &input);
            g.backward(root).unwrap();
            let grads: Vec<Tensor> = ids.iter().map(|&id| g.grad(id).unwrap().clone()).collect();

            let h = 1e-6;
            for (pi, grad) in grads.iter().enumerate() {
                for ei in 0..grad.numel() {
                    let orig = params[pi].data()[ei];
                    params[pi].data_mut()[ei] = orig + h;
                    let (gp, _, rp) = random_net(&params, &input);
                    let fp = gp.value(rp).item();
                    params[pi].data_mut()[ei] = orig - h;
                    let (gm, _, rm) = random_net(&params, &input);
                    let fm = gm.value(rm).item();
                    params[pi].data_mut()[ei] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let ad = grad.data()[ei];
                    let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
                    max_rel = max_rel.max(rel);
                }
            }
        }
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = RngStream::new(4);
        let params = vec![
            rng.normal_tensor(vec![4, 3]),
            rng.normal_tensor(vec![3]),
            rng.normal_tensor(vec![3, 2]),
            rng.normal_tensor(vec![2]),
        ];
        let input = rng.normal_tensor(vec![1, 4]);
        let run = || {
            let (mut g, ids, root) = random_net(&params, &input);
            g.backward(root).unwrap();
            (
                g.value(root).item(),
                ids.iter()
                    .map(|&id| g.grad(id).unwrap().data().to_vec())
                    .collect::<Vec<_>>(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn concat_cols_routes_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let cat = g.concat_cols(&[a, b]).unwrap();
        let sq = g.square(cat);
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[10.0, 12.0]);
    }

    #[test]
    fn channel_mean_constant_channels() {
        let mut g = Graph::new();
        let mut data = vec![0.25; 4];
        data.extend(vec![-1.5; 4]);
        let x = g.leaf(Tensor::new(vec![1, 8], data).unwrap());
        let cm = g.channel_mean(x, 2).unwrap();
        assert_eq!(g.value(cm).data(), &[0.25, -1.5]);
        let root = g.sum(cm);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 8]);
    }
}
