use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Shape, Tensor4};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geometry: ConvGeometry },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2(Var),
    ChannelAvg(Var),
    ChannelMax(Var),
    SpatialPool(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    PickClass { logits: Var, class: usize },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::MaxPool2(x)
            | Op::ChannelAvg(x)
            | Op::ChannelMax(x)
            | Op::SpatialPool(x)
            | Op::Scale(x, _)
            | Op::Sum(x) => vec![*x],
            Op::Mul(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } | Op::PickClass { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are stored in creation order, which is a valid
/// topological order because every op only refers to existing nodes.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that gradients are not tracked for.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor4<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Binds a stored parameter. Binding the same id twice returns the same
    /// node, so shared parameters accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.value(id).clone());
        self.nodes[v.0].requires_grad = !store.is_frozen(id);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geometry: ConvGeometry) -> Result<Var> {
        let y = ops::conv2d_raw(self.value(x), self.value(w), self.value(b).data(), geometry)?;
        Ok(self.push(y, Op::Conv { x, w, b, geometry }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let y = ops::max_pool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool2(x)))
    }

    /// Spatial mean per channel; also serves as global average pooling.
    pub fn channel_pool_avg(&mut self, x: Var) -> Var {
        let y = ops::channel_pool_avg(self.value(x));
        self.push(y, Op::ChannelAvg(x))
    }

    pub fn channel_pool_max(&mut self, x: Var) -> Var {
        let y = ops::channel_pool_max(self.value(x));
        self.push(y, Op::ChannelMax(x))
    }

    pub fn spatial_pool(&mut self, x: Var) -> Var {
        let y = ops::spatial_pool(self.value(x));
        self.push(y, Op::SpatialPool(x))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::eltwise_mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::eltwise_add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale(x, s))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor4<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor4::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    /// Mean softmax cross-entropy of `(n, k, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Sum over the batch of one class's logit.
    pub fn pick_class(&mut self, logits: Var, class: usize) -> Result<Var> {
        let s = self.shape(logits);
        ops::check_labels(s, &vec![class; s.n])?;
        let total = (0..s.n).map(|n| self.value(logits).data()[n * s.c + class]).sum();
        Ok(self.push(Tensor4::scalar(total), Op::PickClass { logits, class }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let s = self.shape(loss);
        if s != Shape::scalar() {
            return Err(Error::NonScalarLoss(s));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let parents = node.op.parents();
            if let Some(p) = parents.iter().find(|p| p.0 >= i) {
                return Err(Error::Cycle { node: i, parent: p.0 });
            }
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (parent, g) in self.local_grads(node, &dy)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    /// Gradient contributions of one node to each of its parents.
    fn local_grads(&self, node: &Node<T>, dy: &Tensor4<T>) -> Result<Vec<(Var, Tensor4<T>)>> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, geometry } => {
                let g = ops::conv2d_backward(self.value(*x), self.value(*w), *geometry, dy, rg(*x))?;
                let mut out = vec![(*w, g.dw), (*b, g.db)];
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), dy);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() })?;
                vec![(*x, g)]
            }
            Op::Sigmoid(x) => {
                let g = node.value.zip_map(dy, |s, g| g * s * (T::one() - s))?;
                vec![(*x, g)]
            }
            Op::MaxPool2(x) => vec![(*x, ops::max_pool2_backward(self.value(*x), dy))],
            Op::ChannelAvg(x) => vec![(*x, ops::channel_pool_avg_backward(self.shape(*x), dy))],
            Op::ChannelMax(x) => vec![(*x, ops::channel_pool_max_backward(self.value(*x), dy))],
            Op::SpatialPool(x) => vec![(*x, ops::spatial_pool_backward(self.value(*x), dy))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, ops::reduce_broadcast_grad(dy, va.shape(), Some((vb, vb.shape())))),
                    (*b, ops::reduce_broadcast_grad(dy, vb.shape(), Some((va, va.shape())))),
                ]
            }
            Op::Add(a, b) => vec![
                (*a, ops::reduce_broadcast_grad(dy, self.shape(*a), None)),
                (*b, ops::reduce_broadcast_grad(dy, self.shape(*b), None)),
            ],
            Op::Scale(x, s) => vec![(*x, dy.scale(*s))],
            Op::Concat(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.shape(p).c;
                    out.push((p, dy.slice_channels(start, c)?));
                    start += c;
                }
                out
            }
            Op::Sum(x) => vec![(*x, Tensor4::full(self.shape(*x), dy.data()[0]))],
            Op::CrossEntropy { logits, labels } => {
                let l = self.value(*logits);
                let mut g = ops::softmax_rows(l)?;
                let k = l.shape().c;
                let scale = dy.data()[0] / T::from_usize(labels.len()).unwrap();
                for (i, &label) in labels.iter().enumerate() {
                    g.data_mut()[i * k + label] -= T::one();
                }
                vec![(*logits, g.scale(scale))]
            }
            Op::PickClass { logits, class } => {
                let s = self.shape(*logits);
                let mut g = Tensor4::zeros(s);
                for n in 0..s.n {
                    g.data_mut()[n * s.c + class] = dy.data()[0];
                }
                vec![(*logits, g)]
            }
        };
        Ok(out)
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every bound parameter's gradient into the store's buffers, in
    /// parameter order.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut bound: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        bound.sort();
        for (id, v) in bound {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::from_fn([2, 3, 2, 2], |a, b, c, d| (a + b * c + d) as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor4::ones([2, 3, 2, 2]));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn reuse_accumulates_like_scaling() {
        let t = Tensor4::from_fn([1, 2, 3, 3], |_, c, y, x| (c as f64 + 1.0) * (y as f64 - x as f64 * 0.3));
        let mut g1 = Graph::<f64>::new();
        let x1 = g1.variable(t.clone());
        let twice = g1.add(x1, x1).unwrap();
        let sq = g1.mul(twice, twice).unwrap();
        let l1 = g1.sum(sq);
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.variable(t);
        let scaled = g2.scale(x2, 2.0);
        let sq = g2.mul(scaled, scaled).unwrap();
        let l2 = g2.sum(sq);
        assert_eq!(
            g1.backward(l1).unwrap().get(x1).unwrap(),
            g2.backward(l2).unwrap().get(x2).unwrap()
        );
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::zeros([1, 2, 1, 1]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor4::ones([1, 1, 2, 2]));
        let v = g.variable(Tensor4::full([1, 1, 2, 2], 3.0));
        let p = g.mul(c, v).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap(), &Tensor4::ones([1, 1, 2, 2]));
    }

    #[test]
    fn shared_param_binds_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor4::full([1, 1, 1, 1], 2.0)).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[4.0]);
    }
}
