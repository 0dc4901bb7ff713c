//! Reverse-mode autodiff over a flat tape.
//!
//! Every forward pass (with or without gradient tracking) is recorded here,
//! so the grad and no-grad paths share one arithmetic implementation and
//! produce bit-identical values. Nodes whose ancestors contain no trainable
//! leaf never allocate gradients.

use crate::real::Real;
use crate::tensor::Tensor;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a + b * s`
    AddScaled(NodeId, NodeId, T),
    Scale(NodeId, T),
    AddConst(NodeId, T),
    ClampMin(NodeId, T),
    /// `[n,d] + [d]` broadcast over rows
    AddRow(NodeId, NodeId),
    /// `[n,d] * [d]` broadcast over rows
    MulRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    /// log-softmax over a 1-D vector
    LogSoftmax(NodeId),
    /// out row i = input row idx[i]
    SelectRows(NodeId, Rc<Vec<usize>>),
    /// out element i = input element idx[i] (gather; scatter-add backward)
    IndexMap(NodeId, Rc<Vec<usize>>),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    SumAll(NodeId),
    /// sum of squared entries
    SqSum(NodeId),
    /// single element pick -> scalar
    Get(NodeId, usize),
    /// masked replacement: out = mask ? instruction : source.
    /// Gradients flow only through unmasked source pixels.
    ComposeMasked { src: NodeId, mask: Rc<Vec<bool>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients returned by [`Graph::backward`], indexed by `NodeId`.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a node known to be on the differentiable path.
    pub fn wrt(&self, id: NodeId) -> &Tensor<T> {
        self.grads[id.0]
            .as_ref()
            .expect("no gradient recorded for node; was it trainable?")
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b)).expect("add shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b)).expect("sub shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip(self.value(b), |x, y| x * y)
            .expect("mul shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + b * s`
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, s: T) -> NodeId {
        let v = self
            .value(a)
            .add_scaled(self.value(b), s)
            .expect("add_scaled shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddScaled(a, b, s), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a, c), ng)
    }

    pub fn clamp_min(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| if x < c { c } else { x });
        let ng = self.ng(a);
        self.push(v, Op::ClampMin(a, c), ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, d) = self.value(a).dims2().expect("add_row lhs 2-D");
        let rlen = self.value(row).numel();
        assert_eq!(d, rlen, "add_row: row length {} vs {} cols", rlen, d);
        let rdata = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = out[i * d + j] + rdata[j];
            }
        }
        let v = Tensor::new(vec![n, d], out).unwrap();
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (n, d) = self.value(a).dims2().expect("mul_row lhs 2-D");
        let rlen = self.value(row).numel();
        assert_eq!(d, rlen, "mul_row: row length {} vs {} cols", rlen, d);
        let rdata = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = out[i * d + j] * rdata[j];
            }
        }
        let v = Tensor::new(vec![n, d], out).unwrap();
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Numerically stable log-softmax over a 1-D vector.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.shape().len(), 1, "log_softmax wants a vector");
        let m = x
            .data()
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let lse = m
            + x.data()
                .iter()
                .map(|&v| (v - m).exp())
                .sum::<T>()
                .ln();
        let v = x.map(|q| q - lse);
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Row gather: `out[i, :] = a[idx[i], :]`.
    pub fn select_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let (n, d) = self.value(a).dims2().expect("select_rows on 2-D");
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx.iter() {
            assert!(r < n, "select_rows: row {} out of {}", r, n);
            out.extend_from_slice(&self.value(a).data()[r * d..(r + 1) * d]);
        }
        let v = Tensor::new(vec![idx.len(), d], out).unwrap();
        let ng = self.ng(a);
        self.push(v, Op::SelectRows(a, idx), ng)
    }

    /// Element gather into a new shape: `out.data[i] = a.data[idx[i]]`.
    pub fn index_map(&mut self, a: NodeId, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> NodeId {
        let src = self.value(a).data();
        let out: Vec<T> = idx.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape, out).expect("index_map shape");
        let ng = self.ng(a);
        self.push(v, Op::IndexMap(a, idx), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).numel(), "reshape numel");
        let v = Tensor::new(shape, self.value(a).data().to_vec()).unwrap();
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Concatenate 1-D vectors.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![data.len()], data).unwrap();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::Concat(parts.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn sq_sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sq_sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SqSum(a), ng)
    }

    pub fn get(&mut self, a: NodeId, index: usize) -> NodeId {
        let v = self.value(a).data()[index];
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Get(a, index), ng)
    }

    /// Masked replacement. `mask` has one entry per element of `src`;
    /// masked entries come from `instruction` and carry no gradient.
    pub fn compose_masked(
        &mut self,
        src: NodeId,
        instruction: &Tensor<T>,
        mask: Rc<Vec<bool>>,
    ) -> NodeId {
        let s = self.value(src);
        assert!(s.same_shape(instruction), "compose_masked shapes");
        assert_eq!(mask.len(), s.numel(), "compose_masked mask length");
        let data: Vec<T> = s
            .data()
            .iter()
            .zip(instruction.data().iter())
            .zip(mask.iter())
            .map(|((&a, &b), &m)| if m { b } else { a })
            .collect();
        let v = Tensor::new(s.shape().to_vec(), data).unwrap();
        let ng = self.ng(src);
        self.push(v, Op::ComposeMasked { src, mask }, ng)
    }

    /// Mean of a set of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let cat = self.concat(parts);
        let sum = self.sum_all(cat);
        self.scale(sum, T::one() / T::from_f64(parts.len() as f64))
    }

    fn accum(slot: &mut Option<Tensor<T>>, delta: &Tensor<T>) {
        match slot {
            Some(t) => {
                *t = t.add(delta).expect("grad accumulation shapes");
            }
            None => *slot = Some(delta.clone()),
        }
    }

    /// Reverse pass from a scalar node. Returns gradients for every node on
    /// the differentiable path (others stay `None`).
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        Self::accum(&mut grads[a.0], &g);
                    }
                    if self.ng(*b) {
                        Self::accum(&mut grads[b.0], &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        Self::accum(&mut grads[a.0], &g);
                    }
                    if self.ng(*b) {
                        Self::accum(&mut grads[b.0], &g.scale(-T::one()));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let d = g.zip(self.value(*b), |x, y| x * y).unwrap();
                        Self::accum(&mut grads[a.0], &d);
                    }
                    if self.ng(*b) {
                        let d = g.zip(self.value(*a), |x, y| x * y).unwrap();
                        Self::accum(&mut grads[b.0], &d);
                    }
                }
                Op::AddScaled(a, b, s) => {
                    if self.ng(*a) {
                        Self::accum(&mut grads[a.0], &g);
                    }
                    if self.ng(*b) {
                        Self::accum(&mut grads[b.0], &g.scale(*s));
                    }
                }
                Op::Scale(a, s) => {
                    if self.ng(*a) {
                        Self::accum(&mut grads[a.0], &g.scale(*s));
                    }
                }
                Op::AddConst(a, _) => {
                    if self.ng(*a) {
                        Self::accum(&mut grads[a.0], &g);
                    }
                }
                Op::ClampMin(a, c) => {
                    if self.ng(*a) {
                        let d = g
                            .zip(self.value(*a), |gv, xv| if xv > *c { gv } else { T::zero() })
                            .unwrap();
                        Self::accum(&mut grads[a.0], &d);
                    }
                }
                Op::AddRow(a, row) => {
                    let (n, d) = self.value(*a).dims2().unwrap();
                    if self.ng(*a) {
                        Self::accum(&mut grads[a.0], &g);
                    }
                    if self.ng(*row) {
                        let mut r = vec![T::zero(); d];
                        for i in 0..n {
                            for (j, rj) in r.iter_mut().enumerate() {
                                *rj = *rj + g.data()[i * d + j];
                            }
                        }
                        let shape = self.value(*row).shape().to_vec();
                        Self::accum(&mut grads[row.0], &Tensor::new(shape, r).unwrap());
                    }
                }
                Op::MulRow(a, row) => {
                    let (n, d) = self.value(*a).dims2().unwrap();
                    let rv = self.value(*row).data().to_vec();
                    if self.ng(*a) {
                        let mut da = g.data().to_vec();
                        for i in 0..n {
                            for j in 0..d {
                                da[i * d + j] = da[i * d + j] * rv[j];
                            }
                        }
                        Self::accum(
                            &mut grads[a.0],
                            &Tensor::new(vec![n, d], da).unwrap(),
                        );
                    }
                    if self.ng(*row) {
                        let av = self.value(*a).data();
                        let mut dr = vec![T::zero(); d];
                        for i in 0..n {
                            for (j, rj) in dr.iter_mut().enumerate() {
                                *rj = *rj + g.data()[i * d + j] * av[i * d + j];
                            }
                        }
                        let shape = self.value(*row).shape().to_vec();
                        Self::accum(&mut grads[row.0], &Tensor::new(shape, dr).unwrap());
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bt = self.value(*b).transpose2().unwrap();
                        let d = g.matmul(&bt).unwrap();
                        Self::accum(&mut grads[a.0], &d);
                    }
                    if self.ng(*b) {
                        let at = self.value(*a).transpose2().unwrap();
                        let d = at.matmul(&g).unwrap();
                        Self::accum(&mut grads[b.0], &d);
                    }
                }
                Op::Tanh(a) => {
                    if self.ng(*a) {
                        let y = &self.nodes[i].value;
                        let d = g.zip(y, |gv, yv| gv * (T::one() - yv * yv)).unwrap();
                        Self::accum(&mut grads[a.0], &d);
                    }
                }
                Op::LogSoftmax(a) => {
                    if self.ng(*a) {
                        let y = &self.nodes[i].value;
                        let gsum: T = g.data().iter().copied().sum();
                        let d = g
                            .zip(y, |gv, yv| gv - yv.exp() * gsum)
                            .unwrap();
                        Self::accum(&mut grads[a.0], &d);
                    }
                }
                Op::SelectRows(a, idx) => {
                    if self.ng(*a) {
                        let (n, d) = self.value(*a).dims2().unwrap();
                        let mut da = vec![T::zero(); n * d];
                        for (out_i, &r) in idx.iter().enumerate() {
                            for j in 0..d {
                                da[r * d + j] = da[r * d + j] + g.data()[out_i * d + j];
                            }
                        }
                        Self::accum(
                            &mut grads[a.0],
                            &Tensor::new(vec![n, d], da).unwrap(),
                        );
                    }
                }
                Op::IndexMap(a, idx) => {
                    if self.ng(*a) {
                        let mut da = vec![T::zero(); self.value(*a).numel()];
                        for (out_i, &src_i) in idx.iter().enumerate() {
                            da[src_i] = da[src_i] + g.data()[out_i];
                        }
                        let shape = self.value(*a).shape().to_vec();
                        Self::accum(&mut grads[a.0], &Tensor::new(shape, da).unwrap());
                    }
                }
                Op::Reshape(a) => {
                    if self.ng(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        let d = Tensor::new(shape, g.data().to_vec()).unwrap();
                        Self::accum(&mut grads[a.0], &d);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0usize;
                    for &p in parts {
                        let n = self.value(p).numel();
                        if self.ng(p) {
                            let shape = self.value(p).shape().to_vec();
                            let d =
                                Tensor::new(shape, g.data()[off..off + n].to_vec()).unwrap();
                            Self::accum(&mut grads[p.0], &d);
                        }
                        off += n;
                    }
                }
                Op::SumAll(a) => {
                    if self.ng(*a) {
                        let gv = g.item();
                        let d = Tensor::full(self.value(*a).shape().to_vec(), gv);
                        Self::accum(&mut grads[a.0], &d);
                    }
                }
                Op::SqSum(a) => {
                    if self.ng(*a) {
                        let gv = g.item();
                        let two = T::from_f64(2.0);
                        let d = self.value(*a).map(|x| two * x * gv);
                        Self::accum(&mut grads[a.0], &d);
                    }
                }
                Op::Get(a, index) => {
                    if self.ng(*a) {
                        let mut d = Tensor::zeros(self.value(*a).shape().to_vec());
                        d.data_mut()[*index] = g.item();
                        Self::accum(&mut grads[a.0], &d);
                    }
                }
                Op::ComposeMasked { src, mask } => {
                    if self.ng(*src) {
                        let data: Vec<T> = g
                            .data()
                            .iter()
                            .zip(mask.iter())
                            .map(|(&gv, &m)| if m { T::zero() } else { gv })
                            .collect();
                        let d = Tensor::new(g.shape().to_vec(), data).unwrap();
                        Self::accum(&mut grads[src.0], &d);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of a scalar-valued function of one tensor.
    fn finite_diff_check(
        f: impl Fn(&Tensor<f64>) -> f64,
        x0: &Tensor<f64>,
        analytic: &Tensor<f64>,
        eps: f64,
        rtol: f64,
    ) {
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            let ana = analytic.data()[i];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom < rtol,
                "coord {}: numeric {} vs analytic {}",
                i,
                num,
                ana
            );
        }
    }

    #[test]
    fn matmul_tanh_sqsum_gradients_match_finite_differences() {
        let a0 = Tensor::<f64>::new(vec![2, 3], vec![0.3, -0.7, 0.2, 0.9, -0.1, 0.5]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 2], vec![0.11, -0.5, 0.25, 0.4, -0.33, 0.6]).unwrap();

        let eval = |a: &Tensor<f64>| {
            let mut g = Graph::new();
            let an = g.leaf(a.clone(), true);
            let bn = g.constant(b.clone());
            let m = g.matmul(an, bn);
            let t = g.tanh(m);
            let l = g.sq_sum(t);
            g.value(l).item()
        };

        let mut g = Graph::new();
        let an = g.leaf(a0.clone(), true);
        let bn = g.constant(b.clone());
        let m = g.matmul(an, bn);
        let t = g.tanh(m);
        let l = g.sq_sum(t);
        let grads = g.backward(l);
        finite_diff_check(eval, &a0, grads.wrt(an), 1e-6, 1e-6);
    }

    #[test]
    fn log_softmax_pick_gradient() {
        let x0 = Tensor::<f64>::new(vec![4], vec![0.2, -1.3, 0.7, 0.05]).unwrap();
        let eval = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone(), true);
            let ls = g.log_softmax(xn);
            let p = g.get(ls, 2);
            let l = g.scale(p, -1.0);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let xn = g.leaf(x0.clone(), true);
        let ls = g.log_softmax(xn);
        let p = g.get(ls, 2);
        let l = g.scale(p, -1.0);
        let grads = g.backward(l);
        finite_diff_check(eval, &x0, grads.wrt(xn), 1e-6, 1e-6);
    }

    #[test]
    fn masked_compose_blocks_gradient() {
        let x0 = Tensor::<f64>::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let instr = Tensor::<f64>::new(vec![4], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let mask = Rc::new(vec![true, false, true, false]);
        let mut g = Graph::new();
        let xn = g.leaf(x0.clone(), true);
        let c = g.compose_masked(xn, &instr, mask);
        let l = g.sq_sum(c);
        let grads = g.backward(l);
        let dx = grads.wrt(xn);
        assert_eq!(dx.data()[0], 0.0);
        assert_eq!(dx.data()[2], 0.0);
        assert!(dx.data()[1] != 0.0 && dx.data()[3] != 0.0);
        // value: masked entries come from the instruction
        assert_eq!(g.value(c).data(), &[9.0, 0.2, 9.0, 0.4]);
    }

    #[test]
    fn select_rows_accumulates_repeat_gradients() {
        let w0 = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let w = g.leaf(w0, true);
        let sel = g.select_rows(w, Rc::new(vec![1, 1, 0]));
        let l = g.sum_all(sel);
        let grads = g.backward(l);
        assert_eq!(grads.wrt(w).data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn no_grad_leaves_allocate_nothing() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(vec![3], 2.0));
        let s = g.sq_sum(a);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
    }
}
