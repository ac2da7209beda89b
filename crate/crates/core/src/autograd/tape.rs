use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::nn::stencil::DiffTerm;
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Log(Var),
    Scale(Var, T),
    ClampMin(Var, T),
    Relu(Var),
    Sum { input: Var, axes: Vec<usize> },
    Mean { input: Var, axes: Vec<usize> },
    SoftmaxChannels(Var),
    Gather { input: Var, indices: Vec<usize> },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec },
    Depthwise { input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Bilinear { input: Var, grid: Var },
    Deform { input: Var, offset: Var, weight: Var, bias: Option<Var>, spec: ConvSpec },
    Stencil { input: Var, terms: Vec<DiffTerm> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Append-only record of differentiable operations.
///
/// Nodes are stored in execution order, which is a topological order of the
/// graph. A tape belongs to a single worker; build a fresh one per iteration.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, &[a, b], op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&p| f(p)).collect();
        let out = Tensor::new(x.shape(), data).expect("unary shape");
        self.push(out, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |p| p.abs(), Op::Abs(a))
    }

    /// Natural logarithm; every input value must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, |p| p.ln(), Op::Log(a)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |p| p * c, Op::Scale(a, c))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        self.unary(a, |p| if p < floor { floor } else { p }, Op::ClampMin(a, floor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |p| if p > T::zero() { p } else { T::zero() }, Op::Relu(a))
    }

    /// Sums over `axes` (all axes when `None`), dropping the reduced extents.
    pub fn sum(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        let axes = self.normalize_axes(a, axes)?;
        let out = reduce_sum(self.value(a), &axes);
        Ok(self.push(out, &[a], Op::Sum { input: a, axes }))
    }

    pub fn mean(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        let axes = self.normalize_axes(a, axes)?;
        let mut out = reduce_sum(self.value(a), &axes);
        let count = T::lit((self.value(a).numel() / out.numel()) as f64);
        for v in out.data_mut() {
            *v = *v / count;
        }
        Ok(self.push(out, &[a], Op::Mean { input: a, axes }))
    }

    fn normalize_axes(&self, a: Var, axes: Option<&[usize]>) -> Result<Vec<usize>> {
        let rank = self.shape(a).len();
        let mut axes: Vec<usize> = match axes {
            None => (0..rank).collect(),
            Some(ax) => ax.to_vec(),
        };
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= rank) {
            return Err(Error::Shape(format!("axis {bad} out of range for rank {rank}")));
        }
        Ok(axes)
    }

    /// Softmax over the channel axis of an `N×K×H×W` tensor.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, k, h, w) = x.dims4()?;
        let hw = h * w;
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            let base = b * k * hw;
            for p in 0..hw {
                let mut max = T::neg_infinity();
                for c in 0..k {
                    max = max.max(src[base + c * hw + p]);
                }
                let mut total = T::zero();
                for c in 0..k {
                    let e = (src[base + c * hw + p] - max).exp();
                    out[base + c * hw + p] = e;
                    total += e;
                }
                for c in 0..k {
                    out[base + c * hw + p] = out[base + c * hw + p] / total;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(out, &[a], Op::SoftmaxChannels(a)))
    }

    /// Picks `input[0, labels[p], p]` for every pixel `p` of a `1×K×H×W`
    /// tensor where `valid[p]` holds, producing a rank-1 tensor.
    pub fn gather_channels(&mut self, a: Var, labels: &[u32], valid: Option<&[bool]>) -> Result<Var> {
        let (n, k, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        if n != 1 || labels.len() != hw || valid.is_some_and(|m| m.len() != hw) {
            return Err(Error::Shape(format!(
                "gather over {:?} with {} labels",
                self.shape(a),
                labels.len()
            )));
        }
        let mut indices = Vec::with_capacity(hw);
        for (p, &label) in labels.iter().enumerate() {
            if valid.is_some_and(|m| !m[p]) {
                continue;
            }
            if label as usize >= k {
                return Err(Error::Contract(format!("label {label} outside [0, {k})")));
            }
            indices.push(label as usize * hw + p);
        }
        let src = self.value(a).data();
        let data: Vec<T> = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(&[data.len()], data)?;
        Ok(self.push(out, &[a], Op::Gather { input: a, indices }))
    }

    /// Reverse-mode sweep from a one-element `loss`, adding dLoss/dLeaf into
    /// every differentiable leaf. Gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adjoints: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adjoints[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = adjoints[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&grad_out).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(grad_out),
                }
                continue;
            }
            for (input, g) in self.input_grads(idx, &grad_out) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adjoints[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(y).map(|(&d, &q)| d * q).collect()),
                    (*b, g.iter().zip(x).map(|(&d, &p)| d * p).collect()),
                ]
            }
            Op::Abs(a) => {
                let gx = g.iter().zip(val(*a)).map(|(&d, &p)| d * sign(p)).collect();
                vec![(*a, gx)]
            }
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(&d, &p)| d / p).collect())],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&d| d * *c).collect())],
            Op::ClampMin(a, floor) => {
                let gx = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&d, &p)| if p < *floor { T::zero() } else { d })
                    .collect();
                vec![(*a, gx)]
            }
            Op::Relu(a) => {
                let gx = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&d, &p)| if p > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*a, gx)]
            }
            Op::Sum { input, axes } => {
                vec![(*input, broadcast_back(g, self.nodes[input.0].value.shape(), axes, T::one()))]
            }
            Op::Mean { input, axes } => {
                let count = T::lit((self.nodes[input.0].value.numel() / g.len()) as f64);
                let scale = T::one() / count;
                vec![(*input, broadcast_back(g, self.nodes[input.0].value.shape(), axes, scale))]
            }
            Op::SoftmaxChannels(a) => {
                let y = node.value.data();
                let (n, k, h, w) = node.value.dims4().expect("softmax rank");
                let hw = h * w;
                let mut gx = vec![T::zero(); y.len()];
                for b in 0..n {
                    let base = b * k * hw;
                    for p in 0..hw {
                        let mut dot = T::zero();
                        for c in 0..k {
                            let i = base + c * hw + p;
                            dot += g[i] * y[i];
                        }
                        for c in 0..k {
                            let i = base + c * hw + p;
                            gx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                vec![(*a, gx)]
            }
            Op::Gather { input, indices } => {
                let mut gx = vec![T::zero(); self.nodes[input.0].value.numel()];
                for (&i, &d) in indices.iter().zip(g) {
                    gx[i] += d;
                }
                vec![(*input, gx)]
            }
            Op::Conv2d { input, weight, bias, spec } => crate::nn::conv::conv2d_backward(
                self, *input, *weight, *bias, spec, g, wants(*input), wants(*weight),
            ),
            Op::Depthwise { input, weight, bias, spec } => {
                crate::nn::conv::depthwise_backward(self, *input, *weight, *bias, spec, g)
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std } => {
                crate::nn::norm::batchnorm_backward(self, *input, *gamma, *beta, xhat, inv_std, g)
            }
            Op::Bilinear { input, grid } => {
                crate::nn::sample::bilinear_backward(self, *input, *grid, g, wants(*grid))
            }
            Op::Deform { input, offset, weight, bias, spec } => crate::nn::deform::deform_backward(
                self, *input, *offset, *weight, *bias, spec, g,
            ),
            Op::Stencil { input, terms } => crate::nn::stencil::stencil_backward(self, *input, terms, g),
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every input element, the flat index of the output element it reduces into.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect();
    let out_strides = strides(&out_shape);
    // stride contribution of each input axis to the output index (0 for reduced axes)
    let mut contrib = vec![0; shape.len()];
    let mut j = 0;
    for (i, c) in contrib.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *c = out_strides[j];
            j += 1;
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&contrib).map(|(a, b)| a * b).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn reduce_sum<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let (out_shape, map) = reduce_map(x.shape(), axes);
    let mut out = Tensor::zeros(&out_shape);
    let data = out.data_mut();
    for (&o, &v) in map.iter().zip(x.data()) {
        data[o] += v;
    }
    out
}

fn broadcast_back<T: Scalar>(g: &[T], shape: &[usize], axes: &[usize], scale: T) -> Vec<T> {
    let (_, map) = reduce_map(shape, axes);
    map.iter().map(|&o| g[o] * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn abs_and_identity_add() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-2.0, 0.0, 3.0]));
        let y = tape.abs(x);
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, 3.0]);
        let z = tape.constant(Tensor::zeros(&[3]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
    }

    #[test]
    fn binary_shape_mismatch_and_log_domain() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        let c = tape.param(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(c), Err(Error::Domain(_))));
    }

    #[test]
    fn log_gradient_at_two() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[2.0]));
        let y = tape.log(x).unwrap();
        let l = tape.sum(y, None).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap().data()[0];
        let h = 1e-5;
        let fd = ((2.0f64 + h).ln() - (2.0f64 - h).ln()) / (2.0 * h);
        assert!((g - 0.5).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-6);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x, None).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 10.0);
        let rows = tape.sum(x, Some(&[1])).unwrap();
        assert_eq!(tape.value(rows).data(), &[3.0, 7.0]);
        let cols = tape.mean(x, Some(&[0])).unwrap();
        assert_eq!(tape.value(cols).data(), &[2.0, 3.0]);
        assert!(matches!(tape.sum(x, Some(&[2])), Err(Error::Shape(_))));
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        let c = tape.constant(Tensor::full(&[3, 2], 1.75));
        let m = tape.mean(c, None).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 1.75);
    }

    #[test]
    fn mean_gradient_is_reciprocal_count() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m = tape.mean(x, None).unwrap();
        tape.backward(m).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!((g - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::<f64>::full(&[1, 4, 2, 2], 0.3));
        let s = tape.softmax_channels(u).unwrap();
        assert!(tape.value(s).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let l = tape.constant(t(&[1, 2, 1, 1], &[0.0, 3f64.ln()]));
        let s = tape.softmax_channels(l).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let raw = [0.1, -2.0, 3.0, 0.5, 1.0, 1.5];
        let a = tape.constant(t(&[1, 3, 1, 2], &raw));
        let shifted: Vec<f64> = raw.iter().map(|v| v + 50.0).collect();
        let b = tape.constant(t(&[1, 3, 1, 2], &shifted));
        let sa = tape.softmax_channels(a).unwrap();
        let sb = tape.softmax_channels(b).unwrap();
        for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn square_sum_gradient_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.abs(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::<f64>::full(&[1, 2, 1, 2], 0.5));
        assert!(matches!(tape.gather_channels(s, &[0, 2], None), Err(Error::Contract(_))));
        let g = tape.gather_channels(s, &[1, 0], Some(&[true, false])).unwrap();
        assert_eq!(tape.shape(g), &[1]);
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let p = tape.param(t(&[2], &[3.0, -3.0]));
        let r = tape.relu(p);
        let l = tape.sum(r, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 0.0]);
    }
}
