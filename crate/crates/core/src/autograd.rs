//! A small reverse-mode tape covering exactly the operations the recurrent
//! cells, the entropy attention and the toy detector need.

use crate::conv::{conv2d_backward, conv2d_raw, ConvGeometry};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Var, Var),
    Narrow(Var, usize),
    AvgPool(Var, usize),
    /// Multiply every channel by a constant single-channel gate.
    ScaleChannels(Var, Tensor<T>),
    /// `Σ weights ⊙ input`, a scalar.
    WeightedSum(Var, Tensor<T>),
    /// Gathers head maps `(b, A·D, h, w)` into `(b, 1, Σ A·h·w, D)` rows.
    GatherAnchors {
        inputs: Vec<Var>,
        per_cell: usize,
        depth: usize,
    },
    /// Scalar whose gradient with respect to each input was computed by the
    /// caller (losses with their own closed-form gradient).
    ScalarWithGrads(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let out = {
            let b = bias.map(|b| self.value(b).data());
            conv2d_raw(self.value(input), self.value(kernel), b, geom)?
        };
        Ok(self.push(
            out,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = ops::one_minus(self.value(a));
        self.push(out, Op::OneMinus(a))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = ops::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = ops::tanh(self.value(a));
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        self.push(out, Op::Relu(a))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::narrow_channels(self.value(a), start, len)?;
        Ok(self.push(out, Op::Narrow(a, start)))
    }

    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let out = ops::avg_pool(self.value(a), factor)?;
        Ok(self.push(out, Op::AvgPool(a, factor)))
    }

    pub fn scale_channels(&mut self, a: Var, gate: Tensor<T>) -> Result<Var> {
        let out = ops::scale_channels(self.value(a), &gate)?;
        Ok(self.push(out, Op::ScaleChannels(a, gate)))
    }

    pub fn weighted_sum(&mut self, a: Var, weights: Tensor<T>) -> Result<Var> {
        let value = self.value(a);
        value.expect_shape("weighted_sum", weights.shape())?;
        let s = value
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let w = Tensor::ones(self.shape(a));
        self.weighted_sum(a, w).expect("matching shape")
    }

    /// Flattens per-cell head outputs into one row of `depth` values per
    /// anchor. Anchors are ordered map by map, then row, column and anchor
    /// slot within the cell; head channel `a·depth + d` holds slot `a`.
    pub fn gather_anchors(&mut self, inputs: &[Var], per_cell: usize, depth: usize) -> Result<Var> {
        let batch = self.shape(inputs[0]).batch;
        let mut rows = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.channels != per_cell * depth || s.batch != batch {
                return Err(Error::ShapeMismatch {
                    op: "gather_anchors",
                    expected: format!("{}x{}x*x*", batch, per_cell * depth),
                    actual: s.to_string(),
                });
            }
            rows += s.plane() * per_cell;
        }
        let out_shape = Shape::new(batch, 1, rows, depth);
        let mut out = Tensor::zeros(out_shape);
        for n in 0..batch {
            let mut row = 0;
            for &v in inputs {
                let t = self.value(v);
                let s = t.shape();
                for y in 0..s.height {
                    for x in 0..s.width {
                        for a in 0..per_cell {
                            for d in 0..depth {
                                out.set(n, 0, row, d, t.at(n, a * depth + d, y, x));
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::GatherAnchors {
                inputs: inputs.to_vec(),
                per_cell,
                depth,
            },
        ))
    }

    /// Records a scalar computed outside the tape whose gradients with
    /// respect to `inputs` are already known.
    pub fn scalar_with_grads(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            g.expect_shape("scalar_with_grads", self.shape(*v))?;
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrads(inputs)))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rs = self.shape(root);
        if rs.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: root must be a scalar, got shape {rs}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(rs));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Tensor<T>| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let cg = conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        bias.is_some(),
                        *geom,
                        &g,
                    )?;
                    acc(*input, cg.input)?;
                    acc(*kernel, cg.kernel)?;
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        let shape = self.shape(*b);
                        acc(*b, Tensor::from_vec(shape, gb)?)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.scale(-T::one()))?;
                }
                Op::Mul(a, b) => {
                    acc(*a, ops::hadamard(&g, self.value(*b))?)?;
                    acc(*b, ops::hadamard(&g, self.value(*a))?)?;
                }
                Op::OneMinus(a) => acc(*a, g.scale(-T::one()))?,
                Op::Scale(a, k) => acc(*a, g.scale(*k))?,
                Op::Sigmoid(a) => acc(*a, ops::sigmoid_backward(&node.value, &g))?,
                Op::Tanh(a) => acc(*a, ops::tanh_backward(&node.value, &g))?,
                Op::Relu(a) => acc(*a, ops::relu_backward(&node.value, &g))?,
                Op::Concat(a, b) => {
                    let (ga, gb) = ops::split_channels(&g, self.shape(*a).channels)?;
                    acc(*a, ga)?;
                    acc(*b, gb)?;
                }
                Op::Narrow(a, start) => {
                    acc(*a, ops::narrow_channels_backward(&g, self.shape(*a), *start))?;
                }
                Op::AvgPool(a, factor) => {
                    acc(*a, ops::avg_pool_backward(&g, self.shape(*a), *factor))?;
                }
                Op::ScaleChannels(a, gate) => acc(*a, ops::scale_channels(&g, gate)?)?,
                Op::WeightedSum(a, w) => {
                    let k = g.data()[0];
                    acc(*a, w.scale(k))?;
                }
                Op::GatherAnchors {
                    inputs,
                    per_cell,
                    depth,
                } => {
                    let batch = g.shape().batch;
                    let mut parts: Vec<Tensor<T>> =
                        inputs.iter().map(|&v| Tensor::zeros(self.shape(v))).collect();
                    for n in 0..batch {
                        let mut row = 0;
                        for part in parts.iter_mut() {
                            let s = part.shape();
                            for y in 0..s.height {
                                for x in 0..s.width {
                                    for a in 0..*per_cell {
                                        for d in 0..*depth {
                                            part.set(n, a * depth + d, y, x, g.at(n, 0, row, d));
                                        }
                                        row += 1;
                                    }
                                }
                            }
                        }
                    }
                    for (&v, part) in inputs.iter().zip(parts) {
                        acc(v, part)?;
                    }
                }
                Op::ScalarWithGrads(inputs) => {
                    let k = g.data()[0];
                    for (v, d) in inputs {
                        acc(*v, d.scale(k))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to every recorded value that it
/// depends on. Only leaves keep their gradient after the sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros of `shape` if `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
