use super::kernels::{self, ConvGeom, PoolGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::metrics;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output size `ceil(input / stride)`.
    Same,
    /// No padding.
    Valid,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu(Var),
    CRelu(Var),
    Unpool(Var),
    Add(Var, Var),
    /// Scalar reduction whose gradient was computed during the forward pass.
    Reduce {
        input: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    shape: [usize; 4],
    op: Op<T>,
}

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    inputs: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].as_ref()
    }

    pub fn input(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    /// One gradient per parameter, zeros for parameters that were not used.
    pub fn into_param_grads(self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.params
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(store.get(ParamId(i)).shape())))
            .collect()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: [usize; 4]) -> &mut [T] {
    slot.get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Option<Tensor<T>>, shape: [usize; 4], op: Op<T>) -> Var {
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let shape = value.shape();
        self.push(Some(value), shape, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape();
        self.push(None, shape, Op::Param(id))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        let node = &self.nodes[var.0];
        match &node.op {
            Op::Param(id) => self.params.get(*id),
            _ => node.value.as_ref().expect("value of a consumed node"),
        }
    }

    pub fn shape(&self, var: Var) -> [usize; 4] {
        self.nodes[var.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 2-D cross-correlation of `[n,h,w,cin]` with a `[kh,kw,cin,cout]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let [n, h, w, cin] = self.shape(input);
        let [kh, kw, wcin, cout] = self.shape(weight);
        if stride == 0 {
            return Err(Error::Shape("convolution stride must be positive".into()));
        }
        if wcin != cin {
            return Err(Error::Shape(format!(
                "convolution input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [1, 1, 1, cout] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        let same = padding == Padding::Same;
        let (ho, pad_top) = kernels::conv_output_size(h, kh, stride, same)
            .ok_or_else(|| Error::Shape(format!("kernel {kh} larger than input height {h}")))?;
        let (wo, pad_left) = kernels::conv_output_size(w, kw, stride, same)
            .ok_or_else(|| Error::Shape(format!("kernel {kw} larger than input width {w}")))?;
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        };
        let shape = [n, ho, wo, cout];
        let mut out = Tensor::zeros(shape);
        kernels::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        Ok(self.push(
            Some(out),
            shape,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Max pooling with "same" padding.
    pub fn max_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::Shape("pool window and stride must be positive".into()));
        }
        let [n, h, w, c] = self.shape(input);
        let (ho, pad_top) = kernels::same_padding(h, window, stride);
        let (wo, pad_left) = kernels::same_padding(w, window, stride);
        let geom = PoolGeom {
            n,
            h,
            w,
            c,
            window,
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        };
        let shape = [n, ho, wo, c];
        let mut out = Tensor::zeros(shape);
        let argmax = kernels::max_pool_forward(&geom, self.value(input).data(), out.data_mut());
        Ok(self.push(Some(out), shape, Op::MaxPool { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let shape = x.shape();
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::from_vec(shape, data).expect("same shape");
        self.push(Some(out), shape, Op::Relu(input))
    }

    /// Concatenated ReLU: `[max(x, 0), max(-x, 0)]` along channels.
    pub fn crelu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [n, h, w, c] = x.shape();
        let shape = [n, h, w, 2 * c];
        let mut out = Vec::with_capacity(2 * x.len());
        for px in x.data().chunks_exact(c) {
            out.extend(px.iter().map(|&v| v.max(T::zero())));
            out.extend(px.iter().map(|&v| (-v).max(T::zero())));
        }
        let out = Tensor::from_vec(shape, out).expect("same shape");
        self.push(Some(out), shape, Op::CRelu(input))
    }

    /// 2x nearest-neighbour upsampling.
    pub fn unpool_nn(&mut self, input: Var) -> Var {
        let [n, h, w, c] = self.shape(input);
        let shape = [n, 2 * h, 2 * w, c];
        let mut out = Tensor::zeros(shape);
        kernels::unpool_forward(n, h, w, c, self.value(input).data(), out.data_mut());
        self.push(Some(out), shape, Op::Unpool(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape != self.shape(b) {
            return Err(Error::Shape(format!(
                "cannot add {shape:?} and {:?}",
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(shape, data).expect("same shape");
        Ok(self.push(Some(out), shape, Op::Add(a, b)))
    }

    /// Mean BerHu loss of `pred - target` over `mask`.
    pub fn berhu(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let x = self.value(pred);
        if target.len() != x.len() {
            return Err(Error::Shape(format!(
                "prediction has {} values, target {}",
                x.len(),
                target.len()
            )));
        }
        let residuals: Vec<T> = x.data().iter().zip(target).map(|(&p, &t)| p - t).collect();
        let (loss, grad) = metrics::berhu_loss(&residuals, mask)?;
        Ok(self.push(
            Some(Tensor::scalar(loss)),
            [1, 1, 1, 1],
            Op::Reduce { input: pred, grad },
        ))
    }

    /// `sum_i weights[i] * x[i]`, a convenient scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(Error::Shape("weight count differs from tensor size".into()));
        }
        let s = x
            .data()
            .iter()
            .zip(weights)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        Ok(self.push(
            Some(Tensor::scalar(s)),
            [1, 1, 1, 1],
            Op::Reduce {
                input,
                grad: weights.to_vec(),
            },
        ))
    }

    /// Reverse pass from the scalar `root`. Consumes the tape, releasing each
    /// activation as soon as no remaining record needs it.
    pub fn backward(mut self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), [1, 1, 1, 1], "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        let mut input_grads = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else {
                if !matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                    self.nodes[i].value = None;
                }
                continue;
            };
            match &self.nodes[i].op {
                Op::Input => input_grads.push((Var(i), dy)),
                Op::Param(id) => match &mut param_grads[id.0] {
                    Some(g) => g.add_assign(&dy),
                    slot @ None => *slot = Some(dy),
                },
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (input, weight, bias, geom) = (*input, *weight, *bias, *geom);
                    let mut dx = grads[input.0].take();
                    let mut dw = grads[weight.0].take();
                    let mut db = bias.and_then(|b| grads[b.0].take());
                    kernels::conv_backward(
                        &geom,
                        self.value(input).data(),
                        self.value(weight).data(),
                        dy.data(),
                        Some(accumulate(&mut dx, self.shape(input))),
                        Some(accumulate(&mut dw, self.shape(weight))),
                        bias.map(|b| accumulate(&mut db, self.shape(b))),
                    );
                    grads[input.0] = dx;
                    grads[weight.0] = dw;
                    if let Some(b) = bias {
                        grads[b.0] = db;
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let shape = self.shape(*input);
                    let dx = accumulate(&mut grads[input.0], shape);
                    for (&g, &j) in dy.data().iter().zip(argmax) {
                        dx[j as usize] = dx[j as usize] + g;
                    }
                }
                Op::Relu(input) => {
                    let input = *input;
                    let shape = self.shape(input);
                    let mut slot = grads[input.0].take();
                    let dx = accumulate(&mut slot, shape);
                    for ((d, &g), &x) in dx.iter_mut().zip(dy.data()).zip(self.value(input).data()) {
                        if x > T::zero() {
                            *d = *d + g;
                        }
                    }
                    grads[input.0] = slot;
                }
                Op::CRelu(input) => {
                    let input = *input;
                    let shape = self.shape(input);
                    let c = shape[3];
                    let mut slot = grads[input.0].take();
                    let dx = accumulate(&mut slot, shape);
                    for ((dpx, gpx), xpx) in dx
                        .chunks_exact_mut(c)
                        .zip(dy.data().chunks_exact(2 * c))
                        .zip(self.value(input).data().chunks_exact(c))
                    {
                        for k in 0..c {
                            if xpx[k] > T::zero() {
                                dpx[k] = dpx[k] + gpx[k];
                            } else if xpx[k] < T::zero() {
                                dpx[k] = dpx[k] - gpx[c + k];
                            }
                        }
                    }
                    grads[input.0] = slot;
                }
                Op::Unpool(input) => {
                    let [n, h, w, c] = self.shape(*input);
                    let dx = accumulate(&mut grads[input.0], [n, h, w, c]);
                    kernels::unpool_backward(n, h, w, c, dy.data(), dx);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    match &mut grads[a.0] {
                        Some(g) => g.add_assign(&dy),
                        slot @ None => *slot = Some(dy.clone()),
                    }
                    match &mut grads[b.0] {
                        Some(g) => g.add_assign(&dy),
                        slot @ None => *slot = Some(dy),
                    }
                }
                Op::Reduce { input, grad } => {
                    let g = dy.data()[0];
                    let shape = self.shape(*input);
                    let dx = accumulate(&mut grads[input.0], shape);
                    for (d, &v) in dx.iter_mut().zip(grad) {
                        *d = *d + g * v;
                    }
                }
            }
            if !matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                self.nodes[i].value = None;
            }
        }
        Gradients {
            params: param_grads,
            inputs: input_grads,
        }
    }
}
