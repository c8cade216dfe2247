use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::kernels::{self, ConvDims};
use crate::params::ParamSet;
use crate::real::{dft2_planes, Real};
use crate::tensor::Tensor;

/// One evaluation of a [`Graph`]: bound leaves, forward values and reverse-mode gradients.
///
/// Leaves are borrowed, so parameters shared by many executors are never copied.
pub struct Executor<'a, T: Real> {
    graph: &'a Graph<T>,
    leaves: Vec<Option<&'a Tensor<T>>>,
    values: Option<Vec<Option<Tensor<T>>>>,
}

/// Gradients of every node reached by a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<NodeId>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients in graph parameter order; unreached parameters get zeros.
    pub fn parameter_grads(&self, graph: &Graph<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|&p| {
                self.get(p)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(p)))
            })
            .collect()
    }
}

impl<'a, T: Real> Executor<'a, T> {
    pub fn new(graph: &'a Graph<T>) -> Self {
        Self {
            graph,
            leaves: vec![None; graph.len()],
            values: None,
        }
    }

    pub fn bind(&mut self, id: NodeId, value: &'a Tensor<T>) -> Result<()> {
        let node = self
            .graph
            .nodes
            .get(id.0)
            .ok_or(AutodiffError::UnknownNode(id.0))?;
        if !matches!(node.op, Op::Input | Op::Parameter) {
            return Err(AutodiffError::NotBindable(id.0));
        }
        if value.shape() != node.shape.as_slice() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bind",
                detail: format!(
                    "node {} ({}) expects {:?}, got {:?}",
                    id.0,
                    node.name.as_deref().unwrap_or("?"),
                    node.shape,
                    value.shape()
                ),
            });
        }
        self.leaves[id.0] = Some(value);
        self.values = None;
        Ok(())
    }

    /// Binds every graph parameter to the same-named tensor of `params`.
    pub fn bind_params(&mut self, params: &'a ParamSet<T>) -> Result<()> {
        for &p in &self.graph.params {
            let name = self.graph.nodes[p.0].name.as_deref().unwrap_or_default();
            let t = params
                .get(name)
                .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
            self.bind(p, t)?;
        }
        Ok(())
    }

    pub fn forward(&mut self) -> Result<()> {
        let mut values: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.graph.len());
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let out = match &node.op {
                Op::Input | Op::Parameter => {
                    if self.leaves[i].is_none() {
                        return Err(AutodiffError::Unbound(i));
                    }
                    None
                }
                Op::Constant(_) => None,
                op => Some(self.eval(op, &node.shape, &values)?),
            };
            values.push(out);
        }
        self.values = Some(values);
        Ok(())
    }

    pub fn is_evaluated(&self) -> bool {
        self.values.is_some()
    }

    fn lookup<'v>(&'v self, values: &'v [Option<Tensor<T>>], id: NodeId) -> &'v Tensor<T> {
        match &self.graph.nodes[id.0].op {
            Op::Input | Op::Parameter => self.leaves[id.0].expect("checked in forward"),
            Op::Constant(t) => t,
            _ => values[id.0].as_ref().expect("topological order"),
        }
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        let values = self.values.as_ref().ok_or(AutodiffError::BackwardBeforeForward)?;
        if id.0 >= self.graph.len() {
            return Err(AutodiffError::UnknownNode(id.0));
        }
        Ok(self.lookup(values, id))
    }

    fn eval(&self, op: &Op<T>, shape: &[usize], values: &[Option<Tensor<T>>]) -> Result<Tensor<T>> {
        let v = |id: NodeId| self.lookup(values, id);
        let zip = |a: NodeId, b: NodeId, f: &dyn Fn(T, T) -> T| {
            let data = v(a)
                .data()
                .iter()
                .zip(v(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(shape, data)
        };
        match op {
            Op::Input | Op::Parameter | Op::Constant(_) => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => zip(*a, *b, &|x, y| x + y),
            Op::Sub(a, b) => zip(*a, *b, &|x, y| x - y),
            Op::Mul(a, b) => zip(*a, *b, &|x, y| x * y),
            Op::Affine { x, scale, offset } => Ok(v(*x).map(|a| a * *scale + *offset)),
            Op::Conv2d { x, weight, bias, geom } => {
                let xs = v(*x).shape();
                let dims = ConvDims {
                    cin: xs[0],
                    cout: shape[0],
                    h: xs[1],
                    w: xs[2],
                };
                let out = kernels::conv2d_forward(
                    v(*x).data(),
                    v(*weight).data(),
                    bias.map(|b| v(b).data()),
                    &dims,
                    geom,
                );
                Tensor::from_vec(shape, out)
            }
            Op::TransposedConv2d { x, weight, bias, geom } => {
                let xs = v(*x).shape();
                let dims = ConvDims {
                    cin: xs[0],
                    cout: shape[0],
                    h: xs[1],
                    w: xs[2],
                };
                let out = kernels::conv_transpose2d_forward(
                    v(*x).data(),
                    v(*weight).data(),
                    bias.map(|b| v(b).data()),
                    &dims,
                    geom,
                );
                Tensor::from_vec(shape, out)
            }
            Op::InstanceNorm { x, eps } => {
                let out =
                    kernels::instance_norm_forward(v(*x).data(), shape[0], shape[1] * shape[2], *eps);
                Tensor::from_vec(shape, out)
            }
            Op::Relu(x) => Ok(v(*x).map(|a| if a > T::zero() { a } else { T::zero() })),
            Op::LeakyRelu { x, slope } => {
                Ok(v(*x).map(|a| if a > T::zero() { a } else { a * *slope }))
            }
            Op::Exp(x) => Ok(v(*x).map(|a| a.exp())),
            Op::Clamp { x, lo, hi } => Ok(v(*x).map(|a| a.max(*lo).min(*hi))),
            Op::ConcatChannels(xs) => {
                let mut data = Vec::with_capacity(shape.iter().product());
                for &x in xs {
                    data.extend_from_slice(v(x).data());
                }
                Tensor::from_vec(shape, data)
            }
            Op::SliceChannels { x, start, end } => {
                let plane: usize = shape[1..].iter().product();
                Tensor::from_vec(shape, v(*x).data()[start * plane..end * plane].to_vec())
            }
            Op::GlobalAvgPool(x) => {
                let xs = v(*x).shape();
                let plane = xs[1] * xs[2];
                let data = v(*x)
                    .data()
                    .chunks(plane)
                    .map(|c| T::of(mean_f64(c)))
                    .collect();
                Tensor::from_vec(shape, data)
            }
            Op::TileSpatial { x, height, width } => {
                let plane = height * width;
                let mut data = Vec::with_capacity(shape[0] * plane);
                for &c in v(*x).data() {
                    data.extend(std::iter::repeat(c).take(plane));
                }
                Tensor::from_vec(shape, data)
            }
            Op::ComplexDft2(x) | Op::ComplexIdft2(x) => {
                let inverse = matches!(op, Op::ComplexIdft2(_));
                Ok(dft_tensor(v(*x), inverse))
            }
            Op::ComplexAbs { x, eps } => {
                let plane = shape[1] * shape[2];
                let d = v(*x).data();
                let data = (0..plane)
                    .map(|i| (d[i] * d[i] + d[plane + i] * d[plane + i] + *eps).sqrt())
                    .collect();
                Tensor::from_vec(shape, data)
            }
            Op::RowMaskMix { a, b, mask } => {
                let (h, w) = (shape[1], shape[2]);
                let (ad, bd, md) = (v(*a).data(), v(*b).data(), v(*mask).data());
                let mut data = Vec::with_capacity(ad.len());
                for c in 0..shape[0] {
                    for (row, &m) in md.iter().enumerate() {
                        let off = (c * h + row) * w;
                        for j in 0..w {
                            data.push((T::one() - m) * ad[off + j] + m * bd[off + j]);
                        }
                    }
                }
                Tensor::from_vec(shape, data)
            }
            Op::ReduceSum(x) => Ok(Tensor::scalar(T::of(sum_f64(v(*x).data())))),
            Op::ReduceMean(x) => Ok(Tensor::scalar(T::of(mean_f64(v(*x).data())))),
        }
    }

    /// Reverse pass seeded with `(node, cotangent)` pairs; seeds for the same node add up.
    pub fn backward(&self, seeds: &[(NodeId, Tensor<T>)]) -> Result<Gradients<T>> {
        let values = self.values.as_ref().ok_or(AutodiffError::BackwardBeforeForward)?;
        let n = self.graph.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut last = 0;
        for (id, g) in seeds {
            if id.0 >= n {
                return Err(AutodiffError::UnknownNode(id.0));
            }
            if g.shape() != self.graph.shape(*id) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "backward",
                    detail: format!(
                        "cotangent {:?} for node of shape {:?}",
                        g.shape(),
                        self.graph.shape(*id)
                    ),
                });
            }
            accumulate(&mut grads[id.0], g.clone());
            last = last.max(id.0);
        }

        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.graph.nodes[i];
            for (input, contribution) in self.local_grads(&node.op, &node.shape, values, &g, i)? {
                accumulate(&mut grads[input.0], contribution);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.graph.params.clone(),
        })
    }

    fn local_grads(
        &self,
        op: &Op<T>,
        shape: &[usize],
        values: &[Option<Tensor<T>>],
        g: &Tensor<T>,
        id: usize,
    ) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let v = |x: NodeId| self.lookup(values, x);
        let out = || self.lookup(values, NodeId(id));
        let elementwise = |x: NodeId, f: &dyn Fn(T, T, T) -> T| -> Result<(NodeId, Tensor<T>)> {
            let xs = v(x);
            let data = xs
                .data()
                .iter()
                .zip(out().data())
                .zip(g.data())
                .map(|((&a, &y), &gy)| f(a, y, gy))
                .collect();
            Ok((x, Tensor::from_vec(xs.shape(), data)?))
        };
        let r = match op {
            Op::Input | Op::Parameter | Op::Constant(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let ga = Tensor::from_vec(
                    shape,
                    g.data().iter().zip(v(*b).data()).map(|(&x, &y)| x * y).collect(),
                )?;
                let gb = Tensor::from_vec(
                    shape,
                    g.data().iter().zip(v(*a).data()).map(|(&x, &y)| x * y).collect(),
                )?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Affine { x, scale, .. } => vec![(*x, g.map(|a| a * *scale))],
            Op::Conv2d { x, weight, bias, geom } => {
                let xs = v(*x).shape();
                let dims = ConvDims {
                    cin: xs[0],
                    cout: shape[0],
                    h: xs[1],
                    w: xs[2],
                };
                let (dx, dw, db) =
                    kernels::conv2d_backward(v(*x).data(), v(*weight).data(), g.data(), &dims, geom);
                let mut r = vec![
                    (*x, Tensor::from_vec(xs, dx)?),
                    (*weight, Tensor::from_vec(self.graph.shape(*weight), dw)?),
                ];
                if let Some(b) = bias {
                    r.push((*b, Tensor::from_vec(&[shape[0]], db)?));
                }
                r
            }
            Op::TransposedConv2d { x, weight, bias, geom } => {
                let xs = v(*x).shape();
                let dims = ConvDims {
                    cin: xs[0],
                    cout: shape[0],
                    h: xs[1],
                    w: xs[2],
                };
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    v(*x).data(),
                    v(*weight).data(),
                    g.data(),
                    &dims,
                    geom,
                );
                let mut r = vec![
                    (*x, Tensor::from_vec(xs, dx)?),
                    (*weight, Tensor::from_vec(self.graph.shape(*weight), dw)?),
                ];
                if let Some(b) = bias {
                    r.push((*b, Tensor::from_vec(&[shape[0]], db)?));
                }
                r
            }
            Op::InstanceNorm { x, eps } => {
                let dx = kernels::instance_norm_backward(
                    v(*x).data(),
                    g.data(),
                    shape[0],
                    shape[1] * shape[2],
                    *eps,
                );
                vec![(*x, Tensor::from_vec(shape, dx)?)]
            }
            Op::Relu(x) => vec![elementwise(*x, &|a, _, gy| {
                if a > T::zero() {
                    gy
                } else {
                    T::zero()
                }
            })?],
            Op::LeakyRelu { x, slope } => vec![elementwise(*x, &|a, _, gy| {
                if a > T::zero() {
                    gy
                } else {
                    gy * *slope
                }
            })?],
            Op::Exp(x) => vec![elementwise(*x, &|_, y, gy| y * gy)?],
            Op::Clamp { x, lo, hi } => vec![elementwise(*x, &|a, _, gy| {
                if a >= *lo && a <= *hi {
                    gy
                } else {
                    T::zero()
                }
            })?],
            Op::ConcatChannels(xs) => {
                let mut offset = 0;
                let mut r = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = v(x).len();
                    r.push((
                        x,
                        Tensor::from_vec(v(x).shape(), g.data()[offset..offset + len].to_vec())?,
                    ));
                    offset += len;
                }
                r
            }
            Op::SliceChannels { x, start, end } => {
                let xs = v(*x).shape();
                let plane: usize = xs[1..].iter().product();
                let mut gx = Tensor::zeros(xs);
                gx.data_mut()[start * plane..end * plane].copy_from_slice(g.data());
                vec![(*x, gx)]
            }
            Op::GlobalAvgPool(x) => {
                let xs = v(*x).shape();
                let plane = xs[1] * xs[2];
                let inv = T::one() / T::of(plane as f64);
                let mut data = Vec::with_capacity(xs[0] * plane);
                for &gc in g.data() {
                    data.extend(std::iter::repeat(gc * inv).take(plane));
                }
                vec![(*x, Tensor::from_vec(xs, data)?)]
            }
            Op::TileSpatial { x, height, width } => {
                let plane = height * width;
                let data = g.data().chunks(plane).map(|c| T::of(sum_f64(c))).collect();
                vec![(*x, Tensor::from_vec(v(*x).shape(), data)?)]
            }
            // The two-plane DFT is a real-orthogonal map, so its transpose is its inverse.
            Op::ComplexDft2(x) => vec![(*x, dft_tensor(g, true))],
            Op::ComplexIdft2(x) => vec![(*x, dft_tensor(g, false))],
            Op::ComplexAbs { x, .. } => {
                let xs = v(*x);
                let plane = shape[1] * shape[2];
                let (d, a) = (xs.data(), out().data());
                let mut data = vec![T::zero(); 2 * plane];
                for i in 0..plane {
                    let s = g.data()[i] / a[i];
                    data[i] = d[i] * s;
                    data[plane + i] = d[plane + i] * s;
                }
                vec![(*x, Tensor::from_vec(xs.shape(), data)?)]
            }
            Op::RowMaskMix { a, b, mask } => {
                let (h, w) = (shape[1], shape[2]);
                let md = v(*mask).data();
                let mut ga = g.clone();
                let mut gb = g.clone();
                for c in 0..shape[0] {
                    for (row, &m) in md.iter().enumerate() {
                        let off = (c * h + row) * w;
                        for j in off..off + w {
                            ga.data_mut()[j] = ga.data()[j] * (T::one() - m);
                            gb.data_mut()[j] = gb.data()[j] * m;
                        }
                    }
                }
                // the mask is a selector, not a differentiable quantity
                vec![(*a, ga), (*b, gb), (*mask, Tensor::zeros(&[h]))]
            }
            Op::ReduceSum(x) => vec![(*x, Tensor::filled(v(*x).shape(), g.data()[0]))],
            Op::ReduceMean(x) => {
                let n = T::of(v(*x).len() as f64);
                vec![(*x, Tensor::filled(v(*x).shape(), g.data()[0] / n))]
            }
        };
        Ok(r)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn sum_f64<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|a| a.to_f64().unwrap_or(f64::NAN)).sum()
}

fn mean_f64<T: Real>(v: &[T]) -> f64 {
    sum_f64(v) / v.len() as f64
}

fn dft_tensor<T: Real>(x: &Tensor<T>, inverse: bool) -> Tensor<T> {
    let s = x.shape();
    let plane = s[1] * s[2];
    let (re, im) = x.data().split_at(plane);
    let (mut re, mut im) = (re.to_vec(), im.to_vec());
    dft2_planes(&mut re, &mut im, s[1], s[2], inverse);
    re.extend(im);
    Tensor::from_vec(s, re).expect("shape preserved")
}
