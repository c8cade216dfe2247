use crate::error::{AutodiffError, Result};
use crate::kernels::{ConvGeom, Padding};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Parameter,
    Constant,
    Add,
    Sub,
    Mul,
    Affine,
    Conv2d,
    TransposedConv2d,
    InstanceNorm,
    Relu,
    LeakyRelu,
    Exp,
    Clamp,
    ConcatChannels,
    SliceChannels,
    GlobalAvgPool,
    TileSpatial,
    ComplexDft2,
    ComplexIdft2,
    ComplexAbs,
    RowMaskMix,
    ReduceSum,
    ReduceMean,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Input,
    Parameter,
    Constant(Tensor<T>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: T, offset: T },
    Conv2d { x: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    TransposedConv2d { x: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    InstanceNorm { x: NodeId, eps: f64 },
    Relu(NodeId),
    LeakyRelu { x: NodeId, slope: T },
    Exp(NodeId),
    Clamp { x: NodeId, lo: T, hi: T },
    ConcatChannels(Vec<NodeId>),
    SliceChannels { x: NodeId, start: usize, end: usize },
    GlobalAvgPool(NodeId),
    TileSpatial { x: NodeId, height: usize, width: usize },
    ComplexDft2(NodeId),
    ComplexIdft2(NodeId),
    ComplexAbs { x: NodeId, eps: T },
    RowMaskMix { a: NodeId, b: NodeId, mask: NodeId },
    ReduceSum(NodeId),
    ReduceMean(NodeId),
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Parameter => OpKind::Parameter,
            Op::Constant(_) => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine { .. } => OpKind::Affine,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::TransposedConv2d { .. } => OpKind::TransposedConv2d,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Exp(_) => OpKind::Exp,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::TileSpatial { .. } => OpKind::TileSpatial,
            Op::ComplexDft2(_) => OpKind::ComplexDft2,
            Op::ComplexIdft2(_) => OpKind::ComplexIdft2,
            Op::ComplexAbs { .. } => OpKind::ComplexAbs,
            Op::RowMaskMix { .. } => OpKind::RowMaskMix,
            Op::ReduceSum(_) => OpKind::ReduceSum,
            Op::ReduceMean(_) => OpKind::ReduceMean,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Parameter | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv2d { x, weight, bias, .. } | Op::TransposedConv2d { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::ConcatChannels(xs) => xs.clone(),
            Op::RowMaskMix { a, b, mask } => vec![*a, *b, *mask],
            Op::Affine { x, .. }
            | Op::InstanceNorm { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Clamp { x, .. }
            | Op::SliceChannels { x, .. }
            | Op::TileSpatial { x, .. }
            | Op::ComplexAbs { x, .. } => vec![*x],
            Op::Relu(x)
            | Op::Exp(x)
            | Op::GlobalAvgPool(x)
            | Op::ComplexDft2(x)
            | Op::ComplexIdft2(x)
            | Op::ReduceSum(x)
            | Op::ReduceMean(x) => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) name: Option<String>,
}

/// A static computation graph. Nodes are appended in topological order; shapes are
/// checked when a node is added, so a built graph is always shape-consistent.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) params: Vec<NodeId>,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    pub fn predecessors(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Parameter nodes in creation order.
    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    /// `(name, shape)` of every parameter, in creation order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|id| {
                let n = &self.nodes[id.0];
                (n.name.clone().unwrap_or_default(), n.shape.clone())
            })
            .collect()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or(AutodiffError::UnknownNode(id.0))
    }

    fn chw(&self, op: &'static str, id: NodeId) -> Result<(usize, usize, usize)> {
        match self.check(id)? {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(mismatch(op, format!("expected [C, H, W], got {s:?}"))),
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Input, shape.to_vec());
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self
            .params
            .iter()
            .any(|p| self.nodes[p.0].name.as_deref() == Some(name))
        {
            return Err(AutodiffError::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.push(Op::Parameter, shape.to_vec());
        self.nodes[id.0].name = Some(name.to_string());
        self.params.push(id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    fn same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?.to_vec());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: NodeId, scale: f64, offset: f64) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(
            Op::Affine {
                x,
                scale: T::of(scale),
                offset: T::of(offset),
            },
            s,
        ))
    }

    /// Convolution with weight `[cout, cin, k, k]` and optional bias `[cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (cin, h, w) = self.chw("conv2d", x)?;
        let (cout, k) = match self.check(weight)? {
            &[co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            s => return Err(mismatch("conv2d", format!("weight {s:?} for {cin} input channels"))),
        };
        if let Some(b) = bias {
            if self.check(b)? != [cout] {
                return Err(mismatch("conv2d", format!("bias must be [{cout}]")));
            }
        }
        if padding == Padding::Reflect && (pad >= h || pad >= w) {
            return Err(mismatch("conv2d", format!("reflection pad {pad} on {h}x{w}")));
        }
        let geom = ConvGeom {
            kernel: k,
            stride,
            pad,
            padding,
        };
        let (ho, wo) = match (geom.output_size(h), geom.output_size(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(mismatch("conv2d", format!("kernel {k} does not fit {h}x{w}"))),
        };
        Ok(self.push(
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
            vec![cout, ho, wo],
        ))
    }

    /// Transposed convolution with weight `[cin, cout, k, k]`; `pad` crops each border.
    pub fn transposed_conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (cin, h, w) = self.chw("transposed_conv2d", x)?;
        let (cout, k) = match self.check(weight)? {
            &[ci, co, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            s => {
                return Err(mismatch(
                    "transposed_conv2d",
                    format!("weight {s:?} for {cin} input channels"),
                ))
            }
        };
        if let Some(b) = bias {
            if self.check(b)? != [cout] {
                return Err(mismatch("transposed_conv2d", format!("bias must be [{cout}]")));
            }
        }
        let geom = ConvGeom {
            kernel: k,
            stride,
            pad,
            padding: Padding::Zero,
        };
        let (ho, wo) = match (geom.transposed_output_size(h), geom.transposed_output_size(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(mismatch("transposed_conv2d", format!("crop {pad} too large"))),
        };
        Ok(self.push(
            Op::TransposedConv2d {
                x,
                weight,
                bias,
                geom,
            },
            vec![cout, ho, wo],
        ))
    }

    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (c, h, w) = self.chw("instance_norm", x)?;
        Ok(self.push(Op::InstanceNorm { x, eps }, vec![c, h, w]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Relu(x), s))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(
            Op::LeakyRelu {
                x,
                slope: T::of(slope),
            },
            s,
        ))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        Ok(self.push(Op::Exp(x), s))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(AutodiffError::Invalid(format!("clamp range [{lo}, {hi}]")));
        }
        let s = self.check(x)?.to_vec();
        Ok(self.push(
            Op::Clamp {
                x,
                lo: T::of(lo),
                hi: T::of(hi),
            },
            s,
        ))
    }

    /// Concatenates along the leading (channel) dimension.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| AutodiffError::Invalid("concat of nothing".into()))?;
        let tail = self.check(*first)?[1..].to_vec();
        let mut c = 0;
        for &x in xs {
            let s = self.check(x)?;
            if s[1..] != tail[..] {
                return Err(mismatch("concat_channels", format!("{s:?} vs [_, {tail:?}]")));
            }
            c += s[0];
        }
        let mut shape = vec![c];
        shape.extend(tail);
        Ok(self.push(Op::ConcatChannels(xs.to_vec()), shape))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.check(x)?.to_vec();
        if start >= end || end > s[0] {
            return Err(mismatch("slice_channels", format!("{start}..{end} of {s:?}")));
        }
        let mut shape = s;
        shape[0] = end - start;
        Ok(self.push(Op::SliceChannels { x, start, end }, shape))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, _, _) = self.chw("global_avg_pool", x)?;
        Ok(self.push(Op::GlobalAvgPool(x), vec![c, 1, 1]))
    }

    /// Replicates a `[C, 1, 1]` vector over every spatial location of an `height×width` grid.
    pub fn tile_spatial(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let (c, h, w) = self.chw("tile_spatial", x)?;
        if h != 1 || w != 1 {
            return Err(mismatch("tile_spatial", format!("expected [C, 1, 1], got [{c}, {h}, {w}]")));
        }
        Ok(self.push(Op::TileSpatial { x, height, width }, vec![c, height, width]))
    }

    fn complex_plane(&self, op: &'static str, x: NodeId) -> Result<Vec<usize>> {
        let (c, h, w) = self.chw(op, x)?;
        if c != 2 {
            return Err(mismatch(op, format!("expected [2, H, W], got [{c}, {h}, {w}]")));
        }
        Ok(vec![c, h, w])
    }

    /// Unitary 2D DFT of a complex image stored as `[re, im]` planes.
    pub fn complex_dft2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.complex_plane("complex_dft2", x)?;
        Ok(self.push(Op::ComplexDft2(x), s))
    }

    pub fn complex_idft2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.complex_plane("complex_idft2", x)?;
        Ok(self.push(Op::ComplexIdft2(x), s))
    }

    /// `sqrt(re² + im² + eps)`, shape `[1, H, W]`.
    pub fn complex_abs(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.complex_plane("complex_abs", x)?;
        Ok(self.push(
            Op::ComplexAbs { x, eps: T::of(eps) },
            vec![1, s[1], s[2]],
        ))
    }

    /// `(1 - S) ⊙ a + S ⊙ b` where `mask` is a per-row vector of length H.
    pub fn row_mask_mix(&mut self, a: NodeId, b: NodeId, mask: NodeId) -> Result<NodeId> {
        let s = self.same_shape("row_mask_mix", a, b)?;
        let (_, h, _) = self.chw("row_mask_mix", a)?;
        if self.check(mask)? != [h] {
            return Err(mismatch("row_mask_mix", format!("mask must be [{h}]")));
        }
        Ok(self.push(Op::RowMaskMix { a, b, mask }, s))
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::ReduceSum(x), vec![1]))
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::ReduceMean(x), vec![1]))
    }
}
