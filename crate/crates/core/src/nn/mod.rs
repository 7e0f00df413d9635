//! Trainable layers with hand-written backward passes.
//!
//! A [`Layer`] is the unit a [`LayerSpec`] describes (e.g. a whole
//! depthwise-separable block); internally it is a short list of primitive
//! nodes (conv, per-channel affine norm, ReLU, resize, sigmoid). A [`Graph`]
//! chains layers and routes U-Net skip tensors through a LIFO stack.

mod gradcheck;

use std::hash::{DefaultHasher, Hash, Hasher};

pub use gradcheck::{
    gradient_check, gradient_check_with_loss, projection_loss, Differentiable, GradCheckReport,
};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{
    concat_channels, conv_output_shape, resize_nearest_x2, sigmoid, split_channels, sum_pool2x2,
    ConvParams, Real, Tensor,
};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        ParamTensor {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    fn accumulate(&mut self, delta: &[T]) {
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamTensor<U> {
        ParamTensor {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    DepthwiseSeparable,
    Downsample,
    Upsample,
    ConcatSkip,
    Norm,
    Activation,
    SigmoidHead,
}

/// Declarative description of one layer.
///
/// For `ConcatSkip`, `in_channels` is the width of the main path and
/// `out_channels` the width after the skip tensor is appended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
    /// Follow each convolution with a per-channel affine norm.
    pub norm: bool,
}

impl LayerSpec {
    pub fn conv2d(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            activation: Activation::None,
            norm: false,
        }
    }

    pub fn depthwise_separable(cin: usize, cout: usize, kernel: usize) -> Self {
        LayerSpec {
            kind: LayerKind::DepthwiseSeparable,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: 1,
            activation: Activation::Relu,
            norm: true,
        }
    }

    pub fn downsample(cin: usize, cout: usize, kernel: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Downsample,
            stride: 2,
            ..Self::depthwise_separable(cin, cout, kernel)
        }
    }

    pub fn upsample(cin: usize, cout: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Upsample,
            in_channels: cin,
            out_channels: cout,
            kernel: 1,
            stride: 1,
            activation: Activation::Relu,
            norm: true,
        }
    }

    pub fn concat_skip(main: usize, skip: usize) -> Self {
        LayerSpec {
            kind: LayerKind::ConcatSkip,
            in_channels: main,
            out_channels: main + skip,
            kernel: 1,
            stride: 1,
            activation: Activation::None,
            norm: false,
        }
    }

    pub fn norm(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Norm,
            ..Self::conv2d(channels, channels, 1, 1)
        }
    }

    pub fn activation(channels: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Activation,
            activation,
            ..Self::conv2d(channels, channels, 1, 1)
        }
    }

    pub fn sigmoid_head(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::SigmoidHead,
            ..Self::conv2d(channels, channels, 1, 1)
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_norm(mut self, norm: bool) -> Self {
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |why: &str| Err(Error::Config(format!("{:?} layer: {why}", self.kind)));
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive");
        }
        match self.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseSeparable | LayerKind::Downsample => {
                if self.kernel == 0 || self.kernel % 2 == 0 {
                    return fail("kernel must be odd and >= 1");
                }
                if self.stride == 0 {
                    return fail("stride must be >= 1");
                }
                if self.kind == LayerKind::Downsample && self.stride != 2 {
                    return fail("downsample stride must be 2");
                }
            }
            LayerKind::Upsample => {}
            LayerKind::ConcatSkip => {
                if self.out_channels <= self.in_channels {
                    return fail("out_channels must exceed in_channels");
                }
            }
            LayerKind::Norm | LayerKind::Activation | LayerKind::SigmoidHead => {
                if self.in_channels != self.out_channels {
                    return fail("in_channels must equal out_channels");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: ParamTensor<T>,
    pub bias: ParamTensor<T>,
    pub params: ConvParams,
}

impl<T: Real> Conv2d<T> {
    fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Self {
        Conv2d {
            weight: ParamTensor::new(
                format!("{name}.weight"),
                Tensor::zeros([cout, cin / groups, k, k]),
            ),
            bias: ParamTensor::new(format!("{name}.bias"), Tensor::zeros([cout])),
            params: ConvParams::new(stride, k / 2, groups),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1] * self.params.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    /// Multiply-accumulates for one sample: `Kh*Kw*(Cin/groups)*Cout*Hout*Wout`.
    pub fn macs(&self, in_hw: (usize, usize)) -> Result<u64> {
        let [_, cout, ho, wo] = self.output_shape(&[1, self.in_channels(), in_hw.0, in_hw.1])?;
        let w = self.weight.value.shape();
        Ok((w[1] * w[2] * w[3] * cout * ho * wo) as u64)
    }

    fn output_shape(&self, input: &[usize]) -> Result<[usize; 4]> {
        conv_output_shape(input, self.weight.value.shape(), Some(&[self.out_channels()]), self.params)
    }
}

/// Per-channel affine normalization `y = gamma * x + beta`, with any frozen
/// statistics already folded into `gamma`/`beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine<T> {
    pub gamma: ParamTensor<T>,
    pub beta: ParamTensor<T>,
}

impl<T: Real> ChannelAffine<T> {
    fn new(name: &str, channels: usize) -> Self {
        ChannelAffine {
            gamma: ParamTensor::new(format!("{name}.gamma"), Tensor::full([channels], T::one())),
            beta: ParamTensor::new(format!("{name}.beta"), Tensor::zeros([channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    Conv(Conv2d<T>),
    Norm(ChannelAffine<T>),
    Relu,
    Resize,
    Sigmoid,
}

impl<T: Real> Node<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Node::Conv(c) => kernels::conv2d(x, &c.weight.value, Some(&c.bias.value), c.params),
            Node::Norm(n) => {
                let [_, ch, h, w] = x.dims4()?;
                if ch != n.channels() {
                    return Err(Error::shape("norm", "input", x.shape(), "gamma", n.gamma.value.shape()));
                }
                let (gm, bt) = (n.gamma.value.data(), n.beta.value.data());
                let mut y = x.clone();
                for (i, plane) in y.data_mut().chunks_exact_mut(h * w).enumerate() {
                    let (g, b) = (gm[i % ch], bt[i % ch]);
                    plane.iter_mut().for_each(|v| *v = g * *v + b);
                }
                Ok(y)
            }
            Node::Relu => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
            Node::Resize => resize_nearest_x2(x),
            Node::Sigmoid => Ok(x.map(sigmoid)),
        }
    }

    /// `x` is the node's cached forward input.
    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Node::Conv(c) => {
                let gw = kernels::conv2d_backward_weight(g, x, c.weight.value.shape(), c.params)?;
                c.weight.accumulate(gw.data());
                c.bias.accumulate(&kernels::channel_sums(g)?);
                kernels::conv2d_backward_input(g, &c.weight.value, x.shape(), c.params)
            }
            Node::Norm(n) => {
                let [_, ch, h, w] = x.dims4()?;
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                let gm = n.gamma.value.data();
                let mut gx = g.clone();
                for (i, (gp, xp)) in gx
                    .data_mut()
                    .chunks_exact_mut(h * w)
                    .zip(x.data().chunks_exact(h * w))
                    .enumerate()
                {
                    let c = i % ch;
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for (gv, &xv) in gp.iter_mut().zip(xp) {
                        sg += *gv;
                        sgx += *gv * xv;
                        *gv *= gm[c];
                    }
                    dgamma[c] += sgx;
                    dbeta[c] += sg;
                }
                n.gamma.accumulate(&dgamma);
                n.beta.accumulate(&dbeta);
                Ok(gx)
            }
            Node::Relu => {
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    // subgradient 0 at x == 0
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                Ok(gx)
            }
            Node::Resize => sum_pool2x2(g),
            Node::Sigmoid => {
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(xv);
                    *gv *= s * (T::one() - s);
                }
                Ok(gx)
            }
        }
    }

    fn params(&self) -> Vec<&ParamTensor<T>> {
        match self {
            Node::Conv(c) => vec![&c.weight, &c.bias],
            Node::Norm(n) => vec![&n.gamma, &n.beta],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        match self {
            Node::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Node::Norm(n) => vec![&mut n.gamma, &mut n.beta],
            _ => vec![],
        }
    }

    fn cast<U: Real>(&self) -> Node<U> {
        match self {
            Node::Conv(c) => Node::Conv(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                params: c.params,
            }),
            Node::Norm(n) => Node::Norm(ChannelAffine {
                gamma: n.gamma.cast(),
                beta: n.beta.cast(),
            }),
            Node::Relu => Node::Relu,
            Node::Resize => Node::Resize,
            Node::Sigmoid => Node::Sigmoid,
        }
    }
}

/// What a layer's backward pass needs: the input of every primitive node.
#[derive(Debug, Clone, Default)]
pub struct LayerCache<T> {
    node_inputs: Vec<Tensor<T>>,
    filled: bool,
}

impl<T: Real> LayerCache<T> {
    pub fn is_empty(&self) -> bool {
        !self.filled
    }

    fn relu_signature(&self, nodes: &[Node<T>], hasher: &mut DefaultHasher) {
        for (node, x) in nodes.iter().zip(&self.node_inputs) {
            if matches!(node, Node::Relu) {
                for v in x.data() {
                    (*v > T::zero()).hash(hasher);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub spec: LayerSpec,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Layer<T> {
    /// Builds a layer with zero-valued weights/biases and identity norms.
    pub fn build(name: impl Into<String>, spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel);
        let mut nodes = Vec::new();
        let conv_unit = |nodes: &mut Vec<Node<T>>, tag: &str, conv: Conv2d<T>, ch: usize| {
            nodes.push(Node::Conv(conv));
            if spec.norm {
                nodes.push(Node::Norm(ChannelAffine::new(&format!("{name}.{tag}_norm"), ch)));
            }
            if spec.activation == Activation::Relu {
                nodes.push(Node::Relu);
            }
        };
        match spec.kind {
            LayerKind::Conv2d => {
                let conv = Conv2d::new(&format!("{name}.conv"), cin, cout, k, spec.stride, 1);
                conv_unit(&mut nodes, "conv", conv, cout);
            }
            LayerKind::DepthwiseSeparable | LayerKind::Downsample => {
                let dw = Conv2d::new(&format!("{name}.dw"), cin, cin, k, spec.stride, cin);
                conv_unit(&mut nodes, "dw", dw, cin);
                let pw = Conv2d::new(&format!("{name}.pw"), cin, cout, 1, 1, 1);
                conv_unit(&mut nodes, "pw", pw, cout);
            }
            LayerKind::Upsample => {
                nodes.push(Node::Resize);
                let pw = Conv2d::new(&format!("{name}.pw"), cin, cout, 1, 1, 1);
                conv_unit(&mut nodes, "pw", pw, cout);
            }
            LayerKind::ConcatSkip => {}
            LayerKind::Norm => nodes.push(Node::Norm(ChannelAffine::new(&format!("{name}.norm"), cin))),
            LayerKind::Activation => {
                if spec.activation == Activation::Relu {
                    nodes.push(Node::Relu);
                }
            }
            LayerKind::SigmoidHead => nodes.push(Node::Sigmoid),
        }
        Ok(Layer { name, spec, nodes })
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn arity(&self) -> usize {
        if self.spec.kind == LayerKind::ConcatSkip {
            2
        } else {
            1
        }
    }

    fn check_inputs(&self, inputs: &[&Tensor<T>]) -> Result<()> {
        if inputs.len() != self.arity() {
            return Err(Error::Shape(format!(
                "layer {} takes {} input(s), got {}",
                self.name,
                self.arity(),
                inputs.len()
            )));
        }
        let [_, c, _, _] = inputs[0].dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "layer {} expects {} input channels, got {} (input shape {:?})",
                self.name,
                self.spec.in_channels,
                c,
                inputs[0].shape()
            )));
        }
        if let Some(skip) = inputs.get(1) {
            let [_, cs, _, _] = skip.dims4()?;
            if c + cs != self.spec.out_channels {
                return Err(Error::Shape(format!(
                    "layer {} expects {} skip channels, got {}",
                    self.name,
                    self.spec.out_channels - c,
                    cs
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[&Tensor<T>], cache: Option<&mut LayerCache<T>>) -> Result<Tensor<T>> {
        self.check_inputs(inputs)?;
        if self.spec.kind == LayerKind::ConcatSkip {
            if let Some(c) = cache {
                c.node_inputs.clear();
                c.filled = true;
            }
            return concat_channels(inputs[0], inputs[1]).map_err(|e| match e {
                Error::ShapeMismatch { lhs, rhs, .. } => Error::Shape(format!(
                    "layer {}: skip spatial size {:?} does not match main path {:?}",
                    self.name, rhs, lhs
                )),
                other => other,
            });
        }
        let mut x = inputs[0].clone();
        match cache {
            Some(c) => {
                c.node_inputs.clear();
                c.filled = true;
                for node in &self.nodes {
                    let y = node.forward(&x)?;
                    c.node_inputs.push(std::mem::replace(&mut x, y));
                }
            }
            None => {
                for node in &self.nodes {
                    x = node.forward(&x)?;
                }
            }
        }
        Ok(x)
    }

    /// Returns one gradient per input and accumulates parameter gradients.
    pub fn backward(&mut self, grad_out: &Tensor<T>, cache: &LayerCache<T>) -> Result<Vec<Tensor<T>>> {
        if !cache.filled || cache.node_inputs.len() != self.nodes.len() {
            return Err(Error::State(format!(
                "layer {}: backward called without a forward cache",
                self.name
            )));
        }
        if self.spec.kind == LayerKind::ConcatSkip {
            let (main, skip) = split_channels(grad_out, self.spec.in_channels)?;
            return Ok(vec![main, skip]);
        }
        let mut g = grad_out.clone();
        for (node, x) in self.nodes.iter_mut().zip(&cache.node_inputs).rev() {
            g = node.backward(x, &g)?;
        }
        Ok(vec![g])
    }

    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<[usize; 4]> {
        let (n, h, w) = match inputs.first() {
            Some(&&[n, _, h, w]) => (n, h, w),
            _ => return Err(Error::Shape(format!("layer {}: expected a rank-4 input", self.name))),
        };
        if self.spec.kind == LayerKind::ConcatSkip {
            match inputs.get(1) {
                Some(&&[ns, _, hs, ws]) if (ns, hs, ws) == (n, h, w) => {}
                other => {
                    return Err(Error::Shape(format!(
                        "layer {}: skip shape {:?} does not match main path {:?}",
                        self.name, other, inputs[0]
                    )))
                }
            }
        }
        let (mut h, mut w) = (h, w);
        for node in &self.nodes {
            match node {
                Node::Conv(c) => {
                    let s = c.output_shape(&[n, c.in_channels(), h, w])?;
                    (h, w) = (s[2], s[3]);
                }
                Node::Resize => (h, w) = (2 * h, 2 * w),
                _ => {}
            }
        }
        Ok([n, self.spec.out_channels, h, w])
    }

    /// MACs for one sample with input spatial size `hw`.
    pub fn macs(&self, hw: (usize, usize)) -> Result<u64> {
        let (mut h, mut w) = hw;
        let mut total = 0;
        for node in &self.nodes {
            match node {
                Node::Conv(c) => {
                    total += c.macs((h, w))?;
                    let s = c.output_shape(&[1, c.in_channels(), h, w])?;
                    (h, w) = (s[2], s[3]);
                }
                Node::Resize => (h, w) = (2 * h, 2 * w),
                _ => {}
            }
        }
        Ok(total)
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        self.nodes.iter().flat_map(|n| n.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.nodes.iter_mut().flat_map(|n| n.params_mut()).collect()
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            name: self.name.clone(),
            spec: self.spec.clone(),
            nodes: self.nodes.iter().map(|n| n.cast()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode<T> {
    pub layer: Layer<T>,
    /// Push this layer's output onto the skip stack.
    pub save_skip: bool,
}

/// Layers applied in order; `ConcatSkip` layers pop the most recent saved skip.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<T> {
    pub nodes: Vec<GraphNode<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct GraphCache<T> {
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> GraphCache<T> {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn push(&mut self, layer: Layer<T>, save_skip: bool) {
        self.nodes.push(GraphNode { layer, save_skip });
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.nodes.iter().map(|n| &n.layer)
    }

    /// Propagates shapes through the graph, checking every channel count and
    /// skip connection. Returns the output shape.
    pub fn infer_shape(&self, input: &[usize]) -> Result<[usize; 4]> {
        let mut cur: [usize; 4] = input
            .try_into()
            .map_err(|_| Error::Shape(format!("expected rank-4 input shape, got {input:?}")))?;
        let mut skips: Vec<[usize; 4]> = Vec::new();
        for node in &self.nodes {
            let layer = &node.layer;
            if cur[1] != layer.spec.in_channels {
                return Err(Error::Shape(format!(
                    "layer {} expects {} input channels, graph provides {}",
                    layer.name, layer.spec.in_channels, cur[1]
                )));
            }
            cur = if layer.spec.kind == LayerKind::ConcatSkip {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::Shape(format!("layer {}: skip stack is empty", layer.name)))?;
                if cur[1] + skip[1] != layer.spec.out_channels {
                    return Err(Error::Shape(format!(
                        "layer {}: skip has {} channels, expected {}",
                        layer.name,
                        skip[1],
                        layer.spec.out_channels - cur[1]
                    )));
                }
                layer.output_shape(&[&cur, &skip])?
            } else {
                layer.output_shape(&[&cur])?
            };
            if node.save_skip {
                skips.push(cur);
            }
        }
        if !skips.is_empty() {
            return Err(Error::Shape(format!("{} skip tensor(s) never consumed", skips.len())));
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &Tensor<T>, mut cache: Option<&mut GraphCache<T>>) -> Result<Tensor<T>> {
        if let Some(c) = cache.as_deref_mut() {
            c.layers.clear();
        }
        let mut skips: Vec<Tensor<T>> = Vec::new();
        let mut cur = x.clone();
        for node in &self.nodes {
            let mut lc = cache.as_ref().map(|_| LayerCache::default());
            cur = if node.layer.spec.kind == LayerKind::ConcatSkip {
                let skip = skips.pop().ok_or_else(|| {
                    Error::Shape(format!("layer {}: skip stack is empty", node.layer.name))
                })?;
                node.layer.forward(&[&cur, &skip], lc.as_mut())?
            } else {
                node.layer.forward(&[&cur], lc.as_mut())?
            };
            if node.save_skip {
                skips.push(cur.clone());
            }
            if let (Some(c), Some(lc)) = (cache.as_deref_mut(), lc) {
                c.layers.push(lc);
            }
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, cache: &GraphCache<T>) -> Result<Tensor<T>> {
        if cache.layers.len() != self.nodes.len() {
            return Err(Error::State("graph backward called without a forward cache".into()));
        }
        let mut pending: Vec<Tensor<T>> = Vec::new();
        let mut g = grad_out.clone();
        for (node, lc) in self.nodes.iter_mut().zip(&cache.layers).rev() {
            if node.save_skip {
                let skip_grad = pending
                    .pop()
                    .ok_or_else(|| Error::State("unbalanced skip gradient stack".into()))?;
                g = crate::tensor::add(&g, &skip_grad)?;
            }
            let mut grads = node.layer.backward(&g, lc)?;
            if grads.len() == 2 {
                pending.push(grads.pop().expect("skip grad"));
            }
            g = grads.pop().expect("main grad");
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        self.nodes.iter().flat_map(|n| n.layer.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.nodes.iter_mut().flat_map(|n| n.layer.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> Graph<U> {
        Graph {
            nodes: self
                .nodes
                .iter()
                .map(|n| GraphNode {
                    layer: n.layer.cast(),
                    save_skip: n.save_skip,
                })
                .collect(),
        }
    }

    fn relu_signature(&self, cache: &GraphCache<T>) -> u64 {
        let mut h = DefaultHasher::new();
        for (node, lc) in self.nodes.iter().zip(&cache.layers) {
            lc.relu_signature(node.layer.nodes(), &mut h);
        }
        h.finish()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Total trainable scalars: conv weights and biases plus norm scale/shift.
pub fn count_params<T: Real>(graph: &Graph<T>) -> usize {
    graph.params().iter().map(|p| p.numel()).sum()
}

/// Convolution MACs at batch 1. Bias adds, norms, activations and resizes
/// count as zero.
pub fn count_macs<T: Real>(graph: &Graph<T>, input_shape: &[usize]) -> Result<u64> {
    let mut shape: [usize; 4] = input_shape
        .try_into()
        .map_err(|_| Error::Shape(format!("expected rank-4 input shape, got {input_shape:?}")))?;
    shape[0] = 1;
    graph.infer_shape(&shape)?;
    let mut skips = Vec::new();
    let mut total = 0;
    for node in &graph.nodes {
        total += node.layer.macs((shape[2], shape[3]))?;
        shape = if node.layer.spec.kind == LayerKind::ConcatSkip {
            let skip: [usize; 4] = skips.pop().expect("validated by infer_shape");
            node.layer.output_shape(&[&shape, &skip])?
        } else {
            node.layer.output_shape(&[&shape])?
        };
        if node.save_skip {
            skips.push(shape);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize<T: Real>(params: Vec<&mut ParamTensor<T>>, rng: &mut ChaCha8Rng) {
        for p in params {
            for v in p.value.data_mut() {
                *v = T::lit(rng.random::<f64>() - 0.5);
            }
        }
    }

    fn graph_of(layer: Layer<f64>) -> Graph<f64> {
        let mut g = Graph::new();
        g.push(layer, false);
        g
    }

    #[test]
    fn ds_block_shape() {
        let l = Layer::<f32>::build("b", LayerSpec::depthwise_separable(2, 3, 3)).unwrap();
        let y = l.forward(&[&Tensor::zeros([1, 2, 4, 4])], None).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn downsample_halves_and_upsample_doubles() {
        let d = Layer::<f32>::build("d", LayerSpec::downsample(2, 4, 3)).unwrap();
        let y = d.forward(&[&Tensor::zeros([1, 2, 8, 8])], None).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
        let u = Layer::<f32>::build("u", LayerSpec::upsample(4, 2)).unwrap();
        let z = u.forward(&[&y], None).unwrap();
        assert_eq!(z.shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn concat_skip_shape() {
        let l = Layer::<f32>::build("c", LayerSpec::concat_skip(2, 3)).unwrap();
        let y = l
            .forward(&[&Tensor::zeros([1, 2, 4, 4]), &Tensor::zeros([1, 3, 4, 4])], None)
            .unwrap();
        assert_eq!(y.shape(), &[1, 5, 4, 4]);
    }

    #[test]
    fn sigmoid_head_on_zero_logits() {
        let l = Layer::<f32>::build("s", LayerSpec::sigmoid_head(1)).unwrap();
        let y = l.forward(&[&Tensor::zeros([1, 1, 3, 3])], None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let l = Layer::<f32>::build("enc0.block1", LayerSpec::depthwise_separable(2, 3, 3)).unwrap();
        let err = l.forward(&[&Tensor::zeros([1, 5, 4, 4])], None).unwrap_err();
        assert!(err.to_string().contains("enc0.block1"), "{err}");
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Layer::<f32>::build("x", LayerSpec::depthwise_separable(2, 3, 2)).is_err());
        assert!(Layer::<f32>::build("x", LayerSpec::depthwise_separable(2, 3, 0)).is_err());
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let mut l = Layer::<f64>::build("p", LayerSpec::conv2d(2, 3, 1, 1)).unwrap();
        let err = l.backward(&Tensor::zeros([1, 3, 2, 2]), &LayerCache::default()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        let mut c = Layer::<f64>::build("c", LayerSpec::concat_skip(2, 2)).unwrap();
        assert!(matches!(
            c.backward(&Tensor::zeros([1, 4, 2, 2]), &LayerCache::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn param_counting_rules() {
        let ds = Layer::<f32>::build("b", LayerSpec::depthwise_separable(8, 16, 3).with_norm(false)).unwrap();
        assert_eq!(ds.params().iter().map(|p| p.numel()).sum::<usize>(), 224);
        let ds_norm = Layer::<f32>::build("b", LayerSpec::depthwise_separable(8, 16, 3)).unwrap();
        assert_eq!(
            ds_norm.params().iter().map(|p| p.numel()).sum::<usize>(),
            224 + 2 * 8 + 2 * 16
        );
        let pw = Layer::<f32>::build("p", LayerSpec::conv2d(2, 3, 1, 1)).unwrap();
        assert_eq!(pw.params().iter().map(|p| p.numel()).sum::<usize>(), 9);
    }

    #[test]
    fn mac_counting_rules() {
        let pw = Layer::<f32>::build("p", LayerSpec::conv2d(2, 3, 1, 1)).unwrap();
        assert_eq!(pw.macs((1, 1)).unwrap(), 6);
        // depthwise only: a 3x3 conv with groups == C
        let mut dw = Graph::<f32>::new();
        let mut l = Layer::build("d", LayerSpec::depthwise_separable(2, 2, 3).with_norm(false)).unwrap();
        l.nodes.truncate(1);
        dw.push(l, false);
        assert_eq!(count_macs(&dw, &[1, 2, 2, 2]).unwrap(), 72);
    }

    #[test]
    fn pointwise_backward_is_weight_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Layer::<f64>::build("p", LayerSpec::conv2d(2, 3, 1, 1)).unwrap();
        randomize(l.params_mut(), &mut rng);
        let x = Tensor::from_fn([1, 2, 2, 2], |_| rng.random::<f64>());
        let mut cache = LayerCache::default();
        l.forward(&[&x], Some(&mut cache)).unwrap();
        let g = Tensor::from_fn([1, 3, 2, 2], |_| rng.random::<f64>());
        let gx = l.backward(&g, &cache).unwrap().remove(0);
        let Node::Conv(c) = &l.nodes[0] else { unreachable!() };
        let w = c.weight.value.data();
        for pix in 0..4 {
            for ci in 0..2 {
                let expect: f64 = (0..3).map(|co| w[co * 2 + ci] * g.data()[co * 4 + pix]).sum();
                assert!((gx.data()[ci * 4 + pix] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut l = Layer::<f64>::build("a", LayerSpec::activation(1, Activation::Relu)).unwrap();
        let x = Tensor::new([1, 1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let mut cache = LayerCache::default();
        l.forward(&[&x], Some(&mut cache)).unwrap();
        let gx = l.backward(&Tensor::full([1, 1, 1, 3], 1.0), &cache).unwrap().remove(0);
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_backward_reconstructs_grad() {
        let mut l = Layer::<f64>::build("c", LayerSpec::concat_skip(2, 3)).unwrap();
        let a = Tensor::zeros([2, 2, 3, 3]);
        let b = Tensor::zeros([2, 3, 3, 3]);
        let mut cache = LayerCache::default();
        l.forward(&[&a, &b], Some(&mut cache)).unwrap();
        let g = Tensor::from_fn([2, 5, 3, 3], |i| i as f64 * 0.5);
        let parts = l.backward(&g, &cache).unwrap();
        assert_eq!(concat_channels(&parts[0], &parts[1]).unwrap(), g);
    }

    #[test]
    fn every_layer_kind_passes_gradcheck() {
        // (spec, input shape, linear in every single coordinate)
        let specs = [
            (LayerSpec::conv2d(3, 4, 3, 1), [1, 3, 5, 5], true),
            (LayerSpec::conv2d(2, 3, 1, 1), [1, 2, 3, 3], true),
            (LayerSpec::conv2d(3, 2, 3, 2).with_norm(true).with_activation(Activation::Relu), [2, 3, 6, 6], false),
            (LayerSpec::depthwise_separable(2, 3, 3), [1, 2, 4, 4], false),
            (LayerSpec::downsample(2, 3, 3), [1, 2, 6, 6], false),
            (LayerSpec::upsample(3, 2), [1, 3, 3, 3], false),
            (LayerSpec::upsample(3, 2).with_activation(Activation::None), [1, 3, 3, 3], true),
            (LayerSpec::norm(3), [2, 3, 3, 2], true),
            (LayerSpec::activation(3, Activation::Relu), [1, 3, 3, 3], false),
            (LayerSpec::sigmoid_head(2), [1, 2, 3, 3], false),
        ];
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (spec, shape, linear) in &specs {
                let mut layer = Layer::<f64>::build("l", spec.clone()).unwrap();
                randomize(layer.params_mut(), &mut rng);
                let mut g = graph_of(layer);
                let x = Tensor::from_fn(shape.to_vec(), |_| rng.random::<f64>() * 2.0 - 1.0);
                let rep = gradient_check(&mut g, std::slice::from_ref(&x), 1e-5).unwrap();
                assert!(rep.max_rel_error < 1e-4, "{:?} seed {seed}: {rep:?}", spec.kind);
                if *linear {
                    let rep = gradient_check(&mut g, &[x], 1e-3).unwrap();
                    assert!(rep.max_rel_error < 1e-6, "{:?} seed {seed}: {rep:?}", spec.kind);
                }
            }
        }
    }

    #[test]
    fn skip_graph_gradcheck() {
        // conv -> (save) -> downsample -> upsample -> concat -> conv
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        g.push(Layer::build("stem", LayerSpec::conv2d(2, 3, 3, 1).with_activation(Activation::Relu)).unwrap(), true);
        g.push(Layer::build("down", LayerSpec::downsample(3, 4, 3)).unwrap(), false);
        g.push(Layer::build("up", LayerSpec::upsample(4, 3)).unwrap(), false);
        g.push(Layer::build("cat", LayerSpec::concat_skip(3, 3)).unwrap(), false);
        g.push(Layer::build("head", LayerSpec::conv2d(6, 1, 1, 1)).unwrap(), false);
        randomize(g.params_mut(), &mut rng);
        let x = Tensor::from_fn([1, 2, 6, 6], |_| rng.random::<f64>() - 0.5);
        let rep = gradient_check(&mut g, &[x], 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn infer_shape_catches_unbalanced_skips() {
        let mut g = Graph::<f32>::new();
        g.push(Layer::build("a", LayerSpec::conv2d(1, 2, 1, 1)).unwrap(), true);
        assert!(g.infer_shape(&[1, 1, 4, 4]).is_err());
        g.push(Layer::build("d", LayerSpec::downsample(2, 2, 3)).unwrap(), false);
        g.push(Layer::build("c", LayerSpec::concat_skip(2, 2)).unwrap(), false);
        assert!(g.infer_shape(&[1, 1, 4, 4]).is_err());
    }
}
