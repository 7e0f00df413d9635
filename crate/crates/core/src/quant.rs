//! Static post-training INT8 quantization.
//!
//! Norms are folded into the preceding convolution and ReLUs fused into it.
//! Weights are symmetric per output channel (codes in [-127, 127]), activations
//! asymmetric per tensor with min/max calibration, biases int32 at scale
//! `s_in * s_w`. Convolutions accumulate in int32 and requantize with a float
//! multiplier `s_in * s_w / s_out`; ReLU is a clamp at the output zero point.
//!
//! Activation edges are numbered in execution order: edge 0 is the network
//! input, every convolution and concatenation produces a new edge, and a
//! nearest-neighbour resize reuses its input edge.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::ptsr::{decode_tensor, encode_tensor};
use crate::io::{read_file, write_file, Reader};
use crate::kernels::{self, conv2d_forward_raw};
use crate::model::{Model, ModelConfig};
use crate::nn::{LayerKind, Node};
use crate::tensor::{concat_channels, resize_nearest_x2, AnyTensor, ConvParams, Tensor};

pub const MAGIC: &[u8; 4] = b"PQNT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i8,
}

impl QuantParams {
    pub fn quantize(&self, x: f32) -> i8 {
        let q = (x as f64 / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        self.dequantize_f64(q) as f32
    }

    pub fn dequantize_f64(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point as i32) as f64 * self.scale as f64
    }

    /// Asymmetric parameters covering `[min, max]` extended to include 0, so
    /// real zero (and thus zero padding) is exactly representable.
    pub fn from_range(min: f32, max: f32) -> Option<Self> {
        let (lo, hi) = (min.min(0.0) as f64, max.max(0.0) as f64);
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return None;
        }
        let exact = (hi - lo) / 255.0;
        let mut scale = exact as f32;
        // round up so 255 steps always span the range
        if (scale as f64) < exact {
            scale = f32::from_bits(scale.to_bits() + 1);
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return None;
        }
        let zp = (-128.0 - lo / scale as f64).round().clamp(-128.0, 127.0) as i8;
        Some(QuantParams { scale, zero_point: zp })
    }
}

/// Running min/max of one activation edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f32,
    pub max: f32,
}

impl Range {
    fn empty() -> Self {
        Range {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
        }
    }

    fn observe(&mut self, data: &[f32]) {
        for &v in data {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldedConv {
    /// e.g. `enc0.block0.dw`
    pub name: String,
    pub weight: Tensor<f32>,
    pub bias: Vec<f32>,
    pub params: ConvParams,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op<C> {
    Conv(C),
    Resize,
    /// Appends the skip edge to the main edge along channels.
    Concat { skip: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step<C> {
    pub op: Op<C>,
    pub input: usize,
    pub output: usize,
}

/// Float network with norms folded and ReLUs fused; the calibration target.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedNet {
    pub config: ModelConfig,
    pub steps: Vec<Step<FoldedConv>>,
    /// Name of the op producing each edge (`input` for edge 0).
    pub edge_names: Vec<String>,
}

impl FoldedNet {
    pub fn fold(model: &Model<f32>) -> Result<Self> {
        let mut steps: Vec<Step<FoldedConv>> = Vec::new();
        let mut edge_names = vec!["input".to_string()];
        let mut cur = 0usize;
        let mut skips: Vec<usize> = Vec::new();
        for gn in &model.graph.nodes {
            let layer = &gn.layer;
            if layer.spec.kind == LayerKind::ConcatSkip {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::Shape(format!("layer {}: skip stack is empty", layer.name)))?;
                edge_names.push(layer.name.clone());
                let out = edge_names.len() - 1;
                steps.push(Step { op: Op::Concat { skip }, input: cur, output: out });
                cur = out;
            }
            for node in layer.nodes() {
                let last_conv = match steps.last_mut() {
                    Some(Step { op: Op::Conv(c), output, .. }) if *output == cur => Some(c),
                    _ => None,
                };
                match node {
                    Node::Conv(c) => {
                        let name = c.weight.name.trim_end_matches(".weight").to_string();
                        edge_names.push(name.clone());
                        let out = edge_names.len() - 1;
                        steps.push(Step {
                            op: Op::Conv(FoldedConv {
                                name,
                                weight: c.weight.value.clone(),
                                bias: c.bias.value.data().to_vec(),
                                params: c.params,
                                relu: false,
                            }),
                            input: cur,
                            output: out,
                        });
                        cur = out;
                    }
                    Node::Norm(n) => {
                        let conv = last_conv.filter(|c| !c.relu).ok_or_else(|| {
                            Error::Config(format!("layer {}: norm not directly after a conv cannot be folded", layer.name))
                        })?;
                        let per = conv.weight.numel() / conv.bias.len();
                        let (gm, bt) = (n.gamma.value.data(), n.beta.value.data());
                        for (o, chunk) in conv.weight.data_mut().chunks_exact_mut(per).enumerate() {
                            chunk.iter_mut().for_each(|w| *w *= gm[o]);
                            conv.bias[o] = gm[o] * conv.bias[o] + bt[o];
                        }
                    }
                    Node::Relu => {
                        let conv = last_conv.ok_or_else(|| {
                            Error::Config(format!("layer {}: ReLU not after a conv cannot be fused", layer.name))
                        })?;
                        conv.relu = true;
                    }
                    Node::Resize => steps.push(Step { op: Op::Resize, input: cur, output: cur }),
                    Node::Sigmoid => {
                        return Err(Error::Config(format!("layer {}: sigmoid is not quantizable", layer.name)))
                    }
                }
            }
            if gn.save_skip {
                skips.push(cur);
            }
        }
        Ok(FoldedNet {
            config: model.config.clone(),
            steps,
            edge_names,
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edge_names.len()
    }

    pub fn output_edge(&self) -> usize {
        self.steps.last().map_or(0, |s| s.output)
    }

    /// Float forward; `observe(edge, values)` sees every edge once per pass.
    pub fn forward_observed(&self, x: &Tensor<f32>, observe: &mut dyn FnMut(usize, &[f32])) -> Result<Tensor<f32>> {
        let mut edges: Vec<Option<Tensor<f32>>> = vec![None; self.edge_count()];
        observe(0, x.data());
        edges[0] = Some(x.clone());
        for step in &self.steps {
            let input = edges[step.input].as_ref().expect("edge computed");
            let y = match &step.op {
                Op::Conv(c) => {
                    let b = Tensor::new([c.bias.len()], c.bias.clone())?;
                    let mut y = kernels::conv2d(input, &c.weight, Some(&b), c.params)?;
                    if c.relu {
                        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    y
                }
                Op::Resize => resize_nearest_x2(input)?,
                Op::Concat { skip } => concat_channels(input, edges[*skip].as_ref().expect("edge computed"))?,
            };
            if !matches!(step.op, Op::Resize) {
                observe(step.output, y.data());
            }
            edges[step.output] = Some(y);
        }
        Ok(edges[self.output_edge()].take().expect("output edge"))
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_observed(x, &mut |_, _| {})
    }

    pub fn macs(&self) -> Result<u64> {
        let s = self.config.input_size;
        let mut hw: Vec<(usize, usize)> = vec![(0, 0); self.edge_count()];
        hw[0] = (s, s);
        let mut total = 0;
        for step in &self.steps {
            let (h, w) = hw[step.input];
            hw[step.output] = match &step.op {
                Op::Conv(c) => {
                    let ws = c.weight.shape();
                    let cout = ws[0];
                    let ho = (h + 2 * c.params.pad - ws[2]) / c.params.stride + 1;
                    let wo = (w + 2 * c.params.pad - ws[3]) / c.params.stride + 1;
                    total += (ws[1] * ws[2] * ws[3] * cout * ho * wo) as u64;
                    (ho, wo)
                }
                Op::Resize => (2 * h, 2 * w),
                Op::Concat { .. } => (h, w),
            };
        }
        Ok(total)
    }
}

/// Per-edge min/max over the calibration inputs.
pub fn calibrate(net: &FoldedNet, samples: &[Tensor<f32>]) -> Result<Vec<Range>> {
    if samples.is_empty() {
        return Err(Error::Config("calibration needs at least one sample".into()));
    }
    let mut ranges = vec![Range::empty(); net.edge_count()];
    for x in samples {
        net.forward_observed(x, &mut |e, d| ranges[e].observe(d))?;
    }
    for (e, r) in ranges.iter().enumerate() {
        if !r.min.is_finite() || !r.max.is_finite() {
            return Err(Error::Numeric(format!(
                "edge {e} ({}) has a non-finite calibration range [{}, {}]",
                net.edge_names[e], r.min, r.max
            )));
        }
    }
    Ok(ranges)
}

/// What to do with an edge whose range (after including 0) is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegeneratePolicy {
    Error,
    /// Scale 1.0, zero point 0, and a logged warning.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedConv {
    pub name: String,
    pub weight: Tensor<i8>,
    /// Per output channel.
    pub weight_scales: Vec<f32>,
    pub bias: Vec<i32>,
    pub params: ConvParams,
    pub relu: bool,
}

impl QuantizedConv {
    /// Largest possible |accumulator| per output channel.
    fn accumulator_bound(&self) -> i64 {
        let per = self.weight.numel() / self.bias.len();
        self.weight
            .data()
            .chunks_exact(per)
            .zip(&self.bias)
            .map(|(w, &b)| 255 * w.iter().map(|&q| (q as i64).abs()).sum::<i64>() + (b as i64).abs())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub edges: Vec<QuantParams>,
    pub steps: Vec<Step<QuantizedConv>>,
}

/// Symmetric per-channel weight quantization. An all-zero channel gets scale 1.
pub fn quantize_weights(w: &Tensor<f32>) -> (Tensor<i8>, Vec<f32>) {
    let cout = w.shape()[0];
    let per = w.numel() / cout;
    let mut scales = Vec::with_capacity(cout);
    let mut q = Vec::with_capacity(w.numel());
    for ch in w.data().chunks_exact(per) {
        let m = ch.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        let s = if m > 0.0 { m / 127.0 } else { 1.0 };
        scales.push(s);
        q.extend(ch.iter().map(|&v| ((v as f64 / s as f64).round().clamp(-127.0, 127.0)) as i8));
    }
    (Tensor::new(w.shape().to_vec(), q).expect("same shape"), scales)
}

pub fn quantize_model(net: &FoldedNet, ranges: &[Range], policy: DegeneratePolicy) -> Result<QuantizedModel> {
    if ranges.len() != net.edge_count() {
        return Err(Error::Config(format!(
            "{} ranges for {} activation edges",
            ranges.len(),
            net.edge_count()
        )));
    }
    let mut edges = Vec::with_capacity(ranges.len());
    for (e, r) in ranges.iter().enumerate() {
        match (QuantParams::from_range(r.min, r.max), policy) {
            (Some(q), _) => edges.push(q),
            (None, DegeneratePolicy::Error) => {
                return Err(Error::DegenerateRange {
                    edge: e,
                    name: net.edge_names[e].clone(),
                })
            }
            (None, DegeneratePolicy::Fallback) => {
                log::warn!("edge {e} ({}) has a degenerate range; using scale 1.0", net.edge_names[e]);
                edges.push(QuantParams { scale: 1.0, zero_point: 0 });
            }
        }
    }
    let mut steps = Vec::with_capacity(net.steps.len());
    for s in &net.steps {
        let op = match &s.op {
            Op::Conv(c) => {
                let (weight, weight_scales) = quantize_weights(&c.weight);
                let s_in = edges[s.input].scale as f64;
                let mut bias = Vec::with_capacity(c.bias.len());
                for (o, &b) in c.bias.iter().enumerate() {
                    let q = (b as f64 / (s_in * weight_scales[o] as f64)).round();
                    if q.abs() > i32::MAX as f64 {
                        return Err(Error::Overflow(format!("bias of {} channel {o} does not fit in int32", c.name)));
                    }
                    bias.push(q as i32);
                }
                Op::Conv(QuantizedConv {
                    name: c.name.clone(),
                    weight,
                    weight_scales,
                    bias,
                    params: c.params,
                    relu: c.relu,
                })
            }
            Op::Resize => Op::Resize,
            Op::Concat { skip } => Op::Concat { skip: *skip },
        };
        steps.push(Step { op, input: s.input, output: s.output });
    }
    Ok(QuantizedModel {
        config: net.config.clone(),
        edges,
        steps,
    })
}

fn requantize(q: &[i8], from: QuantParams, to: QuantParams) -> Vec<i8> {
    let m = from.scale as f64 / to.scale as f64;
    q.iter()
        .map(|&v| {
            let r = ((v as i32 - from.zero_point as i32) as f64 * m).round() + to.zero_point as f64;
            r.clamp(-128.0, 127.0) as i8
        })
        .collect()
}

/// Integer convolution: `(q_in - zp_in) * q_w` summed in int32 plus the int32
/// bias, then requantized to the output edge.
pub fn quantized_conv(x: &Tensor<i8>, conv: &QuantizedConv, qin: QuantParams, qout: QuantParams) -> Result<Tensor<i8>> {
    let zp = qin.zero_point as i32;
    let acc: Vec<i32>;
    let shape;
    if conv.accumulator_bound() <= i32::MAX as i64 {
        let xin: Vec<i32> = x.data().iter().map(|&q| q as i32 - zp).collect();
        let w: Vec<i32> = conv.weight.data().iter().map(|&q| q as i32).collect();
        (acc, shape) = conv2d_forward_raw(&xin, x.shape(), &w, conv.weight.shape(), Some(&conv.bias), conv.params)?;
    } else {
        let xin: Vec<i64> = x.data().iter().map(|&q| (q as i32 - zp) as i64).collect();
        let w: Vec<i64> = conv.weight.data().iter().map(|&q| q as i64).collect();
        let b: Vec<i64> = conv.bias.iter().map(|&v| v as i64).collect();
        let (wide, s) = conv2d_forward_raw(&xin, x.shape(), &w, conv.weight.shape(), Some(&b), conv.params)?;
        acc = wide
            .iter()
            .map(|&v| i32::try_from(v).map_err(|_| Error::Overflow(format!("conv {} accumulator {v}", conv.name))))
            .collect::<Result<_>>()?;
        shape = s;
    }
    let plane = shape[2] * shape[3];
    let lo = if conv.relu { qout.zero_point as f64 } else { -128.0 };
    let mults: Vec<f64> = conv
        .weight_scales
        .iter()
        .map(|&sw| qin.scale as f64 * sw as f64 / qout.scale as f64)
        .collect();
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let m = mults[(i / plane) % shape[1]];
            ((a as f64 * m).round() + qout.zero_point as f64).clamp(lo, 127.0) as i8
        })
        .collect();
    Tensor::new(shape, data)
}

impl QuantizedModel {
    pub fn output_edge(&self) -> usize {
        self.steps.last().map_or(0, |s| s.output)
    }

    pub fn input_params(&self) -> QuantParams {
        self.edges[0]
    }

    /// Float crop in, float logits out; everything between is integer.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let q0 = self.edges[0];
        let xq = x.map(|v| q0.quantize(v));
        let mut edges: Vec<Option<Tensor<i8>>> = vec![None; self.edges.len()];
        edges[0] = Some(xq);
        for step in &self.steps {
            let input = edges[step.input].as_ref().expect("edge computed");
            let (qin, qout) = (self.edges[step.input], self.edges[step.output]);
            let y = match &step.op {
                Op::Conv(c) => quantized_conv(input, c, qin, qout)?,
                Op::Resize => resize_nearest_x2(input)?,
                Op::Concat { skip } => {
                    let sk = edges[*skip].as_ref().expect("edge computed");
                    let a = Tensor::new(input.shape().to_vec(), requantize(input.data(), qin, qout))?;
                    let b = Tensor::new(sk.shape().to_vec(), requantize(sk.data(), self.edges[*skip], qout))?;
                    concat_channels(&a, &b)?
                }
            };
            edges[step.output] = Some(y);
        }
        let out = self.output_edge();
        let qo = self.edges[out];
        Ok(edges[out].take().expect("output edge").map(|q| qo.dequantize(q)))
    }

    pub fn convs(&self) -> impl Iterator<Item = &QuantizedConv> {
        self.steps.iter().filter_map(|s| match &s.op {
            Op::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// `sum(int8 elements) + 4 * sum(int32 elements)`.
    pub fn payload_bytes(&self) -> usize {
        self.convs().map(|c| c.weight.numel() + 4 * c.bias.len()).sum()
    }

    pub fn macs(&self) -> u64 {
        let s = self.config.input_size;
        let mut hw = vec![(0, 0); self.edges.len()];
        hw[0] = (s, s);
        let mut total = 0;
        for step in &self.steps {
            let (h, w) = hw[step.input];
            hw[step.output] = match &step.op {
                Op::Conv(c) => {
                    let ws = c.weight.shape();
                    let ho = (h + 2 * c.params.pad - ws[2]) / c.params.stride + 1;
                    let wo = (w + 2 * c.params.pad - ws[3]) / c.params.stride + 1;
                    total += (ws[1] * ws[2] * ws[3] * ws[0] * ho * wo) as u64;
                    (ho, wo)
                }
                Op::Resize => (2 * h, 2 * w),
                Op::Concat { .. } => (h, w),
            };
        }
        total
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.edges.len() as u32).to_le_bytes());
        for e in &self.edges {
            out.extend_from_slice(&e.scale.to_le_bytes());
            out.push(e.zero_point as u8);
        }
        let convs: Vec<&QuantizedConv> = self.convs().collect();
        out.extend_from_slice(&(convs.len() as u32).to_le_bytes());
        for c in convs {
            out.extend_from_slice(&(c.name.len() as u16).to_le_bytes());
            out.extend_from_slice(c.name.as_bytes());
            out.push(c.relu as u8);
            encode_tensor(&AnyTensor::I8(c.weight.clone()), &mut out);
            encode_tensor(
                &AnyTensor::F32(Tensor::new([c.weight_scales.len()], c.weight_scales.clone()).expect("1-d")),
                &mut out,
            );
            encode_tensor(&AnyTensor::I32(Tensor::new([c.bias.len()], c.bias.clone()).expect("1-d")), &mut out);
        }
        out
    }

    /// The op structure is rebuilt from the stored config; stored layers must
    /// match it name for name and shape for shape.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let at = r.offset();
        let v = r.u8("version")?;
        if v != VERSION {
            return Err(Error::format(at, format!("unsupported quantized model version {v}")));
        }
        let len = r.u32("config length")? as usize;
        let at = r.offset();
        let text = r.string(len, "config block")?;
        let config = ModelConfig::parse(&text).map_err(|e| Error::format(at, format!("config block: {e}")))?;
        let skeleton = FoldedNet::fold(&Model::<f32>::build(&config)?)?;

        let at = r.offset();
        let n_edges = r.u32("edge count")? as usize;
        if n_edges != skeleton.edge_count() {
            return Err(Error::format(
                at,
                format!("{n_edges} edges stored, config implies {}", skeleton.edge_count()),
            ));
        }
        let mut edges = Vec::with_capacity(n_edges);
        for e in 0..n_edges {
            let at = r.offset();
            let scale = r.f32("edge scale")?;
            let zero_point = r.i8("edge zero point")?;
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::format(at, format!("edge {e} has invalid scale {scale}")));
            }
            edges.push(QuantParams { scale, zero_point });
        }
        let at = r.offset();
        let n_convs = r.u32("layer count")? as usize;
        let expected = skeleton.steps.iter().filter(|s| matches!(s.op, Op::Conv(_))).count();
        if n_convs != expected {
            return Err(Error::format(at, format!("{n_convs} layers stored, config implies {expected}")));
        }
        let mut steps = Vec::with_capacity(skeleton.steps.len());
        for s in &skeleton.steps {
            let op = match &s.op {
                Op::Conv(fc) => {
                    let at = r.offset();
                    let n = r.u16("name length")? as usize;
                    let name = r.string(n, "layer name")?;
                    if name != fc.name {
                        return Err(Error::format(at, format!("layer {name:?} found where {:?} was expected", fc.name)));
                    }
                    let relu = r.u8("relu flag")? != 0;
                    let at = r.offset();
                    let weight = decode_tensor(&mut r)?.into_i8().map_err(|e| Error::format(at, e.to_string()))?;
                    let at2 = r.offset();
                    let scales = decode_tensor(&mut r)?.into_f32().map_err(|e| Error::format(at2, e.to_string()))?;
                    let at3 = r.offset();
                    let bias = decode_tensor(&mut r)?.into_i32().map_err(|e| Error::format(at3, e.to_string()))?;
                    let cout = fc.weight.shape()[0];
                    if weight.shape() != fc.weight.shape() || scales.numel() != cout || bias.numel() != cout {
                        return Err(Error::format(at, format!("layer {name:?} has mismatched tensor shapes")));
                    }
                    Op::Conv(QuantizedConv {
                        name,
                        weight,
                        weight_scales: scales.into_data(),
                        bias: bias.into_data(),
                        params: fc.params,
                        relu,
                    })
                }
                Op::Resize => Op::Resize,
                Op::Concat { skip } => Op::Concat { skip: *skip },
            };
            steps.push(Step { op, input: s.input, output: s.output });
        }
        r.finish()?;
        Ok(QuantizedModel { config, edges, steps })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }
}

impl crate::eval::Segmenter for QuantizedModel {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn logits(&self, crop: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = self.config.input_size;
        if crop.shape() != [1, 3, s, s] {
            return Err(Error::Shape(format!("quantized model expects 1x3x{s}x{s}, got {:?}", crop.shape())));
        }
        self.forward(crop)
    }
}

/// Folds, calibrates and quantizes in one go.
pub fn quantize_trained(model: &Model<f32>, calib: &[Tensor<f32>], policy: DegeneratePolicy) -> Result<QuantizedModel> {
    let net = FoldedNet::fold(model)?;
    let ranges = calibrate(&net, calib)?;
    quantize_model(&net, &ranges, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{desk_config, ModelConfig};
    use crate::nn::Activation;
    use crate::train::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model<f32> {
        let cfg = ModelConfig {
            input_size: 16,
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            head_channels: 4,
            activation: Activation::Relu,
            norm: true,
        };
        let mut m = Model::<f32>::build(&cfg).unwrap();
        init_params(&mut m, 1);
        // non-trivial norms and biases so folding matters
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in m.params_mut() {
            if !p.name.ends_with(".weight") {
                for v in p.value.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        m
    }

    fn inputs(n: usize, side: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::from_fn(vec![1, 3, side, side], |_| rng.random::<f32>())).collect()
    }

    #[test]
    fn weight_quantization_examples() {
        let w = Tensor::new([2, 1, 1, 2], vec![1.0f32, 0.5, 0.0, 0.0]).unwrap();
        let (q, s) = quantize_weights(&w);
        assert_eq!(s, vec![1.0 / 127.0, 1.0]);
        assert_eq!(q.data(), &[127, 64, 0, 0]);
        let deq = q.data()[1] as f32 * s[0];
        assert!((deq - 0.50394).abs() < 1e-5);
    }

    #[test]
    fn weight_error_within_half_step() {
        let m = Model::<f32>::build(&desk_config()).map(|mut m| {
            init_params(&mut m, 7);
            m
        });
        let net = FoldedNet::fold(&m.unwrap()).unwrap();
        for s in &net.steps {
            if let Op::Conv(c) = &s.op {
                let (q, scales) = quantize_weights(&c.weight);
                let per = c.weight.numel() / scales.len();
                for (i, (&w, &qv)) in c.weight.data().iter().zip(q.data()).enumerate() {
                    let sc = scales[i / per];
                    assert!((qv as f32 * sc - w).abs() <= sc / 2.0 * (1.0 + 1e-6), "{}", c.name);
                }
            }
        }
    }

    #[test]
    fn activation_roundtrip_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = rng.random_range(-50.0f32..50.0);
            let b = a + rng.random_range(0.01f32..80.0);
            let q = QuantParams::from_range(a, b).unwrap();
            let (lo, hi) = (a.min(0.0), b.max(0.0));
            assert_eq!(q.dequantize(q.quantize(0.0)), 0.0);
            for k in 0..=100 {
                let x = lo + (hi - lo) * k as f32 / 100.0;
                let err = (q.dequantize_f64(q.quantize(x)) - x as f64).abs();
                assert!(err <= q.scale as f64 / 2.0 + 1e-9, "{x} in [{lo},{hi}]: {err}");
            }
        }
        assert!(QuantParams::from_range(0.0, 0.0).is_none());
    }

    #[test]
    fn folding_preserves_function() {
        let m = small();
        let net = FoldedNet::fold(&m).unwrap();
        for x in inputs(3, 16, 5) {
            let a = m.forward(&x, None).unwrap();
            let b = net.forward(&x).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() <= 1e-4 * (1.0 + u.abs()));
            }
        }
        assert_eq!(net.macs().unwrap(), m.macs());
    }

    #[test]
    fn calibration_ranges() {
        let net = FoldedNet::fold(&small()).unwrap();
        let xs = inputs(2, 16, 6);
        assert!(matches!(calibrate(&net, &[]), Err(Error::Config(_))));
        let one = calibrate(&net, &xs[..1]).unwrap();
        let mut want = vec![Range::empty(); net.edge_count()];
        net.forward_observed(&xs[0], &mut |e, d| want[e].observe(d)).unwrap();
        assert_eq!(one, want);
        let (x0_min, x0_max) = xs[0].data().iter().fold((f32::MAX, f32::MIN), |a, &v| (a.0.min(v), a.1.max(v)));
        assert_eq!((one[0].min, one[0].max), (x0_min, x0_max));
        let two = calibrate(&net, &xs).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!(b.min <= a.min && b.max >= a.max);
        }
    }

    fn conv(weight: Tensor<f32>, bias: Vec<f32>, relu: bool, qin: QuantParams) -> QuantizedConv {
        let (w, scales) = quantize_weights(&weight);
        let bias = bias
            .iter()
            .zip(&scales)
            .map(|(&b, &s)| (b as f64 / (qin.scale as f64 * s as f64)).round() as i32)
            .collect();
        QuantizedConv {
            name: "c".into(),
            weight: w,
            weight_scales: scales,
            bias,
            params: ConvParams::new(1, weight.shape()[2] / 2, 1),
            relu,
        }
    }

    #[test]
    fn identity_conv_within_one_step() {
        let q = QuantParams::from_range(-4.0, 4.0).unwrap();
        let c = conv(Tensor::full([1, 1, 1, 1], 1.0), vec![0.0], false, q);
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f32 * 0.5 - 3.9);
        let xq = x.map(|v| q.quantize(v));
        let y = quantized_conv(&xq, &c, q, q).unwrap();
        for (a, &b) in x.data().iter().zip(y.data()) {
            assert!((q.dequantize(b) - a).abs() <= q.scale);
        }
    }

    #[test]
    fn grid_inputs_match_float_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let qin = QuantParams { scale: 0.05, zero_point: -10 };
        let qout = QuantParams { scale: 0.1, zero_point: 3 };
        // weights on the per-channel grid: w = k * max / 127
        let weight = Tensor::from_fn(vec![3, 2, 3, 3], |i| {
            let k = if i % 18 == 0 { 127 } else { rng.random_range(-127..=127) };
            k as f32 * 0.02 / 127.0
        });
        let bias = vec![0.1f32, -0.05, 0.0];
        let c = conv(weight.clone(), bias.clone(), true, qin);
        let xq = Tensor::from_fn(vec![1, 2, 5, 5], |_| rng.random_range(-128i32..=127) as i8);
        let xf = xq.map(|q| qin.dequantize(q));
        let b = Tensor::new([3], bias).unwrap();
        let want = kernels::conv2d(&xf, &weight, Some(&b), c.params).unwrap();
        let got = quantized_conv(&xq, &c, qin, qout).unwrap();
        for (&w, &g) in want.data().iter().zip(got.data()) {
            let expected = w.max(0.0).min(qout.dequantize(127));
            assert!((qout.dequantize(g) - expected).abs() <= qout.scale, "{w} vs {}", qout.dequantize(g));
        }
    }

    #[test]
    fn zero_input_gives_bias_path() {
        let q = QuantParams { scale: 0.02, zero_point: -5 };
        let qout = QuantParams { scale: 0.03, zero_point: 7 };
        let c = conv(Tensor::full([2, 3, 1, 1], 0.3), vec![0.25, -0.4], false, q);
        let x = Tensor::full([1, 3, 2, 2], q.quantize(0.0));
        let y = quantized_conv(&x, &c, q, qout).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let o = i / 4;
            let m = q.scale as f64 * c.weight_scales[o] as f64 / qout.scale as f64;
            let want = ((c.bias[o] as f64 * m).round() + qout.zero_point as f64).clamp(-128.0, 127.0) as i8;
            assert_eq!(v, want);
        }
    }

    #[test]
    fn integer_accumulation_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cin, cout, h) = (4, 3, 6);
        let x: Vec<i32> = (0..cin * h * h).map(|_| rng.random_range(-255..=255)).collect();
        let w: Vec<i32> = (0..cout * cin * 9).map(|_| rng.random_range(-127..=127)).collect();
        let b: Vec<i32> = (0..cout).map(|_| rng.random_range(-10000..10000)).collect();
        let p = ConvParams::new(1, 1, 1);
        let (fast, _) = conv2d_forward_raw(&x, &[1, cin, h, h], &w, &[cout, cin, 3, 3], Some(&b), p).unwrap();
        // reverse traversal: taps last-to-first, channels last-to-first
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..h {
                    let mut acc = 0i32;
                    for ci in (0..cin).rev() {
                        for t in (0..9).rev() {
                            let (iy, ix) = (y as i64 + t as i64 / 3 - 1, xx as i64 + t as i64 % 3 - 1);
                            if (0..h as i64).contains(&iy) && (0..h as i64).contains(&ix) {
                                acc += w[(o * cin + ci) * 9 + t] * x[(ci * h + iy as usize) * h + ix as usize];
                            }
                        }
                    }
                    assert_eq!(fast[(o * h + y) * h + xx], acc + b[o]);
                }
            }
        }
    }

    #[test]
    fn accumulator_overflow_is_an_error() {
        let q = QuantParams { scale: 1.0, zero_point: -128 };
        let mut c = conv(Tensor::full([1, 1, 1, 1], 1.0), vec![0.0], false, q);
        c.bias = vec![i32::MAX - 10];
        let x = Tensor::full([1, 1, 2, 2], 127i8);
        assert!(matches!(quantized_conv(&x, &c, q, q), Err(Error::Overflow(_))));
        let x = Tensor::full([1, 1, 2, 2], -128i8);
        assert!(quantized_conv(&x, &c, q, q).is_ok());
    }

    #[test]
    fn degenerate_edges() {
        let net = FoldedNet::fold(&Model::<f32>::build(&small().config).unwrap()).unwrap();
        let ranges = calibrate(&net, &inputs(1, 16, 1)).unwrap();
        // zero weights: every conv edge is identically zero
        let err = quantize_model(&net, &ranges, DegeneratePolicy::Error).unwrap_err();
        assert!(matches!(err, Error::DegenerateRange { edge: 1, .. }), "{err}");
        let q = quantize_model(&net, &ranges, DegeneratePolicy::Fallback).unwrap();
        assert_eq!(q.edges[1], QuantParams { scale: 1.0, zero_point: 0 });
    }

    #[test]
    fn serialization_and_counts() {
        let m = small();
        let q = quantize_trained(&m, &inputs(4, 16, 3), DegeneratePolicy::Error).unwrap();
        let b = q.to_bytes();
        let back = QuantizedModel::from_bytes(&b).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.to_bytes(), b);
        let int8: usize = q.convs().map(|c| c.weight.numel()).sum();
        let int32: usize = q.convs().map(|c| c.bias.len()).sum();
        assert_eq!(q.payload_bytes(), int8 + 4 * int32);
        assert_eq!(q.macs(), m.macs());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(QuantizedModel::from_bytes(&bad).is_err());
        assert!(QuantizedModel::from_bytes(&b[..b.len() - 2]).is_err());
    }

    #[test]
    fn quantized_close_to_float() {
        let m = small();
        let xs = inputs(8, 16, 10);
        let q = quantize_trained(&m, &xs, DegeneratePolicy::Error).unwrap();
        let (mut diff, mut mag) = (0.0f64, 0.0f64);
        for x in &xs {
            let a = m.forward(x, None).unwrap();
            let b = q.forward(x).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                diff += (u - v).abs() as f64;
                mag += u.abs() as f64;
            }
        }
        assert!(diff < 0.1 * mag, "{diff} vs {mag}");
    }
}
