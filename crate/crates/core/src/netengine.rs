//! A small deterministic CNN that realizes a cell as a function at
//! initialization.
//!
//! The network is stem → stages of cell replicas (with a stride-2
//! conv-BN-ReLU between stages) → global average pool → linear classifier.
//! Cell edges map to: NONE → nothing, SKIP → identity, convolutions →
//! conv-BN-ReLU, pooling → 3x3 average pool (stride 1, padding excluded
//! from the divisor). Batch norm has unit scale, zero shift, and always
//! normalizes with the statistics of the current batch.
//!
//! The network is compiled once into a flat instruction list. A forward
//! pass records every intermediate tensor; the backward pass walks the
//! list in reverse and can produce gradients with respect to the input,
//! the parameters, or both.

use std::collections::HashSet;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{CellSpec, OpKind, EDGES, NUM_NODES};

const BN_EPS: f64 = 1e-5;

/// ChaCha stream ids reserved for input generation.
pub const STREAM_EVAL_BATCH: u64 = 1 << 40;
pub const STREAM_REGION_BATCH: u64 = (1 << 40) | 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    pub input_resolution: usize,
    pub input_channels: usize,
    pub cell_channels: usize,
    pub cells_per_stage: usize,
    pub stages: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Disable to get an identity normalization.
    pub batch_norm: bool,
    /// Disable to drop every ReLU, which makes the network linear.
    pub activations: bool,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        ToyNetConfig {
            input_resolution: 16,
            input_channels: 3,
            cell_channels: 8,
            cells_per_stage: 1,
            stages: 1,
            num_classes: 10,
            seed: 0,
            batch_norm: true,
            activations: true,
        }
    }
}

impl ToyNetConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.input_channels,
            self.cell_channels,
            self.cells_per_stage,
            self.stages,
            self.num_classes,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidInput("toy network counts must be >= 1".into()));
        }
        if self.input_resolution < 4 {
            return Err(Error::InvalidInput("toy network resolution must be >= 4".into()));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> Shape {
        Shape::new(self.input_channels, self.input_resolution, self.input_resolution)
    }
}

/// Per-sample `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Dense NCHW batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(n: usize, shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * shape.numel() {
            return Err(Error::InvalidInput(format!(
                "tensor data length {} does not match {n} x {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { n, shape, data })
    }

    pub fn zeros(n: usize, shape: Shape) -> Self {
        Tensor {
            n,
            shape,
            data: vec![0.0; n * shape.numel()],
        }
    }

    /// Standard-normal entries from a ChaCha stream of `seed`.
    pub fn gaussian(n: usize, shape: Shape, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let data = (0..n * shape.numel())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor { n, shape, data }
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let m = self.shape.numel();
        &self.data[b * m..(b + 1) * m]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let m = self.shape.numel();
        &mut self.data[b * m..(b + 1) * m]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Binary ReLU activation code of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ActivationCode {
    words: Vec<u64>,
    len: usize,
}

impl ActivationCode {
    pub fn with_capacity(bits: usize) -> Self {
        ActivationCode {
            words: Vec::with_capacity(bits.div_ceil(64)),
            len: 0,
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = ActivationCode::with_capacity(bits.len());
        for &b in bits {
            code.push(b);
        }
        code
    }

    pub fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        if bit {
            *self.words.last_mut().expect("word allocated") |= 1 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn hamming(&self, other: &ActivationCode) -> u32 {
        assert_eq!(self.len, other.len, "codes of different length");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `batch × num_classes`, row-major.
    pub logits: Vec<f64>,
    pub num_classes: usize,
    pub relu_pattern: Vec<ActivationCode>,
}

impl ForwardTrace {
    pub fn logits_row(&self, b: usize) -> &[f64] {
        &self.logits[b * self.num_classes..(b + 1) * self.num_classes]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSlot {
    offset: usize,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    stream: u64,
}

impl ConvSlot {
    fn len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.k) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LinearSlot {
    offset: usize,
    in_f: usize,
    out_f: usize,
    stream: u64,
}

impl LinearSlot {
    fn len(&self) -> usize {
        self.out_f * self.in_f + self.out_f
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Input,
    Conv(usize, ConvSlot),
    BatchNorm(usize),
    Relu(usize),
    AvgPool3(usize),
    /// Elementwise sum; an empty list yields zeros.
    Sum(Vec<usize>),
    GlobalAvgPool(usize),
    Linear(usize, LinearSlot),
}

impl Op {
    fn sources(&self) -> &[usize] {
        match self {
            Op::Input => &[],
            Op::Conv(s, _)
            | Op::BatchNorm(s)
            | Op::Relu(s)
            | Op::AvgPool3(s)
            | Op::GlobalAvgPool(s)
            | Op::Linear(s, _) => std::slice::from_ref(s),
            Op::Sum(srcs) => srcs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    op: Op,
    shape: Shape,
}

/// Stream id of a parameterized layer, independent of construction order.
fn stream_stem() -> u64 {
    0
}

fn stream_reduction(stage: usize) -> u64 {
    (1 << 32) | stage as u64
}

fn stream_cell_edge(cell_index: usize, edge: usize) -> u64 {
    (2 << 32) | ((cell_index as u64) << 8) | edge as u64
}

fn stream_classifier() -> u64 {
    3 << 32
}

struct Builder<'a> {
    cfg: &'a ToyNetConfig,
    nodes: Vec<Node>,
    param_len: usize,
    convs: Vec<ConvSlot>,
    linears: Vec<LinearSlot>,
}

impl Builder<'_> {
    fn push(&mut self, op: Op, shape: Shape) -> usize {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn shape(&self, id: usize) -> Shape {
        self.nodes[id].shape
    }

    fn conv_bn_relu(&mut self, src: usize, out_c: usize, k: usize, stride: usize, stream: u64) -> usize {
        let in_shape = self.shape(src);
        let slot = ConvSlot {
            offset: self.param_len,
            in_c: in_shape.c,
            out_c,
            k,
            stride,
            pad: k / 2,
            stream,
        };
        self.param_len += slot.len();
        self.convs.push(slot);
        let out_shape = Shape::new(out_c, slot.out_size(in_shape.h), slot.out_size(in_shape.w));
        let mut id = self.push(Op::Conv(src, slot), out_shape);
        if self.cfg.batch_norm {
            id = self.push(Op::BatchNorm(id), out_shape);
        }
        if self.cfg.activations {
            id = self.push(Op::Relu(id), out_shape);
        }
        id
    }

    fn cell(&mut self, cell: &CellSpec, input: usize, cell_index: usize) -> usize {
        let shape = self.shape(input);
        let mut node_ids = [input; NUM_NODES];
        for dst in 1..NUM_NODES {
            let mut terms = Vec::new();
            for (e, &(src, d)) in EDGES.iter().enumerate() {
                if d != dst {
                    continue;
                }
                let from = node_ids[src];
                let term = match cell.ops[e] {
                    OpKind::None => continue,
                    OpKind::Skip => from,
                    OpKind::Conv1x1 => {
                        self.conv_bn_relu(from, shape.c, 1, 1, stream_cell_edge(cell_index, e))
                    }
                    OpKind::Conv3x3 => {
                        self.conv_bn_relu(from, shape.c, 3, 1, stream_cell_edge(cell_index, e))
                    }
                    OpKind::AvgPool3x3 => self.push(Op::AvgPool3(from), shape),
                };
                terms.push(term);
            }
            node_ids[dst] = if terms.len() == 1 {
                terms[0]
            } else {
                self.push(Op::Sum(terms), shape)
            };
        }
        node_ids[NUM_NODES - 1]
    }
}

/// An instantiated network. Immutable after construction except through
/// [`ToyNet::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    cell: CellSpec,
    cfg: ToyNetConfig,
    nodes: Vec<Node>,
    params: Vec<f64>,
    convs: Vec<ConvSlot>,
    linears: Vec<LinearSlot>,
    /// Index of the last node reading each node's output.
    last_use: Vec<usize>,
    relu_units: usize,
}

struct Tape {
    values: Vec<Option<Tensor>>,
    inv_std: Vec<Vec<f64>>,
}

impl ToyNet {
    pub fn instantiate(cell: &CellSpec, cfg: &ToyNetConfig) -> Result<ToyNet> {
        cfg.validate()?;
        let mut b = Builder {
            cfg,
            nodes: Vec::new(),
            param_len: 0,
            convs: Vec::new(),
            linears: Vec::new(),
        };
        let input = b.push(Op::Input, cfg.sample_shape());
        let mut x = b.conv_bn_relu(input, cfg.cell_channels, 3, 1, stream_stem());
        let mut cell_index = 0;
        for stage in 0..cfg.stages {
            if stage > 0 {
                let c = b.shape(x).c * 2;
                x = b.conv_bn_relu(x, c, 3, 2, stream_reduction(stage));
            }
            for _ in 0..cfg.cells_per_stage {
                x = b.cell(cell, x, cell_index);
                cell_index += 1;
            }
        }
        let c = b.shape(x).c;
        let pooled = b.push(Op::GlobalAvgPool(x), Shape::new(c, 1, 1));
        let slot = LinearSlot {
            offset: b.param_len,
            in_f: c,
            out_f: cfg.num_classes,
            stream: stream_classifier(),
        };
        b.param_len += slot.len();
        b.linears.push(slot);
        b.push(Op::Linear(pooled, slot), Shape::new(cfg.num_classes, 1, 1));

        let Builder {
            nodes,
            param_len,
            convs,
            linears,
            ..
        } = b;
        let mut last_use: Vec<usize> = (0..nodes.len()).collect();
        for (i, node) in nodes.iter().enumerate() {
            for &s in node.op.sources() {
                last_use[s] = i;
            }
        }
        let relu_units = nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .map(|n| n.shape.numel())
            .sum();
        let mut params = vec![0.0; param_len];
        for slot in &convs {
            let fan_in = slot.in_c * slot.k * slot.k;
            kaiming_normal(&mut params[slot.offset..slot.offset + slot.len()], fan_in, cfg.seed, slot.stream);
        }
        for slot in &linears {
            let weights = slot.out_f * slot.in_f;
            kaiming_normal(&mut params[slot.offset..slot.offset + weights], slot.in_f, cfg.seed, slot.stream);
        }
        Ok(ToyNet {
            cell: *cell,
            cfg: cfg.clone(),
            nodes,
            params,
            convs,
            linears,
            last_use,
            relu_units,
        })
    }

    pub fn cell(&self) -> &CellSpec {
        &self.cell
    }

    pub fn config(&self) -> &ToyNetConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Flat parameter vector: each convolution's weights as
    /// `[out][in][kh][kw]` in construction order (stem, then per stage the
    /// stage reduction followed by the cell convolutions edge by edge),
    /// followed by the classifier weights `[out][in]` and bias.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Number of ReLU units per sample, i.e. the activation code length.
    pub fn relu_units(&self) -> usize {
        self.relu_units
    }

    /// Writes the parameters as little-endian `f32` in [`ToyNet::params`] order.
    pub fn dump_weights<W: Write>(&self, mut out: W) -> Result<()> {
        for &p in &self.params {
            out.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape != self.cfg.sample_shape() || batch.n == 0 {
            return Err(Error::InvalidInput(format!(
                "batch shape {}x{:?} does not match network input {:?}",
                batch.n,
                batch.shape,
                self.cfg.sample_shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let mut patterns = vec![ActivationCode::with_capacity(self.relu_units); batch.n];
        let tape = self.run(batch, false, Some(&mut patterns));
        Ok(self.trace(&tape, patterns))
    }

    fn trace(&self, tape: &Tape, relu_pattern: Vec<ActivationCode>) -> ForwardTrace {
        let out = tape.values.last().and_then(|v| v.as_ref()).expect("output kept");
        ForwardTrace {
            logits: out.data.clone(),
            num_classes: self.cfg.num_classes,
            relu_pattern,
        }
    }

    /// Gradient of the sum of all logits with respect to every input
    /// sample, flattened per sample. Batch statistics couple the samples,
    /// so each row includes the effect through the other samples' logits.
    pub fn input_jacobian(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.check_batch(batch)?;
        let tape = self.run(batch, true, None);
        let seed = vec![1.0; batch.n * self.cfg.num_classes];
        let (grad_input, _) = self.backward(&tape, seed, false);
        Ok((0..batch.n).map(|b| grad_input.sample(b).to_vec()).collect())
    }

    /// For every sample `i`, the gradient of `Σ_c logits[i, c]` with
    /// respect to all parameters.
    pub fn per_sample_param_grads(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.check_batch(batch)?;
        let tape = self.run(batch, true, None);
        let classes = self.cfg.num_classes;
        Ok((0..batch.n)
            .map(|i| {
                let mut seed = vec![0.0; batch.n * classes];
                seed[i * classes..(i + 1) * classes].fill(1.0);
                self.backward(&tape, seed, true).1.expect("requested")
            })
            .collect())
    }

    /// Forward pass, optionally appending ReLU codes per sample. With
    /// `keep = false`, intermediates are dropped after their last use.
    fn run(&self, batch: &Tensor, keep: bool, mut patterns: Option<&mut Vec<ActivationCode>>) -> Tape {
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut inv_std = vec![Vec::new(); self.nodes.len()];
        let n = batch.n;
        for (i, node) in self.nodes.iter().enumerate() {
            let get = |s: usize| values[s].as_ref().expect("source value live");
            let out = match &node.op {
                Op::Input => batch.clone(),
                Op::Conv(s, slot) => conv_forward(get(*s), &self.params[slot.offset..slot.offset + slot.len()], slot, node.shape),
                Op::BatchNorm(s) => {
                    let (y, istd) = batchnorm_forward(get(*s));
                    inv_std[i] = istd;
                    y
                }
                Op::Relu(s) => {
                    let x = get(*s);
                    if let Some(codes) = patterns.as_deref_mut() {
                        for (b, code) in codes.iter_mut().enumerate() {
                            for &v in x.sample(b) {
                                code.push(v > 0.0);
                            }
                        }
                    }
                    Tensor {
                        n,
                        shape: x.shape,
                        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                    }
                }
                Op::AvgPool3(s) => avgpool3_forward(get(*s)),
                Op::Sum(srcs) => {
                    let mut acc = Tensor::zeros(n, node.shape);
                    for &s in srcs {
                        acc.add_assign(get(s));
                    }
                    acc
                }
                Op::GlobalAvgPool(s) => {
                    let x = get(*s);
                    let plane = x.shape.plane();
                    let data = x
                        .data
                        .chunks_exact(plane)
                        .map(|p| p.iter().sum::<f64>() / plane as f64)
                        .collect();
                    Tensor { n, shape: node.shape, data }
                }
                Op::Linear(s, slot) => linear_forward(get(*s), &self.params[slot.offset..slot.offset + slot.len()], slot),
            };
            values[i] = Some(out);
            if !keep {
                for &s in node.op.sources() {
                    if self.last_use[s] == i {
                        values[s] = None;
                    }
                }
            }
        }
        Tape { values, inv_std }
    }

    /// Reverse pass from a seed gradient on the logits. Returns the input
    /// gradient and, if requested, the flat parameter gradient.
    fn backward(&self, tape: &Tape, seed: Vec<f64>, want_params: bool) -> (Tensor, Option<Vec<f64>>) {
        let count = self.nodes.len();
        let out_shape = self.nodes[count - 1].shape;
        let n = seed.len() / out_shape.numel();
        let mut grads: Vec<Option<Tensor>> = vec![None; count];
        grads[count - 1] = Some(Tensor { n, shape: out_shape, data: seed });
        let mut pgrad = want_params.then(|| vec![0.0; self.params.len()]);

        fn accumulate(grads: &mut [Option<Tensor>], s: usize, g: Tensor) {
            match &mut grads[s] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..count).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let value = |s: usize| tape.values[s].as_ref().expect("tape keeps all values");
            match &node.op {
                Op::Input => {
                    grads[i] = Some(dy);
                }
                Op::Conv(s, slot) => {
                    let w = &self.params[slot.offset..slot.offset + slot.len()];
                    let x = value(*s);
                    if let Some(pg) = pgrad.as_mut() {
                        conv_backward_weights(x, &dy, slot, &mut pg[slot.offset..slot.offset + slot.len()]);
                    }
                    accumulate(&mut grads, *s, conv_backward_input(&dy, w, slot, x.shape));
                }
                Op::BatchNorm(s) => {
                    let dx = batchnorm_backward(value(i), &dy, &tape.inv_std[i]);
                    accumulate(&mut grads, *s, dx);
                }
                Op::Relu(s) => {
                    let x = value(*s);
                    let data = dy
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *s, Tensor { n, shape: x.shape, data });
                }
                Op::AvgPool3(s) => accumulate(&mut grads, *s, avgpool3_backward(&dy)),
                Op::Sum(srcs) => {
                    for &s in srcs {
                        accumulate(&mut grads, s, dy.clone());
                    }
                }
                Op::GlobalAvgPool(s) => {
                    let shape = self.nodes[*s].shape;
                    let plane = shape.plane();
                    let mut data = Vec::with_capacity(n * shape.numel());
                    for &g in &dy.data {
                        data.extend(std::iter::repeat_n(g / plane as f64, plane));
                    }
                    accumulate(&mut grads, *s, Tensor { n, shape, data });
                }
                Op::Linear(s, slot) => {
                    let p = &self.params[slot.offset..slot.offset + slot.len()];
                    let x = value(*s);
                    if let Some(pg) = pgrad.as_mut() {
                        linear_backward_params(x, &dy, slot, &mut pg[slot.offset..slot.offset + slot.len()]);
                    }
                    accumulate(&mut grads, *s, linear_backward_input(&dy, p, slot, x.shape));
                }
            }
        }
        let grad_input = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(n, self.nodes[0].shape));
        (grad_input, pgrad)
    }
}

fn kaiming_normal(out: &mut [f64], fan_in: usize, seed: u64, stream: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let std = (2.0 / fan_in as f64).sqrt();
    for w in out {
        let z: f64 = StandardNormal.sample(&mut rng);
        *w = std * z;
    }
}

/// Range of output positions `o` such that `o * stride + tap - pad` is a
/// valid input index.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    // o*stride + tap >= pad  and  o*stride + tap < in_size + pad
    let lo = pad.saturating_sub(tap).div_ceil(stride);
    let hi = (in_size + pad).saturating_sub(tap).div_ceil(stride).min(out_size);
    (lo, hi.max(lo))
}

fn conv_forward(x: &Tensor, w: &[f64], slot: &ConvSlot, out_shape: Shape) -> Tensor {
    let (n, ins) = (x.n, x.shape);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let k = slot.k;
    let mut y = Tensor::zeros(n, out_shape);
    for b in 0..n {
        for oc in 0..slot.out_c {
            let out = &mut y.data[(b * slot.out_c + oc) * oh * ow..][..oh * ow];
            for ic in 0..slot.in_c {
                let inp = &x.data[(b * ins.c + ic) * ins.plane()..][..ins.plane()];
                for kh in 0..k {
                    let (y0, y1) = valid_range(kh, slot.pad, slot.stride, ins.h, oh);
                    for kw in 0..k {
                        let wv = w[((oc * slot.in_c + ic) * k + kh) * k + kw];
                        let (x0, x1) = valid_range(kw, slot.pad, slot.stride, ins.w, ow);
                        for oy in y0..y1 {
                            let iy = oy * slot.stride + kh - slot.pad;
                            let row = &inp[iy * ins.w..];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                orow[ox] += wv * row[ox * slot.stride + kw - slot.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward_input(dy: &Tensor, w: &[f64], slot: &ConvSlot, in_shape: Shape) -> Tensor {
    let n = dy.n;
    let (oh, ow) = (dy.shape.h, dy.shape.w);
    let k = slot.k;
    let mut dx = Tensor::zeros(n, in_shape);
    for b in 0..n {
        for ic in 0..slot.in_c {
            let gin = &mut dx.data[(b * in_shape.c + ic) * in_shape.plane()..][..in_shape.plane()];
            for oc in 0..slot.out_c {
                let gout = &dy.data[(b * slot.out_c + oc) * oh * ow..][..oh * ow];
                for kh in 0..k {
                    let (y0, y1) = valid_range(kh, slot.pad, slot.stride, in_shape.h, oh);
                    for kw in 0..k {
                        let wv = w[((oc * slot.in_c + ic) * k + kh) * k + kw];
                        let (x0, x1) = valid_range(kw, slot.pad, slot.stride, in_shape.w, ow);
                        for oy in y0..y1 {
                            let iy = oy * slot.stride + kh - slot.pad;
                            let grow = &gout[oy * ow..(oy + 1) * ow];
                            let irow = &mut gin[iy * in_shape.w..];
                            for ox in x0..x1 {
                                irow[ox * slot.stride + kw - slot.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_weights(x: &Tensor, dy: &Tensor, slot: &ConvSlot, dw: &mut [f64]) {
    let (n, ins) = (x.n, x.shape);
    let (oh, ow) = (dy.shape.h, dy.shape.w);
    let k = slot.k;
    for b in 0..n {
        for oc in 0..slot.out_c {
            let gout = &dy.data[(b * slot.out_c + oc) * oh * ow..][..oh * ow];
            for ic in 0..slot.in_c {
                let inp = &x.data[(b * ins.c + ic) * ins.plane()..][..ins.plane()];
                for kh in 0..k {
                    let (y0, y1) = valid_range(kh, slot.pad, slot.stride, ins.h, oh);
                    for kw in 0..k {
                        let (x0, x1) = valid_range(kw, slot.pad, slot.stride, ins.w, ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * slot.stride + kh - slot.pad;
                            let row = &inp[iy * ins.w..];
                            let grow = &gout[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                acc += grow[ox] * row[ox * slot.stride + kw - slot.pad];
                            }
                        }
                        dw[((oc * slot.in_c + ic) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    }
}

/// Normalizes every channel over batch and space; returns `1/σ` per channel.
fn batchnorm_forward(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, s) = (x.n, x.shape);
    let plane = s.plane();
    let m = (n * plane) as f64;
    let mut y = Tensor::zeros(n, s);
    let mut inv_std = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let chan = |b: usize| (b * s.c + c) * plane;
        let mean = (0..n).map(|b| x.data[chan(b)..chan(b) + plane].iter().sum::<f64>()).sum::<f64>() / m;
        let var = (0..n)
            .map(|b| x.data[chan(b)..chan(b) + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / m;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        for b in 0..n {
            let base = chan(b);
            for j in base..base + plane {
                y.data[j] = (x.data[j] - mean) * istd;
            }
        }
        inv_std.push(istd);
    }
    (y, inv_std)
}

/// `dx = (1/σ) (dy − mean(dy) − x̂ · mean(dy · x̂))` per channel.
fn batchnorm_backward(xhat: &Tensor, dy: &Tensor, inv_std: &[f64]) -> Tensor {
    let (n, s) = (dy.n, dy.shape);
    let plane = s.plane();
    let m = (n * plane) as f64;
    let mut dx = Tensor::zeros(n, s);
    for c in 0..s.c {
        let chan = |b: usize| (b * s.c + c) * plane;
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let base = chan(b);
            for j in base..base + plane {
                sum_dy += dy.data[j];
                sum_dy_xhat += dy.data[j] * xhat.data[j];
            }
        }
        let (mean_dy, mean_dy_xhat) = (sum_dy / m, sum_dy_xhat / m);
        for b in 0..n {
            let base = chan(b);
            for j in base..base + plane {
                dx.data[j] = inv_std[c] * (dy.data[j] - mean_dy - xhat.data[j] * mean_dy_xhat);
            }
        }
    }
    dx
}

/// Number of in-bounds taps of a 3-wide window centered at `i`.
#[inline]
fn window(i: usize, size: usize) -> (usize, usize) {
    (i.saturating_sub(1), (i + 2).min(size))
}

fn avgpool3_forward(x: &Tensor) -> Tensor {
    let s = x.shape;
    let mut y = Tensor::zeros(x.n, s);
    for (src, dst) in x.data.chunks_exact(s.plane()).zip(y.data.chunks_exact_mut(s.plane())) {
        for i in 0..s.h {
            let (r0, r1) = window(i, s.h);
            for j in 0..s.w {
                let (c0, c1) = window(j, s.w);
                let mut acc = 0.0;
                for r in r0..r1 {
                    acc += src[r * s.w + c0..r * s.w + c1].iter().sum::<f64>();
                }
                dst[i * s.w + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    y
}

fn avgpool3_backward(dy: &Tensor) -> Tensor {
    let s = dy.shape;
    let mut dx = Tensor::zeros(dy.n, s);
    for (g, dst) in dy.data.chunks_exact(s.plane()).zip(dx.data.chunks_exact_mut(s.plane())) {
        for i in 0..s.h {
            let (r0, r1) = window(i, s.h);
            for j in 0..s.w {
                let (c0, c1) = window(j, s.w);
                let share = g[i * s.w + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for v in &mut dst[r * s.w + c0..r * s.w + c1] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

fn linear_forward(x: &Tensor, p: &[f64], slot: &LinearSlot) -> Tensor {
    let (weights, bias) = p.split_at(slot.out_f * slot.in_f);
    let mut data = Vec::with_capacity(x.n * slot.out_f);
    for b in 0..x.n {
        let xi = x.sample(b);
        for o in 0..slot.out_f {
            let row = &weights[o * slot.in_f..(o + 1) * slot.in_f];
            data.push(bias[o] + row.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>());
        }
    }
    Tensor {
        n: x.n,
        shape: Shape::new(slot.out_f, 1, 1),
        data,
    }
}

fn linear_backward_input(dy: &Tensor, p: &[f64], slot: &LinearSlot, in_shape: Shape) -> Tensor {
    let weights = &p[..slot.out_f * slot.in_f];
    let mut dx = Tensor::zeros(dy.n, in_shape);
    for b in 0..dy.n {
        let g = dy.sample(b);
        let out = dx.sample_mut(b);
        for (o, &go) in g.iter().enumerate() {
            for (d, w) in out.iter_mut().zip(&weights[o * slot.in_f..(o + 1) * slot.in_f]) {
                *d += go * w;
            }
        }
    }
    dx
}

fn linear_backward_params(x: &Tensor, dy: &Tensor, slot: &LinearSlot, dp: &mut [f64]) {
    let (dw, db) = dp.split_at_mut(slot.out_f * slot.in_f);
    for b in 0..x.n {
        let xi = x.sample(b);
        for (o, &go) in dy.sample(b).iter().enumerate() {
            db[o] += go;
            for (d, v) in dw[o * slot.in_f..(o + 1) * slot.in_f].iter_mut().zip(xi) {
                *d += go * v;
            }
        }
    }
}

/// Number of distinct activation codes.
pub fn distinct_codes(codes: &[ActivationCode]) -> usize {
    codes.iter().collect::<HashSet<_>>().len()
}
