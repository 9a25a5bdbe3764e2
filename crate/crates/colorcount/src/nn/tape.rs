//! A minimal reverse-mode autodiff tape over NCHW f32 tensors.
//!
//! Each forward pass records operations onto a fresh [`Tape`]; parameters
//! live outside in a [`ParamStore`] and are referenced by id. `backward`
//! seeds one or more output nodes with upstream gradients and sweeps the
//! records in reverse, returning gradients for every parameter and node.
//! Feeding a tensor back in as a new input node detaches it from its
//! producers, which is how discriminator updates see generated samples
//! without propagating into the generator.

use ndarray::{Array2, Array4, ArrayD, Ix1, Ix2, Ix4};

use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvSpec};
use crate::nn::params::{ParamId, ParamStore};

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Conv2d { input: NodeId, weight: ParamId, bias: Option<ParamId>, spec: ConvSpec },
    Relu { input: NodeId },
    LeakyRelu { input: NodeId, slope: f32 },
    Sigmoid { input: NodeId },
    Scale { input: NodeId, factor: f32 },
    Add { a: NodeId, b: NodeId },
    AvgPool { input: NodeId, k: usize },
    Upsample { input: NodeId, factor: usize },
    Gap { input: NodeId },
    Linear { input: NodeId, weight: ParamId, bias: Option<ParamId> },
    ChannelShuffle { input: NodeId, l: usize, m: usize },
    Concat { a: NodeId, b: NodeId },
    AnnealedDecode { input: NodeId, centers: Array2<f32>, temperature: f32 },
}

struct Node {
    op: Op,
    value: Array4<f32>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    param: Vec<Option<ArrayD<f32>>>,
    node: Vec<Option<Array4<f32>>>,
}

impl Gradients {
    /// Gradient for a parameter; zero-shaped `None` means the parameter was
    /// not on any path to a seeded output.
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.param[id.0].as_ref()
    }

    /// Gradient at an input node. Gradients of interior nodes are consumed
    /// (freed) during the sweep; only leaves keep theirs.
    pub fn node(&self, id: NodeId) -> Option<&Array4<f32>> {
        self.node[id.0].as_ref()
    }

    /// Consume, yielding the parameter-gradient table indexed by `ParamId`.
    pub fn into_param_grads(self) -> Vec<Option<ArrayD<f32>>> {
        self.param
    }
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Array4<f32> {
        &self.nodes[id.0].value
    }

    pub fn param_id(&self, name: &str) -> Result<ParamId> {
        self.store
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    fn push(&mut self, op: Op, value: Array4<f32>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn weight4(&self, id: ParamId) -> Result<ndarray::ArrayView4<'a, f32>> {
        self.store.get(id).view().into_dimensionality::<Ix4>().map_err(|_| {
            Error::ShapeMismatch(format!(
                "parameter '{}' is not a 4-d convolution weight",
                self.store.name(id)
            ))
        })
    }

    /// Record an externally produced tensor. Gradients stop here.
    pub fn input(&mut self, value: Array4<f32>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let w = self.weight4(weight)?;
        let b = match bias {
            Some(id) => Some(
                self.store
                    .get(id)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .map_err(|_| {
                        Error::ShapeMismatch(format!(
                            "parameter '{}' is not a 1-d bias",
                            self.store.name(id)
                        ))
                    })?
                    .to_owned(),
            ),
            None => None,
        };
        let out = ops::conv2d_forward(&self.value(input).view(), &w, b.as_ref(), &spec)?;
        Ok(self.push(Op::Conv2d { input, weight, bias, spec }, out))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| v.max(0.0));
        self.push(Op::Relu { input }, out)
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f32) -> NodeId {
        let out = self.value(input).mapv(|v| if v >= 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { input, slope }, out)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid { input }, out)
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let out = self.value(input).mapv(|v| v * factor);
        self.push(Op::Scale { input, factor }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).dim() != self.value(b).dim() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).dim(),
                self.value(b).dim()
            )));
        }
        let out = self.value(a) + self.value(b);
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn avg_pool(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        let out = ops::avg_pool_forward(&self.value(input).view(), k)?;
        Ok(self.push(Op::AvgPool { input, k }, out))
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let out = ops::upsample_forward(&self.value(input).view(), factor)?;
        Ok(self.push(Op::Upsample { input, factor }, out))
    }

    /// Global average pooling to shape (B, C, 1, 1).
    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let (b, c, h, w) = v.dim();
        let norm = 1.0 / (h * w) as f32;
        let mut out = Array4::zeros((b, c, 1, 1));
        for bi in 0..b {
            for ci in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += v[[bi, ci, y, x]];
                    }
                }
                out[[bi, ci, 0, 0]] = s * norm;
            }
        }
        self.push(Op::Gap { input }, out)
    }

    /// Fully connected layer on (B, C, 1, 1) tensors with a (O, C) weight.
    pub fn linear(
        &mut self,
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
    ) -> Result<NodeId> {
        let (b, c, h, w) = self.value(input).dim();
        if h != 1 || w != 1 {
            return Err(Error::ShapeMismatch(format!(
                "linear input must be (B, C, 1, 1), got {:?}",
                self.value(input).dim()
            )));
        }
        let wmat = self.store.get(weight).view().into_dimensionality::<Ix2>().map_err(|_| {
            Error::ShapeMismatch(format!(
                "parameter '{}' is not a 2-d linear weight",
                self.store.name(weight)
            ))
        })?;
        let (o, wc) = wmat.dim();
        if wc != c {
            return Err(Error::ShapeMismatch(format!(
                "linear weight expects {wc} features, input has {c}"
            )));
        }
        let mut out = Array4::zeros((b, o, 1, 1));
        for bi in 0..b {
            for oi in 0..o {
                let mut s = match bias {
                    Some(id) => self.store.get(id)[[oi]],
                    None => 0.0,
                };
                for ci in 0..c {
                    s += wmat[[oi, ci]] * self.value(input)[[bi, ci, 0, 0]];
                }
                out[[bi, oi, 0, 0]] = s;
            }
        }
        Ok(self.push(Op::Linear { input, weight, bias }, out))
    }

    pub fn channel_shuffle(&mut self, input: NodeId, l: usize, m: usize) -> Result<NodeId> {
        let out = ops::channel_shuffle_forward(&self.value(input).view(), l, m)?;
        Ok(self.push(Op::ChannelShuffle { input, l, m }, out))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, ha, wa) = self.value(a).dim();
        let (bb, cb, hb, wb) = self.value(b).dim();
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat: {:?} vs {:?}",
                self.value(a).dim(),
                self.value(b).dim()
            )));
        }
        let mut out = Array4::zeros((ba, ca + cb, ha, wa));
        out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(self.value(a));
        out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(self.value(b));
        Ok(self.push(Op::Concat { a, b }, out))
    }

    /// Differentiable annealed-mean readout: per pixel, softmax the Q logits
    /// at `1/temperature` sharpness and take the expectation of the bin
    /// centers, producing a (B, 2, H, W) chroma tensor.
    pub fn annealed_decode(
        &mut self,
        input: NodeId,
        centers: Array2<f32>,
        temperature: f32,
    ) -> Result<NodeId> {
        let (b, q, h, w) = self.value(input).dim();
        if centers.nrows() != q {
            return Err(Error::ShapeMismatch(format!(
                "{q} logit channels vs {} codebook centers",
                centers.nrows()
            )));
        }
        if temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        let d = centers.ncols();
        let mut out = Array4::zeros((b, d, h, w));
        let mut probs = vec![0.0f32; q];
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    softmax_pixel(self.value(input), bi, y, x, temperature, &mut probs);
                    for c in 0..d {
                        let mut s = 0.0;
                        for (qi, p) in probs.iter().enumerate() {
                            s += p * centers[[qi, c]];
                        }
                        out[[bi, c, y, x]] = s;
                    }
                }
            }
        }
        Ok(self.push(Op::AnnealedDecode { input, centers, temperature }, out))
    }

    /// Reverse sweep from the given seed gradients (`dL/d node`). Multiple
    /// seeds accumulate, so several loss terms can share one sweep.
    pub fn backward(&self, seeds: Vec<(NodeId, Array4<f32>)>) -> Result<Gradients> {
        let mut node: Vec<Option<Array4<f32>>> = vec![None; self.nodes.len()];
        let mut param: Vec<Option<ArrayD<f32>>> = vec![None; self.store.len()];
        for (id, seed) in seeds {
            if seed.dim() != self.value(id).dim() {
                return Err(Error::ShapeMismatch(format!(
                    "seed {:?} vs node value {:?}",
                    seed.dim(),
                    self.value(id).dim()
                )));
            }
            accumulate4(&mut node[id.0], &seed);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = node[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {
                    node[idx] = Some(grad);
                }
                Op::Conv2d { input, weight, bias, spec } => {
                    let w = self.weight4(*weight)?;
                    let (dinput, dweight, dbias) = ops::conv2d_backward(
                        &self.value(*input).view(),
                        &w,
                        spec,
                        &grad.view(),
                    )?;
                    accumulate4(&mut node[input.0], &dinput);
                    accumulate_param(&mut param[weight.0], dweight.into_dyn());
                    if let Some(bid) = bias {
                        accumulate_param(&mut param[bid.0], dbias.into_dyn());
                    }
                }
                Op::Relu { input } => {
                    let mut d = grad;
                    d.zip_mut_with(self.value(*input), |g, &x| {
                        if x < 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate4(&mut node[input.0], &d);
                }
                Op::LeakyRelu { input, slope } => {
                    let s = *slope;
                    let mut d = grad;
                    d.zip_mut_with(self.value(*input), |g, &x| {
                        if x < 0.0 {
                            *g *= s;
                        }
                    });
                    accumulate4(&mut node[input.0], &d);
                }
                Op::Sigmoid { input } => {
                    let mut d = grad;
                    d.zip_mut_with(&self.nodes[idx].value, |g, &y| *g *= y * (1.0 - y));
                    accumulate4(&mut node[input.0], &d);
                }
                Op::Scale { input, factor } => {
                    let d = grad.mapv(|g| g * factor);
                    accumulate4(&mut node[input.0], &d);
                }
                Op::Add { a, b } => {
                    accumulate4(&mut node[a.0], &grad);
                    accumulate4(&mut node[b.0], &grad);
                }
                Op::AvgPool { input, k } => {
                    let d = ops::avg_pool_backward(&grad.view(), *k);
                    accumulate4(&mut node[input.0], &d);
                }
                Op::Upsample { input, factor } => {
                    let (_, _, ih, iw) = self.value(*input).dim();
                    let d = ops::upsample_backward(&grad.view(), *factor, ih, iw);
                    accumulate4(&mut node[input.0], &d);
                }
                Op::Gap { input } => {
                    let (b, c, h, w) = self.value(*input).dim();
                    let norm = 1.0 / (h * w) as f32;
                    let mut d = Array4::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            let g = grad[[bi, ci, 0, 0]] * norm;
                            d.slice_mut(ndarray::s![bi, ci, .., ..]).fill(g);
                        }
                    }
                    accumulate4(&mut node[input.0], &d);
                }
                Op::Linear { input, weight, bias } => {
                    let wmat =
                        self.store.get(*weight).view().into_dimensionality::<Ix2>().unwrap();
                    let (o, c) = wmat.dim();
                    let b = grad.dim().0;
                    let x = self.value(*input);
                    let mut dinput = Array4::zeros((b, c, 1, 1));
                    let mut dw = Array2::<f32>::zeros((o, c));
                    let mut db = vec![0.0f32; o];
                    for bi in 0..b {
                        for oi in 0..o {
                            let g = grad[[bi, oi, 0, 0]];
                            db[oi] += g;
                            for ci in 0..c {
                                dw[[oi, ci]] += g * x[[bi, ci, 0, 0]];
                                dinput[[bi, ci, 0, 0]] += g * wmat[[oi, ci]];
                            }
                        }
                    }
                    accumulate4(&mut node[input.0], &dinput);
                    accumulate_param(&mut param[weight.0], dw.into_dyn());
                    if let Some(bid) = bias {
                        accumulate_param(
                            &mut param[bid.0],
                            ndarray::Array1::from_vec(db).into_dyn(),
                        );
                    }
                }
                Op::ChannelShuffle { input, l, m } => {
                    let d = ops::channel_shuffle_backward(&grad.view(), *l, *m);
                    accumulate4(&mut node[input.0], &d);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).dim().1;
                    let da = grad.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                    let dbk = grad.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                    accumulate4(&mut node[a.0], &da);
                    accumulate4(&mut node[b.0], &dbk);
                }
                Op::AnnealedDecode { input, centers, temperature } => {
                    let logits = self.value(*input);
                    let (b, q, h, w) = logits.dim();
                    let d = centers.ncols();
                    let inv_t = 1.0 / temperature;
                    let mut dlogits = Array4::zeros((b, q, h, w));
                    let mut probs = vec![0.0f32; q];
                    for bi in 0..b {
                        for y in 0..h {
                            for x in 0..w {
                                softmax_pixel(logits, bi, y, x, *temperature, &mut probs);
                                // inner = Σ_c g_c·center_qc, mean = Σ_q p_q·inner_q
                                let mut mean = 0.0f32;
                                let mut inner = vec![0.0f32; q];
                                for (qi, p) in probs.iter().enumerate() {
                                    let mut s = 0.0;
                                    for c in 0..d {
                                        s += grad[[bi, c, y, x]] * centers[[qi, c]];
                                    }
                                    inner[qi] = s;
                                    mean += p * s;
                                }
                                for qi in 0..q {
                                    dlogits[[bi, qi, y, x]] =
                                        inv_t * probs[qi] * (inner[qi] - mean);
                                }
                            }
                        }
                    }
                    accumulate4(&mut node[input.0], &dlogits);
                }
            }
        }
        Ok(Gradients { param, node })
    }
}

fn softmax_pixel(
    logits: &Array4<f32>,
    b: usize,
    y: usize,
    x: usize,
    temperature: f32,
    out: &mut [f32],
) {
    let q = out.len();
    let mut maxv = f32::NEG_INFINITY;
    for qi in 0..q {
        maxv = maxv.max(logits[[b, qi, y, x]]);
    }
    let mut sum = 0.0;
    for (qi, slot) in out.iter_mut().enumerate() {
        let e = ((logits[[b, qi, y, x]] - maxv) / temperature).exp();
        *slot = e;
        sum += e;
    }
    for slot in out.iter_mut() {
        *slot /= sum;
    }
}

fn accumulate4(slot: &mut Option<Array4<f32>>, grad: &Array4<f32>) {
    match slot {
        Some(acc) => *acc += grad,
        None => *slot = Some(grad.clone()),
    }
}

fn accumulate_param(slot: &mut Option<ArrayD<f32>>, grad: ArrayD<f32>) {
    match slot {
        Some(acc) => *acc += &grad,
        None => *slot = Some(grad),
    }
}
