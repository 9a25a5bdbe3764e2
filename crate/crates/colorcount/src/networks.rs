//! Network architectures: the colorization generator G, inverse mapping F,
//! the two discriminators, the group classifier head, and the counting
//! network with its interleaved group convolution blocks — plus the
//! first-layer weight transfer that carries the pretrained frontend from
//! grayscale input to RGB.
//!
//! Layer weights live in a [`ParamStore`] under stable dotted names
//! (`g.front.c1.w`, `count.igc2.primary.w`, ...); the forward functions here
//! record onto a [`Tape`] so the training loops can backpropagate, while the
//! `*_forward` wrappers run single images through a throwaway tape and
//! return domain types.

use ndarray::{Array2, Array3, Array4, ArrayD, Ix4};
use serde::{Deserialize, Serialize};

use crate::color_space::RgbImage;
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Initializer, NodeId, ParamStore, Tape};
use crate::quantization::{ColorCodebook, ColorDistribution, DEFAULT_TEMPERATURE};

/// Frontend channel progression; blocks 2 and 3 have stride 2.
pub const FRONTEND_CHANNELS: [usize; 4] = [16, 32, 64, 64];
/// Product of frontend strides: generator logits are computed at 1/4
/// resolution and upsampled back.
pub const FRONTEND_STRIDE: usize = 4;
/// The counting net pools the frontend output once more (total stride 8)
/// and its fusion branch pools by another 4, so inputs must be divisible by
/// this.
pub const COUNTING_STRIDE: usize = 32;
/// Dilation of the spatial convolutions inside IGC blocks.
pub const IGC_DILATION: usize = 2;
/// Default number of IGC blocks in the counting module.
pub const DEFAULT_IGC_BLOCKS: usize = 3;
/// Negative slope of discriminator activations.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Which model a [`NetworkSpec`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkRole {
    GeneratorG,
    InverseF,
    DiscriminatorX,
    DiscriminatorZ,
    ClassifierHead,
    CountingNet,
}

/// One layer in a network description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// (primary, secondary) partition counts for interleaved layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<(usize, usize)>,
}

/// Declarative description of one network, stored in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: NetworkRole,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::invalid(format!(
                    "layer channel mismatch: {} out vs {} in",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        for layer in &self.layers {
            if let Some((l, m)) = layer.partitions {
                if l == 0 || m == 0 || layer.in_channels % l != 0 || layer.in_channels % m != 0 {
                    return Err(Error::invalid(format!(
                        "layer {:?}: {} channels not divisible by partitions {l}x{m}",
                        layer.kind, layer.in_channels
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Geometry of one interleaved group convolution block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgcBlockSpec {
    pub channels: usize,
    pub primary_partitions: usize,
    pub secondary_partitions: usize,
    pub kernel: usize,
}

impl Default for IgcBlockSpec {
    fn default() -> Self {
        Self { channels: 64, primary_partitions: 8, secondary_partitions: 8, kernel: 3 }
    }
}

impl IgcBlockSpec {
    pub fn validate(&self) -> Result<()> {
        let (l, m) = (self.primary_partitions, self.secondary_partitions);
        if l == 0 || m == 0 || l * m != self.channels {
            return Err(Error::invalid(format!(
                "IGC block needs channels = primary x secondary, got {} vs {l}x{m}",
                self.channels
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid("IGC spatial kernel must be odd"));
        }
        Ok(())
    }

    /// Trainable scalars per block: L·M²·k² for the partition-wise spatial
    /// convolutions plus M·L² for the point-wise ones (no biases).
    pub fn param_count(&self) -> usize {
        let (l, m, k) = (self.primary_partitions, self.secondary_partitions, self.kernel);
        l * m * m * k * k + m * l * l
    }
}

fn conv_layer(kind: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec {
        kind: kind.to_string(),
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        partitions: None,
    }
}

fn frontend_layers(in_channels: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut cin = in_channels;
    for (i, &cout) in FRONTEND_CHANNELS.iter().enumerate() {
        let stride = if i == 1 || i == 2 { 2 } else { 1 };
        layers.push(conv_layer("conv_relu", cin, cout, 3, stride));
        cin = cout;
    }
    layers
}

/// Canonical architecture description for each role.
pub fn describe(role: NetworkRole, q: usize, m: usize, igc: &IgcBlockSpec) -> NetworkSpec {
    let layers = match role {
        NetworkRole::GeneratorG => {
            let mut layers = frontend_layers(1);
            layers.push(conv_layer("conv_relu", 64, 64, 3, 1));
            layers.push(conv_layer("conv", 64, q, 1, 1));
            layers.push(conv_layer("upsample", q, q, FRONTEND_STRIDE, 1));
            layers
        }
        NetworkRole::ClassifierHead => {
            vec![conv_layer("gap", 64, 64, 1, 1), conv_layer("linear", 64, m, 1, 1)]
        }
        NetworkRole::InverseF => vec![
            conv_layer("conv_relu", 2, 16, 3, 1),
            conv_layer("conv_relu", 16, 32, 3, 2),
            conv_layer("conv_relu", 32, 32, 3, 1),
            conv_layer("upsample", 32, 32, 2, 1),
            conv_layer("conv_relu", 32, 16, 3, 1),
            conv_layer("conv_sigmoid", 16, 1, 1, 1),
        ],
        NetworkRole::DiscriminatorX | NetworkRole::DiscriminatorZ => {
            let cin = if role == NetworkRole::DiscriminatorX { 1 } else { 2 };
            vec![
                conv_layer("conv_lrelu", cin, 16, 3, 2),
                conv_layer("conv_lrelu", 16, 32, 3, 2),
                conv_layer("conv_lrelu", 32, 64, 3, 2),
                conv_layer("gap", 64, 64, 1, 1),
                conv_layer("linear_sigmoid", 64, 1, 1, 1),
            ]
        }
        NetworkRole::CountingNet => {
            let mut layers = frontend_layers(3);
            layers.push(conv_layer("avg_pool", 64, 64, 2, 2));
            for _ in 0..DEFAULT_IGC_BLOCKS {
                layers.push(LayerSpec {
                    kind: "igc_block".to_string(),
                    in_channels: igc.channels,
                    out_channels: igc.channels,
                    kernel: igc.kernel,
                    stride: 1,
                    partitions: Some((igc.primary_partitions, igc.secondary_partitions)),
                });
            }
            layers.push(conv_layer("context_fusion", 64, 128, 4, 1));
            layers.push(conv_layer("conv_relu", 128, 64, 1, 1));
            layers.push(conv_layer("conv_relu_zero_init", 64, 1, 1, 1));
            layers.push(conv_layer("upsample", 1, 1, 8, 1));
            layers
        }
    };
    NetworkSpec { role, layers }
}

// ---------------------------------------------------------------------------
// parameter construction

fn add_conv(
    store: &mut ParamStore,
    init: &mut Initializer,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<()> {
    store.add(&format!("{name}.w"), init.gaussian(&[cout, cin, k, k], cin * k * k))?;
    store.add(&format!("{name}.b"), init.zeros(&[cout]))?;
    Ok(())
}

fn add_frontend(
    store: &mut ParamStore,
    init: &mut Initializer,
    prefix: &str,
    in_channels: usize,
) -> Result<()> {
    let mut cin = in_channels;
    for (i, &cout) in FRONTEND_CHANNELS.iter().enumerate() {
        add_conv(store, init, &format!("{prefix}.c{}", i + 1), cout, cin, 3)?;
        cin = cout;
    }
    Ok(())
}

/// Create all stage-1 parameters (generator, classifier, inverse mapping,
/// both discriminators) with fan-in-scaled Gaussian init.
pub fn add_stage1_params(
    store: &mut ParamStore,
    init: &mut Initializer,
    q: usize,
    m: usize,
) -> Result<()> {
    if m < 2 {
        return Err(Error::invalid("group count m must be >= 2"));
    }
    add_frontend(store, init, "g.front", 1)?;
    add_conv(store, init, "g.head.c5", 64, 64, 3)?;
    add_conv(store, init, "g.head.q", q, 64, 1)?;
    store.add("cls.fc.w", init.gaussian(&[m, 64], 64))?;
    store.add("cls.fc.b", init.zeros(&[m]))?;
    add_conv(store, init, "f.c1", 16, 2, 3)?;
    add_conv(store, init, "f.c2", 32, 16, 3)?;
    add_conv(store, init, "f.c3", 32, 32, 3)?;
    add_conv(store, init, "f.c4", 16, 32, 3)?;
    add_conv(store, init, "f.c5", 1, 16, 1)?;
    for (prefix, cin) in [("dx", 1), ("dz", 2)] {
        add_conv(store, init, &format!("{prefix}.c1"), 16, cin, 3)?;
        add_conv(store, init, &format!("{prefix}.c2"), 32, 16, 3)?;
        add_conv(store, init, &format!("{prefix}.c3"), 64, 32, 3)?;
        store.add(&format!("{prefix}.fc.w"), init.gaussian(&[1, 64], 64))?;
        store.add(&format!("{prefix}.fc.b"), init.zeros(&[1]))?;
    }
    Ok(())
}

/// Create stage-2 counting-net parameters. The frontend starts randomly
/// initialized; [`transfer_first_layer`] overwrites it from a stage-1 store.
pub fn add_counting_params(
    store: &mut ParamStore,
    init: &mut Initializer,
    igc: &IgcBlockSpec,
    blocks: usize,
) -> Result<()> {
    igc.validate()?;
    add_frontend(store, init, "count.front", 3)?;
    let (c, l, m, k) =
        (igc.channels, igc.primary_partitions, igc.secondary_partitions, igc.kernel);
    for i in 1..=blocks {
        store.add(
            &format!("count.igc{i}.primary.w"),
            init.gaussian(&[c, m, k, k], m * k * k),
        )?;
        store.add(&format!("count.igc{i}.secondary.w"), init.gaussian(&[c, l, 1, 1], l))?;
    }
    add_conv(store, init, "count.fuse.c1", 64, 128, 1)?;
    store.add("count.head.w", init.zeros(&[1, 64, 1, 1]))?;
    store.add("count.head.b", init.zeros(&[1]))?;
    Ok(())
}

/// Duplicate the stage-1 frontend's single-channel first-layer kernels
/// across three input channels (copied verbatim, no rescaling) and carry the
/// remaining frontend tensors over unchanged, renamed for the counting net.
pub fn transfer_first_layer(stage1: &ParamStore) -> Result<Vec<(String, ArrayD<f32>)>> {
    let first = stage1
        .id("g.front.c1.w")
        .ok_or_else(|| Error::invalid("stage-1 store has no frontend (g.front.c1.w missing)"))?;
    let w1 = stage1
        .get(first)
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::ShapeMismatch("g.front.c1.w is not 4-d".into()))?;
    let (cout, cin, kh, kw) = w1.dim();
    if cin != 1 {
        return Err(Error::invalid(format!(
            "first layer must consume 1 input channel to be duplicated, found {cin}"
        )));
    }
    let mut w3 = Array4::<f32>::zeros((cout, 3, kh, kw));
    for c in 0..3 {
        w3.slice_mut(ndarray::s![.., c, .., ..]).assign(&w1.index_axis(ndarray::Axis(1), 0));
    }
    let mut out: Vec<(String, ArrayD<f32>)> = vec![("count.front.c1.w".into(), w3.into_dyn())];
    for name in ["c1.b", "c2.w", "c2.b", "c3.w", "c3.b", "c4.w", "c4.b"] {
        let id = stage1
            .id(&format!("g.front.{name}"))
            .ok_or_else(|| Error::invalid(format!("stage-1 store missing g.front.{name}")))?;
        out.push((format!("count.front.{name}"), stage1.get(id).clone()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// tape-level forwards (batched, differentiable)

fn conv_relu(tape: &mut Tape, x: NodeId, name: &str, spec: ConvSpec) -> Result<NodeId> {
    let w = tape.param_id(&format!("{name}.w"))?;
    let b = tape.param_id(&format!("{name}.b"))?;
    let c = tape.conv2d(x, w, Some(b), spec)?;
    Ok(tape.relu(c))
}

fn same_conv() -> ConvSpec {
    ConvSpec { stride: 1, pad: 1, dilation: 1, groups: 1 }
}

fn strided_conv() -> ConvSpec {
    ConvSpec { stride: 2, pad: 1, dilation: 1, groups: 1 }
}

/// Shared 4-block frontend; `prefix` selects `g.front` or `count.front`.
/// Input must already be scaled to roughly [0, 1] per channel.
pub fn frontend(tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
    let f1 = conv_relu(tape, x, &format!("{prefix}.c1"), same_conv())?;
    let f2 = conv_relu(tape, f1, &format!("{prefix}.c2"), strided_conv())?;
    let f3 = conv_relu(tape, f2, &format!("{prefix}.c3"), strided_conv())?;
    conv_relu(tape, f3, &format!("{prefix}.c4"), same_conv())
}

fn check_divisible(h: usize, w: usize, stride: usize) -> Result<()> {
    if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid(format!(
            "spatial size {h}x{w} must be divisible by the network stride {stride}"
        )));
    }
    Ok(())
}

/// Generator trunk + head on raw lightness in [0, 100]; returns
/// (frontend features at 1/4 resolution, per-pixel color logits at full
/// resolution).
pub fn generator_logits(tape: &mut Tape, lightness: NodeId) -> Result<(NodeId, NodeId)> {
    let (_, c, h, w) = tape.value(lightness).dim();
    if c != 1 {
        return Err(Error::ShapeMismatch(format!("generator expects 1 channel, got {c}")));
    }
    check_divisible(h, w, FRONTEND_STRIDE)?;
    let x = tape.scale(lightness, 0.01);
    let feats = frontend(tape, x, "g.front")?;
    let h5 = conv_relu(tape, feats, "g.head.c5", same_conv())?;
    let qw = tape.param_id("g.head.q.w")?;
    let qb = tape.param_id("g.head.q.b")?;
    let logits_low = tape.conv2d(h5, qw, Some(qb), ConvSpec::default())?;
    let logits = tape.upsample(logits_low, FRONTEND_STRIDE)?;
    Ok((feats, logits))
}

/// Group logits from shared frontend features.
pub fn classifier_logits(tape: &mut Tape, feats: NodeId) -> Result<NodeId> {
    let g = tape.global_avg_pool(feats);
    let w = tape.param_id("cls.fc.w")?;
    let b = tape.param_id("cls.fc.b")?;
    tape.linear(g, w, Some(b))
}

/// Inverse mapping on raw chroma in [-110, 110]; returns lightness in
/// [0, 100].
pub fn inverse_lightness(tape: &mut Tape, chroma: NodeId) -> Result<NodeId> {
    let (_, c, h, w) = tape.value(chroma).dim();
    if c != 2 {
        return Err(Error::ShapeMismatch(format!("inverse net expects 2 channels, got {c}")));
    }
    check_divisible(h, w, 2)?;
    let x = tape.scale(chroma, 1.0 / crate::color_space::AB_MAX as f32);
    let a = conv_relu(tape, x, "f.c1", same_conv())?;
    let b = conv_relu(tape, a, "f.c2", strided_conv())?;
    let c3 = conv_relu(tape, b, "f.c3", same_conv())?;
    let u = tape.upsample(c3, 2)?;
    let d = conv_relu(tape, u, "f.c4", same_conv())?;
    let w5 = tape.param_id("f.c5.w")?;
    let b5 = tape.param_id("f.c5.b")?;
    let e = tape.conv2d(d, w5, Some(b5), ConvSpec::default())?;
    let s = tape.sigmoid(e);
    Ok(tape.scale(s, 100.0))
}

/// Discriminator probability in (0, 1), shape (B, 1, 1, 1). `prefix` is
/// `dx` (judging lightness, scaled by 1/100) or `dz` (judging chroma,
/// scaled by 1/110).
pub fn discriminator_score(tape: &mut Tape, input: NodeId, prefix: &str) -> Result<NodeId> {
    let scale = match prefix {
        "dx" => 0.01,
        "dz" => 1.0 / crate::color_space::AB_MAX as f32,
        other => return Err(Error::invalid(format!("unknown discriminator prefix {other:?}"))),
    };
    let x = tape.scale(input, scale);
    let mut cur = x;
    for i in 1..=3 {
        let w = tape.param_id(&format!("{prefix}.c{i}.w"))?;
        let b = tape.param_id(&format!("{prefix}.c{i}.b"))?;
        let c = tape.conv2d(cur, w, Some(b), strided_conv())?;
        cur = tape.leaky_relu(c, LEAKY_SLOPE);
    }
    let g = tape.global_avg_pool(cur);
    let w = tape.param_id(&format!("{prefix}.fc.w"))?;
    let b = tape.param_id(&format!("{prefix}.fc.b"))?;
    let lin = tape.linear(g, w, Some(b))?;
    Ok(tape.sigmoid(lin))
}

/// One interleaved block, returning (pre-residual stage-2 output, block
/// output). Stage 1 convolves spatially within each of the L primary
/// partitions, the shuffle rebuilds M secondary partitions that take one
/// channel from every primary partition, stage 2 convolves point-wise
/// within those, and the input is added back.
pub fn igc_block_nodes(
    tape: &mut Tape,
    x: NodeId,
    spec: &IgcBlockSpec,
    name: &str,
) -> Result<(NodeId, NodeId)> {
    spec.validate()?;
    let (_, c, _, _) = tape.value(x).dim();
    if c != spec.channels {
        return Err(Error::invalid(format!(
            "IGC block configured for {} channels, input has {c}",
            spec.channels
        )));
    }
    let (l, m) = (spec.primary_partitions, spec.secondary_partitions);
    let dilation = if spec.kernel == 1 { 1 } else { IGC_DILATION };
    let primary_spec = ConvSpec {
        stride: 1,
        pad: dilation * (spec.kernel - 1) / 2,
        dilation,
        groups: l,
    };
    let pw = tape.param_id(&format!("{name}.primary.w"))?;
    let p = tape.conv2d(x, pw, None, primary_spec)?;
    let sh = tape.channel_shuffle(p, l, m)?;
    let sw = tape.param_id(&format!("{name}.secondary.w"))?;
    let secondary_spec = ConvSpec { stride: 1, pad: 0, dilation: 1, groups: m };
    let s = tape.conv2d(sh, sw, None, secondary_spec)?;
    let out = tape.add(s, x)?;
    Ok((s, out))
}

pub fn igc_block_forward(
    tape: &mut Tape,
    x: NodeId,
    spec: &IgcBlockSpec,
    name: &str,
) -> Result<NodeId> {
    igc_block_nodes(tape, x, spec, name).map(|(_, out)| out)
}

/// Counting network on RGB in [0, 1]; returns the full-resolution density
/// node (non-negative).
pub fn counting_density(
    tape: &mut Tape,
    rgb: NodeId,
    igc: &IgcBlockSpec,
    blocks: usize,
) -> Result<NodeId> {
    let (_, c, h, w) = tape.value(rgb).dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("counting net expects 3 channels, got {c}")));
    }
    check_divisible(h, w, COUNTING_STRIDE)?;
    let feats = frontend(tape, rgb, "count.front")?;
    let mut cur = tape.avg_pool(feats, 2)?;
    for i in 1..=blocks {
        let block = igc_block_forward(tape, cur, igc, &format!("count.igc{i}"))?;
        cur = tape.relu(block);
    }
    let pooled = tape.avg_pool(cur, 4)?;
    let ctx = tape.upsample(pooled, 4)?;
    let cat = tape.concat(cur, ctx)?;
    let fused = conv_relu(tape, cat, "count.fuse.c1", ConvSpec::default())?;
    let hw = tape.param_id("count.head.w")?;
    let hb = tape.param_id("count.head.b")?;
    let head = tape.conv2d(fused, hw, Some(hb), ConvSpec::default())?;
    let rect = tape.relu(head);
    tape.upsample(rect, 8)
}

/// Codebook centers as an f32 matrix for the differentiable decode.
pub fn centers_f32(codebook: &ColorCodebook) -> Array2<f32> {
    let mut out = Array2::zeros((codebook.centers.len(), 2));
    for (i, c) in codebook.centers.iter().enumerate() {
        out[[i, 0]] = c[0] as f32;
        out[[i, 1]] = c[1] as f32;
    }
    out
}

/// Differentiable chroma readout of generator logits at the annealed-mean
/// temperature.
pub fn decode_node(
    tape: &mut Tape,
    logits: NodeId,
    codebook: &ColorCodebook,
) -> Result<NodeId> {
    tape.annealed_decode(logits, centers_f32(codebook), DEFAULT_TEMPERATURE as f32)
}

// ---------------------------------------------------------------------------
// single-image inference wrappers

fn lightness_tensor(lightness: &Array2<f64>) -> Array4<f32> {
    let (h, w) = lightness.dim();
    let mut out = Array4::zeros((1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            out[[0, 0, y, x]] = lightness[[y, x]] as f32;
        }
    }
    out
}

/// Predict the per-pixel color distribution for one lightness plane.
pub fn colorize_forward(
    store: &ParamStore,
    lightness: &Array2<f64>,
) -> Result<ColorDistribution> {
    let (h, w) = lightness.dim();
    let mut tape = Tape::new(store);
    let x = tape.input(lightness_tensor(lightness));
    let (_, logits) = generator_logits(&mut tape, x)?;
    let lv = tape.value(logits);
    let q = lv.dim().1;
    let mut probs = Array3::<f64>::zeros((h, w, q));
    for y in 0..h {
        for xi in 0..w {
            let mut maxv = f64::NEG_INFINITY;
            for qi in 0..q {
                maxv = maxv.max(lv[[0, qi, y, xi]] as f64);
            }
            let mut sum = 0.0;
            for qi in 0..q {
                let e = ((lv[[0, qi, y, xi]] as f64) - maxv).exp();
                probs[[y, xi, qi]] = e;
                sum += e;
            }
            for qi in 0..q {
                probs[[y, xi, qi]] /= sum;
            }
        }
    }
    ColorDistribution::new(probs)
}

/// Predict lightness from a chroma image (H x W x 2, values in ±110).
pub fn inverse_forward(store: &ParamStore, chroma: &Array3<f64>) -> Result<Array2<f64>> {
    let (h, w, c) = chroma.dim();
    if c != 2 {
        return Err(Error::ShapeMismatch(format!("chroma must be H x W x 2, got {c} planes")));
    }
    let mut input = Array4::zeros((1, 2, h, w));
    for y in 0..h {
        for x in 0..w {
            input[[0, 0, y, x]] = chroma[[y, x, 0]] as f32;
            input[[0, 1, y, x]] = chroma[[y, x, 1]] as f32;
        }
    }
    let mut tape = Tape::new(store);
    let z = tape.input(input);
    let out = inverse_lightness(&mut tape, z)?;
    let v = tape.value(out);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| v[[0, 0, y, x]] as f64))
}

/// Group logits for one lightness plane through the shared encoder.
pub fn classifier_forward(store: &ParamStore, lightness: &Array2<f64>) -> Result<Vec<f64>> {
    let m = store
        .id("cls.fc.w")
        .map(|id| store.get(id).shape()[0])
        .ok_or_else(|| Error::invalid("store has no classifier head (cls.fc.w missing)"))?;
    if m < 2 {
        return Err(Error::invalid(format!("classifier needs m >= 2 groups, found {m}")));
    }
    let mut tape = Tape::new(store);
    let x = tape.input(lightness_tensor(lightness));
    let scaled = tape.scale(x, 0.01);
    let feats = frontend(&mut tape, scaled, "g.front")?;
    let logits = classifier_logits(&mut tape, feats)?;
    let v = tape.value(logits);
    Ok((0..m).map(|i| v[[0, i, 0, 0]] as f64).collect())
}

/// Density prediction for one RGB image.
pub fn count_forward(store: &ParamStore, image: &RgbImage) -> Result<DensityMap> {
    let igc = infer_igc_spec(store)?;
    let blocks = infer_igc_blocks(store);
    let (h, w) = (image.height(), image.width());
    let mut input = Array4::zeros((1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                input[[0, c, y, x]] = image.pixels[[y, x, c]] as f32;
            }
        }
    }
    let mut tape = Tape::new(store);
    let rgb = tape.input(input);
    let out = counting_density(&mut tape, rgb, &igc, blocks)?;
    let v = tape.value(out);
    DensityMap::new(Array2::from_shape_fn((h, w), |(y, x)| {
        (v[[0, 0, y, x]] as f64).max(0.0)
    }))
}

/// Recover the IGC geometry from stored weight shapes.
pub fn infer_igc_spec(store: &ParamStore) -> Result<IgcBlockSpec> {
    let id = store
        .id("count.igc1.primary.w")
        .ok_or_else(|| Error::invalid("store has no counting module (count.igc1 missing)"))?;
    let shape = store.get(id).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch("count.igc1.primary.w is not 4-d".into()));
    }
    let spec = IgcBlockSpec {
        channels: shape[0],
        primary_partitions: shape[0] / shape[1],
        secondary_partitions: shape[1],
        kernel: shape[2],
    };
    spec.validate()?;
    Ok(spec)
}

pub fn infer_igc_blocks(store: &ParamStore) -> usize {
    let mut n = 0;
    while store.id(&format!("count.igc{}.primary.w", n + 1)).is_some() {
        n += 1;
    }
    n
}
