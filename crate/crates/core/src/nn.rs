//! Encoder/predictor models, structured channel selection and cost
//! accounting.
//!
//! A model is split into a shared encoder (communicated and aggregated)
//! and a per-client predictor head (kept private). Layer weights are
//! stored with output channels on the first axis so that salient-row
//! slicing, uploads and aggregation all operate on first-axis slices:
//! conv kernels are `[out, in, kh, kw]`, linear weights `[out, in]`,
//! biases `[out]`.

use crate::autograd::{conv2d_output_shape, AutogradError, NodeId, ParamNodes, Tape};
use crate::params::ParamSet;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Layer descriptors. `ResidualAdd::tap` indexes the activation stream:
/// tap 0 is the stack input, tap i+1 is layer i's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu,
    Flatten,
    ResidualAdd {
        tap: usize,
    },
}

impl Layer {
    pub fn is_maskable(&self) -> bool {
        matches!(self, Layer::Linear { .. } | Layer::Conv2d { .. })
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self {
            Layer::Linear { out_features, .. } => Some(*out_features),
            Layer::Conv2d { out_channels, .. } => Some(*out_channels),
            _ => None,
        }
    }
}

fn weight_name(i: usize) -> String {
    format!("layers.{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("layers.{i}.bias")
}

/// Walk per-sample activation shapes through a layer stack, validating
/// adjacent extents. Returns one shape per activation (input included).
fn activation_shapes(layers: &[Layer], input_shape: &[usize]) -> Result<Vec<Vec<usize>>, ModelError> {
    let mut shapes: Vec<Vec<usize>> = vec![input_shape.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let cur = shapes.last().unwrap().clone();
        let next = match layer {
            Layer::Linear { in_features, out_features, .. } => {
                if cur.len() != 1 || cur[0] != *in_features {
                    return Err(ModelError::Contract(format!(
                        "layer {i}: linear expects [{in_features}], got {cur:?}"
                    )));
                }
                vec![*out_features]
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if cur.len() != 3 || cur[0] != *in_channels {
                    return Err(ModelError::Contract(format!(
                        "layer {i}: conv2d expects [{in_channels},h,w], got {cur:?}"
                    )));
                }
                let out4 = conv2d_output_shape(
                    &[1, cur[0], cur[1], cur[2]],
                    &[*out_channels, *in_channels, *kernel, *kernel],
                    *stride,
                    *padding,
                )?;
                vec![out4[1], out4[2], out4[3]]
            }
            Layer::Relu => cur,
            Layer::Flatten => vec![cur.iter().product()],
            Layer::ResidualAdd { tap } => {
                if *tap >= shapes.len() - 1 {
                    return Err(ModelError::Contract(format!(
                        "layer {i}: residual tap {tap} not strictly earlier than layer output"
                    )));
                }
                if shapes[*tap] != cur {
                    return Err(ModelError::Contract(format!(
                        "layer {i}: residual shapes differ: {:?} vs {cur:?}",
                        shapes[*tap]
                    )));
                }
                cur
            }
        };
        shapes.push(next);
    }
    Ok(shapes)
}

fn init_params<R: rand::Rng>(layers: &[Layer], rng: &mut R) -> ParamSet {
    let mut params = ParamSet::new();
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let bound = 1.0 / (*in_features as f64).sqrt();
                params.insert(
                    weight_name(i),
                    Tensor::rand_uniform(&[*out_features, *in_features], -bound, bound, rng),
                );
                if *bias {
                    params.insert(bias_name(i), Tensor::zeros(&[*out_features]));
                }
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = (in_channels * kernel * kernel) as f64;
                let bound = 1.0 / fan_in.sqrt();
                params.insert(
                    weight_name(i),
                    Tensor::rand_uniform(
                        &[*out_channels, *in_channels, *kernel, *kernel],
                        -bound,
                        bound,
                        rng,
                    ),
                );
                if *bias {
                    params.insert(bias_name(i), Tensor::zeros(&[*out_channels]));
                }
            }
            _ => {}
        }
    }
    params
}

/// Forward a batch through a layer stack on a tape. `prefix` namespaces
/// the parameter lookups (e.g. `encoder.`), and `input` must already be
/// `[batch, ...input_shape]`.
fn forward_stack(
    layers: &[Layer],
    prefix: &str,
    tape: &mut Tape,
    nodes: &ParamNodes,
    input: NodeId,
) -> Result<NodeId, ModelError> {
    let batch = tape.value(input).shape()[0];
    let mut acts: Vec<NodeId> = vec![input];
    for (i, layer) in layers.iter().enumerate() {
        let cur = *acts.last().unwrap();
        let next = match layer {
            Layer::Linear { bias, .. } => {
                let w = nodes.id(&format!("{prefix}{}", weight_name(i)))?;
                let mut h = tape.matmul_nt(cur, w)?;
                if *bias {
                    let b = nodes.id(&format!("{prefix}{}", bias_name(i)))?;
                    h = tape.add_row_broadcast(h, b)?;
                }
                h
            }
            Layer::Conv2d { stride, padding, bias, .. } => {
                let w = nodes.id(&format!("{prefix}{}", weight_name(i)))?;
                let mut h = tape.conv2d(cur, w, *stride, *padding)?;
                if *bias {
                    let b = nodes.id(&format!("{prefix}{}", bias_name(i)))?;
                    h = tape.add_channel_bias(h, b)?;
                }
                h
            }
            Layer::Relu => tape.relu(cur)?,
            Layer::Flatten => {
                let numel: usize = tape.value(cur).shape()[1..].iter().product();
                tape.reshape(cur, &[batch, numel])?
            }
            Layer::ResidualAdd { tap } => tape.add(cur, acts[*tap])?,
        };
        acts.push(next);
    }
    Ok(*acts.last().unwrap())
}

/// Scatter kept channels of the final activation back into the full
/// extent, zero elsewhere. Channel axis is axis 1 of `[batch, c, ...]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputScatter {
    pub full: usize,
    pub kept: Vec<usize>,
}

impl OutputScatter {
    fn apply(&self, value: &Tensor) -> Result<Tensor, ModelError> {
        let shape = value.shape();
        if shape.len() < 2 || shape[1] != self.kept.len() {
            return Err(ModelError::Contract(format!(
                "output scatter expects axis-1 extent {}, got {shape:?}",
                self.kept.len()
            )));
        }
        let batch = shape[0];
        let inner: usize = shape[2..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[1] = self.full;
        let mut out = Tensor::zeros(&out_shape);
        for b in 0..batch {
            for (slot, &ch) in self.kept.iter().enumerate() {
                let src = (b * self.kept.len() + slot) * inner;
                let dst = (b * self.full + ch) * inner;
                out.data_mut()[dst..dst + inner]
                    .copy_from_slice(&value.data()[src..src + inner]);
            }
        }
        Ok(out)
    }
}

/// The globally shared feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    params: ParamSet,
    /// Present only on sub-encoders whose final activation was pruned.
    output_scatter: Option<OutputScatter>,
}

impl Encoder {
    pub fn new<R: rand::Rng>(
        layers: Vec<Layer>,
        input_shape: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        activation_shapes(&layers, &input_shape)?;
        let params = init_params(&layers, rng);
        Ok(Encoder {
            layers,
            input_shape,
            params,
            output_scatter: None,
        })
    }

    pub fn from_parts(
        layers: Vec<Layer>,
        input_shape: Vec<usize>,
        params: ParamSet,
        output_scatter: Option<OutputScatter>,
    ) -> Result<Self, ModelError> {
        activation_shapes(&layers, &input_shape)?;
        check_params_match(&layers, &params)?;
        Ok(Encoder {
            layers,
            input_shape,
            params,
            output_scatter,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<(), ModelError> {
        check_params_match(&self.layers, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn output_scatter(&self) -> Option<&OutputScatter> {
        self.output_scatter.as_ref()
    }

    /// Embedding shape per sample (after any output scatter).
    pub fn output_shape(&self) -> Vec<usize> {
        let shapes = activation_shapes(&self.layers, &self.input_shape).unwrap();
        let mut out = shapes.last().unwrap().clone();
        if let Some(sc) = &self.output_scatter {
            out[0] = sc.full;
        }
        out
    }

    /// Indices of layers whose output channels can be masked.
    pub fn maskable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_maskable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Differentiable forward for training. Rejects sub-encoders with a
    /// pruned output head, which only run inference.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        prefix: &str,
        input: NodeId,
    ) -> Result<NodeId, ModelError> {
        if self.output_scatter.is_some() {
            return Err(ModelError::Contract(
                "sub-encoder with pruned output head is inference-only".into(),
            ));
        }
        self.check_batch_input(tape.value(input).shape())?;
        forward_stack(&self.layers, prefix, tape, nodes, input)
    }

    /// Inference forward: `[batch, ...input_shape] -> [batch, ...embedding]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_batch_input(x.shape())?;
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &self.params)?;
        let input = tape.input(x.clone())?;
        let out = forward_stack(&self.layers, "", &mut tape, &nodes, input)?;
        let value = tape.value(out).clone();
        match &self.output_scatter {
            Some(sc) => sc.apply(&value),
            None => Ok(value),
        }
    }

    fn check_batch_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(ModelError::Contract(format!(
                "input shape {:?} does not match [batch, {:?}]",
                shape, self.input_shape
            )));
        }
        Ok(())
    }

    /// Per-sample FLOPs of a forward pass: a multiply-accumulate counts
    /// as 2, a bias add or relu as 1 per output element, residual adds
    /// as 1 per element, reshapes as 0.
    pub fn count_flops(&self) -> u64 {
        count_stack_flops(&self.layers, &self.input_shape)
    }
}

fn check_params_match(layers: &[Layer], params: &ParamSet) -> Result<(), ModelError> {
    for (i, layer) in layers.iter().enumerate() {
        let want: Vec<(String, Vec<usize>)> = match layer {
            Layer::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![(weight_name(i), vec![*out_features, *in_features])];
                if *bias {
                    v.push((bias_name(i), vec![*out_features]));
                }
                v
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    weight_name(i),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                )];
                if *bias {
                    v.push((bias_name(i), vec![*out_channels]));
                }
                v
            }
            _ => vec![],
        };
        for (name, shape) in want {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Contract(format!(
                        "{name}: expected shape {shape:?}, got {:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Contract(format!("missing parameter {name}"))),
            }
        }
    }
    Ok(())
}

fn count_stack_flops(layers: &[Layer], input_shape: &[usize]) -> u64 {
    let shapes = activation_shapes(layers, input_shape).expect("validated at construction");
    let mut total: u64 = 0;
    for (i, layer) in layers.iter().enumerate() {
        let out_numel: u64 = shapes[i + 1].iter().product::<usize>() as u64;
        total += match layer {
            Layer::Linear {
                in_features,
                out_features,
                bias,
            } => 2 * (*in_features as u64) * (*out_features as u64) + if *bias { *out_features as u64 } else { 0 },
            Layer::Conv2d {
                in_channels,
                kernel,
                bias,
                ..
            } => {
                let per_out = 2 * (*in_channels as u64) * (*kernel as u64) * (*kernel as u64)
                    + if *bias { 1 } else { 0 };
                per_out * out_numel
            }
            Layer::Relu => out_numel,
            Layer::Flatten => 0,
            Layer::ResidualAdd { .. } => out_numel,
        };
    }
    total
}

/// A client-private output head: at least one linear layer, optionally
/// interleaved with relu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    layers: Vec<Layer>,
    input_dim: usize,
    params: ParamSet,
}

impl Predictor {
    pub fn new<R: rand::Rng>(
        layers: Vec<Layer>,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if !layers.iter().any(|l| matches!(l, Layer::Linear { .. })) {
            return Err(ModelError::Contract(
                "predictor needs at least one linear layer".into(),
            ));
        }
        if layers
            .iter()
            .any(|l| !matches!(l, Layer::Linear { .. } | Layer::Relu))
        {
            return Err(ModelError::Contract(
                "predictor layers are linear/relu only".into(),
            ));
        }
        activation_shapes(&layers, &[input_dim])?;
        let params = init_params(&layers, rng);
        Ok(Predictor {
            layers,
            input_dim,
            params,
        })
    }

    pub fn from_parts(
        layers: Vec<Layer>,
        input_dim: usize,
        params: ParamSet,
    ) -> Result<Self, ModelError> {
        activation_shapes(&layers, &[input_dim])?;
        check_params_match(&layers, &params)?;
        Ok(Predictor {
            layers,
            input_dim,
            params,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        activation_shapes(&self.layers, &[self.input_dim]).unwrap()[self.layers.len()][0]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<(), ModelError> {
        check_params_match(&self.layers, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        prefix: &str,
        input: NodeId,
    ) -> Result<NodeId, ModelError> {
        let shape = tape.value(input).shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(ModelError::Contract(format!(
                "predictor expects [batch, {}], got {shape:?}",
                self.input_dim
            )));
        }
        forward_stack(&self.layers, prefix, tape, nodes, input)
    }

    /// Inference forward: `[batch, input_dim] -> [batch, classes]`.
    pub fn forward(&self, e: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &self.params)?;
        let input = tape.input(e.clone())?;
        let out = self.forward_on_tape(&mut tape, &nodes, "", input)?;
        Ok(tape.value(out).clone())
    }

    pub fn count_flops(&self) -> u64 {
        count_stack_flops(&self.layers, &[self.input_dim])
    }
}

/// Number of channels kept for a sparsity ratio: at least one channel
/// always survives, otherwise `round((1 - ratio) * channels)`.
pub fn keep_count(ratio: f64, channels: usize) -> usize {
    let kept = ((1.0 - ratio) * channels as f64).round() as usize;
    kept.clamp(1, channels)
}

/// Kept output channels for one maskable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    /// Index into the encoder's layer list.
    pub layer: usize,
    /// Fraction of output channels pruned; 0 keeps everything.
    pub ratio: f64,
    /// Strictly increasing kept channel indices.
    pub kept: Vec<usize>,
}

impl LayerSelection {
    pub fn keeps_all(&self, channels: usize) -> bool {
        self.kept.len() == channels
    }
}

/// Per-layer kept-channel lists for an encoder; travels with every
/// salient upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientSelection {
    pub layers: Vec<LayerSelection>,
}

/// Maskable layers that must share one mask because a residual add joins
/// their outputs. `forced_full` marks groups tied to the raw input,
/// which cannot be pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGroup {
    pub leader: usize,
    pub members: Vec<usize>,
    pub forced_full: bool,
}

/// Walk back from an activation index to the maskable layer that decides
/// its channels, looking through relu and residual adds.
fn channel_producer(layers: &[Layer], act: usize) -> Option<usize> {
    let mut a = act;
    while a > 0 {
        let l = a - 1;
        match &layers[l] {
            Layer::Linear { .. } | Layer::Conv2d { .. } => return Some(l),
            Layer::Relu | Layer::ResidualAdd { .. } => a = l,
            Layer::Flatten => return None,
        }
    }
    None
}

/// Group maskable layers whose masks are tied by residual connections.
pub fn mask_groups(enc: &Encoder) -> Vec<MaskGroup> {
    let maskable = enc.maskable_layers();
    let pos = |layer: usize| maskable.iter().position(|&m| m == layer);
    let mut parent: Vec<usize> = (0..maskable.len()).collect();
    let mut forced: Vec<bool> = vec![false; maskable.len()];

    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }

    for (i, layer) in enc.layers().iter().enumerate() {
        if let Layer::ResidualAdd { tap } = layer {
            let left = channel_producer(enc.layers(), i).and_then(&pos);
            let right = channel_producer(enc.layers(), *tap).and_then(&pos);
            match (left, right) {
                (Some(a), Some(b)) => {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        let keep = ra.min(rb);
                        let drop = ra.max(rb);
                        parent[drop] = keep;
                    }
                }
                (Some(a), None) => forced[find(&mut parent, a)] = true,
                (None, Some(b)) => forced[find(&mut parent, b)] = true,
                (None, None) => {}
            }
        }
    }

    let mut groups: Vec<MaskGroup> = Vec::new();
    for i in 0..maskable.len() {
        let root = find(&mut parent, i);
        if let Some(g) = groups.iter_mut().find(|g| g.leader == maskable[root]) {
            g.members.push(maskable[i]);
        } else {
            groups.push(MaskGroup {
                leader: maskable[root],
                members: vec![maskable[i]],
                forced_full: false,
            });
        }
    }
    for g in &mut groups {
        let root = pos(g.leader).unwrap();
        g.forced_full = forced[find(&mut parent, root)];
    }
    groups
}

impl SalientSelection {
    /// Selection that keeps every channel of every maskable layer.
    pub fn all_keep(enc: &Encoder) -> SalientSelection {
        let layers = enc
            .maskable_layers()
            .into_iter()
            .map(|l| {
                let c = enc.layers()[l].out_channels().unwrap();
                LayerSelection {
                    layer: l,
                    ratio: 0.0,
                    kept: (0..c).collect(),
                }
            })
            .collect();
        SalientSelection { layers }
    }

    /// Rank output channels of each maskable layer by the L2 norm of the
    /// layer's weight rows (ties to the lower index) and keep the top
    /// `(1 - ratio)` fraction, floored at one channel. Residual-tied
    /// layers share the leader's ratio and kept set; groups tied to the
    /// input keep everything.
    pub fn from_ratios(enc: &Encoder, ratios: &[f64]) -> Result<SalientSelection, ModelError> {
        let maskable = enc.maskable_layers();
        if ratios.len() != maskable.len() {
            return Err(ModelError::Contract(format!(
                "{} ratios for {} maskable layers",
                ratios.len(),
                maskable.len()
            )));
        }
        if let Some(bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(ModelError::Contract(format!("sparsity ratio {bad} outside [0,1]")));
        }
        let groups = mask_groups(enc);
        let mut selections: Vec<Option<LayerSelection>> = vec![None; maskable.len()];
        for g in &groups {
            let leader_pos = maskable.iter().position(|&m| m == g.leader).unwrap();
            let channels = enc.layers()[g.leader].out_channels().unwrap();
            for &member in &g.members {
                let mc = enc.layers()[member].out_channels().unwrap();
                if mc != channels {
                    return Err(ModelError::Contract(format!(
                        "residual-tied layers {} and {} have {channels} vs {mc} channels",
                        g.leader, member
                    )));
                }
            }
            let (ratio, kept) = if g.forced_full {
                (0.0, (0..channels).collect::<Vec<_>>())
            } else {
                let ratio = ratios[leader_pos];
                let k = keep_count(ratio, channels);
                let norms = enc
                    .params()
                    .get(&weight_name(g.leader))
                    .expect("maskable layer has a weight")
                    .row_l2_norms();
                let mut order: Vec<usize> = (0..channels).collect();
                order.sort_by(|&a, &b| {
                    norms[b]
                        .partial_cmp(&norms[a])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let mut kept: Vec<usize> = order[..k].to_vec();
                kept.sort_unstable();
                (ratio, kept)
            };
            for &member in &g.members {
                let mpos = maskable.iter().position(|&m| m == member).unwrap();
                selections[mpos] = Some(LayerSelection {
                    layer: member,
                    ratio,
                    kept: kept.clone(),
                });
            }
        }
        Ok(SalientSelection {
            layers: selections.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn for_layer(&self, layer: usize) -> Option<&LayerSelection> {
        self.layers.iter().find(|s| s.layer == layer)
    }

    /// Mean sparsity ratio across maskable layers.
    pub fn mean_ratio(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.ratio).sum::<f64>() / self.layers.len() as f64
    }

    pub fn validate(&self, enc: &Encoder) -> Result<(), ModelError> {
        let maskable = enc.maskable_layers();
        if self.layers.len() != maskable.len()
            || self.layers.iter().zip(&maskable).any(|(s, &m)| s.layer != m)
        {
            return Err(ModelError::Contract(
                "selection does not cover the encoder's maskable layers".into(),
            ));
        }
        for s in &self.layers {
            let channels = enc.layers()[s.layer].out_channels().unwrap();
            if s.kept.is_empty() || s.kept.len() != keep_count(s.ratio, channels) {
                return Err(ModelError::Contract(format!(
                    "layer {}: {} kept indices inconsistent with ratio {}",
                    s.layer,
                    s.kept.len(),
                    s.ratio
                )));
            }
            if s.kept.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ModelError::Contract(format!(
                    "layer {}: kept indices not strictly increasing",
                    s.layer
                )));
            }
            if *s.kept.last().unwrap() >= channels {
                return Err(ModelError::Contract(format!(
                    "layer {}: kept index {} out of range for {channels} channels",
                    s.layer,
                    s.kept.last().unwrap()
                )));
            }
        }
        for g in mask_groups(enc) {
            let leader = self.for_layer(g.leader).unwrap();
            for &m in &g.members {
                if self.for_layer(m).unwrap().kept != leader.kept {
                    return Err(ModelError::Contract(format!(
                        "residual-tied layers {} and {m} have different masks",
                        g.leader
                    )));
                }
            }
        }
        Ok(())
    }
}

fn slice_rows_cols(
    t: &Tensor,
    rows: Option<&[usize]>,
    cols: Option<&[usize]>,
    col_block: usize,
) -> Tensor {
    let nrows = t.shape()[0];
    let row_numel = t.row_numel();
    let all_rows: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all_rows = (0..nrows).collect();
            &all_rows
        }
    };
    match cols {
        None => t.take_rows(rows).unwrap(),
        Some(cols) => {
            let mut data = Vec::with_capacity(rows.len() * cols.len() * col_block);
            for &r in rows {
                let row = t.row(r).unwrap();
                for &c in cols {
                    data.extend_from_slice(&row[c * col_block..(c + 1) * col_block]);
                }
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            shape[1] = cols.len();
            debug_assert_eq!(row_numel % (t.shape()[1] * col_block), 0);
            Tensor::from_vec(shape, data).unwrap()
        }
    }
}

/// Build the sub-encoder a selection describes: kept output channels of
/// each maskable layer, matching input channels of the next, and a
/// zero-scatter back to the full embedding extent if the final layer was
/// pruned. Its forward equals the full encoder's forward with pruned
/// channels zeroed after each masked layer.
pub fn apply_selection(enc: &Encoder, sel: &SalientSelection) -> Result<Encoder, ModelError> {
    sel.validate(enc)?;
    if enc.output_scatter().is_some() {
        return Err(ModelError::Contract(
            "cannot select on an already-pruned sub-encoder".into(),
        ));
    }
    let shapes = activation_shapes(enc.layers(), enc.input_shape())?;

    let mut new_layers = Vec::with_capacity(enc.layers().len());
    let mut new_params = ParamSet::new();
    // kept positions of the current activation's leading axis, None = all
    let mut in_keep: Option<Vec<usize>> = None;
    // keep state per activation index, for residual validation
    let mut act_keep: Vec<Option<Vec<usize>>> = vec![None];

    for (i, layer) in enc.layers().iter().enumerate() {
        match layer {
            Layer::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let s = sel.for_layer(i).unwrap();
                let w = enc.params().get(&weight_name(i)).unwrap();
                let sliced = slice_rows_cols(w, Some(&s.kept), in_keep.as_deref(), 1);
                let new_in = in_keep.as_ref().map_or(*in_features, Vec::len);
                new_layers.push(Layer::Linear {
                    in_features: new_in,
                    out_features: s.kept.len(),
                    bias: *bias,
                });
                new_params.insert(weight_name(i), sliced);
                if *bias {
                    let b = enc.params().get(&bias_name(i)).unwrap();
                    new_params.insert(bias_name(i), b.take_rows(&s.kept)?);
                }
                in_keep = if s.keeps_all(*out_features) {
                    None
                } else {
                    Some(s.kept.clone())
                };
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let s = sel.for_layer(i).unwrap();
                let w = enc.params().get(&weight_name(i)).unwrap();
                let sliced = slice_rows_cols(w, Some(&s.kept), in_keep.as_deref(), kernel * kernel);
                let new_in = in_keep.as_ref().map_or(*in_channels, Vec::len);
                new_layers.push(Layer::Conv2d {
                    in_channels: new_in,
                    out_channels: s.kept.len(),
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    bias: *bias,
                });
                new_params.insert(weight_name(i), sliced);
                if *bias {
                    let b = enc.params().get(&bias_name(i)).unwrap();
                    new_params.insert(bias_name(i), b.take_rows(&s.kept)?);
                }
                in_keep = if s.keeps_all(*out_channels) {
                    None
                } else {
                    Some(s.kept.clone())
                };
            }
            Layer::Relu => new_layers.push(Layer::Relu),
            Layer::Flatten => {
                // channel keep expands to flat positions over the spatial block
                if let Some(keep) = &in_keep {
                    let cur = &shapes[i];
                    let block: usize = cur[1..].iter().product::<usize>().max(1);
                    in_keep = Some(
                        keep.iter()
                            .flat_map(|&c| c * block..(c + 1) * block)
                            .collect(),
                    );
                }
                new_layers.push(Layer::Flatten);
            }
            Layer::ResidualAdd { tap } => {
                if act_keep[*tap] != in_keep {
                    return Err(ModelError::Contract(format!(
                        "layer {i}: residual streams carry different masks"
                    )));
                }
                new_layers.push(Layer::ResidualAdd { tap: *tap });
            }
        }
        act_keep.push(in_keep.clone());
    }

    let output_scatter = in_keep.map(|kept| OutputScatter {
        full: shapes.last().unwrap()[0],
        kept,
    });
    Encoder::from_parts(
        new_layers,
        enc.input_shape().to_vec(),
        new_params,
        output_scatter,
    )
}

/// Serialized size of a param set at a wire precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WirePrecision {
    F32,
    F64,
}

impl WirePrecision {
    pub fn bytes(self) -> u64 {
        match self {
            WirePrecision::F32 => 4,
            WirePrecision::F64 => 8,
        }
    }
}

/// Bytes to ship a param set: element count times precision.
pub fn param_bytes(ps: &ParamSet, precision: WirePrecision) -> u64 {
    ps.numel() as u64 * precision.bytes()
}

/// Bytes per kept-channel index on the wire.
pub const INDEX_BYTES: u64 = 4;

/// `param_bytes` plus 32-bit index lists for the named masked tensors.
pub fn param_bytes_with_indices(
    ps: &ParamSet,
    precision: WirePrecision,
    index_counts: &[(&str, usize)],
) -> Result<u64, ModelError> {
    let mut total = param_bytes(ps, precision);
    for (name, count) in index_counts {
        if ps.get(name).is_none() {
            return Err(ModelError::Contract(format!(
                "index overhead for unknown tensor {name}"
            )));
        }
        total += *count as u64 * INDEX_BYTES;
    }
    Ok(total)
}
