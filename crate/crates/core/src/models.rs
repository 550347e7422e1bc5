//! Feed-forward architectures: bias-free MLPs (`D-W-...-C`) and Conv-FC
//! networks, with parameter flattening and homogeneity accounting.
//!
//! Networks are bias-free by default, which makes them positively
//! homogeneous in the parameters: `Φ(cθ; x) = c^L Φ(θ; x)` with `L` the
//! number of weight layers. Biases can be enabled per layer, at the cost of
//! homogeneity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardMode, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense { input: usize, output: usize, bias: bool },
    /// Stride 1, no padding; the spatial output feeds the next dense layer
    /// flattened.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, bias: bool },
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InputShape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    /// Flattened input dimension `d`.
    pub fn dim(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<Layer>,
}

/// Shape of the tensor flowing between layers while building the forward
/// graph.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Feat {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl Feat {
    fn dim(self) -> usize {
        match self {
            Feat::Flat(d) => d,
            Feat::Image { channels, height, width } => channels * height * width,
        }
    }
}

impl ModelSpec {
    /// Bias-free MLP `D-W1-...-Wk-C` with ReLU between dense layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense { input: prev, output: h, bias: false });
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense { input: prev, output: outputs, bias: false });
        ModelSpec { input: InputShape::Flat(input_dim), layers }
    }

    /// Bias-free `Conv(k, C_out)-hidden...-C` network on image input; the
    /// conv output is flattened straight into the first dense layer.
    pub fn conv_net(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        out_channels: usize,
        hidden: &[usize],
        outputs: usize,
    ) -> Self {
        let mut layers = vec![
            Layer::Conv2d { in_channels: channels, out_channels, kernel, bias: false },
            Layer::Relu,
        ];
        let oh = height - kernel + 1;
        let ow = width - kernel + 1;
        let mut prev = out_channels * oh * ow;
        for &h in hidden {
            layers.push(Layer::Dense { input: prev, output: h, bias: false });
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense { input: prev, output: outputs, bias: false });
        ModelSpec { input: InputShape::Image { channels, height, width }, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input.dim()
    }

    pub fn has_conv(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Conv2d { .. }))
    }

    /// Walks the layer list checking that adjacent shapes compose; returns
    /// the output feature shape.
    fn infer_shapes(&self) -> Result<Feat> {
        let mut cur = match self.input {
            InputShape::Flat(d) => Feat::Flat(d),
            InputShape::Image { channels, height, width } => Feat::Image { channels, height, width },
        };
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                Layer::Dense { input, output, .. } => {
                    if cur.dim() != input {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: dense expects {input} inputs, previous layer provides {}",
                            cur.dim()
                        )));
                    }
                    Feat::Flat(output)
                }
                Layer::Conv2d { in_channels, out_channels, kernel, .. } => match cur {
                    Feat::Image { channels, height, width } if channels == in_channels => {
                        if kernel == 0 || kernel > height || kernel > width {
                            return Err(Error::ShapeMismatch(format!(
                                "layer {i}: kernel {kernel} does not fit a {height}x{width} input"
                            )));
                        }
                        Feat::Image {
                            channels: out_channels,
                            height: height - kernel + 1,
                            width: width - kernel + 1,
                        }
                    }
                    _ => {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: conv expects an image with {in_channels} channels"
                        )))
                    }
                },
                Layer::Relu => cur,
            };
        }
        Ok(cur)
    }

    pub fn validate(&self) -> Result<()> {
        self.infer_shapes().map(|_| ())
    }

    pub fn output_dim(&self) -> usize {
        self.infer_shapes().map(|f| f.dim()).unwrap_or(0)
    }

    /// Homogeneity degree `L` = number of parameterized layers, defined only
    /// when every layer is bias-free.
    pub fn homogeneity_degree(&self) -> Result<usize> {
        let mut degree = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => {
                    if bias {
                        return Err(Error::NotHomogeneous(format!("layer {i} has a bias term")));
                    }
                    degree += 1;
                }
                Layer::Relu => {}
            }
        }
        Ok(degree)
    }

    pub fn param_layout(&self) -> ParamLayout {
        let mut slots = Vec::new();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut push = |kind: ParamKind, shape: Vec<usize>| {
                let count: usize = shape.iter().product();
                slots.push(ParamSlot { layer: i, kind, offset, shape });
                offset += count;
            };
            match *layer {
                Layer::Dense { input, output, bias } => {
                    push(ParamKind::Weight, vec![input, output]);
                    if bias {
                        push(ParamKind::Bias, vec![output]);
                    }
                }
                Layer::Conv2d { in_channels, out_channels, kernel, bias } => {
                    push(ParamKind::Weight, vec![out_channels, in_channels, kernel, kernel]);
                    if bias {
                        push(ParamKind::Bias, vec![out_channels]);
                    }
                }
                Layer::Relu => {}
            }
        }
        ParamLayout { slots, total: offset }
    }

    /// Appends the forward computation to `tape`. `x` is a `[n, d]` node and
    /// `params` holds one node per layout slot; returns the `[n, C]` logits
    /// node. Shapes are asserted; call [`ModelSpec::validate`] first for a
    /// `Result`-valued check.
    pub fn build_forward(&self, tape: &mut Tape, x: NodeId, params: &[NodeId]) -> NodeId {
        let layout = self.param_layout();
        assert_eq!(params.len(), layout.slots.len(), "one param node per layout slot");
        let n = tape.shape(x)[0];
        let mut cur = x;
        let mut feat = match self.input {
            InputShape::Flat(d) => Feat::Flat(d),
            InputShape::Image { channels, height, width } => Feat::Image { channels, height, width },
        };
        let mut slot = 0;
        let mut ones: Option<NodeId> = None;
        let mut ones_node = |tape: &mut Tape| {
            *ones.get_or_insert_with(|| tape.constant(Tensor::full(vec![n, 1], 1.0)))
        };
        for layer in &self.layers {
            match *layer {
                Layer::Dense { input, output, bias } => {
                    if let Feat::Image { .. } = feat {
                        cur = tape.reshape(cur, vec![n, feat.dim()]);
                    }
                    assert_eq!(feat.dim(), input);
                    let w = params[slot];
                    slot += 1;
                    cur = tape.matmul(cur, w, false, false);
                    if bias {
                        let b = params[slot];
                        slot += 1;
                        let b_row = tape.reshape(b, vec![1, output]);
                        let ones = ones_node(tape);
                        let tiled = tape.matmul(ones, b_row, false, false);
                        cur = tape.add(cur, tiled);
                    }
                    feat = Feat::Flat(output);
                }
                Layer::Conv2d { in_channels, out_channels, kernel, bias } => {
                    let (h, w_in) = match feat {
                        Feat::Image { channels, height, width } => {
                            assert_eq!(channels, in_channels);
                            (height, width)
                        }
                        Feat::Flat(_) => panic!("conv layer on flat features"),
                    };
                    cur = tape.reshape(cur, vec![n, in_channels, h, w_in]);
                    let w = params[slot];
                    slot += 1;
                    cur = tape.conv2d(cur, w);
                    let (oh, ow) = (h - kernel + 1, w_in - kernel + 1);
                    if bias {
                        let b = params[slot];
                        slot += 1;
                        // replicate b per channel across the spatial map,
                        // then tile over the batch with a rank-1 matmul
                        let per_chan = tape.col_broadcast(b, oh * ow);
                        let row = tape.reshape(per_chan, vec![1, out_channels * oh * ow]);
                        let ones = ones_node(tape);
                        let tiled = tape.matmul(ones, row, false, false);
                        let tiled = tape.reshape(tiled, vec![n, out_channels, oh, ow]);
                        cur = tape.add(cur, tiled);
                    }
                    feat = Feat::Image { channels: out_channels, height: oh, width: ow };
                }
                Layer::Relu => {
                    cur = tape.relu(cur);
                }
            }
        }
        if let Feat::Image { .. } = feat {
            cur = tape.reshape(cur, vec![n, feat.dim()]);
        }
        cur
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flattening map between the parameter vector `θ ∈ R^p` and per-layer
/// tensors, in declared layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub slots: Vec<ParamSlot>,
    pub total: usize,
}

/// The flattened parameter vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn from_flat(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} entries, layout expects {}",
                data.len(),
                layout.total
            )));
        }
        Ok(ParamVector { data, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let data = vec![0.0; layout.total];
        ParamVector { data, layout }
    }

    pub fn from_tensors(layout: ParamLayout, tensors: &[Tensor]) -> Self {
        assert_eq!(tensors.len(), layout.slots.len());
        let mut data = vec![0.0; layout.total];
        for (slot, t) in layout.slots.iter().zip(tensors) {
            assert_eq!(slot.shape, t.shape(), "slot/tensor shape mismatch");
            data[slot.offset..slot.offset + slot.count()].copy_from_slice(t.data());
        }
        ParamVector { data, layout }
    }

    /// Per-slot tensors; `from_tensors(layout, &tensors())` is the identity.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layout
            .slots
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), self.data[s.offset..s.offset + s.count()].to_vec()))
            .collect()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn flat_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data)
    }

    /// Total parameter count `p`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn scaled(&self, c: f64) -> Self {
        ParamVector { data: self.data.iter().map(|v| c * v).collect(), layout: self.layout.clone() }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Gaussian with std `1/sqrt(fan_in)` per layer; biases start at zero.
    Standard,
    /// Standard init with the first weight layer rescaled to the given
    /// empirical std.
    SmallFirstLayer { scale: f64 },
}

/// Draws parameters for `spec`; reproducible per seed.
pub fn init_params(spec: &ModelSpec, scheme: InitScheme, seed: u64) -> Result<ParamVector> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    if let InitScheme::SmallFirstLayer { scale } = scheme {
        if !(scale > 0.0) {
            return Err(Error::InvalidConfig(format!("init scale must be positive, got {scale}")));
        }
    }
    spec.validate()?;
    let layout = spec.param_layout();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; layout.total];
    let mut first_weight = true;
    for slot in &layout.slots {
        match slot.kind {
            ParamKind::Bias => {} // zeros
            ParamKind::Weight => {
                let fan_in: usize = match slot.shape.len() {
                    2 => slot.shape[0],
                    4 => slot.shape[1] * slot.shape[2] * slot.shape[3],
                    _ => unreachable!("weight slots are rank 2 or 4"),
                };
                let std = match scheme {
                    InitScheme::SmallFirstLayer { scale } if first_weight => scale,
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                for v in &mut data[slot.offset..slot.offset + slot.count()] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * std;
                }
                first_weight = false;
            }
        }
    }
    ParamVector::from_flat(layout, data)
}

/// Scalar functional of the network output whose parameter gradient feeds
/// the reconstruction losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Functional {
    /// `Φ_j(x; θ)`.
    Output { class: usize },
    /// `y · Φ(x; θ)` for scalar-output models, y ∈ {−1, +1}.
    SignedOutput { y: f64 },
    /// `Φ_y(x; θ) − max_{j≠y} Φ_j(x; θ)`.
    MarginGap { class: usize },
}

/// Forward + selected scalar + its parameter gradient, kept as live tape
/// nodes so callers can differentiate through the gradient with respect to
/// the input.
pub struct ParamGradientGraph {
    pub tape: Tape,
    /// `[1, d]` input leaf.
    pub x: NodeId,
    pub scalar: NodeId,
    /// One gradient node per layout slot.
    pub grads: Vec<NodeId>,
}

/// Builds the gradient graph of `functional` with respect to every
/// parameter slot, evaluated at `params`, with `x` left as a leaf.
pub fn param_gradient_graph(
    spec: &ModelSpec,
    params: &ParamVector,
    functional: Functional,
    mode: BackwardMode,
) -> Result<ParamGradientGraph> {
    spec.validate()?;
    let c = spec.output_dim();
    match functional {
        Functional::Output { class } | Functional::MarginGap { class } => {
            if class >= c {
                return Err(Error::InvalidLabel(format!("class {class} out of range for {c} outputs")));
            }
            if matches!(functional, Functional::MarginGap { .. }) && c < 2 {
                return Err(Error::ArityMismatch("margin gap needs at least 2 outputs".into()));
            }
        }
        Functional::SignedOutput { y } => {
            if c != 1 {
                return Err(Error::ArityMismatch(format!(
                    "signed output expects a scalar model, got {c} outputs"
                )));
            }
            if y != 1.0 && y != -1.0 {
                return Err(Error::InvalidLabel(format!("signed output label must be ±1, got {y}")));
            }
        }
    }

    let mut tape = Tape::new();
    let x = tape.leaf(vec![1, spec.input_dim()]);
    let param_nodes: Vec<NodeId> =
        params.tensors().into_iter().map(|t| tape.constant(t)).collect();
    let logits = spec.build_forward(&mut tape, x, &param_nodes);
    let scalar = scalar_functional(&mut tape, logits, functional);
    let grads = tape.gradient(scalar, &param_nodes, mode)?;
    Ok(ParamGradientGraph { tape, x, scalar, grads })
}

pub(crate) fn scalar_functional(tape: &mut Tape, logits: NodeId, functional: Functional) -> NodeId {
    use std::sync::Arc;
    match functional {
        Functional::Output { class } => {
            let sel = tape.row_select(logits, Arc::new(vec![class]));
            tape.sum(sel)
        }
        Functional::SignedOutput { y } => {
            let s = tape.sum(logits);
            tape.scale(s, y)
        }
        Functional::MarginGap { class } => {
            let idx = Arc::new(vec![class]);
            let own = tape.row_select(logits, idx.clone());
            let other = tape.row_max_excluding(logits, idx);
            let gap = tape.sub(own, other);
            tape.sum(gap)
        }
    }
}

/// Flattened `∇_θ` of the selected functional at a single sample `x`.
pub fn param_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Tensor,
    functional: Functional,
    mode: BackwardMode,
) -> Result<Tensor> {
    let d = spec.input_dim();
    if x.len() != d {
        return Err(Error::ShapeMismatch(format!("sample has {} entries, model expects {d}", x.len())));
    }
    let graph = param_gradient_graph(spec, params, functional, mode)?;
    let xb = Tensor::new(vec![1, d], x.data().to_vec());
    let values = graph.tape.eval(&[(graph.x, &xb)], &graph.grads)?;
    let mut flat = vec![0.0; params.len()];
    for (slot, v) in params.layout().slots.iter().zip(&values) {
        flat[slot.offset..slot.offset + slot.count()].copy_from_slice(v.data());
    }
    Ok(Tensor::from_slice(&flat))
}

/// Batched forward pass: `x` is `[n, d]`, the result is `[n, C]`.
pub fn network_forward(spec: &ModelSpec, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    if x.rank() != 2 || x.shape()[1] != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input shape {:?} does not match model input dimension {}",
            x.shape(),
            spec.input_dim()
        )));
    }
    if params.layout() != &spec.param_layout() {
        return Err(Error::ShapeMismatch("parameter layout does not match the spec".into()));
    }
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let param_nodes: Vec<NodeId> = params.tensors().into_iter().map(|t| tape.constant(t)).collect();
    let logits = spec.build_forward(&mut tape, xn, &param_nodes);
    Ok(tape.eval(&[], &[logits])?.pop().unwrap())
}

/// Forward pass for one flat sample; returns the `C` outputs.
pub fn forward_one(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let xb = Tensor::new(vec![1, x.len()], x.to_vec());
    Ok(network_forward(spec, params, &xb)?.into_data())
}
