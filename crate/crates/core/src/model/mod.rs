//! Encoder, router head and contrast head.
//!
//! All trainable values live in one flat vector laid out as
//! `[encoder | router | contrast head]`, so optimizers, gradient checks and
//! checkpoints can treat the model as a single parameter array.

mod layers;

use std::ops::Range;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{RoutingTensor, TreeTopology};
use layers::{back_sequence, run_eval, run_train, Cache, ImageShape, Layer, Linear, ParamBuilder};

/// Router logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before the sigmoid.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Rows per chunk for evaluation-mode forward passes.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Two hidden layers of width 128 with ReLU.
    MlpSmall,
    /// Three stride-2 conv/batch-norm/ReLU blocks and a linear read-out.
    CnnSmall,
    Resnet18,
    Resnet34,
    Resnet50,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::MlpSmall => "mlp-small",
            Architecture::CnnSmall => "cnn-small",
            Architecture::Resnet18 => "resnet18",
            Architecture::Resnet34 => "resnet34",
            Architecture::Resnet50 => "resnet50",
        }
    }
}

/// Shape of one input sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    /// Flattened length of one sample.
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub architecture: Architecture,
    pub input: InputShape,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastMode {
    #[default]
    Identity,
    TwoLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastHeadSpec {
    pub mode: ContrastMode,
    /// `M`. Must equal the embedding width in identity mode.
    pub output_dim: usize,
    /// Hidden width of the two-layer head.
    pub hidden_dim: usize,
}

impl ContrastHeadSpec {
    pub fn identity(embed_dim: usize) -> Self {
        Self {
            mode: ContrastMode::Identity,
            output_dim: embed_dim,
            hidden_dim: embed_dim,
        }
    }

    pub fn two_layer(embed_dim: usize, output_dim: usize) -> Self {
        Self {
            mode: ContrastMode::TwoLayer,
            output_dim,
            hidden_dim: embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    /// Tree depth `T`; the router has `2^T - 1` outputs.
    pub depth: usize,
    pub contrast: ContrastHeadSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        if enc.embed_dim == 0 {
            return Err(Error::config("encoder.embed_dim", "must be at least 1"));
        }
        if enc.input.is_empty() {
            return Err(Error::config("encoder.input", "input has no features"));
        }
        match (enc.architecture, enc.input) {
            (Architecture::MlpSmall, _) => {}
            (arch, InputShape::Vector { .. }) => {
                return Err(Error::config(
                    "encoder.architecture",
                    format!("{} needs image input", arch.tag()),
                ))
            }
            (_, InputShape::Image { height, width, .. }) if height < 4 || width < 4 => {
                return Err(Error::config("encoder.input", "images must be at least 4x4"))
            }
            _ => {}
        }
        if self.depth == 0 || self.depth > crate::tree::MAX_DEPTH {
            return Err(Error::config("tree.depth", format!("must be in 1..={}", crate::tree::MAX_DEPTH)));
        }
        let c = &self.contrast;
        if c.output_dim == 0 || c.hidden_dim == 0 {
            return Err(Error::config("encoder.contrast", "head widths must be at least 1"));
        }
        if c.mode == ContrastMode::Identity && c.output_dim != enc.embed_dim {
            return Err(Error::config(
                "encoder.contrast.output_dim",
                format!(
                    "identity head requires output_dim == embed_dim ({} != {})",
                    c.output_dim, enc.embed_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn num_internal(&self) -> usize {
        (1 << self.depth) - 1
    }
}

/// Index ranges of the three parameter groups in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroups {
    pub encoder: Range<usize>,
    pub router: Range<usize>,
    pub contrast: Range<usize>,
}

/// Encoder `g`, router head and contrast head with their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    encoder: Vec<Layer>,
    router: Linear,
    contrast: Vec<Layer>,
    params: Vec<f64>,
    buffers: Vec<f64>,
    groups: ParamGroups,
}

fn image_shape(input: InputShape) -> ImageShape {
    match input {
        InputShape::Image {
            channels,
            height,
            width,
        } => ImageShape {
            c: channels,
            h: height,
            w: width,
        },
        InputShape::Vector { dim } => ImageShape { c: 1, h: 1, w: dim },
    }
}

fn build_encoder<R: rand::Rng>(b: &mut ParamBuilder<'_, R>, spec: &EncoderSpec) -> Vec<Layer> {
    let n = spec.embed_dim;
    match spec.architecture {
        Architecture::MlpSmall => vec![
            b.linear(spec.input.len(), 128),
            Layer::Relu,
            b.linear(128, 128),
            Layer::Relu,
            b.linear(128, n),
        ],
        Architecture::CnnSmall => {
            let mut shape = image_shape(spec.input);
            let mut layers = Vec::new();
            for width in [16, 32, 64] {
                let conv = b.conv(shape, width, 3, 2, 1);
                shape = conv.output_shape();
                layers.push(Layer::Conv2d(conv));
                layers.push(b.batch_norm(width, shape.h * shape.w));
                layers.push(Layer::Relu);
            }
            layers.push(b.linear(shape.len(), n));
            layers
        }
        Architecture::Resnet18 => resnet(b, spec, &[2, 2, 2, 2], false),
        Architecture::Resnet34 => resnet(b, spec, &[3, 4, 6, 3], false),
        Architecture::Resnet50 => resnet(b, spec, &[3, 4, 6, 3], true),
    }
}

fn conv_bn<R: rand::Rng>(
    b: &mut ParamBuilder<'_, R>,
    shape: ImageShape,
    out_c: usize,
    k: usize,
    stride: usize,
) -> (Vec<Layer>, ImageShape) {
    let conv = b.conv(shape, out_c, k, stride, k / 2);
    let out = conv.output_shape();
    (vec![Layer::Conv2d(conv), b.batch_norm(out_c, out.h * out.w)], out)
}

/// Residual network with a 3x3 stem (no max-pool), suited to small images.
fn resnet<R: rand::Rng>(b: &mut ParamBuilder<'_, R>, spec: &EncoderSpec, blocks: &[usize], bottleneck: bool) -> Vec<Layer> {
    let (mut layers, mut shape) = conv_bn(b, image_shape(spec.input), 64, 3, 1);
    layers.push(Layer::Relu);
    let expansion = if bottleneck { 4 } else { 1 };
    for (stage, (&count, width)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
        for i in 0..count {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let out_c = width * expansion;
            let input = shape;
            let mut main = Vec::new();
            if bottleneck {
                let (l, s1) = conv_bn(b, input, width, 1, 1);
                main.extend(l);
                main.push(Layer::Relu);
                let (l, s2) = conv_bn(b, s1, width, 3, stride);
                main.extend(l);
                main.push(Layer::Relu);
                let (l, s3) = conv_bn(b, s2, out_c, 1, 1);
                main.extend(l);
                shape = s3;
            } else {
                let (l, s1) = conv_bn(b, input, width, 3, stride);
                main.extend(l);
                main.push(Layer::Relu);
                let (l, s2) = conv_bn(b, s1, width, 3, 1);
                main.extend(l);
                shape = s2;
            }
            let shortcut = if stride != 1 || input.c != out_c {
                conv_bn(b, input, out_c, 1, stride).0
            } else {
                Vec::new()
            };
            layers.push(Layer::Residual { main, shortcut });
        }
    }
    layers.push(Layer::GlobalAvgPool {
        channels: shape.c,
        spatial: shape.h * shape.w,
    });
    if shape.c != spec.embed_dim {
        layers.push(b.linear(shape.c, spec.embed_dim));
    }
    layers
}

/// Router head view: `K` sigmoid units over the embedding.
#[derive(Debug, Clone, Copy)]
pub struct RouterHead<'a> {
    weights: ArrayView2<'a, f64>,
    bias: ArrayView1<'a, f64>,
}

impl<'a> RouterHead<'a> {
    /// `weights` is `K x N`, `bias` has `K` entries. Neuron `n` (1-based)
    /// drives node `(t, i)` with `n = 2^t + i`.
    pub fn new(weights: ArrayView2<'a, f64>, bias: ArrayView1<'a, f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::invalid(format!(
                "router has {} weight rows but {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn num_outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn weights(&self) -> ArrayView2<'a, f64> {
        self.weights
    }

    pub fn bias(&self) -> ArrayView1<'a, f64> {
        self.bias
    }

    fn logits(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.weights.ncols() {
            return Err(Error::invalid(format!(
                "embedding width {} does not match router input {}",
                z.ncols(),
                self.weights.ncols()
            )));
        }
        Ok(z.dot(&self.weights.t()) + self.bias)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Left-edge probability of every internal node, `batch x K`, each in (0, 1).
pub fn route(z: ArrayView2<'_, f64>, head: &RouterHead<'_>) -> Result<Array2<f64>> {
    Ok(head
        .logits(z)?
        .mapv_into(|l| sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))))
}

/// Contrast head view.
#[derive(Debug, Clone, Copy)]
pub struct ContrastHead<'a> {
    layers: &'a [Layer],
    params: &'a [f64],
    input_dim: usize,
}

impl ContrastHead<'_> {
    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn embed(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.input_dim {
            return Err(Error::invalid(format!(
                "embedding width {} does not match contrast head input {}",
                z.ncols(),
                self.input_dim
            )));
        }
        let out = run_eval(self.layers, self.params, &[], z.to_owned());
        check_finite(&out, "contrast head")?;
        Ok(out)
    }
}

/// `z~ = phi(z)`.
pub fn contrast_embed(z: ArrayView2<'_, f64>, head: &ContrastHead<'_>) -> Result<Array2<f64>> {
    head.embed(z)
}

fn check_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced non-finite values")))
    }
}

/// Everything the backward pass needs from a training forward pass.
#[derive(Debug)]
pub struct TrainPass {
    encoder: Vec<Cache>,
    z: Array2<f64>,
    router: Option<(Array2<f64>, Array2<f64>)>,
    contrast: Vec<Cache>,
    contrast_out: Array2<f64>,
}

impl TrainPass {
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.z
    }

    /// Router output, if the pass included the router.
    pub fn edge_left_prob(&self) -> Option<&Array2<f64>> {
        self.router.as_ref().map(|(_, p)| p)
    }

    pub fn contrast_embeddings(&self) -> &Array2<f64> {
        &self.contrast_out
    }
}

impl Model {
    /// Build with fresh parameters drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: &mut rng,
        };
        let encoder = build_encoder(&mut b, &spec.encoder);
        let enc_end = b.params.len();

        let n = spec.encoder.embed_dim;
        let k = spec.num_internal();
        let w = b.alloc_normal(k * n, 1.0 / (n as f64).sqrt());
        let bias = b.alloc_const(k, 0.0);
        let router = Linear { inp: n, out: k, w, b: bias };
        let router_end = b.params.len();

        let contrast = match spec.contrast.mode {
            ContrastMode::Identity => Vec::new(),
            ContrastMode::TwoLayer => vec![
                b.linear(n, spec.contrast.hidden_dim),
                Layer::Relu,
                b.linear(spec.contrast.hidden_dim, spec.contrast.output_dim),
            ],
        };
        let groups = ParamGroups {
            encoder: 0..enc_end,
            router: enc_end..router_end,
            contrast: router_end..b.params.len(),
        };
        let (params, buffers) = (b.params, b.buffers);
        Ok(Self {
            spec,
            encoder,
            router,
            contrast,
            params,
            buffers,
            groups,
        })
    }

    /// Rebuild from stored parameters; the layout must match `spec`.
    pub fn from_parts(spec: ModelSpec, params: Vec<f64>, buffers: Vec<f64>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if params.len() != model.params.len() || buffers.len() != model.buffers.len() {
            return Err(Error::Format(format!(
                "stored model has {}/{} parameters/buffers, architecture needs {}/{}",
                params.len(),
                buffers.len(),
                model.params.len(),
                model.buffers.len()
            )));
        }
        model.params = params;
        model.buffers = buffers;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn groups(&self) -> &ParamGroups {
        &self.groups
    }

    pub fn router_head(&self) -> RouterHead<'_> {
        RouterHead {
            weights: self.router.weights(&self.params),
            bias: self.router.bias(&self.params),
        }
    }

    pub fn contrast_head(&self) -> ContrastHead<'_> {
        ContrastHead {
            layers: &self.contrast,
            params: &self.params,
            input_dim: self.spec.encoder.embed_dim,
        }
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        let want = self.spec.encoder.input.len();
        if x.ncols() != want {
            return Err(Error::invalid(format!(
                "input has {} features, encoder expects {want}",
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode embeddings `z = g(x)`, `batch x N`.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut out = Array2::zeros((x.nrows(), self.spec.encoder.embed_dim));
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + EVAL_CHUNK).min(x.nrows());
            let z = run_eval(&self.encoder, &self.params, &self.buffers, x.slice(s![start..end, ..]).to_owned());
            out.slice_mut(s![start..end, ..]).assign(&z);
            start = end;
        }
        check_finite(&out, "encoder")?;
        Ok(out)
    }

    /// Evaluation-mode router output for raw inputs.
    pub fn edge_probs(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z = self.encode(x)?;
        route(z.view(), &self.router_head())
    }

    /// The cluster distribution of every input under `topo`.
    pub fn routing(&self, x: ArrayView2<'_, f64>, topo: &TreeTopology) -> Result<RoutingTensor> {
        if topo.num_internal() != self.router.out {
            return Err(Error::invalid(format!(
                "topology has {} internal nodes, router has {} outputs",
                topo.num_internal(),
                self.router.out
            )));
        }
        RoutingTensor::compute(self.edge_probs(x)?, topo)
    }

    /// Training-mode forward pass. Batch-norm running statistics are updated.
    pub fn forward_train(&mut self, x: Array2<f64>, with_router: bool) -> Result<TrainPass> {
        self.check_input(x.view())?;
        let (z, encoder) = run_train(&self.encoder, &self.params, &mut self.buffers, x);
        check_finite(&z, "encoder")?;
        let router = if with_router {
            let logits = self.router_head().logits(z.view())?;
            let probs = logits.mapv(|l| sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)));
            Some((logits, probs))
        } else {
            None
        };
        let (contrast_out, contrast) = run_train(&self.contrast, &self.params, &mut self.buffers, z.clone());
        check_finite(&contrast_out, "contrast head")?;
        Ok(TrainPass {
            encoder,
            z,
            router,
            contrast,
            contrast_out,
        })
    }

    /// Backpropagate loss gradients on router outputs and contrast
    /// embeddings into a gradient over the flat parameter vector.
    pub fn backward(
        &self,
        pass: TrainPass,
        grad_edge_probs: Option<ArrayView2<'_, f64>>,
        grad_contrast: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        let mut dz = back_sequence(&self.contrast, &self.params, pass.contrast, grad_contrast.to_owned(), &mut grads);
        if let Some(g) = grad_edge_probs {
            let (logits, probs) = pass
                .router
                .as_ref()
                .ok_or_else(|| Error::InvalidState("forward pass ran without the router".into()))?;
            if g.dim() != probs.dim() {
                return Err(Error::invalid("router gradient has the wrong shape"));
            }
            let mut dlogits = g.to_owned();
            ndarray::Zip::from(&mut dlogits)
                .and(logits)
                .and(probs)
                .for_each(|d, &l, &p| {
                    *d = if l.abs() < LOGIT_CLAMP { *d * p * (1.0 - p) } else { 0.0 };
                });
            dz += &self.router.backward(&self.params, pass.z.view(), dlogits.view(), &mut grads);
        }
        back_sequence(&self.encoder, &self.params, pass.encoder, dz, &mut grads);
        Ok(grads)
    }
}
