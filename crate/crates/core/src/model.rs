//! Encoder → generator → discriminator stack of small fully-connected nets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{batch_norm, BnState, Graph, Matrix, Mode, Var};
use crate::error::{Error, Result};

/// Layout of one fully-connected stack. Each layer is `Linear`, then for
/// activated layers `LeakyReLU`, then optionally batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by each layer's output width.
    pub layer_widths: Vec<usize>,
    /// One flag per layer; ignored on a non-activated output layer.
    pub use_batchnorm: Vec<bool>,
    /// Whether the last layer is followed by the activation.
    pub activate_output: bool,
    pub leaky_alpha: f64,
}

impl MlpSpec {
    pub fn layers(&self) -> usize {
        self.layer_widths.len().saturating_sub(1)
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.layers() < 1 {
            return Err(Error::Config(format!("{name}: needs at least one layer")));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!("{name}: widths must be positive")));
        }
        if self.use_batchnorm.len() != self.layers() {
            return Err(Error::Config(format!(
                "{name}: {} batch-norm flags for {} layers",
                self.use_batchnorm.len(),
                self.layers()
            )));
        }
        if !(self.leaky_alpha >= 0.0) || !self.leaky_alpha.is_finite() {
            return Err(Error::Config(format!("{name}: leaky_alpha must be nonnegative")));
        }
        Ok(())
    }
}

/// Hidden widths and shared knobs; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Encoder layer widths after the input; the last one is the encoder output.
    pub encoder_widths: Vec<usize>,
    /// Generator layer widths; the last one is the feature dimension.
    pub generator_widths: Vec<usize>,
    /// Hidden widths of the discriminator before its `N + 1` output layer.
    pub discriminator_hidden: Vec<usize>,
    pub batchnorm: bool,
    pub leaky_alpha: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder_widths: vec![32, 16],
            generator_widths: vec![16],
            discriminator_hidden: vec![],
            batchnorm: true,
            leaky_alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: MlpSpec,
    pub generator: MlpSpec,
    pub discriminator: MlpSpec,
    pub n_known: usize,
}

impl ModelSpec {
    pub fn new(arch: &ArchConfig, input_dim: usize, n_known: usize) -> Self {
        let stack = |input: usize, widths: &[usize], activate_output: bool| {
            let mut layer_widths = vec![input];
            layer_widths.extend_from_slice(widths);
            let layers = widths.len();
            let use_batchnorm = (0..layers)
                .map(|i| arch.batchnorm && (activate_output || i + 1 < layers))
                .collect();
            MlpSpec {
                layer_widths,
                use_batchnorm,
                activate_output,
                leaky_alpha: arch.leaky_alpha,
            }
        };
        let enc_out = arch.encoder_widths.last().copied().unwrap_or(input_dim);
        let gen_out = arch.generator_widths.last().copied().unwrap_or(enc_out);
        let mut d_widths = arch.discriminator_hidden.clone();
        d_widths.push(n_known + 1);
        ModelSpec {
            encoder: stack(input_dim, &arch.encoder_widths, true),
            generator: stack(enc_out, &arch.generator_widths, true),
            discriminator: stack(gen_out, &d_widths, false),
            n_known,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate("encoder")?;
        self.generator.validate("generator")?;
        self.discriminator.validate("discriminator")?;
        if self.encoder.output_width() != self.generator.input_width() {
            return Err(Error::Config(format!(
                "encoder output {} does not match generator input {}",
                self.encoder.output_width(),
                self.generator.input_width()
            )));
        }
        if self.generator.output_width() != self.discriminator.input_width() {
            return Err(Error::Config(format!(
                "generator output {} does not match discriminator input {}",
                self.generator.output_width(),
                self.discriminator.input_width()
            )));
        }
        if self.discriminator.output_width() != self.n_known + 1 {
            return Err(Error::Config(format!(
                "discriminator must output {} logits, spec has {}",
                self.n_known + 1,
                self.discriminator.output_width()
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.generator.output_width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub state: BnState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    /// `1 × fan_out`
    pub bias: Matrix,
    pub activate: bool,
    pub norm: Option<BatchNormLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub leaky_alpha: f64,
}

/// Graph handles for one layer's trainable tensors.
#[derive(Debug, Clone)]
struct LayerVars {
    weight: Var,
    bias: Var,
    norm: Option<(Var, Var)>,
}

impl Mlp {
    fn init(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Mlp {
        let n = spec.layers();
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (spec.layer_widths[i], spec.layer_widths[i + 1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let activate = i + 1 < n || spec.activate_output;
                Layer {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("sizes agree"),
                    bias: Matrix::zeros(1, fan_out),
                    activate,
                    norm: (activate && spec.use_batchnorm[i]).then(|| BatchNormLayer {
                        gamma: Matrix::filled(1, fan_out, 1.0),
                        beta: Matrix::zeros(1, fan_out),
                        state: BnState::new(fan_out),
                    }),
                }
            })
            .collect();
        Mlp {
            layers,
            leaky_alpha: spec.leaky_alpha,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(n) = &l.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    fn bind(&self, g: &mut Graph) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: g.leaf(l.weight.clone()),
                bias: g.leaf(l.bias.clone()),
                norm: l
                    .norm
                    .as_ref()
                    .map(|n| (g.leaf(n.gamma.clone()), g.leaf(n.beta.clone()))),
            })
            .collect()
    }

    fn forward(&mut self, g: &mut Graph, vars: &[LayerVars], x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (layer, v) in self.layers.iter_mut().zip(vars) {
            let z = g.matmul(h, v.weight)?;
            h = g.add(z, v.bias)?;
            if layer.activate {
                h = g.leaky_relu(h, self.leaky_alpha);
            }
            if let (Some(norm), Some((gamma, beta))) = (&mut layer.norm, v.norm) {
                h = batch_norm(g, h, gamma, beta, &mut norm.state, mode)?;
            }
        }
        Ok(h)
    }
}

/// Trainable weights and batch-norm state of E, G and D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub encoder: Mlp,
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub n_known: usize,
}

/// Leaf handles for every trainable tensor of a [`NetworkParams`] in a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    encoder: Vec<LayerVars>,
    generator: Vec<LayerVars>,
    discriminator: Vec<LayerVars>,
}

fn layer_vars(layers: &[LayerVars]) -> impl Iterator<Item = Var> + '_ {
    layers.iter().flat_map(|l| {
        let mut v = vec![l.weight, l.bias];
        if let Some((gamma, beta)) = l.norm {
            v.extend([gamma, beta]);
        }
        v
    })
}

impl BoundParams {
    /// All leaves in [`NetworkParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        layer_vars(&self.encoder)
            .chain(layer_vars(&self.generator))
            .chain(layer_vars(&self.discriminator))
            .collect()
    }

    pub fn encoder_vars(&self) -> Vec<Var> {
        layer_vars(&self.encoder).collect()
    }

    pub fn generator_vars(&self) -> Vec<Var> {
        layer_vars(&self.generator).collect()
    }

    pub fn discriminator_vars(&self) -> Vec<Var> {
        layer_vars(&self.discriminator).collect()
    }

    pub fn grads(&self, g: &Graph) -> Vec<Matrix> {
        self.vars().into_iter().map(|v| g.grad(v).clone()).collect()
    }
}

/// Output of a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `G(E(x))`
    pub features: Var,
    /// `D(G(E(x)))`, one column per known class plus the unknown class.
    pub logits: Var,
}

/// Batch-norm behaviour of the encoder and of the G/D pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub mode: Mode,
    /// A frozen encoder runs on its running statistics and passes no gradient.
    pub freeze_encoder: bool,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode {
        mode: Mode::Eval,
        freeze_encoder: true,
    };

    pub fn train(freeze_encoder: bool) -> Self {
        ForwardMode {
            mode: Mode::Train,
            freeze_encoder,
        }
    }
}

impl NetworkParams {
    /// He-style uniform init in `[-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases,
    /// unit batch-norm scale.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(NetworkParams {
            encoder: Mlp::init(&spec.encoder, &mut rng),
            generator: Mlp::init(&spec.generator, &mut rng),
            discriminator: Mlp::init(&spec.discriminator, &mut rng),
            n_known: spec.n_known,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn feature_dim(&self) -> usize {
        self.generator.layers.last().expect("nonempty").weight.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_known + 1
    }

    /// Number of encoder tensors at the front of [`tensors`](Self::tensors).
    pub fn encoder_tensor_count(&self) -> usize {
        self.encoder.tensors().len()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.encoder.tensors();
        out.extend(self.generator.tensors());
        out.extend(self.discriminator.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.generator.tensors_mut());
        out.extend(self.discriminator.tensors_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            encoder: self.encoder.bind(g),
            generator: self.generator.bind(g),
            discriminator: self.discriminator.bind(g),
        }
    }

    /// `G(E(x))`.
    pub fn features(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        mode: ForwardMode,
    ) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim() {
            return Err(Error::Contract(format!(
                "input has {cols} features, encoder expects {}",
                self.input_dim()
            )));
        }
        let encoded = if mode.freeze_encoder {
            let e = self.encoder.forward(g, &bound.encoder, x, Mode::Eval)?;
            g.detach(e)
        } else {
            self.encoder.forward(g, &bound.encoder, x, mode.mode)?
        };
        self.generator.forward(g, &bound.generator, encoded, mode.mode)
    }

    /// `D(features)`.
    pub fn discriminate(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        features: Var,
        mode: Mode,
    ) -> Result<Var> {
        self.discriminator.forward(g, &bound.discriminator, features, mode)
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        mode: ForwardMode,
    ) -> Result<Forward> {
        let features = self.features(g, bound, x, mode)?;
        let logits = self.discriminate(g, bound, features, mode.mode)?;
        Ok(Forward { features, logits })
    }

    /// Eval-mode features and logits for a batch of raw inputs.
    pub fn infer(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut net = self.clone();
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = net.forward(&mut g, &bound, xv, ForwardMode::EVAL)?;
        Ok((g.value(out.features).clone(), g.value(out.logits).clone()))
    }
}
