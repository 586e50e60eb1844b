//! Teacher/student classifiers, the sample generator, and the embedding
//! projection head.
//!
//! Models are flat layer stacks over the tape primitives. Parameters live in
//! a named, ordered [`ModelParams`] collection; every forward pass binds them
//! as fresh tape leaves and returns the binding so optimizers can map
//! gradients back by name. Batch-norm layers expose their per-batch channel
//! statistics as differentiable hooks, which the synthesis loss consumes.

use crate::error::{Error, Result};
use crate::tape::{batch_channel_stats, BnNorm, Tape, VarId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Read;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.2;

const MAGIC: &[u8; 4] = b"RGAL";
const FORMAT_VERSION: u32 = 1;

/// How batch-norm layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Normalize by batch statistics and update running statistics.
    Train,
    /// Normalize by batch statistics without touching running statistics.
    /// Used for frozen models that still need batch-statistic hooks.
    Frozen,
    /// Normalize by running statistics; no hooks, no updates.
    Eval,
}

/// Named parameter collection with a stable order.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid_arg("ModelParams", format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| an == bn && at.bit_eq(bt))
    }

    /// FNV-1a over names and value bits; used for phase-isolation checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    /// Writes the flat binary container: magic, version, count, then
    /// per-parameter name, rank, extents, and little-endian f64 values.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for e in t.shape() {
                out.extend_from_slice(&(*e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    pub fn read_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        let mut cur = std::io::Cursor::new(bytes);
        let mut buf4 = [0u8; 4];
        cur.read_exact(&mut buf4).map_err(|_| bad("truncated magic"))?;
        if &buf4 != MAGIC {
            return Err(bad("bad magic"));
        }
        cur.read_exact(&mut buf4)
            .map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        cur.read_exact(&mut buf4).map_err(|_| bad("truncated count"))?;
        let count = u32::from_le_bytes(buf4);
        let mut params = ModelParams::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            cur.read_exact(&mut b2)
                .map_err(|_| bad("truncated name length"))?;
            let name_len = u16::from_le_bytes(b2) as usize;
            let mut name_bytes = vec![0u8; name_len];
            cur.read_exact(&mut name_bytes)
                .map_err(|_| bad("truncated name"))?;
            let name =
                String::from_utf8(name_bytes).map_err(|_| bad("parameter name not utf-8"))?;
            let mut b1 = [0u8; 1];
            cur.read_exact(&mut b1).map_err(|_| bad("truncated rank"))?;
            let rank = b1[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                cur.read_exact(&mut buf4)
                    .map_err(|_| bad("truncated extent"))?;
                shape.push(u32::from_le_bytes(buf4) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                cur.read_exact(&mut b8).map_err(|_| bad("truncated values"))?;
                data.push(f64::from_le_bytes(b8));
            }
            params.insert(name, Tensor::new(shape, data).map_err(|_| bad("bad shape"))?);
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_bytes(&mut bytes);
        crate::runner::write_atomic(path, &bytes)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_bytes(&bytes, &path.display().to_string())
    }

    /// Replaces values with same-named, same-shaped entries from `other`.
    pub fn load_values_from(&mut self, other: &ModelParams, origin: &str) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format {
                path: origin.to_string(),
                reason: format!(
                    "parameter count mismatch: file has {}, model expects {}",
                    other.len(),
                    self.len()
                ),
            });
        }
        for (name, t) in &mut self.entries {
            let src = other.get(name).ok_or_else(|| Error::Format {
                path: origin.to_string(),
                reason: format!("missing parameter {name}"),
            })?;
            if !src.same_shape(t) {
                return Err(Error::Format {
                    path: origin.to_string(),
                    reason: format!(
                        "shape mismatch for {name}: {:?} vs {:?}",
                        src.shape(),
                        t.shape()
                    ),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Parameter name -> tape leaf mapping produced by a forward pass.
#[derive(Debug, Default)]
pub struct Binding(pub Vec<(String, VarId)>);

impl Binding {
    fn bind(&mut self, tape: &mut Tape, params: &ModelParams, name: &str) -> Result<VarId> {
        let v = tape.input(params.expect(name)?.clone());
        self.0.push((name.to_string(), v));
        Ok(v)
    }

    pub fn merge(&mut self, other: Binding) {
        self.0.extend(other.0);
    }
}

/// Differentiable batch statistics of one batch-norm layer's input.
pub struct BnHook {
    pub layer: String,
    pub mean: VarId,
    pub var: VarId,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
    /// Works on `[B, C]` and `[B, C, H, W]` inputs alike.
    BatchNorm { name: String, channels: usize },
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Conv3x3 {
        name: String,
        in_ch: usize,
        out_ch: usize,
    },
    UpsampleNearest2,
    GlobalAvgPool,
    /// Per-sample target shape; the batch extent is preserved.
    Reshape(Vec<usize>),
}

fn init_params(layers: &[Layer], seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    let mut normal = |n: usize, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * std)
            .collect()
    };
    for layer in layers {
        match layer {
            Layer::Linear {
                name,
                in_dim,
                out_dim,
            } => {
                let std = 1.0 / (*in_dim as f64).sqrt();
                params.insert(
                    format!("{name}.weight"),
                    Tensor::new(vec![*in_dim, *out_dim], normal(in_dim * out_dim, std))
                        .expect("init"),
                );
                params.insert(format!("{name}.bias"), Tensor::zeros(vec![*out_dim]));
            }
            Layer::Conv3x3 {
                name,
                in_ch,
                out_ch,
            } => {
                let std = 1.0 / ((in_ch * 9) as f64).sqrt();
                params.insert(
                    format!("{name}.weight"),
                    Tensor::new(vec![*out_ch, *in_ch, 3, 3], normal(out_ch * in_ch * 9, std))
                        .expect("init"),
                );
                params.insert(format!("{name}.bias"), Tensor::zeros(vec![*out_ch]));
            }
            Layer::BatchNorm { name, channels } => {
                params.insert(format!("{name}.weight"), Tensor::full(vec![*channels], 1.0));
                params.insert(format!("{name}.bias"), Tensor::zeros(vec![*channels]));
                params.insert(
                    format!("{name}.running_mean"),
                    Tensor::zeros(vec![*channels]),
                );
                params.insert(
                    format!("{name}.running_var"),
                    Tensor::full(vec![*channels], 1.0),
                );
            }
            _ => {}
        }
    }
    params
}

/// Runs a layer stack, returning the output variable. Trainable parameters
/// are bound into `binding`; batch-norm hooks are appended in Train and
/// Frozen modes. Train mode updates running statistics in place.
fn forward_layers(
    layers: &[Layer],
    params: &mut ModelParams,
    tape: &mut Tape,
    mut h: VarId,
    mode: ForwardMode,
    binding: &mut Binding,
    hooks: &mut Vec<BnHook>,
) -> Result<VarId> {
    for layer in layers {
        h = match layer {
            Layer::Linear { name, .. } => {
                let w = binding.bind(tape, params, &format!("{name}.weight"))?;
                let b = binding.bind(tape, params, &format!("{name}.bias"))?;
                let mm = tape.matmul(h, w)?;
                tape.bias_rows(mm, b)?
            }
            Layer::Conv3x3 { name, .. } => {
                let w = binding.bind(tape, params, &format!("{name}.weight"))?;
                let b = binding.bind(tape, params, &format!("{name}.bias"))?;
                let c = tape.conv2d(h, w, 1, 1)?;
                tape.bias_channels(c, b)?
            }
            Layer::BatchNorm { name, .. } => {
                let gamma = binding.bind(tape, params, &format!("{name}.weight"))?;
                let beta = binding.bind(tape, params, &format!("{name}.bias"))?;
                let rm_name = format!("{name}.running_mean");
                let rv_name = format!("{name}.running_var");
                if matches!(mode, ForwardMode::Train | ForwardMode::Frozen) {
                    let mean = tape.channel_mean(h)?;
                    let var = tape.channel_var(h)?;
                    hooks.push(BnHook {
                        layer: name.clone(),
                        mean,
                        var,
                        running_mean: params.expect(&rm_name)?.clone(),
                        running_var: params.expect(&rv_name)?.clone(),
                    });
                }
                if mode == ForwardMode::Train {
                    let (bm, bv) = batch_channel_stats(tape.value(h))?;
                    for (stat_name, batch) in [(&rm_name, &bm), (&rv_name, &bv)] {
                        let run = params
                            .get_mut(stat_name)
                            .expect("running stats initialized with layer");
                        for (r, b) in run.data_mut().iter_mut().zip(batch) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                        }
                    }
                }
                let norm = match mode {
                    ForwardMode::Train | ForwardMode::Frozen => BnNorm::Batch,
                    ForwardMode::Eval => BnNorm::Running {
                        mean: params.expect(&rm_name)?.data().to_vec(),
                        var: params.expect(&rv_name)?.data().to_vec(),
                    },
                };
                tape.batch_norm(h, gamma, beta, BN_EPS, norm)?
            }
            Layer::Relu => tape.relu(h),
            Layer::LeakyRelu(slope) => tape.leaky_relu(h, *slope),
            Layer::Sigmoid => tape.sigmoid(h),
            Layer::UpsampleNearest2 => tape.upsample_nearest_2(h)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
            Layer::Reshape(per_sample) => {
                let batch = tape.value(h).shape()[0];
                let mut shape = vec![batch];
                shape.extend_from_slice(per_sample);
                tape.reshape(h, shape)?
            }
        };
    }
    Ok(h)
}

/// Classifier: backbone ending at the global embedding, plus a linear head.
pub struct ClassifierModel {
    pub params: ModelParams,
    backbone: Vec<Layer>,
    head: Layer,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

pub struct ClassifierOutput {
    pub logits: VarId,
    pub probs: VarId,
    pub embedding: VarId,
    pub bn: Vec<BnHook>,
    pub binding: Binding,
}

impl ClassifierModel {
    fn from_layers(
        backbone: Vec<Layer>,
        head: Layer,
        embedding_dim: usize,
        num_classes: usize,
        input_shape: Vec<usize>,
        seed: u64,
    ) -> Self {
        let mut all = backbone.clone();
        all.push(head.clone());
        ClassifierModel {
            params: init_params(&all, seed),
            backbone,
            head,
            embedding_dim,
            num_classes,
            input_shape,
        }
    }

    /// 2-d MLP for the three-blob task: 2 -> 64 -> 64 -> 32 -> classes, with
    /// batch norm after each hidden layer; the 32-wide activation is the
    /// global embedding.
    pub fn toy_mlp(num_classes: usize, seed: u64) -> Self {
        let backbone = vec![
            Layer::Linear {
                name: "l1".into(),
                in_dim: 2,
                out_dim: 64,
            },
            Layer::BatchNorm {
                name: "bn1".into(),
                channels: 64,
            },
            Layer::Relu,
            Layer::Linear {
                name: "l2".into(),
                in_dim: 64,
                out_dim: 64,
            },
            Layer::BatchNorm {
                name: "bn2".into(),
                channels: 64,
            },
            Layer::Relu,
            Layer::Linear {
                name: "l3".into(),
                in_dim: 64,
                out_dim: 32,
            },
            Layer::BatchNorm {
                name: "bn3".into(),
                channels: 32,
            },
            Layer::Relu,
        ];
        let head = Layer::Linear {
            name: "head".into(),
            in_dim: 32,
            out_dim: num_classes,
        };
        Self::from_layers(backbone, head, 32, num_classes, vec![2], seed)
    }

    /// Small convolutional classifier for image-shaped tasks; the embedding
    /// is the post-global-pool feature.
    pub fn small_cnn(side: usize, num_classes: usize, seed: u64) -> Self {
        let backbone = vec![
            Layer::Conv3x3 {
                name: "c1".into(),
                in_ch: 3,
                out_ch: 12,
            },
            Layer::BatchNorm {
                name: "b1".into(),
                channels: 12,
            },
            Layer::Relu,
            Layer::Conv3x3 {
                name: "c2".into(),
                in_ch: 12,
                out_ch: 24,
            },
            Layer::BatchNorm {
                name: "b2".into(),
                channels: 24,
            },
            Layer::Relu,
            Layer::GlobalAvgPool,
        ];
        let head = Layer::Linear {
            name: "head".into(),
            in_dim: 24,
            out_dim: num_classes,
        };
        Self::from_layers(backbone, head, 24, num_classes, vec![3, side, side], seed)
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: VarId,
        mode: ForwardMode,
    ) -> Result<ClassifierOutput> {
        let got = tape.value(x).shape().to_vec();
        let expect: Vec<usize> = std::iter::once(got.first().copied().unwrap_or(0))
            .chain(self.input_shape.iter().copied())
            .collect();
        if got != expect {
            return Err(Error::ShapeMismatch {
                op: "classifier_forward",
                lhs: got,
                rhs: expect,
            });
        }
        let mut binding = Binding::default();
        let mut hooks = Vec::new();
        let embedding = forward_layers(
            &self.backbone,
            &mut self.params,
            tape,
            x,
            mode,
            &mut binding,
            &mut hooks,
        )?;
        let logits = forward_layers(
            std::slice::from_ref(&self.head),
            &mut self.params,
            tape,
            embedding,
            mode,
            &mut binding,
            &mut hooks,
        )?;
        let probs = tape.softmax(logits)?;
        Ok(ClassifierOutput {
            logits,
            probs,
            embedding,
            bn: hooks,
            binding,
        })
    }

    /// Forward on a throwaway tape, returning plain tensors.
    pub fn forward_infer(
        &mut self,
        x: &Tensor,
        mode: ForwardMode,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, mode)?;
        Ok((
            tape.value(out.logits).clone(),
            tape.value(out.probs).clone(),
            tape.value(out.embedding).clone(),
        ))
    }

    /// Argmax class labels under evaluation-mode inference.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        let (_, probs, _) = self.forward_infer(x, ForwardMode::Eval)?;
        Ok((0..probs.shape()[0]).map(|i| probs.argmax_row(i)).collect())
    }
}

/// Output range of a generator's final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorOutput {
    /// Sigmoid-bounded to [0, 1]; image-shaped tasks.
    Unit,
    /// Unbounded linear output; point-cloud tasks.
    Linear,
}

pub struct GeneratorModel {
    pub params: ModelParams,
    layers: Vec<Layer>,
    pub latent_dim: usize,
    pub output_shape: Vec<usize>,
    pub output: GeneratorOutput,
}

impl GeneratorModel {
    /// 2-d MLP generator: latent -> 64 -> 64 -> 2, linear output so samples
    /// can cover the data plane.
    pub fn toy_mlp(latent_dim: usize, seed: u64) -> Self {
        let layers = vec![
            Layer::Linear {
                name: "g1".into(),
                in_dim: latent_dim,
                out_dim: 64,
            },
            Layer::BatchNorm {
                name: "gbn1".into(),
                channels: 64,
            },
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Linear {
                name: "g2".into(),
                in_dim: 64,
                out_dim: 64,
            },
            Layer::BatchNorm {
                name: "gbn2".into(),
                channels: 64,
            },
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Linear {
                name: "g3".into(),
                in_dim: 64,
                out_dim: 2,
            },
        ];
        GeneratorModel {
            params: init_params(&layers, seed),
            layers,
            latent_dim,
            output_shape: vec![2],
            output: GeneratorOutput::Linear,
        }
    }

    /// Upsampling convolutional generator: a linear layer to a quarter-size
    /// feature map, then two upsample/conv/BN/LeakyReLU stages and a
    /// sigmoid-bounded 3-channel output.
    pub fn conv(latent_dim: usize, width: usize, height: usize, seed: u64) -> Result<Self> {
        if width % 4 != 0 || height % 4 != 0 {
            return Err(Error::Config(format!(
                "generator output {width}x{height} must be divisible by 4"
            )));
        }
        if latent_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "generator latent dimension {latent_dim} must be even"
            )));
        }
        let (w4, h4) = (width / 4, height / 4);
        let half = latent_dim / 2;
        let layers = vec![
            Layer::Linear {
                name: "fc".into(),
                in_dim: latent_dim,
                out_dim: w4 * h4 * half,
            },
            Layer::Reshape(vec![half, h4, w4]),
            Layer::BatchNorm {
                name: "bn0".into(),
                channels: half,
            },
            Layer::UpsampleNearest2,
            Layer::Conv3x3 {
                name: "conv1".into(),
                in_ch: half,
                out_ch: latent_dim,
            },
            Layer::BatchNorm {
                name: "bn1".into(),
                channels: latent_dim,
            },
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::UpsampleNearest2,
            Layer::Conv3x3 {
                name: "conv2".into(),
                in_ch: latent_dim,
                out_ch: half,
            },
            Layer::BatchNorm {
                name: "bn2".into(),
                channels: half,
            },
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Conv3x3 {
                name: "conv3".into(),
                in_ch: half,
                out_ch: 3,
            },
            Layer::Sigmoid,
        ];
        Ok(GeneratorModel {
            params: init_params(&layers, seed),
            layers,
            latent_dim,
            output_shape: vec![3, height, width],
            output: GeneratorOutput::Unit,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        z: VarId,
        mode: ForwardMode,
    ) -> Result<(VarId, Binding)> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                lhs: shape,
                rhs: vec![0, self.latent_dim],
            });
        }
        let mut binding = Binding::default();
        let mut hooks = Vec::new();
        let out = forward_layers(
            &self.layers,
            &mut self.params,
            tape,
            z,
            mode,
            &mut binding,
            &mut hooks,
        )?;
        Ok((out, binding))
    }

    pub fn forward_infer(&mut self, z: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (out, _) = self.forward(&mut tape, zv, mode)?;
        Ok(tape.value(out).clone())
    }
}

/// Single fully-connected map from student to teacher embedding space,
/// trained jointly with the student.
pub struct ProjectionHead {
    pub params: ModelParams,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let layers = [Layer::Linear {
            name: "proj".into(),
            in_dim,
            out_dim,
        }];
        ProjectionHead {
            params: init_params(&layers, seed),
            in_dim,
            out_dim,
        }
    }

    /// Square identity map; the natural start when both embeddings share a
    /// dimension.
    pub fn identity(dim: usize) -> Self {
        let mut weight = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            weight.data_mut()[i * dim + i] = 1.0;
        }
        let mut params = ModelParams::new();
        params.insert("proj.weight", weight);
        params.insert("proj.bias", Tensor::zeros(vec![dim]));
        ProjectionHead {
            params,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, e: VarId) -> Result<(VarId, Binding)> {
        let shape = tape.value(e).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "projection_forward",
                lhs: shape,
                rhs: vec![0, self.in_dim],
            });
        }
        let mut binding = Binding::default();
        let w = binding.bind(tape, &self.params, "proj.weight")?;
        let b = binding.bind(tape, &self.params, "proj.bias")?;
        let mm = tape.matmul(e, w)?;
        let out = tape.bias_rows(mm, b)?;
        Ok((out, binding))
    }
}

/// Writes a model checkpoint to the flat binary container.
pub fn save_model(path: &std::path::Path, params: &ModelParams) -> Result<()> {
    params.save(path)
}

/// Reads a model checkpoint written by [`save_model`].
pub fn load_model(path: &std::path::Path) -> Result<ModelParams> {
    ModelParams::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = ClassifierModel::toy_mlp(3, 1);
        let x = random_batch(&mut rng, 8, 2);
        let (_, probs, _) = model.forward_infer(&x, ForwardMode::Eval).unwrap();
        for i in 0..8 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(probs.row(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn duplicate_samples_produce_identical_rows() {
        let mut model = ClassifierModel::toy_mlp(3, 5);
        let x = Tensor::from_rows(&[vec![0.4, -1.1], vec![0.4, -1.1]]).unwrap();
        let (logits, _, emb) = model.forward_infer(&x, ForwardMode::Eval).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(emb.row(0), emb.row(1));
    }

    #[test]
    fn same_seed_identical_different_seed_differs() {
        let a = ClassifierModel::toy_mlp(3, 42);
        let b = ClassifierModel::toy_mlp(3, 42);
        let c = ClassifierModel::toy_mlp(3, 43);
        assert!(a.params.bit_eq(&b.params));
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn conv_generator_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gen = GeneratorModel::conv(32, 16, 16, 2).unwrap();
        let z = random_batch(&mut rng, 4, 32);
        let out = gen.forward_infer(&z, ForwardMode::Frozen).unwrap();
        assert_eq!(out.shape(), &[4, 3, 16, 16]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn conv_generator_paper_scale_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut gen = GeneratorModel::conv(256, 32, 32, 2).unwrap();
        let z = random_batch(&mut rng, 4, 256);
        let out = gen.forward_infer(&z, ForwardMode::Frozen).unwrap();
        assert_eq!(out.shape(), &[4, 3, 32, 32]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_rejects_bad_output_size() {
        assert!(GeneratorModel::conv(32, 15, 16, 0).is_err());
        assert!(GeneratorModel::conv(32, 16, 18, 0).is_err());
    }

    #[test]
    fn generator_is_deterministic_on_fixed_input() {
        let mut gen = GeneratorModel::toy_mlp(16, 7);
        let z = Tensor::zeros(vec![3, 16]);
        let a = gen.forward_infer(&z, ForwardMode::Frozen).unwrap();
        let b = gen.forward_infer(&z, ForwardMode::Frozen).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn running_stats_update_only_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = ClassifierModel::toy_mlp(3, 8);
        let x = random_batch(&mut rng, 16, 2);
        let before = model.params.clone();

        model.forward_infer(&x, ForwardMode::Eval).unwrap();
        assert!(model.params.bit_eq(&before));

        model.forward_infer(&x, ForwardMode::Frozen).unwrap();
        assert!(model.params.bit_eq(&before));

        model.forward_infer(&x, ForwardMode::Train).unwrap();
        assert!(!model.params.bit_eq(&before));
        // Only running statistics moved.
        for (name, t) in model.params.iter() {
            if !name.contains("running") {
                assert!(t.bit_eq(before.get(name).unwrap()), "{name} changed");
            }
        }
    }

    #[test]
    fn projection_identity_and_zero() {
        let head = ProjectionHead::identity(4);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0, 0.5]]).unwrap());
        let (out, _) = head.forward(&mut tape, e).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, -2.0, 3.0, 0.5]);

        let zero = tape.constant(Tensor::zeros(vec![1, 4]));
        let (out0, _) = head.forward(&mut tape, zero).unwrap();
        assert_eq!(tape.value(out0).data(), &[0.0; 4]);
    }

    #[test]
    fn projection_on_basis_vector_returns_weight_row() {
        // e_i W + 0 selects row i of the weight matrix (the image of the
        // i-th input coordinate).
        let head = ProjectionHead::new(3, 5, 77);
        let mut tape = Tape::new();
        let mut basis = Tensor::zeros(vec![1, 3]);
        basis.data_mut()[1] = 1.0;
        let e = tape.constant(basis);
        let (out, _) = head.forward(&mut tape, e).unwrap();
        let w = head.params.get("proj.weight").unwrap();
        let expect: Vec<f64> = (0..5).map(|j| w.data()[5 + j]).collect();
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_rejects_dimension_mismatch() {
        let head = ProjectionHead::new(3, 5, 0);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(vec![1, 4]));
        assert!(head.forward(&mut tape, e).is_err());
    }

    #[test]
    fn params_serialization_round_trips_exactly() {
        let model = ClassifierModel::toy_mlp(3, 123);
        let mut bytes = Vec::new();
        model.params.write_bytes(&mut bytes);
        let back = ModelParams::read_bytes(&bytes, "mem").unwrap();
        assert!(model.params.bit_eq(&back));
    }

    #[test]
    fn classifier_rejects_wrong_input_shape() {
        let mut model = ClassifierModel::toy_mlp(3, 1);
        let x = Tensor::zeros(vec![4, 3]);
        assert!(model.forward_infer(&x, ForwardMode::Eval).is_err());
    }
}
