//! Embedding networks with channel-rectified layers.
//!
//! A rectified layer computes `(W ⊙ γ) * x + (b + β)`. Convolution kernels
//! `[out, in, kh, kw]` take `γ` of shape `[out, in, 1, 1]`; linear layers
//! `[out, in]` take `γ` of shape `[out, in]`. `β` is always `[out]`. With
//! `γ = 1, β = 0` the layer is bit-identical to the plain layer.
//!
//! The rectifier wraps every backbone block but never the projection head.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Kernel size and padding of the convolutional backbone.
const CONV_KERNEL: usize = 3;
const CONV_PADDING: usize = 1;
const POOL: usize = 2;

pub const DEFAULT_EMBED_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {got:?} does not match the model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint tensor `{name}`: {detail}")]
    Checkpoint { name: String, detail: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Rectified linear blocks over raw feature vectors.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        #[serde(default = "default_embed_dim")]
        embed_dim: usize,
    },
    /// 3x3 rectified conv blocks, each followed by relu and 2x2 max pooling.
    Conv {
        in_channels: usize,
        image_size: usize,
        channels: Vec<usize>,
        #[serde(default = "default_embed_dim")]
        embed_dim: usize,
    },
}

fn default_embed_dim() -> usize {
    DEFAULT_EMBED_DIM
}

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: &[usize]) -> Self {
        Self::Mlp {
            input_dim,
            hidden: hidden.to_vec(),
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }

    /// Four conv blocks (16/32/64/64 channels) over 3x32x32 images.
    pub fn default_conv() -> Self {
        Self::Conv {
            in_channels: 3,
            image_size: 32,
            channels: vec![16, 32, 64, 64],
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Self::Mlp { embed_dim, .. } | Self::Conv { embed_dim, .. } => *embed_dim,
        }
    }

    /// Shape of one input item (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Self::Mlp { input_dim, .. } => vec![*input_dim],
            Self::Conv {
                in_channels,
                image_size,
                ..
            } => vec![*in_channels, *image_size, *image_size],
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Architecture(m.to_string()));
        if self.embed_dim() == 0 {
            return bad("embed_dim must be positive");
        }
        match self {
            Self::Mlp { input_dim, hidden, .. } => {
                if *input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return bad("mlp needs a positive input_dim and at least one hidden layer");
                }
            }
            Self::Conv {
                in_channels,
                image_size,
                channels,
                ..
            } => {
                if *in_channels == 0 || channels.is_empty() || channels.contains(&0) {
                    return bad("conv needs input channels and at least one block");
                }
                if image_size >> channels.len() == 0 {
                    return bad("image too small for the number of pooling blocks");
                }
            }
        }
        Ok(())
    }

    /// Weight shapes of the backbone blocks followed by the input width of the head.
    fn layer_shapes(&self) -> (Vec<Vec<usize>>, usize) {
        match self {
            Self::Mlp { input_dim, hidden, .. } => {
                let mut prev = *input_dim;
                let mut shapes = Vec::new();
                for &h in hidden {
                    shapes.push(vec![h, prev]);
                    prev = h;
                }
                (shapes, prev)
            }
            Self::Conv {
                in_channels,
                image_size,
                channels,
                ..
            } => {
                let mut prev = *in_channels;
                let mut shapes = Vec::new();
                for &c in channels {
                    shapes.push(vec![c, prev, CONV_KERNEL, CONV_KERNEL]);
                    prev = c;
                }
                let side = image_size >> channels.len();
                (shapes, prev * side * side)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    HeadWeight,
    HeadBias,
    Gamma(usize),
    Beta(usize),
}

/// Disjoint parameter groups: backbone and head together form θ, the
/// rectifier is Φ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
    Rectifier,
}

impl ParamId {
    pub fn group(self) -> ParamGroup {
        match self {
            Self::Weight(_) | Self::Bias(_) => ParamGroup::Backbone,
            Self::HeadWeight | Self::HeadBias => ParamGroup::Head,
            Self::Gamma(_) | Self::Beta(_) => ParamGroup::Rectifier,
        }
    }

    pub fn name(self) -> String {
        match self {
            Self::Weight(l) => format!("block{l}.weight"),
            Self::Bias(l) => format!("block{l}.bias"),
            Self::HeadWeight => "head.weight".into(),
            Self::HeadBias => "head.bias".into(),
            Self::Gamma(l) => format!("rectifier{l}.gamma"),
            Self::Beta(l) => format!("rectifier{l}.beta"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Layered embedding function: rectifiable backbone blocks, a linear head
/// and L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel<S: Scalar> {
    arch: Architecture,
    blocks: Vec<Layer<S>>,
    head: Layer<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifierPair<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

/// Per-block scale/shift parameters Φ = {(γ, β)}.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRectifier<S: Scalar> {
    pub pairs: Vec<RectifierPair<S>>,
}

impl<S: Scalar> ChannelRectifier<S> {
    pub fn is_identity(&self) -> bool {
        self.pairs.iter().all(|p| {
            p.gamma.data().iter().all(|&g| g == S::one()) && p.beta.data().iter().all(|&b| b == S::zero())
        })
    }
}

impl<S: Scalar> EmbeddingModel<S> {
    /// He-normal backbone weights, `1/fan_in` head variance, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self, NetworkError> {
        arch.validate()?;
        let (shapes, head_in) = arch.layer_shapes();
        let blocks = shapes
            .iter()
            .map(|shape| {
                let fan_in: usize = shape[1..].iter().product();
                Layer {
                    weight: Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
                    bias: Tensor::zeros(&[shape[0]]),
                }
            })
            .collect();
        let embed = arch.embed_dim();
        let head = Layer {
            weight: Tensor::randn(&[embed, head_in], (1.0 / head_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[embed]),
        };
        Ok(Self { arch, blocks, head })
    }

    /// All-zero parameters; a target for loading checkpoints.
    pub fn zeroed(arch: Architecture) -> Result<Self, NetworkError> {
        arch.validate()?;
        let (shapes, head_in) = arch.layer_shapes();
        let blocks = shapes
            .iter()
            .map(|shape| Layer {
                weight: Tensor::zeros(shape),
                bias: Tensor::zeros(&[shape[0]]),
            })
            .collect();
        let embed = arch.embed_dim();
        let head = Layer {
            weight: Tensor::zeros(&[embed, head_in]),
            bias: Tensor::zeros(&[embed]),
        };
        Ok(Self { arch, blocks, head })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[Layer<S>] {
        &self.blocks
    }

    pub fn head(&self) -> &Layer<S> {
        &self.head
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim()
    }

    /// θ and ψ parameter ids (everything except the rectifier).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..self.blocks.len())
            .flat_map(|l| [ParamId::Weight(l), ParamId::Bias(l)])
            .collect();
        ids.extend([ParamId::HeadWeight, ParamId::HeadBias]);
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        match id {
            ParamId::Weight(l) => self.blocks.get(l).map(|b| &b.weight),
            ParamId::Bias(l) => self.blocks.get(l).map(|b| &b.bias),
            ParamId::HeadWeight => Some(&self.head.weight),
            ParamId::HeadBias => Some(&self.head.bias),
            ParamId::Gamma(_) | ParamId::Beta(_) => None,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<S>> {
        match id {
            ParamId::Weight(l) => self.blocks.get_mut(l).map(|b| &mut b.weight),
            ParamId::Bias(l) => self.blocks.get_mut(l).map(|b| &mut b.bias),
            ParamId::HeadWeight => Some(&mut self.head.weight),
            ParamId::HeadBias => Some(&mut self.head.bias),
            ParamId::Gamma(_) | ParamId::Beta(_) => None,
        }
    }

    pub fn cast<T: Scalar>(&self) -> EmbeddingModel<T> {
        let cast = |l: &Layer<S>| Layer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        EmbeddingModel {
            arch: self.arch.clone(),
            blocks: self.blocks.iter().map(cast).collect(),
            head: cast(&self.head),
        }
    }

    /// Checksum over θ and ψ.
    pub fn checksum(&self) -> u64 {
        self.param_ids()
            .into_iter()
            .fold(0u64, |acc, id| {
                acc.rotate_left(7) ^ self.param(id).expect("own id").checksum()
            })
    }
}

/// The identity rectifier for `model`: γ = 1, β = 0 on every block.
pub fn rectifier_identity<S: Scalar>(model: &EmbeddingModel<S>) -> ChannelRectifier<S> {
    let pairs = model
        .blocks
        .iter()
        .map(|b| {
            let w = b.weight.shape();
            let gamma_shape = if w.len() == 4 {
                vec![w[0], w[1], 1, 1]
            } else {
                vec![w[0], w[1]]
            };
            RectifierPair {
                gamma: Tensor::ones(&gamma_shape),
                beta: Tensor::zeros(&[w[0]]),
            }
        })
        .collect();
    ChannelRectifier { pairs }
}

/// An embedding model together with an optional channel rectifier; the unit
/// that adapters read and update.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedModel<S: Scalar> {
    pub model: EmbeddingModel<S>,
    pub rectifier: Option<ChannelRectifier<S>>,
}

/// Output of a recorded forward pass.
pub struct Forward<'t, S: Scalar> {
    pub embedding: Var<'t, S>,
    /// Leaf handle of every trainable parameter, in the requested order.
    pub params: Vec<(ParamId, Var<'t, S>)>,
}

impl<S: Scalar> RectifiedModel<S> {
    pub fn plain(model: EmbeddingModel<S>) -> Self {
        Self {
            model,
            rectifier: None,
        }
    }

    pub fn with_identity_rectifier(model: EmbeddingModel<S>) -> Self {
        let rectifier = Some(rectifier_identity(&model));
        Self { model, rectifier }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        match id {
            ParamId::Gamma(l) => self.rectifier.as_ref()?.pairs.get(l).map(|p| &p.gamma),
            ParamId::Beta(l) => self.rectifier.as_ref()?.pairs.get(l).map(|p| &p.beta),
            other => self.model.param(other),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<S>> {
        match id {
            ParamId::Gamma(l) => self.rectifier.as_mut()?.pairs.get_mut(l).map(|p| &mut p.gamma),
            ParamId::Beta(l) => self.rectifier.as_mut()?.pairs.get_mut(l).map(|p| &mut p.beta),
            other => self.model.param_mut(other),
        }
    }

    /// Ids of all parameters in `group`.
    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        let blocks = self.model.blocks.len();
        match group {
            ParamGroup::Backbone => (0..blocks)
                .flat_map(|l| [ParamId::Weight(l), ParamId::Bias(l)])
                .collect(),
            ParamGroup::Head => vec![ParamId::HeadWeight, ParamId::HeadBias],
            ParamGroup::Rectifier => match self.rectifier {
                Some(_) => (0..blocks)
                    .flat_map(|l| [ParamId::Gamma(l), ParamId::Beta(l)])
                    .collect(),
                None => Vec::new(),
            },
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        [ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Rectifier]
            .into_iter()
            .flat_map(|g| self.group_ids(g))
            .collect()
    }

    /// Records the embedding of `input` (`[B, ...input shape]`). Parameters in
    /// `trainable` become gradient leaves, everything else is constant.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<S>,
        input: Var<'t, S>,
        trainable: &[ParamId],
    ) -> Result<Forward<'t, S>, NetworkError> {
        let expected = self.model.arch.input_shape();
        let shape = input.shape();
        if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
            return Err(NetworkError::InputShape {
                expected,
                got: shape,
            });
        }
        let batch = shape[0];
        let mut params = Vec::with_capacity(trainable.len());
        let mut bind = |id: ParamId| -> Var<'t, S> {
            let value = self.param(id).expect("parameter exists").clone();
            if trainable.contains(&id) {
                let v = tape.leaf(value);
                params.push((id, v));
                v
            } else {
                tape.constant(value)
            }
        };

        let mut x = input;
        let conv = matches!(self.model.arch, Architecture::Conv { .. });
        for l in 0..self.model.blocks.len() {
            let mut w = bind(ParamId::Weight(l));
            let mut b = bind(ParamId::Bias(l));
            if self.rectifier.is_some() {
                w = w.mul(bind(ParamId::Gamma(l)))?;
                b = b.add(bind(ParamId::Beta(l)))?;
            }
            x = if conv {
                x.conv2d(w, Some(b), 1, CONV_PADDING)?.relu().maxpool2d(POOL)?
            } else {
                x.matmul(w.t()?)?.add(b)?.relu()
            };
        }
        if conv {
            let row: usize = x.shape()[1..].iter().product();
            x = x.reshape(&[batch, row])?;
        }
        let hw = bind(ParamId::HeadWeight);
        let hb = bind(ParamId::HeadBias);
        let projected = x.matmul(hw.t()?)?.add(hb)?;
        let embedding = projected.l2_normalize(1)?;
        // Keep the requested order regardless of binding order.
        params.sort_by_key(|(id, _)| trainable.iter().position(|t| t == id));
        Ok(Forward { embedding, params })
    }

    /// Embeddings `[B, embed_dim]` without recording gradients.
    pub fn embed(&self, batch: &Tensor<S>) -> Result<Tensor<S>, NetworkError> {
        let tape = Tape::new();
        let input = tape.constant(batch.clone());
        Ok(self.forward(&tape, input, &[])?.embedding.to_tensor())
    }

    pub fn checksum_of(&self, ids: &[ParamId]) -> u64 {
        ids.iter().fold(0u64, |acc, &id| {
            acc.rotate_left(7) ^ self.param(id).map_or(0, |t| t.checksum())
        })
    }
}

/// Embeds a batch with the plain (rectifier-free) network.
pub fn embed<S: Scalar>(model: &EmbeddingModel<S>, batch: &Tensor<S>) -> Result<Tensor<S>, NetworkError> {
    RectifiedModel::plain(model.clone()).embed(batch)
}

/// `[B1,d] x [B2,d]` → squared Euclidean distances `[B1,B2]`.
pub fn pairwise_sq_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NetworkError> {
    let tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    Ok(va.pairwise_sq_distance(vb)?.to_tensor())
}
