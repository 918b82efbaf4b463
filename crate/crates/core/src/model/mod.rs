//! Causal transformer with swappable encoder/decoder roles.
//!
//! Blocks are pre-norm (RMS) with rotary attention and a GELU feed-forward;
//! there are no biases. Two execution paths share the same kernels: a taped
//! forward over packed sequences for training, and a KV-cached [`Session`]
//! for inference. In full-weight mode the two paths agree bit-for-bit.

mod checkpoint;
mod graph;
mod session;
mod weights;

use std::borrow::Cow;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, read_checkpoint_info, save_checkpoint,
    CheckpointInfo, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use graph::{forward_tape, AdapterVars, BackboneVars, LayerVars, Packing, RoleVars, TapeForward};
pub use session::Session;
pub use weights::{AdapterConfig, AdapterSet, BackboneWeights, LayerWeights, LoraPair, ADAPTER_TARGETS};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RopeTable};
use crate::tokenizer::{check_ids, TokenId, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub rotary_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            vocab_size: VOCAB_SIZE,
            max_len: 512,
            rotary_base: 10000.0,
            norm_eps: default_norm_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("model.{field}"),
                message: message.to_string(),
            })
        };
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model", "dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("n_heads", "must divide d_model");
        }
        if self.head_dim() % 2 != 0 {
            return bad("n_heads", "head dimension must be even for rotary phases");
        }
        if self.vocab_size < VOCAB_SIZE {
            return bad("vocab_size", "must cover the byte vocabulary and specials");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be positive");
        }
        if !(self.rotary_base > 1.0) || !(self.norm_eps > 0.0) {
            return bad("rotary_base", "rotary_base must exceed 1 and norm_eps be positive");
        }
        Ok(())
    }

    /// Name of the first field that differs from `other`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        let fields = [
            ("d_model", self.d_model == other.d_model),
            ("n_layers", self.n_layers == other.n_layers),
            ("n_heads", self.n_heads == other.n_heads),
            ("d_ff", self.d_ff == other.d_ff),
            ("vocab_size", self.vocab_size == other.vocab_size),
            ("max_len", self.max_len == other.max_len),
            ("rotary_base", self.rotary_base == other.rotary_base),
            ("norm_eps", self.norm_eps == other.norm_eps),
        ];
        fields.iter().find(|(_, same)| !same).map(|(name, _)| *name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Encoder,
    Decoder,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Full,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    /// Each role owns a complete copy of the network.
    Full {
        decoder: BackboneWeights,
        encoder: Option<BackboneWeights>,
    },
    /// Roles are low-rank deltas over one shared backbone.
    Adapter {
        backbone: BackboneWeights,
        decoder: Option<AdapterSet>,
        encoder: Option<AdapterSet>,
    },
}

/// Parameters seen by one role: a backbone plus, in adapter mode, its deltas.
#[derive(Debug, Clone, Copy)]
pub struct RoleWeights<'a> {
    pub base: &'a BackboneWeights,
    pub adapter: Option<&'a AdapterSet>,
}

impl RoleWeights<'_> {
    /// The backbone with any deltas merged in.
    pub fn effective(&self) -> Cow<'_, BackboneWeights> {
        match self.adapter {
            None => Cow::Borrowed(self.base),
            Some(a) => Cow::Owned(a.merged_into(self.base)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Token(TokenId),
    Latent,
}

/// Input rows for a forward pass, each tagged with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStream {
    pub rows: Matrix,
    pub kinds: Vec<RowKind>,
}

impl EmbeddingStream {
    pub fn empty(d: usize) -> Self {
        Self {
            rows: Matrix::zeros(0, d),
            kinds: Vec::new(),
        }
    }

    pub fn from_latents(latents: &Matrix) -> Self {
        Self {
            rows: latents.clone(),
            kinds: vec![RowKind::Latent; latents.rows()],
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn append(&mut self, other: &EmbeddingStream) -> Result<()> {
        self.rows = Matrix::vstack(&[&self.rows, &other.rows])?;
        self.kinds.extend_from_slice(&other.kinds);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub hidden: Matrix,
    pub logits: Matrix,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    role: Role,
    rope: Arc<RopeTable>,
}

impl Model {
    /// Randomly initialized full-weight model with only the decoder role.
    pub fn new_full(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = BackboneWeights::init(&config, &mut rng);
        Self::from_parts(config, Weights::Full { decoder, encoder: None })
    }

    /// Adapter-mode model over `backbone` with fresh decoder adapters.
    pub fn new_adapter(config: ModelConfig, backbone: BackboneWeights, adapter: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if adapter.rank == 0 || !(0.0..1.0).contains(&adapter.dropout) {
            return Err(Error::Config {
                field: "adapter.rank".into(),
                message: "rank must be positive and dropout in [0, 1)".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = AdapterSet::init(&config, adapter, Role::Decoder, &mut rng);
        Self::from_parts(
            config,
            Weights::Adapter {
                backbone,
                decoder: Some(decoder),
                encoder: None,
            },
        )
    }

    pub fn from_parts(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let check = |w: &BackboneWeights| -> Result<()> {
            let reference = BackboneWeights::<f32>::shapes(&config);
            let actual: Vec<_> = w.params().iter().map(|m| m.shape()).collect();
            if actual != reference {
                return Err(Error::shape("model", "weights do not match the configuration"));
            }
            for m in w.params() {
                m.check_finite("weights")?;
            }
            Ok(())
        };
        let check_adapter = |a: &AdapterSet| -> Result<()> {
            let ok = a.layers.len() == config.n_layers
                && a.layers.iter().flatten().all(|p| {
                    p.a.shape() == (config.d_model, a.config.rank) && p.b.shape() == (a.config.rank, config.d_model)
                });
            if !ok {
                return Err(Error::shape("model", "adapter shapes do not match the configuration"));
            }
            Ok(())
        };
        match &weights {
            Weights::Full { decoder, encoder } => {
                check(decoder)?;
                if let Some(e) = encoder {
                    check(e)?;
                }
            }
            Weights::Adapter {
                backbone,
                decoder,
                encoder,
            } => {
                check(backbone)?;
                for a in decoder.iter().chain(encoder.iter()) {
                    check_adapter(a)?;
                }
            }
        }
        let rope = Arc::new(RopeTable::new(config.head_dim(), config.max_len, config.rotary_base));
        let role = match &weights {
            Weights::Adapter { decoder: None, .. } => Role::Encoder,
            _ => Role::Decoder,
        };
        Ok(Self {
            config,
            weights,
            role,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn rope(&self) -> &Arc<RopeTable> {
        &self.rope
    }

    pub fn mode(&self) -> WeightMode {
        match self.weights {
            Weights::Full { .. } => WeightMode::Full,
            Weights::Adapter { .. } => WeightMode::Adapter,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn has_role(&self, role: Role) -> bool {
        match (&self.weights, role) {
            (Weights::Full { .. }, Role::Decoder) => true,
            (Weights::Full { encoder, .. }, Role::Encoder) => encoder.is_some(),
            (Weights::Adapter { decoder, .. }, Role::Decoder) => decoder.is_some(),
            (Weights::Adapter { encoder, .. }, Role::Encoder) => encoder.is_some(),
        }
    }

    pub fn set_role(&mut self, role: Role) -> Result<()> {
        if !self.has_role(role) {
            return Err(Error::RoleUninitialized(role.name()));
        }
        self.role = role;
        Ok(())
    }

    /// Makes the encoder an exact copy of the current decoder parameters.
    pub fn init_encoder_from_decoder(&mut self) -> Result<()> {
        match &mut self.weights {
            Weights::Full { decoder, encoder } => *encoder = Some(decoder.clone()),
            Weights::Adapter { decoder, encoder, .. } => {
                let mut copy = decoder.clone().ok_or(Error::RoleUninitialized("decoder"))?;
                copy.role = Role::Encoder;
                *encoder = Some(copy);
            }
        }
        Ok(())
    }

    pub fn role_weights(&self, role: Role) -> Result<RoleWeights<'_>> {
        let missing = Error::RoleUninitialized(role.name());
        match (&self.weights, role) {
            (Weights::Full { decoder, .. }, Role::Decoder) => Ok(RoleWeights {
                base: decoder,
                adapter: None,
            }),
            (Weights::Full { encoder, .. }, Role::Encoder) => Ok(RoleWeights {
                base: encoder.as_ref().ok_or(missing)?,
                adapter: None,
            }),
            (Weights::Adapter { backbone, decoder, .. }, Role::Decoder) => Ok(RoleWeights {
                base: backbone,
                adapter: Some(decoder.as_ref().ok_or(missing)?),
            }),
            (Weights::Adapter { backbone, encoder, .. }, Role::Encoder) => Ok(RoleWeights {
                base: backbone,
                adapter: Some(encoder.as_ref().ok_or(missing)?),
            }),
        }
    }

    /// Parameters updated when training `role`, in [`RoleVars`] order.
    pub fn trainable(&self, role: Role) -> Result<Vec<&Matrix>> {
        let rw = self.role_weights(role)?;
        Ok(match rw.adapter {
            Some(a) => a.params(),
            None => rw.base.params(),
        })
    }

    pub fn trainable_mut(&mut self, role: Role) -> Result<Vec<&mut Matrix>> {
        let missing = Error::RoleUninitialized(role.name());
        Ok(match (&mut self.weights, role) {
            (Weights::Full { decoder, .. }, Role::Decoder) => decoder.params_mut(),
            (Weights::Full { encoder, .. }, Role::Encoder) => encoder.as_mut().ok_or(missing)?.params_mut(),
            (Weights::Adapter { decoder, .. }, Role::Decoder) => decoder.as_mut().ok_or(missing)?.params_mut(),
            (Weights::Adapter { encoder, .. }, Role::Encoder) => encoder.as_mut().ok_or(missing)?.params_mut(),
        })
    }

    /// Embedding-table rows for `ids` under the active role.
    pub fn embed_tokens(&self, ids: &[TokenId]) -> Result<EmbeddingStream> {
        check_ids(ids)?;
        let table = &self.role_weights(self.role)?.base.embed;
        let mut rows = Matrix::zeros(ids.len(), self.config.d_model);
        for (i, &id) in ids.iter().enumerate() {
            rows.row_mut(i).copy_from_slice(table.row(id as usize));
        }
        Ok(EmbeddingStream {
            rows,
            kinds: ids.iter().map(|&id| RowKind::Token(id)).collect(),
        })
    }

    /// Inference session for the active role.
    pub fn session(&self) -> Result<Session<'_>> {
        Session::new(self, self.role)
    }

    /// Eval-mode forward of a whole stream under the active role.
    pub fn forward(&self, stream: &EmbeddingStream) -> Result<ForwardOutput> {
        let mut s = self.session()?;
        let hidden = s.push(&stream.rows)?;
        let logits = s.logits(&hidden);
        Ok(ForwardOutput { hidden, logits })
    }

    /// Stable digest of one role's parameter bytes.
    pub fn role_digest(&self, role: Role) -> Result<u64> {
        Ok(digest(self.trainable(role)?.into_iter()))
    }

    /// Digest of the shared backbone in adapter mode, or the decoder copy in
    /// full mode.
    pub fn base_digest(&self) -> u64 {
        match &self.weights {
            Weights::Full { decoder, .. } => digest(decoder.params().into_iter()),
            Weights::Adapter { backbone, .. } => digest(backbone.params().into_iter()),
        }
    }
}

/// FNV-1a over the raw bytes of a parameter list.
fn digest<'a>(params: impl Iterator<Item = &'a Matrix>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in params {
        for x in m.data() {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}
