//! Encode, reconstruct, fuse and decode.
//!
//! Parameters live in a [`ParamStore`]; a forward pass first binds them onto
//! a [`Tape`] (as leaves for training, constants for inference) and then runs
//! the methods on the resulting [`ModelVars`].

use rand::Rng;

use crate::coalition::Coalition;
use crate::error::{MceError, Result};
use crate::params::ParamStore;
use crate::seeding::{rng_for, stream};
use crate::synth::MultiModalBatch;
use crate::tensor::{attention_block, AttentionVars, DenseVars, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modalities: usize,
    pub input_dim: usize,
    /// Hidden width of the two-layer encoders.
    pub encoder_hidden: usize,
    /// Shared feature width `D`.
    pub feature_dim: usize,
    pub classes: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Standard deviation of the positional-encoding initialisation.
    pub pos_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: 3,
            input_dim: 16,
            encoder_hidden: 16,
            feature_dim: 8,
            classes: 4,
            heads: 2,
            ffn_hidden: 16,
            pos_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.modalities", self.modalities),
            ("model.input_dim", self.input_dim),
            ("model.encoder_hidden", self.encoder_hidden),
            ("model.feature_dim", self.feature_dim),
            ("model.classes", self.classes),
            ("model.ffn_hidden", self.ffn_hidden),
        ] {
            if v == 0 {
                return Err(MceError::config(field, "must be positive"));
            }
        }
        if self.modalities > 16 {
            return Err(MceError::config("model.modalities", "at most 16 modalities are supported"));
        }
        if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return Err(MceError::config(
                "model.heads",
                format!("feature width {} is not divisible by {} heads", self.feature_dim, self.heads),
            ));
        }
        if !(self.pos_std >= 0.0) {
            return Err(MceError::config("model.pos_std", "must be non-negative"));
        }
        Ok(())
    }

    pub fn full_mask(&self) -> Coalition {
        (1u64 << self.modalities) - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DenseSlot {
    w: usize,
    b: usize,
}

impl DenseSlot {
    fn bind(self, vars: &[Var]) -> DenseVars {
        DenseVars {
            w: vars[self.w],
            b: vars[self.b],
        }
    }
}

/// Adds a dense layer with Gaussian weights of std `gain/√fan_in` and zero bias.
fn add_dense<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> DenseSlot {
    let std = gain / (fan_in as f64).sqrt();
    DenseSlot {
        w: store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng)),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoders: Vec<[DenseSlot; 2]>,
    unimodal: Vec<DenseSlot>,
    pos: usize,
    attention: [DenseSlot; 6],
    fusion: DenseSlot,
    decoder: DenseSlot,
}

/// Per-modality encoders, attention reconstruction with learnable positional
/// slots, concatenation fusion, a decoder and per-modality unimodal decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl MultiModalModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::MODEL_INIT);
        let mut p = ParamStore::new();
        let (m, din, h, d, c) = (
            config.modalities,
            config.input_dim,
            config.encoder_hidden,
            config.feature_dim,
            config.classes,
        );
        let encoders = (0..m)
            .map(|i| {
                [
                    add_dense(&mut p, &format!("encoder{i}.hidden"), din, h, RELU_GAIN, &mut rng),
                    add_dense(&mut p, &format!("encoder{i}.out"), h, d, 1.0, &mut rng),
                ]
            })
            .collect();
        let unimodal = (0..m)
            .map(|i| add_dense(&mut p, &format!("unimodal{i}"), d, c, 1.0, &mut rng))
            .collect();
        let pos = p.add("recon.pos", Tensor::randn(&[m, d], config.pos_std, &mut rng));
        let attention = [
            add_dense(&mut p, "recon.query", d, d, 1.0, &mut rng),
            add_dense(&mut p, "recon.key", d, d, 1.0, &mut rng),
            add_dense(&mut p, "recon.value", d, d, 1.0, &mut rng),
            add_dense(&mut p, "recon.output", d, d, 1.0, &mut rng),
            add_dense(&mut p, "recon.ffn_in", d, config.ffn_hidden, RELU_GAIN, &mut rng),
            add_dense(&mut p, "recon.ffn_out", config.ffn_hidden, d, 1.0, &mut rng),
        ];
        let fusion = add_dense(&mut p, "fusion", m * d, d, RELU_GAIN, &mut rng);
        let decoder = add_dense(&mut p, "decoder", d, c, 1.0, &mut rng);
        Ok(MultiModalModel {
            config: config.clone(),
            params: p,
            layout: Layout {
                encoders,
                unimodal,
                pos,
                attention,
                fusion,
                decoder,
            },
        })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match a
    /// freshly initialised model of the same config.
    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = MultiModalModel::new(config, 0)?;
        if model.params.names() != params.names()
            || model
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(MceError::Parse("checkpoint does not match the model config".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Binds all parameters onto `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let vars = self.params.bind(tape, trainable);
        self.vars_from(vars)
    }

    /// Wraps already-bound parameter variables (in store order).
    pub fn vars_from(&self, vars: Vec<Var>) -> ModelVars {
        let l = &self.layout;
        let a = l.attention;
        ModelVars {
            encoders: l
                .encoders
                .iter()
                .map(|[h, o]| [h.bind(&vars), o.bind(&vars)])
                .collect(),
            unimodal: l.unimodal.iter().map(|s| s.bind(&vars)).collect(),
            pos: vars[l.pos],
            attention: AttentionVars {
                query: a[0].bind(&vars),
                key: a[1].bind(&vars),
                value: a[2].bind(&vars),
                output: a[3].bind(&vars),
                ffn_in: a[4].bind(&vars),
                ffn_out: a[5].bind(&vars),
            },
            fusion: l.fusion.bind(&vars),
            decoder: l.decoder.bind(&vars),
            heads: self.config.heads,
            feature_dim: self.config.feature_dim,
            all: vars,
        }
    }

    /// Logits for one subset on the masked path, without recording gradients.
    pub fn predict_subset(&self, batch: &MultiModalBatch, subset: Coalition) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = vars.encode(&mut tape, batch)?;
        let z = vars.fuse_predict(&mut tape, &h, subset)?;
        Ok(tape.value(z).clone())
    }

    /// Logits for several subsets, sharing one encoding pass.
    pub fn predict_subsets(&self, batch: &MultiModalBatch, subsets: &[Coalition]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = vars.encode(&mut tape, batch)?;
        subsets
            .iter()
            .map(|&s| {
                let z = vars.fuse_predict(&mut tape, &h, s)?;
                Ok(tape.value(z).clone())
            })
            .collect()
    }

    /// Logits of the main task path, treating `masks` as the present sets.
    pub fn predict_completed(&self, batch: &MultiModalBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = vars.encode(&mut tape, batch)?;
        let z = vars.task_logits(&mut tape, &h, &batch.masks)?;
        Ok(tape.value(z).clone())
    }

    /// Fused features for one subset on the masked path.
    pub fn fused_features(&self, batch: &MultiModalBatch, subset: Coalition) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = vars.encode(&mut tape, batch)?;
        let f = vars.fuse(&mut tape, &h, subset)?;
        Ok(tape.value(f).clone())
    }

    /// Encoder output for modality `m` on every row of `x`, ignoring presence.
    pub fn encode_modality(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = vars.encoder(&mut tape, xv, m)?;
        Ok(tape.value(h).clone())
    }
}

/// Model parameters bound on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoders: Vec<[DenseVars; 2]>,
    pub unimodal: Vec<DenseVars>,
    pub pos: Var,
    pub attention: AttentionVars,
    pub fusion: DenseVars,
    pub decoder: DenseVars,
    pub heads: usize,
    pub feature_dim: usize,
    /// Every bound parameter, in store order.
    pub all: Vec<Var>,
}

fn mask_column(masks: &[Coalition], m: usize) -> Vec<f64> {
    masks.iter().map(|&k| (k >> m & 1) as f64).collect()
}

impl ModelVars {
    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    /// Two-layer encoder for modality `m` applied to every row.
    pub fn encoder(&self, tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
        let [hidden, out] = self.encoders[m];
        let a = hidden.forward(tape, x)?;
        let a = tape.relu(a);
        out.forward(tape, a)
    }

    /// One `B×D` feature matrix per modality; rows of absent modalities are
    /// zero.
    pub fn encode(&self, tape: &mut Tape, batch: &MultiModalBatch) -> Result<Vec<Var>> {
        if batch.modalities() != self.modalities() {
            return Err(MceError::Dimension {
                op: "encode",
                lhs: vec![self.modalities()],
                rhs: vec![batch.modalities()],
            });
        }
        (0..self.modalities())
            .map(|m| {
                let x = tape.constant(batch.inputs[m].clone());
                let h = self.encoder(tape, x, m)?;
                tape.row_scale(h, batch.presence_column(m))
            })
            .collect()
    }

    /// Zeroes slots outside each row's `keep` mask, adds the positional
    /// table and runs self-attention across the modality axis of every
    /// sample. Returns all `M` refined slots.
    pub fn reconstruct(&self, tape: &mut Tape, features: &[Var], keep: &[Coalition]) -> Result<Vec<Var>> {
        let m_count = self.modalities();
        let slots = features
            .iter()
            .enumerate()
            .map(|(m, &h)| {
                let col = mask_column(keep, m);
                if col.iter().all(|&v| v == 1.0) {
                    Ok(h)
                } else {
                    tape.row_scale(h, col)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.interleave(&slots)?;
        let x = tape.add_tiled(stacked, self.pos)?;
        let y = attention_block(tape, x, m_count, self.heads, &self.attention)?;
        (0..m_count).map(|m| tape.take_slot(y, m, m_count)).collect()
    }

    /// Present slots keep their encoded features; absent slots take the
    /// reconstruction computed from the present ones.
    pub fn complete(&self, tape: &mut Tape, features: &[Var], masks: &[Coalition]) -> Result<Vec<Var>> {
        let full = (1u64 << self.modalities()) - 1;
        if masks.iter().all(|&k| k == full) {
            return Ok(features.to_vec());
        }
        let recon = self.reconstruct(tape, features, masks)?;
        features
            .iter()
            .zip(recon)
            .enumerate()
            .map(|(m, (&h, r))| {
                let absent: Vec<f64> = masks.iter().map(|&k| (!k >> m & 1) as f64).collect();
                if absent.iter().all(|&v| v == 0.0) {
                    return Ok(h);
                }
                let filled = tape.row_scale(r, absent)?;
                tape.add(h, filled)
            })
            .collect()
    }

    /// Fused feature: modalities outside `subset` are replaced by zeros,
    /// slots are concatenated and projected through a ReLU layer.
    pub fn fuse(&self, tape: &mut Tape, features: &[Var], subset: Coalition) -> Result<Var> {
        if subset == 0 {
            return Err(MceError::Contract("fusion needs a non-empty subset".into()));
        }
        let full = (1u64 << self.modalities()) - 1;
        if subset & !full != 0 {
            return Err(MceError::Contract(format!("subset {subset:#b} names unknown modalities")));
        }
        let rows = tape.value(features[0]).rows();
        let parts: Vec<Var> = features
            .iter()
            .enumerate()
            .map(|(m, &h)| {
                if subset >> m & 1 == 1 {
                    h
                } else {
                    tape.constant(Tensor::zeros(&[rows, self.feature_dim]))
                }
            })
            .collect();
        let cat = tape.concat_cols(&parts)?;
        let z = self.fusion.forward(tape, cat)?;
        Ok(tape.relu(z))
    }

    pub fn fuse_predict(&self, tape: &mut Tape, features: &[Var], subset: Coalition) -> Result<Var> {
        let f = self.fuse(tape, features, subset)?;
        self.decoder.forward(tape, f)
    }

    /// Main task path: complete absent slots by reconstruction, then fuse all.
    pub fn task_logits(&self, tape: &mut Tape, features: &[Var], masks: &[Coalition]) -> Result<Var> {
        let completed = self.complete(tape, features, masks)?;
        self.fuse_predict(tape, &completed, (1u64 << self.modalities()) - 1)
    }

    pub fn unimodal_logits(&self, tape: &mut Tape, feature: Var, m: usize) -> Result<Var> {
        self.unimodal[m].forward(tape, feature)
    }
}

/// A standalone encoder plus linear decoder for one modality. Parameters are
/// never changed after pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenUnimodal {
    modality: usize,
    params: ParamStore,
}

impl FrozenUnimodal {
    /// Fresh (untrained) parameters.
    pub fn init(config: &ModelConfig, modality: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed ^ (modality as u64) << 32, stream::PRETRAIN);
        let mut p = ParamStore::new();
        add_dense(&mut p, "hidden", config.input_dim, config.encoder_hidden, RELU_GAIN, &mut rng);
        add_dense(&mut p, "out", config.encoder_hidden, config.feature_dim, 1.0, &mut rng);
        add_dense(&mut p, "decoder", config.feature_dim, config.classes, 1.0, &mut rng);
        Ok(FrozenUnimodal { modality, params: p })
    }

    pub fn from_params(modality: usize, params: ParamStore) -> Result<Self> {
        for name in ["hidden.w", "hidden.b", "out.w", "out.b", "decoder.w", "decoder.b"] {
            if params.get(name).is_none() {
                return Err(MceError::Parse(format!("unimodal checkpoint lacks `{name}`")));
            }
        }
        Ok(FrozenUnimodal { modality, params })
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Used by pretraining only; the model is frozen once handed out.
    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Builds logits for rows of `x` on `tape` from bound parameters.
    pub fn forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let enc = Self::encode_vars(tape, vars, x)?;
        DenseVars { w: vars[4], b: vars[5] }.forward(tape, enc)
    }

    fn encode_vars(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let a = DenseVars { w: vars[0], b: vars[1] }.forward(tape, x)?;
        let a = tape.relu(a);
        DenseVars { w: vars[2], b: vars[3] }.forward(tape, a)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = Self::forward(&mut tape, &vars, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Encoder features for rows of `x`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = Self::encode_vars(&mut tape, &vars, xv)?;
        Ok(tape.value(h).clone())
    }

    /// Predicted classes for every row of `batch`; each row must have this
    /// modality present.
    pub fn predict(&self, batch: &MultiModalBatch) -> Result<Vec<usize>> {
        if let Some(n) = batch.masks.iter().position(|&k| k >> self.modality & 1 == 0) {
            return Err(MceError::Contract(format!(
                "row {n} has modality {} absent; the unimodal model cannot score it",
                self.modality
            )));
        }
        Ok(self.logits(&batch.inputs[self.modality])?.argmax_rows())
    }
}
