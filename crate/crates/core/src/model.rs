//! Parameter storage and the assembled retrieval model.

use serde::{Deserialize, Serialize};

use crate::cpg::CpgParams;
use crate::data::{Dialog, Utterance};
use crate::encoders::{DualEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::mop::{MopParams, RetrievalType};
use crate::numerics::{Rng, Tape, Tensor, Var};

/// Parameter group membership. Stage selection flips trainability per
/// group; every parameter belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    BackboneText,
    BackboneImage,
    DomainPrompts,
    Cpg,
    Mop,
    /// Temporary projection head used only while pretraining the backbone;
    /// dropped before any checkpoint is written.
    PretrainHead,
}

impl Group {
    pub fn name(&self) -> &'static str {
        match self {
            Group::BackboneText => "backbone_text",
            Group::BackboneImage => "backbone_image",
            Group::DomainPrompts => "domain_prompts",
            Group::Cpg => "cpg",
            Group::Mop => "mop",
            Group::PretrainHead => "pretrain_head",
        }
    }
}

/// Index of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    /// Whether decoupled weight decay applies (weight matrices only;
    /// biases, layer-norm parameters and prompts are excluded).
    pub decay: bool,
    pub tensor: Tensor,
}

/// Flat, name-addressed parameter arena shared by all submodules.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: Group, decay: bool, tensor: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            decay,
            tensor,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Drop the trailing entries down to `len` (used to discard the
    /// temporary pretraining head). Earlier ids stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
    }

    /// Register a parameter on the tape (memoized per tape), so shared
    /// parameters accumulate gradient into a single leaf.
    pub fn leaf(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = tape.leaf_for(id.0) {
            return v;
        }
        let t = &mut self.entries[id.0].tensor;
        let var = tape.leaf(t.shape(), t.values(), t.requires_grad, Some(id.0));
        t.tape_id = Some(var.id());
        var
    }

    /// Clear all gradient buffers (start of a step).
    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
            e.tensor.tape_id = None;
        }
    }

    /// Copy gradients off a finished tape into the registered tensors.
    /// Tensors with `requires_grad == false` stay grad-free; registered
    /// trainable tensors off the loss path receive zeros.
    pub fn write_back_grads(&mut self, tape: &Tape) {
        for &(key, var) in tape.registered_leaves() {
            let t = &mut self.entries[key].tensor;
            if t.requires_grad {
                t.grad = Some(tape.grad_or_zeros(var));
            }
            t.tape_id = None;
        }
    }

    /// Total scalar coordinate count.
    pub fn coord_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_coord_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn ids_in_group(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_group_trainable(&mut self, group: Group, trainable: bool) {
        for e in &mut self.entries {
            if e.group == group {
                e.tensor.requires_grad = trainable;
            }
        }
    }

    /// Snapshot of a group's parameter values, keyed by name.
    pub fn group_snapshot(&self, group: Group) -> Vec<(String, Vec<f64>)> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| (e.name.clone(), e.tensor.values().to_vec()))
            .collect()
    }

    /// Restore values captured by [`Self::group_snapshot`]. Every named
    /// parameter must exist with a matching length.
    pub fn load_values_by_name(&mut self, snapshot: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, values) in snapshot {
            let id = self
                .by_name(name)
                .ok_or_else(|| Error::State(format!("no parameter named {name}")))?;
            let t = self.tensor_mut(id);
            if t.numel() != values.len() {
                return Err(Error::State(format!(
                    "parameter {name}: size {} vs snapshot {}",
                    t.numel(),
                    values.len()
                )));
            }
            t.values_mut().copy_from_slice(values);
        }
        Ok(())
    }
}

/// Full model configuration: backbone shape, prompt shapes, projection
/// width, and the ablation switches.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub enc: EncoderConfig,
    /// Context-encoder stack shape; its `d_model` must equal the backbone's.
    pub ctx_enc: EncoderConfig,
    /// Context prompt length L_c.
    pub ctx_len: usize,
    /// Domain prompt length L_d (0 disables domain prompts).
    pub domain_len: usize,
    /// Layer index (0-based) at which context prompts enter the stack.
    pub insert_layer: usize,
    /// Shared retrieval space width D.
    pub proj_dim: usize,
    /// Prompt-generator bottleneck width m_b.
    pub bottleneck: usize,
    /// Context prompt generator present at all (off = the "-CPG" ablation).
    pub use_cpg: bool,
    /// Single shared projection expert (the "-MoP" ablation).
    pub single_expert: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let ctx_enc = EncoderConfig::default();
        ModelConfig {
            bottleneck: 2 * enc.d_model,
            enc,
            ctx_enc,
            ctx_len: 96,
            domain_len: 4,
            insert_layer: 1,
            proj_dim: 32,
            use_cpg: true,
            single_expert: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.enc.validate()?;
        self.ctx_enc.validate()?;
        if self.ctx_enc.d_model != self.enc.d_model {
            return Err(Error::Config(format!(
                "context encoder width {} != backbone width {}",
                self.ctx_enc.d_model, self.enc.d_model
            )));
        }
        if self.use_cpg && self.ctx_len == 0 {
            return Err(Error::Config("ctx_len must be >= 1".into()));
        }
        if self.insert_layer >= self.enc.n_layers {
            return Err(Error::Config(format!(
                "insert_layer {} out of range for {} layers",
                self.insert_layer, self.enc.n_layers
            )));
        }
        if self.proj_dim == 0 || self.bottleneck == 0 {
            return Err(Error::Config("proj_dim and bottleneck must be >= 1".into()));
        }
        Ok(())
    }
}

/// The assembled retriever: dual prompted encoders, optional context
/// prompt generator, and the projection experts.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub dual: DualEncoder,
    pub cpg: Option<CpgParams>,
    pub mop: MopParams,
}

/// Immutable view of the model's architecture, split off from the
/// parameter store so forward passes can borrow the store mutably.
pub struct ModelParts<'a> {
    pub cfg: &'a ModelConfig,
    pub dual: &'a DualEncoder,
    pub cpg: Option<&'a CpgParams>,
    pub mop: &'a MopParams,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let dual = DualEncoder::build(&mut store, &cfg.enc, cfg.domain_len, cfg.init_seed);
        let cpg = if cfg.use_cpg {
            let mut rng_cpg = Rng::stream(cfg.init_seed, 0x454E4304);
            Some(CpgParams::build(
                &mut store,
                &cfg.ctx_enc,
                cfg.ctx_len,
                cfg.bottleneck,
                &mut rng_cpg,
            ))
        } else {
            None
        };
        let mut rng_mop = Rng::stream(cfg.init_seed, 0x454E4305);
        let mop = MopParams::build(
            &mut store,
            cfg.enc.d_model,
            cfg.proj_dim,
            cfg.single_expert,
            &mut rng_mop,
        );
        Ok(Model {
            cfg,
            store,
            dual,
            cpg,
            mop,
        })
    }

    /// Encode the query side of a dialog: context prompts (when enabled and
    /// requested) plus domain prompts around the current input, then the
    /// retrieval-type expert.
    pub fn encode_query(
        &mut self,
        tape: &mut Tape,
        dialog: &Dialog,
        rt: RetrievalType,
        use_ctx: bool,
    ) -> Result<Var> {
        let Model {
            cfg,
            store,
            dual,
            cpg,
            mop,
            ..
        } = self;
        let ctx = match (use_ctx, cpg.as_ref()) {
            (true, Some(cpg)) => Some(cpg.ctx_prompts(tape, store, dialog.context())?),
            _ => None,
        };
        let h = dual.encode_input(tape, store, dialog.current_input(), ctx, cfg.insert_layer)?;
        let row = tape.reshape(h, vec![1, cfg.enc.d_model])?;
        let proj = mop.project_query_rows(tape, store, row, rt)?;
        tape.reshape(proj, vec![cfg.proj_dim])
    }

    /// Encode a candidate response with domain prompts only, then the
    /// retrieval-type expert.
    pub fn encode_candidate(
        &mut self,
        tape: &mut Tape,
        resp: &Utterance,
        rt: RetrievalType,
    ) -> Result<Var> {
        let Model {
            cfg, store, dual, mop, ..
        } = self;
        let h = dual.encode_response(tape, store, resp)?;
        let row = tape.reshape(h, vec![1, cfg.enc.d_model])?;
        let proj = mop.project_candidate_rows(tape, store, row, rt)?;
        tape.reshape(proj, vec![cfg.proj_dim])
    }

    /// Backbone-level response representation (before projection), used by
    /// the evaluator to cache candidates across retrieval types.
    pub fn encode_response_backbone(&mut self, resp: &Utterance) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let Model { store, dual, .. } = self;
        let h = dual.encode_response(&mut tape, store, resp)?;
        Ok(tape.values(h).to_vec())
    }

    /// Query-side backbone representation for one dialog.
    pub fn encode_query_backbone(&mut self, dialog: &Dialog, use_ctx: bool) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let Model {
            cfg, store, dual, cpg, ..
        } = self;
        let ctx = match (use_ctx, cpg.as_ref()) {
            (true, Some(cpg)) => Some(cpg.ctx_prompts(&mut tape, store, dialog.context())?),
            _ => None,
        };
        let h = dual.encode_input(&mut tape, store, dialog.current_input(), ctx, cfg.insert_layer)?;
        Ok(tape.values(h).to_vec())
    }

    /// Split into an architecture view plus the mutable parameter store.
    pub fn split_parts(&mut self) -> (ModelParts<'_>, &mut ParamStore) {
        (
            ModelParts {
                cfg: &self.cfg,
                dual: &self.dual,
                cpg: self.cpg.as_ref(),
                mop: &self.mop,
            },
            &mut self.store,
        )
    }

    /// Fraction of scalar coordinates currently trainable.
    pub fn trainable_fraction(&self) -> f64 {
        let total = self.store.coord_count();
        if total == 0 {
            return 0.0;
        }
        self.store.trainable_coord_count() as f64 / total as f64
    }
}
