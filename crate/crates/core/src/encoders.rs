//! Toy transformer dual encoders with two prompt-injection mechanisms.
//!
//! Domain prompts are fresh learnable rows prepended inside every layer
//! and discarded after it (deep prefix style). Context prompts, when
//! present, are prepended once at `insert_layer` and then travel through
//! the remaining layers as ordinary positions. Prompt rows receive no
//! positional embeddings; attention is bidirectional and unmasked. The
//! encoder output is the final-layer representation of a dedicated
//! summary token.

use serde::{Deserialize, Serialize};

use crate::data::{Modality, Utterance};
use crate::error::{Error, Result};
use crate::model::{Group, ParamId, ParamStore};
use crate::numerics::{Rng, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Feed-forward hidden width as a multiple of d_model.
const FFN_MULT: usize = 2;

/// Backbone shape. The same family also describes the context encoder
/// stack.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub patch_dim: usize,
    pub n_patches: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            vocab_size: 256,
            max_seq: 128,
            patch_dim: 16,
            n_patches: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.d_model > 0
            && self.n_layers > 0
            && self.n_heads > 0
            && self.vocab_size > 0
            && self.max_seq > 1
            && self.patch_dim > 0
            && self.n_patches > 0;
        if !all_positive {
            return Err(Error::Config("encoder config: all dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-layer attention + feed-forward parameters.
pub struct LayerParams {
    pub ln1: (ParamId, ParamId),
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerParams {
    pub fn build(store: &mut ParamStore, group: Group, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        let h = FFN_MULT * d;
        let w = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut Rng| {
            store.push(
                format!("{prefix}.{name}"),
                group,
                true,
                Tensor::randn(vec![rows, cols], 1.0 / (cols as f64).sqrt(), rng),
            )
        };
        let zeros = |store: &mut ParamStore, name: &str, n: usize| {
            store.push(format!("{prefix}.{name}"), group, false, Tensor::zeros(vec![n]))
        };
        let ones = |store: &mut ParamStore, name: &str, n: usize| {
            store.push(
                format!("{prefix}.{name}"),
                group,
                false,
                Tensor::vector(vec![1.0; n]),
            )
        };
        LayerParams {
            ln1: (ones(store, "ln1.g", d), zeros(store, "ln1.b", d)),
            wq: w(store, "attn.wq", d, d, rng),
            bq: zeros(store, "attn.bq", d),
            wk: w(store, "attn.wk", d, d, rng),
            bk: zeros(store, "attn.bk", d),
            wv: w(store, "attn.wv", d, d, rng),
            bv: zeros(store, "attn.bv", d),
            wo: w(store, "attn.wo", d, d, rng),
            bo: zeros(store, "attn.bo", d),
            ln2: (ones(store, "ln2.g", d), zeros(store, "ln2.b", d)),
            w1: w(store, "ffn.w1", d, h, rng),
            b1: zeros(store, "ffn.b1", h),
            w2: w(store, "ffn.w2", h, d, rng),
            b2: zeros(store, "ffn.b2", d),
        }
    }

    /// Pre-norm residual block: x + attn(ln(x)), then x + ffn(ln(x)).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        n_heads: usize,
    ) -> Result<Var> {
        let d = tape.shape(x)[1];
        let head = d / n_heads;
        let scale = 1.0 / (head as f64).sqrt();

        let g1 = store.leaf(tape, self.ln1.0);
        let b1 = store.leaf(tape, self.ln1.1);
        let a = tape.layer_norm(x, g1, b1, LN_EPS)?;

        let wq = store.leaf(tape, self.wq);
        let bq = store.leaf(tape, self.bq);
        let wk = store.leaf(tape, self.wk);
        let bk = store.leaf(tape, self.bk);
        let wv = store.leaf(tape, self.wv);
        let bv = store.leaf(tape, self.bv);
        let q = tape.matmul(a, wq)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.matmul(a, wk)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.matmul(a, wv)?;
        let v = tape.add_row(v, bv)?;

        let mut heads = Vec::with_capacity(n_heads);
        for hh in 0..n_heads {
            let qh = tape.slice_cols(q, hh * head, head)?;
            let kh = tape.slice_cols(k, hh * head, head)?;
            let vh = tape.slice_cols(v, hh * head, head)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = store.leaf(tape, self.wo);
        let bo = store.leaf(tape, self.bo);
        let attn = tape.matmul(cat, wo)?;
        let attn = tape.add_row(attn, bo)?;
        let x = tape.add(x, attn)?;

        let g2 = store.leaf(tape, self.ln2.0);
        let b2 = store.leaf(tape, self.ln2.1);
        let f = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let w1 = store.leaf(tape, self.w1);
        let c1 = store.leaf(tape, self.b1);
        let w2 = store.leaf(tape, self.w2);
        let c2 = store.leaf(tape, self.b2);
        let f = tape.matmul(f, w1)?;
        let f = tape.add_row(f, c1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, c2)?;
        tape.add(x, f)
    }
}

/// Per-layer learnable prompt rows of one encoder. Empty when the domain
/// prompt length is zero.
pub struct DomainPrompts {
    pub per_layer: Vec<ParamId>,
    pub len: usize,
}

impl DomainPrompts {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        n_layers: usize,
        len: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(len > 0, "use DomainPrompts::empty for length 0");
        let per_layer = (0..n_layers)
            .map(|l| {
                store.push(
                    format!("{prefix}.layer{l}"),
                    Group::DomainPrompts,
                    false,
                    Tensor::randn(vec![len, d], 0.02, rng),
                )
            })
            .collect();
        DomainPrompts { per_layer, len }
    }

    pub fn empty() -> Self {
        DomainPrompts {
            per_layer: Vec::new(),
            len: 0,
        }
    }
}

enum EmbedKind {
    /// Token table.
    Text { tok_emb: ParamId },
    /// Linear patch projection.
    Image { proj_w: ParamId, proj_b: ParamId },
}

/// One prompted encoder: embedder, positions, summary token, transformer
/// stack, final norm, and its domain prompts.
pub struct PromptedEncoder {
    kind: EmbedKind,
    pos_emb: ParamId,
    summary: ParamId,
    layers: Vec<LayerParams>,
    ln_f: (ParamId, ParamId),
    pub domain: DomainPrompts,
    n_heads: usize,
    d_model: usize,
    vocab_size: usize,
    max_seq: usize,
    patch_dim: usize,
    n_patches: usize,
}

impl PromptedEncoder {
    fn build(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        group: Group,
        prefix: &str,
        text: bool,
        domain_len: usize,
        rng: &mut Rng,
        dom_rng: &mut Rng,
    ) -> Self {
        let d = cfg.d_model;
        let kind = if text {
            EmbedKind::Text {
                tok_emb: store.push(
                    format!("{prefix}.tok_emb"),
                    group,
                    true,
                    Tensor::randn(vec![cfg.vocab_size, d], 0.02, rng),
                ),
            }
        } else {
            EmbedKind::Image {
                proj_w: store.push(
                    format!("{prefix}.patch_proj.w"),
                    group,
                    true,
                    Tensor::randn(vec![cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt(), rng),
                ),
                proj_b: store.push(
                    format!("{prefix}.patch_proj.b"),
                    group,
                    false,
                    Tensor::zeros(vec![d]),
                ),
            }
        };
        let pos_emb = store.push(
            format!("{prefix}.pos_emb"),
            group,
            true,
            Tensor::randn(vec![cfg.max_seq, d], 0.02, rng),
        );
        let summary = store.push(
            format!("{prefix}.summary"),
            group,
            false,
            Tensor::randn(vec![d], 0.02, rng),
        );
        let layers = (0..cfg.n_layers)
            .map(|l| LayerParams::build(store, group, &format!("{prefix}.layers.{l}"), d, rng))
            .collect();
        let ln_f = (
            store.push(format!("{prefix}.ln_f.g"), group, false, Tensor::vector(vec![1.0; d])),
            store.push(format!("{prefix}.ln_f.b"), group, false, Tensor::zeros(vec![d])),
        );
        let domain = if domain_len > 0 {
            DomainPrompts::build(
                store,
                &format!("domain.{}", if text { "text" } else { "image" }),
                cfg.n_layers,
                domain_len,
                d,
                dom_rng,
            )
        } else {
            DomainPrompts::empty()
        };
        PromptedEncoder {
            kind,
            pos_emb,
            summary,
            layers,
            ln_f,
            domain,
            n_heads: cfg.n_heads,
            d_model: d,
            vocab_size: cfg.vocab_size,
            max_seq: cfg.max_seq,
            patch_dim: cfg.patch_dim,
            n_patches: cfg.n_patches,
        }
    }

    /// Token (or patch) embeddings with the summary token prepended and
    /// positional embeddings added to every row.
    pub fn embed(&self, tape: &mut Tape, store: &mut ParamStore, utt: &Utterance) -> Result<Var> {
        utt.validate()?;
        let base = match (&self.kind, &utt.tokens, &utt.patches) {
            (EmbedKind::Text { tok_emb }, Some(tokens), _) => {
                if tokens.len() > self.max_seq - 1 {
                    return Err(Error::Input(format!(
                        "text too long: {} tokens, max {}",
                        tokens.len(),
                        self.max_seq - 1
                    )));
                }
                if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                    return Err(Error::Input(format!(
                        "token id {bad} out of vocabulary ({})",
                        self.vocab_size
                    )));
                }
                let table = store.leaf(tape, *tok_emb);
                if tokens.is_empty() {
                    None
                } else {
                    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                    Some(tape.gather_rows(table, &idx)?)
                }
            }
            (EmbedKind::Image { proj_w, proj_b }, _, Some(patches)) => {
                let rows = patches.len();
                let width = patches[0].len();
                if rows != self.n_patches || width != self.patch_dim {
                    return Err(Error::Input(format!(
                        "patches {rows}x{width}, expected {}x{}",
                        self.n_patches, self.patch_dim
                    )));
                }
                let flat: Vec<f64> = patches.iter().flatten().copied().collect();
                let x = tape.input(&[rows, width], &flat);
                let w = store.leaf(tape, *proj_w);
                let b = store.leaf(tape, *proj_b);
                let p = tape.matmul(x, w)?;
                Some(tape.add_row(p, b)?)
            }
            (EmbedKind::Text { .. }, ..) => {
                return Err(Error::Input("image utterance routed to the text encoder".into()))
            }
            (EmbedKind::Image { .. }, ..) => {
                return Err(Error::Input("text utterance routed to the image encoder".into()))
            }
        };
        let summary = store.leaf(tape, self.summary);
        let srow = tape.reshape(summary, vec![1, self.d_model])?;
        let seq = match base {
            Some(b) => tape.concat_rows(&[srow, b])?,
            None => srow,
        };
        let n = tape.shape(seq)[0];
        let pos = store.leaf(tape, self.pos_emb);
        let pos_n = tape.slice_rows(pos, 0, n)?;
        tape.add(seq, pos_n)
    }

    /// Run the stack over an embedded sequence. Domain prompt rows are
    /// prepended before each layer and dropped after it; context rows (if
    /// any) are prepended once at `insert_layer` and kept. Returns the
    /// summary-token row of the final layer as a d_model vector.
    pub fn encode_with_prompts(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        seq: Var,
        ctx: Option<Var>,
        insert_layer: usize,
    ) -> Result<Var> {
        if let Some(c) = ctx {
            let cs = tape.shape(c);
            if cs.len() != 2 || cs[1] != self.d_model {
                return Err(Error::Shape {
                    op: "encode_with_prompts",
                    lhs: cs.to_vec(),
                    rhs: vec![self.d_model],
                });
            }
            if insert_layer >= self.layers.len() {
                return Err(Error::Config(format!(
                    "insert_layer {} out of range for {} layers",
                    insert_layer,
                    self.layers.len()
                )));
            }
        }
        let mut state = seq;
        let mut summary_idx = 0usize;
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(c) = ctx {
                if l == insert_layer {
                    state = tape.concat_rows(&[c, state])?;
                    summary_idx += tape.shape(c)[0];
                }
            }
            let ld = self.domain.len;
            let x = if ld > 0 {
                let p = store.leaf(tape, self.domain.per_layer[l]);
                tape.concat_rows(&[p, state])?
            } else {
                state
            };
            let y = layer.forward(tape, store, x, self.n_heads)?;
            state = if ld > 0 {
                let rows = tape.shape(y)[0];
                tape.slice_rows(y, ld, rows - ld)?
            } else {
                y
            };
        }
        let g = store.leaf(tape, self.ln_f.0);
        let b = store.leaf(tape, self.ln_f.1);
        let out = tape.layer_norm(state, g, b, LN_EPS)?;
        let row = tape.slice_rows(out, summary_idx, 1)?;
        tape.reshape(row, vec![self.d_model])
    }

    /// Prompt-free forward used for backbone pretraining and the prompt
    /// locality check; never touches prompt parameters.
    pub fn encode_plain(&self, tape: &mut Tape, store: &mut ParamStore, utt: &Utterance) -> Result<Var> {
        let seq = self.embed(tape, store, utt)?;
        let mut state = seq;
        for layer in &self.layers {
            state = layer.forward(tape, store, state, self.n_heads)?;
        }
        let g = store.leaf(tape, self.ln_f.0);
        let b = store.leaf(tape, self.ln_f.1);
        let out = tape.layer_norm(state, g, b, LN_EPS)?;
        let row = tape.slice_rows(out, 0, 1)?;
        tape.reshape(row, vec![self.d_model])
    }
}

/// Text and image prompted encoders sharing one config.
pub struct DualEncoder {
    pub text: PromptedEncoder,
    pub image: PromptedEncoder,
    pub cfg: EncoderConfig,
}

impl DualEncoder {
    /// Build both encoders. Each component draws from its own stream of
    /// `seed`, so e.g. removing domain prompts leaves every other
    /// component's initialization untouched.
    pub fn build(store: &mut ParamStore, cfg: &EncoderConfig, domain_len: usize, seed: u64) -> Self {
        let mut rng_text = Rng::stream(seed, 0x454E4301);
        let mut rng_image = Rng::stream(seed, 0x454E4302);
        let mut rng_dom = Rng::stream(seed, 0x454E4303);
        let text = PromptedEncoder::build(
            store,
            cfg,
            Group::BackboneText,
            "backbone_text",
            true,
            domain_len,
            &mut rng_text,
            &mut rng_dom,
        );
        let image = PromptedEncoder::build(
            store,
            cfg,
            Group::BackboneImage,
            "backbone_image",
            false,
            domain_len,
            &mut rng_image,
            &mut rng_dom,
        );
        DualEncoder {
            text,
            image,
            cfg: cfg.clone(),
        }
    }

    pub fn by_modality(&self, m: Modality) -> &PromptedEncoder {
        match m {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    /// Query side: embed the current input, then run with domain prompts
    /// plus optional context prompts inserted at `insert_layer`.
    pub fn encode_input(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        input: &Utterance,
        ctx: Option<Var>,
        insert_layer: usize,
    ) -> Result<Var> {
        let enc = self.by_modality(input.modality);
        let seq = enc.embed(tape, store, input)?;
        enc.encode_with_prompts(tape, store, seq, ctx, insert_layer)
    }

    /// Response side: domain prompts only (no context prompts).
    pub fn encode_response(&self, tape: &mut Tape, store: &mut ParamStore, resp: &Utterance) -> Result<Var> {
        let enc = self.by_modality(resp.modality);
        let seq = enc.embed(tape, store, resp)?;
        enc.encode_with_prompts(tape, store, seq, None, 0)
    }
}
