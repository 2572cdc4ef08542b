//! Context prompt generator: a bridged dual-modality context encoder plus
//! a pooling-and-bottleneck generator that distills the dialog history
//! into a fixed number of backbone-compatible prompt rows.

use crate::data::{Role, Utterance};
use crate::encoders::{EncoderConfig, LayerParams};
use crate::error::{Error, Result};
use crate::model::{Group, ParamId, ParamStore};
use crate::numerics::{Rng, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Feed-forward prompt generator weights. `w1` is bottleneck-by-d and
/// `w2` is d-by-bottleneck; pooled rows pass through
/// `w2 @ relu(w1 @ row + b1) + b2`.
pub struct PromptGenerator {
    pub ctx_len: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Context encoder + prompt generator. All parameters live in the `cpg`
/// group and train only during the second tuning stage.
pub struct CpgParams {
    tok_emb: ParamId,
    bridge_w: ParamId,
    bridge_b: ParamId,
    role_emb: ParamId,
    pos_emb: ParamId,
    null_ctx: ParamId,
    layers: Vec<LayerParams>,
    ln_f: (ParamId, ParamId),
    pub gen: PromptGenerator,
    cfg: EncoderConfig,
}

impl CpgParams {
    pub fn build(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        ctx_len: usize,
        bottleneck: usize,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.d_model;
        let g = Group::Cpg;
        let tok_emb = store.push(
            "cpg.tok_emb",
            g,
            true,
            Tensor::randn(vec![cfg.vocab_size, d], 0.02, rng),
        );
        let bridge_w = store.push(
            "cpg.bridge.w",
            g,
            true,
            Tensor::randn(vec![cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt(), rng),
        );
        let bridge_b = store.push("cpg.bridge.b", g, false, Tensor::zeros(vec![d]));
        let role_emb = store.push("cpg.role_emb", g, true, Tensor::randn(vec![2, d], 0.02, rng));
        let pos_emb = store.push(
            "cpg.pos_emb",
            g,
            true,
            Tensor::randn(vec![cfg.max_seq, d], 0.02, rng),
        );
        let null_ctx = store.push("cpg.null_ctx", g, false, Tensor::randn(vec![d], 0.02, rng));
        let layers = (0..cfg.n_layers)
            .map(|l| LayerParams::build(store, g, &format!("cpg.layers.{l}"), d, rng))
            .collect();
        let ln_f = (
            store.push("cpg.ln_f.g", g, false, Tensor::vector(vec![1.0; d])),
            store.push("cpg.ln_f.b", g, false, Tensor::zeros(vec![d])),
        );
        let gen = PromptGenerator {
            ctx_len,
            w1: store.push(
                "cpg.gen.w1",
                g,
                true,
                Tensor::randn(vec![bottleneck, d], 1.0 / (d as f64).sqrt(), rng),
            ),
            b1: store.push("cpg.gen.b1", g, false, Tensor::zeros(vec![bottleneck])),
            w2: store.push(
                "cpg.gen.w2",
                g,
                true,
                Tensor::randn(vec![d, bottleneck], 1.0 / (bottleneck as f64).sqrt(), rng),
            ),
            b2: store.push("cpg.gen.b2", g, false, Tensor::zeros(vec![d])),
        };
        CpgParams {
            tok_emb,
            bridge_w,
            bridge_b,
            role_emb,
            pos_emb,
            null_ctx,
            layers,
            ln_f,
            gen,
            cfg: cfg.clone(),
        }
    }

    fn role_row(&self, tape: &mut Tape, store: &mut ParamStore, role: Role) -> Result<Var> {
        let table = store.leaf(tape, self.role_emb);
        let idx = match role {
            Role::User => 0,
            Role::System => 1,
        };
        tape.gather_rows(table, &[idx])
    }

    /// Encode the dialog context into one row per token/patch position.
    /// Empty contexts map to the learned null-context row, so the output
    /// always has at least one row.
    pub fn encode_context(&self, tape: &mut Tape, store: &mut ParamStore, ctx: &[Utterance]) -> Result<Var> {
        let d = self.cfg.d_model;
        let mut parts: Vec<Var> = Vec::new();
        for utt in ctx {
            utt.validate()?;
            let rows = match (&utt.tokens, &utt.patches) {
                (Some(tokens), None) => {
                    if tokens.is_empty() {
                        continue;
                    }
                    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
                        return Err(Error::Input(format!(
                            "context token id {bad} out of vocabulary ({})",
                            self.cfg.vocab_size
                        )));
                    }
                    let table = store.leaf(tape, self.tok_emb);
                    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                    tape.gather_rows(table, &idx)?
                }
                (None, Some(patches)) => {
                    let width = patches[0].len();
                    if width != self.cfg.patch_dim {
                        return Err(Error::Input(format!(
                            "context patch width {width}, expected {}",
                            self.cfg.patch_dim
                        )));
                    }
                    let flat: Vec<f64> = patches.iter().flatten().copied().collect();
                    let x = tape.input(&[patches.len(), width], &flat);
                    let w = store.leaf(tape, self.bridge_w);
                    let b = store.leaf(tape, self.bridge_b);
                    let p = tape.matmul(x, w)?;
                    tape.add_row(p, b)?
                }
                _ => return Err(Error::Input("malformed context utterance".into())),
            };
            let role = self.role_row(tape, store, utt.role)?;
            let role_vec = tape.reshape(role, vec![d])?;
            parts.push(tape.add_row(rows, role_vec)?);
        }
        let seq = if parts.is_empty() {
            let null = store.leaf(tape, self.null_ctx);
            tape.reshape(null, vec![1, d])?
        } else {
            tape.concat_rows(&parts)?
        };
        let n = tape.shape(seq)[0];
        if n > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "context too long: {n} positions, max {}",
                self.cfg.max_seq
            )));
        }
        let pos = store.leaf(tape, self.pos_emb);
        let pos_n = tape.slice_rows(pos, 0, n)?;
        let mut state = tape.add(seq, pos_n)?;
        for layer in &self.layers {
            state = layer.forward(tape, store, state, self.cfg.n_heads)?;
        }
        let g = store.leaf(tape, self.ln_f.0);
        let b = store.leaf(tape, self.ln_f.1);
        tape.layer_norm(state, g, b, LN_EPS)
    }

    /// Distill encoded context rows into exactly `ctx_len` prompt rows:
    /// segment mean pooling down (or cyclic row repetition up) to length,
    /// then the bottleneck feed-forward per row.
    pub fn generate_prompts(&self, tape: &mut Tape, store: &mut ParamStore, h: Var) -> Result<Var> {
        let d = self.cfg.d_model;
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::Shape {
                op: "generate_prompts",
                lhs: shape,
                rhs: vec![d],
            });
        }
        let n = shape[0];
        let l = self.gen.ctx_len;
        let pooled = if n >= l {
            tape.mean_pool_segments(h, l)?
        } else {
            let idx: Vec<usize> = (0..l).map(|i| i % n).collect();
            tape.gather_rows(h, &idx)?
        };
        let w1 = store.leaf(tape, self.gen.w1);
        let b1 = store.leaf(tape, self.gen.b1);
        let w2 = store.leaf(tape, self.gen.w2);
        let b2 = store.leaf(tape, self.gen.b2);
        let w1t = tape.transpose(w1)?;
        let pre = tape.matmul(pooled, w1t)?;
        let pre = tape.add_row(pre, b1)?;
        let hid = tape.relu(pre);
        let w2t = tape.transpose(w2)?;
        let out = tape.matmul(hid, w2t)?;
        tape.add_row(out, b2)
    }

    /// Context prompts for a dialog history: encode, then distill.
    pub fn ctx_prompts(&self, tape: &mut Tape, store: &mut ParamStore, ctx: &[Utterance]) -> Result<Var> {
        let h = self.encode_context(tape, store, ctx)?;
        self.generate_prompts(tape, store, h)
    }
}
