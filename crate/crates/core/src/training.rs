//! Contrastive objective, AdamW with decoupled decay, the linear
//! schedule, and the staged training procedure: backbone pretraining on
//! single-round pairs, then prompt/head tuning in two stages over the
//! frozen backbone.

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_pretrain_pairs, sample_batches, split_of, CorpusSpec, Dialog, Split, Utterance,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RecallReport};
use crate::model::{Group, Model, ParamStore};
use crate::mop::RetrievalType;
use crate::numerics::{Rng, Tape, Tensor, Var};

/// Training stage. Backbone pretraining produces the frozen encoders;
/// stage 1 tunes heads and domain prompts; stage 2 adds the context
/// prompt generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Backbone,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    /// Groups trainable during this stage. Groups a model does not have
    /// (ablations) are simply absent from its store.
    pub fn trainable_groups(&self) -> &'static [Group] {
        match self {
            Stage::Backbone => &[Group::BackboneText, Group::BackboneImage, Group::PretrainHead],
            Stage::Stage1 => &[Group::DomainPrompts, Group::Mop],
            Stage::Stage2 => &[Group::DomainPrompts, Group::Mop, Group::Cpg],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Stage::Backbone),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            _ => Err(Error::Input(format!("unknown stage {s:?}"))),
        }
    }
}

/// Optimizer and schedule settings for one stage.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub stage: Stage,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-5,
            total_steps: 5000,
            batch_size: 32,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            stage: Stage::Stage2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train config: steps and batch must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("train config: base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linearly decaying learning rate: `base_lr * (1 - t / total_steps)`.
pub fn linear_lr(step_t: usize, cfg: &TrainConfig) -> Result<f64> {
    if step_t > cfg.total_steps {
        return Err(Error::Contract(format!(
            "linear_lr: step {step_t} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    Ok(cfg.base_lr * (1.0 - step_t as f64 / cfg.total_steps as f64))
}

/// Plain dot-product similarity; no normalization, no temperature.
pub fn similarity(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            op: "similarity",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(x.values().iter().zip(y.values()).map(|(a, b)| a * b).sum())
}

/// The per-sample contrastive objective:
/// `-log(e^{s(x,y+)} / (e^{s(x,y+)} + sum_j e^{s(x,y_j-)}))`,
/// evaluated log-sum-exp-stably on the tape. Zero negatives give exactly
/// zero loss.
pub fn contrastive_loss(tape: &mut Tape, x: Var, y_pos: Var, y_negs: &[Var]) -> Result<Var> {
    let d = tape.values(x).len();
    let xr = tape.reshape(x, vec![1, d])?;
    let mut rows = Vec::with_capacity(1 + y_negs.len());
    let pr = tape.reshape(y_pos, vec![1, d])?;
    rows.push(pr);
    for &n in y_negs {
        rows.push(tape.reshape(n, vec![1, d])?);
    }
    let cands = tape.concat_rows(&rows)?;
    let ct = tape.transpose(cands)?;
    let scores = tape.matmul(xr, ct)?;
    tape.ce_mean_rows(scores, &[0])
}

// ── AdamW ────────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay. Only parameters that carry a
/// gradient buffer are touched; decay applies to entries flagged for it
/// (weight matrices, never biases, norms or prompts). Frozen parameters
/// are bit-identical after any number of steps.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: usize,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// One update over every trainable parameter holding a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        for id in store.ids() {
            let entry = store.entry(id);
            if !entry.tensor.requires_grad {
                continue;
            }
            let Some(grad) = entry.tensor.grad.clone() else {
                continue;
            };
            let n = entry.tensor.numel();
            if grad.len() != n {
                return Err(Error::Contract(format!(
                    "adamw: gradient size {} != parameter size {n} for {}",
                    grad.len(),
                    entry.name
                )));
            }
            let decay = entry.decay;
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return Err(Error::Contract(format!(
                    "adamw: state size {} != parameter size {n}",
                    m.len()
                )));
            }
            let w = store.tensor_mut(id).values_mut();
            for i in 0..n {
                if decay && self.weight_decay > 0.0 {
                    w[i] *= 1.0 - lr * self.weight_decay;
                }
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ── Training steps ───────────────────────────────────────────────────

fn batch_retrieval_type(batch: &[&Dialog]) -> Result<RetrievalType> {
    let rt = RetrievalType::of_dialog(batch[0]);
    for d in batch.iter().skip(1) {
        if RetrievalType::of_dialog(d) != rt {
            return Err(Error::Contract(
                "train_step: batch mixes retrieval types".into(),
            ));
        }
    }
    Ok(rt)
}

/// In-batch contrastive loss over a type-homogeneous batch, on the tape.
/// Exposed with the model destructured so callers can hold the parameter
/// store mutably (the finite-difference checker perturbs it directly).
pub fn batch_loss(
    parts: &crate::model::ModelParts<'_>,
    store: &mut ParamStore,
    tape: &mut Tape,
    batch: &[&Dialog],
    rt: RetrievalType,
    use_ctx: bool,
) -> Result<Var> {
    let d = parts.cfg.enc.d_model;
    let mut q_rows = Vec::with_capacity(batch.len());
    for dlg in batch {
        let ctx = match (use_ctx, parts.cpg) {
            (true, Some(cpg)) => Some(cpg.ctx_prompts(tape, store, dlg.context())?),
            _ => None,
        };
        let h = parts
            .dual
            .encode_input(tape, store, dlg.current_input(), ctx, parts.cfg.insert_layer)?;
        q_rows.push(tape.reshape(h, vec![1, d])?);
    }
    let x = tape.concat_rows(&q_rows)?;
    let x = parts.mop.project_query_rows(tape, store, x, rt)?;

    let mut c_rows = Vec::with_capacity(batch.len());
    for dlg in batch {
        let h = parts.dual.encode_response(tape, store, &dlg.response)?;
        c_rows.push(tape.reshape(h, vec![1, d])?);
    }
    let y = tape.concat_rows(&c_rows)?;
    let y = parts.mop.project_candidate_rows(tape, store, y, rt)?;

    let yt = tape.transpose(y)?;
    let scores = tape.matmul(x, yt)?;
    let targets: Vec<usize> = (0..batch.len()).collect();
    tape.ce_mean_rows(scores, &targets)
}

/// One optimizer step on a type-homogeneous batch: in-batch score matrix,
/// contrastive loss averaged over rows (other rows' positives are the
/// negatives), backward, AdamW update under the linear schedule.
pub fn train_step(
    model: &mut Model,
    batch: &[&Dialog],
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step_t: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step: empty batch".into()));
    }
    let rt = batch_retrieval_type(batch)?;
    let use_ctx = cfg.stage == Stage::Stage2 && model.cfg.use_cpg;
    model.store.clear_grads();
    let mut tape = Tape::new();
    let (parts, store) = model.split_parts();
    let loss = batch_loss(&parts, store, &mut tape, batch, rt, use_ctx)?;
    let loss_val = tape.scalar_value(loss);
    tape.backward(loss)?;
    model.store.write_back_grads(&tape);
    let lr = linear_lr(step_t, cfg)?;
    opt.step(&mut model.store, lr)?;
    Ok(loss_val)
}

/// One pretraining step on single-round text/image pairs: both encoders
/// run prompt-free, temporary heads project into the shared space, and
/// the loss averages the two retrieval directions.
fn pretrain_step(
    model: &mut Model,
    pairs: &[&crate::data::PairExample],
    head: &PretrainHead,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step_t: usize,
) -> Result<f64> {
    model.store.clear_grads();
    let mut tape = Tape::new();
    let Model {
        cfg: mcfg,
        store,
        dual,
        ..
    } = model;
    let d = mcfg.enc.d_model;
    let mut trows = Vec::with_capacity(pairs.len());
    let mut irows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let t_utt = Utterance::text(crate::data::Role::User, p.tokens.clone());
        let i_utt = Utterance::image(crate::data::Role::System, p.patches.clone());
        let t = dual.text.encode_plain(&mut tape, store, &t_utt)?;
        trows.push(tape.reshape(t, vec![1, d])?);
        let i = dual.image.encode_plain(&mut tape, store, &i_utt)?;
        irows.push(tape.reshape(i, vec![1, d])?);
    }
    let tmat = tape.concat_rows(&trows)?;
    let imat = tape.concat_rows(&irows)?;
    let tw = store.leaf(&mut tape, head.text_w);
    let tb = store.leaf(&mut tape, head.text_b);
    let iw = store.leaf(&mut tape, head.image_w);
    let ib = store.leaf(&mut tape, head.image_b);
    let twt = tape.transpose(tw)?;
    let x = tape.matmul(tmat, twt)?;
    let x = tape.add_row(x, tb)?;
    let iwt = tape.transpose(iw)?;
    let y = tape.matmul(imat, iwt)?;
    let y = tape.add_row(y, ib)?;
    let yt = tape.transpose(y)?;
    let scores = tape.matmul(x, yt)?;
    let targets: Vec<usize> = (0..pairs.len()).collect();
    let loss_tv = tape.ce_mean_rows(scores, &targets)?;
    let scores_t = tape.transpose(scores)?;
    let loss_vt = tape.ce_mean_rows(scores_t, &targets)?;
    let both = tape.add(loss_tv, loss_vt)?;
    let loss = tape.scale(both, 0.5);
    let loss_val = tape.scalar_value(loss);
    tape.backward(loss)?;
    model.store.write_back_grads(&tape);
    let lr = linear_lr(step_t, cfg)?;
    opt.step(&mut model.store, lr)?;
    Ok(loss_val)
}

struct PretrainHead {
    text_w: crate::model::ParamId,
    text_b: crate::model::ParamId,
    image_w: crate::model::ParamId,
    image_b: crate::model::ParamId,
}

// ── Stage orchestration ──────────────────────────────────────────────

/// One metrics-log record, written as a JSONL line per evaluation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub stage: String,
    pub step: usize,
    pub split: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub sum: f64,
}

impl MetricsRecord {
    fn new(stage: Stage, step: usize, split: Split, report: &RecallReport) -> Self {
        MetricsRecord {
            stage: stage.name().to_string(),
            step,
            split: match split {
                Split::Train => "train",
                Split::Dev => "dev",
                Split::Test => "test",
            }
            .to_string(),
            r1: report.r1,
            r5: report.r5,
            r10: report.r10,
            sum: report.sum_metric,
        }
    }
}

/// Append records as JSONL.
pub fn write_metrics(records: &[MetricsRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Input(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Knobs for a stage run that are not optimizer settings.
#[derive(Clone, Debug)]
pub struct StageOptions {
    /// Evaluate every this many steps (0 = only at the end of the stage).
    pub eval_every: usize,
    pub eval_split: Split,
    pub pool_size: usize,
    /// Number of synthetic pairs for backbone pretraining.
    pub backbone_pairs: usize,
    /// Evaluation pool sampling seed.
    pub eval_seed: u64,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            eval_every: 0,
            eval_split: Split::Dev,
            pool_size: 100,
            backbone_pairs: 4096,
            eval_seed: 0,
        }
    }
}

/// What a finished stage reports back.
pub struct StageSummary {
    pub stage: Stage,
    pub steps_run: usize,
    pub final_loss: f64,
    pub mean_recent_loss: f64,
    pub trainable_fraction: f64,
    pub records: Vec<MetricsRecord>,
}

/// Run one stage end to end. Backbone pretraining trains the encoders
/// plus a temporary head on synthetic single-round pairs and freezes them
/// afterwards; stage 1 tunes {mop, domain prompts}; stage 2 additionally
/// tunes the context prompt generator. Dev/test evaluations are appended
/// to `records` per the options.
pub fn run_stage(
    model: &mut Model,
    cfg: &TrainConfig,
    spec: &CorpusSpec,
    dialogs: &[Dialog],
    opts: &StageOptions,
) -> Result<StageSummary> {
    cfg.validate()?;
    let stage = cfg.stage;

    // Temporary pretraining head, pushed behind the model params and
    // dropped at the end of the backbone stage.
    let base_len = model.store.len();
    let head = if stage == Stage::Backbone {
        let d = model.cfg.enc.d_model;
        let p = model.cfg.proj_dim;
        let mut rng = Rng::stream(cfg.seed, 0x48454144);
        let scale = 0.02;
        Some(PretrainHead {
            text_w: model.store.push(
                "pretrain_head.text.w",
                Group::PretrainHead,
                true,
                Tensor::randn(vec![p, d], scale, &mut rng),
            ),
            text_b: model
                .store
                .push("pretrain_head.text.b", Group::PretrainHead, false, Tensor::zeros(vec![p])),
            image_w: model.store.push(
                "pretrain_head.image.w",
                Group::PretrainHead,
                true,
                Tensor::randn(vec![p, d], scale, &mut rng),
            ),
            image_b: model
                .store
                .push("pretrain_head.image.b", Group::PretrainHead, false, Tensor::zeros(vec![p])),
        })
    } else {
        None
    };

    // Flip trainability by group.
    let trainable = stage.trainable_groups();
    for g in [
        Group::BackboneText,
        Group::BackboneImage,
        Group::DomainPrompts,
        Group::Cpg,
        Group::Mop,
        Group::PretrainHead,
    ] {
        model.store.set_group_trainable(g, trainable.contains(&g));
    }
    let fraction = model.trainable_fraction();
    log::info!(
        "{}: {} / {} trainable coords ({:.2}%)",
        stage.name(),
        model.store.trainable_coord_count(),
        model.store.coord_count(),
        100.0 * fraction
    );

    let mut opt = AdamW::new(cfg);
    let mut rng = Rng::stream(cfg.seed, 0x42415443 ^ stage.name().len() as u64);
    let mut records = Vec::new();
    let mut losses: Vec<f64> = Vec::new();
    let mut step = 0usize;

    let maybe_eval = |model: &mut Model,
                          step: usize,
                          records: &mut Vec<MetricsRecord>,
                          force: bool|
     -> Result<()> {
        let due = force || (opts.eval_every > 0 && step > 0 && step % opts.eval_every == 0);
        if !due {
            return Ok(());
        }
        let split_dialogs = split_of(dialogs, opts.eval_split);
        if split_dialogs.is_empty() {
            log::warn!("eval split {:?} empty, skipping", opts.eval_split);
            return Ok(());
        }
        let use_ctx = stage == Stage::Stage2 && model.cfg.use_cpg;
        let (report, _) = evaluate(
            model,
            &split_dialogs,
            opts.pool_size,
            opts.eval_seed,
            use_ctx,
        )?;
        records.push(MetricsRecord::new(stage, step, opts.eval_split, &report));
        log::info!(
            "{} step {step}: {} R@1={:.3} R@5={:.3} R@10={:.3} Sum={:.1}",
            stage.name(),
            match opts.eval_split {
                Split::Train => "train",
                Split::Dev => "dev",
                Split::Test => "test",
            },
            report.r1,
            report.r5,
            report.r10,
            report.sum_metric
        );
        Ok(())
    };

    match stage {
        Stage::Backbone => {
            let pairs = generate_pretrain_pairs(spec, opts.backbone_pairs, cfg.seed)?;
            if pairs.is_empty() {
                return Err(Error::State("backbone: no pretraining pairs".into()));
            }
            'outer_pairs: loop {
                let mut order: Vec<usize> = (0..pairs.len()).collect();
                rng.shuffle(&mut order);
                for chunk in order.chunks(cfg.batch_size) {
                    if step >= cfg.total_steps {
                        break 'outer_pairs;
                    }
                    let batch: Vec<&crate::data::PairExample> =
                        chunk.iter().map(|&i| &pairs[i]).collect();
                    let loss =
                        pretrain_step(model, &batch, head.as_ref().unwrap(), &mut opt, cfg, step)?;
                    losses.push(loss);
                    if step % 50 == 0 {
                        log::debug!("backbone step {step}: loss {loss:.4}");
                    }
                    step += 1;
                    maybe_eval(model, step, &mut records, false)?;
                }
            }
            // Drop the temporary head and freeze the backbone.
            model.store.truncate(base_len);
            model.store.set_group_trainable(Group::BackboneText, false);
            model.store.set_group_trainable(Group::BackboneImage, false);
        }
        Stage::Stage1 | Stage::Stage2 => {
            let train = split_of(dialogs, Split::Train);
            if train.is_empty() {
                return Err(Error::State("training split is empty".into()));
            }
            'outer: loop {
                let batches = sample_batches(&train, cfg.batch_size, &mut rng);
                for b in &batches {
                    if step >= cfg.total_steps {
                        break 'outer;
                    }
                    let batch: Vec<&Dialog> = b.indices.iter().map(|&i| train[i]).collect();
                    let loss = train_step(model, &batch, &mut opt, cfg, step)?;
                    losses.push(loss);
                    if step % 50 == 0 {
                        log::debug!("{} step {step}: loss {loss:.4}", stage.name());
                    }
                    step += 1;
                    maybe_eval(model, step, &mut records, false)?;
                }
            }
        }
    }

    let force_final = opts.eval_every == 0 || step % opts.eval_every != 0;
    maybe_eval(model, step, &mut records, force_final)?;

    let recent = losses.len().saturating_sub(20);
    let tail = &losses[recent..];
    Ok(StageSummary {
        stage,
        steps_run: step,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        mean_recent_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        trainable_fraction: fraction,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::model::ModelConfig;

    pub(crate) fn tiny_model_config(seed: u64) -> ModelConfig {
        let enc = EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 32,
            max_seq: 24,
            patch_dim: 6,
            n_patches: 4,
        };
        let ctx_enc = EncoderConfig {
            max_seq: 64,
            ..enc.clone()
        };
        ModelConfig {
            bottleneck: 32,
            enc,
            ctx_enc,
            ctx_len: 4,
            domain_len: 2,
            insert_layer: 1,
            proj_dim: 8,
            use_cpg: true,
            single_expert: false,
            init_seed: seed,
        }
    }

    fn tiny_corpus_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            n_topics: 4,
            train_per_topic: 16,
            dev_per_topic: 4,
            test_per_topic: 4,
            vocab_size: 32,
            tokens_per_topic: 4,
            utt_len_min: 3,
            utt_len_max: 5,
            n_patches: 4,
            patch_dim: 6,
            seed,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn similarity_cases() {
        let x = Tensor::vector(vec![1.0, 0.0]);
        let y = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(similarity(&x, &y).unwrap(), 0.0);
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(similarity(&a, &b).unwrap(), 11.0);
        assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        let c = Tensor::vector(vec![1.0]);
        assert!(similarity(&a, &c).is_err());
    }

    #[test]
    fn contrastive_loss_values() {
        // All scores equal with N negatives -> ln(N + 1).
        let mut tape = Tape::new();
        let x = tape.input(&[2], &[1.0, 0.0]);
        let pos = tape.input(&[2], &[0.5, 0.5]);
        let negs: Vec<Var> = (0..3).map(|_| tape.input(&[2], &[0.5, 0.5])).collect();
        let loss = contrastive_loss(&mut tape, x, pos, &negs).unwrap();
        assert!((tape.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);

        // s+ = 1, one negative with s- = 0 -> ln(1 + e^{-1}).
        let mut tape = Tape::new();
        let x = tape.input(&[1], &[1.0]);
        let pos = tape.input(&[1], &[1.0]);
        let neg = tape.input(&[1], &[0.0]);
        let loss = contrastive_loss(&mut tape, x, pos, &[neg]).unwrap();
        let expected = (-1.0f64).exp().ln_1p();
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);

        // No negatives -> exactly zero.
        let mut tape = Tape::new();
        let x = tape.input(&[2], &[3.0, -2.0]);
        let pos = tape.input(&[2], &[1.0, 1.0]);
        let loss = contrastive_loss(&mut tape, x, pos, &[]).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn contrastive_loss_nonnegative_and_shift_invariant() {
        let mut rng = Rng::from_seed(4);
        for _ in 0..50 {
            let d = 3;
            let mut tape = Tape::new();
            let xv: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let pv: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let x = tape.input(&[d], &xv);
            let p = tape.input(&[d], &pv);
            let negs: Vec<Var> = (0..4)
                .map(|_| {
                    let nv: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    tape.input(&[d], &nv)
                })
                .collect();
            let loss = contrastive_loss(&mut tape, x, p, &negs).unwrap();
            assert!(tape.scalar_value(loss) >= 0.0);
        }
        // Shifting every score by a constant leaves the loss unchanged.
        let mut tape = Tape::new();
        let s = tape.input(&[1, 4], &[0.2, -1.0, 3.0, 0.4]);
        let l1 = tape.ce_mean_rows(s, &[0]).unwrap();
        let shifted: Vec<f64> = [0.2, -1.0, 3.0, 0.4].iter().map(|v| v + 17.5).collect();
        let s2 = tape.input(&[1, 4], &shifted);
        let l2 = tape.ce_mean_rows(s2, &[0]).unwrap();
        assert!((tape.scalar_value(l1) - tape.scalar_value(l2)).abs() < 1e-9);
    }

    #[test]
    fn linear_lr_schedule() {
        let cfg = TrainConfig {
            base_lr: 0.1,
            total_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(linear_lr(0, &cfg).unwrap(), 0.1);
        assert_eq!(linear_lr(100, &cfg).unwrap(), 0.0);
        assert!((linear_lr(50, &cfg).unwrap() - 0.05).abs() < 1e-15);
        assert!(linear_lr(101, &cfg).is_err());
    }

    #[test]
    fn adamw_decay_only_and_first_step() {
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        let mut w = Tensor::vector(vec![2.0, -4.0]);
        w.requires_grad = true;
        w.grad = Some(vec![0.0, 0.0]);
        let id = store.push("w", Group::Mop, true, w);
        let mut opt = AdamW::new(&cfg);
        let lr = 0.01;
        opt.step(&mut store, lr).unwrap();
        let expect = [2.0 * (1.0 - lr * 0.1), -4.0 * (1.0 - lr * 0.1)];
        assert_eq!(store.tensor(id).values(), &expect);

        // First step with constant gradient moves by about -lr * sign(g).
        let mut store = ParamStore::new();
        let mut w = Tensor::vector(vec![1.0]);
        w.requires_grad = true;
        w.grad = Some(vec![0.5]);
        let id = store.push("w", Group::Mop, false, w);
        let mut opt = AdamW::new(&TrainConfig::default());
        opt.step(&mut store, 0.01).unwrap();
        let moved = 1.0 - store.tensor(id).values()[0];
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn adamw_skips_frozen_and_gradless() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::new();
        let mut frozen = Tensor::vector(vec![1.0]);
        frozen.requires_grad = false;
        frozen.grad = None;
        let f_id = store.push("frozen", Group::BackboneText, true, frozen);
        let mut idle = Tensor::vector(vec![2.0]);
        idle.requires_grad = true;
        idle.grad = None;
        let i_id = store.push("idle", Group::Mop, true, idle);
        let mut opt = AdamW::new(&cfg);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.tensor(f_id).values(), &[1.0]);
        assert_eq!(store.tensor(i_id).values(), &[2.0]);
    }

    #[test]
    fn adamw_state_mismatch_is_contract_error() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::new();
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        w.requires_grad = true;
        w.grad = Some(vec![0.1]);
        store.push("w", Group::Mop, false, w);
        let mut opt = AdamW::new(&cfg);
        assert!(matches!(opt.step(&mut store, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_of_one_moves_params_only_via_decay() {
        let mcfg = tiny_model_config(3);
        let spec = tiny_corpus_spec(3);
        let corpus = crate::data::generate_corpus(&spec).unwrap();
        let mut model = Model::new(mcfg).unwrap();
        let cfg = TrainConfig {
            stage: Stage::Stage1,
            total_steps: 10,
            batch_size: 1,
            base_lr: 1e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        for g in [Group::DomainPrompts, Group::Mop] {
            model.store.set_group_trainable(g, true);
        }
        let train = split_of(&corpus, Split::Train);
        let batch = vec![train[0]];
        // Snapshot a no-decay parameter (domain prompt) and a decay one.
        let dom_id = model.store.by_name("domain.text.layer0").unwrap();
        let dom_before = model.store.tensor(dom_id).values().to_vec();
        let mut opt = AdamW::new(&cfg);
        let loss = train_step(&mut model, &batch, &mut opt, &cfg, 0).unwrap();
        assert_eq!(loss, 0.0, "single-row contrastive loss is exactly zero");
        let dom_after = model.store.tensor(dom_id).values().to_vec();
        assert_eq!(dom_before, dom_after, "no-decay params must not move on zero grad");
        // Expert weights decay multiplicatively.
        let rt = RetrievalType::of_dialog(batch[0]);
        let w_name = format!("mop.{}.query.w", rt.tag());
        let w_id = model.store.by_name(&w_name).unwrap();
        let grad = model.store.tensor(w_id).grad.clone().unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn initial_loss_near_ln_batch_size() {
        let mcfg = tiny_model_config(5);
        let spec = tiny_corpus_spec(5);
        let corpus = crate::data::generate_corpus(&spec).unwrap();
        let mut model = Model::new(mcfg).unwrap();
        let cfg = TrainConfig {
            stage: Stage::Stage2,
            total_steps: 100,
            batch_size: 8,
            base_lr: 1e-9,
            seed: 2,
            ..TrainConfig::default()
        };
        for g in [Group::DomainPrompts, Group::Mop, Group::Cpg] {
            model.store.set_group_trainable(g, true);
        }
        let train = split_of(&corpus, Split::Train);
        let mut rng = Rng::from_seed(8);
        let batches = sample_batches(&train, 8, &mut rng);
        let full = batches.iter().find(|b| b.indices.len() == 8).unwrap();
        let batch: Vec<&Dialog> = full.indices.iter().map(|&i| train[i]).collect();
        let mut opt = AdamW::new(&cfg);
        let loss = train_step(&mut model, &batch, &mut opt, &cfg, 0).unwrap();
        assert!(
            (loss - 8.0f64.ln()).abs() < 0.5,
            "random-init loss {loss} should be near ln(8) = {:.3}",
            8.0f64.ln()
        );
    }

    #[test]
    fn mixed_type_batch_rejected() {
        let mcfg = tiny_model_config(3);
        let spec = tiny_corpus_spec(3);
        let corpus = crate::data::generate_corpus(&spec).unwrap();
        let mut model = Model::new(mcfg).unwrap();
        let train = split_of(&corpus, Split::Train);
        let a = train
            .iter()
            .find(|d| d.response.modality == crate::data::Modality::Text)
            .unwrap();
        let b = train
            .iter()
            .find(|d| {
                d.response.modality == crate::data::Modality::Image
                    && d.current_input().modality == a.current_input().modality
            })
            .unwrap();
        let cfg = TrainConfig {
            stage: Stage::Stage1,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&cfg);
        let err = train_step(&mut model, &[a, b], &mut opt, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let mcfg = tiny_model_config(7);
        let spec = tiny_corpus_spec(7);
        let corpus = crate::data::generate_corpus(&spec).unwrap();
        let mut model = Model::new(mcfg).unwrap();
        let cfg = TrainConfig {
            stage: Stage::Stage2,
            total_steps: 220,
            batch_size: 8,
            base_lr: 3e-3,
            weight_decay: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        for g in [Group::DomainPrompts, Group::Mop, Group::Cpg] {
            model.store.set_group_trainable(g, true);
        }
        let train = split_of(&corpus, Split::Train);
        let mut rng = Rng::from_seed(11);
        let batches = sample_batches(&train, 8, &mut rng);
        let full = batches.iter().find(|b| b.indices.len() == 8).unwrap();
        let batch: Vec<&Dialog> = full.indices.iter().map(|&i| train[i]).collect();
        let mut opt = AdamW::new(&cfg);
        let mut last = f64::INFINITY;
        for t in 0..200 {
            last = train_step(&mut model, &batch, &mut opt, &cfg, t).unwrap();
        }
        assert!(last < 0.1, "failed to overfit: loss {last}");
    }
}
