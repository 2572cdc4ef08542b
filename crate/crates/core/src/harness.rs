//! Experiment harness: the full backbone -> stage1 -> stage2 pipeline,
//! parameter sweeps, and the four-variant ablation grid. Tables are
//! reported, not asserted; ordering claims live in the test suite.

use std::collections::HashMap;

use crate::data::{generate_corpus, split_of, CorpusSpec, Dialog, Split};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, RecallReport};
use crate::model::{Group, Model, ModelConfig};
use crate::mop::RetrievalType;
use crate::numerics::{grad_check, GradCheckReport, Tape};
use crate::training::{batch_loss, run_stage, MetricsRecord, Stage, StageOptions, TrainConfig};

/// Everything one end-to-end run needs.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub backbone: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub backbone_pairs: usize,
    pub pool_size: usize,
    pub eval_every: usize,
    pub eval_seed: u64,
}

impl PipelineConfig {
    /// Re-seed every stochastic component from one master seed (corpus
    /// excluded: the corpus is shared across paired runs).
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.model.init_seed = seed;
        self.backbone.seed = seed ^ 0xB0;
        self.stage1.seed = seed ^ 0x51;
        self.stage2.seed = seed ^ 0x52;
        self.eval_seed = seed ^ 0xE0;
        self
    }

    fn options(&self, eval_split: Split) -> StageOptions {
        StageOptions {
            eval_every: self.eval_every,
            eval_split,
            pool_size: self.pool_size,
            backbone_pairs: self.backbone_pairs,
            eval_seed: self.eval_seed,
        }
    }
}

/// Outcome of a full pipeline run.
pub struct PipelineOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub test_report: RecallReport,
}

/// Snapshot of frozen backbone parameter values, reusable across models
/// that share the encoder configuration and init seed.
pub type BackboneSnapshot = Vec<(String, Vec<f64>)>;

/// Pretrain a backbone for this config and return its parameter values.
pub fn pretrain_backbone_snapshot(cfg: &PipelineConfig, dialogs: &[Dialog]) -> Result<BackboneSnapshot> {
    let mut model = Model::new(cfg.model.clone())?;
    run_stage(
        &mut model,
        &cfg.backbone,
        &cfg.corpus,
        dialogs,
        &StageOptions {
            eval_every: 0,
            ..cfg.options(Split::Dev)
        },
    )?;
    let mut snap = model.store.group_snapshot(Group::BackboneText);
    snap.extend(model.store.group_snapshot(Group::BackboneImage));
    Ok(snap)
}

/// Run stage1 + stage2 on a fresh model seeded with a pretrained backbone.
/// With `skip_stage1`, stage2 starts from randomly initialized heads and
/// prompts instead of the stage1 state.
pub fn run_tuning(
    cfg: &PipelineConfig,
    dialogs: &[Dialog],
    backbone: &BackboneSnapshot,
    skip_stage1: bool,
) -> Result<PipelineOutcome> {
    let mut model = Model::new(cfg.model.clone())?;
    model.store.load_values_by_name(backbone)?;
    let mut records = Vec::new();
    if !skip_stage1 {
        let s1 = run_stage(&mut model, &cfg.stage1, &cfg.corpus, dialogs, &cfg.options(Split::Dev))?;
        records.extend(s1.records);
    }
    let s2 = run_stage(&mut model, &cfg.stage2, &cfg.corpus, dialogs, &cfg.options(Split::Dev))?;
    records.extend(s2.records);
    let test = split_of(dialogs, Split::Test);
    let use_ctx = model.cfg.use_cpg;
    let (test_report, _) = evaluate(&mut model, &test, cfg.pool_size, cfg.eval_seed, use_ctx)?;
    records.push(MetricsRecord {
        stage: "final".into(),
        step: 0,
        split: "test".into(),
        r1: test_report.r1,
        r5: test_report.r5,
        r10: test_report.r10,
        sum: test_report.sum_metric,
    });
    Ok(PipelineOutcome {
        model,
        records,
        test_report,
    })
}

/// Full pipeline: pretrain, tune, evaluate on test.
pub fn run_pipeline(cfg: &PipelineConfig, dialogs: &[Dialog]) -> Result<PipelineOutcome> {
    let backbone = pretrain_backbone_snapshot(cfg, dialogs)?;
    run_tuning(cfg, dialogs, &backbone, false)
}

// ── End-to-end gradient verification ─────────────────────────────────

/// Toy dimensions for the end-to-end finite-difference sweep: width 16,
/// two layers, four context prompt rows, two domain prompt rows, batch 4.
pub fn grad_check_model_config(seed: u64) -> ModelConfig {
    let enc = EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        vocab_size: 16,
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

/// Compare the full training-loss gradient (context prompt generator,
/// domain prompts and projection experts, frozen backbone) against
/// central finite differences on a fixed batch of four dialogs.
pub fn end_to_end_grad_check(h: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mcfg = grad_check_model_config(seed);
    let spec = CorpusSpec {
        n_topics: 4,
        train_per_topic: 8,
        dev_per_topic: 0,
        test_per_topic: 0,
        vocab_size: 16,
        tokens_per_topic: 3,
        utt_len_min: 3,
        utt_len_max: 6,
        min_turns: 2,
        max_turns: 4,
        n_patches: 4,
        patch_dim: 6,
        seed,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    // A homogeneous batch of 4: take the first retrieval type with enough
    // dialogs (every type is populated at these corpus sizes).
    let batch: Vec<Dialog> = RetrievalType::all()
        .iter()
        .find_map(|&rt| {
            let matching: Vec<Dialog> = corpus
                .iter()
                .filter(|d| RetrievalType::of_dialog(d) == rt)
                .take(4)
                .cloned()
                .collect();
            (matching.len() == 4).then_some(matching)
        })
        .ok_or_else(|| Error::State("grad check: no retrieval type has 4 dialogs".into()))?;
    let rt = RetrievalType::of_dialog(&batch[0]);

    let mut model = Model::new(mcfg)?;
    for g in Stage::Stage2.trainable_groups() {
        model.store.set_group_trainable(*g, true);
    }
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, e)| e.tensor.requires_grad)
        .map(|(id, _)| id)
        .collect();

    let Model {
        cfg,
        mut store,
        dual,
        cpg,
        mop,
    } = model;
    let parts = crate::model::ModelParts {
        cfg: &cfg,
        dual: &dual,
        cpg: cpg.as_ref(),
        mop: &mop,
    };
    let batch_refs: Vec<&Dialog> = batch.iter().collect();

    store.clear_grads();
    let mut tape = Tape::new();
    let loss = batch_loss(&parts, &mut store, &mut tape, &batch_refs, rt, true)?;
    tape.backward(loss)?;
    store.write_back_grads(&tape);

    grad_check(
        &mut store,
        &ids,
        |store| {
            let mut tape = Tape::new();
            let loss = batch_loss(&parts, store, &mut tape, &batch_refs, rt, true)?;
            Ok(tape.scalar_value(loss))
        },
        h,
        tol,
    )
}

// ── Sweeps ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    CtxLen,
    DomLen,
    PromptLayer,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::CtxLen => "ctx_len",
            SweepParam::DomLen => "dom_len",
            SweepParam::PromptLayer => "prompt_layer",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctx_len" => Ok(SweepParam::CtxLen),
            "dom_len" => Ok(SweepParam::DomLen),
            "prompt_layer" => Ok(SweepParam::PromptLayer),
            _ => Err(Error::Input(format!(
                "unknown sweep parameter {s:?} (expected ctx_len, dom_len or prompt_layer)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: usize,
    pub report: RecallReport,
}

pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

fn apply_sweep_value(base: &ModelConfig, param: SweepParam, value: usize) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::CtxLen => {
            if value == 0 {
                return Err(Error::Config("ctx_len must be >= 1".into()));
            }
            cfg.ctx_len = value;
        }
        SweepParam::DomLen => cfg.domain_len = value,
        SweepParam::PromptLayer => {
            if value >= cfg.enc.n_layers {
                return Err(Error::Config(format!(
                    "prompt_layer {value} out of range for {} layers",
                    cfg.enc.n_layers
                )));
            }
            cfg.insert_layer = value;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train and evaluate one run per value under a fixed seed. The backbone
/// is pretrained once and shared: none of the swept parameters affect it.
pub fn sweep(cfg: &PipelineConfig, dialogs: &[Dialog], param: SweepParam, values: &[usize]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep: no values given".into()));
    }
    for &v in values {
        apply_sweep_value(&cfg.model, param, v)?;
    }
    let backbone = pretrain_backbone_snapshot(cfg, dialogs)?;
    let mut rows = Vec::new();
    for &v in values {
        let mut run_cfg = cfg.clone();
        run_cfg.model = apply_sweep_value(&cfg.model, param, v)?;
        let outcome = run_tuning(&run_cfg, dialogs, &backbone, false)?;
        log::info!(
            "sweep {}={v}: R@1={:.3} Sum={:.1}",
            param.name(),
            outcome.test_report.r1,
            outcome.test_report.sum_metric
        );
        rows.push(SweepRow {
            value: v,
            report: outcome.test_report,
        });
    }
    Ok(SweepTable { param, rows })
}

// ── Ablations ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoCpg,
    NoDomain,
    NoMop,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::Full, Variant::NoCpg, Variant::NoDomain, Variant::NoMop]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCpg => "-CPG",
            Variant::NoDomain => "-Domain",
            Variant::NoMop => "-MoP",
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoCpg => cfg.use_cpg = false,
            Variant::NoDomain => cfg.domain_len = 0,
            Variant::NoMop => cfg.single_expert = true,
        }
        cfg
    }
}

pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub report: RecallReport,
}

pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn mean_r1(&self, variant: Variant) -> f64 {
        let rs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.report.r1)
            .collect();
        rs.iter().sum::<f64>() / rs.len().max(1) as f64
    }

    pub fn mean_sum(&self, variant: Variant) -> f64 {
        let rs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.report.sum_metric)
            .collect();
        rs.iter().sum::<f64>() / rs.len().max(1) as f64
    }
}

/// Train the four variants (full, -CPG, -Domain, -MoP) under identical
/// seeds and report per-run recall. The backbone is shared per seed.
pub fn ablate(cfg: &PipelineConfig, dialogs: &[Dialog], seeds: &[u64]) -> Result<AblationTable> {
    let mut runs = Vec::new();
    let mut backbones: HashMap<u64, BackboneSnapshot> = HashMap::new();
    for &seed in seeds {
        let seeded = cfg.clone().with_master_seed(seed);
        let backbone = match backbones.get(&seed) {
            Some(b) => b.clone(),
            None => {
                let b = pretrain_backbone_snapshot(&seeded, dialogs)?;
                backbones.insert(seed, b.clone());
                b
            }
        };
        for variant in Variant::all() {
            let mut vcfg = seeded.clone();
            vcfg.model = variant.apply(&seeded.model);
            let outcome = run_tuning(&vcfg, dialogs, &backbone, false)?;
            log::info!(
                "ablate seed {seed} {}: R@1={:.3} Sum={:.1}",
                variant.name(),
                outcome.test_report.r1,
                outcome.test_report.sum_metric
            );
            runs.push(AblationRun {
                variant,
                seed,
                report: outcome.test_report,
            });
        }
    }
    Ok(AblationTable { runs })
}

// ── Table rendering ──────────────────────────────────────────────────

pub fn render_report_row(label: &str, r: &RecallReport) -> String {
    format!(
        "{label:<12} {:>7.3} {:>7.3} {:>7.3} {:>8.1}",
        r.r1, r.r5, r.r10, r.sum_metric
    )
}

pub fn render_sweep(table: &SweepTable, csv: bool) -> String {
    let mut out = String::new();
    if csv {
        out.push_str(&format!("{},r1,r5,r10,sum\n", table.param.name()));
        for row in &table.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.value, row.report.r1, row.report.r5, row.report.r10, row.report.sum_metric
            ));
        }
    } else {
        out.push_str(&format!(
            "{:<12} {:>7} {:>7} {:>7} {:>8}\n",
            table.param.name(),
            "R@1",
            "R@5",
            "R@10",
            "Sum"
        ));
        for row in &table.rows {
            out.push_str(&render_report_row(&row.value.to_string(), &row.report));
            out.push('\n');
        }
    }
    out
}

pub fn render_ablation(table: &AblationTable, csv: bool) -> String {
    let mut out = String::new();
    if csv {
        out.push_str("variant,seed,r1,r5,r10,sum\n");
        for run in &table.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                run.variant.name(),
                run.seed,
                run.report.r1,
                run.report.r5,
                run.report.r10,
                run.report.sum_metric
            ));
        }
        out.push_str("variant,mean_r1,mean_sum\n");
        for v in Variant::all() {
            out.push_str(&format!(
                "{},{},{}\n",
                v.name(),
                table.mean_r1(v),
                table.mean_sum(v)
            ));
        }
    } else {
        out.push_str(&format!(
            "{:<12} {:>5} {:>7} {:>7} {:>7} {:>8}\n",
            "variant", "seed", "R@1", "R@5", "R@10", "Sum"
        ));
        for run in &table.runs {
            out.push_str(&format!(
                "{:<12} {:>5} {:>7.3} {:>7.3} {:>7.3} {:>8.1}\n",
                run.variant.name(),
                run.seed,
                run.report.r1,
                run.report.r5,
                run.report.r10,
                run.report.sum_metric
            ));
        }
        out.push_str(&format!("{:<12} {:>7} {:>8}\n", "variant", "mean", "meanSum"));
        for v in Variant::all() {
            out.push_str(&format!(
                "{:<12} {:>7.3} {:>8.1}\n",
                v.name(),
                table.mean_r1(v),
                table.mean_sum(v)
            ));
        }
    }
    out
}

pub fn render_eval(r: &RecallReport, csv: bool) -> String {
    let mut out = String::new();
    if csv {
        out.push_str("slice,r1,r5,r10,sum,n\n");
        out.push_str(&format!(
            "overall,{},{},{},{},{}\n",
            r.r1, r.r5, r.r10, r.sum_metric, r.n_queries
        ));
        if let Some(t) = &r.text_response {
            out.push_str(&format!(
                "TR,{},{},{},{},{}\n",
                t.r1,
                t.r5,
                t.r10,
                t.sum_metric(),
                t.n_queries
            ));
        }
        if let Some(t) = &r.image_response {
            out.push_str(&format!(
                "IR,{},{},{},{},{}\n",
                t.r1,
                t.r5,
                t.r10,
                t.sum_metric(),
                t.n_queries
            ));
        }
        for (rt, t) in &r.per_type {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                rt.tag(),
                t.r1,
                t.r5,
                t.r10,
                t.sum_metric(),
                t.n_queries
            ));
        }
    } else {
        out.push_str(&format!(
            "{:<12} {:>7} {:>7} {:>7} {:>8} {:>6}\n",
            "slice", "R@1", "R@5", "R@10", "Sum", "n"
        ));
        out.push_str(&format!(
            "{:<12} {:>7.3} {:>7.3} {:>7.3} {:>8.1} {:>6}\n",
            "overall", r.r1, r.r5, r.r10, r.sum_metric, r.n_queries
        ));
        if let Some(t) = &r.text_response {
            out.push_str(&format!(
                "{:<12} {:>7.3} {:>7.3} {:>7.3} {:>8.1} {:>6}\n",
                "TR",
                t.r1,
                t.r5,
                t.r10,
                t.sum_metric(),
                t.n_queries
            ));
        }
        if let Some(t) = &r.image_response {
            out.push_str(&format!(
                "{:<12} {:>7.3} {:>7.3} {:>7.3} {:>8.1} {:>6}\n",
                "IR",
                t.r1,
                t.r5,
                t.r10,
                t.sum_metric(),
                t.n_queries
            ));
        }
        for (rt, t) in &r.per_type {
            out.push_str(&format!(
                "{:<12} {:>7.3} {:>7.3} {:>7.3} {:>8.1} {:>6}\n",
                rt.tag(),
                t.r1,
                t.r5,
                t.r10,
                t.sum_metric(),
                t.n_queries
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_param_parsing() {
        assert_eq!("ctx_len".parse::<SweepParam>().unwrap(), SweepParam::CtxLen);
        assert_eq!("dom_len".parse::<SweepParam>().unwrap(), SweepParam::DomLen);
        assert_eq!(
            "prompt_layer".parse::<SweepParam>().unwrap(),
            SweepParam::PromptLayer
        );
        assert!("nope".parse::<SweepParam>().is_err());
    }

    #[test]
    fn variants_toggle_the_right_knobs() {
        let base = ModelConfig::default();
        assert!(!Variant::NoCpg.apply(&base).use_cpg);
        assert_eq!(Variant::NoDomain.apply(&base).domain_len, 0);
        assert!(Variant::NoMop.apply(&base).single_expert);
        assert_eq!(Variant::Full.apply(&base), base);
    }

    #[test]
    fn sweep_values_validated() {
        let base = ModelConfig::default();
        assert!(apply_sweep_value(&base, SweepParam::PromptLayer, 99).is_err());
        assert!(apply_sweep_value(&base, SweepParam::CtxLen, 0).is_err());
        let ok = apply_sweep_value(&base, SweepParam::DomLen, 8).unwrap();
        assert_eq!(ok.domain_len, 8);
    }
}
