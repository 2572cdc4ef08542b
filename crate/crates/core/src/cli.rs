//! Command-line interface: flat key=value settings resolved from
//! defaults, then a config file, then `--set` flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use promptdial::data::{generate_corpus, read_jsonl, split_of, write_jsonl, CorpusSpec, Split};
use promptdial::encoders::EncoderConfig;
use promptdial::error::{Error, Result};
use promptdial::eval::evaluate;
use promptdial::harness::{
    ablate, end_to_end_grad_check, render_ablation, render_eval, render_sweep, sweep,
    PipelineConfig, SweepParam,
};
use promptdial::checkpoint;
use promptdial::model::{Model, ModelConfig};
use promptdial::training::{run_stage, write_metrics, MetricsRecord, Stage, TrainConfig};

/// Desk-scale settings, one flat namespace. Every key is settable from
/// the config file (`key = value` lines) or `--set key=value`.
#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    // Backbone shape.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub patch_dim: usize,
    pub n_patches: usize,
    pub ctx_layers: usize,
    pub ctx_max_seq: usize,
    // Prompts and projection.
    pub ctx_len: usize,
    pub domain_len: usize,
    pub insert_layer: usize,
    pub proj_dim: usize,
    pub bottleneck: usize,
    pub use_cpg: bool,
    pub single_expert: bool,
    // Training.
    pub backbone_steps: usize,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
    pub backbone_pairs: usize,
    pub stage1_steps: usize,
    pub stage1_batch: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_batch: usize,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub pool_size: usize,
    // Corpus.
    pub n_topics: u32,
    pub train_per_topic: u32,
    pub dev_per_topic: u32,
    pub test_per_topic: u32,
    pub min_turns: u32,
    pub max_turns: u32,
    pub tokens_per_topic: u32,
    pub utt_len_min: u32,
    pub utt_len_max: u32,
    pub noise_sigma: f64,
    pub ambiguity_rate: f64,
    pub image_turn_prob: f64,
    pub text_response_prob: f64,
    pub topic_token_prob: f64,
}

impl Default for Settings {
    /// Desk preset: small enough that the full pipeline trains in minutes
    /// on one CPU core while leaving headroom for the prompt mechanisms
    /// to matter.
    fn default() -> Self {
        Settings {
            seed: 1,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 256,
            max_seq: 48,
            patch_dim: 8,
            n_patches: 4,
            ctx_layers: 2,
            ctx_max_seq: 80,
            ctx_len: 8,
            domain_len: 4,
            insert_layer: 1,
            proj_dim: 16,
            bottleneck: 64,
            use_cpg: true,
            single_expert: false,
            backbone_steps: 300,
            backbone_batch: 32,
            backbone_lr: 1e-3,
            backbone_pairs: 2048,
            stage1_steps: 200,
            stage1_batch: 16,
            stage1_lr: 2e-3,
            stage2_steps: 500,
            stage2_batch: 16,
            stage2_lr: 2e-3,
            weight_decay: 0.01,
            eval_every: 0,
            pool_size: 100,
            n_topics: 16,
            train_per_topic: 125,
            dev_per_topic: 8,
            test_per_topic: 32,
            min_turns: 2,
            max_turns: 6,
            tokens_per_topic: 8,
            utt_len_min: 4,
            utt_len_max: 8,
            noise_sigma: 0.25,
            ambiguity_rate: 1.0,
            image_turn_prob: 0.3,
            text_response_prob: 0.5,
            topic_token_prob: 0.75,
        }
    }
}

macro_rules! set_keys {
    ($self:ident, $key:ident, $value:ident; $($name:ident),* $(,)?) => {
        match $key {
            $(stringify!($name) => {
                $self.$name = $value.parse().map_err(|_| {
                    Error::Config(format!(
                        concat!("bad value {:?} for key ", stringify!($name)),
                        $value
                    ))
                })?;
                return Ok(());
            })*
            _ => {}
        }
    };
}

impl Settings {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        set_keys!(self, key, value;
            seed, d_model, n_layers, n_heads, vocab_size, max_seq, patch_dim, n_patches,
            ctx_layers, ctx_max_seq, ctx_len, domain_len, insert_layer, proj_dim, bottleneck,
            use_cpg, single_expert,
            backbone_steps, backbone_batch, backbone_lr, backbone_pairs,
            stage1_steps, stage1_batch, stage1_lr,
            stage2_steps, stage2_batch, stage2_lr,
            weight_decay, eval_every, pool_size,
            n_topics, train_per_topic, dev_per_topic, test_per_topic,
            min_turns, max_turns, tokens_per_topic, utt_len_min, utt_len_max,
            noise_sigma, ambiguity_rate, image_turn_prob, text_response_prob, topic_token_prob,
        );
        Err(Error::Config(format!("unknown config key {key:?}")))
    }

    /// Parse a flat `key = value` config file; `#` starts a comment.
    pub fn load_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected key = value, got {raw:?}"),
                });
            };
            self.apply(key, value).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_topics: self.n_topics,
            train_per_topic: self.train_per_topic,
            dev_per_topic: self.dev_per_topic,
            test_per_topic: self.test_per_topic,
            min_turns: self.min_turns,
            max_turns: self.max_turns,
            vocab_size: self.vocab_size as u32,
            tokens_per_topic: self.tokens_per_topic,
            utt_len_min: self.utt_len_min,
            utt_len_max: self.utt_len_max,
            n_patches: self.n_patches as u32,
            patch_dim: self.patch_dim as u32,
            noise_sigma: self.noise_sigma,
            ambiguity_rate: self.ambiguity_rate,
            image_turn_prob: self.image_turn_prob,
            text_response_prob: self.text_response_prob,
            topic_token_prob: self.topic_token_prob,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let enc = EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
            patch_dim: self.patch_dim,
            n_patches: self.n_patches,
        };
        let ctx_enc = EncoderConfig {
            n_layers: self.ctx_layers,
            max_seq: self.ctx_max_seq,
            ..enc.clone()
        };
        ModelConfig {
            enc,
            ctx_enc,
            ctx_len: self.ctx_len,
            domain_len: self.domain_len,
            insert_layer: self.insert_layer,
            proj_dim: self.proj_dim,
            bottleneck: self.bottleneck,
            use_cpg: self.use_cpg,
            single_expert: self.single_expert,
            init_seed: self.seed,
        }
    }

    fn train_config(&self, stage: Stage) -> TrainConfig {
        let (steps, batch, lr) = match stage {
            Stage::Backbone => (self.backbone_steps, self.backbone_batch, self.backbone_lr),
            Stage::Stage1 => (self.stage1_steps, self.stage1_batch, self.stage1_lr),
            Stage::Stage2 => (self.stage2_steps, self.stage2_batch, self.stage2_lr),
        };
        TrainConfig {
            base_lr: lr,
            total_steps: steps,
            batch_size: batch,
            weight_decay: self.weight_decay,
            stage,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model_config(),
            corpus: self.corpus_spec(),
            backbone: self.train_config(Stage::Backbone),
            stage1: self.train_config(Stage::Stage1),
            stage2: self.train_config(Stage::Stage2),
            backbone_pairs: self.backbone_pairs,
            pool_size: self.pool_size,
            eval_every: self.eval_every,
            eval_seed: self.seed,
        }
        .with_master_seed(self.seed)
    }
}

// ── Argument grammar ─────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "promptdial",
    about = "Prompt-tuned dual-encoder dialog response retrieval, desk scale",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting (repeatable), e.g. --set seed=7.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic dialog corpus as JSONL (all splits).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output path (.jsonl or .jsonl.gz).
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the dual encoders on single-round pairs and save a
    /// checkpoint with the backbone frozen.
    PretrainBackbone {
        #[command(flatten)]
        common: Common,
        /// Corpus JSONL (used for its spec-matched pair distribution).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run prompt tuning stages over a pretrained backbone.
    Train {
        #[command(flatten)]
        common: Common,
        /// One of: stage1, stage2, all (all = backbone + stage1 + stage2).
        #[arg(long)]
        stage: String,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to start from (required for stage1/stage2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSONL output path.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "text")]
        format: String,
        /// Dump the raw score matrix as CSV.
        #[arg(long)]
        dump_scores: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one prompt parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of: ctx_len, dom_len, prompt_layer.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 16,32,64,96,128.
        #[arg(long)]
        values: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Train the full model and the three ablations under shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated master seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// End-to-end finite-difference gradient check at toy dimensions.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
    },
}

fn resolve_settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.load_file(path)?;
    }
    for kv in &common.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!("--set expects key=value, got {kv:?}")));
        };
        s.apply(k, v)?;
    }
    Ok(s)
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad list entry {x:?}")))
        })
        .collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad list entry {x:?}")))
        })
        .collect()
}

fn dump_scores_csv(m: &promptdial::eval::ScoreMatrix, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "row,type,positive_index,scores")?;
    for i in 0..m.n_rows() {
        let joined: Vec<String> = m.scores[i].iter().map(|s| format!("{s}")).collect();
        writeln!(
            f,
            "{i},{},{},{}",
            m.row_type[i].tag(),
            m.positive_index[i],
            joined.join(";")
        )?;
    }
    Ok(())
}

/// Run one parsed command. Errors map to exit code 2 in `main`.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let s = resolve_settings(&common)?;
            let corpus = generate_corpus(&s.corpus_spec())?;
            write_jsonl(&corpus, &out)?;
            let (train, dev, test) = (
                split_of(&corpus, Split::Train).len(),
                split_of(&corpus, Split::Dev).len(),
                split_of(&corpus, Split::Test).len(),
            );
            println!(
                "wrote {} dialogs ({train} train / {dev} dev / {test} test) to {}",
                corpus.len(),
                out.display()
            );
            Ok(())
        }
        Command::PretrainBackbone { common, data, out } => {
            let s = resolve_settings(&common)?;
            let dialogs = read_jsonl(&data)?;
            let mut model = Model::new(s.model_config())?;
            let cfg = s.pipeline_config();
            let summary = run_stage(
                &mut model,
                &cfg.backbone,
                &cfg.corpus,
                &dialogs,
                &promptdial::training::StageOptions {
                    eval_every: 0,
                    pool_size: s.pool_size,
                    backbone_pairs: s.backbone_pairs,
                    eval_split: Split::Dev,
                    eval_seed: cfg.eval_seed,
                },
            )?;
            checkpoint::save_checkpoint(&model, &out)?;
            println!(
                "backbone pretrained for {} steps (final loss {:.4}); checkpoint at {}",
                summary.steps_run,
                summary.final_loss,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            stage,
            data,
            init,
            out,
            metrics,
        } => {
            let s = resolve_settings(&common)?;
            let dialogs = read_jsonl(&data)?;
            let cfg = s.pipeline_config();
            let mut records: Vec<MetricsRecord> = Vec::new();
            let mut model = match (&init, stage.as_str()) {
                (None, "all") => Model::new(s.model_config())?,
                (None, other) => {
                    return Err(Error::State(format!(
                        "train --stage {other} requires --init <checkpoint> (run pretrain-backbone first)"
                    )))
                }
                (Some(path), _) => checkpoint::load_checkpoint(path)?,
            };
            let stages: Vec<Stage> = match stage.as_str() {
                "all" => vec![Stage::Backbone, Stage::Stage1, Stage::Stage2],
                "stage1" => vec![Stage::Stage1],
                "stage2" => vec![Stage::Stage2],
                other => return Err(Error::Input(format!("unknown stage {other:?}"))),
            };
            for st in stages {
                let tc = match st {
                    Stage::Backbone => &cfg.backbone,
                    Stage::Stage1 => &cfg.stage1,
                    Stage::Stage2 => &cfg.stage2,
                };
                let summary = run_stage(
                    &mut model,
                    tc,
                    &cfg.corpus,
                    &dialogs,
                    &promptdial::training::StageOptions {
                        eval_every: s.eval_every,
                        pool_size: s.pool_size,
                        backbone_pairs: s.backbone_pairs,
                        eval_split: Split::Dev,
                        eval_seed: cfg.eval_seed,
                    },
                )?;
                println!(
                    "{}: {} steps, final loss {:.4}, trainable {:.2}%",
                    st.name(),
                    summary.steps_run,
                    summary.final_loss,
                    100.0 * summary.trainable_fraction
                );
                records.extend(summary.records);
            }
            checkpoint::save_checkpoint(&model, &out)?;
            if let Some(mpath) = metrics {
                write_metrics(&records, &mpath)?;
                println!("metrics at {}", mpath.display());
            }
            println!("checkpoint at {}", out.display());
            Ok(())
        }
        Command::Eval {
            common,
            data,
            checkpoint: ckpt,
            split,
            format,
            dump_scores,
        } => {
            let s = resolve_settings(&common)?;
            let dialogs = read_jsonl(&data)?;
            let split: Split = split.parse()?;
            let mut model = checkpoint::load_checkpoint(&ckpt)?;
            let subset = split_of(&dialogs, split);
            let use_ctx = model.cfg.use_cpg;
            let (report, matrix) = evaluate(&mut model, &subset, s.pool_size, s.seed, use_ctx)?;
            print!("{}", render_eval(&report, format == "csv"));
            if let Some(path) = dump_scores {
                dump_scores_csv(&matrix, &path)?;
                println!("score matrix at {}", path.display());
            }
            Ok(())
        }
        Command::Sweep {
            common,
            param,
            values,
            data,
            format,
        } => {
            let s = resolve_settings(&common)?;
            let dialogs = read_jsonl(&data)?;
            let param: SweepParam = param.parse()?;
            let values = parse_usize_list(&values)?;
            let table = sweep(&s.pipeline_config(), &dialogs, param, &values)?;
            print!("{}", render_sweep(&table, format == "csv"));
            Ok(())
        }
        Command::Ablate {
            common,
            data,
            seeds,
            format,
        } => {
            let s = resolve_settings(&common)?;
            let dialogs = read_jsonl(&data)?;
            let seeds = parse_u64_list(&seeds)?;
            let table = ablate(&s.pipeline_config(), &dialogs, &seeds)?;
            print!("{}", render_ablation(&table, format == "csv"));
            Ok(())
        }
        Command::Gradcheck { common, tol, h } => {
            let s = resolve_settings(&common)?;
            let report = end_to_end_grad_check(h, tol, s.seed)?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check failed"))
            }
        }
    }
}
