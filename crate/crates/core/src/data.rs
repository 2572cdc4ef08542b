//! Dialog data model, JSONL serialization, synthetic corpus generation,
//! and type-homogeneous batch sampling.
//!
//! The generator plants a context signal: every dialog is about one hidden
//! topic, the positive response shares that topic, and an "ambiguous"
//! dialog's current input carries no topic information at all — only the
//! earlier turns do. Retrieval on ambiguous dialogs therefore requires
//! reading the context, which the bag-of-evidence oracle classifiers below
//! verify without any neural machinery.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

// ── Core types ───────────────────────────────────────────────────────

/// Modality tag, serialized as "t" / "v".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "v")]
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "user")]
    User,
    #[serde(rename = "system")]
    System,
}

/// One dialog turn or response: text tokens or image patches, never both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub modality: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patches: Option<Vec<Vec<f64>>>,
}

impl Utterance {
    pub fn text(role: Role, tokens: Vec<u32>) -> Self {
        Utterance {
            role,
            modality: Modality::Text,
            tokens: Some(tokens),
            patches: None,
        }
    }

    pub fn image(role: Role, patches: Vec<Vec<f64>>) -> Self {
        Utterance {
            role,
            modality: Modality::Image,
            tokens: None,
            patches: Some(patches),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.modality, &self.tokens, &self.patches) {
            (Modality::Text, Some(_), None) => Ok(()),
            (Modality::Image, None, Some(p)) => {
                let w = p.first().map(|r| r.len()).unwrap_or(0);
                if p.is_empty() || w == 0 || p.iter().any(|r| r.len() != w) {
                    return Err(Error::Input("utterance: empty or ragged patches".into()));
                }
                Ok(())
            }
            _ => Err(Error::Input(
                "utterance: exactly one of tokens/patches must be present, matching modality"
                    .into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "dev")]
    Dev,
    #[serde(rename = "test")]
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split {s:?}"))),
        }
    }
}

/// A dialog: ordered turns plus the ground-truth response. The context is
/// every turn but the last; the last turn is the current input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: u64,
    pub split: Split,
    pub turns: Vec<Utterance>,
    pub response: Utterance,
    /// Hidden generator label, kept for diagnostics and evaluation pool
    /// construction; the model never reads it.
    pub topic_id: u32,
}

impl Dialog {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Input(format!("dialog {}: no turns", self.id)));
        }
        for t in &self.turns {
            t.validate()?;
        }
        self.response.validate()
    }

    /// Turns before the current input (may be empty for 1-turn dialogs).
    pub fn context(&self) -> &[Utterance] {
        &self.turns[..self.turns.len() - 1]
    }

    pub fn current_input(&self) -> &Utterance {
        self.turns.last().expect("validated: >= 1 turn")
    }
}

// ── Corpus specification & generation ────────────────────────────────

/// Shape of the synthetic corpus.
///
/// The vocabulary is split into `n_topics * tokens_per_topic` topic-
/// indicative ids (topic z owns the contiguous block starting at
/// `z * tokens_per_topic`) and a shared-ambiguous remainder. Image
/// utterances are a per-topic mean vector in patch space plus Gaussian
/// noise; ambiguous image inputs are drawn around the zero vector instead.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusSpec {
    pub n_topics: u32,
    pub train_per_topic: u32,
    pub dev_per_topic: u32,
    pub test_per_topic: u32,
    pub min_turns: u32,
    pub max_turns: u32,
    pub vocab_size: u32,
    pub tokens_per_topic: u32,
    pub utt_len_min: u32,
    pub utt_len_max: u32,
    pub n_patches: u32,
    pub patch_dim: u32,
    pub noise_sigma: f64,
    /// Fraction of dialogs whose current input is drawn only from the
    /// shared vocabulary (text) or the global mean (image).
    pub ambiguity_rate: f64,
    /// Probability that a context turn or the current input is an image.
    pub image_turn_prob: f64,
    /// Probability that the response is text (vs image).
    pub text_response_prob: f64,
    /// Probability that a token of an informative text utterance comes
    /// from the topic block rather than the shared pool.
    pub topic_token_prob: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_topics: 16,
            train_per_topic: 125,
            dev_per_topic: 8,
            test_per_topic: 32,
            min_turns: 2,
            max_turns: 6,
            vocab_size: 256,
            tokens_per_topic: 8,
            utt_len_min: 4,
            utt_len_max: 8,
            n_patches: 16,
            patch_dim: 16,
            noise_sigma: 0.25,
            ambiguity_rate: 1.0,
            image_turn_prob: 0.3,
            text_response_prob: 0.5,
            topic_token_prob: 0.75,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_topics < 2 {
            return Err(Error::Config(format!(
                "corpus: need at least 2 topics, got {}",
                self.n_topics
            )));
        }
        if self.n_topics * self.tokens_per_topic >= self.vocab_size {
            return Err(Error::Config(format!(
                "corpus: vocab {} too small for {} topics x {} tokens (no shared pool left)",
                self.vocab_size, self.n_topics, self.tokens_per_topic
            )));
        }
        if self.min_turns < 1 || self.min_turns > self.max_turns {
            return Err(Error::Config("corpus: bad turn range".into()));
        }
        if self.utt_len_min < 1 || self.utt_len_min > self.utt_len_max {
            return Err(Error::Config("corpus: bad utterance length range".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Config(format!(
                "corpus: ambiguity_rate {} outside [0, 1]",
                self.ambiguity_rate
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("corpus: negative noise_sigma".into()));
        }
        Ok(())
    }

    fn shared_start(&self) -> u32 {
        self.n_topics * self.tokens_per_topic
    }

    /// Mean vector of topic z in patch space: a deterministic unit-ish
    /// direction scaled for separation against `noise_sigma`.
    pub fn topic_mean(&self, z: u32) -> Vec<f64> {
        let mut rng = Rng::stream(self.seed, 0x4D45414E ^ u64::from(z) << 8);
        let d = self.patch_dim as usize;
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        v
    }

    fn sample_topic_token(&self, z: u32, rng: &mut Rng) -> u32 {
        z * self.tokens_per_topic + rng.below(self.tokens_per_topic as usize) as u32
    }

    fn sample_shared_token(&self, rng: &mut Rng) -> u32 {
        let start = self.shared_start();
        start + rng.below((self.vocab_size - start) as usize) as u32
    }

    fn informative_tokens(&self, z: u32, rng: &mut Rng) -> Vec<u32> {
        let len = rng.range_inclusive(self.utt_len_min as usize, self.utt_len_max as usize);
        (0..len)
            .map(|_| {
                if rng.chance(self.topic_token_prob) {
                    self.sample_topic_token(z, rng)
                } else {
                    self.sample_shared_token(rng)
                }
            })
            .collect()
    }

    fn ambiguous_tokens(&self, rng: &mut Rng) -> Vec<u32> {
        let len = rng.range_inclusive(self.utt_len_min as usize, self.utt_len_max as usize);
        (0..len).map(|_| self.sample_shared_token(rng)).collect()
    }

    fn image_patches(&self, mean: &[f64], rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..self.n_patches)
            .map(|_| {
                mean.iter()
                    .map(|m| m + self.noise_sigma * rng.normal())
                    .collect()
            })
            .collect()
    }

    fn topic_image(&self, z: u32, rng: &mut Rng) -> Vec<Vec<f64>> {
        self.image_patches(&self.topic_mean(z), rng)
    }

    fn ambiguous_image(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        let zero = vec![0.0; self.patch_dim as usize];
        self.image_patches(&zero, rng)
    }
}

fn role_for(turn_idx: usize) -> Role {
    if turn_idx % 2 == 0 {
        Role::User
    } else {
        Role::System
    }
}

/// Generate the full corpus (all splits) deterministically from the spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Dialog>> {
    spec.validate()?;
    let mut rng = Rng::stream(spec.seed, 0x434F5250);
    let mut dialogs = Vec::new();
    let mut next_id = 0u64;
    let plan = [
        (Split::Train, spec.train_per_topic),
        (Split::Dev, spec.dev_per_topic),
        (Split::Test, spec.test_per_topic),
    ];
    for (split, per_topic) in plan {
        for z in 0..spec.n_topics {
            for _ in 0..per_topic {
                dialogs.push(generate_dialog(spec, z, split, next_id, &mut rng));
                next_id += 1;
            }
        }
    }
    Ok(dialogs)
}

fn generate_dialog(spec: &CorpusSpec, z: u32, split: Split, id: u64, rng: &mut Rng) -> Dialog {
    let n_turns = rng.range_inclusive(spec.min_turns as usize, spec.max_turns as usize);
    let ambiguous = rng.chance(spec.ambiguity_rate);
    let mut turns = Vec::with_capacity(n_turns);
    for i in 0..n_turns {
        let role = role_for(i);
        let is_current = i == n_turns - 1;
        let image = rng.chance(spec.image_turn_prob);
        let utt = if is_current && ambiguous {
            if image {
                Utterance::image(role, spec.ambiguous_image(rng))
            } else {
                Utterance::text(role, spec.ambiguous_tokens(rng))
            }
        } else if image {
            Utterance::image(role, spec.topic_image(z, rng))
        } else {
            Utterance::text(role, spec.informative_tokens(z, rng))
        };
        turns.push(utt);
    }
    let response = if rng.chance(spec.text_response_prob) {
        Utterance::text(Role::System, spec.informative_tokens(z, rng))
    } else {
        Utterance::image(Role::System, spec.topic_image(z, rng))
    };
    Dialog {
        id,
        split,
        turns,
        response,
        topic_id: z,
    }
}

/// A single-round text/image pair sharing one topic, used to pretrain the
/// backbone encoders the way single-round pairwise data pretrains a
/// dual encoder.
#[derive(Clone, Debug)]
pub struct PairExample {
    pub tokens: Vec<u32>,
    pub patches: Vec<Vec<f64>>,
    pub topic_id: u32,
}

/// Deterministic caption-style pairs: text is drawn from the topic block
/// only (no shared-token mixing, no dialog roles), so the dialog corpus
/// sits at a measurable distribution shift from the pretraining data.
pub fn generate_pretrain_pairs(spec: &CorpusSpec, n_pairs: usize, seed: u64) -> Result<Vec<PairExample>> {
    spec.validate()?;
    let mut rng = Rng::stream(seed, 0x50414952);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let z = rng.below(spec.n_topics as usize) as u32;
        let len = rng.range_inclusive(spec.utt_len_min as usize, spec.utt_len_max as usize);
        let tokens = (0..len).map(|_| spec.sample_topic_token(z, &mut rng)).collect();
        let patches = spec.topic_image(z, &mut rng);
        pairs.push(PairExample {
            tokens,
            patches,
            topic_id: z,
        });
    }
    Ok(pairs)
}

// ── JSONL serialization ──────────────────────────────────────────────

/// JSON formatter printing every float with 17 significant digits, so the
/// decimal text round-trips f64 values exactly.
struct SigDigits;

impl serde_json::ser::Formatter for SigDigits {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

fn dialog_to_json_line(d: &Dialog) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits);
    d.serialize(&mut ser)
        .map_err(|e| Error::Input(format!("serialize dialog {}: {e}", d.id)))?;
    Ok(buf)
}

/// Write one dialog per line. A path ending in `.gz` is gzip-compressed.
pub fn write_jsonl(dialogs: &[Dialog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)?;
    let mut out: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(BufWriter::new(flate2::write::GzEncoder::new(
            file,
            flate2::Compression::default(),
        )))
    } else {
        Box::new(BufWriter::new(file))
    };
    for d in dialogs {
        for patches in d.response.patches.iter().chain(d.turns.iter().filter_map(|t| t.patches.as_ref())) {
            if patches.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("write_jsonl"));
            }
        }
        out.write_all(&dialog_to_json_line(d)?)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read dialogs back; parse failures report the 1-based line number.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Dialog>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut dialogs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialog = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        d.validate().map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        dialogs.push(d);
    }
    Ok(dialogs)
}

pub fn split_of<'a>(dialogs: &'a [Dialog], split: Split) -> Vec<&'a Dialog> {
    dialogs.iter().filter(|d| d.split == split).collect()
}

// ── Batch sampling ───────────────────────────────────────────────────

/// A batch of corpus indices, homogeneous in retrieval type.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input_modality: Modality,
    pub response_modality: Modality,
    pub indices: Vec<usize>,
}

/// One epoch of type-homogeneous batches: dialogs are grouped by
/// (input modality, response modality), shuffled without replacement
/// within each group, chunked, and the chunk order is shuffled. Partial
/// final batches are kept.
pub fn sample_batches(dialogs: &[&Dialog], batch_size: usize, rng: &mut Rng) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let kinds = [
        (Modality::Text, Modality::Text),
        (Modality::Text, Modality::Image),
        (Modality::Image, Modality::Text),
        (Modality::Image, Modality::Image),
    ];
    let mut batches = Vec::new();
    for (im, rm) in kinds {
        let mut idx: Vec<usize> = dialogs
            .iter()
            .enumerate()
            .filter(|(_, d)| d.current_input().modality == im && d.response.modality == rm)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut idx);
        for chunk in idx.chunks(batch_size) {
            batches.push(Batch {
                input_modality: im,
                response_modality: rm,
                indices: chunk.to_vec(),
            });
        }
    }
    rng.shuffle(&mut batches);
    batches
}

// ── Oracle topic classifiers ─────────────────────────────────────────

/// Brute-force topic classifiers fit on raw train-split statistics,
/// independent of the neural model. They certify the planted signal:
/// with full ambiguity the last turn alone predicts the topic at chance
/// while the full context predicts it far above chance.
pub struct TopicOracle {
    /// K x vocab Laplace-smoothed log p(token | topic).
    log_token: Vec<Vec<f64>>,
    /// K x patch_dim mean patch vector per topic.
    img_means: Vec<Vec<f64>>,
    n_topics: usize,
    patch_dim: usize,
}

impl TopicOracle {
    pub fn fit(train: &[&Dialog], n_topics: usize, vocab_size: usize, patch_dim: usize) -> Self {
        let mut counts = vec![vec![1.0f64; vocab_size]; n_topics];
        let mut sums = vec![vec![0.0f64; patch_dim]; n_topics];
        let mut n_rows = vec![0usize; n_topics];
        for d in train {
            let z = d.topic_id as usize;
            // Learn token and image statistics from the informative parts:
            // context turns and the response.
            for utt in d.context().iter().chain(std::iter::once(&d.response)) {
                if let Some(toks) = &utt.tokens {
                    for &t in toks {
                        counts[z][t as usize] += 1.0;
                    }
                }
                if let Some(patches) = &utt.patches {
                    for row in patches {
                        for (j, v) in row.iter().enumerate() {
                            sums[z][j] += v;
                        }
                        n_rows[z] += 1;
                    }
                }
            }
        }
        let log_token = counts
            .into_iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                row.into_iter().map(|c| (c / total).ln()).collect()
            })
            .collect();
        let img_means = sums
            .into_iter()
            .zip(&n_rows)
            .map(|(s, &n)| {
                let n = n.max(1) as f64;
                s.into_iter().map(|v| v / n).collect()
            })
            .collect();
        TopicOracle {
            log_token,
            img_means,
            n_topics,
            patch_dim,
        }
    }

    fn utterance_scores(&self, utt: &Utterance, scores: &mut [f64]) {
        if let Some(toks) = &utt.tokens {
            for z in 0..self.n_topics {
                for &t in toks {
                    scores[z] += self.log_token[z][t as usize];
                }
            }
        }
        if let Some(patches) = &utt.patches {
            // Negative squared distance of the mean patch to each topic mean.
            let mut mean = vec![0.0; self.patch_dim];
            for row in patches {
                for (j, v) in row.iter().enumerate() {
                    mean[j] += v;
                }
            }
            for v in &mut mean {
                *v /= patches.len() as f64;
            }
            for z in 0..self.n_topics {
                let d2: f64 = mean
                    .iter()
                    .zip(&self.img_means[z])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                scores[z] -= d2;
            }
        }
    }

    fn argmax(scores: &[f64]) -> usize {
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }

    /// Predict the topic from the current input alone.
    pub fn classify_last_only(&self, d: &Dialog) -> usize {
        let mut scores = vec![0.0; self.n_topics];
        self.utterance_scores(d.current_input(), &mut scores);
        Self::argmax(&scores)
    }

    /// Predict the topic from every context turn plus the current input.
    pub fn classify_full_context(&self, d: &Dialog) -> usize {
        let mut scores = vec![0.0; self.n_topics];
        for utt in &d.turns {
            self.utterance_scores(utt, &mut scores);
        }
        Self::argmax(&scores)
    }

    pub fn accuracy(&self, dialogs: &[&Dialog], full_context: bool) -> f64 {
        if dialogs.is_empty() {
            return 0.0;
        }
        let hits = dialogs
            .iter()
            .filter(|d| {
                let pred = if full_context {
                    self.classify_full_context(d)
                } else {
                    self.classify_last_only(d)
                };
                pred == d.topic_id as usize
            })
            .count();
        hits as f64 / dialogs.len() as f64
    }
}
