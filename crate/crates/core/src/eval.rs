//! Retrieval evaluation: per-query candidate pools, recall@k with a
//! deterministic tie rule, and TR/IR breakdowns.

use std::collections::HashMap;

use serde::Serialize;

use crate::data::{Dialog, Modality};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::mop::RetrievalType;
use crate::numerics::{Rng, Tensor};

/// Query-by-candidate score matrix. Every row records where its positive
/// sits and which retrieval type produced it.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    pub scores: Vec<Vec<f64>>,
    pub positive_index: Vec<usize>,
    pub row_type: Vec<RetrievalType>,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.positive_index.len() || self.scores.len() != self.row_type.len() {
            return Err(Error::Contract("score matrix: ragged bookkeeping".into()));
        }
        for (i, row) in self.scores.iter().enumerate() {
            if self.positive_index[i] >= row.len() {
                return Err(Error::Contract(format!(
                    "score matrix: positive index {} out of range for row {i} ({} candidates)",
                    self.positive_index[i],
                    row.len()
                )));
            }
            if row.iter().any(|s| !s.is_finite()) {
                return Err(Error::Numeric("score_matrix"));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.scores.len()
    }

    fn select(&self, keep: impl Fn(RetrievalType) -> bool) -> ScoreMatrix {
        let mut scores = Vec::new();
        let mut positive_index = Vec::new();
        let mut row_type = Vec::new();
        for i in 0..self.n_rows() {
            if keep(self.row_type[i]) {
                scores.push(self.scores[i].clone());
                positive_index.push(self.positive_index[i]);
                row_type.push(self.row_type[i]);
            }
        }
        ScoreMatrix {
            scores,
            positive_index,
            row_type,
        }
    }
}

/// Fraction of rows whose positive ranks in the top k by score. Ties
/// resolve in favor of the lower candidate index, so reports are
/// deterministic.
pub fn recall_at_k(m: &ScoreMatrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("recall_at_k: k must be >= 1".into()));
    }
    if m.n_rows() == 0 {
        return Err(Error::Input("recall_at_k: empty score matrix".into()));
    }
    let mut hits = 0usize;
    for (row, &pos) in m.scores.iter().zip(&m.positive_index) {
        if k > row.len() {
            return Err(Error::Contract(format!(
                "recall_at_k: k={k} exceeds {} candidates",
                row.len()
            )));
        }
        let sp = row[pos];
        let mut rank = 1usize;
        for (j, &s) in row.iter().enumerate() {
            if s > sp || (s == sp && j < pos) {
                rank += 1;
            }
        }
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / m.n_rows() as f64)
}

/// Recall for one slice of queries.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct TypeReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub n_queries: usize,
}

impl TypeReport {
    pub fn sum_metric(&self) -> f64 {
        100.0 * (self.r1 + self.r5 + self.r10)
    }
}

/// Aggregate recall report: overall, text-response (TR) and
/// image-response (IR) slices, and the per-retrieval-type breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct RecallReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// 100 * (R@1 + R@5 + R@10).
    pub sum_metric: f64,
    pub n_queries: usize,
    pub text_response: Option<TypeReport>,
    pub image_response: Option<TypeReport>,
    pub per_type: Vec<(RetrievalType, TypeReport)>,
}

fn slice_report(m: &ScoreMatrix) -> Result<Option<TypeReport>> {
    if m.n_rows() == 0 {
        return Ok(None);
    }
    Ok(Some(TypeReport {
        r1: recall_at_k(m, 1)?,
        r5: recall_at_k(m, 5)?,
        r10: recall_at_k(m, 10)?,
        n_queries: m.n_rows(),
    }))
}

/// Build the full report from a score matrix (the report is exactly
/// `recall_at_k` applied to the matrix and its slices).
pub fn report_from_matrix(m: &ScoreMatrix) -> Result<RecallReport> {
    m.validate()?;
    let overall = slice_report(m)?.ok_or_else(|| Error::Input("evaluate: no queries".into()))?;
    let tr = slice_report(&m.select(|rt| rt.response_modality() == Modality::Text))?;
    let ir = slice_report(&m.select(|rt| rt.response_modality() == Modality::Image))?;
    let mut per_type = Vec::new();
    for rt in RetrievalType::all() {
        if let Some(r) = slice_report(&m.select(|x| x == rt))? {
            per_type.push((rt, r));
        }
    }
    Ok(RecallReport {
        r1: overall.r1,
        r5: overall.r5,
        r10: overall.r10,
        sum_metric: overall.sum_metric(),
        n_queries: overall.n_queries,
        text_response: tr,
        image_response: ir,
        per_type,
    })
}

/// Evaluate retrieval over a split: each query's pool is `pool_size - 1`
/// distractor responses of the target modality drawn from other topics,
/// plus the positive (placed last). Candidate encodings are cached at the
/// backbone level and projected per retrieval type.
pub fn evaluate(
    model: &mut Model,
    dialogs: &[&Dialog],
    pool_size: usize,
    seed: u64,
    use_ctx: bool,
) -> Result<(RecallReport, ScoreMatrix)> {
    if dialogs.is_empty() {
        return Err(Error::Input("evaluate: empty split".into()));
    }
    if pool_size < 10 {
        return Err(Error::Config(format!(
            "evaluate: pool_size {pool_size} < 10 cannot support R@10"
        )));
    }
    let mut backbone_cache: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut scores = Vec::with_capacity(dialogs.len());
    let mut positive_index = Vec::with_capacity(dialogs.len());
    let mut row_type = Vec::with_capacity(dialogs.len());

    for (qi, d) in dialogs.iter().enumerate() {
        let rt = RetrievalType::of_dialog(d);
        let target_mod = d.response.modality;
        // Distractors: same response modality, different topic.
        let candidates: Vec<usize> = dialogs
            .iter()
            .enumerate()
            .filter(|(j, other)| {
                *j != qi
                    && other.response.modality == target_mod
                    && other.topic_id != d.topic_id
            })
            .map(|(j, _)| j)
            .collect();
        if candidates.len() < pool_size - 1 {
            return Err(Error::Input(format!(
                "evaluate: query {qi} has only {} eligible distractors for pool {pool_size}",
                candidates.len()
            )));
        }
        let mut rng = Rng::stream(seed, 0x45564131 ^ ((qi as u64) << 8));
        let chosen = rng.sample_indices(candidates.len(), pool_size - 1);

        let q_back = model.encode_query_backbone(d, use_ctx)?;
        let q_proj = model
            .mop
            .project_query(&model.store, &Tensor::vector(q_back), rt)?;

        let mut row = Vec::with_capacity(pool_size);
        for &ci in &chosen {
            let cand = dialogs[candidates[ci]];
            let enc = match backbone_cache.get(&cand.id) {
                Some(e) => e.clone(),
                None => {
                    let e = model.encode_response_backbone(&cand.response)?;
                    backbone_cache.insert(cand.id, e.clone());
                    e
                }
            };
            let c_proj = model
                .mop
                .project_candidate(&model.store, &Tensor::vector(enc), rt)?;
            row.push(crate::training::similarity(&q_proj, &c_proj)?);
        }
        let pos_enc = match backbone_cache.get(&d.id) {
            Some(e) => e.clone(),
            None => {
                let e = model.encode_response_backbone(&d.response)?;
                backbone_cache.insert(d.id, e.clone());
                e
            }
        };
        let p_proj = model
            .mop
            .project_candidate(&model.store, &Tensor::vector(pos_enc), rt)?;
        row.push(crate::training::similarity(&q_proj, &p_proj)?);

        positive_index.push(row.len() - 1);
        scores.push(row);
        row_type.push(rt);
    }

    let matrix = ScoreMatrix {
        scores,
        positive_index,
        row_type,
    };
    let report = report_from_matrix(&matrix)?;
    Ok((report, matrix))
}
