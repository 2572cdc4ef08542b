//! Mixture of projection: hard-routed affine experts mapping backbone
//! outputs into the shared retrieval space, one expert per retrieval
//! type. Each expert keeps separate query-side and candidate-side maps.

use serde::{Deserialize, Serialize};

use crate::data::{Dialog, Modality};
use crate::error::{Error, Result};
use crate::model::{Group, ParamId, ParamStore};
use crate::numerics::{Rng, Tape, Tensor, Var};

/// (modality of the current input, modality of the candidate response).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalType {
    #[serde(rename = "tt")]
    TextText,
    #[serde(rename = "tv")]
    TextImage,
    #[serde(rename = "vt")]
    ImageText,
    #[serde(rename = "vv")]
    ImageImage,
}

impl RetrievalType {
    pub fn new(input: Modality, response: Modality) -> Self {
        match (input, response) {
            (Modality::Text, Modality::Text) => RetrievalType::TextText,
            (Modality::Text, Modality::Image) => RetrievalType::TextImage,
            (Modality::Image, Modality::Text) => RetrievalType::ImageText,
            (Modality::Image, Modality::Image) => RetrievalType::ImageImage,
        }
    }

    pub fn of_dialog(d: &Dialog) -> Self {
        Self::new(d.current_input().modality, d.response.modality)
    }

    pub fn all() -> [RetrievalType; 4] {
        [
            RetrievalType::TextText,
            RetrievalType::TextImage,
            RetrievalType::ImageText,
            RetrievalType::ImageImage,
        ]
    }

    pub fn input_modality(&self) -> Modality {
        match self {
            RetrievalType::TextText | RetrievalType::TextImage => Modality::Text,
            RetrievalType::ImageText | RetrievalType::ImageImage => Modality::Image,
        }
    }

    pub fn response_modality(&self) -> Modality {
        match self {
            RetrievalType::TextText | RetrievalType::ImageText => Modality::Text,
            RetrievalType::TextImage | RetrievalType::ImageImage => Modality::Image,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            RetrievalType::TextText => "tt",
            RetrievalType::TextImage => "tv",
            RetrievalType::ImageText => "vt",
            RetrievalType::ImageImage => "vv",
        }
    }

    fn index(&self) -> usize {
        match self {
            RetrievalType::TextText => 0,
            RetrievalType::TextImage => 1,
            RetrievalType::ImageText => 2,
            RetrievalType::ImageImage => 3,
        }
    }
}

/// One expert: separate affine maps for the query and candidate sides.
pub struct ExpertParams {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub cand_w: ParamId,
    pub cand_b: ParamId,
}

/// The expert bank. Four experts normally; a single shared one under the
/// "-MoP" ablation.
pub struct MopParams {
    experts: Vec<ExpertParams>,
    pub shared: bool,
    pub d_model: usize,
    pub proj_dim: usize,
}

impl MopParams {
    pub fn build(
        store: &mut ParamStore,
        d_model: usize,
        proj_dim: usize,
        shared: bool,
        rng: &mut Rng,
    ) -> Self {
        let names: &[&str] = if shared { &["shared"] } else { &["tt", "tv", "vt", "vv"] };
        // Small init keeps initial scores near zero, so a fresh model's
        // contrastive loss sits at ln(batch) and gradients stay tame.
        let experts = names
            .iter()
            .map(|tag| ExpertParams {
                query_w: store.push(
                    format!("mop.{tag}.query.w"),
                    Group::Mop,
                    true,
                    Tensor::randn(vec![proj_dim, d_model], 0.02, rng),
                ),
                query_b: store.push(format!("mop.{tag}.query.b"), Group::Mop, false, Tensor::zeros(vec![proj_dim])),
                cand_w: store.push(
                    format!("mop.{tag}.cand.w"),
                    Group::Mop,
                    true,
                    Tensor::randn(vec![proj_dim, d_model], 0.02, rng),
                ),
                cand_b: store.push(format!("mop.{tag}.cand.b"), Group::Mop, false, Tensor::zeros(vec![proj_dim])),
            })
            .collect();
        MopParams {
            experts,
            shared,
            d_model,
            proj_dim,
        }
    }

    /// Total, deterministic routing: distinct types map to distinct
    /// experts (unless the bank is shared).
    pub fn select_expert(&self, rt: RetrievalType) -> &ExpertParams {
        if self.shared {
            &self.experts[0]
        } else {
            &self.experts[rt.index()]
        }
    }

    /// Stable identifier of the expert a type routes to.
    pub fn expert_index(&self, rt: RetrievalType) -> usize {
        if self.shared {
            0
        } else {
            rt.index()
        }
    }

    fn project_rows(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        w_id: ParamId,
        b_id: ParamId,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::Shape {
                op: "mop_project",
                lhs: shape,
                rhs: vec![self.d_model],
            });
        }
        let w = store.leaf(tape, w_id);
        let b = store.leaf(tape, b_id);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row(y, b)
    }

    /// Project query-side rows (n x d_model) into the retrieval space.
    pub fn project_query_rows(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, rt: RetrievalType) -> Result<Var> {
        let e = self.select_expert(rt);
        let (w, b) = (e.query_w, e.query_b);
        self.project_rows(tape, store, x, w, b)
    }

    /// Project candidate-side rows (n x d_model) into the retrieval space.
    pub fn project_candidate_rows(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, rt: RetrievalType) -> Result<Var> {
        let e = self.select_expert(rt);
        let (w, b) = (e.cand_w, e.cand_b);
        self.project_rows(tape, store, x, w, b)
    }

    fn project_vec(&self, store: &ParamStore, x: &[f64], w_id: ParamId, b_id: ParamId) -> Result<Vec<f64>> {
        if x.len() != self.d_model {
            return Err(Error::Shape {
                op: "mop_project",
                lhs: vec![x.len()],
                rhs: vec![self.d_model],
            });
        }
        let w = store.tensor(w_id).values();
        let b = store.tensor(b_id).values();
        let mut out = b.to_vec();
        for i in 0..self.proj_dim {
            let wrow = &w[i * self.d_model..(i + 1) * self.d_model];
            out[i] += wrow.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
        }
        Ok(out)
    }

    /// Gradient-free query projection of a plain vector.
    pub fn project_query(&self, store: &ParamStore, x: &Tensor, rt: RetrievalType) -> Result<Tensor> {
        let e = self.select_expert(rt);
        let out = self.project_vec(store, x.values(), e.query_w, e.query_b)?;
        Ok(Tensor::vector(out))
    }

    /// Gradient-free candidate projection of a plain vector.
    pub fn project_candidate(&self, store: &ParamStore, x: &Tensor, rt: RetrievalType) -> Result<Tensor> {
        let e = self.select_expert(rt);
        let out = self.project_vec(store, x.values(), e.cand_w, e.cand_b)?;
        Ok(Tensor::vector(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(shared: bool) -> (ParamStore, MopParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::from_seed(21);
        let mop = MopParams::build(&mut store, 8, 4, shared, &mut rng);
        (store, mop)
    }

    #[test]
    fn four_distinct_experts() {
        let (_store, mop) = build(false);
        let idx: Vec<usize> = RetrievalType::all().iter().map(|rt| mop.expert_index(*rt)).collect();
        let mut uniq = idx.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 4, "all four types get their own expert");
        // Same type twice routes identically.
        assert_eq!(
            mop.expert_index(RetrievalType::TextImage),
            mop.expert_index(RetrievalType::TextImage)
        );
    }

    #[test]
    fn shared_bank_routes_everything_to_one_expert() {
        let (_store, mop) = build(true);
        for rt in RetrievalType::all() {
            assert_eq!(mop.expert_index(rt), 0);
        }
    }

    #[test]
    fn zero_vector_zero_bias_projects_to_zero() {
        let (store, mop) = build(false);
        let x = Tensor::vector(vec![0.0; 8]);
        let y = mop.project_query(&store, &x, RetrievalType::TextText).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_like_projection_is_passthrough() {
        let mut store = ParamStore::new();
        let mut rng = Rng::from_seed(1);
        let mop = MopParams::build(&mut store, 4, 4, false, &mut rng);
        let w = store.by_name("mop.tt.query.w").unwrap();
        let t = store.tensor_mut(w);
        t.values_mut().fill(0.0);
        for i in 0..4 {
            t.values_mut()[i * 4 + i] = 1.0;
        }
        let x = Tensor::vector(vec![1.0, -2.0, 3.0, -4.0]);
        let y = mop.project_query(&store, &x, RetrievalType::TextText).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn affine_identity() {
        let (store, mop) = build(false);
        let mut rng = Rng::from_seed(77);
        for rt in RetrievalType::all() {
            let a: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let f = |v: &[f64]| {
                mop.project_candidate(&store, &Tensor::vector(v.to_vec()), rt)
                    .unwrap()
                    .values()
                    .to_vec()
            };
            let lhs = f(&sum);
            let (fa, fb, f0) = (f(&a), f(&b), f(&vec![0.0; 8]));
            for i in 0..4 {
                let rhs = fa[i] + fb[i] - f0[i];
                assert!((lhs[i] - rhs).abs() < 1e-12, "affine identity violated");
            }
        }
    }

    #[test]
    fn distinct_experts_distinct_projections() {
        let (store, mop) = build(false);
        let x = Tensor::vector(vec![0.5; 8]);
        let mut outs: Vec<Vec<f64>> = Vec::new();
        for rt in RetrievalType::all() {
            outs.push(mop.project_candidate(&store, &x, rt).unwrap().values().to_vec());
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(outs[i], outs[j], "experts {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn tape_and_plain_projection_agree() {
        let (mut store, mop) = build(false);
        let x: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 1.0).collect();
        let plain = mop
            .project_query(&store, &Tensor::vector(x.clone()), RetrievalType::ImageText)
            .unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&[1, 8], &x);
        let y = mop
            .project_query_rows(&mut tape, &mut store, xv, RetrievalType::ImageText)
            .unwrap();
        assert_eq!(tape.values(y), plain.values());
    }

    #[test]
    fn projection_rejects_wrong_width() {
        let (store, mop) = build(false);
        let x = Tensor::vector(vec![0.0; 5]);
        assert!(mop.project_query(&store, &x, RetrievalType::TextText).is_err());
    }
}
