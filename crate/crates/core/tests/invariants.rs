//! Property tests for the kernel and evaluation invariants.

use proptest::prelude::*;

use promptdial::data::{
    read_jsonl, write_jsonl, Dialog, Modality, Role, Split, Utterance,
};
use promptdial::eval::{recall_at_k, ScoreMatrix};
use promptdial::mop::RetrievalType;
use promptdial::numerics::Tape;

fn finite_f64() -> impl Strategy<Value = f64> {
    -50.0..50.0f64
}

/// Rectangular random matrix with rows in `rows` and columns in `cols`.
fn matrix(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec(finite_f64(), c), r)
    })
}

fn int_matrix(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> impl Strategy<Value = Vec<Vec<i32>>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec(-5..5i32, c), r)
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in matrix(1..5, 2..8),
        shift in -30.0..30.0f64,
    ) {
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let a = tape.input(&[rows.len(), cols], &flat);
        let s = tape.softmax_rows(a).unwrap();
        let sv = tape.values(s).to_vec();
        for r in 0..rows.len() {
            let row = &sv[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        // Adding one constant to a row leaves its softmax unchanged.
        let shifted: Vec<f64> = flat.iter().map(|v| v + shift).collect();
        let b = tape.input(&[rows.len(), cols], &shifted);
        let s2 = tape.softmax_rows(b).unwrap();
        for (x, y) in sv.iter().zip(tape.values(s2)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn mean_pool_preserves_weighted_global_mean(
        rows in matrix(1..12, 1..5),
        l_frac in 0.0..1.0f64,
    ) {
        let cols = rows[0].len();
        let n = rows.len();
        let l = 1 + ((n - 1) as f64 * l_frac) as usize;
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let a = tape.input(&[n, cols], &flat);
        let pooled = tape.mean_pool_segments(a, l).unwrap();
        let pv = tape.values(pooled);
        // Weight each pooled row by its segment size; the weighted mean
        // must equal the plain input mean.
        let bounds = promptdial::numerics::tape::segment_bounds(n, l);
        for j in 0..cols {
            let input_mean: f64 = (0..n).map(|i| flat[i * cols + j]).sum::<f64>() / n as f64;
            let mut weighted = 0.0;
            for s in 0..l {
                weighted += pv[s * cols + j] * (bounds[s + 1] - bounds[s]) as f64;
            }
            weighted /= n as f64;
            prop_assert!((weighted - input_mean).abs() <= 1e-12 * (1.0 + input_mean.abs()));
        }
    }

    #[test]
    fn recall_matches_sort_oracle(
        scores in int_matrix(1..6, 12..20),
        k_seed in 1..12usize,
    ) {
        // Integer scores force plenty of ties.
        let cols = scores[0].len();
        let rows: Vec<Vec<f64>> = scores
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let pos: Vec<usize> = rows.iter().enumerate().map(|(i, _)| i % cols).collect();
        let m = ScoreMatrix {
            scores: rows.clone(),
            positive_index: pos.clone(),
            row_type: vec![RetrievalType::TextText; rows.len()],
        };
        let k = k_seed.min(cols);
        let got = recall_at_k(&m, k).unwrap();
        // Oracle: full sort with the documented tie rule, then scan.
        let mut hits = 0usize;
        for (row, &p) in rows.iter().zip(&pos) {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
            });
            if order.iter().take(k).any(|&j| j == p) {
                hits += 1;
            }
        }
        prop_assert_eq!(got, hits as f64 / rows.len() as f64);
    }

    #[test]
    fn recall_invariant_under_increasing_transform(
        scores in matrix(1..5, 10..16),
    ) {
        let cols = scores[0].len();
        let pos: Vec<usize> = (0..scores.len()).map(|i| (i * 3) % cols).collect();
        let m = ScoreMatrix {
            scores: scores.clone(),
            positive_index: pos.clone(),
            row_type: vec![RetrievalType::ImageImage; scores.len()],
        };
        // Strictly increasing map: rank-level results cannot change.
        let transformed: Vec<Vec<f64>> = scores
            .iter()
            .map(|r| r.iter().map(|&v| (0.3 * v).tanh() * 2.0 + v * 1e-3).collect())
            .collect();
        let mt = ScoreMatrix {
            scores: transformed,
            positive_index: pos,
            row_type: vec![RetrievalType::ImageImage; scores.len()],
        };
        for k in [1usize, 5, 10] {
            prop_assert_eq!(recall_at_k(&m, k).unwrap(), recall_at_k(&mt, k).unwrap());
        }
    }
}

fn arb_utterance() -> impl Strategy<Value = Utterance> {
    let text = (
        prop::bool::ANY,
        prop::collection::vec(0u32..64, 0..6),
    )
        .prop_map(|(user, tokens)| {
            Utterance::text(if user { Role::User } else { Role::System }, tokens)
        });
    let image = (
        prop::bool::ANY,
        prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 3), 2),
    )
        .prop_map(|(user, patches)| {
            Utterance::image(if user { Role::User } else { Role::System }, patches)
        });
    prop_oneof![text, image]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn jsonl_roundtrips_arbitrary_dialogs(
        seeds in prop::collection::vec((arb_utterance(), arb_utterance()), 1..5),
    ) {
        let dialogs: Vec<Dialog> = seeds
            .into_iter()
            .enumerate()
            .map(|(i, (turn, response))| Dialog {
                id: i as u64,
                split: Split::Train,
                turns: vec![turn],
                response,
                topic_id: i as u32,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.jsonl");
        write_jsonl(&dialogs, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        prop_assert_eq!(dialogs, back);
    }
}

#[test]
fn retrieval_type_covers_all_pairs() {
    let mut seen = std::collections::HashSet::new();
    for im in [Modality::Text, Modality::Image] {
        for rm in [Modality::Text, Modality::Image] {
            seen.insert(RetrievalType::new(im, rm));
        }
    }
    assert_eq!(seen.len(), 4);
}
