//! Retrieval evaluation: R@k and Medr over a pairwise score matrix.
//!
//! The corpus is scored into an n×n matrix with entry (i, j) = S(image i,
//! caption j). Caption retrieval ranks each row (image query over caption
//! gallery); image retrieval ranks each column. Ground truth for query i is
//! gallery item i. Ties rank the lower gallery index first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgmError};
use crate::graph::Corpus;
use crate::matching::score_pair;
use crate::model::SgmModel;
use crate::tensor::Tensor;

/// Which side of the pair acts as the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Image queries ranked over the caption gallery (matrix rows).
    #[serde(rename = "caption-retrieval")]
    CaptionRetrieval,
    /// Caption queries ranked over the image gallery (matrix columns).
    #[serde(rename = "image-retrieval")]
    ImageRetrieval,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::CaptionRetrieval => "caption-retrieval",
            Direction::ImageRetrieval => "image-retrieval",
        })
    }
}

impl FromStr for Direction {
    type Err = SgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "caption-retrieval" | "caption" | "i2t" => Ok(Direction::CaptionRetrieval),
            "image-retrieval" | "image" | "t2i" => Ok(Direction::ImageRetrieval),
            other => Err(SgmError::contract(format!(
                "unknown retrieval direction {other:?} (expected caption-retrieval or image-retrieval)"
            ))),
        }
    }
}

/// Metrics for one direction plus the queries × gallery matrix that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// k → percentage of queries whose ground truth ranked within top k.
    pub r_at: BTreeMap<usize, f64>,
    pub medr: f64,
    /// Queries × gallery scores (already transposed for image retrieval).
    pub score_matrix: Tensor,
}

/// The flat shape written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub direction: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
}

impl RetrievalReport {
    pub fn r_at(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or(0.0)
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            direction: self.direction.to_string(),
            r1: self.r_at(1),
            r5: self.r_at(5),
            r10: self.r_at(10),
            medr: self.medr,
        }
    }
}

/// 1-based rank of `truth_idx` when the row is sorted by descending score,
/// ties broken toward the lower gallery index.
pub fn rank_of_ground_truth(scores: &[f64], truth_idx: usize) -> usize {
    let truth = scores[truth_idx];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > truth || (s == truth && j < truth_idx) {
            rank += 1;
        }
    }
    rank
}

/// Computes R@{1,5,10} and Medr for one direction of a square pairwise
/// score matrix (entry (i, j) = S(image i, caption j)).
pub fn metrics_from_matrix(pair_scores: &Tensor, direction: Direction) -> Result<RetrievalReport> {
    let n = pair_scores.rows();
    if n == 0 || pair_scores.cols() != n {
        return Err(SgmError::dimension(
            "evaluate",
            format!("score matrix must be square and non-empty, got {:?}", pair_scores.shape),
        ));
    }

    // Queries-as-rows view for the requested direction.
    let mut matrix = Vec::with_capacity(n * n);
    for q in 0..n {
        for g in 0..n {
            matrix.push(match direction {
                Direction::CaptionRetrieval => pair_scores.at(q, g),
                Direction::ImageRetrieval => pair_scores.at(g, q),
            });
        }
    }

    let ranks: Vec<usize> = (0..n)
        .map(|q| rank_of_ground_truth(&matrix[q * n..(q + 1) * n], q))
        .collect();

    let mut r_at = BTreeMap::new();
    for k in [1, 5, 10] {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        r_at.insert(k, 100.0 * hits as f64 / n as f64);
    }

    Ok(RetrievalReport {
        direction,
        r_at,
        medr: median_of_ranks(&ranks),
        score_matrix: Tensor::new(vec![n, n], matrix),
    })
}

/// Median of 1-based ranks; an even count averages the two central ranks.
fn median_of_ranks(ranks: &[usize]) -> f64 {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Encodes every pair once and scores all image–caption combinations:
/// entry (i, j) = S(visual graph i, textual graph j).
pub fn pair_score_matrix(model: &SgmModel, corpus: &Corpus, threads: usize) -> Result<Tensor> {
    let encoded = model.encode_corpus(corpus, threads)?;
    let n = encoded.len();
    if n == 0 {
        return Err(SgmError::contract("cannot evaluate an empty corpus"));
    }
    let normalize = model.config.l2_normalize;
    let mut values = vec![0.0; n * n];
    for (j, (_, tfg)) in encoded.iter().enumerate() {
        for (i, (vfg, _)) in encoded.iter().enumerate() {
            values[i * n + j] = score_pair(vfg, tfg, normalize)?.s_total;
        }
    }
    Ok(Tensor::new(vec![n, n], values))
}

/// Full evaluation in one direction.
pub fn evaluate(
    model: &SgmModel,
    corpus: &Corpus,
    direction: Direction,
    threads: usize,
) -> Result<RetrievalReport> {
    let scores = pair_score_matrix(model, corpus, threads)?;
    metrics_from_matrix(&scores, direction)
}

/// Both directions from a single encode + score pass.
pub fn evaluate_both(
    model: &SgmModel,
    corpus: &Corpus,
    threads: usize,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let scores = pair_score_matrix(model, corpus, threads)?;
    Ok((
        metrics_from_matrix(&scores, Direction::CaptionRetrieval)?,
        metrics_from_matrix(&scores, Direction::ImageRetrieval)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sort-based reference: order gallery by (score desc, index asc).
    fn rank_oracle(scores: &[f64], truth: usize) -> usize {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx.iter().position(|&j| j == truth).unwrap() + 1
    }

    #[test]
    fn rank_hand_cases() {
        assert_eq!(rank_of_ground_truth(&[0.1, 0.9, 0.5], 1), 1);
        assert_eq!(rank_of_ground_truth(&[0.5, 0.5], 1), 2);
        assert_eq!(rank_of_ground_truth(&[0.5, 0.5], 0), 1);
    }

    #[test]
    fn identity_matrix_is_perfect_retrieval() {
        let n = 6;
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            vals[i * n + i] = 1.0;
        }
        let m = Tensor::new(vec![n, n], vals);
        for dir in [Direction::CaptionRetrieval, Direction::ImageRetrieval] {
            let r = metrics_from_matrix(&m, dir).unwrap();
            assert_eq!(r.r_at(1), 100.0);
            assert_eq!(r.medr, 1.0);
        }
    }

    #[test]
    fn reversed_gallery_matches_brute_force() {
        // Query i scores gallery j as 10 - |i - (9 - j)|: best match is the
        // reversed index, so ground truth sits |2i - 9| places off the top.
        let n = 10;
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                vals[i * n + j] = 10.0 - (i as f64 - (9.0 - j as f64)).abs();
            }
        }
        let m = Tensor::new(vec![n, n], vals.clone());
        let r = metrics_from_matrix(&m, Direction::CaptionRetrieval).unwrap();
        let oracle_ranks: Vec<usize> = (0..n)
            .map(|i| rank_oracle(&vals[i * n..(i + 1) * n], i))
            .collect();
        let mut sorted = oracle_ranks.clone();
        sorted.sort_unstable();
        let expected_medr = (sorted[4] + sorted[5]) as f64 / 2.0;
        assert_eq!(r.medr, expected_medr);
        assert_eq!(r.r_at(1), 0.0);
    }

    #[test]
    fn even_query_count_averages_central_ranks() {
        // Ranks come out [1, 2, 1, 4] → sorted [1, 1, 2, 4] → medr 1.5.
        assert_eq!(median_of_ranks(&[1, 2, 1, 4]), 1.5);
        assert_eq!(median_of_ranks(&[3, 1, 2]), 2.0);
    }

    #[test]
    fn random_matrix_chance_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100;
        let mut total_r1 = 0.0;
        for _ in 0..50 {
            let vals: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let m = Tensor::new(vec![n, n], vals);
            let r = metrics_from_matrix(&m, Direction::CaptionRetrieval).unwrap();
            assert!(r.r_at(1) <= 5.0, "chance-level R@1 too high: {}", r.r_at(1));
            total_r1 += r.r_at(1);
        }
        let mean = total_r1 / 50.0;
        assert!((0.0..=5.0).contains(&mean), "mean R@1 {mean}");
    }

    #[test]
    fn image_retrieval_reads_columns() {
        // Column 0 peaks at row 1: caption query 0 ranks image 1 first.
        let m = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.8, 0.2]);
        let cap = metrics_from_matrix(&m, Direction::CaptionRetrieval).unwrap();
        let img = metrics_from_matrix(&m, Direction::ImageRetrieval).unwrap();
        assert_eq!(cap.r_at(1), 0.0);
        assert_eq!(img.r_at(1), 0.0);
        assert_eq!(img.score_matrix.at(0, 1), 0.8);
    }

    #[test]
    fn direction_strings_round_trip() {
        for dir in [Direction::CaptionRetrieval, Direction::ImageRetrieval] {
            assert_eq!(dir.to_string().parse::<Direction>().unwrap(), dir);
        }
        assert!("sideways".parse::<Direction>().is_err());
        let s = serde_json::to_string(&Direction::CaptionRetrieval).unwrap();
        assert_eq!(s, "\"caption-retrieval\"");
    }

    #[test]
    fn summary_has_flat_fields() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let r = metrics_from_matrix(&m, Direction::ImageRetrieval).unwrap();
        let json = serde_json::to_value(r.summary()).unwrap();
        assert_eq!(json["direction"], "image-retrieval");
        assert_eq!(json["r1"], 100.0);
        assert_eq!(json["medr"], 1.0);
    }

    proptest! {
        #[test]
        fn ranks_match_sort_oracle(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = rng.gen_range(1..=20);
            // Coarse grid makes ties common, exercising the tie rule.
            let scores: Vec<f64> = (0..len)
                .map(|_| (rng.gen_range(0..10) as f64) / 10.0)
                .collect();
            let truth = rng.gen_range(0..len);
            prop_assert_eq!(rank_of_ground_truth(&scores, truth), rank_oracle(&scores, truth));
        }

        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=15);
            let vals: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = Tensor::new(vec![n, n], vals);
            for dir in [Direction::CaptionRetrieval, Direction::ImageRetrieval] {
                let r = metrics_from_matrix(&m, dir).unwrap();
                prop_assert!(r.r_at(1) <= r.r_at(5) + 1e-12);
                prop_assert!(r.r_at(5) <= r.r_at(10) + 1e-12);
                prop_assert!(r.medr >= 1.0);
            }
        }

        #[test]
        fn dominated_gallery_item_changes_no_rank(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = rng.gen_range(1..=10);
            let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
            let truth = rng.gen_range(0..len);
            let base = rank_of_ground_truth(&scores, truth);
            let mut extended = scores.clone();
            extended.push(-10.0);
            prop_assert_eq!(rank_of_ground_truth(&extended, truth), base);
        }
    }
}
