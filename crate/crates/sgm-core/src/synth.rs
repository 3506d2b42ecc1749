//! Deterministic synthetic corpora for desk-scale training and evaluation.
//!
//! Two flavors share one generator:
//!
//! * **Separable** (default): pair i's visual features sit in its own
//!   well-separated cluster and its caption uses pair-specific words, so a
//!   zero-loss retrieval solution exists.
//! * **Relation-only** (`relation_only = true`): every pair has bitwise-
//!   identical object nodes and caption tokens; pairs differ only in
//!   relationship nodes (labels, features, endpoints) and triplet paths.
//!   Object-only scoring is blind on this corpus by construction.
//!
//! Features are rounded through f32 at generation time so an in-memory
//! corpus is bitwise equal to itself after a save/load round-trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgmError};
use crate::graph::{Corpus, ObjectNode, RelationshipNode, TextualSceneGraph, VisualSceneGraph};

/// Knobs for [`generate_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Feature dimensionality of object and relationship nodes.
    pub d1: usize,
    pub objects_per_pair: usize,
    pub relationships_per_pair: usize,
    /// Make pairs distinguishable by relationships alone.
    pub relation_only: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            d1: 8,
            objects_per_pair: 3,
            relationships_per_pair: 2,
            relation_only: false,
        }
    }
}

/// Minimum L2 distance between any two cluster centers.
const CENTER_SEPARATION: f64 = 0.8;
/// Half-width of the per-coordinate uniform noise around a center.
const NOISE: f64 = 0.02;

/// Deterministic corpus generation; a pure function of `(seed, n_pairs, spec)`.
pub fn generate_synthetic(seed: u64, n_pairs: usize, spec: &SynthSpec) -> Result<Corpus> {
    if n_pairs < 2 {
        return Err(SgmError::contract(format!(
            "synthetic corpus needs at least 2 pairs, got {n_pairs}"
        )));
    }
    if spec.d1 == 0 {
        return Err(SgmError::contract("synthetic d1 must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = if spec.relation_only {
        relation_only_corpus(&mut rng, n_pairs, spec)
    } else {
        separable_corpus(&mut rng, n_pairs, spec)
    };
    corpus.check()?;
    Ok(corpus)
}

/// Each pair gets its own object cluster, relationship cluster, and words.
fn separable_corpus(rng: &mut ChaCha8Rng, n_pairs: usize, spec: &SynthSpec) -> Corpus {
    // A relationship needs two distinct endpoints.
    let opp = if spec.relationships_per_pair > 0 {
        spec.objects_per_pair.max(2)
    } else {
        spec.objects_per_pair.max(1)
    };
    let rpp = spec.relationships_per_pair;
    let d1 = spec.d1;

    let mut centers = CenterPool::new(d1);
    let mut vocab = vec!["<unk>".to_string()];
    for i in 0..n_pairs {
        for j in 0..opp {
            vocab.push(format!("p{i}_obj{j}"));
        }
        for k in 0..rpp {
            vocab.push(format!("p{i}_rel{k}"));
        }
    }

    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let obj_center = centers.draw(rng);
        let rel_center = if rpp > 0 { centers.draw(rng) } else { Vec::new() };

        let objects = (0..opp)
            .map(|j| ObjectNode {
                feature: jitter(rng, &obj_center),
                label_id: i * opp + j,
            })
            .collect();
        let relationships = (0..rpp)
            .map(|k| RelationshipNode {
                feature: jitter(rng, &rel_center),
                label_id: i * rpp + k,
                subject_idx: k % opp,
                object_idx: (k + 1) % opp,
            })
            .collect();

        // The caption names this pair's own words in declaration order.
        let words_per_pair = opp + rpp;
        let first = 1 + i * words_per_pair;
        let tokens: Vec<usize> = (0..words_per_pair).map(|w| first + w).collect();
        // Path for relationship k: subject word, relation word, object word
        // (positions within the sentence).
        let paths = (0..rpp)
            .map(|k| vec![k % opp, opp + k, (k + 1) % opp])
            .collect();

        pairs.push((
            VisualSceneGraph {
                objects,
                relationships,
            },
            TextualSceneGraph {
                tokens,
                triplet_paths: paths,
            },
        ));
    }

    Corpus {
        d1,
        c_o: n_pairs * opp,
        c_r: (n_pairs * rpp).max(1),
        vocab,
        pairs,
    }
}

/// All pairs share the exact same objects and tokens; only relationship
/// nodes and triplet paths distinguish them.
fn relation_only_corpus(rng: &mut ChaCha8Rng, n_pairs: usize, spec: &SynthSpec) -> Corpus {
    let rpp = spec.relationships_per_pair.max(1);
    // Grow the shared object set until every relationship in the corpus can
    // claim a globally distinct ordered endpoint pair.
    let mut opp = spec.objects_per_pair.max(2);
    while opp * (opp - 1) < n_pairs * rpp {
        opp += 1;
    }
    let d1 = spec.d1;

    let mut centers = CenterPool::new(d1);
    // Shared object nodes: centers used verbatim, no per-pair noise.
    let shared_objects: Vec<ObjectNode> = (0..opp)
        .map(|j| ObjectNode {
            feature: round_f32(&centers.draw(rng)),
            label_id: j,
        })
        .collect();
    let shared_tokens: Vec<usize> = (1..=opp).collect();

    let mut vocab = vec!["<unk>".to_string()];
    for j in 0..opp {
        vocab.push(format!("obj{j}"));
    }

    // Lexicographic enumeration of ordered pairs (a, b), a != b.
    let mut endpoint_pairs = Vec::with_capacity(opp * (opp - 1));
    for a in 0..opp {
        for b in 0..opp {
            if a != b {
                endpoint_pairs.push((a, b));
            }
        }
    }

    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let mut relationships = Vec::with_capacity(rpp);
        let mut paths = Vec::with_capacity(rpp);
        for k in 0..rpp {
            let (a, b) = endpoint_pairs[i * rpp + k];
            let center = centers.draw(rng);
            relationships.push(RelationshipNode {
                feature: jitter(rng, &center),
                label_id: i * rpp + k,
                subject_idx: a,
                object_idx: b,
            });
            // Token position j holds the word for object j.
            paths.push(vec![a, b]);
        }
        pairs.push((
            VisualSceneGraph {
                objects: shared_objects.clone(),
                relationships,
            },
            TextualSceneGraph {
                tokens: shared_tokens.clone(),
                triplet_paths: paths,
            },
        ));
    }

    Corpus {
        d1,
        c_o: opp,
        c_r: n_pairs * rpp,
        vocab,
        pairs,
    }
}

/// Rejection sampler keeping all drawn centers `CENTER_SEPARATION` apart.
struct CenterPool {
    d1: usize,
    accepted: Vec<Vec<f64>>,
}

impl CenterPool {
    fn new(d1: usize) -> Self {
        CenterPool {
            d1,
            accepted: Vec::new(),
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let candidate: Vec<f64> = (0..self.d1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ok = self.accepted.iter().all(|c| {
                let d2: f64 = c
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= CENTER_SEPARATION
            });
            if ok {
                self.accepted.push(candidate.clone());
                return candidate;
            }
        }
    }
}

/// Center plus small uniform noise, rounded through f32.
fn jitter(rng: &mut ChaCha8Rng, center: &[f64]) -> Vec<f64> {
    center
        .iter()
        .map(|&c| (c + rng.gen_range(-NOISE..NOISE)) as f32 as f64)
        .collect()
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec::default();
        let a = generate_synthetic(7, 16, &spec).unwrap();
        let b = generate_synthetic(7, 16, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(8, 16, &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_tiny_corpora() {
        assert!(generate_synthetic(1, 1, &SynthSpec::default()).is_err());
        assert!(generate_synthetic(1, 0, &SynthSpec::default()).is_err());
    }

    #[test]
    fn separable_corpus_shape() {
        let spec = SynthSpec::default();
        let c = generate_synthetic(3, 4, &spec).unwrap();
        assert_eq!(c.pairs.len(), 4);
        assert_eq!(c.c_o, 12);
        assert_eq!(c.c_r, 8);
        assert_eq!(c.vocab.len(), 1 + 4 * 5);
        assert_eq!(c.vocab[0], "<unk>");
        for (vsg, tsg) in &c.pairs {
            assert_eq!(vsg.objects.len(), 3);
            assert_eq!(vsg.relationships.len(), 2);
            assert_eq!(tsg.tokens.len(), 5);
            assert_eq!(tsg.triplet_paths.len(), 2);
        }
        // Distinct pairs use distinct label ranges.
        assert_ne!(
            c.pairs[0].0.objects[0].label_id,
            c.pairs[1].0.objects[0].label_id
        );
    }

    #[test]
    fn cluster_separation_beats_intra_cluster_spread() {
        let c = generate_synthetic(11, 10, &SynthSpec::default()).unwrap();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut max_intra: f64 = 0.0;
        let mut min_inter = f64::INFINITY;
        for i in 0..c.pairs.len() {
            let oi = &c.pairs[i].0.objects;
            for a in 0..oi.len() {
                for b in (a + 1)..oi.len() {
                    max_intra = max_intra.max(dist(&oi[a].feature, &oi[b].feature));
                }
            }
            for j in (i + 1)..c.pairs.len() {
                for x in oi {
                    for y in &c.pairs[j].0.objects {
                        min_inter = min_inter.min(dist(&x.feature, &y.feature));
                    }
                }
            }
        }
        assert!(
            min_inter > max_intra,
            "inter {min_inter} should exceed intra {max_intra}"
        );
    }

    #[test]
    fn relation_only_pairs_share_objects_and_tokens() {
        let spec = SynthSpec {
            relation_only: true,
            ..SynthSpec::default()
        };
        let c = generate_synthetic(5, 8, &spec).unwrap();
        let (v0, t0) = &c.pairs[0];
        for (v, t) in &c.pairs[1..] {
            assert_eq!(v.objects, v0.objects, "objects must be bitwise shared");
            assert_eq!(t.tokens, t0.tokens, "tokens must be bitwise shared");
            assert_ne!(v.relationships, v0.relationships);
            assert_ne!(t.triplet_paths, t0.triplet_paths);
        }
        // Globally distinct relationship labels and endpoint pairs.
        let mut labels = Vec::new();
        let mut endpoints = Vec::new();
        for (v, _) in &c.pairs {
            for r in &v.relationships {
                labels.push(r.label_id);
                endpoints.push((r.subject_idx, r.object_idx));
            }
        }
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 16);
        endpoints.sort_unstable();
        endpoints.dedup();
        assert_eq!(endpoints.len(), 16);
    }

    #[test]
    fn relation_only_two_pairs_differ_only_in_relationships() {
        let spec = SynthSpec {
            relation_only: true,
            ..SynthSpec::default()
        };
        let c = generate_synthetic(2, 2, &spec).unwrap();
        let (v0, _) = &c.pairs[0];
        let (v1, _) = &c.pairs[1];
        assert_eq!(v0.objects, v1.objects);
        assert_ne!(
            v0.relationships[0].label_id,
            v1.relationships[0].label_id
        );
    }

    #[test]
    fn features_survive_f32_round_trip() {
        let c = generate_synthetic(9, 4, &SynthSpec::default()).unwrap();
        for (vsg, _) in &c.pairs {
            for o in &vsg.objects {
                for &x in &o.feature {
                    assert_eq!(x, x as f32 as f64);
                }
            }
            for r in &vsg.relationships {
                for &x in &r.feature {
                    assert_eq!(x, x as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn zero_relationships_flavor_validates() {
        let spec = SynthSpec {
            relationships_per_pair: 0,
            ..SynthSpec::default()
        };
        let c = generate_synthetic(4, 3, &spec).unwrap();
        assert!(c.pairs.iter().all(|(v, t)| {
            v.relationships.is_empty() && t.triplet_paths.is_empty()
        }));
        assert_eq!(c.c_r, 1);
    }
}
