//! Two-level graph similarity and the triplet ranking losses.
//!
//! The object-level score S^o dots every word row against every object row,
//! takes each word's best match, and averages over words. The
//! relationship-level score S^r does the same for paths against
//! relationship rows. S = S^o + S^r, with S^r defined as zero whenever
//! either side has no relationships. Scores are bare dot products; an
//! optional L2 row normalization sits behind a flag and is off by default.

use crate::error::{Result, SgmError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tsg::{TextualFeatureGraph, TsgVars};
use crate::vsg::{VisualFeatureGraph, VsgVars};

/// A pair's score with the evidence that produced it: the two score
/// matrices (textual rows × visual rows) and each textual row's best
/// visual match.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBreakdown {
    pub s_object: f64,
    pub s_relationship: f64,
    pub s_total: f64,
    /// N_w × N_o
    pub object_score_matrix: Tensor,
    /// N_p × N_r (0×0 when either side is empty)
    pub relationship_score_matrix: Tensor,
    /// Per word, the argmax object column (ties → lowest index).
    pub object_argmax: Vec<usize>,
    /// Per path, the argmax relationship column.
    pub relationship_argmax: Vec<usize>,
}

/// Differentiable pair score on a tape. `s_relationship` is `None` exactly
/// when the relationship term is structurally zero (either side empty).
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub s_object: Var,
    pub s_relationship: Option<Var>,
    pub s_total: Var,
}

/// Builds S = S^o + S^r between an encoded visual graph and an encoded
/// textual graph, differentiable through the per-row argmax routing.
pub fn score_pair_on_tape(
    tape: &mut Tape,
    vfg: &VsgVars,
    tfg: &TsgVars,
    normalize: bool,
) -> Result<ScoreVars> {
    if tfg.word_rows.is_empty() || vfg.object_rows.is_empty() {
        return Err(SgmError::contract(
            "score_pair needs at least one word and one object",
        ));
    }
    check_dims_on_tape(tape, vfg, tfg)?;

    let words = tape.stack_rows(&tfg.word_rows)?;
    let objects = tape.stack_rows(&vfg.object_rows)?;
    let (words, objects) = if normalize {
        (tape.normalize_rows(words)?, tape.normalize_rows(objects)?)
    } else {
        (words, objects)
    };
    let obj_scores = tape.matmul_nt(words, objects)?;
    let (row_best, _) = tape.row_max(obj_scores)?;
    let s_object = tape.mean_all(row_best)?;

    let s_relationship = if !tfg.path_rows.is_empty() && !vfg.relationship_rows.is_empty() {
        let paths = tape.stack_rows(&tfg.path_rows)?;
        let rels = tape.stack_rows(&vfg.relationship_rows)?;
        let (paths, rels) = if normalize {
            (tape.normalize_rows(paths)?, tape.normalize_rows(rels)?)
        } else {
            (paths, rels)
        };
        let rel_scores = tape.matmul_nt(paths, rels)?;
        let (row_best, _) = tape.row_max(rel_scores)?;
        Some(tape.mean_all(row_best)?)
    } else {
        None
    };

    let s_total = match s_relationship {
        Some(sr) => tape.add(s_object, sr)?,
        None => s_object,
    };
    Ok(ScoreVars {
        s_object,
        s_relationship,
        s_total,
    })
}

fn check_dims_on_tape(tape: &Tape, vfg: &VsgVars, tfg: &TsgVars) -> Result<()> {
    let d_w = tape.value(tfg.word_rows[0]).len();
    let d_o = tape.value(vfg.object_rows[0]).len();
    if d_w != d_o {
        return Err(SgmError::dimension(
            "score_pair",
            format!("textual D={d_w} vs visual D={d_o}"),
        ));
    }
    Ok(())
}

/// Plain (non-differentiable) pair score over materialized feature graphs.
/// This is the scoring path used by evaluation and the `score` command.
pub fn score_pair(
    vfg: &VisualFeatureGraph,
    tfg: &TextualFeatureGraph,
    normalize: bool,
) -> Result<SimilarityBreakdown> {
    let n_w = tfg.word_feats.rows();
    let n_o = vfg.object_feats.rows();
    if n_w == 0 || n_o == 0 {
        return Err(SgmError::contract(
            "score_pair needs at least one word and one object",
        ));
    }
    if tfg.word_feats.cols() != vfg.object_feats.cols() {
        return Err(SgmError::dimension(
            "score_pair",
            format!(
                "textual D={} vs visual D={}",
                tfg.word_feats.cols(),
                vfg.object_feats.cols()
            ),
        ));
    }

    let (obj_matrix, object_argmax, s_object) =
        level_score(&tfg.word_feats, &vfg.object_feats, normalize);

    let n_p = tfg.path_feats.rows();
    let n_r = vfg.relationship_feats.rows();
    let (rel_matrix, relationship_argmax, s_relationship) = if n_p > 0 && n_r > 0 {
        level_score(&tfg.path_feats, &vfg.relationship_feats, normalize)
    } else {
        (Tensor::zeros(vec![0, 0]), Vec::new(), 0.0)
    };

    Ok(SimilarityBreakdown {
        s_object,
        s_relationship,
        s_total: s_object + s_relationship,
        object_score_matrix: obj_matrix,
        relationship_score_matrix: rel_matrix,
        object_argmax,
        relationship_argmax,
    })
}

/// Score matrix, per-row argmax, and mean of row maxima for one level.
fn level_score(textual: &Tensor, visual: &Tensor, normalize: bool) -> (Tensor, Vec<usize>, f64) {
    let (rows, cols, d) = (textual.rows(), visual.rows(), textual.cols());
    let t_rows = maybe_normalized(textual, normalize);
    let v_rows = maybe_normalized(visual, normalize);
    let mut matrix = vec![0.0; rows * cols];
    let mut argmax = Vec::with_capacity(rows);
    let mut total = 0.0;
    for i in 0..rows {
        let ti = &t_rows[i * d..(i + 1) * d];
        let (mut bi, mut bv) = (0usize, f64::NEG_INFINITY);
        for j in 0..cols {
            let vj = &v_rows[j * d..(j + 1) * d];
            let dot: f64 = ti.iter().zip(vj).map(|(a, b)| a * b).sum();
            matrix[i * cols + j] = dot;
            if dot > bv {
                bi = j;
                bv = dot;
            }
        }
        argmax.push(bi);
        total += bv;
    }
    (
        Tensor::new(vec![rows, cols], matrix),
        argmax,
        total / rows as f64,
    )
}

fn maybe_normalized(m: &Tensor, normalize: bool) -> Vec<f64> {
    if !normalize {
        return m.values.clone();
    }
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = m.values.clone();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// Sum-over-all-negatives ranking loss (see [`Tape::triplet_all`]).
pub fn triplet_loss_all(tape: &mut Tape, scores: Var, margin: f64) -> Result<Var> {
    tape.triplet_all(scores, margin)
}

/// Hardest-negative ranking loss (see [`Tape::triplet_hardest`]).
pub fn triplet_loss_hardest(tape: &mut Tape, scores: Var, margin: f64) -> Result<Var> {
    tape.triplet_hardest(scores, margin)
}
