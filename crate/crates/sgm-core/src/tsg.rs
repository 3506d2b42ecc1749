//! Textual scene-graph encoder: word-level bi-GRU over the word-order path,
//! and path-level bi-GRU over each semantic relationship path.
//!
//! Both bi-GRUs start from zero hidden states in both directions and average
//! the two directions. Word rows average the two per-position hidden states;
//! path rows average the two final hidden states. The no-context ablation
//! replaces the word-level recurrence with a shared per-word affine + tanh.

use crate::error::{Result, SgmError};
use crate::graph::{TextualSceneGraph, Violation};
use crate::model::{BoundGruCell, BoundModel, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vsg::stack_values;

/// Encoded textual graph: one D-dim row per word and per relationship path.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualFeatureGraph {
    /// N_w × D
    pub word_feats: Tensor,
    /// N_p × D (N_p = 0 for modes without textual relationships)
    pub path_feats: Tensor,
}

/// Tape handles for an encoded textual graph.
#[derive(Debug, Clone)]
pub struct TsgVars {
    pub word_rows: Vec<Var>,
    pub path_rows: Vec<Var>,
}

impl TsgVars {
    pub fn materialize(&self, tape: &Tape) -> TextualFeatureGraph {
        let d = self
            .word_rows
            .first()
            .map(|&v| tape.value(v).len())
            .unwrap_or(0);
        TextualFeatureGraph {
            word_feats: stack_values(tape, &self.word_rows, d),
            path_feats: stack_values(tape, &self.path_rows, d),
        }
    }
}

/// One step of the canonical gated recurrent unit:
/// z = σ(W_z·x + U_z·h + b_z), r = σ(W_r·x + U_r·h + b_r),
/// ĥ = tanh(W_h·x + U_h·(r⊙h) + b_h), h' = (1−z)⊙h + z⊙ĥ.
pub fn gru_cell(tape: &mut Tape, cell: &BoundGruCell, x: Var, h_prev: Var) -> Result<Var> {
    let z = gate(tape, cell.w_z, cell.u_z, cell.b_z, x, h_prev, true)?;
    let r = gate(tape, cell.w_r, cell.u_r, cell.b_r, x, h_prev, true)?;
    let rh = tape.mul_elem(r, h_prev)?;
    let cand = gate(tape, cell.w_h, cell.u_h, cell.b_h, x, rh, false)?;
    // h + z ⊙ (ĥ − h) ≡ (1−z)⊙h + z⊙ĥ
    let neg_h = tape.scale(h_prev, -1.0);
    let delta = tape.add(cand, neg_h)?;
    let gated = tape.mul_elem(z, delta)?;
    tape.add(h_prev, gated)
}

fn gate(
    tape: &mut Tape,
    w: Var,
    u: Var,
    b: Var,
    x: Var,
    h: Var,
    sigmoid: bool,
) -> Result<Var> {
    let wx = tape.matvec(w, x)?;
    let uh = tape.matvec(u, h)?;
    let lin = tape.add(wx, uh)?;
    let lin = tape.add(lin, b)?;
    Ok(if sigmoid {
        tape.sigmoid(lin)
    } else {
        tape.tanh(lin)
    })
}

/// Rolls one GRU direction over `inputs`, returning the hidden state after
/// each step. The initial hidden state is zero.
fn roll(
    tape: &mut Tape,
    cell: &BoundGruCell,
    inputs: &[Var],
    d_out: usize,
) -> Result<Vec<Var>> {
    let mut h = tape.constant(Tensor::zeros(vec![d_out]));
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = gru_cell(tape, cell, x, h)?;
        states.push(h);
    }
    Ok(states)
}

fn embed_token(tape: &mut Tape, bound: &BoundModel, token: usize) -> Result<Var> {
    tape.select_column(bound.w_e, token)
}

fn check_tokens(tokens: &[usize], vocab_size: usize) -> Result<()> {
    let mut violations = Vec::new();
    if tokens.is_empty() {
        violations.push(Violation {
            pair: None,
            field: "tokens".into(),
            detail: "sentence needs at least one word".into(),
        });
    }
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab_size {
            violations.push(Violation {
                pair: None,
                field: format!("tokens[{i}]"),
                detail: format!("word id {} out of vocabulary [0, {})", t, vocab_size),
            });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(SgmError::Validation(violations))
    }
}

/// Encodes the word-order path. Row i is the average of the forward hidden
/// state after consuming token i and the backward hidden state after
/// consuming tokens N_w−1..i. In the no-context mode each row is instead a
/// shared affine projection + tanh of that word's embedding alone.
pub fn encode_word_path(
    tape: &mut Tape,
    bound: &BoundModel,
    tokens: &[usize],
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    check_tokens(tokens, tape.value(bound.w_e).cols())?;
    let embeds = tokens
        .iter()
        .map(|&t| embed_token(tape, bound, t))
        .collect::<Result<Vec<_>>>()?;

    if !cfg.mode.uses_word_context() {
        return embeds
            .into_iter()
            .map(|e| {
                let lin = tape.matvec(bound.iso_w, e)?;
                let biased = tape.add(lin, bound.iso_b)?;
                Ok(tape.tanh(biased))
            })
            .collect();
    }

    let fwd = roll(tape, &bound.gru_w.fwd, &embeds, cfg.d_out)?;
    let rev_inputs: Vec<Var> = embeds.iter().rev().copied().collect();
    let bwd_rev = roll(tape, &bound.gru_w.bwd, &rev_inputs, cfg.d_out)?;
    let n = tokens.len();
    (0..n)
        .map(|i| {
            // bwd_rev[k] is the state after consuming tokens n−1..n−1−k,
            // so position i corresponds to k = n−1−i.
            let sum = tape.add(fwd[i], bwd_rev[n - 1 - i])?;
            Ok(tape.scale(sum, 0.5))
        })
        .collect()
}

/// Encodes each semantic relationship path with the path-level bi-GRU,
/// taking the last hidden state of each direction and averaging. Inputs are
/// the raw word embeddings of the path's tokens, or the word-level hidden
/// rows when `cfg.paths_from_hidden` is set. Modes without textual
/// relationships return an empty list.
pub fn encode_relationship_paths(
    tape: &mut Tape,
    bound: &BoundModel,
    tsg: &TextualSceneGraph,
    word_rows: &[Var],
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    if !cfg.mode.uses_textual_relationships() {
        return Ok(Vec::new());
    }
    let mut violations = Vec::new();
    for (i, path) in tsg.triplet_paths.iter().enumerate() {
        if path.len() < 2 {
            violations.push(Violation {
                pair: None,
                field: format!("paths[{i}]"),
                detail: format!("length {} < 2", path.len()),
            });
        }
        for (j, &idx) in path.iter().enumerate() {
            if idx >= tsg.tokens.len() {
                violations.push(Violation {
                    pair: None,
                    field: format!("paths[{i}][{j}]"),
                    detail: format!(
                        "token index {} out of range [0, {})",
                        idx,
                        tsg.tokens.len()
                    ),
                });
            }
        }
    }
    if !violations.is_empty() {
        return Err(SgmError::Validation(violations));
    }

    let mut rows = Vec::with_capacity(tsg.triplet_paths.len());
    for path in &tsg.triplet_paths {
        let inputs = if cfg.paths_from_hidden {
            path.iter().map(|&idx| word_rows[idx]).collect::<Vec<_>>()
        } else {
            path.iter()
                .map(|&idx| embed_token(tape, bound, tsg.tokens[idx]))
                .collect::<Result<Vec<_>>>()?
        };
        let fwd = roll(tape, &bound.gru_p.fwd, &inputs, cfg.d_out)?;
        let rev_inputs: Vec<Var> = inputs.iter().rev().copied().collect();
        let bwd = roll(tape, &bound.gru_p.bwd, &rev_inputs, cfg.d_out)?;
        let sum = tape.add(*fwd.last().unwrap(), *bwd.last().unwrap())?;
        rows.push(tape.scale(sum, 0.5));
    }
    Ok(rows)
}

/// Full textual encoder.
pub fn encode_tsg(
    tape: &mut Tape,
    bound: &BoundModel,
    tsg: &TextualSceneGraph,
    cfg: &ModelConfig,
) -> Result<TsgVars> {
    let word_rows = encode_word_path(tape, bound, &tsg.tokens, cfg)?;
    let path_rows = encode_relationship_paths(tape, bound, tsg, &word_rows, cfg)?;
    Ok(TsgVars {
        word_rows,
        path_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, SgmModel};

    fn config(mode: Mode) -> ModelConfig {
        ModelConfig {
            d1: 3,
            d2: 2,
            d_out: 4,
            c_o: 2,
            c_r: 2,
            vocab_size: 6,
            gcn_layers: 1,
            mode,
            paths_from_hidden: false,
            l2_normalize: false,
        }
    }

    fn encode(mode: Mode, tsg: &TextualSceneGraph, seed: u64) -> TextualFeatureGraph {
        let cfg = config(mode);
        let model = SgmModel::new(cfg.clone(), seed).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        encode_tsg(&mut tape, &bound, tsg, &cfg)
            .unwrap()
            .materialize(&tape)
    }

    #[test]
    fn gru_cell_zero_everything_is_fixed_point() {
        let cfg = ModelConfig {
            d2: 1,
            d_out: 1,
            ..config(Mode::Sgm)
        };
        let mut model = SgmModel::new(cfg, 0).unwrap();
        for p in [
            "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h",
        ] {
            model.set_param(&format!("tsg.gru_w.fwd.{p}"), vec![0.0]).unwrap();
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1], vec![0.9]));
        let h0 = tape.constant(Tensor::zeros(vec![1]));
        let h1 = gru_cell(&mut tape, &bound.gru_w.fwd, x, h0).unwrap();
        assert_eq!(tape.value(h1).values, vec![0.0]);
    }

    #[test]
    fn gru_cell_hand_trace() {
        // W_h = 1, everything else 0, x = 1, h = 0:
        // z = 0.5, ĥ = tanh(1), h' = 0.5·tanh(1) ≈ 0.380797.
        let cfg = ModelConfig {
            d2: 1,
            d_out: 1,
            ..config(Mode::Sgm)
        };
        let mut model = SgmModel::new(cfg, 0).unwrap();
        for p in [
            "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "u_h", "b_h",
        ] {
            model.set_param(&format!("tsg.gru_w.fwd.{p}"), vec![0.0]).unwrap();
        }
        model.set_param("tsg.gru_w.fwd.w_h", vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1], vec![1.0]));
        let h0 = tape.constant(Tensor::zeros(vec![1]));
        let h1 = gru_cell(&mut tape, &bound.gru_w.fwd, x, h0).unwrap();
        let got = tape.value(h1).values[0];
        assert!((got - 0.5 * 1.0f64.tanh()).abs() < 1e-15);
        assert!((got - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn single_token_sentence_averages_one_step_each_way() {
        let cfg = config(Mode::Sgm);
        let model = SgmModel::new(cfg.clone(), 5).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let tsg = TextualSceneGraph {
            tokens: vec![3],
            triplet_paths: vec![],
        };
        let out = encode_tsg(&mut tape, &bound, &tsg, &cfg).unwrap();

        // Recompute directly: one forward step and one backward step from
        // zero states over the same single embedding, then the mean.
        let e = tape.select_column(bound.w_e, 3).unwrap();
        let h0 = tape.constant(Tensor::zeros(vec![cfg.d_out]));
        let f = gru_cell(&mut tape, &bound.gru_w.fwd, e, h0).unwrap();
        let b = gru_cell(&mut tape, &bound.gru_w.bwd, e, h0).unwrap();
        let expect: Vec<f64> = tape
            .value(f)
            .values
            .iter()
            .zip(&tape.value(b).values)
            .map(|(x, y)| 0.5 * (x + y))
            .collect();
        assert_eq!(tape.value(out.word_rows[0]).values, expect);
    }

    #[test]
    fn palindrome_with_swapped_directions_reflects_rows() {
        // Reversing the token order and swapping the two direction
        // parameter sets must reverse the word rows exactly.
        let cfg = config(Mode::Oom);
        let mut model = SgmModel::new(cfg.clone(), 41).unwrap();
        let tokens = vec![1, 4, 2, 5];
        let reversed: Vec<usize> = tokens.iter().rev().copied().collect();

        let encode_with = |model: &SgmModel, toks: &[usize]| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let rows = encode_word_path(&mut tape, &bound, toks, &cfg).unwrap();
            rows.iter()
                .map(|&r| tape.value(r).values.clone())
                .collect::<Vec<_>>()
        };

        let base = encode_with(&model, &tokens);
        // Swap fwd and bwd cells of the word-level bi-GRU.
        let fwd = model.tsg.gru_w.fwd.clone();
        model.tsg.gru_w.fwd = model.tsg.gru_w.bwd.clone();
        model.tsg.gru_w.bwd = fwd;
        let swapped = encode_with(&model, &reversed);

        for i in 0..tokens.len() {
            assert_eq!(base[i], swapped[tokens.len() - 1 - i], "row {i}");
        }
    }

    #[test]
    fn no_context_mode_permutes_rows_with_tokens() {
        let a = TextualSceneGraph {
            tokens: vec![1, 2, 3],
            triplet_paths: vec![],
        };
        let b = TextualSceneGraph {
            tokens: vec![3, 1, 2],
            triplet_paths: vec![],
        };
        let fa = encode(Mode::OomNoTcxt, &a, 43);
        let fb = encode(Mode::OomNoTcxt, &b, 43);
        let d = fa.word_feats.cols();
        assert_eq!(&fa.word_feats.values[0..d], &fb.word_feats.values[d..2 * d]);
        assert_eq!(
            &fa.word_feats.values[2 * d..3 * d],
            &fb.word_feats.values[0..d]
        );
    }

    #[test]
    fn context_mode_does_not_permute() {
        let a = TextualSceneGraph {
            tokens: vec![1, 2, 3],
            triplet_paths: vec![],
        };
        let b = TextualSceneGraph {
            tokens: vec![3, 1, 2],
            triplet_paths: vec![],
        };
        let fa = encode(Mode::Oom, &a, 43);
        let fb = encode(Mode::Oom, &b, 43);
        let d = fa.word_feats.cols();
        assert_ne!(&fa.word_feats.values[0..d], &fb.word_feats.values[d..2 * d]);
    }

    #[test]
    fn oom_mode_has_no_path_rows() {
        let tsg = TextualSceneGraph {
            tokens: vec![1, 2, 3],
            triplet_paths: vec![vec![0, 1, 2]],
        };
        let out = encode(Mode::Oom, &tsg, 47);
        assert_eq!(out.path_feats.shape, vec![0, 4]);
        assert_eq!(out.word_feats.shape, vec![3, 4]);
    }

    #[test]
    fn identical_paths_give_identical_rows() {
        let tsg = TextualSceneGraph {
            tokens: vec![1, 2, 3],
            triplet_paths: vec![vec![0, 2], vec![0, 2]],
        };
        let out = encode(Mode::Sgm, &tsg, 53);
        let d = out.path_feats.cols();
        assert_eq!(
            &out.path_feats.values[0..d],
            &out.path_feats.values[d..2 * d]
        );
    }

    #[test]
    fn path_order_matters() {
        // [a,b] vs [b,a] should differ for generic parameters; skip seeds
        // where the difference is numerically negligible.
        let mut distinct = 0;
        for seed in 0..20u64 {
            let fwd = TextualSceneGraph {
                tokens: vec![1, 2],
                triplet_paths: vec![vec![0, 1]],
            };
            let rev = TextualSceneGraph {
                tokens: vec![1, 2],
                triplet_paths: vec![vec![1, 0]],
            };
            let fa = encode(Mode::Sgm, &fwd, seed);
            let fb = encode(Mode::Sgm, &rev, seed);
            let diff: f64 = fa
                .path_feats
                .values
                .iter()
                .zip(&fb.path_feats.values)
                .map(|(x, y)| (x - y).abs())
                .sum();
            if diff >= 1e-9 {
                distinct += 1;
            }
        }
        assert!(distinct >= 19, "only {distinct}/20 seeds order-sensitive");
    }

    #[test]
    fn word_rows_ignore_paths_and_paths_ignore_outside_tokens() {
        let with_paths = TextualSceneGraph {
            tokens: vec![1, 2, 3, 4],
            triplet_paths: vec![vec![0, 1]],
        };
        let without = TextualSceneGraph {
            tokens: vec![1, 2, 3, 4],
            triplet_paths: vec![],
        };
        let fa = encode(Mode::Sgm, &with_paths, 59);
        let fb = encode(Mode::Sgm, &without, 59);
        assert_eq!(fa.word_feats, fb.word_feats);

        // Changing a token outside the path leaves the path row unchanged
        // (raw-embedding path inputs).
        let changed_outside = TextualSceneGraph {
            tokens: vec![1, 2, 5, 4],
            triplet_paths: vec![vec![0, 1]],
        };
        let fc = encode(Mode::Sgm, &changed_outside, 59);
        assert_eq!(fa.path_feats, fc.path_feats);
    }

    #[test]
    fn paths_from_hidden_listens_to_context() {
        let cfg = ModelConfig {
            paths_from_hidden: true,
            ..config(Mode::Sgm)
        };
        let model = SgmModel::new(cfg.clone(), 61).unwrap();
        let encode_with = |tokens: Vec<usize>| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let tsg = TextualSceneGraph {
                tokens,
                triplet_paths: vec![vec![0, 1]],
            };
            encode_tsg(&mut tape, &bound, &tsg, &cfg)
                .unwrap()
                .materialize(&tape)
        };
        let a = encode_with(vec![1, 2, 3]);
        let b = encode_with(vec![1, 2, 4]);
        // Token 2 is outside the path, but hidden-state inputs carry context.
        assert_ne!(a.path_feats, b.path_feats);
    }

    #[test]
    fn empty_sentence_is_a_validation_error() {
        let cfg = config(Mode::Sgm);
        let model = SgmModel::new(cfg.clone(), 63).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let err = encode_word_path(&mut tape, &bound, &[], &cfg);
        assert!(matches!(err, Err(SgmError::Validation(_))));
    }

    #[test]
    fn path_index_out_of_range_is_a_validation_error() {
        let cfg = config(Mode::Sgm);
        let model = SgmModel::new(cfg.clone(), 63).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let tsg = TextualSceneGraph {
            tokens: vec![1, 2],
            triplet_paths: vec![vec![0, 2]],
        };
        let err = encode_tsg(&mut tape, &bound, &tsg, &cfg);
        assert!(matches!(err, Err(SgmError::Validation(_))));
    }
}
