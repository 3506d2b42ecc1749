//! Mini-batch training: encode a batch, build its B×B score matrix, apply
//! the hardest-negative ranking loss, and step Adam.
//!
//! Every source of run-to-run variation is seeded — parameter init, batch
//! shuffling, and tie-breaking — so two runs with the same config produce
//! bitwise-identical checkpoints. Model selection keeps the epoch with the
//! highest validation R@1 sum over both retrieval directions (later epochs
//! win ties).

use std::collections::BTreeMap;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::error::{Result, SgmError};
use crate::eval::evaluate_both;
use crate::graph::Corpus;
use crate::matching::{score_pair_on_tape, triplet_loss_hardest};
use crate::model::{Mode, ModelConfig, SgmModel};
use crate::tape::Tape;
use crate::tsg::encode_tsg;
use crate::vsg::encode_vsg;

// ─── Configuration ──────────────────────────────────────────────────────

/// Training hyperparameters. Field defaults follow the reference
/// configuration; tests override the dimensions downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub d1: usize,
    pub d2: usize,
    pub d_out: usize,
    pub gcn_layers: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Pairs held out from the end of the corpus for validation;
    /// 0 validates on the training split itself.
    pub val_pairs: usize,
    pub l2_normalize: bool,
    pub paths_from_hidden: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            lr: 0.0005,
            margin: 0.2,
            epochs: 30,
            seed: 0,
            mode: Mode::Sgm,
            d1: 2048,
            d2: 300,
            d_out: 1024,
            gcn_layers: 1,
            grad_clip: Some(10.0),
            val_pairs: 0,
            l2_normalize: false,
            paths_from_hidden: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(SgmError::contract(format!(
                "batch_size must be >= 2 (triplet loss needs in-batch negatives), got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(SgmError::contract("epochs must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(SgmError::contract(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(SgmError::contract(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(SgmError::contract(format!(
                    "grad_clip must be positive when set, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Instantiates the model-shape config against a corpus's declared
    /// label spaces and vocabulary.
    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            d1: self.d1,
            d2: self.d2,
            d_out: self.d_out,
            c_o: corpus.c_o,
            c_r: corpus.c_r,
            vocab_size: corpus.vocab.len(),
            gcn_layers: self.gcn_layers,
            mode: self.mode,
            paths_from_hidden: self.paths_from_hidden,
            l2_normalize: self.l2_normalize,
        }
    }
}

// ─── Progress and checkpoints ───────────────────────────────────────────

/// One epoch's log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the epoch's per-batch hardest-negative losses.
    pub loss: f64,
    /// R@1 (caption retrieval) + R@1 (image retrieval) on the validation
    /// split, in percentage points (max 200).
    pub val_r1_sum: f64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub model: SgmModel,
    pub adam: AdamState,
    pub history: Vec<EpochStats>,
}

/// Result of a training run: the best-validation checkpoint (what `train`
/// hands to evaluation) plus the final state for resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochStats>,
}

// ─── Batching ───────────────────────────────────────────────────────────

/// Epoch-dependent seeded shuffle chunked into full batches; a short final
/// batch is dropped (the in-batch loss needs every pair to see negatives).
pub fn make_batches(n_pairs: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

// ─── Training ───────────────────────────────────────────────────────────

/// Full training run with fresh parameters. Returns the best-validation
/// checkpoint together with the final state.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, None, 1, |_| {})
}

/// Training with optional resumption and an epoch callback (used for
/// JSON-lines logging). `threads` caps validation-encoding parallelism.
pub fn train_with(
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    corpus.check()?;
    if corpus.d1 != cfg.d1 {
        return Err(SgmError::dimension(
            "train",
            format!("corpus d1={} vs configured d1={}", corpus.d1, cfg.d1),
        ));
    }
    if cfg.val_pairs >= corpus.len() {
        return Err(SgmError::contract(format!(
            "val_pairs={} must leave at least batch_size training pairs of {}",
            cfg.val_pairs,
            corpus.len()
        )));
    }
    let train_len = corpus.len() - cfg.val_pairs;
    if train_len < cfg.batch_size {
        return Err(SgmError::contract(format!(
            "corpus has {train_len} training pairs but batch_size is {}",
            cfg.batch_size
        )));
    }

    let train_split = sub_corpus(corpus, 0, train_len);
    let val_split = if cfg.val_pairs > 0 {
        sub_corpus(corpus, train_len, corpus.len())
    } else {
        train_split.clone()
    };

    let model_config = cfg.model_config(corpus);
    model_config.validate()?;

    let (mut model, mut adam, mut history, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.model.config != model_config {
                return Err(SgmError::contract(
                    "checkpoint model shape does not match the requested configuration",
                ));
            }
            (ckpt.model, ckpt.adam, ckpt.history, ckpt.epoch)
        }
        None => {
            let model = SgmModel::new(model_config, cfg.seed)?;
            let shapes: Vec<(String, usize)> = model
                .named_params()
                .into_iter()
                .map(|(name, t)| (name, t.len()))
                .collect();
            let adam = AdamState::new(cfg.lr, shapes.iter().map(|(n, l)| (n.as_str(), *l)));
            (model, adam, Vec::new(), 0)
        }
    };

    let checkpoint = |model: &SgmModel, adam: &AdamState, epoch: usize, history: &[EpochStats]| {
        Checkpoint {
            config: cfg.clone(),
            epoch,
            model: model.clone(),
            adam: adam.clone(),
            history: history.to_vec(),
        }
    };

    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in start_epoch..cfg.epochs {
        let batches = make_batches(train_len, cfg.batch_size, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in &batches {
            loss_sum += batch_step(&mut model, &mut adam, &train_split, batch, cfg)?;
        }
        let loss = loss_sum / batches.len() as f64;

        let (cap, img) = evaluate_both(&model, &val_split, threads)?;
        let stats = EpochStats {
            epoch,
            loss,
            val_r1_sum: cap.r_at(1) + img.r_at(1),
        };
        history.push(stats);
        on_epoch(&stats);

        let is_best = best
            .as_ref()
            .map(|(v, _)| stats.val_r1_sum >= *v)
            .unwrap_or(true);
        if is_best {
            best = Some((
                stats.val_r1_sum,
                checkpoint(&model, &adam, epoch + 1, &history),
            ));
        }
    }

    let last = checkpoint(&model, &adam, cfg.epochs, &history);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome {
        best,
        last,
        history,
    })
}

fn sub_corpus(corpus: &Corpus, start: usize, end: usize) -> Corpus {
    Corpus {
        d1: corpus.d1,
        c_o: corpus.c_o,
        c_r: corpus.c_r,
        vocab: corpus.vocab.clone(),
        pairs: corpus.pairs[start..end].to_vec(),
    }
}

/// One forward/backward/Adam step on a batch. Returns the batch loss
/// (before the step). Gradients for parameters outside the active mode's
/// computation are exactly zero, leaving those parameters bitwise intact.
fn batch_step(
    model: &mut SgmModel,
    adam: &mut AdamState,
    corpus: &Corpus,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let model_cfg = model.config.clone();

    let mut vsgs = Vec::with_capacity(batch.len());
    let mut tsgs = Vec::with_capacity(batch.len());
    for &idx in batch {
        let (vsg, tsg) = &corpus.pairs[idx];
        vsgs.push(encode_vsg(&mut tape, &bound, vsg, &model_cfg)?);
        tsgs.push(encode_tsg(&mut tape, &bound, tsg, &model_cfg)?);
    }

    // Row i, column j: image i scored against caption j.
    let b = batch.len();
    let mut entries = Vec::with_capacity(b * b);
    for vsg in &vsgs {
        for tsg in &tsgs {
            entries.push(score_pair_on_tape(&mut tape, vsg, tsg, model_cfg.l2_normalize)?.s_total);
        }
    }
    let scores = tape.stack_scalars(&entries, b, b)?;
    let loss = triplet_loss_hardest(&mut tape, scores, cfg.margin)?;

    // A non-finite value anywhere in the forward graph is pathological even
    // when the hinge terms mask it out of the loss itself.
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() || tape.first_non_finite().is_some() {
        return Err(divergence_diagnostic(&tape, &bound.named));
    }

    tape.backward(loss)?;

    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, var) in &bound.named {
        let g = match tape.grad(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(*var).len()],
        };
        if g.iter().any(|x| !x.is_finite()) {
            return Err(SgmError::Diverged(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        grads.insert(name.clone(), g);
    }

    if let Some(max_norm) = cfg.grad_clip {
        clip_global_norm(&mut grads, max_norm);
    }

    adam_step(adam, model.named_params_mut(), &grads)?;
    Ok(loss_value)
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`.
fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
}

/// Names the first non-finite tensor on the tape, preferring a parameter
/// name over a positional op description.
fn divergence_diagnostic(tape: &Tape, named: &[(String, crate::tape::Var)]) -> SgmError {
    match tape.first_non_finite() {
        Some((idx, op)) => {
            let param = named.iter().find(|(_, v)| v.0 == idx).map(|(n, _)| n);
            match param {
                Some(name) => {
                    SgmError::Diverged(format!("loss is non-finite; first bad tensor: parameter {name}"))
                }
                None => SgmError::Diverged(format!(
                    "loss is non-finite; first bad tensor: {op} output at node {idx}"
                )),
            }
        }
        None => SgmError::Diverged("loss is non-finite".to_string()),
    }
}
