//! Visual scene-graph encoder: label embedding, multi-modal fusion, and the
//! asymmetric graph convolution.
//!
//! The convolution is deliberately one-way: object nodes update from
//! themselves alone, while relationship nodes update from their
//! (subject, self, object) chain. Object features therefore never depend on
//! any relationship node — a structural invariant the tests pin down
//! bitwise.

use crate::error::{Result, SgmError};
use crate::graph::{Violation, VisualSceneGraph};
use crate::model::{BoundGcnLayer, BoundModel, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Encoded visual graph: one D-dim row per object and per relationship.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureGraph {
    /// N_o × D
    pub object_feats: Tensor,
    /// N_r × D (N_r = 0 for modes without visual relationships)
    pub relationship_feats: Tensor,
}

/// Tape handles for an encoded visual graph, one var per node row.
#[derive(Debug, Clone)]
pub struct VsgVars {
    pub object_rows: Vec<Var>,
    pub relationship_rows: Vec<Var>,
}

impl VsgVars {
    /// Copies the encoded rows out of the tape into plain matrices.
    pub fn materialize(&self, tape: &Tape) -> VisualFeatureGraph {
        let d = self
            .object_rows
            .first()
            .map(|&v| tape.value(v).len())
            .unwrap_or(0);
        VisualFeatureGraph {
            object_feats: stack_values(tape, &self.object_rows, d),
            relationship_feats: stack_values(tape, &self.relationship_rows, d),
        }
    }
}

pub(crate) fn stack_values(tape: &Tape, rows: &[Var], d: usize) -> Tensor {
    let mut values = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        values.extend_from_slice(&tape.value(r).values);
    }
    Tensor::new(vec![rows.len(), d], values)
}

/// Looks up the label embedding of every node: column `label_id` of W_o for
/// objects, of W_r for relationships (the one-hot product reduced to a
/// column selection).
pub fn embed_labels(
    tape: &mut Tape,
    bound: &BoundModel,
    graph: &VisualSceneGraph,
) -> Result<(Vec<Var>, Vec<Var>)> {
    check_label_ranges(tape, bound, graph, true)?;
    let objects = graph
        .objects
        .iter()
        .map(|o| tape.select_column(bound.w_o, o.label_id))
        .collect::<Result<Vec<_>>>()?;
    let relationships = graph
        .relationships
        .iter()
        .map(|r| tape.select_column(bound.w_r, r.label_id))
        .collect::<Result<Vec<_>>>()?;
    Ok((objects, relationships))
}

fn check_label_ranges(
    tape: &Tape,
    bound: &BoundModel,
    graph: &VisualSceneGraph,
    include_relationships: bool,
) -> Result<()> {
    let c_o = tape.value(bound.w_o).cols();
    let c_r = tape.value(bound.w_r).cols();
    let mut violations = Vec::new();
    for (i, o) in graph.objects.iter().enumerate() {
        if o.label_id >= c_o {
            violations.push(Violation {
                pair: None,
                field: format!("objects[{i}].label_id"),
                detail: format!("{} out of range [0, {})", o.label_id, c_o),
            });
        }
    }
    if include_relationships {
        for (i, r) in graph.relationships.iter().enumerate() {
            if r.label_id >= c_r {
                violations.push(Violation {
                    pair: None,
                    field: format!("relationships[{i}].label_id"),
                    detail: format!("{} out of range [0, {})", r.label_id, c_r),
                });
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(SgmError::Validation(violations))
    }
}

/// Fuses a region feature with its label embedding:
/// u = tanh(W_u · [v, e]). Output length d₁, every component in (−1, 1).
pub fn fuse(tape: &mut Tape, w_u: Var, v: Var, e: Var) -> Result<Var> {
    let joint = tape.concat_rows(v, e)?;
    let lin = tape.matvec(w_u, joint)?;
    Ok(tape.tanh(lin))
}

/// Runs the GCN stack. Per layer, objects map through g_o from their own
/// previous state only; each relationship maps through g_r from the
/// concatenated [subject, self, object] previous states. Both maps are
/// affine followed by tanh. `endpoints[t]` gives relationship t's
/// (subject_idx, object_idx).
pub fn gcn_forward(
    tape: &mut Tape,
    layers: &[BoundGcnLayer],
    mut objects: Vec<Var>,
    mut relationships: Vec<Var>,
    endpoints: &[(usize, usize)],
) -> Result<(Vec<Var>, Vec<Var>)> {
    if layers.is_empty() {
        return Err(SgmError::contract("gcn_forward needs at least one layer"));
    }
    if relationships.len() != endpoints.len() {
        return Err(SgmError::contract(format!(
            "gcn_forward: {} relationship states but {} endpoint pairs",
            relationships.len(),
            endpoints.len()
        )));
    }
    for layer in layers {
        // Relationship updates read the PREVIOUS object states, so they are
        // computed before objects are replaced.
        let mut new_rels = Vec::with_capacity(relationships.len());
        for (t, &rel) in relationships.iter().enumerate() {
            let (si, oi) = endpoints[t];
            let head = tape.concat_rows(objects[si], rel)?;
            let chain = tape.concat_rows(head, objects[oi])?;
            let lin = tape.matvec(layer.g_r_w, chain)?;
            let biased = tape.add(lin, layer.g_r_b)?;
            new_rels.push(tape.tanh(biased));
        }
        let mut new_objects = Vec::with_capacity(objects.len());
        for &obj in &objects {
            let lin = tape.matvec(layer.g_o_w, obj)?;
            let biased = tape.add(lin, layer.g_o_b)?;
            new_objects.push(tape.tanh(biased));
        }
        objects = new_objects;
        relationships = new_rels;
    }
    Ok((objects, relationships))
}

/// Full visual encoder: embed labels, fuse with region features, run the
/// GCN. Modes without visual relationships skip relationship processing
/// entirely (the label embedding W_r and every g_r never touch the tape's
/// active graph, so their gradients stay exactly zero).
pub fn encode_vsg(
    tape: &mut Tape,
    bound: &BoundModel,
    graph: &VisualSceneGraph,
    cfg: &ModelConfig,
) -> Result<VsgVars> {
    if graph.objects.is_empty() {
        return Err(SgmError::Validation(vec![Violation {
            pair: None,
            field: "objects".into(),
            detail: "graph needs at least one object".into(),
        }]));
    }
    let use_rel = cfg.mode.uses_visual_relationships() && !graph.relationships.is_empty();
    check_label_ranges(tape, bound, graph, use_rel)?;

    let mut obj_states = Vec::with_capacity(graph.objects.len());
    for o in &graph.objects {
        let v = tape.constant(Tensor::new(vec![o.feature.len()], o.feature.clone()));
        let e = tape.select_column(bound.w_o, o.label_id)?;
        obj_states.push(fuse(tape, bound.w_u, v, e)?);
    }

    let mut rel_states = Vec::new();
    let mut endpoints = Vec::new();
    if use_rel {
        for r in &graph.relationships {
            let v = tape.constant(Tensor::new(vec![r.feature.len()], r.feature.clone()));
            let e = tape.select_column(bound.w_r, r.label_id)?;
            rel_states.push(fuse(tape, bound.w_u, v, e)?);
            endpoints.push((r.subject_idx, r.object_idx));
        }
    }

    let (object_rows, relationship_rows) =
        gcn_forward(tape, &bound.gcn, obj_states, rel_states, &endpoints)?;
    Ok(VsgVars {
        object_rows,
        relationship_rows,
    })
}
