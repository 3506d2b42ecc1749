//! Scene-graph data model: visual graphs (object + relationship nodes),
//! textual graphs (token sequence + triplet paths), and the corpus that
//! pairs them, with invariant validation.

use std::fmt;

/// A detected region: its feature vector (length d₁) and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub feature: Vec<f64>,
    pub label_id: usize,
}

/// A predicate linking two objects: union-region feature (length d₁),
/// predicate label, and the endpoint object indices. Direction matters:
/// `subject_idx` acts on `object_idx`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipNode {
    pub feature: Vec<f64>,
    pub label_id: usize,
    pub subject_idx: usize,
    pub object_idx: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualSceneGraph {
    pub objects: Vec<ObjectNode>,
    pub relationships: Vec<RelationshipNode>,
}

/// A sentence as a word-order path (token ids) plus semantic relationship
/// paths given as token-index sequences into that sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualSceneGraph {
    pub tokens: Vec<usize>,
    pub triplet_paths: Vec<Vec<usize>>,
}

/// Aligned image–caption pairs plus the dimension declarations every graph
/// must conform to. Pair index i means image i matches caption i.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub d1: usize,
    pub c_o: usize,
    pub c_r: usize,
    /// Word id → surface form; id 0 is reserved for unknown words.
    pub vocab: Vec<String>,
    pub pairs: Vec<(VisualSceneGraph, TextualSceneGraph)>,
}

/// One broken invariant. Violations are data, not errors: validation
/// returns all of them at once.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Pair index within a corpus, when known.
    pub pair: Option<usize>,
    /// Which field broke the invariant, e.g. `relationships[2].subject_idx`.
    pub field: String,
    pub detail: String,
}

impl Violation {
    fn new(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Violation {
            pair: None,
            field: field.into(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pair {
            Some(p) => write!(f, "pair {}: {}: {}", p, self.field, self.detail),
            None => write!(f, "{}: {}", self.field, self.detail),
        }
    }
}

impl VisualSceneGraph {
    /// Checks every structural invariant against the declared dimensions.
    pub fn validate(&self, d1: usize, c_o: usize, c_r: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.objects.is_empty() {
            out.push(Violation::new("objects", "graph needs at least one object"));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.feature.len() != d1 {
                out.push(Violation::new(
                    format!("objects[{i}].feature"),
                    format!("length {} != declared d1 {}", obj.feature.len(), d1),
                ));
            }
            if obj.label_id >= c_o {
                out.push(Violation::new(
                    format!("objects[{i}].label_id"),
                    format!("{} out of range [0, {})", obj.label_id, c_o),
                ));
            }
        }
        let n_o = self.objects.len();
        for (i, rel) in self.relationships.iter().enumerate() {
            if rel.feature.len() != d1 {
                out.push(Violation::new(
                    format!("relationships[{i}].feature"),
                    format!("length {} != declared d1 {}", rel.feature.len(), d1),
                ));
            }
            if rel.label_id >= c_r {
                out.push(Violation::new(
                    format!("relationships[{i}].label_id"),
                    format!("{} out of range [0, {})", rel.label_id, c_r),
                ));
            }
            for (name, idx) in [("subject_idx", rel.subject_idx), ("object_idx", rel.object_idx)] {
                if idx >= n_o {
                    out.push(Violation::new(
                        format!("relationships[{i}].{name}"),
                        format!("references object {} of {}", idx, n_o),
                    ));
                }
            }
            if rel.subject_idx == rel.object_idx {
                out.push(Violation::new(
                    format!("relationships[{i}]"),
                    format!("self-loop on object {}", rel.subject_idx),
                ));
            }
        }
        out
    }
}

impl TextualSceneGraph {
    pub fn validate(&self, vocab_size: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.tokens.is_empty() {
            out.push(Violation::new("tokens", "sentence needs at least one word"));
        }
        for (i, &tok) in self.tokens.iter().enumerate() {
            if tok >= vocab_size {
                out.push(Violation::new(
                    format!("tokens[{i}]"),
                    format!("word id {} out of vocabulary [0, {})", tok, vocab_size),
                ));
            }
        }
        for (i, path) in self.triplet_paths.iter().enumerate() {
            if path.len() < 2 {
                out.push(Violation::new(
                    format!("paths[{i}]"),
                    format!("length {} < 2", path.len()),
                ));
            }
            for (j, &idx) in path.iter().enumerate() {
                if idx >= self.tokens.len() {
                    out.push(Violation::new(
                        format!("paths[{i}][{j}]"),
                        format!("token index {} out of range [0, {})", idx, self.tokens.len()),
                    ));
                }
            }
        }
        out
    }
}

impl Corpus {
    /// Validates every pair against the corpus-declared dimensions,
    /// tagging each violation with its pair index.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.vocab.is_empty() {
            out.push(Violation::new("vocab", "empty vocabulary (id 0 must exist)"));
        }
        for (i, (vsg, tsg)) in self.pairs.iter().enumerate() {
            for mut v in vsg.validate(self.d1, self.c_o, self.c_r) {
                v.pair = Some(i);
                out.push(v);
            }
            for mut v in tsg.validate(self.vocab.len()) {
                v.pair = Some(i);
                out.push(v);
            }
        }
        out
    }

    /// [`Corpus::validate`] as a hard error: `Ok(())` iff no violations.
    pub fn check(&self) -> crate::error::Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(crate::error::SgmError::Validation(violations))
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
