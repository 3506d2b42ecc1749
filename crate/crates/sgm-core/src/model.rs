//! Model parameters, configuration, and ablation modes.
//!
//! All trainable tensors live here in a fixed canonical order (the order
//! [`SgmModel::named_params`] walks them). Initialization, optimizer-state
//! layout, checkpoint blobs, and tape binding all share that order, which is
//! what makes seeded runs bitwise reproducible.

use crate::error::{Result, SgmError};
use crate::graph::Corpus;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tsg::TextualFeatureGraph;
use crate::vsg::VisualFeatureGraph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Half-width of the uniform parameter-initialization interval.
pub const INIT_SCALE: f64 = 0.1;

/// Ablation variant. Gates which graph components are encoded:
/// visual relationship nodes, textual relationship paths, and whether
/// words see sentence context (word-order bi-GRU) or are isolated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full model: relationships on both sides.
    Sgm,
    /// Object-only matching.
    Oom,
    /// Objects plus visual relationship nodes.
    OomVrel,
    /// Objects plus textual relationship paths.
    OomTrel,
    /// Objects only, and words encoded in isolation (no bi-GRU context).
    OomNoTcxt,
}

impl Mode {
    pub fn uses_visual_relationships(self) -> bool {
        matches!(self, Mode::Sgm | Mode::OomVrel)
    }

    pub fn uses_textual_relationships(self) -> bool {
        matches!(self, Mode::Sgm | Mode::OomTrel)
    }

    pub fn uses_word_context(self) -> bool {
        !matches!(self, Mode::OomNoTcxt)
    }

    pub const ALL: [Mode; 5] = [
        Mode::Sgm,
        Mode::Oom,
        Mode::OomVrel,
        Mode::OomTrel,
        Mode::OomNoTcxt,
    ];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Sgm => "sgm",
            Mode::Oom => "oom",
            Mode::OomVrel => "oom_vrel",
            Mode::OomTrel => "oom_trel",
            Mode::OomNoTcxt => "oom_no_tcxt",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sgm" => Ok(Mode::Sgm),
            "oom" => Ok(Mode::Oom),
            "oom_vrel" | "oom_w_vrel" => Ok(Mode::OomVrel),
            "oom_trel" | "oom_w_trel" => Ok(Mode::OomTrel),
            "oom_no_tcxt" | "oom_wo_tcxt" => Ok(Mode::OomNoTcxt),
            other => Err(format!(
                "unknown mode '{other}' (expected sgm|oom|oom-vrel|oom-trel|oom-no-tcxt)"
            )),
        }
    }
}

/// Dimensions and switches that fix every parameter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Region-feature dimension (corpus-declared).
    pub d1: usize,
    /// Label/word embedding dimension.
    pub d2: usize,
    /// Joint embedding dimension D.
    pub d_out: usize,
    /// Object label count C_o.
    pub c_o: usize,
    /// Relationship label count C_r.
    pub c_r: usize,
    /// Vocabulary size V (id 0 = unknown).
    pub vocab_size: usize,
    /// GCN depth m.
    pub gcn_layers: usize,
    pub mode: Mode,
    /// Path-level bi-GRU input: word-level hidden states instead of the
    /// default raw word embeddings.
    pub paths_from_hidden: bool,
    /// L2-normalize feature rows before dot-product scoring.
    pub l2_normalize: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d1", self.d1),
            ("d2", self.d2),
            ("d_out", self.d_out),
            ("c_o", self.c_o),
            ("vocab_size", self.vocab_size),
            ("gcn_layers", self.gcn_layers),
        ] {
            if v == 0 {
                return Err(SgmError::contract(format!("model config: {name} must be ≥ 1")));
            }
        }
        Ok(())
    }

    /// GCN layer k maps `gcn_in(k)` → `d_out`.
    fn gcn_in(&self, k: usize) -> usize {
        if k == 0 {
            self.d1
        } else {
            self.d_out
        }
    }

    /// The path-level bi-GRU reads raw word embeddings (d₂) by default, or
    /// contextual word states (D) when `paths_from_hidden` is set.
    pub fn path_gru_input(&self) -> usize {
        if self.paths_from_hidden {
            self.d_out
        } else {
            self.d2
        }
    }
}

/// One gated-recurrent-unit cell: three gate affines over (input, hidden).
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruCellParams {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_hidden: usize) -> Self {
        GruCellParams {
            w_z: Tensor::uniform(vec![d_hidden, d_in], INIT_SCALE, rng),
            u_z: Tensor::uniform(vec![d_hidden, d_hidden], INIT_SCALE, rng),
            b_z: Tensor::uniform(vec![d_hidden], INIT_SCALE, rng),
            w_r: Tensor::uniform(vec![d_hidden, d_in], INIT_SCALE, rng),
            u_r: Tensor::uniform(vec![d_hidden, d_hidden], INIT_SCALE, rng),
            b_r: Tensor::uniform(vec![d_hidden], INIT_SCALE, rng),
            w_h: Tensor::uniform(vec![d_hidden, d_in], INIT_SCALE, rng),
            u_h: Tensor::uniform(vec![d_hidden, d_hidden], INIT_SCALE, rng),
            b_h: Tensor::uniform(vec![d_hidden], INIT_SCALE, rng),
        }
    }
}

/// Independent forward and backward cells of one bi-GRU.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGruParams {
    pub fwd: GruCellParams,
    pub bwd: GruCellParams,
}

/// One GCN layer: the object map g_o (in → out) and the relationship map
/// g_r over the concatenated [subject, relationship, object] chain (3·in → out).
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayerParams {
    pub g_o_w: Tensor,
    pub g_o_b: Tensor,
    pub g_r_w: Tensor,
    pub g_r_b: Tensor,
}

/// Visual-side parameters: label embeddings, fusion, GCN stack.
#[derive(Debug, Clone, PartialEq)]
pub struct VsgEncoderParams {
    /// d₂×C_o object-label embedding.
    pub w_o: Tensor,
    /// d₂×C_r relationship-label embedding.
    pub w_r: Tensor,
    /// d₁×(d₁+d₂) multi-modal fusion.
    pub w_u: Tensor,
    pub gcn: Vec<GcnLayerParams>,
}

/// Textual-side parameters: word embedding, word- and path-level bi-GRUs,
/// and the isolated-word projection used by the no-context ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct TsgEncoderParams {
    /// d₂×V word embedding.
    pub w_e: Tensor,
    pub gru_w: BiGruParams,
    pub gru_p: BiGruParams,
    pub iso_w: Tensor,
    pub iso_b: Tensor,
}

/// The complete trainable model.
#[derive(Debug, Clone, PartialEq)]
pub struct SgmModel {
    pub config: ModelConfig,
    pub vsg: VsgEncoderParams,
    pub tsg: TsgEncoderParams,
}

impl SgmModel {
    /// Seeded uniform(−0.1, 0.1) initialization. Parameters are drawn in
    /// canonical order from a single stream, so (config, seed) fixes every
    /// value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = &config;
        let vsg = VsgEncoderParams {
            w_o: Tensor::uniform(vec![c.d2, c.c_o], INIT_SCALE, rng),
            w_r: Tensor::uniform(vec![c.d2, c.c_r], INIT_SCALE, rng),
            w_u: Tensor::uniform(vec![c.d1, c.d1 + c.d2], INIT_SCALE, rng),
            gcn: (0..c.gcn_layers)
                .map(|k| {
                    let d_in = c.gcn_in(k);
                    GcnLayerParams {
                        g_o_w: Tensor::uniform(vec![c.d_out, d_in], INIT_SCALE, rng),
                        g_o_b: Tensor::uniform(vec![c.d_out], INIT_SCALE, rng),
                        g_r_w: Tensor::uniform(vec![c.d_out, 3 * d_in], INIT_SCALE, rng),
                        g_r_b: Tensor::uniform(vec![c.d_out], INIT_SCALE, rng),
                    }
                })
                .collect(),
        };
        let tsg = TsgEncoderParams {
            w_e: Tensor::uniform(vec![c.d2, c.vocab_size], INIT_SCALE, rng),
            gru_w: BiGruParams {
                fwd: GruCellParams::init(rng, c.d2, c.d_out),
                bwd: GruCellParams::init(rng, c.d2, c.d_out),
            },
            gru_p: BiGruParams {
                fwd: GruCellParams::init(rng, c.path_gru_input(), c.d_out),
                bwd: GruCellParams::init(rng, c.path_gru_input(), c.d_out),
            },
            iso_w: Tensor::uniform(vec![c.d_out, c.d2], INIT_SCALE, rng),
            iso_b: Tensor::uniform(vec![c.d_out], INIT_SCALE, rng),
        };
        Ok(SgmModel { config, vsg, tsg })
    }

    /// All parameters as (name, tensor) in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("vsg.w_o".to_string(), &self.vsg.w_o));
        out.push(("vsg.w_r".to_string(), &self.vsg.w_r));
        out.push(("vsg.w_u".to_string(), &self.vsg.w_u));
        for (k, layer) in self.vsg.gcn.iter().enumerate() {
            out.push((format!("vsg.gcn{k}.g_o.w"), &layer.g_o_w));
            out.push((format!("vsg.gcn{k}.g_o.b"), &layer.g_o_b));
            out.push((format!("vsg.gcn{k}.g_r.w"), &layer.g_r_w));
            out.push((format!("vsg.gcn{k}.g_r.b"), &layer.g_r_b));
        }
        out.push(("tsg.w_e".to_string(), &self.tsg.w_e));
        for (gru_name, gru) in [("gru_w", &self.tsg.gru_w), ("gru_p", &self.tsg.gru_p)] {
            for (dir, cell) in [("fwd", &gru.fwd), ("bwd", &gru.bwd)] {
                for (p, t) in cell_fields(cell) {
                    out.push((format!("tsg.{gru_name}.{dir}.{p}"), t));
                }
            }
        }
        out.push(("tsg.iso.w".to_string(), &self.tsg.iso_w));
        out.push(("tsg.iso.b".to_string(), &self.tsg.iso_b));
        out
    }

    /// Mutable walk in the same canonical order as [`Self::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("vsg.w_o".to_string(), &mut self.vsg.w_o));
        out.push(("vsg.w_r".to_string(), &mut self.vsg.w_r));
        out.push(("vsg.w_u".to_string(), &mut self.vsg.w_u));
        for (k, layer) in self.vsg.gcn.iter_mut().enumerate() {
            out.push((format!("vsg.gcn{k}.g_o.w"), &mut layer.g_o_w));
            out.push((format!("vsg.gcn{k}.g_o.b"), &mut layer.g_o_b));
            out.push((format!("vsg.gcn{k}.g_r.w"), &mut layer.g_r_w));
            out.push((format!("vsg.gcn{k}.g_r.b"), &mut layer.g_r_b));
        }
        out.push(("tsg.w_e".to_string(), &mut self.tsg.w_e));
        for (gru_name, gru) in [
            ("gru_w", &mut self.tsg.gru_w),
            ("gru_p", &mut self.tsg.gru_p),
        ] {
            for (dir, cell) in [("fwd", &mut gru.fwd), ("bwd", &mut gru.bwd)] {
                for (p, t) in cell_fields_mut(cell) {
                    out.push((format!("tsg.{gru_name}.{dir}.{p}"), t));
                }
            }
        }
        out.push(("tsg.iso.w".to_string(), &mut self.tsg.iso_w));
        out.push(("tsg.iso.b".to_string(), &mut self.tsg.iso_b));
        out
    }

    /// Overwrites one parameter by canonical name, checking the length.
    pub fn set_param(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        for (n, t) in self.named_params_mut() {
            if n == name {
                if t.len() != values.len() {
                    return Err(SgmError::dimension(
                        "set_param",
                        format!("'{name}' holds {} values, got {}", t.len(), values.len()),
                    ));
                }
                t.values = values;
                return Ok(());
            }
        }
        Err(SgmError::contract(format!("unknown parameter '{name}'")))
    }

    /// Copies every parameter onto a tape as a gradient-tracking leaf,
    /// returning structured handles. Parameters unused by the active mode
    /// are still bound; they simply never connect to the loss, so their
    /// gradients stay exactly zero.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let named: Vec<(String, Var)> = self
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, tape.param(t.clone())))
            .collect();
        let vars: Vec<Var> = named.iter().map(|(_, v)| *v).collect();
        let mut bound = BoundModel::from_vars(&self.config, &vars);
        bound.named = named;
        bound
    }

    /// Replaces W_o and W_r from a pretrained label-embedding table laid out
    /// as C_o object rows followed by C_r relationship rows, each of dim d₂.
    pub fn load_label_embeddings(&mut self, rows: &Tensor) -> Result<()> {
        let c = &self.config;
        if rows.shape != [c.c_o + c.c_r, c.d2] {
            return Err(SgmError::dimension(
                "load_label_embeddings",
                format!(
                    "table {:?}, expected [{}, {}]",
                    rows.shape,
                    c.c_o + c.c_r,
                    c.d2
                ),
            ));
        }
        for col in 0..c.c_o {
            for r in 0..c.d2 {
                self.vsg.w_o.values[r * c.c_o + col] = rows.at(col, r);
            }
        }
        for col in 0..c.c_r {
            for r in 0..c.d2 {
                self.vsg.w_r.values[r * c.c_r + col] = rows.at(c.c_o + col, r);
            }
        }
        Ok(())
    }

    /// Replaces W_e from a pretrained word-embedding table of V rows, dim d₂.
    pub fn load_word_embeddings(&mut self, rows: &Tensor) -> Result<()> {
        let c = &self.config;
        if rows.shape != [c.vocab_size, c.d2] {
            return Err(SgmError::dimension(
                "load_word_embeddings",
                format!("table {:?}, expected [{}, {}]", rows.shape, c.vocab_size, c.d2),
            ));
        }
        for col in 0..c.vocab_size {
            for r in 0..c.d2 {
                self.tsg.w_e.values[r * c.vocab_size + col] = rows.at(col, r);
            }
        }
        Ok(())
    }

    /// Encodes one pair to concrete feature graphs on a throwaway tape.
    pub fn encode_pair(
        &self,
        vsg: &crate::graph::VisualSceneGraph,
        tsg: &crate::graph::TextualSceneGraph,
    ) -> Result<(VisualFeatureGraph, TextualFeatureGraph)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v = crate::vsg::encode_vsg(&mut tape, &bound, vsg, &self.config)?;
        let t = crate::tsg::encode_tsg(&mut tape, &bound, tsg, &self.config)?;
        Ok((v.materialize(&tape), t.materialize(&tape)))
    }

    /// Encodes every pair of a corpus, fanning out over up to `threads`
    /// worker threads. Results are positionally identical regardless of the
    /// thread count (each pair's math is independent and serial).
    pub fn encode_corpus(
        &self,
        corpus: &Corpus,
        threads: usize,
    ) -> Result<Vec<(VisualFeatureGraph, TextualFeatureGraph)>> {
        let n = corpus.pairs.len();
        let threads = threads.max(1).min(n.max(1));
        if threads <= 1 || n < 2 {
            return corpus
                .pairs
                .iter()
                .map(|(v, t)| self.encode_pair(v, t))
                .collect();
        }
        let chunk = n.div_ceil(threads);
        let mut results: Vec<Option<Result<(VisualFeatureGraph, TextualFeatureGraph)>>> =
            (0..n).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut rest: &mut [Option<_>] = &mut results;
            for c in 0..threads {
                let start = c * chunk;
                if start >= n {
                    break;
                }
                let take = chunk.min(n - start);
                let (head, tail) = rest.split_at_mut(take);
                rest = tail;
                let model = &*self;
                let pairs = &corpus.pairs[start..start + take];
                scope.spawn(move || {
                    for (slot, (v, t)) in head.iter_mut().zip(pairs) {
                        *slot = Some(model.encode_pair(v, t));
                    }
                });
            }
        });
        results
            .into_iter()
            .map(|r| r.expect("all chunks visited"))
            .collect()
    }
}

fn cell_fields(c: &GruCellParams) -> [(&'static str, &Tensor); 9] {
    [
        ("w_z", &c.w_z),
        ("u_z", &c.u_z),
        ("b_z", &c.b_z),
        ("w_r", &c.w_r),
        ("u_r", &c.u_r),
        ("b_r", &c.b_r),
        ("w_h", &c.w_h),
        ("u_h", &c.u_h),
        ("b_h", &c.b_h),
    ]
}

fn cell_fields_mut(c: &mut GruCellParams) -> [(&'static str, &mut Tensor); 9] {
    [
        ("w_z", &mut c.w_z),
        ("u_z", &mut c.u_z),
        ("b_z", &mut c.b_z),
        ("w_r", &mut c.w_r),
        ("u_r", &mut c.u_r),
        ("b_r", &mut c.b_r),
        ("w_h", &mut c.w_h),
        ("u_h", &mut c.u_h),
        ("b_h", &mut c.b_h),
    ]
}

// ─── Tape handles ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct BoundGruCell {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBiGru {
    pub fwd: BoundGruCell,
    pub bwd: BoundGruCell,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGcnLayer {
    pub g_o_w: Var,
    pub g_o_b: Var,
    pub g_r_w: Var,
    pub g_r_b: Var,
}

/// Tape handles for every model parameter, in the model's structure.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub w_o: Var,
    pub w_r: Var,
    pub w_u: Var,
    pub gcn: Vec<BoundGcnLayer>,
    pub w_e: Var,
    pub gru_w: BoundBiGru,
    pub gru_p: BoundBiGru,
    pub iso_w: Var,
    pub iso_b: Var,
    /// (canonical name, var) pairs, for gradient absorption by name.
    pub named: Vec<(String, Var)>,
}

impl BoundModel {
    /// Assembles handles from a flat var list in canonical parameter order.
    /// `vars` must have exactly the length of the model's parameter list for
    /// `cfg.gcn_layers` layers.
    pub fn from_vars(cfg: &ModelConfig, vars: &[Var]) -> BoundModel {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("var list shorter than parameter list");
        let (w_o, w_r, w_u) = (next(), next(), next());
        let gcn = (0..cfg.gcn_layers)
            .map(|_| BoundGcnLayer {
                g_o_w: next(),
                g_o_b: next(),
                g_r_w: next(),
                g_r_b: next(),
            })
            .collect();
        let w_e = next();
        let cell = |next: &mut dyn FnMut() -> Var| BoundGruCell {
            w_z: next(),
            u_z: next(),
            b_z: next(),
            w_r: next(),
            u_r: next(),
            b_r: next(),
            w_h: next(),
            u_h: next(),
            b_h: next(),
        };
        let gru_w = BoundBiGru {
            fwd: cell(&mut next),
            bwd: cell(&mut next),
        };
        let gru_p = BoundBiGru {
            fwd: cell(&mut next),
            bwd: cell(&mut next),
        };
        let (iso_w, iso_b) = (next(), next());
        assert!(it.next().is_none(), "var list longer than parameter list");
        BoundModel {
            w_o,
            w_r,
            w_u,
            gcn,
            w_e,
            gru_w,
            gru_p,
            iso_w,
            iso_b,
            named: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d1: 4,
            d2: 3,
            d_out: 5,
            c_o: 6,
            c_r: 2,
            vocab_size: 7,
            gcn_layers: 1,
            mode: Mode::Sgm,
            paths_from_hidden: false,
            l2_normalize: false,
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_in_range() {
        let a = SgmModel::new(small_config(), 9).unwrap();
        let b = SgmModel::new(small_config(), 9).unwrap();
        assert_eq!(a, b);
        let c = SgmModel::new(small_config(), 10).unwrap();
        assert_ne!(a, c);
        for (_, t) in a.named_params() {
            assert!(t.values.iter().all(|v| v.abs() < INIT_SCALE));
        }
    }

    #[test]
    fn canonical_order_is_stable_and_complete() {
        let m = SgmModel::new(small_config(), 1).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "vsg.w_o");
        assert_eq!(names[3], "vsg.gcn0.g_o.w");
        assert_eq!(names[7], "tsg.w_e");
        assert_eq!(names[8], "tsg.gru_w.fwd.w_z");
        assert_eq!(names[names.len() - 1], "tsg.iso.b");
        // 3 vsg + 4 gcn + 1 w_e + 4 cells × 9 + 2 iso
        assert_eq!(names.len(), 3 + 4 + 1 + 36 + 2);
        let mut m2 = SgmModel::new(small_config(), 1).unwrap();
        let names_mut: Vec<String> = m2.named_params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut, "both walks must agree");
    }

    #[test]
    fn bind_covers_every_param_and_orders_match() {
        let m = SgmModel::new(small_config(), 2).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        assert_eq!(bound.named.len(), m.named_params().len());
        assert_eq!(bound.named[0].1, bound.w_o);
        assert_eq!(bound.named[3].1, bound.gcn[0].g_o_w);
        assert_eq!(bound.named[7].1, bound.w_e);
        assert_eq!(bound.named.last().unwrap().1, bound.iso_b);
        for (name, var) in &bound.named {
            let original = m
                .named_params()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1;
            assert_eq!(&tape.value(*var).values, &original.values);
        }
    }

    #[test]
    fn set_param_checks_name_and_length() {
        let mut m = SgmModel::new(small_config(), 3).unwrap();
        let len = m.tsg.iso_b.len();
        m.set_param("tsg.iso.b", vec![1.5; len]).unwrap();
        assert!(m.tsg.iso_b.values.iter().all(|v| *v == 1.5));
        assert!(m.set_param("tsg.iso.b", vec![0.0; len + 1]).is_err());
        assert!(m.set_param("nope", vec![]).is_err());
    }

    #[test]
    fn label_embedding_table_fills_columns() {
        let mut cfg = small_config();
        cfg.c_o = 2;
        cfg.c_r = 1;
        let mut m = SgmModel::new(cfg, 4).unwrap();
        // 3 rows (2 object labels + 1 relationship label), d2 = 3.
        let table = Tensor::new(
            vec![3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        m.load_label_embeddings(&table).unwrap();
        // Column 0 of W_o = first table row.
        assert_eq!(m.vsg.w_o.at(0, 0), 1.0);
        assert_eq!(m.vsg.w_o.at(1, 0), 2.0);
        assert_eq!(m.vsg.w_o.at(2, 0), 3.0);
        assert_eq!(m.vsg.w_o.at(0, 1), 4.0);
        assert_eq!(m.vsg.w_r.at(0, 0), 7.0);
        let bad = Tensor::zeros(vec![2, 3]);
        assert!(m.load_label_embeddings(&bad).is_err());
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in Mode::ALL {
            let s = mode.to_string();
            assert_eq!(Mode::from_str(&s).unwrap(), mode);
        }
        assert_eq!(Mode::from_str("OOM-VREL").unwrap(), Mode::OomVrel);
        assert!(Mode::from_str("bogus").is_err());
    }

    #[test]
    fn mode_gates_match_their_definitions() {
        assert!(Mode::Sgm.uses_visual_relationships());
        assert!(Mode::Sgm.uses_textual_relationships());
        assert!(!Mode::Oom.uses_visual_relationships());
        assert!(!Mode::Oom.uses_textual_relationships());
        assert!(Mode::Oom.uses_word_context());
        assert!(Mode::OomVrel.uses_visual_relationships());
        assert!(!Mode::OomVrel.uses_textual_relationships());
        assert!(!Mode::OomTrel.uses_visual_relationships());
        assert!(Mode::OomTrel.uses_textual_relationships());
        assert!(!Mode::OomNoTcxt.uses_word_context());
    }
}
