//! `sgm` — synth | train | eval | score | gradcheck.
//!
//! Exit codes: 0 success, 1 usage/validation, 2 I/O. Every run prints a
//! resolved-config JSON line first so results are reproducible from logs
//! alone. `SGM_THREADS` caps internal parallelism (default 1, which keeps
//! all outputs bitwise reproducible).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sgm_core::eval::{evaluate_both, metrics_from_matrix, pair_score_matrix, Direction};
use sgm_core::gradcheck::run_gradcheck;
use sgm_core::io::{load_checkpoint, load_corpus, save_checkpoint, save_corpus, save_matrix};
use sgm_core::matching::score_pair;
use sgm_core::model::Mode;
use sgm_core::trainer::{train_with, TrainConfig};
use sgm_core::{generate_synthetic, Corpus, SgmModel, SgmError, SynthSpec};

// ─── Argument surface ───────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "sgm", version, about = "Scene-graph matching pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic corpus.
    Synth(SynthArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Compute retrieval metrics for a trained model.
    Eval(EvalArgs),
    /// Score one image–caption pair with alignment details.
    Score(ScoreArgs),
    /// Verify gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of image–caption pairs (>= 2).
    #[arg(long)]
    pairs: usize,
    /// Output directory for graphs.json + features.bin.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    d1: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 2)]
    relationships: usize,
    /// Make pairs distinguishable only by relationships and paths.
    #[arg(long)]
    relation_only: bool,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long)]
    features: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Checkpoint output path (receives the best-validation epoch).
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log (default: <out>.log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    batch: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sgm")]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    gcn_layers: usize,
    /// Node-feature dimensionality (defaults to the corpus declaration).
    #[arg(long)]
    d1: Option<usize>,
    /// Label/word embedding dimensionality.
    #[arg(long, default_value_t = 300)]
    d2: usize,
    /// Joint embedding dimensionality D.
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    /// Global-norm gradient clip.
    #[arg(long, default_value_t = 10.0)]
    grad_clip: f64,
    /// Disable gradient clipping.
    #[arg(long, conflicts_with = "grad_clip")]
    no_grad_clip: bool,
    /// Hold out this many trailing pairs for validation (0: validate on
    /// the training split).
    #[arg(long, default_value_t = 0)]
    val_pairs: usize,
    /// L2-normalize rows before similarity.
    #[arg(long)]
    l2_normalize: bool,
    /// Feed path GRUs from contextual word states instead of embeddings.
    #[arg(long)]
    paths_from_hidden: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write report.json.
    #[arg(long)]
    out: PathBuf,
    /// both | caption-retrieval | image-retrieval.
    #[arg(long, default_value = "both")]
    direction: String,
    /// Also dump the image × caption score matrix (features.bin layout).
    #[arg(long)]
    dump_scores: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pair index of the image.
    #[arg(long)]
    image: usize,
    /// Pair index of the caption.
    #[arg(long)]
    caption: usize,
    /// Machine-readable output instead of the alignment table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

// ─── Entry point and exit-code mapping ──────────────────────────────────

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SgmError::Io { .. } | SgmError::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, SgmError> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn threads_from_env() -> usize {
    std::env::var("SGM_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

fn echo_config(value: serde_json::Value) {
    println!("{value}");
}

// ─── Subcommands ────────────────────────────────────────────────────────

fn cmd_synth(a: SynthArgs) -> Result<ExitCode, SgmError> {
    let spec = SynthSpec {
        d1: a.d1,
        objects_per_pair: a.objects,
        relationships_per_pair: a.relationships,
        relation_only: a.relation_only,
    };
    echo_config(json!({
        "command": "synth",
        "seed": a.seed,
        "pairs": a.pairs,
        "out": a.out,
        "spec": spec,
    }));
    let corpus = generate_synthetic(a.seed, a.pairs, &spec)?;
    fs::create_dir_all(&a.out).map_err(|e| SgmError::io(&a.out, e))?;
    let graphs = a.out.join("graphs.json");
    let features = a.out.join("features.bin");
    save_corpus(&corpus, &graphs, &features)?;
    println!(
        "wrote {} pairs to {} and {}",
        corpus.len(),
        graphs.display(),
        features.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode, SgmError> {
    let corpus = load_corpus(&a.corpus.graphs, &a.corpus.features)?;
    let cfg = TrainConfig {
        batch_size: a.batch,
        lr: a.lr,
        margin: a.margin,
        epochs: a.epochs,
        seed: a.seed,
        mode: a.mode,
        d1: a.d1.unwrap_or(corpus.d1),
        d2: a.d2,
        d_out: a.dim,
        gcn_layers: a.gcn_layers,
        grad_clip: if a.no_grad_clip { None } else { Some(a.grad_clip) },
        val_pairs: a.val_pairs,
        l2_normalize: a.l2_normalize,
        paths_from_hidden: a.paths_from_hidden,
    };
    let threads = threads_from_env();
    echo_config(json!({
        "command": "train",
        "graphs": a.corpus.graphs,
        "features": a.corpus.features,
        "out": a.out,
        "resume": a.resume,
        "threads": threads,
        "config": cfg,
    }));

    let resume = a.resume.as_ref().map(load_checkpoint).transpose()?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| append_extension(&a.out, "log.jsonl"));
    let mut log = fs::File::create(&log_path).map_err(|e| SgmError::io(&log_path, e))?;

    let mut log_error = None;
    let outcome = train_with(&corpus, &cfg, resume, threads, |stats| {
        let line = serde_json::to_string(stats).expect("epoch stats serialize");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(SgmError::io(&log_path, e));
    }

    save_checkpoint(&outcome.best, &a.out)?;
    println!(
        "saved best checkpoint (epoch {}, val_r1_sum {:.1}) to {}",
        outcome.best.epoch,
        outcome.best.history.last().map(|s| s.val_r1_sum).unwrap_or(0.0),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode, SgmError> {
    let corpus = load_corpus(&a.corpus.graphs, &a.corpus.features)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    check_compat(&ckpt.model, &corpus)?;
    let threads = threads_from_env();
    echo_config(json!({
        "command": "eval",
        "graphs": a.corpus.graphs,
        "features": a.corpus.features,
        "checkpoint": a.checkpoint,
        "out": a.out,
        "direction": a.direction,
        "threads": threads,
    }));

    let reports = match a.direction.to_ascii_lowercase().as_str() {
        "both" => {
            let (cap, img) = evaluate_both(&ckpt.model, &corpus, threads)?;
            vec![cap, img]
        }
        other => {
            let direction: Direction = other.parse()?;
            let scores = pair_score_matrix(&ckpt.model, &corpus, threads)?;
            vec![metrics_from_matrix(&scores, direction)?]
        }
    };

    println!(
        "{:<18} {:>7} {:>7} {:>7} {:>7}",
        "direction", "R@1", "R@5", "R@10", "Medr"
    );
    for r in &reports {
        println!(
            "{:<18} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
            r.direction.to_string(),
            r.r_at(1),
            r.r_at(5),
            r.r_at(10),
            r.medr
        );
    }

    let summaries: Vec<_> = reports.iter().map(|r| r.summary()).collect();
    let payload = if summaries.len() == 1 {
        serde_json::to_string_pretty(&summaries[0])
    } else {
        serde_json::to_string_pretty(&summaries)
    }
    .expect("report serialize");
    fs::write(&a.out, payload + "\n").map_err(|e| SgmError::io(&a.out, e))?;
    println!("wrote {}", a.out.display());

    if let Some(path) = a.dump_scores {
        // Canonical orientation: rows are images, columns are captions.
        let scores = pair_score_matrix(&ckpt.model, &corpus, threads)?;
        save_matrix(&scores, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_score(a: ScoreArgs) -> Result<ExitCode, SgmError> {
    let corpus = load_corpus(&a.corpus.graphs, &a.corpus.features)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    check_compat(&ckpt.model, &corpus)?;
    if a.image >= corpus.len() || a.caption >= corpus.len() {
        return Err(SgmError::contract(format!(
            "pair indices image={} caption={} out of range for {} pairs",
            a.image,
            a.caption,
            corpus.len()
        )));
    }
    echo_config(json!({
        "command": "score",
        "checkpoint": a.checkpoint,
        "image": a.image,
        "caption": a.caption,
    }));

    let vsg = &corpus.pairs[a.image].0;
    let tsg = &corpus.pairs[a.caption].1;
    let (vfg, tfg) = ckpt.model.encode_pair(vsg, tsg)?;
    let br = score_pair(&vfg, &tfg, ckpt.model.config.l2_normalize)?;

    if a.json {
        let obj_rows: Vec<Vec<f64>> = matrix_rows(&br.object_score_matrix);
        let rel_rows: Vec<Vec<f64>> = matrix_rows(&br.relationship_score_matrix);
        println!(
            "{}",
            json!({
                "s_total": br.s_total,
                "s_object": br.s_object,
                "s_relationship": br.s_relationship,
                "object_argmax": br.object_argmax,
                "relationship_argmax": br.relationship_argmax,
                "object_score_matrix": obj_rows,
                "relationship_score_matrix": rel_rows,
            })
        );
        return Ok(ExitCode::SUCCESS);
    }

    println!("S       = {:.6}", br.s_total);
    println!("S^o     = {:.6}", br.s_object);
    println!("S^r     = {:.6}", br.s_relationship);
    for (w, &obj) in br.object_argmax.iter().enumerate() {
        let word = corpus
            .vocab
            .get(tsg.tokens[w])
            .map(String::as_str)
            .unwrap_or("?");
        println!(
            "word {w} ({word:?}) -> object {obj} (score {:.6})",
            br.object_score_matrix.at(w, obj)
        );
    }
    for (p, &rel) in br.relationship_argmax.iter().enumerate() {
        println!(
            "path {p} -> relationship {rel} (score {:.6})",
            br.relationship_score_matrix.at(p, rel)
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode, SgmError> {
    echo_config(json!({
        "command": "gradcheck",
        "seed": a.seed,
        "tolerance": a.tolerance,
        "cases": a.cases,
    }));
    let report = run_gradcheck(a.seed, a.tolerance, a.cases)?;
    print!("{}", report.render_table());
    if report.all_pass() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check exceeded tolerance {}", a.tolerance);
        Ok(ExitCode::from(1))
    }
}

// ─── Helpers ────────────────────────────────────────────────────────────

/// The checkpoint's declared shapes must match the corpus being scored.
fn check_compat(model: &SgmModel, corpus: &Corpus) -> Result<(), SgmError> {
    let cfg = &model.config;
    let mismatches = [
        ("d1", cfg.d1, corpus.d1),
        ("c_o", cfg.c_o, corpus.c_o),
        ("c_r", cfg.c_r, corpus.c_r),
        ("vocab size", cfg.vocab_size, corpus.vocab.len()),
    ];
    for (name, model_dim, corpus_dim) in mismatches {
        if model_dim != corpus_dim {
            return Err(SgmError::dimension(
                "eval",
                format!("checkpoint {name}={model_dim} vs corpus {name}={corpus_dim}"),
            ));
        }
    }
    Ok(())
}

fn matrix_rows(m: &sgm_core::Tensor) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| m.values[r * m.cols()..(r + 1) * m.cols()].to_vec())
        .collect()
}

fn append_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}
