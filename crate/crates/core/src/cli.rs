//! `recap` command line: one verb per pipeline step, each writing a manifest
//! next to its artifacts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Ablation, Config};
use crate::corpus::synth::{generate_synthetic_corpus, SynthSpec, TemplateLabeler};
use crate::corpus::{load_corpus, write_corpus, CorpusSplit, Split};
use crate::error::{RecapError, Result};
use crate::evaluator::MetricsReport;
use crate::graph::{ProgressionGraph, Relation};
use crate::trainer::{
    build_graph, build_vocabulary, load_lexicons, train_stage1, train_stage2, ContextSource, EpochRecord,
    Stage1Bundle, Stage2Bundle,
};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "recap", version, about = "Two-stage radiology report generation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// TOML config file (defaults to the toy preset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Config override `section.key=value`; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write a procedural corpus as JSON lines.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Output directory; receives corpus.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine the progression graph from the training partition.
    BuildGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Graph JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode reports for one partition.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: CheckpointInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one partition and score it against the references.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: CheckpointInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a graph file.
    InspectGraph {
        #[arg(long)]
        graph: PathBuf,
        /// Edges listed per relation.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

#[derive(Debug, Args, Clone)]
struct CheckpointInputs {
    /// Stage-2 checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the corpus the checkpoint was trained on.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Defaults to the graph stored in the checkpoint.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Feed gold observations and progressions instead of Stage-1 predictions.
    #[arg(long)]
    gold_context: bool,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("expected none, no-op, no-obs, no-pro or no-prr, got {s:?}"))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("expected train, validation or test, got {s:?}"))
}

/// Parses `argv` (program name first), runs the verb and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let command: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match init_workers().and_then(|_| dispatch(cli.verb, &command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind(), e.to_string());
            match e {
                RecapError::Config(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var("RECAP_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| RecapError::Config(format!("RECAP_NUM_WORKERS={raw:?} is not a positive integer")))?;
    // a pool set up earlier in the process (tests) stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(verb: Verb, command: &[String]) -> Result<()> {
    match verb {
        Verb::SynthData { common, out } => synth_data(command, &common, &out),
        Verb::BuildGraph { common, corpus, k, out } => build_graph_cmd(command, &common, &corpus, k, &out),
        Verb::TrainStage1 { common, corpus, out } => train_stage1_cmd(command, &common, &corpus, &out),
        Verb::TrainStage2 {
            common,
            corpus,
            graph,
            checkpoint,
            ablation,
            out,
        } => train_stage2_cmd(command, &common, &corpus, &graph, &checkpoint, ablation, &out),
        Verb::Generate { common, source, out } => decode_cmd(command, &common, &source, &out, false),
        Verb::Evaluate { common, source, out } => decode_cmd(command, &common, &source, &out, true),
        Verb::InspectGraph { graph, top } => inspect_graph(&graph, top),
    }
}

// ---------------------------------------------------------------- config

fn resolve_config(common: &Common, base: Option<Config>) -> Result<Config> {
    let mut config = match (&common.config, base) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(b)) => b,
        (None, None) => Config::toy(),
    };
    for s in &common.set {
        config.set(s)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------- manifest

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a [String],
    status: &'a str,
    config_hash: String,
    seed: u64,
    config: String,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

/// Manifest written when a verb starts; `finish` rewrites it with the
/// hashes of what the verb produced.
struct Run<'a> {
    command: &'a [String],
    config: &'a Config,
    inputs: BTreeMap<String, String>,
    manifest: PathBuf,
}

impl<'a> Run<'a> {
    fn start(command: &'a [String], config: &'a Config, inputs: &[&Path], manifest: PathBuf) -> Result<Self> {
        let mut hashed = BTreeMap::new();
        for p in inputs {
            hashed.insert(p.display().to_string(), hash_path(p)?);
        }
        if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        let run = Run {
            command,
            config,
            inputs: hashed,
            manifest,
        };
        run.write("running", BTreeMap::new())?;
        Ok(run)
    }

    fn write(&self, status: &str, artifacts: BTreeMap<String, String>) -> Result<()> {
        let m = Manifest {
            command: self.command,
            status,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            config: self.config.to_toml()?,
            inputs: self.inputs.clone(),
            artifacts,
        };
        write_file(&self.manifest, serde_json::to_vec_pretty(&m)?)
    }

    fn finish(self, artifacts: &[&Path]) -> Result<()> {
        let mut hashed = BTreeMap::new();
        for p in artifacts {
            if p.is_dir() {
                for (rel, h) in hash_tree(p)? {
                    if p.join(&rel) != self.manifest {
                        hashed.insert(p.join(rel).display().to_string(), h);
                    }
                }
            } else {
                hashed.insert(p.display().to_string(), hash_file(p)?);
            }
        }
        self.write("complete", hashed)
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| RecapError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Relative path → sha256 for every file below `dir`, sorted.
fn hash_tree(dir: &Path) -> Result<BTreeMap<PathBuf, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let here = dir.join(&rel);
        let entries = fs::read_dir(&here).map_err(|e| RecapError::io(&here, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| RecapError::io(&here, e))?;
            let child = rel.join(entry.file_name());
            if entry.path().is_dir() {
                stack.push(child);
            } else {
                out.insert(child, hash_file(&entry.path())?);
            }
        }
    }
    Ok(out)
}

/// Run bookkeeping that records absolute paths; left out of directory hashes.
const BOOKKEEPING: [&str; 2] = ["manifest.json", "inputs.json"];

/// A file's hash, or one hash over the sorted tree of a directory.
fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut h = Sha256::new();
    for (rel, digest) in hash_tree(path)? {
        if rel.file_name().is_some_and(|n| BOOKKEEPING.iter().any(|b| n == *b)) {
            continue;
        }
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update([0]);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| RecapError::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RecapError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| RecapError::io(path, e))
}

fn file_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn log_epoch(stage: &str, r: &EpochRecord) {
    eprintln!("{stage} epoch {:>3}  loss {:.4}  metric {:.4}", r.epoch, r.train_loss, r.metric);
}

// ---------------------------------------------------------------- verbs

fn synth_data(command: &[String], common: &Common, out: &Path) -> Result<()> {
    let config = resolve_config(common, None)?;
    let run = Run::start(command, &config, &[], out.join("manifest.json"))?;
    let spec = SynthSpec::from_config(&config, load_lexicons(&config)?);
    let corpus = generate_synthetic_corpus(&spec)?;
    let path = out.join("corpus.jsonl");
    write_corpus(&corpus, &path)?;
    eprintln!(
        "wrote {} records ({} train, {} validation, {} test) to {}",
        corpus.len(),
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len(),
        path.display()
    );
    run.finish(&[&path])
}

fn build_graph_cmd(command: &[String], common: &Common, corpus: &Path, k: Option<usize>, out: &Path) -> Result<()> {
    let mut config = resolve_config(common, None)?;
    if let Some(k) = k {
        config.graph.k = k;
        config.validate()?;
    }
    let run = Run::start(command, &config, &[corpus], file_manifest(out))?;
    let split = load_corpus(corpus)?;
    let (_, graph) = build_graph(&split, &config)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    graph.save(out)?;
    eprintln!(
        "graph: {} nodes, {} edges, k = {}",
        graph.nodes.len(),
        graph.edges.len(),
        graph.k
    );
    run.finish(&[out])
}

fn train_stage1_cmd(command: &[String], common: &Common, corpus: &Path, out: &Path) -> Result<()> {
    let config = resolve_config(common, None)?;
    let run = Run::start(command, &config, &[corpus], out.join("manifest.json"))?;
    let split = load_corpus(corpus)?;
    let outcome = train_stage1(&split, &config, |r| log_epoch("stage1", r))?;
    outcome.save(out)?;
    eprintln!("kept epoch {}", outcome.best_epoch);
    run.finish(&[out])
}

/// Where generate/evaluate find the training corpus by default.
#[derive(Serialize, serde::Deserialize)]
struct Inputs {
    corpus: PathBuf,
}

fn train_stage2_cmd(
    command: &[String],
    common: &Common,
    corpus: &Path,
    graph_path: &Path,
    checkpoint: &Path,
    ablation: Option<Ablation>,
    out: &Path,
) -> Result<()> {
    let stage1 = Stage1Bundle::load(checkpoint)?;
    let mut config = resolve_config(common, Some(stage1.config.clone()))?;
    if let Some(a) = ablation {
        config.stage2.ablation = a;
    }
    if config.model != stage1.config.model {
        return Err(RecapError::Config(
            "[model] differs from the Stage-1 checkpoint it initializes from".into(),
        ));
    }
    let run = Run::start(command, &config, &[corpus, graph_path, checkpoint], out.join("manifest.json"))?;
    let split = load_corpus(corpus)?;
    let graph = ProgressionGraph::load(graph_path)?;
    let outcome = train_stage2(&split, &graph, stage1, &config, |r| log_epoch("stage2", r))?;
    outcome.save(out)?;
    graph.save(&out.join("graph.json"))?;
    let corpus_abs = fs::canonicalize(corpus).map_err(|e| RecapError::io(corpus, e))?;
    write_file(
        &out.join("inputs.json"),
        serde_json::to_vec_pretty(&Inputs { corpus: corpus_abs })?,
    )?;
    eprintln!("kept epoch {}", outcome.best_epoch);
    run.finish(&[out])
}

#[derive(Serialize)]
struct Generation<'a> {
    study_id: &'a str,
    generated: &'a str,
    reference: &'a str,
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    split: &'a str,
    context: &'a str,
    config_hash: String,
    checkpoint_hash: String,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

fn decode_cmd(command: &[String], common: &Common, src: &CheckpointInputs, out: &Path, score: bool) -> Result<()> {
    if common.config.is_some() {
        return Err(RecapError::Config(
            "generate and evaluate take their config from the checkpoint; use --set to override".into(),
        ));
    }
    let graph_path = src.graph.clone().unwrap_or_else(|| src.checkpoint.join("graph.json"));
    let corpus_path = match &src.corpus {
        Some(p) => p.clone(),
        None => {
            let inputs: Inputs = serde_json::from_str(&read_string(&src.checkpoint.join("inputs.json"))?)?;
            inputs.corpus
        }
    };
    let graph = ProgressionGraph::load(&graph_path)?;
    let mut bundle = Stage2Bundle::load(&src.checkpoint, &graph)?;
    let mut config = resolve_config(common, Some(bundle.config.clone()))?;
    if let Some(n) = src.max_steps {
        config.decode.max_steps = n;
        config.validate()?;
    }
    bundle.config = config.clone();
    let run = Run::start(
        command,
        &config,
        &[&corpus_path, &graph_path, &src.checkpoint],
        out.join("manifest.json"),
    )?;
    let corpus = load_corpus(&corpus_path)?;
    check_corpus_vocabulary(&corpus, &config, &bundle)?;
    let (source, context) = if src.gold_context {
        (ContextSource::Gold, "gold")
    } else {
        (ContextSource::Predicted, "predicted")
    };
    let records = corpus.partition(src.split);
    let (generated, metrics) = if score {
        let (g, m) = bundle.evaluate(&corpus, src.split, &graph, source, &TemplateLabeler::default())?;
        (g, Some(m))
    } else {
        let images = crate::trainer::load_images(records)?;
        (bundle.generate_split(&corpus, src.split, &images, &graph, source)?, None)
    };
    let mut lines = String::new();
    for (r, g) in records.iter().zip(&generated) {
        let reference = r.report_tokens().join(" ");
        let row = Generation {
            study_id: &r.study_id,
            generated: g,
            reference: &reference,
        };
        lines.push_str(&serde_json::to_string(&row)?);
        lines.push('\n');
    }
    let gen_path = out.join("generations.jsonl");
    write_file(&gen_path, lines)?;
    let mut artifacts = vec![gen_path];
    if let Some(m) = metrics {
        let path = out.join("metrics.json");
        let doc = EvaluationOutput {
            split: src.split.as_str(),
            context,
            config_hash: config.hash(),
            checkpoint_hash: hash_path(&src.checkpoint)?,
            metrics: &m,
        };
        write_file(&path, serde_json::to_vec_pretty(&doc)?)?;
        println!("{}", m.to_table());
        artifacts.push(path);
    } else {
        eprintln!("wrote {} reports", generated.len());
    }
    let refs: Vec<&Path> = artifacts.iter().map(PathBuf::as_path).collect();
    run.finish(&refs)
}

/// The checkpoint's vocabulary must be the one the corpus induces.
fn check_corpus_vocabulary(corpus: &CorpusSplit, config: &Config, bundle: &Stage2Bundle) -> Result<()> {
    let vocab = build_vocabulary(corpus, config)?;
    if vocab.tokens() != bundle.vocab.tokens() {
        return Err(RecapError::Checkpoint(
            "corpus vocabulary differs from the checkpoint's; pass the training corpus".into(),
        ));
    }
    Ok(())
}

fn inspect_graph(path: &Path, top: usize) -> Result<()> {
    let graph = ProgressionGraph::load(path)?;
    let entities = graph.entity_indices();
    println!("nodes      {}", graph.nodes.len());
    println!("entities   {}", entities.len());
    println!("edges      {}", graph.edges.len());
    println!("k          {}", graph.k);
    println!("hash       {}", graph.hash()?);
    for rel in Relation::ALL {
        let mut edges: Vec<_> = graph.edges.iter().filter(|e| e.rel == rel).collect();
        if edges.is_empty() {
            continue;
        }
        println!("\n{} ({} edges)", rel.as_str(), edges.len());
        let key = |e: &crate::graph::TypedEdge| e.pmi.unwrap_or(f64::NEG_INFINITY);
        edges.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.src.cmp(&b.src)).then(a.dst.cmp(&b.dst)));
        for e in edges.iter().take(top) {
            let (s, d) = (&graph.nodes[e.src], &graph.nodes[e.dst]);
            let pmi = e.pmi.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            println!("  {:<40} -> {:<20} {pmi}", node_name(s), node_name(d));
        }
    }
    Ok(())
}

fn node_name(n: &crate::graph::GraphNode) -> String {
    let side = match n.side {
        Some(crate::graph::Side::Prior) => "prior ",
        _ => "",
    };
    match n.status {
        Some(s) => format!("{side}{} {}", n.label, s.as_str()),
        None => n.label.clone(),
    }
}
