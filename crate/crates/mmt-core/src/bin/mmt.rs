//! Command-line workflow: data preparation, training, image-free
//! translation, evaluation, retrieval analysis, ablation, degradation,
//! feature/attention export, and the gradient self-check.
//!
//! Exit codes: 0 success, 1 contract/runtime error, 2 usage error.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mmt_core::data::{
    self, SynthConfig, SynthMeta, TripletExample, Vocabulary,
};
use mmt_core::error::Error;
use mmt_core::eval;
use mmt_core::model::{AttentionRecord, Model, ModelConfig};
use mmt_core::tensor::{grad_check, io as tio, Tensor};
use mmt_core::train::{load_checkpoint, train, TrainConfig};

#[derive(Parser)]
#[command(name = "mmt", version, about = "Image-free multimodal machine translation")]
struct Cli {
    /// Print the full flag schema as JSON and exit.
    #[arg(long, global = true)]
    help_json: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest a corpus and build its vocabulary.
    Prepare(PrepareArgs),
    /// Train a model on a prepared data directory.
    Train(TrainArgs),
    /// Translate source sentences with a trained checkpoint (no image input).
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate(EvaluateArgs),
    /// Feature retrieval: generated features query teacher image features.
    Retrieve(RetrieveArgs),
    /// Clean-versus-masked translation quality for a mask token set.
    Degrade(DegradeArgs),
    /// Train and score the whole ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference verification of every differentiable operation.
    Gradcheck,
    /// Write generated multimodal features as tensor files.
    ExportFeatures(ExportFeaturesArgs),
    /// Write encoder attention maps for one sentence as JSON.
    ExportAttention(ExportAttentionArgs),
}

#[derive(clap::Args)]
struct PrepareArgs {
    /// Generate a synthetic disambiguation corpus with this many examples.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Source text file (one sentence per line), for real-corpus mode.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Target text file aligned with --src.
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Optional directory of {line}.tnsr images for real-corpus mode.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output data directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fraction of synthetic sentences that carry an ambiguous token.
    #[arg(long, default_value_t = 1.0)]
    ambiguity_rate: f64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Prepared data directory (train.src, train.tgt, vocab.txt, images/).
    #[arg(long)]
    data: PathBuf,
    /// JSON config with "model" and "train" sections; defaults fill gaps.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides both the model and shuffle seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct TranslateArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    src: PathBuf,
    /// Hypothesis output file, one translation per line.
    #[arg(long)]
    out: PathBuf,
    /// Beam width; 1 is greedy.
    #[arg(long, default_value_t = 1)]
    beam: usize,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(clap::Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data directory with images.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the report and cosine matrix.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated recall cutoffs.
    #[arg(long, default_value = "1,5,10")]
    k: String,
}

#[derive(clap::Args)]
struct DegradeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated source tokens to replace with the placeholder.
    #[arg(long)]
    mask: String,
    /// Optional JSON report output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Base config JSON ("model"/"train" sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON results output path.
    #[arg(long)]
    out: PathBuf,
    /// Parallel worker count; results are ordered by grid index
    /// regardless.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(clap::Args)]
struct ExportFeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    /// Output directory; one m_{line}.tnsr per sentence.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ExportAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    /// Zero-based line to export.
    #[arg(long, default_value_t = 0)]
    line: usize,
    /// JSON output path.
    #[arg(long)]
    out: PathBuf,
}

/// Combined run configuration file: both sections optional, all fields
/// defaulted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
    version: String,
    wall_clock_secs: f64,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.help_json {
        println!("{}", help_schema());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("usage error: a subcommand is required (try --help)");
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck => cmd_gradcheck(),
        Command::ExportFeatures(a) => cmd_export_features(a),
        Command::ExportAttention(a) => cmd_export_attention(a),
    }
}

/// Machine-readable flag schema for every subcommand.
fn help_schema() -> String {
    let cmd = Cli::command();
    let arg_json = |a: &clap::Arg| {
        serde_json::json!({
            "name": a.get_id().as_str(),
            "long": a.get_long(),
            "required": a.is_required_set(),
            "takes_value": a.get_num_args().map(|n| n.takes_values()).unwrap_or(false),
            "help": a.get_help().map(|h| h.to_string()),
        })
    };
    let subs: Vec<serde_json::Value> = cmd
        .get_subcommands()
        .map(|s| {
            serde_json::json!({
                "name": s.get_name(),
                "about": s.get_about().map(|a| a.to_string()),
                "flags": s.get_arguments().map(arg_json).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "name": cmd.get_name(),
        "version": env!("CARGO_PKG_VERSION"),
        "global_flags": cmd.get_arguments().map(arg_json).collect::<Vec<_>>(),
        "subcommands": subs,
    }))
    .expect("schema serializes")
}

fn write_manifest(
    dir_or_file: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
    seed: Option<u64>,
    started: Instant,
) -> Result<(), Error> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let path = if dir_or_file.is_dir() {
        dir_or_file.join("run_manifest.json")
    } else {
        let name = dir_or_file
            .file_name()
            .map(|n| format!("{}.manifest.json", n.to_string_lossy()))
            .unwrap_or_else(|| "run_manifest.json".to_string());
        dir_or_file.with_file_name(name)
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

struct DataDir {
    vocab: Vocabulary,
    examples: Vec<TripletExample>,
    metas: Option<Vec<SynthMeta>>,
}

fn load_data_dir(dir: &Path, with_images: bool) -> Result<DataDir, Error> {
    let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
    let image_dir = dir.join("images");
    let images = (with_images && image_dir.is_dir()).then_some(image_dir);
    let examples = data::load_corpus(
        dir.join("train.src"),
        dir.join("train.tgt"),
        images.as_deref(),
        &vocab,
    )?;
    let metas = match fs::read_to_string(dir.join("meta.json")) {
        Ok(text) => Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("meta.json: {e}")))?,
        ),
        Err(_) => None,
    };
    Ok(DataDir {
        vocab,
        examples,
        metas,
    })
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::format(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("{}: {e}", p.display())))
        }
    }
}

fn load_model_with_vocab(checkpoint: &Path) -> Result<(Model, Vocabulary), Error> {
    let loaded = load_checkpoint(checkpoint, None)?;
    let vocab = Vocabulary::load(checkpoint.join("vocab.txt"))?;
    Ok((loaded.model, vocab))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Error> {
    Ok(fs::read_to_string(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn cmd_prepare(a: PrepareArgs) -> CliResult {
    let started = Instant::now();
    let real = a.src.is_some() || a.tgt.is_some();
    match (a.synthetic, real) {
        (Some(_), true) => {
            return Err(CliError::Usage(
                "--synthetic conflicts with --src/--tgt".to_string(),
            ))
        }
        (None, false) => {
            return Err(CliError::Usage(
                "choose --synthetic N or --src/--tgt".to_string(),
            ))
        }
        _ => {}
    }
    if let Some(n) = a.synthetic {
        let cfg = SynthConfig {
            n,
            seed: a.seed,
            ambiguity_rate: a.ambiguity_rate,
            ..Default::default()
        };
        let corpus = data::synth_generate(&cfg)?;
        let vocab = data::synth_vocabulary(&corpus);
        data::write_corpus(&a.out, &corpus, &vocab)?;
        println!(
            "wrote {} synthetic examples, vocabulary of {} tokens",
            n,
            vocab.len()
        );
        write_manifest(
            &a.out,
            "prepare",
            serde_json::to_value(&cfg).map_err(Error::from)?,
            &[],
            &[&a.out],
            Some(a.seed),
            started,
        )?;
        return Ok(());
    }
    let (src, tgt) = match (&a.src, &a.tgt) {
        (Some(s), Some(t)) => (s, t),
        _ => {
            return Err(CliError::Usage(
                "real-corpus mode needs both --src and --tgt".to_string(),
            ))
        }
    };
    let src_lines = read_lines(src)?;
    let tgt_lines = read_lines(tgt)?;
    let tokens: Vec<&str> = src_lines
        .iter()
        .chain(&tgt_lines)
        .flat_map(|l| l.split_whitespace())
        .collect();
    let vocab = Vocabulary::build(tokens);
    // Validates alignment and image files before anything is written.
    data::load_corpus(src, tgt, a.images.as_deref(), &vocab)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    fs::write(a.out.join("train.src"), src_lines.join("\n") + "\n").map_err(Error::from)?;
    fs::write(a.out.join("train.tgt"), tgt_lines.join("\n") + "\n").map_err(Error::from)?;
    vocab.save(a.out.join("vocab.txt"))?;
    if let Some(images) = &a.images {
        let out_images = a.out.join("images");
        fs::create_dir_all(&out_images).map_err(Error::from)?;
        for i in 0..src_lines.len() {
            let t = tio::read_tensor(images.join(format!("{i}.tnsr")))?;
            tio::write_tensor(out_images.join(format!("{i}.tnsr")), &t)?;
        }
    }
    println!(
        "wrote {} examples, vocabulary of {} tokens",
        src_lines.len(),
        vocab.len()
    );
    write_manifest(
        &a.out,
        "prepare",
        serde_json::json!({"mode": "real"}),
        &[src, tgt],
        &[&a.out],
        Some(a.seed),
        started,
    )?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let started = Instant::now();
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = Some(m);
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let dd = load_data_dir(&a.data, true)?;
    let model = Model::new(cfg.model.clone(), dd.vocab.len())?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut metrics = fs::File::create(a.out.join("metrics.jsonl")).map_err(Error::from)?;
    let report = train(
        &model,
        &dd.examples,
        &cfg.train,
        Some(&mut metrics),
        Some(&a.out),
    )?;
    dd.vocab.save(a.out.join("vocab.txt"))?;
    if let Some(m) = &report.final_metrics {
        println!(
            "trained {} steps; final loss {:.4} ({:.4}/token)",
            report.steps, m.total, m.per_token
        );
    }
    if let Some(metas) = &dd.metas {
        if metas.len() == dd.examples.len() {
            let acc = eval::ambiguous_accuracy(&model, &dd.examples, metas, &dd.vocab)?;
            println!("ambiguous-sense accuracy {acc:.4}");
        }
    }
    write_manifest(
        &a.out,
        "train",
        serde_json::to_value(&cfg).map_err(Error::from)?,
        &[&a.data],
        &[&a.out],
        Some(cfg.train.seed),
        started,
    )?;
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> CliResult {
    let started = Instant::now();
    if a.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".to_string()));
    }
    let (model, vocab) = load_model_with_vocab(&a.checkpoint)?;
    let lines = read_lines(&a.src)?;
    let mut out = String::new();
    for line in &lines {
        let ids = vocab.encode_line(line);
        let decoded = if a.beam == 1 {
            model.greedy_decode(&ids)?
        } else {
            model.beam_decode(&ids, a.beam)?
        };
        out.push_str(&vocab.decode_ids(&decoded));
        out.push('\n');
    }
    fs::write(&a.out, out).map_err(Error::from)?;
    println!("translated {} sentences", lines.len());
    write_manifest(
        &a.out,
        "translate",
        serde_json::json!({"beam": a.beam}),
        &[&a.checkpoint, &a.src],
        &[&a.out],
        None,
        started,
    )?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let hyp = read_lines(&a.hyp)?;
    let reference = read_lines(&a.reference)?;
    let report = eval::bleu4(&hyp, &reference)?;
    println!("{:.2}", report.bleu);
    println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> CliResult {
    let started = Instant::now();
    let ks: Vec<usize> = a
        .k
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad --k entry {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    let (model, _vocab) = load_model_with_vocab(&a.checkpoint)?;
    let dd = load_data_dir(&a.data, true)?;
    let (report, matrix) = eval::retrieval_eval(&model, &dd.examples, &ks)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    tio::write_tensor(a.out.join("cosine.tnsr"), &matrix)?;
    fs::write(
        a.out.join("retrieval.json"),
        serde_json::to_string_pretty(&report).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    for (k, r) in &report.recalls {
        println!("R@{k:<3} {:.4}", r);
    }
    write_manifest(
        &a.out,
        "retrieve",
        serde_json::json!({"k": ks}),
        &[&a.checkpoint, &a.data],
        &[&a.out],
        None,
        started,
    )?;
    Ok(())
}

fn cmd_degrade(a: DegradeArgs) -> CliResult {
    let started = Instant::now();
    let (model, vocab) = load_model_with_vocab(&a.checkpoint)?;
    let dd = load_data_dir(&a.data, false)?;
    let mask_tokens: Vec<String> = a
        .mask
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let mask_ids = data::mask_set_ids(&vocab, &mask_tokens);
    let (masked, stats) = data::mask_corpus(&dd.examples, &mask_ids);
    let report = eval::degradation_eval(
        &model,
        &dd.examples,
        &masked,
        &vocab,
        stats.fraction(),
        true,
    )?;
    println!(
        "clean BLEU {:.2}   masked BLEU {:.2}   masked fraction {:.4}",
        report.clean.bleu, report.masked.bleu, report.masked_fraction
    );
    if let Some(out) = &a.out {
        fs::write(
            out,
            serde_json::to_string_pretty(&report).map_err(Error::from)?,
        )
        .map_err(Error::from)?;
        write_manifest(
            out,
            "degrade",
            serde_json::json!({"mask": mask_tokens}),
            &[&a.checkpoint, &a.data],
            &[out],
            None,
            started,
        )?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let started = Instant::now();
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".to_string()));
    }
    let mut cfg = load_run_config(a.config.as_deref())?;
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = Some(m);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let grid = eval::ablation_grid(&cfg.model);
    // Workers re-load the corpus privately (model tensors are not
    // thread-shareable); results re-assemble in grid order.
    let results: HashMap<usize, Result<f64, String>> = if a.jobs == 1 {
        let dd = load_data_dir(&a.data, true)?;
        let (train_set, eval_set) = split_eval(&dd.examples);
        grid.iter()
            .enumerate()
            .map(|(i, (_, mc))| {
                (
                    i,
                    eval::run_ablation_cell(mc, &cfg.train, train_set, eval_set, &dd.vocab)
                        .map_err(|e| e.to_string()),
                )
            })
            .collect()
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in grid
                .iter()
                .enumerate()
                .collect::<Vec<_>>()
                .chunks((grid.len() + a.jobs - 1) / a.jobs)
            {
                let chunk: Vec<(usize, ModelConfig)> =
                    chunk.iter().map(|(i, (_, mc))| (*i, mc.clone())).collect();
                let data_dir = a.data.clone();
                let tcfg = cfg.train.clone();
                handles.push(scope.spawn(move || {
                    let mut out = HashMap::new();
                    let dd = match load_data_dir(&data_dir, true) {
                        Ok(dd) => dd,
                        Err(e) => {
                            for (i, _) in &chunk {
                                out.insert(*i, Err(e.to_string()));
                            }
                            return out;
                        }
                    };
                    let (train_set, eval_set) = split_eval(&dd.examples);
                    for (i, mc) in chunk {
                        out.insert(
                            i,
                            eval::run_ablation_cell(&mc, &tcfg, train_set, eval_set, &dd.vocab)
                                .map_err(|e| e.to_string()),
                        );
                    }
                    out
                }));
            }
            let mut all = HashMap::new();
            for h in handles {
                all.extend(h.join().expect("worker panicked"));
            }
            all
        })
    };
    let base_bleu = results.get(&0).and_then(|r| r.as_ref().ok()).copied();
    let rows: Vec<eval::AblationRow> = grid
        .iter()
        .enumerate()
        .map(|(i, (name, _))| match &results[&i] {
            Ok(bleu) => eval::AblationRow {
                name: name.clone(),
                bleu: Some(*bleu),
                delta: base_bleu.map(|b| ((bleu - b) * 100.0).round() / 100.0),
                error: None,
            },
            Err(e) => eval::AblationRow {
                name: name.clone(),
                bleu: None,
                delta: None,
                error: Some(e.clone()),
            },
        })
        .collect();
    println!("{:<24} {:>8} {:>8}", "configuration", "BLEU", "delta");
    for row in &rows {
        match (row.bleu, row.delta) {
            (Some(b), Some(d)) => println!("{:<24} {:>8.2} {:>8.2}", row.name, b, d),
            (Some(b), None) => println!("{:<24} {:>8.2} {:>8}", row.name, b, "-"),
            _ => println!(
                "{:<24} {:>8} {:>8}  {}",
                row.name,
                "FAIL",
                "-",
                row.error.as_deref().unwrap_or("")
            ),
        }
    }
    fs::write(
        &a.out,
        serde_json::to_string_pretty(&rows).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    write_manifest(
        &a.out,
        "ablate",
        serde_json::to_value(&cfg).map_err(Error::from)?,
        &[&a.data],
        &[&a.out],
        Some(cfg.train.seed),
        started,
    )?;
    Ok(())
}

/// Deterministic 3:1 train/eval split.
fn split_eval(examples: &[TripletExample]) -> (&[TripletExample], &[TripletExample]) {
    let cut = (examples.len() * 3 / 4).max(1).min(examples.len());
    let eval = if cut == examples.len() {
        examples
    } else {
        &examples[cut..]
    };
    (&examples[..cut], eval)
}

fn cmd_gradcheck() -> CliResult {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let tol = 1e-4;
    let mut failures = 0;
    let mut check = |name: &str,
                     x: Tensor,
                     f: &dyn Fn(&Tensor) -> Result<Tensor, Error>| {
        match grad_check(f, &x, 1e-5, tol) {
            Ok(r) => {
                println!(
                    "{:<22} {}  max rel err {:.2e}",
                    name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_err
                );
                if !r.passed {
                    failures += 1;
                }
            }
            Err(e) => {
                println!("{name:<22} ERROR  {e}");
                failures += 1;
            }
        }
    };

    let v6 = Tensor::randn(&[6], 1.0, &mut rng);
    let m23 = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let other23 = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let m32 = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let img = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
    let kernel = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
    let kbias = Tensor::randn(&[3], 0.5, &mut rng);
    let gain = Tensor::randn(&[3], 0.5, &mut rng);
    let bias = Tensor::randn(&[3], 0.5, &mut rng);
    let table = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let target = Tensor::randn(&[6], 1.0, &mut rng);

    check("add", m23.clone(), &{
        let o = other23.clone();
        move |x| x.add(&o)?.mul(x)?.sum()
    });
    check("mul", m23.clone(), &{
        let o = other23.clone();
        move |x| x.mul(&o)?.sum()
    });
    check("matmul", m23.clone(), &{
        let o = m32.clone();
        move |x| {
            let y = x.matmul(&o)?;
            y.mul(&y)?.sum()
        }
    });
    check("relu", v6.clone(), &|x| {
        // offset keeps values away from the kink
        x.add(&Tensor::full(&[6], 0.123))?.relu().sum()
    });
    check("sigmoid", v6.clone(), &|x| {
        let y = x.sigmoid();
        y.mul(&y)?.sum()
    });
    check("softmax", v6.clone(), &|x| {
        let s = x.softmax(0)?;
        s.mul(&s)?.sum()
    });
    check("layer_norm", m23.clone(), &{
        let (g, b) = (gain.clone(), bias.clone());
        move |x| {
            let y = x.layer_norm(&g, &b, 1e-5)?;
            y.mul(&y)?.sum()
        }
    });
    check("conv2d", img.clone(), &{
        let (k, b) = (kernel.clone(), kbias.clone());
        move |x| {
            let y = x.conv2d(&k, Some(&b), 1, 1)?;
            y.mul(&y)?.sum()
        }
    });
    check("avg_pool2d", img.clone(), &|x| {
        let y = x.avg_pool2d(2)?;
        y.mul(&y)?.sum()
    });
    check("avg_unpool2d", img.clone(), &|x| {
        let y = x.avg_unpool2d(2)?;
        y.mul(&y)?.sum()
    });
    check("embedding-table", table.clone(), &|t| {
        let y = t.embedding(&[0, 2, 2, 4])?;
        y.mul(&y)?.sum()
    });
    check("cross_entropy", m23.clone(), &|x| {
        x.cross_entropy(&[1, 0], None)
    });
    check("l2_distance", v6.clone(), &{
        let t = target.clone();
        move |x| Tensor::l2_distance(x, &t)
    });
    check("l1_distance", v6.clone(), &{
        let t = target.clone();
        move |x| Tensor::l1_distance(x, &t)
    });
    check("linf_distance", v6.clone(), &{
        let t = target.clone();
        move |x| Tensor::linf_distance(x, &t)
    });
    check("cosine_distance", v6.clone(), &{
        let t = target.clone();
        move |x| Tensor::cosine_distance(x, &t)
    });
    check("kl_divergence", v6.clone(), &{
        let t = target.clone();
        move |x| Tensor::kl_divergence(x, &t)
    });

    if failures > 0 {
        return Err(CliError::Runtime(Error::contract(format!(
            "{failures} gradient checks failed"
        ))));
    }
    println!("all gradient checks passed at tolerance {tol:.0e}");
    Ok(())
}

fn cmd_export_features(a: ExportFeaturesArgs) -> CliResult {
    let started = Instant::now();
    let (model, vocab) = load_model_with_vocab(&a.checkpoint)?;
    let lines = read_lines(&a.src)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    for (i, line) in lines.iter().enumerate() {
        let ids = vocab.encode_line(line);
        let pad = vec![false; ids.len()];
        let (_, feature) = model.encode(&ids, &pad, None)?;
        let f = feature.ok_or_else(|| {
            Error::config("feature export needs the multimodal path enabled".to_string())
        })?;
        tio::write_tensor(a.out.join(format!("m_{i}.tnsr")), &f.rows)?;
    }
    println!("exported {} feature tensors", lines.len());
    write_manifest(
        &a.out,
        "export-features",
        serde_json::json!({}),
        &[&a.checkpoint, &a.src],
        &[&a.out],
        None,
        started,
    )?;
    Ok(())
}

#[derive(Serialize)]
struct AttentionExport {
    row_labels: Vec<String>,
    records: Vec<AttentionRecord>,
}

fn cmd_export_attention(a: ExportAttentionArgs) -> CliResult {
    let started = Instant::now();
    let (model, vocab) = load_model_with_vocab(&a.checkpoint)?;
    let lines = read_lines(&a.src)?;
    let line = lines.get(a.line).ok_or_else(|| {
        CliError::Usage(format!("--line {} out of range (file has {})", a.line, lines.len()))
    })?;
    let ids = vocab.encode_line(line);
    let pad = vec![false; ids.len()];
    let mut records = Vec::new();
    let (_, _) = model.encode(&ids, &pad, Some(&mut records))?;
    let mut row_labels: Vec<String> = ids
        .iter()
        .map(|&id| format!("token:{}", vocab.token(id)))
        .collect();
    if model.cfg.use_multimodal && !model.cfg.without_text_features {
        for r in 0..model.cfg.feature_regions() {
            row_labels.push(format!("region:{r}"));
        }
    }
    let export = AttentionExport {
        row_labels,
        records,
    };
    fs::write(
        &a.out,
        serde_json::to_string_pretty(&export).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    println!("exported {} attention maps", export.records.len());
    write_manifest(
        &a.out,
        "export-attention",
        serde_json::json!({"line": a.line}),
        &[&a.checkpoint, &a.src],
        &[&a.out],
        None,
        started,
    )?;
    Ok(())
}
