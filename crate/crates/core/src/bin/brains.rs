//! `brains` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data or artifacts,
//! 3 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use brains::casemodel::io::{read_jsonl, write_jsonl_file};
use brains::casemodel::{fit_preprocess, generate_synthetic, split_corpus, CaseRecord, PreprocessStats};
use brains::config::{BackendChoice, BrainsConfig};
use brains::diagnose::{checkpoint_load, checkpoint_save, train, Model};
use brains::eval::{run_experiment, run_experiment_on, Variant};
use brains::retrieval::{build_index, index_save};
use brains::screen::{parse_screen_request, screen, Artifacts, ErrorCode, ScreenError};
use brains::service::{serve, shutdown_signal, AppState};

// Standard output writes ignore errors so a closed pipe (`| head`) is not a panic.
macro_rules! outln {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! out {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "brains", version, about = "Retrieval-augmented Alzheimer's subtype screening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base seed for corpus generation, splitting and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file (default: $BRAINS_CONFIG, else built-in defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled cohort as JSON Lines.
    Generate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit preprocessing statistics on the training split.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write train/val/test JSONL files here.
        #[arg(long)]
        split_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build a retrieval index over a corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embed with this checkpoint's encoder (default: a fresh model fitted on the training split).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-epoch losses as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the comparison experiment and print the report.
    Eval {
        /// Evaluate on this corpus instead of a generated one.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated: no-rag, rag-1, rag-2, brains-k5.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record per-variant wall time (makes the report non-reproducible).
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Screen one case.
    Screen {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Case JSON file, or `-` for standard input.
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        backend: Option<BackendArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        backend: Option<BackendArg>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct ArtifactArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum BackendArg {
    Local,
    Remote,
}

impl From<BackendArg> for BackendChoice {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Local => BackendChoice::Local,
            BackendArg::Remote => BackendChoice::Remote,
        }
    }
}

/// Failure class, mapped to an exit code.
enum Failure {
    Data(String),
    Runtime(String),
}

impl Failure {
    fn data(e: impl std::fmt::Display) -> Self {
        Failure::Data(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }

    fn screen(e: ScreenError) -> Self {
        match e.code() {
            ErrorCode::BackendTimeout
            | ErrorCode::BackendHttpError
            | ErrorCode::BackendUnreachable
            | ErrorCode::Internal
            | ErrorCode::IoFailure => Failure::Runtime(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> Result<BrainsConfig, Failure> {
    BrainsConfig::resolve(common.config.as_deref()).map(|c| c.with_seed(common.seed)).map_err(Failure::data)
}

fn read_corpus(path: &Path) -> Result<Vec<CaseRecord>, Failure> {
    read_jsonl(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Outcome {
    let text = serde_json::to_string_pretty(v).expect("json");
    std::fs::write(path, text + "\n").map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn split(cfg: &BrainsConfig, corpus: &[CaseRecord]) -> Result<[Vec<CaseRecord>; 3], Failure> {
    let (a, b, c) = split_corpus(corpus, cfg.split.ratios, cfg.split.seed).map_err(Failure::data)?;
    Ok([a, b, c])
}

fn fresh_model(cfg: &BrainsConfig, train_split: &[CaseRecord]) -> Result<Model, Failure> {
    let stats: PreprocessStats = fit_preprocess(train_split).map_err(Failure::data)?;
    Model::init(cfg.model.clone(), Some(stats)).map_err(Failure::data)
}

fn generate(n: Option<usize>, out: &Path, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let mut gen = cfg.generator.clone();
    if let Some(n) = n {
        gen.n = n;
    }
    let records = generate_synthetic(&gen, cfg.corpus_seed()).map_err(Failure::data)?;
    write_jsonl_file(out, &records).map_err(Failure::runtime)?;
    outln!("{}", json!({ "records": records.len(), "seed": cfg.corpus_seed(), "out": out }));
    Ok(())
}

fn preprocess(corpus: &Path, out: &Path, split_dir: Option<&Path>, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let records = read_corpus(corpus)?;
    let parts = split(&cfg, &records)?;
    let stats = fit_preprocess(&parts[0]).map_err(Failure::data)?;
    stats.save(out).map_err(Failure::runtime)?;
    if let Some(dir) = split_dir {
        std::fs::create_dir_all(dir).map_err(Failure::runtime)?;
        for (name, part) in ["train", "val", "test"].iter().zip(&parts) {
            write_jsonl_file(&dir.join(format!("{name}.jsonl")), part).map_err(Failure::runtime)?;
        }
    }
    outln!(
        "{}",
        json!({ "train": parts[0].len(), "val": parts[1].len(), "test": parts[2].len(), "features": stats.feature_len() })
    );
    Ok(())
}

fn index(corpus: &Path, out: &Path, checkpoint: Option<&Path>, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let records = read_corpus(corpus)?;
    let model = match checkpoint {
        Some(p) => checkpoint_load(p).map_err(Failure::data)?.model,
        None => fresh_model(&cfg, &split(&cfg, &records)?[0])?,
    };
    let ix = build_index(&records, &model.encoder, model.stats.as_ref()).map_err(Failure::data)?;
    index_save(&ix, out).map_err(Failure::runtime)?;
    outln!("{}", json!({ "indexed": ix.len(), "dim": ix.dim(), "out": out }));
    Ok(())
}

fn train_cmd(corpus: &Path, out: &Path, log: Option<&Path>, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let records = read_corpus(corpus)?;
    let [tr, val, _] = split(&cfg, &records)?;
    let model = fresh_model(&cfg, &tr)?;
    let base = brains::retrieval::CaseBase::build(tr.clone(), &model.encoder, model.stats.as_ref())
        .map_err(Failure::data)?;
    let (ckpt, tlog) = train(&tr, &val, &cfg.train, model, &base).map_err(Failure::data)?;
    checkpoint_save(&ckpt, out).map_err(Failure::runtime)?;
    if let Some(p) = log {
        write_json(p, &serde_json::to_value(&tlog).expect("log serializes"))?;
    }
    outln!(
        "{}",
        json!({
            "checkpoint": out,
            "digest": ckpt.digest(),
            "initial_train_loss": tlog.initial_train_loss,
            "final_train_loss": tlog.final_train_loss,
        })
    );
    Ok(())
}

fn eval(
    corpus: Option<&Path>,
    variants: Option<Vec<Variant>>,
    out: Option<&Path>,
    timing: bool,
    common: &Common,
) -> Outcome {
    let cfg = load_config(common)?;
    let mut ecfg = cfg.experiment();
    if let Some(v) = variants {
        ecfg.variants = v;
    }
    ecfg.record_timing |= timing;
    let report = match corpus {
        Some(p) => run_experiment_on(&ecfg, &read_corpus(p)?),
        None => run_experiment(&ecfg),
    }
    .map_err(Failure::data)?;
    let text = report.to_json();
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?,
        None => out!("{text}"),
    }
    out!("{}", report.table());
    Ok(())
}

fn artifacts(a: &ArtifactArgs, cfg: &BrainsConfig) -> Result<Artifacts, Failure> {
    let pick = |flag: &Option<PathBuf>, conf: &Option<PathBuf>, name: &str| {
        flag.clone().or_else(|| conf.clone()).ok_or_else(|| Failure::Data(format!("--{name} is required")))
    };
    let s = &cfg.service;
    let (ck, ix, co) = (pick(&a.checkpoint, &s.checkpoint, "checkpoint")?, pick(&a.index, &s.index, "index")?, pick(&a.corpus, &s.corpus, "corpus")?);
    Artifacts::load(&ck, &ix, &co).map_err(Failure::screen)
}

fn screen_cmd(a: &ArtifactArgs, case: &Path, k: Option<usize>, backend: Option<BackendArg>, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let text = if case == Path::new("-") {
        std::io::read_to_string(std::io::stdin()).map_err(Failure::runtime)?
    } else {
        std::fs::read_to_string(case).map_err(|e| Failure::data(format!("{}: {e}", case.display())))?
    };
    let body: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::data(format!("case JSON: {e}")))?;
    let mut req = match parse_screen_request(body) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}", e.to_json());
            return Err(Failure::screen(e));
        }
    };
    req.k = k.or(req.k);
    req.backend = backend.map(Into::into).or(req.backend);
    let art = artifacts(a, &cfg)?;
    let out = screen(&art, &req, cfg.service.backend, cfg.remote.as_ref()).map_err(Failure::screen)?;
    outln!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn serve_cmd(a: &ArtifactArgs, bind: Option<String>, port: Option<u16>, backend: Option<BackendArg>, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let mut sc = cfg.service.clone();
    sc.checkpoint = a.checkpoint.clone().or(sc.checkpoint);
    sc.index = a.index.clone().or(sc.index);
    sc.corpus = a.corpus.clone().or(sc.corpus);
    sc.bind = bind.unwrap_or(sc.bind);
    sc.port = port.unwrap_or(sc.port);
    sc.backend = backend.map(Into::into).unwrap_or(sc.backend);
    let addr = format!("{}:{}", sc.bind, sc.port);
    let rt = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Failure::runtime(format!("{addr}: {e}")))?;
        log::info!("listening on {addr}");
        let state = AppState::new(sc, cfg.remote.clone());
        serve(state, listener, shutdown_signal()).await.map_err(Failure::runtime)
    })
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate { n, out, common } => generate(n, &out, &common),
        Command::Preprocess { corpus, out, split_dir, common } => preprocess(&corpus, &out, split_dir.as_deref(), &common),
        Command::Index { corpus, out, checkpoint, common } => index(&corpus, &out, checkpoint.as_deref(), &common),
        Command::Train { corpus, out, log, common } => train_cmd(&corpus, &out, log.as_deref(), &common),
        Command::Eval { corpus, variants, out, timing, common } => {
            eval(corpus.as_deref(), variants, out.as_deref(), timing, &common)
        }
        Command::Screen { artifacts, case, k, backend, common } => screen_cmd(&artifacts, &case, k, backend, &common),
        Command::Serve { artifacts, bind, port, backend, common } => serve_cmd(&artifacts, bind, port, backend, &common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = run(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
