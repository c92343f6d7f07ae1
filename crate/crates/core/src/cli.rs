//! `qieemo` command line: corpus generation, both training stages, probes,
//! evaluation, the ablation protocol and the gradient suite.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data / format /
//! checkpoint error, 3 gradient suite failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::binio::write_atomic;
use crate::checkpoint::Checkpoint;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::experiment::{
    metrics_csv, parse_blocks, probe_csv, probe_sweep, run_seed, Ablation, ProbeRow, RunRow, SuiteConfig,
};
use crate::fusion::{FusionConfig, Variant};
use crate::gradsuite::{gradient_suite, SUITE_SEEDS};
use crate::synth::{
    corpus_digest, generate_corpus, hex_digest, load_features, save_features, split_corpus, CorpusSpec,
    Utterance, NUM_FOLDS,
};
use crate::train::{evaluate, stage1_pretrain, stage2_finetune, Model, ProbeTarget, Stage2Init, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// Written into every output directory.
pub const HEADER_FILE: &str = "run.txt";

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Parser, Debug)]
#[command(
    name = "qieemo",
    version,
    about = "Conformer + MMF + CMA emotion recognition on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (feature files + manifest.csv).
    Gen(Flags),
    /// Stage 1: frame-symbol pretraining of the encoder.
    Pretrain(Flags),
    /// Stage 2: joint emotion training from a stage-1 checkpoint or random init.
    Finetune(Flags),
    /// Per-block probes on a frozen encoder.
    Probe(Flags),
    /// Metrics of a full checkpoint on the held-out fold.
    Eval(Flags),
    /// Pretrain both backbones and run every ablation variant.
    Ablate(Flags),
    /// Run the finite-difference gradient suite.
    Gradcheck(Flags),
}

#[derive(Args, Debug, Default, Clone)]
struct Flags {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Comma-separated parameter-path prefixes to freeze.
    #[arg(long)]
    freeze: Option<String>,
    /// Probe blocks, e.g. `6-12` or `6,9,12`.
    #[arg(long)]
    blocks: Option<String>,
    /// Probe target: symbols or emotion.
    #[arg(long)]
    target: Option<String>,
    /// Held-out session, 0..=4.
    #[arg(long)]
    fold: Option<String>,
    /// 1 (progressive down-sampling) or 2 (none).
    #[arg(long)]
    backbone: Option<String>,
    /// Utterance count for `gen`.
    #[arg(long)]
    utts: Option<String>,
    /// Head variant for `finetune`: full, no-cma or no-mmf.
    #[arg(long)]
    variant: Option<String>,
}

/// Keys accepted in a config file, same names as the flags.
pub const CONFIG_KEYS: [&str; 14] = [
    "out", "data", "ckpt", "seed", "epochs", "batch", "lr", "freeze", "blocks", "target", "fold", "backbone",
    "utts", "variant",
];

/// Parses `key=value` lines; `#` starts a comment. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected key=value, got {raw:?}", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !CONFIG_KEYS.contains(&k) {
            return Err(Error::Config(format!("config line {}: unknown key {k:?}", n + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

/// Flags merged over the config file.
#[derive(Clone, Debug, Default)]
struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    fn resolve(flags: &Flags) -> Result<Self> {
        let mut values = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let given = [
            ("out", path_str(&flags.out)),
            ("data", path_str(&flags.data)),
            ("ckpt", path_str(&flags.ckpt)),
            ("seed", flags.seed.clone()),
            ("epochs", flags.epochs.clone()),
            ("batch", flags.batch.clone()),
            ("lr", flags.lr.clone()),
            ("freeze", flags.freeze.clone()),
            ("blocks", flags.blocks.clone()),
            ("target", flags.target.clone()),
            ("fold", flags.fold.clone()),
            ("backbone", flags.backbone.clone()),
            ("utts", flags.utts.clone()),
            ("variant", flags.variant.clone()),
        ];
        for (k, v) in given {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(RunConfig { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("--{key}: cannot parse {v:?}"))),
        }
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("--{key} is required")))
    }

    fn seed(&self) -> Result<u64> {
        self.parsed("seed", 0)
    }

    fn fold(&self) -> Result<usize> {
        let fold = self.parsed("fold", 0)?;
        if fold >= NUM_FOLDS {
            return Err(Error::Config(format!("--fold {fold} outside [0, {NUM_FOLDS})")));
        }
        Ok(fold)
    }

    fn backbone(&self) -> Result<EncoderConfig> {
        EncoderConfig::backbone(self.parsed("backbone", 1u8)?)
    }

    fn train(&self, base: TrainConfig) -> Result<TrainConfig> {
        let freeze = match self.get("freeze") {
            Some(list) => list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            None => base.freeze.clone(),
        };
        let cfg = TrainConfig {
            epochs: self.parsed("epochs", base.epochs)?,
            batch_size: self.parsed("batch", base.batch_size)?,
            lr: self.parsed("lr", base.lr)?,
            seed: self.seed()?,
            freeze,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text of every resolved value except the output location,
    /// for the run header hash.
    fn canonical(&self, command: &str) -> String {
        let mut s = format!("command={command}");
        for (k, v) in self.values.iter().filter(|(k, _)| k.as_str() != "out") {
            write!(s, ";{k}={v}").unwrap();
        }
        s
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_header(out: &Path, command: &str, run: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    let mut text = format!(
        "version={}\ncommand={command}\nconfig_hash={}\nseed={}\n",
        version_string(),
        hex_digest(run.canonical(command).as_bytes()),
        run.seed()?
    );
    for (k, v) in extra {
        writeln!(text, "{k}={v}").unwrap();
    }
    write_text(&out.join(HEADER_FILE), &text)
}

fn load_corpus(run: &RunConfig) -> Result<Vec<Utterance>> {
    let dir = run.path("data")?;
    let utts = load_features(&dir)?;
    if utts.is_empty() {
        return Err(Error::Data(format!("{} holds no utterances", dir.display())));
    }
    Ok(utts)
}

fn split(utts: &[Utterance], fold: usize) -> Result<(Vec<&Utterance>, Vec<&Utterance>)> {
    let (train, test) = split_corpus(utts, fold)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input(format!(
            "fold {fold} gives {} training and {} held-out utterances",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

fn cmd_gen(run: &RunConfig) -> Result<String> {
    let out = run.path("out")?;
    let spec = CorpusSpec {
        num_utterances: run.parsed("utts", CorpusSpec::default().num_utterances)?,
        seed: run.seed()?,
        ..Default::default()
    };
    let (utts, _) = generate_corpus(&spec)?;
    save_features(&out, &utts)?;
    write_header(
        &out,
        "gen",
        run,
        &[
            ("corpus_spec", spec.to_meta()),
            ("corpus_hash", corpus_digest(&utts)),
        ],
    )?;
    Ok(format!("wrote {} utterances to {}", utts.len(), out.display()))
}

fn cmd_pretrain(run: &RunConfig) -> Result<String> {
    let out = run.path("out")?;
    let utts = load_corpus(run)?;
    let fold = run.fold()?;
    let (train, test) = split(&utts, fold)?;
    let enc = run.backbone()?;
    let cfg = run.train(TrainConfig::stage1())?;
    let result = stage1_pretrain(&train, &test, &enc, &cfg)?;
    let hash = corpus_digest(&utts);
    result
        .checkpoint
        .clone()
        .with_meta("corpus_hash", &hash)
        .save(&out.join("stage1.ckpt"))?;
    write_text(&out.join("train_log.txt"), &result.log.to_text())?;
    write_text(
        &out.join("stage1.csv"),
        &format!(
            "seed,backbone,fold,frame_accuracy\n{},{},{fold},{:.6}\n",
            cfg.seed,
            run.parsed("backbone", 1u8)?,
            result.frame_accuracy
        ),
    )?;
    write_header(&out, "pretrain", run, &[("corpus_hash", hash)])?;
    Ok(format!("held-out frame accuracy {:.4}", result.frame_accuracy))
}

fn cmd_finetune(run: &RunConfig) -> Result<String> {
    let out = run.path("out")?;
    let utts = load_corpus(run)?;
    let fold = run.fold()?;
    let (train, test) = split(&utts, fold)?;
    let cfg = run.train(TrainConfig::stage2())?;
    let variant = Variant::parse(run.get("variant").unwrap_or("full"))?;
    let head = FusionConfig {
        variant,
        ..Default::default()
    };
    let pre;
    let enc;
    let init = match run.get("ckpt") {
        Some(p) => {
            pre = Checkpoint::load(Path::new(p))?;
            Stage2Init::Pretrained(&pre)
        }
        None => {
            enc = run.backbone()?;
            Stage2Init::Random(&enc)
        }
    };
    let result = stage2_finetune(init, &head, &train, &test, &cfg)?;
    let hash = corpus_digest(&utts);
    result
        .checkpoint
        .clone()
        .with_meta("corpus_hash", &hash)
        .save(&out.join("stage2.ckpt"))?;
    write_text(&out.join("train_log.txt"), &result.log.to_text())?;
    let mut epochs = String::from("epoch,steps,train_loss,wa,ua,wf1\n");
    for h in &result.history {
        writeln!(
            epochs,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            h.epoch, h.steps, h.train_loss, h.report.wa, h.report.ua, h.report.wf1
        )
        .unwrap();
    }
    write_text(&out.join("epochs.csv"), &epochs)?;
    let best = result.best_report();
    let row = RunRow {
        run: Ablation::Full,
        seed: cfg.seed,
        best_epoch: result.best_epoch,
        report: best.clone(),
    };
    let csv = metrics_csv([&row]).replacen("\nfull,", &format!("\nfinetune-{},", variant.name()), 1);
    write_text(&out.join("metrics.csv"), &csv)?;
    write_header(
        &out,
        "finetune",
        run,
        &[
            ("corpus_hash", hash),
            ("best_epoch", result.best_epoch.to_string()),
        ],
    )?;
    Ok(format!(
        "best epoch {}: WA {:.4} UA {:.4} WF1 {:.4}",
        result.best_epoch, best.wa, best.ua, best.wf1
    ))
}

fn cmd_probe(run: &RunConfig) -> Result<String> {
    let out = run.path("out")?;
    let utts = load_corpus(run)?;
    let (train, test) = split(&utts, run.fold()?)?;
    let ckpt = Checkpoint::load(&run.path("ckpt")?)?;
    let model = Model::from_checkpoint(&ckpt)?;
    model.check_encoder_params()?;
    let blocks = parse_blocks(run.get("blocks").unwrap_or("6-12"))?;
    let target = ProbeTarget::parse(run.get("target").unwrap_or("emotion"))?;
    let cfg = run.train(TrainConfig::probe())?;
    let rows: Vec<ProbeRow> = probe_sweep(&model, &train, &test, &blocks, target, &cfg)?
        .into_iter()
        .map(|(block, report)| ProbeRow {
            seed: cfg.seed,
            target,
            block,
            report,
        })
        .collect();
    write_text(&out.join("probe.csv"), &probe_csv(&rows))?;
    write_header(&out, "probe", run, &[("corpus_hash", corpus_digest(&utts))])?;
    let best = rows
        .iter()
        .max_by(|a, b| a.report.wa.total_cmp(&b.report.wa))
        .expect("at least one block");
    Ok(format!(
        "{} probe: best block {} WA {:.4}",
        target.name(),
        best.block,
        best.report.wa
    ))
}

fn cmd_eval(run: &RunConfig) -> Result<String> {
    let out = run.path("out")?;
    let utts = load_corpus(run)?;
    let (_, test) = split(&utts, run.fold()?)?;
    let ckpt = Checkpoint::load(&run.path("ckpt")?)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let report = evaluate(&model, &test)?;
    let mut csv = crate::metrics::EvalReport::csv_header(crate::fusion::NUM_EMOTIONS);
    writeln!(csv, "\n{}", report.csv_row("eval", run.seed()?)).unwrap();
    write_text(&out.join("metrics.csv"), &csv)?;
    write_header(&out, "eval", run, &[("corpus_hash", corpus_digest(&utts))])?;
    Ok(format!(
        "WA {:.4} UA {:.4} WF1 {:.4}",
        report.wa, report.ua, report.wf1
    ))
}

fn cmd_ablate(run: &RunConfig) -> Result<String> {
    let out = run.path("out")?;
    let utts = load_corpus(run)?;
    let base = SuiteConfig::default();
    let cfg = SuiteConfig {
        fold: run.fold()?,
        stage1: run.train(base.stage1.clone())?,
        stage2: run.train(base.stage2.clone())?,
        probe_blocks: Vec::new(),
        ..base
    };
    let seed = run.seed()?;
    let result = run_seed(&utts, &cfg, seed)?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&result.runs))?;
    let mut s1 = String::from("seed,backbone,frame_accuracy\n");
    for (bb, acc) in &result.stage1_accuracy {
        writeln!(s1, "{seed},{bb},{acc:.6}").unwrap();
    }
    write_text(&out.join("stage1.csv"), &s1)?;
    write_header(
        &out,
        "ablate",
        run,
        &[("corpus_hash", corpus_digest(&utts)), ("suite", cfg.to_meta())],
    )?;
    let mut summary = String::new();
    for r in &result.runs {
        write!(summary, "{} WA {:.4}; ", r.run.name(), r.report.wa).unwrap();
    }
    Ok(summary.trim_end_matches("; ").to_string())
}

fn cmd_gradcheck(run: &RunConfig) -> Result<(String, bool)> {
    let cases = gradient_suite(&SUITE_SEEDS)?;
    let mut csv = String::from("seed,case,max_rel_error,checked,passed\n");
    let mut failed = 0;
    for c in &cases {
        failed += usize::from(!c.passed());
        writeln!(
            csv,
            "{},{},{:.3e},{},{}",
            c.seed,
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            c.passed()
        )
        .unwrap();
    }
    if let Some(out) = run.get("out") {
        let out = PathBuf::from(out);
        write_text(&out.join("gradcheck.csv"), &csv)?;
        write_header(&out, "gradcheck", run, &[])?;
    }
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    Ok((
        format!(
            "{} cases, {failed} failed, worst relative error {worst:.3e}",
            cases.len()
        ),
        failed == 0,
    ))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, flags) = match &cli.command {
        Command::Gen(f) => ("gen", f),
        Command::Pretrain(f) => ("pretrain", f),
        Command::Finetune(f) => ("finetune", f),
        Command::Probe(f) => ("probe", f),
        Command::Eval(f) => ("eval", f),
        Command::Ablate(f) => ("ablate", f),
        Command::Gradcheck(f) => ("gradcheck", f),
    };
    let result = RunConfig::resolve(flags).and_then(|run| {
        let msg = match name {
            "gen" => cmd_gen(&run)?,
            "pretrain" => cmd_pretrain(&run)?,
            "finetune" => cmd_finetune(&run)?,
            "probe" => cmd_probe(&run)?,
            "eval" => cmd_eval(&run)?,
            "ablate" => cmd_ablate(&run)?,
            _ => {
                let (msg, ok) = cmd_gradcheck(&run)?;
                println!("{msg}");
                return Ok(if ok { EXIT_OK } else { EXIT_GRADCHECK });
            }
        };
        println!("{msg}");
        Ok(EXIT_OK)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("qieemo {name}: {e}");
            if exit_code(&e) == EXIT_USAGE {
                eprintln!("run `qieemo {name} --help` for usage");
            }
            exit_code(&e)
        }
    }
}
