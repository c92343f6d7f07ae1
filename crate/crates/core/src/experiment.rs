//! The ablation and probe protocol shared by the CLI and the acceptance tests.
//!
//! One call to [`run_seed`] pretrains both backbones, finetunes every variant
//! from the same corpus and fold, and sweeps probes over the stage-1 encoder.

use std::fmt::Write as _;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Variant};
use crate::metrics::EvalReport;
use crate::synth::{split_corpus, Utterance};
use crate::train::{
    probe_classes, probe_samples, stage1_pretrain, stage2_finetune, train_probe, Model, ProbeTarget,
    Stage2Init, TrainConfig,
};

/// Stage-2 runs of the ablation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Pretrained backbone 1 with MMF and CMA.
    Full,
    NoCma,
    /// PPG-only head: segment means of the final block replace MMF.
    NoMmf,
    /// Full head on a randomly initialized backbone 1.
    NoPretrain,
    /// Full head on pretrained backbone 2 (no down-sampling).
    Backbone2,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoCma,
        Ablation::NoMmf,
        Ablation::NoPretrain,
        Ablation::Backbone2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCma => "no-cma",
            Ablation::NoMmf => "no-mmf",
            Ablation::NoPretrain => "no-pretrain",
            Ablation::Backbone2 => "backbone2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }

    fn variant(self) -> Variant {
        match self {
            Ablation::NoCma => Variant::NoCma,
            Ablation::NoMmf => Variant::NoMmf,
            _ => Variant::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub fold: usize,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub probe: TrainConfig,
    pub probe_blocks: Vec<usize>,
    pub head: FusionConfig,
    pub ablations: Vec<Ablation>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            fold: 0,
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            probe: TrainConfig::probe(),
            probe_blocks: (6..=12).collect(),
            head: FusionConfig::default(),
            ablations: Ablation::ALL.to_vec(),
        }
    }
}

impl SuiteConfig {
    pub fn to_meta(&self) -> String {
        let blocks: Vec<String> = self.probe_blocks.iter().map(|b| b.to_string()).collect();
        let runs: Vec<&str> = self.ablations.iter().map(|a| a.name()).collect();
        format!(
            "fold={}|stage1={}|stage2={}|probe={}|probe_blocks={}|head={}|runs={}",
            self.fold,
            self.stage1.to_meta(),
            self.stage2.to_meta(),
            self.probe.to_meta(),
            blocks.join(","),
            self.head.to_meta(),
            runs.join(",")
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub seed: u64,
    pub target: ProbeTarget,
    pub block: usize,
    pub report: EvalReport,
}

pub const PROBE_CSV_HEADER: &str = "seed,target,block,wa,ua,wf1";

impl ProbeRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.seed,
            self.target.name(),
            self.block,
            self.report.wa,
            self.report.ua,
            self.report.wf1
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub run: Ablation,
    pub seed: u64,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// Held-out frame-symbol accuracy after stage 1, backbone 1 then backbone 2.
    pub stage1_accuracy: Vec<(u8, f64)>,
    pub runs: Vec<RunRow>,
    pub probes: Vec<ProbeRow>,
}

impl SeedResult {
    pub fn run(&self, which: Ablation) -> Option<&EvalReport> {
        self.runs.iter().find(|r| r.run == which).map(|r| &r.report)
    }

    pub fn probe(&self, target: ProbeTarget, block: usize) -> Option<&EvalReport> {
        self.probes
            .iter()
            .find(|p| p.target == target && p.block == block)
            .map(|p| &p.report)
    }
}

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = &'a RunRow>) -> String {
    let mut out = EvalReport::csv_header(crate::fusion::NUM_EMOTIONS);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.report.csv_row(r.run.name(), r.seed)).unwrap();
    }
    out
}

pub fn probe_csv<'a>(rows: impl IntoIterator<Item = &'a ProbeRow>) -> String {
    let mut out = format!("{PROBE_CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

/// Probes several blocks of a frozen encoder. Features are extracted once.
pub fn probe_sweep(
    model: &Model,
    train: &[&Utterance],
    heldout: &[&Utterance],
    blocks: &[usize],
    target: ProbeTarget,
    cfg: &TrainConfig,
) -> Result<Vec<(usize, EvalReport)>> {
    if let Some(&b) = blocks.iter().find(|&&b| b == 0 || b > model.encoder.num_blocks) {
        return Err(Error::Input(format!(
            "probe block {b} outside [1, {}]",
            model.encoder.num_blocks
        )));
    }
    let tr = probe_samples(model, train, blocks, target)?;
    let te = probe_samples(model, heldout, blocks, target)?;
    let classes = probe_classes(model, target);
    blocks
        .iter()
        .zip(tr.iter().zip(&te))
        .map(|(&b, (tr, te))| Ok((b, train_probe(tr, te, classes, cfg)?)))
        .collect()
}

/// Parses `6-12`, `9` or `6,9,12`.
pub fn parse_blocks(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad block list {spec:?}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Everything for one training seed on one corpus: stage 1 on each backbone a
/// run needs, the requested stage-2 runs, and both probe sweeps on the
/// stage-1 backbone-1 encoder.
pub fn run_seed(utts: &[Utterance], cfg: &SuiteConfig, seed: u64) -> Result<SeedResult> {
    let (train, test) = split_corpus(utts, cfg.fold)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!("fold {} leaves an empty split", cfg.fold)));
    }
    let stage1 = TrainConfig {
        seed,
        ..cfg.stage1.clone()
    };
    let stage2 = TrainConfig {
        seed,
        ..cfg.stage2.clone()
    };
    let probe = TrainConfig {
        seed,
        ..cfg.probe.clone()
    };
    let bb1 = EncoderConfig::backbone1();
    let bb2 = EncoderConfig::backbone2();

    let mut stage1_accuracy = Vec::new();
    let pre1 = stage1_pretrain(&train, &test, &bb1, &stage1)?;
    stage1_accuracy.push((1, pre1.frame_accuracy));
    let pre2 = if cfg.ablations.contains(&Ablation::Backbone2) {
        let p = stage1_pretrain(&train, &test, &bb2, &stage1)?;
        stage1_accuracy.push((2, p.frame_accuracy));
        Some(p)
    } else {
        None
    };

    let mut runs = Vec::new();
    for &run in &cfg.ablations {
        let head = FusionConfig {
            variant: run.variant(),
            ..cfg.head.clone()
        };
        let init = match run {
            Ablation::NoPretrain => Stage2Init::Random(&bb1),
            Ablation::Backbone2 => {
                Stage2Init::Pretrained(&pre2.as_ref().expect("pretrained above").checkpoint)
            }
            _ => Stage2Init::Pretrained(&pre1.checkpoint),
        };
        let out = stage2_finetune(init, &head, &train, &test, &stage2)?;
        runs.push(RunRow {
            run,
            seed,
            best_epoch: out.best_epoch,
            report: out.best_report().clone(),
        });
    }

    let mut probes = Vec::new();
    if !cfg.probe_blocks.is_empty() {
        let model = Model::from_checkpoint(&pre1.checkpoint)?;
        for target in [ProbeTarget::Symbols, ProbeTarget::Emotion] {
            for (block, report) in probe_sweep(&model, &train, &test, &cfg.probe_blocks, target, &probe)? {
                probes.push(ProbeRow {
                    seed,
                    target,
                    block,
                    report,
                });
            }
        }
    }
    Ok(SeedResult {
        seed,
        stage1_accuracy,
        runs,
        probes,
    })
}
