//! `asrkit` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error, 3 numerical failure (infeasible band, failed check).
//! Data goes to stdout or `--out`-style files, diagnostics to stderr.
//! Output files are written to temporaries and renamed only once the whole
//! command has succeeded.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::budget::{budget_report, EncoderConfig, FlopsConvention, LossShape, TrainPlan};
use crate::manifest::{self, ManifestError, UtteranceRecord};
use crate::metrics::{self, FreqTableFile, MetricsError, NormalizerConfig, WordFrequencyTable};
use crate::rnnt::{self, AlignmentBand, GradCheck, LossCase, LossOutput, LossResult, RnntError};
use crate::selection::{self, PipelineConfig, Segmentation, SelectionError};

/// Failure classes, one per nonzero exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e) => e,
        }
    }
}

impl From<ManifestError> for Failure {
    fn from(e: ManifestError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Coverage(_) => Failure::Usage(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<SelectionError> for Failure {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::Config(_) => Failure::Usage(e.into()),
            SelectionError::MissingPair(_) => Failure::Data(e.into()),
        }
    }
}

impl From<RnntError> for Failure {
    fn from(e: RnntError) -> Self {
        match e {
            RnntError::Infeasible => Failure::Numeric(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "asrkit", version, about = "Speech corpus selection, scoring, transducer loss and budget tools")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ASRKIT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a word frequency table from a manifest.
    Freq(FreqArgs),
    /// Run the data-selection pipeline.
    Filter(FilterArgs),
    /// Cut aligned utterances into bounded segments.
    Segment(SegmentArgs),
    /// Score hypotheses against references (WER, rare WER).
    Score(ScoreArgs),
    /// Evaluate transducer loss for a case file.
    Loss(LossArgs),
    /// Parameter, compute and loss-memory budget for an encoder.
    Budget(BudgetArgs),
}

#[derive(Debug, Args)]
pub struct FreqArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub coverage: f64,
    /// Normalizer config JSON.
    #[arg(long)]
    pub norm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pipeline config JSON (defaults apply to omitted keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub freq: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dropped: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Per-record decisions as JSONL.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dropped: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub max_segment_s: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub freq: Option<PathBuf>,
    /// Normalizer config JSON.
    #[arg(long)]
    pub norm: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Report the largest absolute gradient.
    #[arg(long)]
    pub grad: bool,
    /// Verify band equivalence and gradients; exit 3 on violation.
    #[arg(long)]
    pub check: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_grad_fault: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConventionArg {
    #[value(name = "train_6ND")]
    Train6Nd,
    #[value(name = "forward_2ND")]
    Forward2Nd,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    #[arg(long, default_value_t = 3072)]
    pub hidden: u64,
    #[arg(long, default_value_t = 90)]
    pub layers: u64,
    #[arg(long, default_value_t = 48)]
    pub heads: u64,
    #[arg(long, default_value_t = 23.0)]
    pub batch_hours: f64,
    #[arg(long, default_value_t = 200_000)]
    pub updates: u64,
    #[arg(long, default_value_t = 80.0)]
    pub frame_ms: f64,
    #[arg(long, value_enum, default_value = "train_6ND")]
    pub convention: ConventionArg,
    #[arg(long, default_value_t = 1)]
    pub loss_batch: u64,
    #[arg(long, default_value_t = 125)]
    pub loss_frames: u64,
    #[arg(long, default_value_t = 40)]
    pub loss_tokens: u64,
    #[arg(long, default_value_t = 4096)]
    pub vocab: u64,
    #[arg(long, default_value_t = 15)]
    pub buffer_left: u64,
    #[arg(long, default_value_t = 15)]
    pub buffer_right: u64,
    #[arg(long, default_value_t = 4)]
    pub bytes_per_cell: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Files to publish together once a command succeeds.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
    stdout: Vec<u8>,
}

impl Outputs {
    fn add(&mut self, path: Option<&Path>, bytes: Vec<u8>) {
        match path {
            Some(p) => self.files.push((p.to_path_buf(), bytes)),
            None => self.stdout.extend(bytes),
        }
    }

    fn commit(self) -> CmdResult {
        let mut staged = Vec::with_capacity(self.files.len());
        for (path, bytes) in &self.files {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir)
                .with_context(|| format!("cannot create output in {}", dir.display()))
                .map_err(Failure::Usage)?;
            tmp.write_all(bytes).and_then(|_| tmp.flush()).context("writing output").map_err(Failure::Usage)?;
            staged.push((tmp, path));
        }
        for (tmp, path) in staged {
            tmp.persist(path).with_context(|| format!("cannot write {}", path.display())).map_err(Failure::Usage)?;
        }
        std::io::stdout().write_all(&self.stdout).context("writing stdout").map_err(Failure::Usage)?;
        Ok(())
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(Failure::Usage)
}

fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>, Failure> {
    manifest::parse_manifest(open(path)?)
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::Data)
}

/// Config-like JSON: unreadable or malformed files are usage errors.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_reader(open(path)?)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Usage)
}

fn read_normalizer(path: Option<&Path>) -> Result<NormalizerConfig, Failure> {
    let cfg: NormalizerConfig = match path {
        Some(p) => read_config(p)?,
        None => NormalizerConfig::default(),
    };
    cfg.validate().map_err(|e| Failure::Usage(anyhow!(e)))?;
    Ok(cfg)
}

fn read_freq(path: &Path) -> Result<WordFrequencyTable, Failure> {
    let file: FreqTableFile = serde_json::from_reader(open(path)?)
        .with_context(|| format!("invalid frequency table {}", path.display()))
        .map_err(Failure::Data)?;
    WordFrequencyTable::from_file(file)
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::Data)
}

fn cmd_freq(a: &FreqArgs) -> CmdResult {
    let norm = read_normalizer(a.norm.as_deref())?;
    let records = read_manifest(&a.manifest)?;
    let table = metrics::build_freq_table(records.iter().map(|r| r.transcript.as_str()), &norm, a.coverage)?;
    eprintln!(
        "{} tokens, {} types, common set {} words at coverage {}",
        table.total(),
        table.ranked().len(),
        table.common_set().len(),
        a.coverage
    );
    let mut out = Outputs::default();
    out.add(Some(&a.out), json_bytes(&table.to_file()));
    out.commit()
}

fn cmd_filter(a: &FilterArgs) -> CmdResult {
    let config: PipelineConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => PipelineConfig::default(),
    };
    config.validate()?;
    use selection::Stage;
    if config.stages.contains(&Stage::RareData) && a.freq.is_none() {
        return Err(Failure::Usage(anyhow!("rare_data stage enabled but --freq not given")));
    }
    if config.stages.contains(&Stage::Disagreement) && a.pairs.is_none() {
        return Err(Failure::Usage(anyhow!("disagreement stage enabled but --pairs not given")));
    }
    let records = read_manifest(&a.manifest)?;
    let pairs = match &a.pairs {
        Some(p) => Some(
            manifest::parse_hypothesis_pairs(open(p)?)
                .with_context(|| format!("in {}", p.display()))
                .map_err(Failure::Data)?,
        ),
        None => None,
    };
    let table = match &a.freq {
        Some(p) => {
            let t = read_freq(p)?;
            Some(if t.coverage() == config.frequency_coverage { t } else { t.with_coverage(config.frequency_coverage)? })
        }
        None => None,
    };
    let result = selection::run_pipeline(&config, &records, pairs.as_deref(), table.as_ref())?;
    let r = &result.report;
    eprintln!(
        "kept {}/{} records ({:.3} of {:.3} h)",
        r.kept_records, r.input_records, r.kept_hours, r.input_hours
    );
    for s in &r.stages {
        eprintln!("  {:?}: dropped {} of {}", s.stage, s.dropped, s.input_records);
    }
    let mut out = Outputs::default();
    out.add(Some(&a.out), manifest::manifest_to_bytes(&result.kept));
    out.add(Some(&a.dropped), manifest::manifest_to_bytes(&result.dropped));
    out.add(Some(&a.report), json_bytes(&result.report));
    if let Some(p) = &a.decisions {
        let mut buf = Vec::new();
        for d in &result.decisions {
            serde_json::to_writer(&mut buf, d).expect("serializable");
            buf.push(b'\n');
        }
        out.add(Some(p), buf);
    }
    out.commit()
}

fn cmd_segment(a: &SegmentArgs) -> CmdResult {
    if !(a.max_segment_s.is_finite() && a.max_segment_s > 0.0) {
        return Err(Failure::Usage(anyhow!("--max-segment-s must be > 0")));
    }
    let records = read_manifest(&a.manifest)?;
    let (mut kept, mut dropped, mut oversize) = (Vec::new(), Vec::new(), 0usize);
    for r in &records {
        match selection::segment_utterance(r, a.max_segment_s) {
            Segmentation::Segments(segs) => {
                for s in segs {
                    oversize += usize::from(s.oversize);
                    kept.push(s.record);
                }
            }
            Segmentation::Dropped(reason) => {
                eprintln!("{}: dropped ({reason:?})", r.id);
                dropped.push(r.clone());
            }
        }
    }
    eprintln!("{} records -> {} segments ({} oversize), {} dropped", records.len(), kept.len(), oversize, dropped.len());
    let mut out = Outputs::default();
    out.add(Some(&a.out), manifest::manifest_to_bytes(&kept));
    if let Some(p) = &a.dropped {
        out.add(Some(p), manifest::manifest_to_bytes(&dropped));
    }
    out.commit()
}

fn cmd_score(a: &ScoreArgs) -> CmdResult {
    let norm = read_normalizer(a.norm.as_deref())?;
    let read = |p: &Path| -> Result<_, Failure> {
        manifest::parse_transcripts(open(p)?)
            .with_context(|| format!("in {}", p.display()))
            .map_err(Failure::Data)
    };
    let refs = read(&a.reference)?;
    let hyps = read(&a.hyp)?;
    let table = a.freq.as_deref().map(read_freq).transpose()?;
    let report = metrics::score(&refs, &hyps, table.as_ref(), &norm)?;
    eprintln!("WER {:.4} over {} reference words", report.wer.wer, report.wer.ref_words);
    if let Some(r) = &report.rare {
        eprintln!("rare WER {:.4} over {} rare reference words", r.rare_wer, r.rare_ref_words);
    }
    let mut out = Outputs::default();
    out.add(a.report.as_deref(), json_bytes(&report));
    out.commit()
}

/// Tolerances for `loss --check`.
const CHECK_EPSILON: f64 = 1e-5;
const CHECK_GRAD_REL: f64 = 1e-5;
const CHECK_NODE_SUM: f64 = 1e-8;
const CHECK_LOSS_ABS: f64 = 1e-9;

#[derive(Debug, Serialize)]
struct CheckReport {
    passed: bool,
    saturated_band_abs_diff: f64,
    full_grad: GradCheck,
    #[serde(skip_serializing_if = "Option::is_none")]
    restricted_grad: Option<GradCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    restricted_minus_full: Option<f64>,
    failures: Vec<String>,
}

#[derive(Debug, Serialize)]
struct LossReport {
    #[serde(flatten)]
    primary: LossOutput,
    #[serde(skip_serializing_if = "Option::is_none")]
    full: Option<LossOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    check: Option<CheckReport>,
}

fn loss_output(r: &LossResult, with_grad: bool) -> LossOutput {
    LossOutput {
        loss: r.loss,
        valid_cells: r.valid_cells,
        grad_max_abs: if with_grad {
            r.gradients.as_ref().map(|g| g.iter().fold(0.0_f64, |m, x| m.max(x.abs())))
        } else {
            None
        },
    }
}

fn run_check(
    inst: &rnnt::RnntInstance,
    band: Option<&AlignmentBand>,
    full: &LossResult,
    restricted: Option<&LossResult>,
    inject_fault: bool,
) -> Result<CheckReport, Failure> {
    let mut failures = Vec::new();
    let frames = inst.frames();
    let saturated = AlignmentBand::new(vec![0; inst.target_len()], frames, frames)?;
    let sat = rnnt::rnnt_loss_restricted(inst, &saturated, false)?;
    let saturated_band_abs_diff = (sat.loss - full.loss).abs();
    if saturated_band_abs_diff > CHECK_LOSS_ABS {
        failures.push(format!("saturated band differs from full loss by {saturated_band_abs_diff:e}"));
    }

    let check_grad = |label: &str, band: Option<&AlignmentBand>, res: &LossResult, failures: &mut Vec<String>| {
        let mut grad = res.gradients.clone().expect("computed with gradients");
        if inject_fault {
            grad[0] += 1e-3;
        }
        let c = rnnt::grad_check_against(inst, band, CHECK_EPSILON, &grad)?;
        if c.max_rel_error > CHECK_GRAD_REL {
            failures.push(format!("{label}: gradient relative error {:e} at logit {}", c.max_rel_error, c.worst_index));
        }
        if c.max_node_sum > CHECK_NODE_SUM {
            failures.push(format!("{label}: node gradient sum {:e}", c.max_node_sum));
        }
        Ok::<_, Failure>(c)
    };
    let full_grad = check_grad("full", None, full, &mut failures)?;
    let restricted_grad = match (band, restricted) {
        (Some(b), Some(r)) => Some(check_grad("restricted", Some(b), r, &mut failures)?),
        _ => None,
    };
    let restricted_minus_full = restricted.map(|r| r.loss - full.loss);
    if let Some(d) = restricted_minus_full {
        if d < -CHECK_LOSS_ABS {
            failures.push(format!("restricted loss below full loss by {:e}", -d));
        }
    }
    Ok(CheckReport {
        passed: failures.is_empty(),
        saturated_band_abs_diff,
        full_grad,
        restricted_grad,
        restricted_minus_full,
        failures,
    })
}

fn cmd_loss(a: &LossArgs) -> CmdResult {
    let case: LossCase = serde_json::from_reader(open(&a.input)?)
        .with_context(|| format!("invalid loss case {}", a.input.display()))
        .map_err(Failure::Data)?;
    let inst = case.instance()?;
    let band = case.band()?;
    let need_grad = a.grad || a.check;
    let full = rnnt::rnnt_loss_full(&inst, need_grad)?;
    let restricted = band.as_ref().map(|b| rnnt::rnnt_loss_restricted(&inst, b, need_grad)).transpose()?;
    let check = if a.check {
        Some(run_check(&inst, band.as_ref(), &full, restricted.as_ref(), a.inject_grad_fault)?)
    } else {
        None
    };
    let report = match &restricted {
        Some(r) => LossReport { primary: loss_output(r, a.grad), full: Some(loss_output(&full, a.grad)), check },
        None => LossReport { primary: loss_output(&full, a.grad), full: None, check },
    };
    eprintln!("loss {:.6} nats over {} lattice cells", report.primary.loss, report.primary.valid_cells);
    let failed = report.check.as_ref().filter(|c| !c.passed).map(|c| c.failures.join("; "));
    let mut out = Outputs::default();
    out.add(a.out.as_deref(), json_bytes(&report));
    out.commit()?;
    match failed {
        Some(msg) => Err(Failure::Numeric(anyhow!("check failed: {msg}"))),
        None => Ok(()),
    }
}

fn cmd_budget(a: &BudgetArgs) -> CmdResult {
    let encoder = EncoderConfig { hidden: a.hidden, layers: a.layers, heads: a.heads, frame_ms: a.frame_ms, dropout: 0.1 };
    let plan = TrainPlan {
        batch_hours: a.batch_hours,
        updates: a.updates,
        convention: match a.convention {
            ConventionArg::Train6Nd => FlopsConvention::Train6Nd,
            ConventionArg::Forward2Nd => FlopsConvention::Forward2Nd,
        },
    };
    let shape = LossShape {
        batch: a.loss_batch,
        frames: a.loss_frames,
        target_len: a.loss_tokens,
        vocab: a.vocab,
        left: a.buffer_left,
        right: a.buffer_right,
        bytes_per_cell: a.bytes_per_cell,
    };
    let report = budget_report(encoder, plan, shape).map_err(|e| Failure::Usage(e.into()))?;
    eprintln!(
        "encoder params {} (core {}), {:.3e} PFLOPs total",
        report.params.encoder, report.params.core, report.flops.total_pflops
    );
    let mut out = Outputs::default();
    out.add(a.out.as_deref(), json_bytes(&report));
    out.commit()
}

/// Runs a parsed command on a pool of `cli.threads` workers.
pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow!("--threads must be >= 1")));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::Usage(e.into()))?;
    pool.install(|| match &cli.command {
        Command::Freq(a) => cmd_freq(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Score(a) => cmd_score(a),
        Command::Loss(a) => cmd_loss(a),
        Command::Budget(a) => cmd_budget(a),
    })
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
