use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sparse_rnnt::attention::{attention_weights, mask_stats, write_heatmap_csv, DEFAULT_LOCAL_WINDOW};
use sparse_rnnt::eval::{
    corpus_cer, edit_alignment_with, join_by_id, read_transcripts, sweep_report, CerOptions, ErrorBreakdown,
    SweepKey, UtteranceScore,
};
use sparse_rnnt::frontend::{log_mel_spectrogram, read_wav, write_features, FrontendConfig};
use sparse_rnnt::model_io::{load_model, model_to_bytes, random_model, Model, ModelConfig};
use sparse_rnnt::pipeline::TranscribeOptions;
use sparse_rnnt::segmentation::{write_segments_csv, DEFAULT_DOI_OVERLAP};
use sparse_rnnt::transducer::Transcript;

use crate::config::{mask_policy, segmentation, ResolvedRun, RunConfig, RunFlags};
use crate::error::{CliError, CliResult};
use crate::io::{emit, load_input, parallel_map, utterance_ids, Input};

fn load(path: &Path) -> CliResult<Model> {
    load_model(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn read_tsv(path: &Path) -> CliResult<Vec<(String, String)>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read_transcripts(BufReader::new(f)).map_err(|e| CliError::from(e).context(path.display()))
}

/// The first failure's class, with a count of all failures.
fn summarize_failures(what: &str, total: usize, failures: Vec<CliError>) -> CliResult<()> {
    let n = failures.len();
    match failures.into_iter().next() {
        None => Ok(()),
        Some(first) => Err(first.context(format!("{n} of {total} {what} failed; first"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Small model that decodes in milliseconds.
    Desk,
    /// Full-size layout (12 blocks, 256-dim, 640-cell LSTM).
    Full,
}

#[derive(Debug, Clone, Args)]
pub struct GenModelArgs {
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model config JSON.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

pub fn gen_model(args: &GenModelArgs) -> CliResult<()> {
    let config = match (&args.config, args.preset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<ModelConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        (None, Some(Preset::Full)) => ModelConfig::paper(),
        (None, _) => ModelConfig::default(),
    };
    config.validate()?;
    let model = random_model(&config, args.seed)?;
    emit(Some(&args.out), &model_to_bytes(&model)?)?;
    eprintln!("wrote {} ({} parameters, seed {})", args.out.display(), model.num_parameters(), args.seed);
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Transcript TSV (`id<TAB>text`); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-token detail as JSON lines.
    #[arg(long)]
    pub detail: Option<PathBuf>,
    /// WAV files or feature text files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

/// Transcripts of a batch, in input order, plus per-file failures.
#[derive(Debug)]
pub struct DecodeBatch {
    pub ids: Vec<String>,
    pub results: Vec<CliResult<Transcript>>,
}

impl DecodeBatch {
    pub fn tsv(&self, model: &Model) -> String {
        let mut s = String::new();
        for (id, r) in self.ids.iter().zip(&self.results) {
            if let Ok(t) = r {
                let _ = writeln!(s, "{}", t.tsv_line(id, &model.config.vocab));
            }
        }
        s
    }

    pub fn detail(&self, model: &Model) -> String {
        let mut s = String::new();
        for (id, r) in self.ids.iter().zip(&self.results) {
            if let Ok(t) = r {
                let _ = writeln!(s, "{}", t.detail_json(id, &model.config.vocab));
            }
        }
        s
    }

    /// `(id, text)` rows for every input that decoded.
    pub fn rows(&self, model: &Model) -> Vec<(String, String)> {
        self.ids
            .iter()
            .zip(&self.results)
            .filter_map(|(id, r)| r.as_ref().ok().map(|t| (id.clone(), t.text(&model.config.vocab))))
            .collect()
    }

    pub fn into_failures(self) -> Vec<CliError> {
        self.ids
            .into_iter()
            .zip(self.results)
            .filter_map(|(id, r)| r.err().map(|e| e.context(id)))
            .collect()
    }
}

pub fn decode_inputs(
    model: &Model,
    inputs: &[Input],
    ids: Vec<String>,
    opts: &TranscribeOptions,
    jobs: usize,
) -> DecodeBatch {
    let results = parallel_map(inputs, jobs, |i| i.transcribe(model, opts));
    DecodeBatch { ids, results }
}

pub fn decode_files(model: &Model, run: &ResolvedRun, paths: &[PathBuf]) -> CliResult<DecodeBatch> {
    let ids = utterance_ids(paths)?;
    let results = parallel_map(paths, run.jobs, |p| load_input(p, run.channel)?.transcribe(model, &run.options));
    Ok(DecodeBatch { ids, results })
}

pub fn decode(args: &DecodeArgs) -> CliResult<()> {
    let mut merged = args.run.merged()?;
    merged = merged.overlay(RunConfig {
        out: args.out.clone(),
        detail: args.detail.clone(),
        ..RunConfig::default()
    });
    let run = ResolvedRun::from_config(&merged)?;
    let model = load(run.model_path()?)?;
    let batch = decode_files(&model, &run, &args.inputs)?;
    emit(run.out.as_deref(), batch.tsv(&model).as_bytes())?;
    if let Some(p) = &run.detail {
        emit(Some(p), batch.detail(&model).as_bytes())?;
    }
    let failures = batch.into_failures();
    for f in &failures {
        eprintln!("error: {f}");
    }
    summarize_failures("inputs", args.inputs.len(), failures)
}

/// Grid axes as written in a JSON grid file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub policies: Vec<String>,
    pub segmentations: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// JSON grid `{"policies": [...], "segmentations": [...]}`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Comma-separated mask policies (overrides the grid file).
    #[arg(long, value_delimiter = ',')]
    pub policies: Vec<String>,
    /// Comma-separated segmentations such as `none,doi:8,doi:20,epd`.
    #[arg(long, value_delimiter = ',')]
    pub segs: Vec<String>,
    /// Reference transcripts (`id<TAB>text`).
    #[arg(long)]
    pub refs: PathBuf,
    /// Report CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub strip_whitespace: bool,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

/// One failed sweep cell.
#[derive(Debug)]
pub struct CellFailure {
    pub key: SweepKey,
    pub error: CliError,
}

/// Inputs loaded once shared by every sweep cell.
pub struct SweepData<'a> {
    pub inputs: &'a [Input],
    pub ids: &'a [String],
    pub refs: &'a [(String, String)],
}

pub struct SweepOutcome {
    pub report: String,
    pub failures: Vec<CellFailure>,
}

pub fn sweep_grid(args: &SweepArgs, merged: &RunConfig) -> CliResult<SweepGrid> {
    let mut grid = match &args.grid {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SweepGrid::default(),
    };
    if !args.policies.is_empty() {
        grid.policies = args.policies.clone();
    }
    if !args.segs.is_empty() {
        grid.segmentations = args.segs.clone();
    }
    if grid.policies.is_empty() {
        grid.policies = merged.mask.iter().cloned().collect();
    }
    if grid.segmentations.is_empty() {
        grid.segmentations = merged.segmentation.iter().cloned().collect();
    }
    Ok(grid)
}

/// Runs every (policy, segmentation) cell over the inputs and scores it.
/// Cells where any input fails are left out of the report and returned as
/// failures.
pub fn run_sweep(
    model: &Model,
    base: &ResolvedRun,
    merged: &RunConfig,
    grid: &SweepGrid,
    data: &SweepData,
    cer: &CerOptions,
) -> CliResult<SweepOutcome> {
    let w = merged.w.unwrap_or(DEFAULT_LOCAL_WINDOW);
    let overlap = merged.doi_overlap.unwrap_or(DEFAULT_DOI_OVERLAP);
    let vad = merged.vad.unwrap_or_default();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for p in &grid.policies {
        let policy = mask_policy(p, w)?;
        for s in &grid.segmentations {
            let seg = segmentation(s, overlap, vad)?;
            let key = SweepKey {
                policy: policy.label(),
                segmentation: seg.label().to_string(),
                doi_length: seg.doi_length(),
            };
            let opts = TranscribeOptions {
                policy,
                segmentation: seg,
                ..base.options
            };
            let batch = decode_inputs(model, data.inputs, data.ids.to_vec(), &opts, base.jobs);
            let hyps = batch.rows(model);
            let errors = batch.into_failures();
            if let Some(error) = errors.into_iter().next() {
                failures.push(CellFailure { key, error });
                continue;
            }
            let pairs: Vec<(String, String)> = join_by_id(data.refs, &hyps)?.into_iter().map(|(_, r, h)| (r, h)).collect();
            cells.push((key, corpus_cer(&pairs, cer)?));
        }
    }
    Ok(SweepOutcome {
        report: sweep_report(&cells)?,
        failures,
    })
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let merged = args.run.merged()?;
    let base = ResolvedRun::from_config(&merged)?;
    let grid = sweep_grid(args, &merged)?;
    let model = load(base.model_path()?)?;
    let refs = read_tsv(&args.refs)?;
    let ids = utterance_ids(&args.inputs)?;
    let loaded: Vec<CliResult<Input>> = parallel_map(&args.inputs, base.jobs, |p| load_input(p, base.channel));
    let inputs = loaded.into_iter().collect::<CliResult<Vec<Input>>>()?;
    let cer = CerOptions {
        strip_whitespace: args.strip_whitespace,
    };
    let data = SweepData {
        inputs: &inputs,
        ids: &ids,
        refs: &refs,
    };
    let outcome = run_sweep(&model, &base, &merged, &grid, &data, &cer)?;
    emit(args.out.as_deref(), outcome.report.as_bytes())?;
    let total = grid.policies.len() * grid.segmentations.len();
    let mut errors = Vec::new();
    for f in outcome.failures {
        let cell = format!(
            "cell {}/{}{}",
            f.key.policy,
            f.key.segmentation,
            f.key.doi_length.map(|d| format!(":{d}")).unwrap_or_default()
        );
        eprintln!("error: {cell}: {}", f.error);
        errors.push(f.error.context(cell));
    }
    summarize_failures("sweep cells", total, errors)
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// WAV or feature file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    /// Mask policy used while running the encoder up to `layer`.
    #[arg(long, default_value = "dense")]
    pub mask: String,
    #[arg(long, default_value_t = DEFAULT_LOCAL_WINDOW)]
    pub w: usize,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Heatmap CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Dense post-softmax attention of one layer and head as CSV text.
pub fn heatmap_csv(model: &Model, input: &Input, layer: usize, head: usize, mask: &str, w: usize) -> CliResult<String> {
    let enc = &model.config.encoder;
    if layer >= enc.num_layers {
        return Err(CliError::Config(format!("layer {layer} out of range (model has {})", enc.num_layers)));
    }
    if head >= enc.heads {
        return Err(CliError::Config(format!("head {head} out of range (model has {})", enc.heads)));
    }
    let policy = mask_policy(mask, w)?;
    let f = input.features(model)?;
    if enc.subsampled_len(f.num_frames()) == 0 {
        return Err(CliError::Data(format!(
            "{} feature frames is too short for the encoder",
            f.num_frames()
        )));
    }
    let (_, layers) = model.encode_with_diagnostics(&f, &policy)?;
    let mut buf = Vec::new();
    write_heatmap_csv(&mut buf, &attention_weights(&layers[layer].scores[head]))?;
    Ok(String::from_utf8(buf).expect("CSV is ASCII"))
}

pub fn heatmap(args: &HeatmapArgs) -> CliResult<()> {
    let model = load(&args.model)?;
    let input = load_input(&args.input, args.channel)?;
    let csv = heatmap_csv(&model, &input, args.layer, args.head, &args.mask, args.w)?;
    emit(args.out.as_deref(), csv.as_bytes())
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Reference transcripts (`id<TAB>text`).
    #[arg(long)]
    pub refs: PathBuf,
    /// Hypothesis transcripts, same format; ids may come in any order.
    #[arg(long)]
    pub hyps: PathBuf,
    /// Per-utterance JSON lines; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corpus summary JSON; printed to stderr when omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long)]
    pub strip_whitespace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub utterances: usize,
    #[serde(flatten)]
    pub total: ErrorBreakdown,
}

/// Per-utterance scores (reference order) and the corpus total.
pub fn evaluate(
    refs: &[(String, String)],
    hyps: &[(String, String)],
    opts: &CerOptions,
) -> CliResult<(Vec<UtteranceScore>, EvalSummary)> {
    let joined = join_by_id(refs, hyps)?;
    let scores = joined
        .iter()
        .map(|(id, r, h)| UtteranceScore {
            id: id.clone(),
            breakdown: edit_alignment_with(r, h, opts),
        })
        .collect();
    let pairs: Vec<(&str, &str)> = joined.iter().map(|(_, r, h)| (r.as_str(), h.as_str())).collect();
    let total = corpus_cer(&pairs, opts)?;
    Ok((
        scores,
        EvalSummary {
            utterances: joined.len(),
            total,
        },
    ))
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let refs = read_tsv(&args.refs)?;
    let hyps = read_tsv(&args.hyps)?;
    let opts = CerOptions {
        strip_whitespace: args.strip_whitespace,
    };
    let (scores, summary) = evaluate(&refs, &hyps, &opts)?;
    let mut lines = String::new();
    for s in &scores {
        let _ = writeln!(lines, "{}", serde_json::to_string(s).expect("scores serialize"));
    }
    emit(args.out.as_deref(), lines.as_bytes())?;
    let json = serde_json::to_string(&summary).expect("summary serializes") + "\n";
    match &args.summary {
        Some(p) => emit(Some(p), json.as_bytes()),
        None => {
            eprint!("{json}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "local+sgm3")]
    pub mask: String,
    #[arg(long, default_value_t = DEFAULT_LOCAL_WINDOW)]
    pub w: usize,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Emit JSON instead of a text table.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn stats(args: &StatsArgs) -> CliResult<()> {
    let model = load(&args.model)?;
    let input = load_input(&args.input, args.channel)?;
    let f = input.features(&model)?;
    let policy = mask_policy(&args.mask, args.w)?;
    let (_, layers) = model.encode_with_diagnostics(&f, &policy)?;
    let masks: Vec<_> = layers.into_iter().map(|l| l.masks).collect();
    let report = mask_stats(&masks)?;
    let text = if args.json {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    } else {
        report.to_text()
    };
    emit(args.out.as_deref(), text.as_bytes())
}

#[derive(Debug, Clone, Args)]
pub struct SegmentArgs {
    /// WAV file (feature files work for `none` and `doi:N`).
    #[arg(long)]
    pub input: PathBuf,
    /// none | epd | doi:<seconds>
    #[arg(long, default_value = "epd")]
    pub seg: String,
    #[arg(long, default_value_t = DEFAULT_DOI_OVERLAP)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Segments CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn segment(args: &SegmentArgs) -> CliResult<()> {
    let seg = segmentation(&args.seg, args.overlap, Default::default())?;
    let segments = match load_input(&args.input, args.channel)? {
        Input::Wave(w) => seg.split(w.duration(), Some(&w))?,
        Input::Features(f) => seg.split(f.duration(), None)?,
    };
    let mut buf = Vec::new();
    write_segments_csv(&mut buf, &segments)?;
    emit(args.out.as_deref(), &buf)
}

#[derive(Debug, Clone, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Take the frontend settings from this model (default frontend otherwise).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn features(args: &FeaturesArgs) -> CliResult<()> {
    let frontend = match &args.model {
        Some(p) => load(p)?.config.frontend,
        None => FrontendConfig::default(),
    };
    let w = read_wav(&args.input, args.channel).map_err(|e| CliError::from(e).context(args.input.display()))?;
    let f = log_mel_spectrogram(&w, &frontend)?;
    let mut buf = Vec::new();
    write_features(&mut buf, &f)?;
    emit(args.out.as_deref(), &buf)
}

/// Built-in defaults as JSON: `{"run": ..., "model": ...}`.
pub fn defaults_json() -> String {
    let mut m = BTreeMap::new();
    m.insert("run", serde_json::to_value(RunConfig::defaults()).expect("defaults serialize"));
    m.insert("model", serde_json::to_value(ModelConfig::default()).expect("defaults serialize"));
    serde_json::to_string_pretty(&m).expect("defaults serialize") + "\n"
}
