//! Run configuration: an optional JSON file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sparse_rnnt::attention::{MaskKind, MaskPolicy, DEFAULT_LOCAL_WINDOW};
use sparse_rnnt::pipeline::{Segmentation, TranscribeOptions};
use sparse_rnnt::segmentation::{VadConfig, DEFAULT_DOI_OVERLAP};
use sparse_rnnt::transducer::{DecodeConfig, SrsParams, DEFAULT_MAX_SYMBOLS_PER_FRAME, DEFAULT_T_SIL};

use crate::error::{CliError, CliResult};

pub const DEFAULT_BEAM: usize = 4;
pub const DEFAULT_MASK: &str = "local+sgm3";

/// Run settings as written in a JSON config file. Every field is optional;
/// missing fields fall back to flags, then to built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub mask: Option<String>,
    pub w: Option<usize>,
    pub beam: Option<usize>,
    pub expansions: Option<usize>,
    pub max_symbols_per_frame: Option<usize>,
    pub srs: Option<bool>,
    pub t_sil: Option<usize>,
    pub segmentation: Option<String>,
    pub doi_overlap: Option<f64>,
    pub vad: Option<VadConfig>,
    pub channel: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub detail: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The built-in defaults written out in full.
    pub fn defaults() -> Self {
        Self {
            model: None,
            mask: Some(DEFAULT_MASK.into()),
            w: Some(DEFAULT_LOCAL_WINDOW),
            beam: Some(DEFAULT_BEAM),
            expansions: None,
            max_symbols_per_frame: Some(DEFAULT_MAX_SYMBOLS_PER_FRAME),
            srs: Some(false),
            t_sil: Some(DEFAULT_T_SIL),
            segmentation: Some("none".into()),
            doi_overlap: Some(DEFAULT_DOI_OVERLAP),
            vad: Some(VadConfig::default()),
            channel: Some(0),
            jobs: Some(1),
            out: None,
            detail: None,
        }
    }

    /// Fields set in `top` win over fields set in `self`.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        RunConfig {
            model: top.model.or(self.model),
            mask: top.mask.or(self.mask),
            w: top.w.or(self.w),
            beam: top.beam.or(self.beam),
            expansions: top.expansions.or(self.expansions),
            max_symbols_per_frame: top.max_symbols_per_frame.or(self.max_symbols_per_frame),
            srs: top.srs.or(self.srs),
            t_sil: top.t_sil.or(self.t_sil),
            segmentation: top.segmentation.or(self.segmentation),
            doi_overlap: top.doi_overlap.or(self.doi_overlap),
            vad: top.vad.or(self.vad),
            channel: top.channel.or(self.channel),
            jobs: top.jobs.or(self.jobs),
            out: top.out.or(self.out),
            detail: top.detail.or(self.detail),
        }
    }
}

/// Flags shared by every command that decodes audio.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model file written by `gen-model`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// dense | local | local+sgm1 | local+sgm2 | local+sgm3
    #[arg(long)]
    pub mask: Option<String>,
    /// Local window half-width in encoder frames.
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Candidate tokens expanded per hypothesis (default: beam width).
    #[arg(long)]
    pub expansions: Option<usize>,
    #[arg(long)]
    pub max_symbols: Option<usize>,
    /// Reset prediction states after long all-blank stretches.
    #[arg(long, conflicts_with = "no_srs")]
    pub srs: bool,
    #[arg(long)]
    pub no_srs: bool,
    /// Consecutive all-blank frames tolerated before a reset.
    #[arg(long)]
    pub t_sil: Option<usize>,
    /// none | epd | doi:<seconds>
    #[arg(long)]
    pub seg: Option<String>,
    /// Shorthand for `--seg doi:<seconds>`.
    #[arg(long)]
    pub doi: Option<f64>,
    /// Per-side DOI overlap in seconds.
    #[arg(long)]
    pub overlap: Option<f64>,
    /// WAV channel to decode.
    #[arg(long)]
    pub channel: Option<usize>,
    /// Files decoded in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl RunFlags {
    fn as_config(&self) -> CliResult<RunConfig> {
        let segmentation = match (&self.seg, self.doi) {
            (Some(s), Some(d)) => {
                let from_seg = Segmentation::parse(s)?.doi_length();
                if from_seg != Some(d) {
                    return Err(CliError::Config(format!("--seg {s} conflicts with --doi {d}")));
                }
                Some(s.clone())
            }
            (Some(s), None) => Some(s.clone()),
            (None, Some(d)) => Some(format!("doi:{d}")),
            (None, None) => None,
        };
        Ok(RunConfig {
            model: self.model.clone(),
            mask: self.mask.clone(),
            w: self.w,
            beam: self.beam,
            expansions: self.expansions,
            max_symbols_per_frame: self.max_symbols,
            srs: match (self.srs, self.no_srs) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
            t_sil: self.t_sil,
            segmentation,
            doi_overlap: self.overlap,
            vad: None,
            channel: self.channel,
            jobs: self.jobs,
            out: None,
            detail: None,
        })
    }

    /// Defaults, then the config file, then these flags.
    pub fn merged(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(RunConfig::defaults().overlay(file).overlay(self.as_config()?))
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub model: Option<PathBuf>,
    pub options: TranscribeOptions,
    pub channel: usize,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub detail: Option<PathBuf>,
}

impl ResolvedRun {
    /// Resolves a merged config whose fields are all filled by
    /// [`RunConfig::defaults`].
    pub fn from_config(c: &RunConfig) -> CliResult<Self> {
        let d = RunConfig::defaults();
        let mask = c.mask.clone().or(d.mask).unwrap_or_default();
        let w = c.w.or(d.w).unwrap_or(DEFAULT_LOCAL_WINDOW);
        let policy = mask_policy(&mask, w)?;
        let overlap = c.doi_overlap.or(d.doi_overlap).unwrap_or(DEFAULT_DOI_OVERLAP);
        let segmentation = segmentation(
            c.segmentation.as_deref().unwrap_or("none"),
            overlap,
            c.vad.or(d.vad).unwrap_or_default(),
        )?;
        let decode = DecodeConfig {
            beam: c.beam.or(d.beam).unwrap_or(DEFAULT_BEAM),
            expansions: c.expansions,
            max_symbols_per_frame: c.max_symbols_per_frame.unwrap_or(DEFAULT_MAX_SYMBOLS_PER_FRAME),
            srs: SrsParams {
                enabled: c.srs.unwrap_or(false),
                t_sil: c.t_sil.unwrap_or(DEFAULT_T_SIL),
            },
        };
        decode.validate()?;
        let jobs = c.jobs.unwrap_or(1);
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be >= 1".into()));
        }
        Ok(Self {
            model: c.model.clone(),
            options: TranscribeOptions {
                policy,
                decode,
                segmentation,
            },
            channel: c.channel.unwrap_or(0),
            jobs,
            out: c.out.clone(),
            detail: c.detail.clone(),
        })
    }

    pub fn model_path(&self) -> CliResult<&Path> {
        self.model
            .as_deref()
            .ok_or_else(|| CliError::Config("no model given (use --model or the config's \"model\")".into()))
    }
}

pub fn mask_policy(label: &str, w: usize) -> CliResult<MaskPolicy> {
    let kind: MaskKind = label.parse()?;
    Ok(kind.with_window(w))
}

/// Parses a segmentation label, applying the DOI overlap and VAD settings.
pub fn segmentation(label: &str, overlap: f64, vad: VadConfig) -> CliResult<Segmentation> {
    let seg = match Segmentation::parse(label)? {
        Segmentation::Doi { length, .. } => {
            if !(overlap >= 0.0 && length > 2.0 * overlap) {
                return Err(CliError::Config(format!(
                    "DOI length {length} s must exceed twice the overlap {overlap} s"
                )));
            }
            Segmentation::Doi { length, overlap }
        }
        Segmentation::Epd(_) => {
            vad.validate()?;
            Segmentation::Epd(vad)
        }
        Segmentation::None => Segmentation::None,
    };
    Ok(seg)
}
