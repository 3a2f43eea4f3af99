//! End-to-end transcription: segmentation, features, encoder, search and
//! merge.

use serde::{Deserialize, Serialize};

use crate::attention::MaskPolicy;
use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, Waveform};
use crate::model_io::Model;
use crate::segmentation::{doi_merge, doi_split, epd_split, Segment, VadConfig, DEFAULT_DOI_OVERLAP};
use crate::transducer::{decode_with_srs, DecodeConfig, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segmentation {
    None,
    Doi { length: f64, overlap: f64 },
    Epd(VadConfig),
}

impl Segmentation {
    /// `none`, `epd`, `doi:<seconds>` (overlap defaults to 2 s).
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Segmentation::None),
            "epd" => Ok(Segmentation::Epd(VadConfig::default())),
            _ => {
                let len = s
                    .strip_prefix("doi:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parameter(format!("unknown segmentation {s:?}; use none, epd or doi:<seconds>")))?;
                Ok(Segmentation::Doi {
                    length: len,
                    overlap: DEFAULT_DOI_OVERLAP,
                })
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Segmentation::None => "none",
            Segmentation::Doi { .. } => "doi",
            Segmentation::Epd(_) => "epd",
        }
    }

    pub fn doi_length(&self) -> Option<f64> {
        match self {
            Segmentation::Doi { length, .. } => Some(*length),
            _ => None,
        }
    }

    /// Segments for a signal of `duration` seconds; EPD needs the samples.
    pub fn split(&self, duration: f64, wave: Option<&Waveform>) -> Result<Vec<Segment>> {
        match self {
            Segmentation::None => Ok(vec![Segment::whole(0.0, duration)]),
            Segmentation::Doi { length, overlap } => doi_split(duration, *length, *overlap),
            Segmentation::Epd(cfg) => match wave {
                Some(w) => epd_split(w, cfg),
                None => Err(Error::Parameter("EPD segmentation needs waveform input".into())),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranscribeOptions {
    pub policy: MaskPolicy,
    pub decode: DecodeConfig,
    pub segmentation: Segmentation,
}

impl Default for TranscribeOptions {
    fn default() -> Self {
        Self {
            policy: MaskPolicy::default(),
            decode: DecodeConfig::default(),
            segmentation: Segmentation::None,
        }
    }
}

/// Encodes and decodes one stretch of features. Inputs too short to yield
/// an encoder frame decode to an empty transcript.
pub fn decode_features(model: &Model, f: &FeatureMatrix, opts: &TranscribeOptions) -> Result<Transcript> {
    let frame_rate = f.frame_shift * model.config.encoder.frame_rate_factor() as f64;
    if model.config.encoder.subsampled_len(f.num_frames()) == 0 {
        return Ok(Transcript::empty(frame_rate));
    }
    let h = model.encode(f, &opts.policy)?;
    decode_with_srs(&h, &model.decoder, &opts.decode)
}

fn merge_segments(segments: Vec<Segment>, decoded: Vec<Transcript>, frame_rate: f64) -> Result<Transcript> {
    if segments.is_empty() {
        return Ok(Transcript::empty(frame_rate));
    }
    let results: Vec<(Segment, Option<Transcript>)> = segments.into_iter().zip(decoded.into_iter().map(Some)).collect();
    doi_merge(&results)
}

pub fn transcribe_waveform(model: &Model, w: &Waveform, opts: &TranscribeOptions) -> Result<Transcript> {
    let frame_rate = model.config.frontend.frame_shift_seconds() * model.config.encoder.frame_rate_factor() as f64;
    let segments = opts.segmentation.split(w.duration(), Some(w))?;
    let mut decoded = Vec::with_capacity(segments.len());
    for s in &segments {
        let piece = w.slice_seconds(s.start, s.end);
        let f = if model.config.frontend.num_frames(piece.samples.len()) == 0 {
            None
        } else {
            Some(model.features(&piece)?)
        };
        decoded.push(match f {
            Some(f) => decode_features(model, &f, opts)?,
            None => Transcript::empty(frame_rate),
        });
    }
    merge_segments(segments, decoded, frame_rate)
}

pub fn transcribe_features(model: &Model, f: &FeatureMatrix, opts: &TranscribeOptions) -> Result<Transcript> {
    let frame_rate = f.frame_shift * model.config.encoder.frame_rate_factor() as f64;
    let segments = opts.segmentation.split(f.duration(), None)?;
    let mut decoded = Vec::with_capacity(segments.len());
    for s in &segments {
        decoded.push(decode_features(model, &f.slice_seconds(s.start, s.end), opts)?);
    }
    merge_segments(segments, decoded, frame_rate)
}
