//! Long-form segmentation.
//!
//! DOI windows have length `doi_length` and hop `doi_length - 2·overlap`.
//! Neighbouring windows share `2·overlap` seconds and the boundary between
//! their cores sits in the middle of that shared stretch, so the cores tile
//! `[0, duration)`. Merging keeps each token in the segment whose core holds
//! its absolute emission time.
//!
//! EPD labels fixed frames by log-energy, cuts in the middle of every long
//! enough silence, merges segments with too little speech into the nearer
//! neighbour and force-splits overlong segments at their quietest frame.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::transducer::{Emission, Transcript};

pub const DEFAULT_DOI_OVERLAP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub core_start: f64,
    pub core_end: f64,
}

impl Segment {
    pub fn whole(start: f64, end: f64) -> Self {
        Self {
            start,
            end,
            core_start: start,
            core_end: end,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn core_duration(&self) -> f64 {
        self.core_end - self.core_start
    }
}

pub fn doi_split(duration: f64, doi_length: f64, overlap: f64) -> Result<Vec<Segment>> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::Parameter(format!("duration must be positive, got {duration}")));
    }
    if !(overlap >= 0.0) || !(doi_length > 2.0 * overlap) || !doi_length.is_finite() {
        return Err(Error::Parameter(format!(
            "need doi_length > 2*overlap >= 0, got doi_length {doi_length}, overlap {overlap}"
        )));
    }
    let hop = doi_length - 2.0 * overlap;
    let mut starts = vec![0.0];
    while starts[starts.len() - 1] + doi_length < duration {
        starts.push(starts.len() as f64 * hop);
    }
    let n = starts.len();
    // boundary k separates the cores of windows k and k+1
    let boundaries: Vec<f64> = (0..n - 1).map(|k| k as f64 * hop + (doi_length - overlap)).collect();
    Ok(starts
        .iter()
        .enumerate()
        .map(|(k, &start)| Segment {
            start,
            end: (start + doi_length).min(duration),
            core_start: if k == 0 { 0.0 } else { boundaries[k - 1] },
            core_end: if k + 1 == n { duration } else { boundaries[k] },
        })
        .collect())
}

/// Concatenates per-segment transcripts, keeping each token only inside its
/// segment's core (`[core_start, core_end)`; the first and last segments are
/// open towards the utterance edges). Frames are shifted onto the
/// whole-utterance frame grid by `round(start / frame_rate)` and ownership
/// is decided on that grid, so neighbours sharing a core boundary never both
/// keep, or both drop, the same frame. Without a frame rate, absolute times
/// are compared instead.
pub fn doi_merge(results: &[(Segment, Option<Transcript>)]) -> Result<Transcript> {
    let missing: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, (_, t))| t.is_none())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Incomplete(format!("no decoding result for segments {missing:?}")));
    }
    if results.is_empty() {
        return Err(Error::Incomplete("no segments to merge".into()));
    }
    let frame_rate = results[0].1.as_ref().map(|t| t.frame_rate).unwrap_or(0.0);
    let mut merged = Transcript::empty(frame_rate);
    let last = results.len() - 1;
    for (k, (seg, t)) in results.iter().enumerate() {
        let t = t.as_ref().expect("checked above");
        let offset = if t.frame_rate > 0.0 {
            (seg.start / t.frame_rate).round() as usize
        } else {
            0
        };
        let grid = |x: f64| (x / t.frame_rate).round() as usize;
        for e in &t.emissions {
            let time = seg.start + e.time;
            let frame = e.frame + offset;
            let (after_start, before_end) = if t.frame_rate > 0.0 {
                (frame >= grid(seg.core_start), frame < grid(seg.core_end))
            } else {
                (time >= seg.core_start, time < seg.core_end)
            };
            let after_start = k == 0 || after_start;
            let before_end = k == last || before_end;
            if after_start && before_end {
                merged.emissions.push(Emission {
                    token: e.token,
                    frame,
                    time,
                });
            }
        }
        merged.log_prob += t.log_prob;
        merged.reset_frames.extend(t.reset_frames.iter().map(|f| f + offset));
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VadConfig {
    /// Analysis frame length in seconds.
    pub frame: f64,
    pub energy_threshold_db: f64,
    pub min_silence: f64,
    pub min_segment: f64,
    pub max_segment: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame: 0.02,
            energy_threshold_db: -40.0,
            min_silence: 0.3,
            min_segment: 0.5,
            max_segment: 60.0,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame > 0.0) {
            return Err(Error::Parameter("vad frame must be > 0".into()));
        }
        if !(self.min_silence > 0.0) {
            return Err(Error::Parameter("min_silence must be > 0".into()));
        }
        if !(self.min_segment >= 0.0 && self.min_segment <= self.max_segment) {
            return Err(Error::Parameter(format!(
                "need 0 <= min_segment <= max_segment, got {} and {}",
                self.min_segment, self.max_segment
            )));
        }
        Ok(())
    }
}

/// Mean-square energy in dB of consecutive non-overlapping frames; the last
/// frame may be shorter.
pub fn frame_energy_db(w: &Waveform, frame_seconds: f64) -> Vec<f64> {
    let len = ((frame_seconds * w.sample_rate as f64).round() as usize).max(1);
    w.samples
        .chunks(len)
        .map(|c| {
            let power = c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64;
            10.0 * (power + 1e-12).log10()
        })
        .collect()
}

struct Piece {
    start: f64,
    end: f64,
    speech_start: f64,
    speech_end: f64,
}

pub fn epd_split(w: &Waveform, cfg: &VadConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let duration = w.duration();
    let energy = frame_energy_db(w, cfg.frame);
    let speech: Vec<bool> = energy.iter().map(|&e| e > cfg.energy_threshold_db).collect();
    let frame_time = |f: usize| (f as f64 * cfg.frame).min(duration);

    // speech runs as [first, last+1) frame ranges
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut f = 0;
    while f < speech.len() {
        if speech[f] {
            let s = f;
            while f < speech.len() && speech[f] {
                f += 1;
            }
            runs.push((s, f));
        } else {
            f += 1;
        }
    }
    if runs.is_empty() {
        return Ok(Vec::new());
    }

    // join runs separated by short silences
    let mut spans: Vec<(usize, usize)> = vec![runs[0]];
    for &(s, e) in &runs[1..] {
        let last = spans.last_mut().expect("nonempty");
        if frame_time(s) - frame_time(last.1) < cfg.min_silence {
            last.1 = e;
        } else {
            spans.push((s, e));
        }
    }

    let mut pieces: Vec<Piece> = spans
        .iter()
        .map(|&(s, e)| Piece {
            start: 0.0,
            end: 0.0,
            speech_start: frame_time(s),
            speech_end: frame_time(e),
        })
        .collect();
    set_cuts(&mut pieces, duration);

    while pieces.len() > 1 {
        let Some(k) = pieces
            .iter()
            .position(|p| p.speech_end - p.speech_start < cfg.min_segment)
        else {
            break;
        };
        let gap = |a: &Piece, b: &Piece| b.speech_start - a.speech_end;
        let into_prev = match (k.checked_sub(1), pieces.get(k + 1)) {
            (Some(p), Some(next)) => gap(&pieces[p], &pieces[k]) <= gap(&pieces[k], next),
            (Some(_), None) => true,
            _ => false,
        };
        let (a, b) = if into_prev { (k - 1, k) } else { (k, k + 1) };
        let removed = pieces.remove(b);
        pieces[a].speech_end = removed.speech_end;
        set_cuts(&mut pieces, duration);
    }

    let mut out = Vec::new();
    for p in &pieces {
        force_split(p.start, p.end, &energy, cfg, &mut out);
    }
    Ok(out)
}

/// Places segment edges at the middle of the silence between speech spans,
/// with the outer edges at 0 and `duration`.
fn set_cuts(pieces: &mut [Piece], duration: f64) {
    let n = pieces.len();
    for k in 0..n {
        pieces[k].start = if k == 0 {
            0.0
        } else {
            0.5 * (pieces[k - 1].speech_end + pieces[k].speech_start)
        };
        pieces[k].end = if k + 1 == n {
            duration
        } else {
            0.5 * (pieces[k].speech_end + pieces[k + 1].speech_start)
        };
    }
}

/// Splits `[start, end)` left to right into pieces of at most
/// `max_segment`, each cut at the quietest frame whose centre keeps the
/// remainder splittable.
fn force_split(start: f64, end: f64, energy: &[f64], cfg: &VadConfig, out: &mut Vec<Segment>) {
    let mut start = start;
    while end - start > cfg.max_segment {
        let pieces = ((end - start) / cfg.max_segment).ceil();
        let lo = (end - (pieces - 1.0) * cfg.max_segment).max(start);
        let hi = start + cfg.max_segment;
        let mut best: Option<(f64, f64)> = None;
        for (f, &e) in energy.iter().enumerate() {
            let centre = (f as f64 + 0.5) * cfg.frame;
            if centre >= lo && centre <= hi && centre > start && centre < end {
                if best.map_or(true, |(_, be)| e < be) {
                    best = Some((centre, e));
                }
            }
        }
        let cut = best.map_or(0.5 * (lo + hi), |(c, _)| c);
        out.push(Segment::whole(start, cut));
        start = cut;
    }
    out.push(Segment::whole(start, end));
}

pub fn write_segments_csv<W: Write>(mut out: W, segments: &[Segment]) -> Result<()> {
    writeln!(out, "index,start,end,core_start,core_end")?;
    for (i, s) in segments.iter().enumerate() {
        writeln!(
            out,
            "{i},{:.3},{:.3},{:.3},{:.3}",
            s.start, s.end, s.core_start, s.core_end
        )?;
    }
    Ok(())
}

pub fn read_segments_csv<R: BufRead>(input: R) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!("segment line {}: expected 5 fields", n + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("segment line {}: {e}", n + 1)))
        };
        out.push(Segment {
            start: num(fields[1])?,
            end: num(fields[2])?,
            core_start: num(fields[3])?,
            core_end: num(fields[4])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xorshift64Star;

    fn core_bounds(s: &[Segment]) -> Vec<(f64, f64)> {
        s.iter().map(|s| (s.core_start, s.core_end)).collect()
    }

    #[test]
    fn short_utterance_is_one_window() {
        let s = doi_split(10.0, 20.0, 2.0).unwrap();
        assert_eq!(s, vec![Segment::whole(0.0, 10.0)]);
    }

    #[test]
    fn fifty_seconds_doi20() {
        let s = doi_split(50.0, 20.0, 2.0).unwrap();
        let windows: Vec<(f64, f64)> = s.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(windows, vec![(0.0, 20.0), (16.0, 36.0), (32.0, 50.0)]);
        assert_eq!(core_bounds(&s), vec![(0.0, 18.0), (18.0, 34.0), (34.0, 50.0)]);
    }

    #[test]
    fn zero_overlap_abuts() {
        let s = doi_split(25.0, 10.0, 0.0).unwrap();
        for w in s.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        for seg in &s {
            assert_eq!((seg.start, seg.end), (seg.core_start, seg.core_end));
        }
    }

    #[test]
    fn invalid_doi_parameters() {
        assert!(doi_split(10.0, 4.0, 2.0).is_err());
        assert!(doi_split(0.0, 20.0, 2.0).is_err());
        assert!(doi_split(10.0, 20.0, -1.0).is_err());
    }

    #[test]
    fn cores_tile_random_durations() {
        let mut rng = Xorshift64Star::new(21);
        for _ in 0..200 {
            let duration = rng.uniform(0.5, 300.0);
            let doi = [8.0, 18.0, 20.0, 28.0, 38.0, 48.0, 58.0][rng.below(7)];
            let s = doi_split(duration, doi, 2.0).unwrap();
            assert_eq!(s[0].core_start, 0.0);
            assert_eq!(s.last().unwrap().core_end, duration);
            for w in s.windows(2) {
                assert_eq!(w[0].core_end, w[1].core_start);
                assert!((w[1].start - w[0].start - (doi - 4.0)).abs() < 1e-9);
            }
            for seg in &s {
                assert!(seg.start <= seg.core_start && seg.core_start <= seg.core_end && seg.core_end <= seg.end);
                assert!(seg.duration() <= doi + 1e-9);
            }
            let total: f64 = s.iter().map(Segment::core_duration).sum();
            assert!((total - duration).abs() < 1e-9);
        }
    }

    fn emission(token: usize, time: f64) -> Emission {
        Emission {
            token,
            frame: (time / 0.04).round() as usize,
            time,
        }
    }

    fn transcript(e: Vec<Emission>) -> Transcript {
        Transcript {
            emissions: e,
            log_prob: -1.0,
            reset_frames: vec![],
            frame_rate: 0.04,
        }
    }

    #[test]
    fn single_segment_passthrough() {
        let t = transcript(vec![emission(3, 0.4), emission(5, 1.2)]);
        let merged = doi_merge(&[(Segment::whole(0.0, 8.0), Some(t.clone()))]).unwrap();
        assert_eq!(merged, t);
    }

    #[test]
    fn boundary_token_owned_by_first_core() {
        let s = doi_split(30.0, 20.0, 2.0).unwrap();
        // absolute 17.5 s is inside both windows
        let first = transcript(vec![emission(7, 17.5)]);
        let second = transcript(vec![emission(7, 17.5 - s[1].start)]);
        let merged = doi_merge(&[(s[0], Some(first)), (s[1], Some(second))]).unwrap();
        assert_eq!(merged.token_ids(), vec![7]);
        assert_eq!(merged.emissions[0].time, 17.5);
    }

    #[test]
    fn missing_result_is_incomplete() {
        let s = doi_split(30.0, 20.0, 2.0).unwrap();
        let r = doi_merge(&[(s[0], Some(transcript(vec![]))), (s[1], None)]);
        assert!(matches!(r, Err(Error::Incomplete(_))));
    }

    /// Emits token `t` at every integer second `t` inside the window.
    fn clock_decoder(seg: &Segment, last: bool) -> Transcript {
        let mut e = Vec::new();
        let mut t = seg.start.ceil().max(1.0);
        while t < seg.end || (last && t <= seg.end) {
            e.push(emission(t as usize, t - seg.start));
            t += 1.0;
        }
        transcript(e)
    }

    #[test]
    fn clock_decoder_merge_has_no_duplicates() {
        let mut rng = Xorshift64Star::new(22);
        for _ in 0..100 {
            let duration = rng.uniform(1.0, 200.0);
            let doi = [8.0, 18.0, 20.0, 28.0, 38.0, 48.0, 58.0][rng.below(7)];
            let segs = doi_split(duration, doi, 2.0).unwrap();
            let n = segs.len();
            let results: Vec<_> = segs
                .iter()
                .enumerate()
                .map(|(k, s)| (*s, Some(clock_decoder(s, k + 1 == n))))
                .collect();
            let merged = doi_merge(&results).unwrap();
            let whole = clock_decoder(&Segment::whole(0.0, duration), true);
            assert_eq!(merged.token_ids(), whole.token_ids());
            assert_eq!(merged.emissions.len(), duration.floor() as usize);
        }
    }

    fn tone(seconds: f64, sr: u32) -> Vec<f64> {
        let n = (seconds * sr as f64).round() as usize;
        (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn silence_has_no_segments() {
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        assert!(epd_split(&w, &VadConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn tone_gap_tone() {
        let sr = 16000;
        let mut s = tone(1.0, sr);
        s.extend(vec![0.0; sr as usize]);
        s.extend(tone(1.0, sr));
        let w = Waveform::new(s, sr).unwrap();
        let cfg = VadConfig {
            min_silence: 0.5,
            ..VadConfig::default()
        };
        let segs = epd_split(&w, &cfg).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].start, 0.0);
        assert!((segs[0].end - 1.5).abs() < 1e-9);
        assert_eq!(segs[1].start, segs[0].end);
        assert!((segs[1].end - 3.0).abs() < 1e-9);
    }

    #[test]
    fn short_gap_is_not_a_cut() {
        let sr = 16000;
        let mut s = tone(1.0, sr);
        s.extend(vec![0.0; 3200]);
        s.extend(tone(1.0, sr));
        let w = Waveform::new(s, sr).unwrap();
        assert_eq!(epd_split(&w, &VadConfig::default()).unwrap().len(), 1);
    }

    #[test]
    fn short_blip_merges_into_nearer_neighbour() {
        let sr = 16000;
        let mut s = tone(1.0, sr);
        s.extend(vec![0.0; 8000]);
        s.extend(tone(0.1, sr));
        s.extend(vec![0.0; 16000]);
        s.extend(tone(1.0, sr));
        let w = Waveform::new(s, sr).unwrap();
        let segs = epd_split(&w, &VadConfig::default()).unwrap();
        assert_eq!(segs.len(), 2);
        // blip ends at 1.6 s, the next tone starts at 2.6 s
        assert!((segs[0].end - 2.1).abs() < 1e-9);
    }

    #[test]
    fn overlong_tone_is_force_split() {
        let sr = 8000;
        let cfg = VadConfig {
            max_segment: 2.0,
            ..VadConfig::default()
        };
        let w = Waveform::new(tone(3.0, sr), sr).unwrap();
        let segs = epd_split(&w, &cfg).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(segs[0].end > 0.0 && segs[0].end < 3.0);
        for s in &segs {
            assert!(s.duration() <= 2.0 + 1e-9);
        }

        let long = Waveform::new(tone(9.5, sr), sr).unwrap();
        let segs = epd_split(&long, &cfg).unwrap();
        assert_eq!(segs.len(), 5);
        assert!(segs.iter().all(|s| s.duration() <= 2.0 + 1e-9));
        assert!(segs.windows(2).all(|p| p[0].end == p[1].start));
    }

    #[test]
    fn force_split_prefers_quiet_frame() {
        let sr = 8000;
        let mut s = tone(1.3, sr);
        // a dip that is still above threshold
        s.extend(tone(0.02, sr).into_iter().map(|x| x * 0.1));
        s.extend(tone(1.18, sr));
        let w = Waveform::new(s, sr).unwrap();
        let cfg = VadConfig {
            max_segment: 2.0,
            ..VadConfig::default()
        };
        let segs = epd_split(&w, &cfg).unwrap();
        assert_eq!(segs.len(), 2);
        assert!((segs[0].end - 1.31).abs() < 1e-9);
    }

    #[test]
    fn segment_csv_round_trip() {
        let segs = doi_split(50.0, 20.0, 2.0).unwrap();
        let mut buf = Vec::new();
        write_segments_csv(&mut buf, &segs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("index,start,end,core_start,core_end\n0,0.000,20.000,0.000,18.000\n"));
        assert_eq!(read_segments_csv(&buf[..]).unwrap(), segs);
    }
}
