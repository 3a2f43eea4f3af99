//! Input loading, atomic output and file-level parallelism.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sparse_rnnt::frontend::{read_feature_file, read_wav, FeatureMatrix, Waveform};
use sparse_rnnt::model_io::Model;
use sparse_rnnt::pipeline::{transcribe_features, transcribe_waveform, TranscribeOptions};
use sparse_rnnt::transducer::Transcript;

use crate::error::{CliError, CliResult};

/// A decodable input: PCM16 WAV (`.wav`) or a feature text file (anything
/// else).
#[derive(Debug, Clone)]
pub enum Input {
    Wave(Waveform),
    Features(FeatureMatrix),
}

pub fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

pub fn load_input(path: &Path, channel: usize) -> CliResult<Input> {
    let r = if is_wav(path) {
        read_wav(path, channel).map(Input::Wave)
    } else {
        read_feature_file(path).map(Input::Features)
    };
    r.map_err(|e| CliError::from(e).context(path.display()))
}

impl Input {
    pub fn transcribe(&self, model: &Model, opts: &TranscribeOptions) -> CliResult<Transcript> {
        let t = match self {
            Input::Wave(w) => transcribe_waveform(model, w, opts)?,
            Input::Features(f) => transcribe_features(model, f, opts)?,
        };
        Ok(t)
    }

    pub fn features(&self, model: &Model) -> CliResult<FeatureMatrix> {
        match self {
            Input::Wave(w) => Ok(model.features(w)?),
            Input::Features(f) => Ok(f.clone()),
        }
    }
}

/// Utterance id of an input path: its file stem.
pub fn utterance_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Ids for all inputs; two inputs with the same stem are a config error.
pub fn utterance_ids(paths: &[PathBuf]) -> CliResult<Vec<String>> {
    let ids: Vec<String> = paths.iter().map(|p| utterance_id(p)).collect();
    let mut seen = BTreeSet::new();
    for (id, p) in ids.iter().zip(paths) {
        if !seen.insert(id.as_str()) {
            return Err(CliError::Config(format!("duplicate utterance id `{id}` ({})", p.display())));
        }
    }
    Ok(ids)
}

/// Writes `bytes` to a temp file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let err = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(bytes).map_err(err)?;
    tmp.as_file().sync_all().map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

/// Writes to `path` atomically, or to stdout when `path` is `None` or `-`.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) if p != Path::new("-") => write_atomic(p, bytes),
        _ => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

/// Maps `f` over `items` on up to `jobs` threads. Results keep input order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = jobs.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}
