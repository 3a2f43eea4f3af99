//! Transducer decoding: LSTM prediction network, joint network, greedy and
//! breadth-first beam search, and the silence-triggered prediction-state
//! reset (SRS).
//!
//! Search is written against [`TransducerScorer`] so that scripted scorers
//! can drive it in tests; [`DecoderNetworks`] is the real implementation.
//!
//! A hypothesis's `last_was_blank` flag means "emitted nothing during the
//! current frame". A frame where every surviving hypothesis has the flag set
//! is an all-blank step for the SRS counter.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutputs;
use crate::error::{Error, Result};
use crate::numerics::{linear, log_add_exp, log_softmax, lstm_cell_step, vec_mat, LstmWeights, Matrix, RecurrentState};

pub const DEFAULT_T_SIL: usize = 15;
pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub blank_id: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, blank_id: usize) -> Result<Self> {
        let v = Self { tokens, blank_id };
        v.validate()?;
        Ok(v)
    }

    /// `<blank>` followed by space, `a`-`z`, `0`-`9`, then `#n` placeholders.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Vocabulary(format!("vocabulary needs at least 2 entries, got {size}")));
        }
        let chars: Vec<String> = std::iter::once(' ')
            .chain('a'..='z')
            .chain('0'..='9')
            .map(String::from)
            .collect();
        let mut tokens = vec!["<blank>".to_string()];
        for i in 1..size {
            tokens.push(chars.get(i - 1).cloned().unwrap_or_else(|| format!("#{i}")));
        }
        Self::new(tokens, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blank_id >= self.tokens.len() {
            return Err(Error::Vocabulary(format!(
                "blank_id {} out of range for {} tokens",
                self.blank_id,
                self.tokens.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Concatenates token strings, skipping blank.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != self.blank_id)
            .filter_map(|&id| self.token(id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionNetwork {
    /// `V × E`; the start symbol uses a zero embedding instead of a row.
    pub embedding: Matrix,
    pub lstm: LstmWeights,
}

impl PredictionNetwork {
    pub fn zeros(vocab: usize, embed_dim: usize, hidden: usize) -> Self {
        Self {
            embedding: Matrix::zeros(vocab, embed_dim),
            lstm: LstmWeights::zeros(embed_dim, hidden),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm.hidden_size()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }
}

/// One prediction step. `token = None` is the start symbol. Returns the
/// output `g` (the new hidden vector) and the new state.
pub fn predict_step(
    token: Option<usize>,
    state: &RecurrentState,
    net: &PredictionNetwork,
) -> Result<(Vec<f64>, RecurrentState)> {
    let input = match token {
        None => vec![0.0; net.embed_dim()],
        Some(id) if id < net.embedding.rows() => net.embedding.row(id).to_vec(),
        Some(id) => {
            return Err(Error::Vocabulary(format!(
                "token {id} out of range for {} embeddings",
                net.embedding.rows()
            )))
        }
    };
    lstm_cell_step(&input, state, &net.lstm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointNetwork {
    /// `D × J`
    pub enc_proj: Matrix,
    /// `P × J`
    pub pred_proj: Matrix,
    pub bias: Vec<f64>,
    /// `J × V`
    pub out: Matrix,
    pub out_bias: Vec<f64>,
}

impl JointNetwork {
    pub fn zeros(enc_dim: usize, pred_dim: usize, hidden: usize, vocab: usize) -> Self {
        Self {
            enc_proj: Matrix::zeros(enc_dim, hidden),
            pred_proj: Matrix::zeros(pred_dim, hidden),
            bias: vec![0.0; hidden],
            out: Matrix::zeros(hidden, vocab),
            out_bias: vec![0.0; vocab],
        }
    }
}

/// `log_softmax(tanh(h·U + g·V + b)·O + o)`.
pub fn joint(h: &[f64], g: &[f64], net: &JointNetwork) -> Result<Vec<f64>> {
    let a = vec_mat(h, &net.enc_proj)?;
    let b = linear(g, &net.pred_proj, &net.bias)?;
    let hidden: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y).tanh()).collect();
    Ok(log_softmax(&linear(&hidden, &net.out, &net.out_bias)?))
}

/// What the search needs from a model.
pub trait TransducerScorer {
    fn vocab(&self) -> &Vocabulary;
    fn state_size(&self) -> usize;
    /// Advances the prediction state by one token (`None` = start symbol).
    fn predict(&self, token: Option<usize>, state: &RecurrentState) -> Result<RecurrentState>;
    /// Log-probabilities over the vocabulary; `g` is the state's hidden vector.
    fn joint(&self, h: &[f64], g: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNetworks {
    pub vocab: Vocabulary,
    pub prediction: PredictionNetwork,
    pub joint: JointNetwork,
}

impl TransducerScorer for DecoderNetworks {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn state_size(&self) -> usize {
        self.prediction.hidden_size()
    }

    fn predict(&self, token: Option<usize>, state: &RecurrentState) -> Result<RecurrentState> {
        predict_step(token, state, &self.prediction).map(|(_, s)| s)
    }

    fn joint(&self, h: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        joint(h, g, &self.joint)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Encoder frame at which each token was emitted.
    pub frames: Vec<usize>,
    pub log_prob: f64,
    /// State after consuming the last token; its hidden vector is `g`.
    pub pred_state: RecurrentState,
    pub last_was_blank: bool,
}

impl Hypothesis {
    pub fn initial<S: TransducerScorer + ?Sized>(scorer: &S) -> Result<Self> {
        Ok(Self {
            tokens: Vec::new(),
            frames: Vec::new(),
            log_prob: 0.0,
            pred_state: scorer.predict(None, &RecurrentState::zeros(scorer.state_size()))?,
            last_was_blank: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrsParams {
    pub enabled: bool,
    /// Resets fire once more than this many consecutive all-blank steps occur.
    pub t_sil: usize,
}

impl Default for SrsParams {
    fn default() -> Self {
        Self {
            enabled: false,
            t_sil: DEFAULT_T_SIL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Non-blank extensions per hypothesis per step; `None` means `beam`.
    pub expansions: Option<usize>,
    pub max_symbols_per_frame: usize,
    pub srs: SrsParams,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            expansions: None,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
            srs: SrsParams::default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Parameter("beam must be >= 1".into()));
        }
        if self.expansions == Some(0) {
            return Err(Error::Parameter("expansions must be >= 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Parameter("max_symbols_per_frame must be >= 1".into()));
        }
        if self.srs.t_sil == 0 {
            return Err(Error::Parameter("t_sil must be >= 1".into()));
        }
        Ok(())
    }

    fn expansions(&self) -> usize {
        self.expansions.unwrap_or(self.beam)
    }
}

/// Consecutive all-blank step counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrsCounter {
    t_sil: usize,
    reset: usize,
}

impl SrsCounter {
    pub fn new(t_sil: usize) -> Self {
        Self { t_sil, reset: 0 }
    }

    pub fn count(&self) -> usize {
        self.reset
    }

    /// Records one step; returns true when the prediction states must be
    /// zeroed, in which case the counter is cleared.
    pub fn observe(&mut self, all_blank: bool) -> bool {
        if all_blank {
            self.reset += 1;
        } else {
            self.reset = 0;
        }
        if self.reset > self.t_sil {
            self.reset = 0;
            true
        } else {
            false
        }
    }
}

pub fn check_blank_token(hyps: &[Hypothesis]) -> bool {
    hyps.iter().all(|h| h.last_was_blank)
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

struct Candidate {
    hyp: Hypothesis,
    finished: bool,
}

/// Merges candidates sharing (tokens, finished) by log-sum-exp in generation
/// order; the higher-scoring member supplies state and emission frames.
fn merge(pool: Vec<Candidate>) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::with_capacity(pool.len());
    let mut index = std::collections::HashMap::new();
    for c in pool {
        match index.get(&(c.hyp.tokens.clone(), c.finished)) {
            Some(&k) => {
                let kept: &mut Candidate = &mut out[k];
                let total = log_add_exp(kept.hyp.log_prob, c.hyp.log_prob);
                if c.hyp.log_prob > kept.hyp.log_prob {
                    kept.hyp = c.hyp;
                }
                kept.hyp.log_prob = total;
            }
            None => {
                index.insert((c.hyp.tokens.clone(), c.finished), out.len());
                out.push(c);
            }
        }
    }
    out
}

fn prune(mut pool: Vec<Candidate>, beam: usize) -> Vec<Candidate> {
    pool.sort_by(|a, b| rank(&a.hyp, &b.hyp).then_with(|| b.finished.cmp(&a.finished)));
    pool.truncate(beam);
    pool
}

/// Expands `hyps_prev` over encoder frame `frame` until every survivor has
/// taken a blank or the per-frame symbol cap is reached.
pub fn beam_search_step<S: TransducerScorer + ?Sized>(
    scorer: &S,
    h_i: &[f64],
    frame: usize,
    hyps_prev: &[Hypothesis],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    if hyps_prev.is_empty() {
        return Err(Error::Contract("beam_search_step needs at least one hypothesis".into()));
    }
    let vocab = scorer.vocab();
    let blank = vocab.blank_id;
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut active: Vec<Hypothesis> = hyps_prev
        .iter()
        .cloned()
        .map(|mut h| {
            h.last_was_blank = true;
            h
        })
        .collect();

    for _ in 0..cfg.max_symbols_per_frame {
        let mut pool: Vec<Candidate> = finished
            .drain(..)
            .map(|hyp| Candidate { hyp, finished: true })
            .collect();
        for hyp in &active {
            let lp = scorer.joint(h_i, &hyp.pred_state.hidden)?;
            if lp.len() != vocab.len() {
                return Err(Error::shape("joint output", &[lp.len()], &[vocab.len()]));
            }
            let mut b = hyp.clone();
            b.log_prob += lp[blank];
            pool.push(Candidate { hyp: b, finished: true });

            let mut ids: Vec<usize> = (0..lp.len()).filter(|&k| k != blank).collect();
            ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &k in ids.iter().take(cfg.expansions()) {
                let mut n = hyp.clone();
                n.tokens.push(k);
                n.frames.push(frame);
                n.log_prob += lp[k];
                n.last_was_blank = false;
                pool.push(Candidate { hyp: n, finished: false });
            }
        }
        active.clear();
        for mut c in prune(merge(pool), cfg.beam) {
            if c.finished {
                finished.push(c.hyp);
            } else {
                let last = c.hyp.tokens.last().copied();
                c.hyp.pred_state = scorer.predict(last, &c.hyp.pred_state)?;
                active.push(c.hyp);
            }
        }
        if active.is_empty() {
            break;
        }
    }
    let mut out: Vec<Hypothesis> = finished.into_iter().chain(active).collect();
    out.sort_by(rank);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub token: usize,
    pub frame: usize,
    /// Seconds from the start of the decoded input.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub emissions: Vec<Emission>,
    pub log_prob: f64,
    /// Frames after whose step the prediction states were zeroed.
    pub reset_frames: Vec<usize>,
    /// Seconds per encoder frame.
    pub frame_rate: f64,
}

impl Transcript {
    pub fn empty(frame_rate: f64) -> Self {
        Self {
            emissions: Vec::new(),
            log_prob: 0.0,
            reset_frames: Vec::new(),
            frame_rate,
        }
    }

    fn from_hypothesis(h: &Hypothesis, frame_rate: f64, reset_frames: Vec<usize>) -> Self {
        Self {
            emissions: h
                .tokens
                .iter()
                .zip(&h.frames)
                .map(|(&token, &frame)| Emission {
                    token,
                    frame,
                    time: frame as f64 * frame_rate,
                })
                .collect(),
            log_prob: h.log_prob,
            reset_frames,
            frame_rate,
        }
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.emissions.iter().map(|e| e.token).collect()
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        vocab.render(&self.token_ids())
    }

    /// `id<TAB>text`, no trailing newline.
    pub fn tsv_line(&self, id: &str, vocab: &Vocabulary) -> String {
        format!("{id}\t{}", self.text(vocab))
    }

    pub fn detail_json(&self, id: &str, vocab: &Vocabulary) -> serde_json::Value {
        let tokens: Vec<serde_json::Value> = self
            .emissions
            .iter()
            .map(|e| {
                serde_json::json!({
                    "token": e.token,
                    "text": vocab.token(e.token).unwrap_or(""),
                    "frame": e.frame,
                    "time": e.time,
                })
            })
            .collect();
        serde_json::json!({
            "id": id,
            "text": self.text(vocab),
            "log_prob": self.log_prob,
            "tokens": tokens,
            "reset_frames": self.reset_frames,
        })
    }
}

/// Collapses hypotheses that differ only in frame-local status and returns
/// the best one.
fn best_of(hyps: Vec<Hypothesis>) -> Option<Hypothesis> {
    let merged = merge(
        hyps.into_iter()
            .map(|hyp| Candidate { hyp, finished: true })
            .collect(),
    );
    merged.into_iter().map(|c| c.hyp).min_by(rank)
}

/// Beam search over every encoder frame, with SRS when enabled.
pub fn decode_with_srs<S: TransducerScorer + ?Sized>(
    h: &EncoderOutputs,
    scorer: &S,
    cfg: &DecodeConfig,
) -> Result<Transcript> {
    cfg.validate()?;
    if h.is_empty() {
        return Err(Error::EmptyInput("no encoder frames to decode".into()));
    }
    let mut hyps = vec![Hypothesis::initial(scorer)?];
    let mut counter = SrsCounter::new(cfg.srs.t_sil);
    let mut reset_frames = Vec::new();
    for i in 0..h.len() {
        hyps = beam_search_step(scorer, h.h.row(i), i, &hyps, cfg)?;
        if cfg.srs.enabled && counter.observe(check_blank_token(&hyps)) {
            for hyp in &mut hyps {
                hyp.pred_state.reset();
            }
            reset_frames.push(i);
        }
    }
    let best = best_of(hyps).expect("beam is never empty");
    Ok(Transcript::from_hypothesis(&best, h.frame_rate, reset_frames))
}

/// Argmax decoding; ties go to blank, then to the lowest token id.
pub fn greedy_decode<S: TransducerScorer + ?Sized>(
    h: &EncoderOutputs,
    scorer: &S,
    max_symbols_per_frame: usize,
) -> Result<Transcript> {
    let mut hyp = Hypothesis::initial(scorer)?;
    let blank = scorer.vocab().blank_id;
    for i in 0..h.len() {
        for _ in 0..max_symbols_per_frame {
            let lp = scorer.joint(h.h.row(i), &hyp.pred_state.hidden)?;
            let mut best = blank;
            for (k, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = k;
                }
            }
            hyp.log_prob += lp[best];
            if best == blank {
                break;
            }
            hyp.tokens.push(best);
            hyp.frames.push(i);
            hyp.pred_state = scorer.predict(Some(best), &hyp.pred_state)?;
        }
    }
    Ok(Transcript::from_hypothesis(&hyp, h.frame_rate, Vec::new()))
}
