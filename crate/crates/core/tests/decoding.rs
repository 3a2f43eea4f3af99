use std::collections::BTreeMap;

use sparse_rnnt::encoder::EncoderOutputs;
use sparse_rnnt::numerics::{log_softmax, LstmWeights, Matrix, RecurrentState};
use sparse_rnnt::rng::Xorshift64Star;
use sparse_rnnt::transducer::{
    beam_search_step, decode_with_srs, greedy_decode, DecodeConfig, DecoderNetworks, Hypothesis, JointNetwork,
    PredictionNetwork, SrsParams, TransducerScorer, Vocabulary,
};
use sparse_rnnt::Result;

fn rand_mat(rng: &mut Xorshift64Star, r: usize, c: usize, s: f64) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.uniform(-s, s)).collect()).unwrap()
}

fn nets(rng: &mut Xorshift64Star, d: usize, v: usize) -> DecoderNetworks {
    let (e, p, j) = (3, 4, 6);
    DecoderNetworks {
        vocab: Vocabulary::synthetic(v).unwrap(),
        prediction: PredictionNetwork {
            embedding: rand_mat(rng, v, e, 1.0),
            lstm: LstmWeights {
                input: rand_mat(rng, e, 4 * p, 1.0),
                recurrent: rand_mat(rng, p, 4 * p, 1.0),
                bias: (0..4 * p).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            },
        },
        joint: JointNetwork {
            enc_proj: rand_mat(rng, d, j, 1.0),
            pred_proj: rand_mat(rng, p, j, 1.5),
            bias: (0..j).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            out: rand_mat(rng, j, v, 1.5),
            out_bias: (0..v).map(|_| rng.uniform(-0.5, 0.5)).collect(),
        },
    }
}

fn outputs(rng: &mut Xorshift64Star, t: usize, d: usize) -> EncoderOutputs {
    EncoderOutputs {
        h: rand_mat(rng, t, d, 2.0),
        frame_rate: 0.04,
    }
}

/// Sums the probability of every alignment path per token sequence. A frame
/// ends with blank unless the symbol cap was reached.
fn lattice(
    n: &DecoderNetworks,
    h: &EncoderOutputs,
    frame: usize,
    cap: usize,
    emitted: usize,
    tokens: Vec<usize>,
    state: RecurrentState,
    logp: f64,
    out: &mut BTreeMap<Vec<usize>, Vec<f64>>,
) {
    if frame == h.h.rows() {
        out.entry(tokens).or_default().push(logp);
        return;
    }
    if emitted == cap {
        lattice(n, h, frame + 1, cap, 0, tokens, state, logp, out);
        return;
    }
    let lp = n.joint(h.h.row(frame), &state.hidden).unwrap();
    let blank = n.vocab.blank_id;
    lattice(n, h, frame + 1, cap, 0, tokens.clone(), state.clone(), logp + lp[blank], out);
    for k in (0..lp.len()).filter(|&k| k != blank) {
        let mut t = tokens.clone();
        t.push(k);
        let s = n.predict(Some(k), &state).unwrap();
        lattice(n, h, frame, cap, emitted + 1, t, s, logp + lp[k], out);
    }
}

fn log_sum(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[test]
fn unpruned_beam_equals_lattice_enumeration() {
    let mut rng = Xorshift64Star::new(101);
    for _ in 0..5 {
        let n = nets(&mut rng, 3, 3);
        let h = outputs(&mut rng, 2, 3);
        let cap = 2;
        let mut paths = BTreeMap::new();
        let init = Hypothesis::initial(&n).unwrap();
        lattice(&n, &h, 0, cap, 0, vec![], init.pred_state.clone(), 0.0, &mut paths);

        let cfg = DecodeConfig {
            beam: 10_000,
            expansions: Some(2),
            max_symbols_per_frame: cap,
            srs: SrsParams::default(),
        };
        let mut hyps = vec![init];
        for i in 0..2 {
            hyps = beam_search_step(&n, h.h.row(i), i, &hyps, &cfg).unwrap();
        }
        let mut merged: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for hyp in &hyps {
            merged.entry(hyp.tokens.clone()).or_default().push(hyp.log_prob);
        }
        assert_eq!(merged.keys().collect::<Vec<_>>(), paths.keys().collect::<Vec<_>>());
        for (k, v) in &paths {
            assert!((log_sum(v) - log_sum(&merged[k])).abs() < 1e-12, "{k:?}");
        }
        let total = log_sum(&paths.values().flatten().cloned().collect::<Vec<_>>());
        assert!(total <= 1e-12);

        let narrow = DecodeConfig { beam: 2, ..cfg };
        let mut hyps = vec![Hypothesis::initial(&n).unwrap()];
        for i in 0..2 {
            hyps = beam_search_step(&n, h.h.row(i), i, &hyps, &narrow).unwrap();
            assert!(hyps.len() <= 2);
        }
    }
}

#[test]
fn beam_one_is_greedy() {
    let mut rng = Xorshift64Star::new(102);
    for _ in 0..20 {
        let n = nets(&mut rng, 4, 6);
        let h = outputs(&mut rng, 10, 4);
        let beam = decode_with_srs(&h, &n, &DecodeConfig { beam: 1, ..DecodeConfig::default() }).unwrap();
        assert_eq!(beam, greedy_decode(&h, &n, 5).unwrap());
    }
}

// Pruned beams are not monotone in width (a beam of B+1 can end below a
// beam of B), but no beam can beat the unpruned search: pruning only drops
// alignment paths from a prefix's sum.
#[test]
fn pruned_beams_never_beat_unpruned_search() {
    let mut rng = Xorshift64Star::new(103);
    for _ in 0..20 {
        let n = nets(&mut rng, 3, 4);
        let h = outputs(&mut rng, 3, 3);
        let cfg = |beam| DecodeConfig {
            beam,
            expansions: Some(3),
            max_symbols_per_frame: 2,
            srs: SrsParams::default(),
        };
        let full = decode_with_srs(&h, &n, &cfg(100_000)).unwrap();
        for beam in 1..=6 {
            let t = decode_with_srs(&h, &n, &cfg(beam)).unwrap();
            assert!(t.log_prob <= full.log_prob + 1e-12, "beam {beam}");
        }
    }
}

/// Frames carry the log-probabilities directly; the state counts tokens.
struct Scripted(Vocabulary);

impl TransducerScorer for Scripted {
    fn vocab(&self) -> &Vocabulary {
        &self.0
    }
    fn state_size(&self) -> usize {
        1
    }
    fn predict(&self, token: Option<usize>, state: &RecurrentState) -> Result<RecurrentState> {
        let mut s = state.clone();
        if token.is_some() {
            s.hidden[0] += 1.0;
            s.cell[0] += 1.0;
        }
        Ok(s)
    }
    fn joint(&self, h: &[f64], _g: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(h))
    }
}

#[test]
fn srs_exhaustive_through_decoder() {
    let s = Scripted(Vocabulary::synthetic(3).unwrap());
    for len in 1..=10 {
        for bits in 0u32..(1 << len) {
            let blank: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            let rows: Vec<Vec<f64>> = blank
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    let mut r = vec![0.0; 3];
                    r[if b { 0 } else { 1 + i % 2 }] = 12.0;
                    r
                })
                .collect();
            let h = EncoderOutputs {
                h: Matrix::from_rows(&rows).unwrap(),
                frame_rate: 0.04,
            };
            let base = DecodeConfig {
                beam: 1,
                max_symbols_per_frame: 1,
                ..DecodeConfig::default()
            };
            let plain = decode_with_srs(&h, &s, &base).unwrap();
            for t_sil in 1..=3 {
                let mut expected = Vec::new();
                let mut run = 0;
                for (i, &b) in blank.iter().enumerate() {
                    run = if b { run + 1 } else { 0 };
                    if run > t_sil {
                        expected.push(i);
                        run = 0;
                    }
                }
                let cfg = DecodeConfig {
                    srs: SrsParams { enabled: true, t_sil },
                    ..base
                };
                let t = decode_with_srs(&h, &s, &cfg).unwrap();
                assert_eq!(t.reset_frames, expected, "{blank:?} t_sil={t_sil}");
                assert_eq!(t.emissions, plain.emissions);
            }
        }
    }
}

#[test]
fn decoding_terminates_with_symbol_cap() {
    // joint that always prefers a non-blank token
    let s = Scripted(Vocabulary::synthetic(2).unwrap());
    let h = EncoderOutputs {
        h: Matrix::from_rows(&vec![vec![0.0, 50.0]; 30]).unwrap(),
        frame_rate: 0.04,
    };
    for cap in 1..4 {
        let cfg = DecodeConfig {
            beam: 3,
            max_symbols_per_frame: cap,
            ..DecodeConfig::default()
        };
        assert_eq!(decode_with_srs(&h, &s, &cfg).unwrap().emissions.len(), 30 * cap);
    }
}
