use sparse_rnnt::attention::{Fusion, MaskPolicy};
use sparse_rnnt::frontend::Waveform;
use sparse_rnnt::model_io::{random_model, ModelConfig};
use sparse_rnnt::pipeline::{transcribe_features, transcribe_waveform, Segmentation, TranscribeOptions};
use sparse_rnnt::rng::Xorshift64Star;
use sparse_rnnt::transducer::{DecodeConfig, SrsParams};

/// Tone bursts over low noise with a one-second pause in the middle.
fn signal(seconds: f64, seed: u64) -> Waveform {
    let sr = 16000;
    let mut rng = Xorshift64Star::new(seed);
    let n = (seconds * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let pause = (t - seconds / 2.0).abs() < 0.5;
            let f = 300.0 + 150.0 * (t * 1.3).floor();
            let tone = if pause { 0.0 } else { 0.3 * (2.0 * std::f64::consts::PI * f * t).sin() };
            tone + rng.uniform(-0.002, 0.002)
        })
        .collect();
    Waveform::new(samples, sr).unwrap()
}

fn opts(policy: MaskPolicy, segmentation: Segmentation) -> TranscribeOptions {
    TranscribeOptions {
        policy,
        decode: DecodeConfig {
            beam: 3,
            srs: SrsParams { enabled: true, t_sil: 15 },
            ..DecodeConfig::default()
        },
        segmentation,
    }
}

#[test]
fn decoding_is_deterministic() {
    let model = random_model(&ModelConfig::default(), 7).unwrap();
    let w = signal(8.0, 1);
    let o = opts(MaskPolicy::default(), Segmentation::None);
    let a = transcribe_waveform(&model, &w, &o).unwrap();
    let b = transcribe_waveform(&model, &w, &o).unwrap();
    assert_eq!(a, b);
    assert!(!a.emissions.is_empty());
}

#[test]
fn wide_local_window_matches_dense() {
    let model = random_model(&ModelConfig::default(), 8).unwrap();
    let w = signal(8.0, 2);
    let dense = transcribe_waveform(&model, &w, &opts(MaskPolicy::Dense, Segmentation::None)).unwrap();
    let local = transcribe_waveform(&model, &w, &opts(MaskPolicy::LocalOnly { w: 500 }, Segmentation::None)).unwrap();
    assert_eq!(dense, local);
    let f = model.features(&w).unwrap();
    let a = model.encode(&f, &MaskPolicy::Dense).unwrap();
    let b = model.encode(&f, &MaskPolicy::LocalOnly { w: a.len() - 1 }).unwrap();
    assert!(a.h.max_abs_diff(&b.h) < 1e-9);
}

#[test]
fn short_input_with_doi_is_one_window() {
    let model = random_model(&ModelConfig::default(), 9).unwrap();
    let w = signal(8.0, 3);
    let policy = MaskPolicy::LocalPlusGlobal { w: 40, fusion: Fusion::And };
    let none = transcribe_waveform(&model, &w, &opts(policy, Segmentation::None)).unwrap();
    let doi = transcribe_waveform(&model, &w, &opts(policy, Segmentation::parse("doi:20").unwrap())).unwrap();
    assert_eq!(none, doi);
}

#[test]
fn long_input_segmented_stays_ordered() {
    let model = random_model(&ModelConfig::default(), 10).unwrap();
    let w = signal(30.0, 4);
    for seg in ["doi:8", "doi:20", "epd"] {
        let t = transcribe_waveform(&model, &w, &opts(MaskPolicy::default(), Segmentation::parse(seg).unwrap())).unwrap();
        assert!(t.emissions.windows(2).all(|p| p[0].time <= p[1].time), "{seg}");
        assert!(t.emissions.iter().all(|e| e.time >= 0.0 && e.time <= 30.0), "{seg}");
    }
}

#[test]
fn features_and_waveform_paths_agree() {
    let model = random_model(&ModelConfig::default(), 11).unwrap();
    let w = signal(6.0, 5);
    let o = opts(MaskPolicy::default(), Segmentation::None);
    let f = model.features(&w).unwrap();
    assert_eq!(
        transcribe_features(&model, &f, &o).unwrap(),
        transcribe_waveform(&model, &w, &o).unwrap()
    );
    let epd = opts(MaskPolicy::default(), Segmentation::parse("epd").unwrap());
    assert!(transcribe_features(&model, &f, &epd).is_err());
}

#[test]
fn silence_decodes_to_nothing_under_epd() {
    let model = random_model(&ModelConfig::default(), 12).unwrap();
    let w = Waveform::new(vec![0.0; 32000], 16000).unwrap();
    let t = transcribe_waveform(&model, &w, &opts(MaskPolicy::default(), Segmentation::parse("epd").unwrap())).unwrap();
    assert!(t.emissions.is_empty());
}

#[test]
fn segmentation_labels_parse() {
    assert_eq!(Segmentation::parse("none").unwrap(), Segmentation::None);
    assert_eq!(Segmentation::parse("doi:48").unwrap().doi_length(), Some(48.0));
    assert!(Segmentation::parse("doi:x").is_err());
    assert!(Segmentation::parse("vad").is_err());
}
