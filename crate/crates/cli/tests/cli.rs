use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparse_rnnt::frontend::{write_feature_file, write_wav, Waveform};
use sparse_rnnt::model_io::{load_model, random_model, read_manifest, save_model, ModelConfig};
use sparse_rnnt::rng::Xorshift64Star;
use sparse_rnnt_cli::config::{ResolvedRun, RunConfig, RunFlags};
use sparse_rnnt_cli::error::exit;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparse-rnnt"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tone(seconds: f64, seed: u64) -> Waveform {
    let sr = 16000;
    let mut rng = Xorshift64Star::new(seed);
    let samples = (0..(seconds * sr as f64) as usize)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let f = 250.0 + 120.0 * (t * 2.0).floor();
            0.3 * (2.0 * std::f64::consts::PI * f * t).sin() + rng.uniform(-0.01, 0.01)
        })
        .collect();
    Waveform::new(samples, sr).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        ok(dir.path(), &["gen-model", "--out", "m.bin", "--seed", "5"]);
        write_wav(dir.path().join("a.wav"), &tone(3.0, 1)).unwrap();
        write_wav(dir.path().join("b.wav"), &tone(8.0, 2)).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) {
        std::fs::write(self.file(name), text).unwrap();
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.file(name)).unwrap()
    }
}

#[test]
fn gen_model_is_seeded_and_echoes_config() {
    let fx = Fixture::new();
    ok(fx.path(), &["gen-model", "--out", "again.bin", "--seed", "5"]);
    ok(fx.path(), &["gen-model", "--out", "other.bin", "--seed", "6"]);
    assert_eq!(fx.read("m.bin"), fx.read("again.bin"));
    assert_ne!(fx.read("m.bin"), fx.read("other.bin"));
    let manifest = read_manifest(fx.file("m.bin")).unwrap();
    let echoed: ModelConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(echoed, ModelConfig::default());
}

#[test]
fn gen_model_rejects_invalid_config() {
    let fx = Fixture::new();
    let mut cfg = serde_json::to_value(ModelConfig::default()).unwrap();
    cfg["encoder"]["feature_dim"] = 40.into();
    fx.write("bad.json", &cfg.to_string());
    let out = run(fx.path(), &["gen-model", "--out", "x.bin", "--config", "bad.json"]);
    assert_eq!(code(&out), exit::CONFIG);
    assert!(!fx.file("x.bin").exists());
}

#[test]
fn decode_is_deterministic_across_runs_and_jobs() {
    let fx = Fixture::new();
    let args = ["decode", "--model", "m.bin", "--srs", "--doi", "6", "a.wav", "b.wav"];
    let mut first: Vec<&str> = args.to_vec();
    first.extend(["--out", "t1.tsv", "--detail", "d1.jsonl"]);
    let mut second: Vec<&str> = args.to_vec();
    second.extend(["--out", "t2.tsv", "--detail", "d2.jsonl", "--jobs", "3"]);
    ok(fx.path(), &first);
    ok(fx.path(), &second);
    assert_eq!(fx.read("t1.tsv"), fx.read("t2.tsv"));
    assert_eq!(fx.read("d1.jsonl"), fx.read("d2.jsonl"));
    let tsv = String::from_utf8(fx.read("t1.tsv")).unwrap();
    let ids: Vec<&str> = tsv.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(ids, ["a", "b"]);
}

#[test]
fn decode_policy_and_segmentation_identities() {
    let fx = Fixture::new();
    let dense = ok(fx.path(), &["decode", "--model", "m.bin", "--mask", "dense", "b.wav"]);
    let local = ok(fx.path(), &["decode", "--model", "m.bin", "--mask", "local", "--w", "1000", "b.wav"]);
    assert_eq!(dense, local);
    let none = ok(fx.path(), &["decode", "--model", "m.bin", "--seg", "none", "b.wav"]);
    let doi = ok(fx.path(), &["decode", "--model", "m.bin", "--doi", "20", "b.wav"]);
    assert_eq!(none, doi);
}

#[test]
fn decode_reads_feature_files() {
    let fx = Fixture::new();
    let model = load_model(fx.file("m.bin")).unwrap();
    let f = model.features(&tone(3.0, 1)).unwrap();
    write_feature_file(fx.file("a.feats"), &f).unwrap();
    let from_wav = ok(fx.path(), &["decode", "--model", "m.bin", "a.wav"]);
    let from_feats = ok(fx.path(), &["decode", "--model", "m.bin", "a.feats"]);
    assert_eq!(from_wav, from_feats);
}

#[test]
fn decode_keeps_going_past_failures() {
    let fx = Fixture::new();
    fx.write("broken.wav", "not a wav");
    let out = run(fx.path(), &["decode", "--model", "m.bin", "a.wav", "broken.wav", "--out", "t.tsv"]);
    assert_eq!(code(&out), exit::DATA);
    let tsv = String::from_utf8(fx.read("t.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken"));

    let out = run(fx.path(), &["decode", "--model", "m.bin", "missing.wav"]);
    assert_eq!(code(&out), exit::IO);
    let out = run(fx.path(), &["decode", "--model", "nope.bin", "a.wav"]);
    assert_eq!(code(&out), exit::IO);
}

#[test]
fn bad_flags_are_config_errors() {
    let fx = Fixture::new();
    for args in [
        vec!["decode", "--model", "m.bin", "--mask", "sgm3", "a.wav"],
        vec!["decode", "--model", "m.bin", "--seg", "vad", "a.wav"],
        vec!["decode", "--model", "m.bin", "--seg", "doi:20", "--doi", "8", "a.wav"],
        vec!["decode", "--model", "m.bin", "--doi", "3", "a.wav"],
        vec!["decode", "--model", "m.bin", "--beam", "0", "a.wav"],
        vec!["decode", "--model", "m.bin", "--srs", "--no-srs", "a.wav"],
        vec!["decode", "a.wav"],
        vec!["frobnicate"],
    ] {
        assert_eq!(code(&run(fx.path(), &args)), exit::CONFIG, "{args:?}");
    }
}

#[test]
fn flags_override_config_file() {
    let fx = Fixture::new();
    fx.write("run.json", r#"{"model": "m.bin", "mask": "dense", "beam": 2, "srs": true, "segmentation": "doi:30"}"#);
    let flags = RunFlags {
        config: Some(fx.file("run.json")),
        mask: Some("local".into()),
        w: Some(12),
        no_srs: true,
        ..RunFlags::default()
    };
    let run = ResolvedRun::from_config(&flags.merged().unwrap()).unwrap();
    assert_eq!(run.options.policy.label(), "local");
    assert_eq!(run.options.policy.window(), Some(12));
    assert_eq!(run.options.decode.beam, 2);
    assert!(!run.options.decode.srs.enabled);
    assert_eq!(run.options.segmentation.doi_length(), Some(30.0));

    fx.write("typo.json", r#"{"beem": 2}"#);
    let flags = RunFlags {
        config: Some(fx.file("typo.json")),
        ..RunFlags::default()
    };
    assert!(flags.merged().is_err());

    let out = run_cfg(&fx);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn run_cfg(fx: &Fixture) -> Output {
    run(fx.path(), &["decode", "--config", "run.json", "a.wav"])
}

#[test]
fn shipped_run_config_matches_builtin_defaults() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let run = RunConfig::load(&shipped.join("run.json")).unwrap();
    assert_eq!(run, RunConfig::defaults());
    let text = std::fs::read_to_string(shipped.join("model.json")).unwrap();
    let model: ModelConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(model, ModelConfig::default());
}

#[test]
fn heatmap_rows_and_ranges() {
    let fx = Fixture::new();
    let args = ["heatmap", "--model", "m.bin", "--input", "a.wav", "--layer", "2", "--head", "1"];
    let a = ok(fx.path(), &args);
    let b = ok(fx.path(), &args);
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    for row in text.lines() {
        let sum: f64 = row.split(',').map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let out = run(fx.path(), &["heatmap", "--model", "m.bin", "--input", "a.wav", "--layer", "4", "--head", "0"]);
    assert_eq!(code(&out), exit::CONFIG);
    let out = run(fx.path(), &["heatmap", "--model", "m.bin", "--input", "a.wav", "--layer", "0", "--head", "4"]);
    assert_eq!(code(&out), exit::CONFIG);
}

#[test]
fn heatmap_of_single_frame_is_one() {
    let fx = Fixture::new();
    let model = load_model(fx.file("m.bin")).unwrap();
    // 7 feature frames subsample to one encoder frame
    let w = tone(0.1, 3).slice_seconds(0.0, (400.0 + 6.0 * 160.0) / 16000.0);
    let f = model.features(&w).unwrap();
    assert_eq!(f.num_frames(), 7);
    write_feature_file(fx.file("one.feats"), &f).unwrap();
    let out = ok(fx.path(), &["heatmap", "--model", "m.bin", "--input", "one.feats", "--layer", "0", "--head", "0"]);
    assert_eq!(String::from_utf8(out).unwrap(), "1\n");
}

#[test]
fn heatmap_of_constant_scores_is_uniform() {
    let fx = Fixture::new();
    let mut model = random_model(&ModelConfig::default(), 9).unwrap();
    for block in &mut model.encoder.blocks {
        for head in &mut block.attn.heads {
            head.w_q.data_mut().fill(0.0);
        }
    }
    save_model(&model, fx.file("flat.bin")).unwrap();
    let out = ok(fx.path(), &["heatmap", "--model", "flat.bin", "--input", "a.wav", "--layer", "3", "--head", "2"]);
    let text = String::from_utf8(out).unwrap();
    let t = text.lines().count();
    for row in text.lines() {
        for c in row.split(',') {
            assert!((c.parse::<f64>().unwrap() - 1.0 / t as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn eval_scores_by_id() {
    let fx = Fixture::new();
    fx.write("ref.tsv", "u1\tabcd\nu2\thello\n");
    fx.write("same.tsv", "u2\thello\nu1\tabcd\n");
    fx.write("del.tsv", "u1\tabd\nu2\thello\n");
    fx.write("short.tsv", "u1\tabcd\n");

    ok(fx.path(), &["eval", "--refs", "ref.tsv", "--hyps", "same.tsv", "--summary", "s.json"]);
    let s: serde_json::Value = serde_json::from_slice(&fx.read("s.json")).unwrap();
    assert_eq!(s["cer"], 0.0);
    assert_eq!(s["utterances"], 2);

    let lines = ok(fx.path(), &["eval", "--refs", "ref.tsv", "--hyps", "del.tsv"]);
    let first: serde_json::Value = serde_json::from_str(String::from_utf8(lines).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "u1");
    assert_eq!((first["deletions"].as_u64(), first["insertions"].as_u64(), first["substitutions"].as_u64()), (Some(1), Some(0), Some(0)));

    let out = run(fx.path(), &["eval", "--refs", "ref.tsv", "--hyps", "short.tsv"]);
    assert_eq!(code(&out), exit::DATA);
    assert!(String::from_utf8_lossy(&out.stderr).contains("u2"));
}

#[test]
fn sweep_grid_shapes_and_reruns() {
    let fx = Fixture::new();
    fx.write("ref.tsv", "a\thello\nb\tworld\n");
    let base = ["sweep", "--model", "m.bin", "--refs", "ref.tsv", "a.wav", "b.wav"];

    let mut single = base.to_vec();
    single.extend(["--policies", "local+sgm3", "--segs", "doi:20"]);
    let csv = String::from_utf8(ok(fx.path(), &single)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "policy,segmentation,doi_length,cer,del,ins,sub");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("local+sgm3,doi,20,"));

    let mut grid = base.to_vec();
    grid.extend(["--policies", "dense,local", "--segs", "none,doi:8", "--jobs", "2"]);
    let a = ok(fx.path(), &grid);
    let b = ok(fx.path(), &grid);
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);

    fx.write("grid.json", r#"{"policies": ["local+sgm1"], "segmentations": ["none", "epd"]}"#);
    let mut from_file = base.to_vec();
    from_file.extend(["--grid", "grid.json"]);
    assert_eq!(String::from_utf8(ok(fx.path(), &from_file)).unwrap().lines().count(), 3);
}

#[test]
fn sweep_reports_failed_cells() {
    let fx = Fixture::new();
    fx.write("ref.tsv", "a\thello\n");
    let model = load_model(fx.file("m.bin")).unwrap();
    write_feature_file(fx.file("a.feats"), &model.features(&tone(3.0, 1)).unwrap()).unwrap();
    // EPD needs samples, so only the epd cell fails for feature input
    let out = run(
        fx.path(),
        &["sweep", "--model", "m.bin", "--refs", "ref.tsv", "--segs", "none,epd", "a.feats", "--out", "r.csv"],
    );
    assert_eq!(code(&out), exit::CONFIG);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cell local+sgm3/epd"));
    let csv = String::from_utf8(fx.read("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("local+sgm3,none,"));
}

#[test]
fn stats_and_segment_outputs() {
    let fx = Fixture::new();
    let text = String::from_utf8(ok(fx.path(), &["stats", "--model", "m.bin", "--input", "b.wav", "--mask", "local+sgm2", "--w", "5"])).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 4);
    let json = ok(fx.path(), &["stats", "--model", "m.bin", "--input", "b.wav", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 16);

    let csv = String::from_utf8(ok(fx.path(), &["segment", "--input", "b.wav", "--seg", "doi:5", "--overlap", "1"])).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "index,start,end,core_start,core_end");
    assert_eq!(rows[1], "0,0.000,5.000,0.000,4.000");
    assert_eq!(rows.last().unwrap().split(',').nth(4), Some("8.000"));
}

#[test]
fn features_command_round_trips_through_decode() {
    let fx = Fixture::new();
    ok(fx.path(), &["features", "--input", "a.wav", "--model", "m.bin", "--out", "a.feats"]);
    assert_eq!(
        ok(fx.path(), &["decode", "--model", "m.bin", "a.feats"]),
        ok(fx.path(), &["decode", "--model", "m.bin", "a.wav"])
    );
}
