//! Model container, file format and seeded initialization.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8     magic "SPTXMDL1"
//! bytes 8..16    u64 manifest length M
//! bytes 16..16+M JSON manifest: config, tensor index (name, shape, byte
//!                offset into the blob), blob length, blob SHA-256 (hex)
//! rest           blob of f64 values, tensors back to back in index order
//! ```
//!
//! Tensors are listed in a fixed canonical order derived from the config,
//! so saving the same model always yields the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::MaskPolicy;
use crate::encoder::{
    encode, encode_with_diagnostics, EncoderConfig, EncoderOutputs, EncoderWeights, LayerDiagnostics, LayerNormWeights,
};
use crate::error::{Error, Result};
use crate::frontend::{normalize_global, FeatureMatrix, FrontendConfig, MelFrontend, NormalizationStats, Waveform};
use crate::numerics::Matrix;
use crate::rng::Xorshift64Star;
use crate::transducer::{DecoderNetworks, JointNetwork, PredictionNetwork, Vocabulary};

pub const MAGIC: &[u8; 8] = b"SPTXMDL1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub embed_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointConfig {
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub prediction: PredictionConfig,
    pub joint: JointConfig,
    pub vocab: Vocabulary,
}

impl Default for ModelConfig {
    /// Desk-scale model over a 32-entry synthetic vocabulary.
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::default(),
            prediction: PredictionConfig { embed_dim: 16, hidden: 32 },
            joint: JointConfig { hidden: 32 },
            vocab: Vocabulary::synthetic(32).expect("static vocabulary"),
        }
    }
}

impl ModelConfig {
    /// Full-size layout: 12-block encoder, 640-cell prediction LSTM,
    /// 640-unit joint, 256 output pieces.
    pub fn paper() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::paper(),
            prediction: PredictionConfig { embed_dim: 256, hidden: 640 },
            joint: JointConfig { hidden: 640 },
            vocab: Vocabulary::synthetic(256).expect("static vocabulary"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.vocab.validate()?;
        if self.encoder.feature_dim != self.frontend.n_mels {
            return Err(Error::Parameter(format!(
                "encoder feature_dim {} differs from frontend n_mels {}",
                self.encoder.feature_dim, self.frontend.n_mels
            )));
        }
        if self.prediction.embed_dim == 0 || self.prediction.hidden == 0 || self.joint.hidden == 0 {
            return Err(Error::Parameter("prediction and joint sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Global feature normalization applied before the encoder.
    pub norm: NormalizationStats,
    pub encoder: EncoderWeights,
    pub decoder: DecoderNetworks,
}

impl Model {
    /// All-zero weights with identity layer norms and normalization.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let e = &config.encoder;
        let v = config.vocab.len();
        Ok(Self {
            norm: NormalizationStats::identity(e.feature_dim),
            encoder: EncoderWeights::zeros(e),
            decoder: DecoderNetworks {
                vocab: config.vocab.clone(),
                prediction: PredictionNetwork::zeros(v, config.prediction.embed_dim, config.prediction.hidden),
                joint: JointNetwork::zeros(e.model_dim, config.prediction.hidden, config.joint.hidden, v),
            },
            config,
        })
    }

    pub fn features(&self, w: &Waveform) -> Result<FeatureMatrix> {
        MelFrontend::new(self.config.frontend.clone())?.compute(w)
    }

    /// Normalizes `f` with the model's statistics and runs the encoder.
    pub fn encode(&self, f: &FeatureMatrix, policy: &MaskPolicy) -> Result<EncoderOutputs> {
        let normed = normalize_global(f, &self.norm)?;
        encode(&normed, &self.config.encoder, &self.encoder, policy)
    }

    /// Like [`Model::encode`], keeping every layer's scores and masks.
    pub fn encode_with_diagnostics(
        &self,
        f: &FeatureMatrix,
        policy: &MaskPolicy,
    ) -> Result<(EncoderOutputs, Vec<LayerDiagnostics>)> {
        let normed = normalize_global(f, &self.norm)?;
        let policies = vec![*policy; self.config.encoder.num_layers];
        encode_with_diagnostics(&normed, &self.config.encoder, &self.encoder, &policies)
    }

    pub fn num_parameters(&self) -> usize {
        let mut copy = self.clone();
        tensor_slots(&mut copy).iter().map(|s| s.data.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

struct Slot<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a mut [f64],
    init: Init,
}

struct Slots<'a>(Vec<Slot<'a>>);

impl<'a> Slots<'a> {
    /// Row-vector matrices map `rows` inputs, so fan-in is the row count.
    fn matrix(&mut self, name: String, m: &'a mut Matrix) {
        let shape = m.shape().to_vec();
        let fan_in = shape[0];
        self.0.push(Slot {
            name,
            shape,
            data: m.data_mut(),
            init: Init::Uniform { fan_in },
        });
    }

    /// Kernels stored one output channel per row take their fan-in from
    /// the row length.
    fn kernel(&mut self, name: String, m: &'a mut Matrix) {
        let shape = m.shape().to_vec();
        let fan_in = shape[1];
        self.0.push(Slot {
            name,
            shape,
            data: m.data_mut(),
            init: Init::Uniform { fan_in },
        });
    }

    fn vector(&mut self, name: String, v: &'a mut Vec<f64>, init: Init) {
        self.0.push(Slot {
            name,
            shape: vec![v.len()],
            data: v.as_mut_slice(),
            init,
        });
    }

    fn norm(&mut self, name: &str, n: &'a mut LayerNormWeights) {
        self.vector(format!("{name}.gain"), &mut n.gain, Init::Ones);
        self.vector(format!("{name}.bias"), &mut n.bias, Init::Zeros);
    }
}

fn tensor_slots(m: &mut Model) -> Vec<Slot<'_>> {
    let mut s = Slots(Vec::new());
    s.vector("norm.mean".into(), &mut m.norm.mean, Init::Zeros);
    s.vector("norm.std".into(), &mut m.norm.std, Init::Ones);

    let sub = &mut m.encoder.subsample;
    let (k2, ck2, proj_in) = (sub.conv1.cols(), sub.conv2.cols(), sub.proj.rows());
    s.kernel("encoder.subsample.conv1".into(), &mut sub.conv1);
    s.vector("encoder.subsample.conv1_bias".into(), &mut sub.conv1_bias, Init::Uniform { fan_in: k2 });
    s.kernel("encoder.subsample.conv2".into(), &mut sub.conv2);
    s.vector("encoder.subsample.conv2_bias".into(), &mut sub.conv2_bias, Init::Uniform { fan_in: ck2 });
    s.matrix("encoder.subsample.proj".into(), &mut sub.proj);
    s.vector("encoder.subsample.proj_bias".into(), &mut sub.proj_bias, Init::Uniform { fan_in: proj_in });

    for (l, b) in m.encoder.blocks.iter_mut().enumerate() {
        let p = format!("encoder.blocks.{l}");
        for (tag, ff) in [("ff1", &mut b.ff1), ("ff2", &mut b.ff2)] {
            let (d, h) = (ff.w1.rows(), ff.w2.rows());
            s.norm(&format!("{p}.{tag}.norm"), &mut ff.norm);
            s.matrix(format!("{p}.{tag}.w1"), &mut ff.w1);
            s.vector(format!("{p}.{tag}.b1"), &mut ff.b1, Init::Uniform { fan_in: d });
            s.matrix(format!("{p}.{tag}.w2"), &mut ff.w2);
            s.vector(format!("{p}.{tag}.b2"), &mut ff.b2, Init::Uniform { fan_in: h });
        }
        s.norm(&format!("{p}.attn_norm"), &mut b.attn_norm);
        for (h, head) in b.attn.heads.iter_mut().enumerate() {
            s.matrix(format!("{p}.attn.heads.{h}.w_q"), &mut head.w_q);
            s.matrix(format!("{p}.attn.heads.{h}.w_k"), &mut head.w_k);
            s.matrix(format!("{p}.attn.heads.{h}.w_v"), &mut head.w_v);
        }
        s.matrix(format!("{p}.attn.w_p"), &mut b.attn.w_p);
        let c = &mut b.conv;
        let (d, k) = (c.pointwise_in.rows(), c.depthwise.rows());
        s.norm(&format!("{p}.conv.norm"), &mut c.norm);
        s.matrix(format!("{p}.conv.pointwise_in"), &mut c.pointwise_in);
        s.vector(format!("{p}.conv.pointwise_in_bias"), &mut c.pointwise_in_bias, Init::Uniform { fan_in: d });
        s.matrix(format!("{p}.conv.depthwise"), &mut c.depthwise);
        s.vector(format!("{p}.conv.depthwise_bias"), &mut c.depthwise_bias, Init::Uniform { fan_in: k });
        s.matrix(format!("{p}.conv.pointwise_out"), &mut c.pointwise_out);
        s.vector(format!("{p}.conv.pointwise_out_bias"), &mut c.pointwise_out_bias, Init::Uniform { fan_in: d });
        s.norm(&format!("{p}.final_norm"), &mut b.final_norm);
    }

    let pred = &mut m.decoder.prediction;
    let hidden = pred.lstm.hidden_size();
    s.kernel("decoder.prediction.embedding".into(), &mut pred.embedding);
    s.matrix("decoder.prediction.lstm.input".into(), &mut pred.lstm.input);
    s.matrix("decoder.prediction.lstm.recurrent".into(), &mut pred.lstm.recurrent);
    s.vector("decoder.prediction.lstm.bias".into(), &mut pred.lstm.bias, Init::Uniform { fan_in: hidden });

    let j = &mut m.decoder.joint;
    let (enc_in, jh) = (j.enc_proj.rows(), j.out.rows());
    s.matrix("decoder.joint.enc_proj".into(), &mut j.enc_proj);
    s.matrix("decoder.joint.pred_proj".into(), &mut j.pred_proj);
    s.vector("decoder.joint.bias".into(), &mut j.bias, Init::Uniform { fan_in: enc_in });
    s.matrix("decoder.joint.out".into(), &mut j.out);
    s.vector("decoder.joint.out_bias".into(), &mut j.out_bias, Init::Uniform { fan_in: jh });
    s.0
}

/// Canonical tensor names and shapes for a config.
pub fn tensor_index(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut m = Model::zeros(config.clone())?;
    Ok(tensor_slots(&mut m).into_iter().map(|s| (s.name, s.shape)).collect())
}

/// Weights drawn from [`Xorshift64Star`] in canonical tensor order:
/// uniform in `[-s, s)` with `s = 1/sqrt(fan_in)`; layer-norm gains and
/// normalization std are 1, layer-norm biases and normalization mean 0.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut m = Model::zeros(config.clone())?;
    let mut rng = Xorshift64Star::new(seed);
    for slot in tensor_slots(&mut m) {
        match slot.init {
            Init::Uniform { fan_in } => {
                let s = 1.0 / (fan_in.max(1) as f64).sqrt();
                slot.data.iter_mut().for_each(|v| *v = rng.uniform(-s, s));
            }
            Init::Ones => slot.data.fill(1.0),
            Init::Zeros => slot.data.fill(0.0),
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
    blob_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn model_to_bytes(m: &Model) -> Result<Vec<u8>> {
    m.config.validate()?;
    let mut copy = m.clone();
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for slot in tensor_slots(&mut copy) {
        tensors.push(TensorEntry {
            name: slot.name,
            shape: slot.shape,
            offset: blob.len() as u64,
        });
        for v in slot.data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: m.config.clone(),
        tensors,
        blob_bytes: blob.len() as u64,
        blob_sha256: hex(&Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn split_file(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("manifest length {len} exceeds file size")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", manifest.format_version)));
    }
    Ok((manifest, &bytes[end..]))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let (manifest, blob) = split_file(bytes)?;
    let mut m = Model::zeros(manifest.config.clone())?;
    let slots = tensor_slots(&mut m);
    if slots.len() != manifest.tensors.len() {
        let expected: std::collections::HashSet<&str> = slots.iter().map(|s| s.name.as_str()).collect();
        let culprit = manifest
            .tensors
            .iter()
            .map(|t| t.name.clone())
            .find(|n| !expected.contains(n.as_str()))
            .or_else(|| {
                let present: std::collections::HashSet<&str> =
                    manifest.tensors.iter().map(|t| t.name.as_str()).collect();
                slots.iter().map(|s| s.name.clone()).find(|n| !present.contains(n.as_str()))
            })
            .unwrap_or_default();
        return Err(Error::Corrupt {
            tensor: culprit,
            reason: format!("file lists {} tensors, config implies {}", manifest.tensors.len(), slots.len()),
        });
    }
    for (slot, entry) in slots.into_iter().zip(&manifest.tensors) {
        if slot.name != entry.name {
            return Err(Error::Corrupt {
                tensor: entry.name.clone(),
                reason: format!("expected tensor {} at this position", slot.name),
            });
        }
        if slot.shape != entry.shape {
            return Err(Error::Corrupt {
                tensor: entry.name.clone(),
                reason: format!("shape {:?} in file, config implies {:?}", entry.shape, slot.shape),
            });
        }
        let start = entry.offset as usize;
        let end = start + slot.data.len() * 8;
        if end > blob.len() {
            return Err(Error::Corrupt {
                tensor: entry.name.clone(),
                reason: format!("data runs to byte {end} but blob has {} bytes", blob.len()),
            });
        }
        for (v, chunk) in slot.data.iter_mut().zip(blob[start..end].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Corrupt {
            tensor: "<blob>".into(),
            reason: format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes),
        });
    }
    let digest = hex(&Sha256::digest(blob));
    if digest != manifest.blob_sha256 {
        return Err(Error::Corrupt {
            tensor: "<blob>".into(),
            reason: "checksum mismatch".into(),
        });
    }
    Ok(m)
}

pub fn save_model(m: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model_to_bytes(m)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&std::fs::read(path)?)
}

/// The manifest of a model file as JSON.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path)?;
    let (manifest, _) = split_file(&bytes)?;
    Ok(serde_json::to_value(manifest)?)
}
