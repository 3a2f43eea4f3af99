//! Multi-head self-attention with inference-time sparsity.
//!
//! For every query `i` a head attends to `S_i = L_i ∪ G_i`, where `L_i` is
//! the window `i-w ..= i+w` and `G_i` holds the keys whose raw score
//! `e_ij = <W_q z_i, W_k z_j> / sqrt(d)` is strictly greater than the row
//! mean `μ_i = (1/T) Σ_j e_ij`. Across heads the global sets are either kept
//! per head, intersected, or united before the union with the shared local
//! window. The same weights run dense or masked; the policy is a pure
//! inference-time switch.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, softmax, softmax_over, Matrix};

/// Local half-window in encoder frames.
pub const DEFAULT_LOCAL_WINDOW: usize = 40;

/// Query/key/value projections of one head, each `model_dim × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionHeadWeights {
    pub fn zeros(model_dim: usize, d: usize) -> Self {
        Self {
            w_q: Matrix::zeros(model_dim, d),
            w_k: Matrix::zeros(model_dim, d),
            w_v: Matrix::zeros(model_dim, d),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn inner_dim(&self) -> usize {
        self.w_q.cols()
    }

    fn validate(&self) -> Result<()> {
        let shape = self.w_q.shape();
        if shape[1] == 0 {
            return Err(Error::Parameter("attention inner dimension must be >= 1".into()));
        }
        for m in [&self.w_k, &self.w_v] {
            if m.shape() != shape {
                return Err(Error::shape("attention head projections", &shape, &m.shape()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadWeights {
    pub heads: Vec<AttentionHeadWeights>,
    /// Post-attention projection, `H·d × model_dim`.
    pub w_p: Matrix,
}

impl MultiHeadWeights {
    pub fn zeros(model_dim: usize, heads: usize, d: usize) -> Self {
        Self {
            heads: (0..heads).map(|_| AttentionHeadWeights::zeros(model_dim, d)).collect(),
            w_p: Matrix::zeros(heads * d, model_dim),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn validate(&self, model_dim: usize) -> Result<()> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::Contract("multi-head attention needs at least one head".into()))?;
        for h in &self.heads {
            h.validate()?;
            if h.w_q.shape() != first.w_q.shape() {
                return Err(Error::shape("attention heads", &first.w_q.shape(), &h.w_q.shape()));
            }
        }
        if first.model_dim() != model_dim {
            return Err(Error::shape("attention input", &[model_dim], &first.w_q.shape()));
        }
        let concat = self.heads.len() * first.inner_dim();
        if self.w_p.shape() != [concat, model_dim] {
            return Err(Error::shape("attention output projection", &[concat, model_dim], &self.w_p.shape()));
        }
        Ok(())
    }
}

/// Raw pre-softmax scores of one head and their row means.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub e: Matrix,
    pub row_means: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_scores(e: Matrix) -> Result<Self> {
        if e.rows() != e.cols() || e.rows() == 0 {
            return Err(Error::shape("score matrix", &e.shape(), &[e.rows(), e.rows()]));
        }
        let t = e.cols() as f64;
        let row_means = e.iter_rows().map(|r| r.iter().fold(0.0, |a, v| a + v) / t).collect();
        Ok(Self { e, row_means })
    }

    pub fn len(&self) -> usize {
        self.e.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.e.rows() == 0
    }
}

/// Per-query attended key indices, each row sorted ascending without repeats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    t: usize,
    rows: Vec<Vec<usize>>,
}

impl AttentionMask {
    pub fn from_rows(t: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if rows.len() != t {
            return Err(Error::shape("attention mask", &[t], &[rows.len()]));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.windows(2).any(|p| p[0] >= p[1]) || r.last().is_some_and(|&j| j >= t) {
                return Err(Error::Contract(format!(
                    "mask row {i} must be sorted, unique and < {t}"
                )));
            }
        }
        Ok(Self { t, rows })
    }

    pub fn full(t: usize) -> Self {
        Self {
            t,
            rows: (0..t).map(|_| (0..t).collect()).collect(),
        }
    }

    pub fn empty(t: usize) -> Self {
        Self {
            t,
            rows: vec![Vec::new(); t],
        }
    }

    /// Sequence length (number of queries and keys).
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    /// Fraction of all `T·T` query/key pairs that are attended.
    pub fn density(&self) -> f64 {
        if self.t == 0 {
            return 0.0;
        }
        let n: usize = self.rows.iter().map(Vec::len).sum();
        n as f64 / (self.t * self.t) as f64
    }

    pub fn union(&self, other: &AttentionMask) -> Result<AttentionMask> {
        self.zip_rows(other, merge_union)
    }

    pub fn intersection(&self, other: &AttentionMask) -> Result<AttentionMask> {
        self.zip_rows(other, merge_intersection)
    }

    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.t == other.t
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.iter().all(|j| b.binary_search(j).is_ok()))
    }

    fn zip_rows(&self, other: &AttentionMask, f: fn(&[usize], &[usize]) -> Vec<usize>) -> Result<AttentionMask> {
        if self.t != other.t {
            return Err(Error::shape("mask combination", &[self.t], &[other.t]));
        }
        Ok(AttentionMask {
            t: self.t,
            rows: self.rows.iter().zip(&other.rows).map(|(a, b)| f(a, b)).collect(),
        })
    }
}

fn merge_union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn merge_intersection(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// How per-head global masks are combined across heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fusion {
    /// Union over heads (SGM1, least sparse).
    #[serde(rename = "sgm1")]
    Or,
    /// Each head keeps its own global mask (SGM2).
    #[serde(rename = "sgm2")]
    PerHead,
    /// Intersection over heads (SGM3, most sparse).
    #[serde(rename = "sgm3")]
    And,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::Or, Fusion::PerHead, Fusion::And];

    pub fn label(self) -> &'static str {
        match self {
            Fusion::Or => "sgm1",
            Fusion::PerHead => "sgm2",
            Fusion::And => "sgm3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Every query sees every key.
    Dense,
    /// `S_i = L_i`.
    LocalOnly { w: usize },
    /// `S_i = L_i ∪ fused G_i`.
    LocalPlusGlobal { w: usize, fusion: Fusion },
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::LocalPlusGlobal {
            w: DEFAULT_LOCAL_WINDOW,
            fusion: Fusion::And,
        }
    }
}

impl MaskPolicy {
    /// Parses `dense`, `local`, or `local+sgm{1,2,3}` with the given window.
    pub fn parse(label: &str, w: usize) -> Result<Self> {
        let kind: MaskKind = label.parse()?;
        Ok(kind.with_window(w))
    }

    pub fn label(&self) -> String {
        MaskKind::from(*self).to_string()
    }

    pub fn window(&self) -> Option<usize> {
        match *self {
            MaskPolicy::Dense => None,
            MaskPolicy::LocalOnly { w } | MaskPolicy::LocalPlusGlobal { w, .. } => Some(w),
        }
    }
}

/// A mask policy without its window size, as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskKind {
    Dense,
    Local,
    LocalGlobal(Fusion),
}

impl MaskKind {
    pub fn with_window(self, w: usize) -> MaskPolicy {
        match self {
            MaskKind::Dense => MaskPolicy::Dense,
            MaskKind::Local => MaskPolicy::LocalOnly { w },
            MaskKind::LocalGlobal(fusion) => MaskPolicy::LocalPlusGlobal { w, fusion },
        }
    }
}

impl From<MaskPolicy> for MaskKind {
    fn from(p: MaskPolicy) -> Self {
        match p {
            MaskPolicy::Dense => MaskKind::Dense,
            MaskPolicy::LocalOnly { .. } => MaskKind::Local,
            MaskPolicy::LocalPlusGlobal { fusion, .. } => MaskKind::LocalGlobal(fusion),
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::Dense => f.write_str("dense"),
            MaskKind::Local => f.write_str("local"),
            MaskKind::LocalGlobal(fu) => write!(f, "local+{}", fu.label()),
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" | "none" => Ok(MaskKind::Dense),
            "local" | "lm" => Ok(MaskKind::Local),
            "local+sgm1" => Ok(MaskKind::LocalGlobal(Fusion::Or)),
            "local+sgm2" => Ok(MaskKind::LocalGlobal(Fusion::PerHead)),
            "local+sgm3" | "local+sgm" => Ok(MaskKind::LocalGlobal(Fusion::And)),
            other => Err(Error::Parameter(format!(
                "unknown mask policy `{other}` (expected dense, local, local+sgm1, local+sgm2, local+sgm3)"
            ))),
        }
    }
}

/// `e_ij = <W_q z_i, W_k z_j> / sqrt(d)` together with row means.
pub fn compute_scores(z: &Matrix, head: &AttentionHeadWeights) -> Result<ScoreMatrix> {
    head.validate()?;
    if z.rows() == 0 {
        return Err(Error::EmptyInput("attention over zero frames".into()));
    }
    let q = matmul(z, &head.w_q)?;
    let k = matmul(z, &head.w_k)?;
    Ok(scores_from_projections(&q, &k))
}

fn scores_from_projections(q: &Matrix, k: &Matrix) -> ScoreMatrix {
    let t = q.rows();
    let scale = (q.cols() as f64).sqrt();
    let mut e = Matrix::zeros(t, t);
    for i in 0..t {
        let qi = q.row(i);
        for j in 0..t {
            e.set(i, j, dot(qi, k.row(j)) / scale);
        }
    }
    ScoreMatrix::from_scores(e).expect("square nonempty score matrix")
}

/// `L_i = { j : i-w <= j <= i+w }`, clamped to `0..T`.
pub fn local_mask(t: usize, w: usize) -> AttentionMask {
    let rows = (0..t)
        .map(|i| (i.saturating_sub(w)..=(i.saturating_add(w)).min(t - 1)).collect())
        .collect();
    AttentionMask { t, rows }
}

/// `G_i = { j : μ_i < e_ij }`; a constant row yields an empty set.
pub fn global_mask(scores: &ScoreMatrix) -> AttentionMask {
    let t = scores.len();
    let rows = (0..t)
        .map(|i| {
            let mu = scores.row_means[i];
            scores
                .e
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, &v)| mu < v)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    AttentionMask { t, rows }
}

/// Combines per-head global masks; the result has one mask per head.
pub fn fuse_heads(per_head: &[AttentionMask], fusion: Fusion) -> Result<Vec<AttentionMask>> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::Contract("fusing zero heads".into()))?;
    if let Some(m) = per_head.iter().find(|m| m.len() != first.len()) {
        return Err(Error::shape("fuse_heads", &[first.len()], &[m.len()]));
    }
    let combined = match fusion {
        Fusion::PerHead => return Ok(per_head.to_vec()),
        Fusion::Or => per_head[1..].iter().try_fold(first.clone(), |acc, m| acc.union(m))?,
        Fusion::And => per_head[1..]
            .iter()
            .try_fold(first.clone(), |acc, m| acc.intersection(m))?,
    };
    Ok(vec![combined; per_head.len()])
}

/// Masks one head used: the attended set and, for policies with a global
/// part, the fused global mask that went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMasks {
    pub attended: AttentionMask,
    pub global: Option<AttentionMask>,
}

/// Builds the attended sets for every head from that layer's scores.
pub fn build_masks(scores: &[ScoreMatrix], policy: &MaskPolicy) -> Result<Vec<HeadMasks>> {
    let t = scores
        .first()
        .ok_or_else(|| Error::Contract("building masks for zero heads".into()))?
        .len();
    Ok(match *policy {
        MaskPolicy::Dense => scores
            .iter()
            .map(|_| HeadMasks {
                attended: AttentionMask::full(t),
                global: None,
            })
            .collect(),
        MaskPolicy::LocalOnly { w } => {
            let local = local_mask(t, w);
            scores
                .iter()
                .map(|_| HeadMasks {
                    attended: local.clone(),
                    global: None,
                })
                .collect()
        }
        MaskPolicy::LocalPlusGlobal { w, fusion } => {
            let local = local_mask(t, w);
            let globals: Vec<AttentionMask> = scores.iter().map(global_mask).collect();
            fuse_heads(&globals, fusion)?
                .into_iter()
                .map(|g| {
                    Ok(HeadMasks {
                        attended: local.union(&g)?,
                        global: Some(g),
                    })
                })
                .collect::<Result<_>>()?
        }
    })
}

/// Result of one attention layer plus the diagnostics it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `T × model_dim`
    pub output: Matrix,
    pub scores: Vec<ScoreMatrix>,
    pub masks: Vec<HeadMasks>,
}

/// Multi-head self-attention where head `h` attends only to its mask rows,
/// followed by the post-attention projection `W_p`.
pub fn sparse_attend(z: &Matrix, mh: &MultiHeadWeights, policy: &MaskPolicy) -> Result<AttentionOutput> {
    mh.validate(z.cols())?;
    let t = z.rows();
    if t == 0 {
        return Err(Error::EmptyInput("attention over zero frames".into()));
    }
    let d = mh.heads[0].inner_dim();

    let mut values = Vec::with_capacity(mh.num_heads());
    let mut scores = Vec::with_capacity(mh.num_heads());
    for head in &mh.heads {
        let q = matmul(z, &head.w_q)?;
        let k = matmul(z, &head.w_k)?;
        values.push(matmul(z, &head.w_v)?);
        scores.push(scores_from_projections(&q, &k));
    }
    let masks = build_masks(&scores, policy)?;

    let mut concat = Matrix::zeros(t, mh.num_heads() * d);
    for (h, ((sc, v), hm)) in scores.iter().zip(&values).zip(&masks).enumerate() {
        for i in 0..t {
            let keys = hm.attended.row(i);
            let probs = softmax_over(sc.e.row(i), keys)?;
            let ctx = &mut concat.row_mut(i)[h * d..(h + 1) * d];
            for (&j, p) in keys.iter().zip(&probs) {
                for (c, vj) in ctx.iter_mut().zip(v.row(j)) {
                    *c += p * vj;
                }
            }
        }
    }
    Ok(AttentionOutput {
        output: matmul(&concat, &mh.w_p)?,
        scores,
        masks,
    })
}

/// Dense post-softmax attention weights (rows = queries, columns = keys).
pub fn attention_weights(scores: &ScoreMatrix) -> Matrix {
    let t = scores.len();
    let mut out = Matrix::zeros(t, t);
    for i in 0..t {
        out.row_mut(i).copy_from_slice(&softmax(scores.e.row(i)));
    }
    out
}

/// Density summary for one head of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSparsity {
    pub layer: usize,
    pub head: usize,
    /// Mean over queries of `|S_i| / T`.
    pub mean_density: f64,
    pub min_density: f64,
    pub max_density: f64,
    /// Mean over queries of `|G_i| / T`; 0 when the policy has no global part.
    pub global_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub entries: Vec<HeadSparsity>,
}

impl SparsityReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("layer head mean_density min max global_density\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{} {} {:.6} {:.6} {:.6} {:.6}\n",
                e.layer, e.head, e.mean_density, e.min_density, e.max_density, e.global_density
            ));
        }
        s
    }
}

fn row_densities(m: &AttentionMask) -> impl Iterator<Item = f64> + '_ {
    let t = m.len() as f64;
    m.rows().iter().map(move |r| r.len() as f64 / t)
}

/// Per-layer, per-head density statistics.
pub fn mask_stats(layers: &[Vec<HeadMasks>]) -> Result<SparsityReport> {
    if layers.is_empty() || layers.iter().any(Vec::is_empty) {
        return Err(Error::EmptyInput("mask statistics need at least one layer and head".into()));
    }
    let mut entries = Vec::new();
    for (l, heads) in layers.iter().enumerate() {
        for (h, hm) in heads.iter().enumerate() {
            let m = &hm.attended;
            if m.is_empty() {
                return Err(Error::EmptyInput(format!("layer {l} head {h} has T = 0")));
            }
            let t = m.len() as f64;
            let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
            for d in row_densities(m) {
                sum += d;
                min = min.min(d);
                max = max.max(d);
            }
            let global_density = hm
                .global
                .as_ref()
                .map_or(0.0, |g| row_densities(g).fold(0.0, |a, d| a + d) / t);
            entries.push(HeadSparsity {
                layer: l,
                head: h,
                mean_density: sum / t,
                min_density: min,
                max_density: max,
                global_density,
            });
        }
    }
    Ok(SparsityReport { entries })
}

/// Writes a matrix as headerless CSV, one row per line, shortest exact decimals.
pub fn write_heatmap_csv<W: Write>(out: W, m: &Matrix) -> Result<()> {
    let mut out = BufWriter::new(out);
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_heatmap_csv<R: BufRead>(input: R) -> Result<Matrix> {
    let mut rows = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("heatmap line {}: `{c}`: {e}", n + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Dense post-softmax attention map of one head as a `T × T` CSV.
pub fn export_heatmap(scores: &ScoreMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_heatmap_csv(std::fs::File::create(path)?, &attention_weights(scores))
}

pub fn import_heatmap(path: impl AsRef<Path>) -> Result<Matrix> {
    read_heatmap_csv(BufReader::new(std::fs::File::open(path)?))
}
