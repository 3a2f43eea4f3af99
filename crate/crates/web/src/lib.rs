//! Browser demo: attention mask grids, DOI window layouts and CER
//! breakdowns. Each operation is a plain function returning JSON, wrapped
//! for JavaScript by `wasm-bindgen`.

use serde::Serialize;
use sparse_rnnt::attention::{build_masks, compute_scores, local_mask, AttentionHeadWeights, MaskKind, MaskPolicy};
use sparse_rnnt::eval::{edit_alignment_with, CerOptions, ErrorBreakdown};
use sparse_rnnt::numerics::Matrix;
use sparse_rnnt::rng::Xorshift64Star;
use sparse_rnnt::segmentation::{doi_split, Segment};
use wasm_bindgen::prelude::*;

/// Largest grid the demo will draw.
pub const MAX_FRAMES: usize = 256;
pub const MAX_HEADS: usize = 8;

/// Cell codes in [`HeadGrid::cells`].
pub mod cell {
    pub const HIDDEN: u8 = 0;
    pub const LOCAL: u8 = 1;
    pub const GLOBAL: u8 = 2;
    pub const BOTH: u8 = 3;
}

#[derive(Debug, Serialize)]
pub struct HeadGrid {
    /// Row-major `t × t` cell codes.
    pub cells: Vec<u8>,
    /// Fraction of cells attended.
    pub density: f64,
}

#[derive(Debug, Serialize)]
pub struct MaskGrid {
    pub t: usize,
    pub policy: String,
    pub heads: Vec<HeadGrid>,
}

fn random_matrix(rng: &mut Xorshift64Star, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("sized data")
}

/// Masks one self-attention layer would use on random frames and weights.
pub fn mask_grid_data(t: usize, w: usize, heads: usize, policy: &str, seed: u64) -> Result<MaskGrid, String> {
    if t == 0 || t > MAX_FRAMES {
        return Err(format!("frames must be in 1..={MAX_FRAMES}"));
    }
    if heads == 0 || heads > MAX_HEADS {
        return Err(format!("heads must be in 1..={MAX_HEADS}"));
    }
    let kind: MaskKind = policy.parse().map_err(|e: sparse_rnnt::Error| e.to_string())?;
    let policy = kind.with_window(w);
    let (d, dm) = (8, 16);
    let mut rng = Xorshift64Star::new(seed);
    let z = random_matrix(&mut rng, t, dm);
    let scores = (0..heads)
        .map(|_| {
            let head = AttentionHeadWeights {
                w_q: random_matrix(&mut rng, dm, d),
                w_k: random_matrix(&mut rng, dm, d),
                w_v: random_matrix(&mut rng, dm, d),
            };
            compute_scores(&z, &head)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let masks = build_masks(&scores, &policy).map_err(|e| e.to_string())?;
    let local = match policy {
        MaskPolicy::Dense => None,
        MaskPolicy::LocalOnly { w } | MaskPolicy::LocalPlusGlobal { w, .. } => Some(local_mask(t, w)),
    };
    let heads = masks
        .iter()
        .map(|hm| {
            let mut cells = vec![cell::HIDDEN; t * t];
            for i in 0..t {
                for &j in hm.attended.row(i) {
                    let in_local = local.as_ref().map_or(true, |l| l.contains(i, j));
                    let in_global = hm.global.as_ref().is_some_and(|g| g.contains(i, j));
                    cells[i * t + j] = match (in_local, in_global) {
                        (true, true) => cell::BOTH,
                        (true, false) => cell::LOCAL,
                        _ => cell::GLOBAL,
                    };
                }
            }
            HeadGrid {
                cells,
                density: hm.attended.density(),
            }
        })
        .collect();
    Ok(MaskGrid {
        t,
        policy: policy.label(),
        heads,
    })
}

/// DOI windows for an utterance of `duration` seconds.
pub fn doi_layout_data(duration: f64, doi_length: f64, overlap: f64) -> Result<Vec<Segment>, String> {
    doi_split(duration, doi_length, overlap).map_err(|e| e.to_string())
}

pub fn cer_data(reference: &str, hypothesis: &str, strip_whitespace: bool) -> ErrorBreakdown {
    edit_alignment_with(reference, hypothesis, &CerOptions { strip_whitespace })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo types serialize")
}

#[wasm_bindgen]
pub fn mask_grid(t: usize, w: usize, heads: usize, policy: &str, seed: u32) -> Result<String, JsError> {
    mask_grid_data(t, w, heads, policy, u64::from(seed))
        .map(|g| to_json(&g))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn doi_layout(duration: f64, doi_length: f64, overlap: f64) -> Result<String, JsError> {
    doi_layout_data(duration, doi_length, overlap)
        .map(|s| to_json(&s))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cer(reference: &str, hypothesis: &str, strip_whitespace: bool) -> String {
    to_json(&cer_data(reference, hypothesis, strip_whitespace))
}
