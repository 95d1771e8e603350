//! Tiled attention and decider scores without an `N × N` matrix.
//!
//! Keys are visited in tiles of `key_block` columns. [`stream_attention`]
//! keeps a running max, denominator and output accumulator per query row
//! (online softmax). [`stream_decider_scores`] makes two passes over the key
//! tiles: the first finds each decider row's softmax max and denominator, the
//! second adds the normalised weights of the visual columns into the scores.
//! Transient storage is one `rows × key_block` score tile.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::toymodel::Weights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub key_block: usize,
}

impl BlockSpec {
    pub fn new(key_block: usize) -> Result<Self> {
        if key_block == 0 {
            return Err(Error::InvalidInput("key_block must be >= 1".into()));
        }
        Ok(Self { key_block })
    }

    fn tiles(&self, n_keys: usize) -> Vec<Range<usize>> {
        let b = self.key_block.min(n_keys.max(1));
        (0..n_keys).step_by(b).map(|s| s..(s + b).min(n_keys)).collect()
    }
}

/// Largest transient buffer, in `f32`-equivalent elements, used by a call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamStats {
    pub peak_transient: usize,
    pub tiles: usize,
}

fn check_shapes(q: &Matrix, k: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::DimensionMismatch(format!(
            "query width {} != key width {}",
            q.cols(),
            k.cols()
        )));
    }
    Ok(())
}

/// Scores of `q` rows against one key tile, scaled; `tile` is reused.
fn score_tile(q: &Matrix, k: &Matrix, cols: &Range<usize>, scale: f64, tile: &mut Vec<f64>) {
    let w = cols.len();
    tile.clear();
    tile.resize(q.rows() * w, 0.0);
    for i in 0..q.rows() {
        let qi = q.row(i);
        for (jj, j) in cols.clone().enumerate() {
            let kj = k.row(j);
            let mut s = 0.0f64;
            for (&a, &b) in qi.iter().zip(kj) {
                s += a as f64 * b as f64;
            }
            tile[i * w + jj] = s * scale;
        }
    }
}

/// `softmax(q·kᵀ/√d)·v` via online softmax over key tiles.
pub fn stream_attention(q: &Matrix, k: &Matrix, v: &Matrix, block: BlockSpec) -> Result<Matrix> {
    let order: Vec<usize> = (0..block.tiles(k.rows()).len()).collect();
    stream_attention_in_tile_order(q, k, v, block, &order).map(|(m, _)| m)
}

/// As [`stream_attention`], visiting tiles in `order` (a permutation of the
/// tile indices) and reporting transient usage.
pub fn stream_attention_in_tile_order(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    block: BlockSpec,
    order: &[usize],
) -> Result<(Matrix, StreamStats)> {
    check_shapes(q, k)?;
    if k.rows() != v.rows() {
        return Err(Error::DimensionMismatch(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    let tiles = block.tiles(k.rows());
    check_order(order, tiles.len())?;
    let n = q.rows();
    let dv = v.cols();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut run_max = vec![f64::NEG_INFINITY; n];
    let mut denom = vec![0.0f64; n];
    let mut acc = vec![0.0f64; n * dv];
    let mut tile = Vec::new();
    let mut stats = StreamStats::default();
    for &ti in order {
        let cols = &tiles[ti];
        score_tile(q, k, cols, scale, &mut tile);
        stats.peak_transient = stats.peak_transient.max(tile.capacity());
        stats.tiles += 1;
        let w = cols.len();
        for i in 0..n {
            let row = &tile[i * w..(i + 1) * w];
            let tile_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let new_max = run_max[i].max(tile_max);
            let rescale = (run_max[i] - new_max).exp();
            denom[i] *= rescale;
            let out = &mut acc[i * dv..(i + 1) * dv];
            out.iter_mut().for_each(|o| *o *= rescale);
            for (jj, j) in cols.clone().enumerate() {
                let p = (row[jj] - new_max).exp();
                denom[i] += p;
                for (o, &x) in out.iter_mut().zip(v.row(j)) {
                    *o += p * x as f64;
                }
            }
            run_max[i] = new_max;
        }
    }
    let data = (0..n)
        .flat_map(|i| {
            let inv = 1.0 / denom[i];
            acc[i * dv..(i + 1) * dv].iter().map(move |&a| (a * inv) as f32).collect::<Vec<_>>()
        })
        .collect();
    Ok((Matrix::new(n, dv, data)?, stats))
}

fn check_order(order: &[usize], n_tiles: usize) -> Result<()> {
    let mut seen = vec![false; n_tiles];
    for &t in order {
        if t >= n_tiles || std::mem::replace(&mut seen[t], true) {
            return Err(Error::InvalidInput("tile order is not a permutation".into()));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidInput("tile order is not a permutation".into()));
    }
    Ok(())
}

/// `S_j = Σ_i softmax(q_i·kᵀ/√d)_j` for every `j` in `visual`, where the
/// `q_i` are the decider rows of the query matrix.
pub fn stream_decider_scores(q_deciders: &Matrix, k: &Matrix, visual: Range<usize>, block: BlockSpec) -> Result<Vec<f32>> {
    stream_decider_scores_with_stats(q_deciders, k, visual, block).map(|(s, _)| s)
}

pub fn stream_decider_scores_with_stats(
    q_deciders: &Matrix,
    k: &Matrix,
    visual: Range<usize>,
    block: BlockSpec,
) -> Result<(Vec<f32>, StreamStats)> {
    let scores = decider_scores_f64(q_deciders, k, visual, block)?;
    Ok((scores.0.into_iter().map(|s| s as f32).collect(), scores.1))
}

fn decider_scores_f64(q: &Matrix, k: &Matrix, visual: Range<usize>, block: BlockSpec) -> Result<(Vec<f64>, StreamStats)> {
    check_shapes(q, k)?;
    if q.rows() == 0 {
        return Err(Error::EmptyDeciders);
    }
    if visual.end > k.rows() {
        return Err(Error::DimensionMismatch(format!("visual range {visual:?} beyond {} keys", k.rows())));
    }
    let tiles = block.tiles(k.rows());
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut stats = StreamStats::default();
    let mut tile = Vec::new();

    // Pass 1: per-row max and denominator.
    let mut run_max = vec![f64::NEG_INFINITY; n];
    let mut denom = vec![0.0f64; n];
    for cols in &tiles {
        score_tile(q, k, cols, scale, &mut tile);
        stats.peak_transient = stats.peak_transient.max(tile.capacity());
        stats.tiles += 1;
        let w = cols.len();
        for i in 0..n {
            let row = &tile[i * w..(i + 1) * w];
            let new_max = row.iter().copied().fold(run_max[i], f64::max);
            denom[i] = denom[i] * (run_max[i] - new_max).exp() + row.iter().map(|&s| (s - new_max).exp()).sum::<f64>();
            run_max[i] = new_max;
        }
    }

    // Pass 2: only tiles overlapping the visual columns.
    let mut scores = vec![0.0f64; visual.len()];
    for cols in tiles.iter().filter(|c| c.start < visual.end && c.end > visual.start) {
        score_tile(q, k, cols, scale, &mut tile);
        stats.tiles += 1;
        let w = cols.len();
        for i in 0..n {
            let row = &tile[i * w..(i + 1) * w];
            for (jj, j) in cols.clone().enumerate() {
                if visual.contains(&j) {
                    scores[j - visual.start] += (row[jj] - run_max[i]).exp() / denom[i];
                }
            }
        }
    }
    Ok((scores, stats))
}

/// Head-averaged decider scores for the model at `layer`, matching
/// [`crate::merge::importance_scores`] on the dense head-averaged attention.
pub fn model_decider_scores(
    weights: &Weights,
    hidden: &Matrix,
    layer: usize,
    positions: &[usize],
    decider_rows: &[usize],
    visual: Range<usize>,
    block: BlockSpec,
) -> Result<Vec<f32>> {
    if decider_rows.is_empty() {
        return Err(Error::EmptyDeciders);
    }
    let p = weights.project_qkv(hidden, layer, positions)?;
    let heads = weights.config.n_heads;
    let hd = weights.config.head_dim();
    let q_dec = p.q.select_rows(decider_rows);
    let mut total = vec![0.0f64; visual.len()];
    for head in 0..heads {
        let qh = q_dec.column_block(head * hd, hd);
        let kh = p.k.column_block(head * hd, hd);
        let (s, _) = decider_scores_f64(&qh, &kh, visual.clone(), block)?;
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    Ok(total.into_iter().map(|v| (v / heads as f64) as f32).collect())
}
