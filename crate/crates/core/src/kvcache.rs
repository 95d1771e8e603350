//! Prefix key/value cache over the visual and prompt rows, with
//! decider-guided cache merging.
//!
//! The cache is filled by one full forward pass on the first step. Later
//! steps only run the output rows, attending to `[cached prefix ; fresh
//! output]` keys and values. This is the usual prefix-cache approximation:
//! prefix K/V stay frozen even though the output tokens change.

use std::time::Instant;

use crate::diffusion::{greedy_decode, init_state, next_decider_set, unmask_schedule, DeciderSet, DecodeOutput, StepTrace};
use crate::error::{Error, Result};
use crate::merge::{importance_scores, kept_count, nearest_kept, partition_keep, MergeSchedule, MergeTrace};
use crate::numkernel::Matrix;
use crate::toymodel::{Prompt, Weights};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCache {
    pub layers: Vec<LayerCache>,
    /// Original position of each cached row, ascending.
    pub live_positions: Vec<usize>,
    /// Original tokens folded into each cached row (1 until merged into).
    pub counts: Vec<u32>,
    /// Number of original visual positions; live positions below this are visual.
    pub n_visual: usize,
}

impl PrefixCache {
    pub fn kept_len(&self) -> usize {
        self.live_positions.len()
    }

    pub fn live_visual(&self) -> usize {
        self.live_positions.iter().take_while(|&&p| p < self.n_visual).count()
    }

    fn check(&self) -> Result<()> {
        for l in &self.layers {
            if l.k.rows() != self.kept_len() || l.v.rows() != self.kept_len() {
                return Err(Error::Contract("cache rows out of sync with live positions".into()));
            }
        }
        Ok(())
    }
}

/// How merged rows are folded into their target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CacheMergeMode {
    /// `K_π(m) += K_m`, `V_π(m) += V_m`.
    #[default]
    Sum,
    /// Count-weighted average of the folded rows.
    Average,
}

/// Runs the full step-`T` forward pass and records every layer's prefix
/// K/V. Also returns that pass's output logits.
pub fn build_prefix_cache(weights: &Weights, prompt: &Prompt) -> Result<(PrefixCache, Matrix)> {
    let c = &weights.config;
    c.validate()?;
    let state = init_state(c);
    let prefix = c.output_offset();
    let mut h = weights.embed(prompt, &state)?;
    let positions = &state.positions;
    let mut layers = Vec::with_capacity(c.n_layers);
    for layer in 0..c.n_layers {
        let p = weights.project_qkv(&h, layer, positions)?;
        let (ctx, _) = weights.attend(&p.q, &p.k, &p.v, false)?;
        let a = weights.attention_residual(&h, &ctx, layer)?;
        h = weights.ffn_block(&a, layer)?;
        layers.push(LayerCache {
            k: p.k.row_block(0, prefix),
            v: p.v.row_block(0, prefix),
        });
    }
    let logits = weights.logits(&h.row_block(prefix, c.n_output))?;
    let cache = PrefixCache {
        layers,
        live_positions: (0..prefix).collect(),
        counts: vec![1; prefix],
        n_visual: c.n_visual,
    };
    Ok((cache, logits))
}

/// Folds every `merged` position into its most key-similar `kept` position,
/// independently in each layer, and drops the merged rows everywhere.
/// `kept` and `merged` are original positions of live visual rows.
pub fn merge_cache(cache: &PrefixCache, kept: &[usize], merged: &[usize], mode: CacheMergeMode) -> Result<PrefixCache> {
    cache.check()?;
    if merged.is_empty() {
        return Ok(cache.clone());
    }
    let row_of = |p: usize| -> Result<usize> {
        if p >= cache.n_visual {
            return Err(Error::InvalidInput(format!("position {p} is not a visual position")));
        }
        cache
            .live_positions
            .binary_search(&p)
            .map_err(|_| Error::InvalidInput(format!("position {p} is not live in the cache")))
    };
    let mut kept_rows = kept.iter().map(|&p| row_of(p)).collect::<Result<Vec<_>>>()?;
    let merged_rows = merged.iter().map(|&p| row_of(p)).collect::<Result<Vec<_>>>()?;
    kept_rows.sort_unstable();
    if kept_rows.is_empty() {
        return Err(Error::InvalidInput("merge_cache needs at least one kept row".into()));
    }
    if merged_rows.iter().any(|m| kept_rows.binary_search(m).is_ok()) {
        return Err(Error::InvalidInput("kept and merged overlap".into()));
    }
    let mut removed = vec![false; cache.kept_len()];
    for &m in &merged_rows {
        removed[m] = true;
    }
    let surviving: Vec<usize> = (0..cache.kept_len()).filter(|&i| !removed[i]).collect();

    let mut layers = Vec::with_capacity(cache.layers.len());
    let mut counts_out = cache.counts.clone();
    for (li, lc) in cache.layers.iter().enumerate() {
        let target = nearest_kept(&lc.k, &kept_rows, &merged_rows);
        let (k, v, counts) = fold(lc, &target, &cache.counts, mode);
        if li == 0 {
            counts_out = counts;
        }
        layers.push(LayerCache {
            k: k.select_rows(&surviving),
            v: v.select_rows(&surviving),
        });
    }
    Ok(PrefixCache {
        layers,
        live_positions: surviving.iter().map(|&i| cache.live_positions[i]).collect(),
        counts: surviving.iter().map(|&i| counts_out[i]).collect(),
        n_visual: cache.n_visual,
    })
}

fn fold(
    lc: &LayerCache,
    target: &std::collections::BTreeMap<usize, usize>,
    counts: &[u32],
    mode: CacheMergeMode,
) -> (Matrix, Matrix, Vec<u32>) {
    let mut k = lc.k.clone();
    let mut v = lc.v.clone();
    let mut new_counts = counts.to_vec();
    match mode {
        CacheMergeMode::Sum => {
            for (&m, &t) in target {
                add_row(&mut k, t, lc.k.row(m), 1.0);
                add_row(&mut v, t, lc.v.row(m), 1.0);
                new_counts[t] += counts[m];
            }
        }
        CacheMergeMode::Average => {
            // Start from count-weighted rows, add contributions, divide back.
            let mut weight: Vec<f32> = counts.iter().map(|&c| c as f32).collect();
            for &t in target.values() {
                scale_row(&mut k, t, counts[t] as f32);
                scale_row(&mut v, t, counts[t] as f32);
            }
            let mut touched: Vec<usize> = target.values().copied().collect();
            touched.sort_unstable();
            touched.dedup();
            for (&m, &t) in target {
                let w = counts[m] as f32;
                add_row(&mut k, t, lc.k.row(m), w);
                add_row(&mut v, t, lc.v.row(m), w);
                weight[t] += w;
                new_counts[t] += counts[m];
            }
            for t in touched {
                scale_row(&mut k, t, 1.0 / weight[t]);
                scale_row(&mut v, t, 1.0 / weight[t]);
            }
        }
    }
    (k, v, new_counts)
}

fn add_row(m: &mut Matrix, r: usize, src: &[f32], w: f32) {
    for (a, &b) in m.row_mut(r).iter_mut().zip(src) {
        *a += w * b;
    }
}

fn scale_row(m: &mut Matrix, r: usize, s: f32) {
    m.row_mut(r).iter_mut().for_each(|a| *a *= s);
}

fn concat_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Matrix::new(a.rows() + b.rows(), a.cols(), data)
}

/// Options for [`run_cached_decode`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CachedDecodeOptions {
    pub mode: CacheMergeMode,
}

/// Decodes with a frozen prefix cache. When a schedule is given, each
/// merging step scores the live visual cache rows with the decider rows'
/// attention at the merge layer and merges the cache down to
/// `max(1, floor((1 − α)|V|))` visual rows (never growing it back).
pub fn run_cached_decode(
    weights: &Weights,
    prompt: &Prompt,
    schedule: Option<&MergeSchedule>,
    opts: CachedDecodeOptions,
) -> Result<(DecodeOutput, PrefixCache)> {
    let c = &weights.config;
    let start = Instant::now();
    let n_steps = c.n_steps;
    let mut state = init_state(c);
    let mut deciders = DeciderSet::default();
    let mut trace = Vec::with_capacity(n_steps);
    let mut cache: Option<PrefixCache> = None;
    let out_positions: Vec<usize> = (c.output_offset()..c.seq_len()).collect();

    for t in (1..=n_steps).rev() {
        let step_start = Instant::now();
        let step = n_steps - t + 1;
        let mut merge_trace = None;
        let mut rows_per_layer = Vec::with_capacity(c.n_layers);
        let logits = match cache.as_mut() {
            None => {
                let (built, logits) = build_prefix_cache(weights, prompt)?;
                rows_per_layer = vec![c.seq_len(); c.n_layers];
                cache = Some(built);
                logits
            }
            Some(cache) => {
                let full = weights.embed(prompt, &state)?;
                let mut h = full.row_block(c.output_offset(), c.n_output);
                for layer in 0..c.n_layers {
                    rows_per_layer.push(cache.kept_len() + c.n_output);
                    let p = weights.project_qkv(&h, layer, &out_positions)?;
                    let lc = &cache.layers[layer];
                    let k = concat_rows(&lc.k, &p.k)?;
                    let v = concat_rows(&lc.v, &p.v)?;
                    let alpha = schedule.and_then(|s| s.alpha_for_step(step, n_steps));
                    let merging = layer == c.merge_layer && alpha.is_some() && !deciders.is_empty();
                    let (ctx, attn) = weights.attend(&p.q, &k, &v, merging)?;
                    if let (true, Some(alpha), Some(attn)) = (merging, alpha, attn) {
                        let rows: Vec<usize> = deciders.positions.iter().copied().collect();
                        let live_visual = cache.live_visual();
                        let scores = importance_scores(&attn, &rows, 0..live_visual)?;
                        let keep = kept_count(alpha, c.n_visual).min(live_visual);
                        let plan = partition_keep(&scores, keep);
                        let to_pos = |idx: &Vec<usize>| idx.iter().map(|&i| cache.live_positions[i]).collect::<Vec<_>>();
                        let kept_pos = to_pos(&plan.kept);
                        let merged_pos = to_pos(&plan.merged);
                        *cache = merge_cache(cache, &kept_pos, &merged_pos, opts.mode)?;
                        merge_trace = Some(MergeTrace {
                            step,
                            alpha,
                            n_deciders: rows.len(),
                            merged: merged_pos.len(),
                            kept: kept_pos,
                            scores,
                        });
                    }
                    let a = weights.attention_residual(&h, &ctx, layer)?;
                    h = weights.ffn_block(&a, layer)?;
                }
                weights.logits(&h)?
            }
        };
        let masked = state.masked_positions();
        let (pred, conf) = greedy_decode(&logits.select_rows(&masked));
        let next = unmask_schedule(&state, &pred, &conf, t);
        let new_deciders = next_decider_set(&state, &next);
        trace.push(StepTrace {
            step,
            t,
            deciders: deciders.positions.iter().copied().collect(),
            revealed: new_deciders.positions.iter().copied().collect(),
            rows_per_layer,
            merge: merge_trace,
            elapsed: step_start.elapsed(),
        });
        state = next;
        deciders = new_deciders;
    }
    let out = DecodeOutput {
        tokens: state.output_tokens.iter().map(|t| t.expect("all revealed")).collect(),
        trace,
        elapsed: start.elapsed(),
    };
    Ok((out, cache.expect("cache built on first step")))
}
