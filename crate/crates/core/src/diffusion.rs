//! Masked-diffusion decoding loop.
//!
//! The output segment starts fully masked. Each step runs the model over
//! `Concat(visual, prompt, output)`, predicts every masked slot greedily, and
//! reveals the `ceil(remaining / t)` most confident ones. Slots revealed on
//! one step become the deciders of the next.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::merge::{step_merge, MergeSchedule, MergeTrace};
use crate::numkernel::{softmax_slice, Matrix};
use crate::toymodel::{ModelConfig, Prompt, Weights};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceState {
    pub visual_len: usize,
    pub prompt_len: usize,
    pub output_len: usize,
    /// `None` is `[MASK]`.
    pub output_tokens: Vec<Option<u32>>,
    /// Denoising step `t` at which each slot was revealed.
    pub revealed_at: Vec<Option<usize>>,
    /// Original position of each live row.
    pub positions: Vec<usize>,
    /// Current denoising step `t` (counts down from `T`).
    pub step: usize,
}

impl SequenceState {
    pub fn masked_count(&self) -> usize {
        self.output_tokens.iter().filter(|t| t.is_none()).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.output_len).filter(|&i| self.output_tokens[i].is_none()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.masked_count() == 0
    }
}

/// Output slots revealed exactly on the previous step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeciderSet {
    pub positions: BTreeSet<usize>,
}

impl DeciderSet {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }
}

pub fn init_state(config: &ModelConfig) -> SequenceState {
    SequenceState {
        visual_len: config.n_visual,
        prompt_len: config.n_prompt,
        output_len: config.n_output,
        output_tokens: vec![None; config.n_output],
        revealed_at: vec![None; config.n_output],
        positions: (0..config.seq_len()).collect(),
        step: config.n_steps,
    }
}

/// Argmax token (lowest id on ties) and its softmax probability, per row.
pub fn greedy_decode(logits: &Matrix) -> (Vec<u32>, Vec<f32>) {
    let mut tokens = Vec::with_capacity(logits.rows());
    let mut conf = Vec::with_capacity(logits.rows());
    let mut probs = vec![0.0f32; logits.cols()];
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        probs.copy_from_slice(row);
        softmax_slice(&mut probs, 1.0);
        tokens.push(best as u32);
        conf.push(probs[best]);
    }
    (tokens, conf)
}

/// Reveal budget for step `t`: `ceil(remaining / t)`.
pub fn reveal_count(remaining: usize, t: usize) -> usize {
    remaining.div_ceil(t.max(1))
}

/// Reveals the `ceil(masked / t)` most confident masked slots (ties to the
/// lower slot). `predictions` and `confidences` are aligned with
/// [`SequenceState::masked_positions`].
pub fn unmask_schedule(state: &SequenceState, predictions: &[u32], confidences: &[f32], t: usize) -> SequenceState {
    let masked = state.masked_positions();
    debug_assert_eq!(masked.len(), predictions.len());
    debug_assert_eq!(masked.len(), confidences.len());
    let k = reveal_count(masked.len(), t);
    let mut order: Vec<usize> = (0..masked.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    let mut next = state.clone();
    for &i in order.iter().take(k) {
        let pos = masked[i];
        next.output_tokens[pos] = Some(predictions[i]);
        next.revealed_at[pos] = Some(t);
    }
    next.step = t.saturating_sub(1);
    next
}

/// Slots masked in `before` and revealed in `after`.
pub fn next_decider_set(before: &SequenceState, after: &SequenceState) -> DeciderSet {
    DeciderSet {
        positions: before
            .output_tokens
            .iter()
            .zip(&after.output_tokens)
            .enumerate()
            .filter(|(_, (b, a))| b.is_none() && a.is_some())
            .map(|(i, _)| i)
            .collect(),
    }
}

/// One decoding step of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    /// Decoding ordinal, 1 = first step (`t = T`).
    pub step: usize,
    /// Denoising index `t`.
    pub t: usize,
    pub deciders: Vec<usize>,
    pub revealed: Vec<usize>,
    /// Rows seen by each layer.
    pub rows_per_layer: Vec<usize>,
    pub merge: Option<MergeTrace>,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub trace: Vec<StepTrace>,
    pub elapsed: Duration,
}

impl DecodeOutput {
    pub fn step_durations(&self) -> impl Iterator<Item = Duration> + '_ {
        self.trace.iter().map(|s| s.elapsed)
    }
}

/// Runs the full `T → 1` trajectory. `schedule = None` decodes without
/// merging.
pub fn run_decode(weights: &Weights, prompt: &Prompt, schedule: Option<&MergeSchedule>) -> Result<DecodeOutput> {
    let config = &weights.config;
    config.validate()?;
    let start = Instant::now();
    let n_steps = config.n_steps;
    let mut state = init_state(config);
    let mut deciders = DeciderSet::default();
    let mut trace = Vec::with_capacity(n_steps);
    for t in (1..=n_steps).rev() {
        let step_start = Instant::now();
        let step = n_steps - t + 1;
        let decider_rows: Vec<usize> = deciders.positions.iter().map(|&i| config.output_offset() + i).collect();
        let mut merge_trace = None;
        let mut hook = |hidden: &Matrix, attn: &Matrix| {
            let sched = schedule.expect("hook only installed with a schedule");
            let (h, surviving, tr) = step_merge(hidden, attn, &decider_rows, sched, step, n_steps, config.n_visual)?;
            merge_trace = tr;
            Ok((h, surviving))
        };
        let use_hook = schedule.is_some() && !deciders.is_empty() && step >= 2;
        let pass = weights.forward_hidden(prompt, &state, use_hook.then_some(&mut hook as _))?;
        let logits = weights.logits(&pass.output_hidden(config))?;

        let masked = state.masked_positions();
        let (pred, conf) = greedy_decode(&logits.select_rows(&masked));
        let next = unmask_schedule(&state, &pred, &conf, t);
        let new_deciders = next_decider_set(&state, &next);
        trace.push(StepTrace {
            step,
            t,
            deciders: deciders.positions.iter().copied().collect(),
            revealed: new_deciders.positions.iter().copied().collect(),
            rows_per_layer: pass.rows_per_layer,
            merge: merge_trace,
            elapsed: step_start.elapsed(),
        });
        state = next;
        deciders = new_deciders;
    }
    debug_assert!(state.is_complete());
    Ok(DecodeOutput {
        tokens: state.output_tokens.iter().map(|t| t.expect("all revealed")).collect(),
        trace,
        elapsed: start.elapsed(),
    })
}
