//! Decider-guided visual token merging.
//!
//! At the merge layer, visual tokens are scored by the attention they receive
//! from the *decider* rows (output tokens revealed on the previous step). The
//! top `(1-α)|V|` are kept; each remaining token is added into its most
//! cosine-similar kept token and its row is removed.

use std::collections::BTreeMap;
use std::ops::Range;

use log::warn;

use crate::error::{Error, Result};
use crate::numkernel::{dot, norm, Matrix};

/// Slack absorbed when turning a ratio times a count into an integer, so
/// that e.g. `(1 - 0.9) * 1000` counts as 100 and not 99.
const COUNT_EPS: f64 = 1e-9;

/// Ratio of visual tokens merged away at each merging step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MergeSchedule {
    Constant { alpha: f64 },
    /// Ramps from `alpha_min` on the first merging step to `alpha_max` on the last.
    Linear { alpha_min: f64, alpha_max: f64 },
    /// Same ramp traversed from `alpha_max` down to `alpha_min`.
    LinearReversed { alpha_min: f64, alpha_max: f64 },
}

impl MergeSchedule {
    pub fn constant(alpha: f64) -> Result<Self> {
        check_ratio(alpha)?;
        Ok(Self::Constant { alpha })
    }

    pub fn linear(alpha_min: f64, alpha_max: f64) -> Result<Self> {
        check_bounds(alpha_min, alpha_max)?;
        Ok(Self::Linear { alpha_min, alpha_max })
    }

    pub fn linear_reversed(alpha_min: f64, alpha_max: f64) -> Result<Self> {
        check_bounds(alpha_min, alpha_max)?;
        Ok(Self::LinearReversed { alpha_min, alpha_max })
    }

    /// Endpoints for a ramp whose mean is `mean`: `alpha_max = min(mean + 0.1, 0.99)`
    /// and `alpha_min = 2·mean − alpha_max`.
    pub fn default_endpoints(mean: f64) -> Result<(f64, f64)> {
        check_ratio(mean)?;
        let alpha_max = (mean + 0.1).min(0.99);
        let alpha_min = 2.0 * mean - alpha_max;
        check_bounds(alpha_min, alpha_max)?;
        Ok((alpha_min, alpha_max))
    }

    pub fn linear_with_mean(mean: f64) -> Result<Self> {
        let (lo, hi) = Self::default_endpoints(mean)?;
        Self::linear(lo, hi)
    }

    pub fn linear_reversed_with_mean(mean: f64) -> Result<Self> {
        let (lo, hi) = Self::default_endpoints(mean)?;
        Self::linear_reversed(lo, hi)
    }

    pub fn is_noop(&self) -> bool {
        match *self {
            Self::Constant { alpha } => alpha == 0.0,
            Self::Linear { alpha_min, alpha_max } | Self::LinearReversed { alpha_min, alpha_max } => {
                alpha_min == 0.0 && alpha_max == 0.0
            }
        }
    }

    /// Ratio at ordinal `s` (1-based) of a horizon of `horizon` ordinals.
    pub fn alpha_at(&self, s: usize, horizon: usize) -> f64 {
        debug_assert!(s >= 1 && s <= horizon.max(1));
        let ramp = |lo: f64, hi: f64, s: usize| {
            if horizon <= 1 {
                lo
            } else {
                lo + (hi - lo) * (s - 1) as f64 / (horizon - 1) as f64
            }
        };
        match *self {
            Self::Constant { alpha } => alpha,
            Self::Linear { alpha_min, alpha_max } => ramp(alpha_min, alpha_max, s),
            Self::LinearReversed { alpha_min, alpha_max } => ramp(alpha_min, alpha_max, horizon - s + 1),
        }
    }

    /// The ratio applied at decoding step `step` (1 = first step) of an
    /// `n_steps` trajectory, or `None` on the first step, which never has
    /// deciders. The ramp spans the `n_steps − 1` merging steps.
    pub fn alpha_for_step(&self, step: usize, n_steps: usize) -> Option<f64> {
        (step >= 2 && step <= n_steps).then(|| self.alpha_at(step - 1, n_steps - 1))
    }

    /// Ratios of every merging step, in decoding order.
    pub fn merging_ratios(&self, n_steps: usize) -> Vec<f64> {
        (2..=n_steps).filter_map(|s| self.alpha_for_step(s, n_steps)).collect()
    }
}

fn check_ratio(a: f64) -> Result<()> {
    if (0.0..1.0).contains(&a) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("merge ratio {a} outside [0, 1)")))
    }
}

fn check_bounds(lo: f64, hi: f64) -> Result<()> {
    check_ratio(lo)?;
    check_ratio(hi)?;
    if lo > hi {
        return Err(Error::InvalidInput(format!("alpha_min {lo} > alpha_max {hi}")));
    }
    Ok(())
}

/// `max(1, floor((1 − α)·|V|))`.
pub fn kept_count(alpha: f64, n_visual: usize) -> usize {
    let k = ((1.0 - alpha) * n_visual as f64 + COUNT_EPS).floor() as usize;
    k.clamp(1, n_visual.max(1))
}

/// `floor(α·|V|)`, the token count the cost model removes.
pub fn merged_count_floor(alpha: f64, n_visual: usize) -> usize {
    ((alpha * n_visual as f64 + COUNT_EPS).floor() as usize).min(n_visual)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergePlan {
    /// Kept visual indices, ascending.
    pub kept: Vec<usize>,
    /// Merged visual indices, ascending.
    pub merged: Vec<usize>,
    /// Merged index → kept index it was added into.
    pub target: BTreeMap<usize, usize>,
    pub scores: Vec<f32>,
}

/// `S_j = Σ_{i∈D} A[i, j]` for every visual column `j`. `decider_rows` are
/// row indices into `attn`.
pub fn importance_scores(attn: &Matrix, decider_rows: &[usize], visual: Range<usize>) -> Result<Vec<f32>> {
    if decider_rows.is_empty() {
        return Err(Error::EmptyDeciders);
    }
    if visual.end > attn.cols() {
        return Err(Error::DimensionMismatch(format!(
            "visual range {visual:?} exceeds {} attention columns",
            attn.cols()
        )));
    }
    let mut acc = vec![0.0f64; visual.len()];
    for &i in decider_rows {
        if i >= attn.rows() {
            return Err(Error::InvalidInput(format!("decider row {i} out of range")));
        }
        for (s, &a) in acc.iter_mut().zip(&attn.row(i)[visual.clone()]) {
            *s += a as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Indices of the `keep` highest scores, ties to the lower index.
pub fn top_k(scores: &[f32], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let keep = keep.min(scores.len());
    if keep < order.len() && keep > 0 {
        order.select_nth_unstable_by(keep - 1, by_rank);
    }
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Kept/merged split for ratio `alpha` (targets left empty).
pub fn partition(scores: &[f32], alpha: f64) -> MergePlan {
    let n = scores.len();
    let keep = if n == 0 { 0 } else { kept_count(alpha, n) };
    partition_keep(scores, keep)
}

/// Kept/merged split keeping exactly `keep` tokens.
pub fn partition_keep(scores: &[f32], keep: usize) -> MergePlan {
    let kept = top_k(scores, keep);
    let mut is_kept = vec![false; scores.len()];
    for &k in &kept {
        is_kept[k] = true;
    }
    let merged = (0..scores.len()).filter(|&i| !is_kept[i]).collect();
    MergePlan {
        kept,
        merged,
        target: BTreeMap::new(),
        scores: scores.to_vec(),
    }
}

/// For each row in `merged`, the member of `kept` with the highest cosine
/// similarity (ties and zero-norm rows go to the lowest kept index).
/// Similarities are taken from the rows as given, before any addition.
pub fn nearest_kept(rows: &Matrix, kept: &[usize], merged: &[usize]) -> BTreeMap<usize, usize> {
    let kept_norms: Vec<f64> = kept.iter().map(|&k| norm(rows.row(k))).collect();
    let mut target = BTreeMap::new();
    let Some(&first) = kept.first() else {
        return target;
    };
    for &m in merged {
        let hm = rows.row(m);
        let nm = norm(hm);
        if nm == 0.0 {
            warn!("zero-norm row {m} in merge; routing to kept row {first}");
            target.insert(m, first);
            continue;
        }
        let mut best = first;
        let mut best_sim = f64::NEG_INFINITY;
        for (&k, &nk) in kept.iter().zip(&kept_norms) {
            let sim = if nk == 0.0 {
                f64::NEG_INFINITY
            } else {
                dot(hm, rows.row(k)) / (nm * nk)
            };
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        target.insert(m, best);
    }
    target
}

/// Adds every merged visual row into its most similar kept row, then drops
/// the merged rows. Visual rows are `0..plan.scores.len()` of `hidden`; all
/// other rows pass through untouched. Returns the surviving row indices.
pub fn assign_and_merge(hidden: &Matrix, plan: &mut MergePlan) -> Result<(Matrix, Vec<usize>)> {
    if plan.merged.is_empty() {
        plan.target.clear();
        return Ok((hidden.clone(), (0..hidden.rows()).collect()));
    }
    let n_visual = plan.kept.len() + plan.merged.len();
    if n_visual > hidden.rows() {
        return Err(Error::DimensionMismatch(format!(
            "plan covers {n_visual} visual rows, hidden has {}",
            hidden.rows()
        )));
    }
    if plan.kept.is_empty() {
        return Err(Error::InvalidInput("merge plan keeps no tokens".into()));
    }
    plan.target = nearest_kept(hidden, &plan.kept, &plan.merged);
    let mut out = hidden.clone();
    for (&m, &k) in &plan.target {
        let src = hidden.row(m).to_vec();
        for (a, b) in out.row_mut(k).iter_mut().zip(src) {
            *a += b;
        }
    }
    let mut removed = vec![false; hidden.rows()];
    for &m in &plan.merged {
        removed[m] = true;
    }
    let surviving: Vec<usize> = (0..hidden.rows()).filter(|&i| !removed[i]).collect();
    Ok((out.select_rows(&surviving), surviving))
}

/// What happened at one merging step.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTrace {
    /// Decoding step ordinal, 1 = first step.
    pub step: usize,
    pub alpha: f64,
    pub n_deciders: usize,
    pub kept: Vec<usize>,
    pub merged: usize,
    pub scores: Vec<f32>,
}

/// The full merge at the merge layer for one decoding step: score, split,
/// merge. With no deciders the hidden states pass through at full length.
pub fn step_merge(
    hidden: &Matrix,
    attn: &Matrix,
    decider_rows: &[usize],
    schedule: &MergeSchedule,
    step: usize,
    n_steps: usize,
    n_visual: usize,
) -> Result<(Matrix, Vec<usize>, Option<MergeTrace>)> {
    let alpha = match schedule.alpha_for_step(step, n_steps) {
        Some(a) if !decider_rows.is_empty() => a,
        _ => return Ok((hidden.clone(), (0..hidden.rows()).collect(), None)),
    };
    let scores = importance_scores(attn, decider_rows, 0..n_visual)?;
    let mut plan = partition(&scores, alpha);
    let (merged_hidden, surviving) = assign_and_merge(hidden, &mut plan)?;
    let trace = MergeTrace {
        step,
        alpha,
        n_deciders: decider_rows.len(),
        merged: plan.merged.len(),
        kept: plan.kept,
        scores: plan.scores,
    };
    Ok((merged_hidden, surviving, Some(trace)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_endpoints_and_midpoint() {
        let s = MergeSchedule::linear(0.2, 0.6).unwrap();
        assert_eq!(s.alpha_at(1, 5), 0.2);
        assert_eq!(s.alpha_at(5, 5), 0.6);
        let eps = 1e-6;
        let s = MergeSchedule::linear(0.8, 1.0 - eps).unwrap();
        assert_eq!(s.alpha_at(17, 32), 0.8 + (1.0 - eps - 0.8) * 16.0 / 31.0);
        assert_eq!(s.alpha_at(1, 1), 0.8);
    }

    #[test]
    fn reversed_mirrors_linear() {
        let f = MergeSchedule::linear(0.1, 0.7).unwrap();
        let r = MergeSchedule::linear_reversed(0.1, 0.7).unwrap();
        for s in 1..=9 {
            assert_eq!(r.alpha_at(s, 9), f.alpha_at(10 - s, 9));
        }
    }

    #[test]
    fn linear_mean_is_midpoint() {
        let s = MergeSchedule::linear(0.3, 0.7).unwrap();
        let mean: f64 = (1..=11).map(|i| s.alpha_at(i, 11)).sum::<f64>() / 11.0;
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn first_step_has_no_ratio() {
        let s = MergeSchedule::constant(0.5).unwrap();
        assert_eq!(s.alpha_for_step(1, 8), None);
        assert_eq!(s.alpha_for_step(2, 8), Some(0.5));
        assert_eq!(MergeSchedule::constant(0.5).unwrap().merging_ratios(1), Vec::<f64>::new());
        let l = MergeSchedule::linear(0.2, 0.8).unwrap();
        assert_eq!(l.alpha_for_step(2, 8), Some(0.2));
        assert_eq!(l.alpha_for_step(8, 8), Some(0.8));
    }

    #[test]
    fn schedule_bounds_checked() {
        assert!(MergeSchedule::constant(1.0).is_err());
        assert!(MergeSchedule::linear(0.6, 0.5).is_err());
        assert!(MergeSchedule::linear(-0.1, 0.5).is_err());
        let (lo, hi) = MergeSchedule::default_endpoints(0.9).unwrap();
        assert!((hi - 0.99).abs() < 1e-12 && (lo - 0.81).abs() < 1e-12);
        let (lo, hi) = MergeSchedule::default_endpoints(0.5).unwrap();
        assert!((hi - 0.6).abs() < 1e-12 && (lo - 0.4).abs() < 1e-12);
        assert!(MergeSchedule::default_endpoints(0.02).is_err());
    }

    #[test]
    fn kept_count_rounding() {
        assert_eq!(kept_count(0.9, 1000), 100);
        assert_eq!(kept_count(0.75, 10), 2);
        assert_eq!(kept_count(0.0, 7), 7);
        assert_eq!(kept_count(0.999, 10), 1);
        assert_eq!(merged_count_floor(0.9, 1000), 900);
        assert_eq!(merged_count_floor(2.0 / 3.0, 1000), 666);
    }

    #[test]
    fn uniform_attention_scores() {
        let n = 10;
        let attn = Matrix::from_fn(n, n, |_, _| 1.0 / n as f32);
        let s = importance_scores(&attn, &[7, 8, 9], 0..4).unwrap();
        for v in s {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_attention_scores() {
        let attn = Matrix::from_fn(12, 12, |r, c| if r == 11 && c == 7 { 1.0 } else if r == 11 { 0.0 } else { 1.0 / 12.0 });
        let s = importance_scores(&attn, &[11], 0..10).unwrap();
        for (j, v) in s.iter().enumerate() {
            assert_eq!(*v, if j == 7 { 1.0 } else { 0.0 });
        }
        assert!(matches!(importance_scores(&attn, &[], 0..10), Err(Error::EmptyDeciders)));
    }

    #[test]
    fn partition_cases() {
        let p = partition(&[0.1, 0.5, 0.2], 0.0);
        assert_eq!(p.kept, vec![0, 1, 2]);
        assert!(p.merged.is_empty());

        let scores: Vec<f32> = (0..10).map(|i| ((i * 7) % 10) as f32).collect();
        let p = partition(&scores, 0.75);
        assert_eq!(p.kept.len(), 2);
        // scores 9 at i=7 and 8 at i=4
        assert_eq!(p.kept, vec![4, 7]);

        let p = partition(&[1.0; 4], 0.5);
        assert_eq!(p.kept, vec![0, 1]);
        assert_eq!(p.merged, vec![2, 3]);
    }

    #[test]
    fn single_kept_absorbs_everything() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5], vec![9.0, 9.0]]).unwrap();
        let mut plan = MergePlan {
            kept: vec![1],
            merged: vec![0, 2],
            scores: vec![0.0; 3],
            ..Default::default()
        };
        let (out, surv) = assign_and_merge(&h, &mut plan).unwrap();
        assert_eq!(surv, vec![1, 3]);
        assert_eq!(out.row(0), &[4.5, 1.5]);
        assert_eq!(out.row(1), &[9.0, 9.0]);
    }

    #[test]
    fn empty_merge_is_identity() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let mut plan = partition(&[0.3, 0.4], 0.0);
        let (out, surv) = assign_and_merge(&h, &mut plan).unwrap();
        assert_eq!(out, h);
        assert_eq!(surv, vec![0, 1]);
    }

    #[test]
    fn hand_cosine_example() {
        // cos(row2, row0) = 0.9/√0.82 ≈ 0.994, cos(row2, row1) = 0.1/√0.82 ≈ 0.110
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.9, 0.1]]).unwrap();
        let mut plan = partition_keep(&[3.0, 2.0, 1.0], 2);
        assert_eq!(plan.kept, vec![0, 1]);
        let (out, surv) = assign_and_merge(&h, &mut plan).unwrap();
        assert_eq!(plan.target.get(&2), Some(&0));
        assert_eq!(surv, vec![0, 1]);
        assert!((out.get(0, 0) - 1.9).abs() < 1e-6 && (out.get(0, 1) - 0.1).abs() < 1e-6);
        assert_eq!(out.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn zero_norm_row_goes_to_lowest_kept() {
        let h = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let mut plan = MergePlan {
            kept: vec![0, 1],
            merged: vec![2],
            scores: vec![0.0; 3],
            ..Default::default()
        };
        assign_and_merge(&h, &mut plan).unwrap();
        assert_eq!(plan.target[&2], 0);
    }

    #[test]
    fn step_merge_passes_through_without_deciders() {
        let h = Matrix::from_fn(6, 3, |r, c| (r * 3 + c) as f32);
        let attn = Matrix::from_fn(6, 6, |_, _| 1.0 / 6.0);
        let s = MergeSchedule::constant(0.5).unwrap();
        let (out, surv, trace) = step_merge(&h, &attn, &[], &s, 3, 4, 4).unwrap();
        assert_eq!(out, h);
        assert_eq!(surv.len(), 6);
        assert!(trace.is_none());
        // First step never merges, even with deciders supplied.
        let (_, surv, trace) = step_merge(&h, &attn, &[5], &s, 1, 4, 4).unwrap();
        assert_eq!(surv.len(), 6);
        assert!(trace.is_none());
        let (_, surv, trace) = step_merge(&h, &attn, &[5], &s, 2, 4, 4).unwrap();
        assert_eq!(surv.len(), 4);
        assert_eq!(trace.unwrap().merged, 2);
    }

    fn rows_strategy() -> impl Strategy<Value = (Matrix, Vec<f32>, f64)> {
        (3usize..24, 1usize..6, any::<u64>(), 0.0f64..0.99).prop_map(|(n_vis, extra, seed, alpha)| {
            let mut rng = crate::toymodel::SplitMix64::new(seed);
            let h = Matrix::from_fn(n_vis + extra, 5, |_, _| rng.next_uniform(-2.0, 2.0));
            let scores = (0..n_vis).map(|_| rng.next_unit()).collect();
            (h, scores, alpha)
        })
    }

    proptest! {
        #[test]
        fn merge_preserves_visual_column_sums((h, scores, alpha) in rows_strategy()) {
            let n_vis = scores.len();
            let before = h.row_block(0, n_vis).column_sums();
            let mut plan = partition(&scores, alpha);
            let (out, surv) = assign_and_merge(&h, &mut plan).unwrap();
            let n_vis_after = surv.iter().filter(|&&i| i < n_vis).count();
            prop_assert_eq!(n_vis_after, kept_count(alpha, n_vis));
            prop_assert_eq!(out.rows(), h.rows() - (n_vis - kept_count(alpha, n_vis)));
            let after = out.row_block(0, n_vis_after).column_sums();
            for (b, a) in before.iter().zip(&after) {
                prop_assert!((b - a).abs() <= 1e-4 * b.abs().max(1.0));
            }
            // Non-visual rows untouched.
            for r in n_vis..h.rows() {
                prop_assert_eq!(out.row(n_vis_after + r - n_vis), h.row(r));
            }
            prop_assert!(plan.target.values().all(|k| plan.kept.contains(k)));
        }

        #[test]
        fn assignment_is_scale_invariant((h, scores, alpha) in rows_strategy(), c in 0.01f32..100.0) {
            let kept_plan = partition(&scores, alpha);
            let t1 = nearest_kept(&h, &kept_plan.kept, &kept_plan.merged);
            let scaled = Matrix::from_fn(h.rows(), h.cols(), |r, col| h.get(r, col) * c);
            let t2 = nearest_kept(&scaled, &kept_plan.kept, &kept_plan.merged);
            prop_assert_eq!(t1, t2);
        }

        #[test]
        fn partition_is_a_partition(scores in prop::collection::vec(0.0f32..1.0, 1..60), alpha in 0.0f64..0.999) {
            let p = partition(&scores, alpha);
            prop_assert_eq!(p.kept.len(), kept_count(alpha, scores.len()));
            let mut all: Vec<usize> = p.kept.iter().chain(&p.merged).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..scores.len()).collect::<Vec<_>>());
            let min_kept = p.kept.iter().map(|&k| scores[k]).fold(f32::INFINITY, f32::min);
            prop_assert!(p.merged.iter().all(|&m| scores[m] <= min_kept));
        }

        #[test]
        fn linear_schedule_monotone(lo in 0.0f64..0.5, width in 0.0f64..0.49, horizon in 2usize..40) {
            let f = MergeSchedule::linear(lo, lo + width).unwrap();
            let r = MergeSchedule::linear_reversed(lo, lo + width).unwrap();
            for s in 1..horizon {
                prop_assert!(f.alpha_at(s, horizon) <= f.alpha_at(s + 1, horizon));
                prop_assert!(r.alpha_at(s, horizon) >= r.alpha_at(s + 1, horizon));
            }
        }
    }
}
