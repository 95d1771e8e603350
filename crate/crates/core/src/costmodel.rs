//! Closed-form FLOPs accounting.
//!
//! Counts are multiply-accumulates: a `d × d` projection of `n` rows is
//! `n·d²`. One transformer layer over `n` rows costs
//!
//! ```text
//! attn(n) = 4·n·d² + 2·n²·d      ffn(n) = 3·n·d·m
//! ```
//!
//! Token counts are integers; a ratio times `|V|` is floored. Layer costs
//! are exact `u128`; the merge-overhead term, which carries `α(1 − α)`, is
//! rounded to the nearest MAC.

use crate::error::{Error, Result};
use crate::merge::{merged_count_floor, MergeSchedule};
use crate::toymodel::ModelConfig;

/// Cost-model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostParams {
    pub d: u64,
    pub m: u64,
    pub layers: u64,
    pub steps: u64,
    pub visual: u64,
    pub prompt: u64,
    pub output: u64,
    /// Merge layer for D³ToM, pruning layer for FastV.
    pub merge_layer: u64,
}

impl CostParams {
    /// `d = 4096, m = 12288, L = 32, T = 32, |V| = 1000, |P| = |O| = 64, l* = 3`.
    pub fn lavida_8b() -> Self {
        Self {
            d: 4096,
            m: 12_288,
            layers: 32,
            steps: 32,
            visual: 1000,
            prompt: 64,
            output: 64,
            merge_layer: 3,
        }
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            d: c.d_model as u64,
            m: c.d_ff as u64,
            layers: c.n_layers as u64,
            steps: c.n_steps as u64,
            visual: c.n_visual as u64,
            prompt: c.n_prompt as u64,
            output: c.n_output as u64,
            merge_layer: c.merge_layer as u64,
        }
    }

    #[inline]
    pub fn seq_len(&self) -> u64 {
        self.visual + self.prompt + self.output
    }

    pub fn with_merge_layer(mut self, l: u64) -> Self {
        self.merge_layer = l;
        self
    }

    fn check_merge_layer(&self) -> Result<()> {
        if self.merge_layer >= self.layers {
            return Err(Error::InvalidInput(format!(
                "merge/prune layer {} must be < L = {}",
                self.merge_layer, self.layers
            )));
        }
        Ok(())
    }
}

/// `4·n·d² + 2·n²·d`.
pub fn attn_flops(n: u64, d: u64) -> u128 {
    let (n, d) = (n as u128, d as u128);
    4 * n * d * d + 2 * n * n * d
}

/// `3·n·d·m`.
pub fn ffn_flops(n: u64, d: u64, m: u64) -> u128 {
    3 * n as u128 * d as u128 * m as u128
}

pub fn layer_flops(n: u64, d: u64, m: u64) -> u128 {
    attn_flops(n, d) + ffn_flops(n, d, m)
}

/// `T · L · layer(N)`.
pub fn baseline_flops(p: &CostParams) -> u128 {
    p.steps as u128 * p.layers as u128 * layer_flops(p.seq_len(), p.d, p.m)
}

/// `2·α(1 − α)·|V|²·d + α·|V|·d`, the similarity search plus the additions.
pub fn merge_overhead(alpha: f64, visual: u64, d: u64) -> f64 {
    let v = visual as f64;
    let d = d as f64;
    2.0 * alpha * (1.0 - alpha) * v * v * d + alpha * v * d
}

/// Cost of one merging step with ratio `alpha`.
pub fn d3tom_step_flops(p: &CostParams, alpha: f64) -> u128 {
    let n = p.seq_len();
    let nm = n - merged_count_floor(alpha, p.visual as usize) as u64;
    let l = p.merge_layer as u128;
    let after = (p.layers - p.merge_layer - 1) as u128;
    l * layer_flops(n, p.d, p.m)
        + attn_flops(n, p.d)
        + ffn_flops(nm, p.d, p.m)
        + after * layer_flops(nm, p.d, p.m)
        + merge_overhead(alpha, p.visual, p.d).round() as u128
}

/// Total D³ToM cost. The first decoding step has no deciders and runs the
/// full `L · layer(N)`; the remaining `T − 1` steps take the schedule's
/// ratios in order.
pub fn d3tom_flops(p: &CostParams, schedule: &MergeSchedule) -> Result<u128> {
    p.check_merge_layer()?;
    if p.steps == 0 {
        return Ok(0);
    }
    let first = p.layers as u128 * layer_flops(p.seq_len(), p.d, p.m);
    let rest: u128 = schedule
        .merging_ratios(p.steps as usize)
        .into_iter()
        .map(|a| d3tom_step_flops(p, a))
        .sum();
    Ok(first + rest)
}

/// Same as [`d3tom_flops`] with real-valued `N_m = N − α|V|`, in `f64`.
pub fn d3tom_flops_continuous(p: &CostParams, schedule: &MergeSchedule) -> Result<f64> {
    p.check_merge_layer()?;
    if p.steps == 0 {
        return Ok(0.0);
    }
    let (d, m) = (p.d as f64, p.m as f64);
    let attn = |n: f64| 4.0 * n * d * d + 2.0 * n * n * d;
    let ffn = |n: f64| 3.0 * n * d * m;
    let n = p.seq_len() as f64;
    let l = p.merge_layer as f64;
    let after = (p.layers - p.merge_layer - 1) as f64;
    let mut total = p.layers as f64 * (attn(n) + ffn(n));
    for a in schedule.merging_ratios(p.steps as usize) {
        let nm = n - a * p.visual as f64;
        total += l * (attn(n) + ffn(n)) + attn(n) + ffn(nm) + after * (attn(nm) + ffn(nm)) + merge_overhead(a, p.visual, p.d);
    }
    Ok(total)
}

/// Population variance of the ratios over the merging steps.
pub fn schedule_variance(schedule: &MergeSchedule, steps: u64) -> f64 {
    let r = schedule.merging_ratios(steps as usize);
    if r.is_empty() {
        return 0.0;
    }
    // Shifted by the first ratio so a constant schedule is exactly zero.
    let shift = r[0];
    let n = r.len() as f64;
    let mean = r.iter().map(|a| a - shift).sum::<f64>() / n;
    r.iter().map(|a| (a - shift - mean).powi(2)).sum::<f64>() / n
}

/// `Δ = 4·d·|V|²·(T − 1)·Var(α)`, the published estimate of the extra cost of
/// a varying schedule over a constant one with the same mean.
pub fn schedule_delta(p: &CostParams, schedule: &MergeSchedule) -> f64 {
    4.0 * p.d as f64 * (p.visual as f64).powi(2) * (p.steps.saturating_sub(1)) as f64 * schedule_variance(schedule, p.steps)
}

/// Normaliser for [`schedule_delta`]: the `4·d·N²` reference scaled by the
/// `T · L` layer-steps it is summed over.
pub fn schedule_delta_normalizer(p: &CostParams) -> f64 {
    4.0 * p.d as f64 * (p.seq_len() as f64).powi(2) * p.steps as f64 * p.layers as f64
}

/// The exact difference `d3tom(varying) − d3tom(constant)` at equal mean
/// under real-valued token counts. Every `α²` term in a merging step has
/// coefficient `2·d·|V|²·(L − l* − 2)`: `+2d|V|²` from each of the
/// `L − l* − 1` shortened layers, `−2d|V|²` from the merge overhead.
pub fn schedule_delta_exact(p: &CostParams, schedule: &MergeSchedule) -> f64 {
    let tail = p.layers as f64 - p.merge_layer as f64 - 2.0;
    2.0 * p.d as f64
        * (p.visual as f64).powi(2)
        * tail
        * (p.steps.saturating_sub(1)) as f64
        * schedule_variance(schedule, p.steps)
}

/// FastV: prune `floor(R|V|)` visual tokens at layer `K` on every step that
/// has a previous step to rank from. The first step runs unpruned, like
/// D³ToM's, so both methods share the same token budget.
pub fn fastv_flops(p: &CostParams, ratio: f64) -> Result<u128> {
    p.check_merge_layer()?;
    check_ratio(ratio)?;
    if p.steps == 0 {
        return Ok(0);
    }
    let n = p.seq_len();
    let np = n - merged_count_floor(ratio, p.visual as usize) as u64;
    let k = p.merge_layer as u128;
    let per_step = k * layer_flops(n, p.d, p.m)
        + (p.layers as u128 - k) * layer_flops(np, p.d, p.m)
        + 2 * p.d as u128 * p.visual as u128;
    Ok(p.layers as u128 * layer_flops(n, p.d, p.m) + (p.steps as u128 - 1) * per_step)
}

/// Visual tokens kept in each of PyramidDrop's four stages:
/// `V_i = β^i·|V|` with `β = 1.5(1 − α)`, floored and capped at `|V|`.
pub fn pdrop_stage_tokens(visual: u64, alpha: f64) -> [u64; 4] {
    let beta = 1.5 * (1.0 - alpha);
    let mut v = [visual; 4];
    for (i, slot) in v.iter_mut().enumerate().skip(1) {
        let x = beta.powi(i as i32) * visual as f64;
        *slot = ((x + 1e-9).floor() as u64).min(visual);
    }
    v
}

pub fn pdrop_flops(p: &CostParams, alpha: f64) -> Result<u128> {
    if !p.layers.is_multiple_of(4) {
        return Err(Error::InvalidInput(format!("PyramidDrop needs L divisible by 4, got {}", p.layers)));
    }
    check_ratio(alpha)?;
    let stage = p.layers as u128 / 4;
    let v = pdrop_stage_tokens(p.visual, alpha);
    let layers: u128 = v
        .iter()
        .map(|&vi| stage * layer_flops(p.prompt + p.output + vi, p.d, p.m))
        .sum();
    let ranking = 2 * p.d as u128 * (v[0] + v[1] + v[2]) as u128;
    Ok(p.steps as u128 * (layers + ranking))
}

/// VisionZip: `floor(R|V|)` visual tokens removed before the first layer.
pub fn visionzip_flops(p: &CostParams, ratio: f64) -> Result<u128> {
    check_ratio(ratio)?;
    let nz = p.prompt + p.output + p.visual - merged_count_floor(ratio, p.visual as usize) as u64;
    Ok(p.steps as u128 * p.layers as u128 * layer_flops(nz, p.d, p.m))
}

fn check_ratio(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("reduction ratio {r} outside [0, 1)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Baseline,
    D3tom,
    /// Increasing linear schedule.
    D3tomT,
    /// Decreasing linear schedule.
    D3tomTRev,
    FastV,
    PDrop,
    VisionZip,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::D3tom,
        Method::D3tomT,
        Method::D3tomTRev,
        Method::FastV,
        Method::PDrop,
        Method::VisionZip,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::D3tom => "d3tom",
            Method::D3tomT => "d3tom-t",
            Method::D3tomTRev => "d3tom-t-rev",
            Method::FastV => "fastv",
            Method::PDrop => "pdrop",
            Method::VisionZip => "visionzip",
        }
    }

    pub fn uses_layer(&self) -> bool {
        matches!(self, Method::D3tom | Method::D3tomT | Method::D3tomTRev | Method::FastV)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of a cost table.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub method: Method,
    pub retain_ratio: f64,
    /// Mean merge ratio, or pruning ratio `R`.
    pub alpha: f64,
    pub layer: Option<u64>,
    pub flops_abs: u128,
    pub flops_rel: f64,
    pub params: CostParams,
}

/// Cost of `method` at average reduction `alpha = 1 − retain_ratio`, with
/// every method normalised to the same mean ratio.
pub fn cost_report(p: &CostParams, method: Method, retain_ratio: f64) -> Result<CostReport> {
    if !(0.0..=1.0).contains(&retain_ratio) || retain_ratio == 0.0 {
        return Err(Error::InvalidInput(format!("retain ratio {retain_ratio} outside (0, 1]")));
    }
    let alpha = 1.0 - retain_ratio;
    let flops_abs = match method {
        Method::Baseline => baseline_flops(p),
        Method::D3tom => d3tom_flops(p, &MergeSchedule::constant(alpha)?)?,
        Method::D3tomT => d3tom_flops(p, &MergeSchedule::linear_with_mean(alpha)?)?,
        Method::D3tomTRev => d3tom_flops(p, &MergeSchedule::linear_reversed_with_mean(alpha)?)?,
        Method::FastV => fastv_flops(p, alpha)?,
        Method::PDrop => pdrop_flops(p, alpha)?,
        Method::VisionZip => visionzip_flops(p, alpha)?,
    };
    let base = baseline_flops(p);
    Ok(CostReport {
        method,
        retain_ratio,
        alpha: if method == Method::Baseline { 0.0 } else { alpha },
        layer: method.uses_layer().then_some(p.merge_layer),
        flops_abs,
        flops_rel: if base == 0 { 0.0 } else { flops_abs as f64 / base as f64 },
        params: *p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tflops(x: u128) -> f64 {
        x as f64 / 1e12
    }

    #[test]
    fn layer_cost_hand_values() {
        assert_eq!(layer_flops(1, 1, 1), 9);
        // 4·1128·4096² = 75,698,798,592; 2·1128²·4096 = 10,423,369,728; 3·1128·4096·12288 = 170,322,296,832
        assert_eq!(attn_flops(1128, 4096), 86_122_168_320);
        assert_eq!(layer_flops(1128, 4096, 12288), 256_444_465_152);
    }

    #[test]
    fn baseline_values() {
        let p = CostParams::lavida_8b();
        assert_eq!(baseline_flops(&p), 262_599_132_315_648);
        assert_eq!(baseline_flops(&CostParams { steps: 0, ..p }), 0);
        let one = CostParams { steps: 1, layers: 1, ..p };
        assert_eq!(baseline_flops(&one), layer_flops(1128, 4096, 12288));
    }

    #[test]
    fn merge_overhead_values() {
        assert_eq!(merge_overhead(0.0, 1000, 4096), 0.0);
        let got = merge_overhead(0.9, 1000, 4096);
        assert!((got - (737_280_000.0 + 3_686_400.0)).abs() < 1e-3);
        let q = |a: f64| 2.0 * a * (1.0 - a);
        assert!(q(0.5) > q(0.49) && q(0.5) > q(0.51));
    }

    #[test]
    fn d3tom_zero_ratio_is_baseline() {
        let p = CostParams::lavida_8b();
        assert_eq!(d3tom_flops(&p, &MergeSchedule::constant(0.0).unwrap()).unwrap(), baseline_flops(&p));
    }

    #[test]
    fn d3tom_table_points() {
        let p = CostParams::lavida_8b();
        let c = |a| tflops(d3tom_flops(&p, &MergeSchedule::constant(a).unwrap()).unwrap());
        assert!((c(0.9) / 79.35 - 1.0).abs() < 0.005);
        assert!((c(0.75) / 109.12 - 1.0).abs() < 0.005);
    }

    #[test]
    fn baseline_method_points() {
        let p = CostParams::lavida_8b();
        assert!((tflops(fastv_flops(&p, 0.9).unwrap()) / 77.14 - 1.0).abs() < 0.005);
        assert!((tflops(fastv_flops(&p, 0.5).unwrap()) / 158.10 - 1.0).abs() < 0.005);
        assert!((tflops(pdrop_flops(&p, 0.9).unwrap()) / 97.16 - 1.0).abs() < 0.005);
        assert!((tflops(pdrop_flops(&p, 0.75).unwrap()) / 119.57 - 1.0).abs() < 0.005);
        assert!((tflops(visionzip_flops(&p, 0.9).unwrap()) / 51.36 - 1.0).abs() < 0.005);
        assert!((tflops(visionzip_flops(&p, 0.75).unwrap()) / 85.62 - 1.0).abs() < 0.005);
        assert_eq!(visionzip_flops(&p, 0.0).unwrap(), baseline_flops(&p));
    }

    #[test]
    fn fastv_zero_ratio_adds_only_ranking() {
        let p = CostParams::lavida_8b();
        let ranking = (p.steps as u128 - 1) * 2 * p.d as u128 * p.visual as u128;
        assert_eq!(fastv_flops(&p, 0.0).unwrap(), baseline_flops(&p) + ranking);
    }

    #[test]
    fn pdrop_caps_and_divisibility() {
        assert_eq!(pdrop_stage_tokens(1000, 0.2), [1000; 4]);
        assert_eq!(pdrop_stage_tokens(1000, 0.9), [1000, 150, 22, 3]);
        let p = CostParams { layers: 30, ..CostParams::lavida_8b() };
        assert!(pdrop_flops(&p, 0.5).is_err());
        let p = CostParams::lavida_8b();
        assert_eq!(pdrop_flops(&p, 0.2).unwrap(), baseline_flops(&p) + p.steps as u128 * 2 * 4096 * 3000);
    }

    #[test]
    fn delta_cases() {
        let p = CostParams::lavida_8b();
        assert_eq!(schedule_delta(&p, &MergeSchedule::constant(0.7).unwrap()), 0.0);
        // Two decoding steps leave one merging step; spread {0, 0.5} over two
        // merging steps needs T = 3.
        let tiny = CostParams { d: 1, visual: 1, steps: 3, ..p };
        let s = MergeSchedule::linear(0.0, 0.5).unwrap();
        assert!((schedule_variance(&s, 3) - 0.0625).abs() < 1e-15);
        assert!((schedule_delta(&tiny, &s) - 4.0 * 2.0 * 0.0625).abs() < 1e-12);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fast".parse::<Method>().is_err());
    }

    #[test]
    fn monotone_in_ratio() {
        let p = CostParams::lavida_8b();
        let ratios: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
        for w in ratios.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(d3tom_flops(&p, &MergeSchedule::constant(b).unwrap()).unwrap() <= d3tom_flops(&p, &MergeSchedule::constant(a).unwrap()).unwrap());
            assert!(fastv_flops(&p, b).unwrap() <= fastv_flops(&p, a).unwrap());
            assert!(pdrop_flops(&p, b).unwrap() <= pdrop_flops(&p, a).unwrap());
            assert!(visionzip_flops(&p, b).unwrap() <= visionzip_flops(&p, a).unwrap());
        }
    }
}
