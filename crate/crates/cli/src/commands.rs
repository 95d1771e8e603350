//! Subcommand arguments and handlers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, ValueEnum};
use d3tom_core::costmodel::{baseline_flops, cost_report, d3tom_flops};
use d3tom_core::kvcache::{run_cached_decode, CacheMergeMode, CachedDecodeOptions};
use d3tom_core::{init_weights, run_decode, DecodeOutput, MergeSchedule, Method, ModelConfig, Prompt, Weights};
use log::info;

use crate::config::ModelArgs;
use crate::format::{median_ms, parse_f64_list, parse_usize_list, sig9, split_list};
use crate::UsageError;

/// Widest model the engine will run without `--force`.
pub const MAX_UNFORCED_D_MODEL: usize = 1024;

const DEFAULT_RETAIN: &str = "50,33.3,25,16.7,10";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_method(s: &str) -> Result<Method, UsageError> {
    s.parse::<Method>().map_err(|e| UsageError(e.to_string()))
}

fn runtime_method(s: &str) -> Result<Method, UsageError> {
    let m = parse_method(s)?;
    match m {
        Method::Baseline | Method::D3tom | Method::D3tomT | Method::D3tomTRev => Ok(m),
        _ => Err(UsageError(format!("{m} has a cost model only and cannot be run"))),
    }
}

fn retain_to_alpha(pct: f64) -> Result<f64, UsageError> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(UsageError(format!("retain percentage {pct} outside (0, 100]")));
    }
    Ok(1.0 - pct / 100.0)
}

/// Builds the schedule for a runtime method at mean ratio `alpha`.
fn schedule_for(method: Method, alpha: f64, bounds: Option<(f64, f64)>) -> Result<Option<MergeSchedule>, UsageError> {
    let u = |e: d3tom_core::Error| UsageError(e.to_string());
    Ok(match (method, bounds) {
        (Method::Baseline, _) => None,
        (Method::D3tom, _) => Some(MergeSchedule::constant(alpha).map_err(u)?),
        (Method::D3tomT, None) => Some(MergeSchedule::linear_with_mean(alpha).map_err(u)?),
        (Method::D3tomT, Some((lo, hi))) => Some(MergeSchedule::linear(lo, hi).map_err(u)?),
        (Method::D3tomTRev, None) => Some(MergeSchedule::linear_reversed_with_mean(alpha).map_err(u)?),
        (Method::D3tomTRev, Some((lo, hi))) => Some(MergeSchedule::linear_reversed(lo, hi).map_err(u)?),
        (m, _) => return Err(UsageError(format!("{m} cannot be run"))),
    })
}

#[derive(Args, Clone, Debug)]
pub struct ScheduleArgs {
    /// baseline, d3tom, d3tom-t or d3tom-t-rev.
    #[arg(long, default_value = "d3tom")]
    pub method: String,
    /// Merge ratio, or the mean ratio of a linear schedule.
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    /// Lower end of a linear schedule (needs --alpha-max).
    #[arg(long)]
    pub alpha_min: Option<f64>,
    /// Upper end of a linear schedule (needs --alpha-min).
    #[arg(long)]
    pub alpha_max: Option<f64>,
}

impl ScheduleArgs {
    pub fn method(&self) -> Result<Method, UsageError> {
        runtime_method(&self.method)
    }

    pub fn schedule(&self) -> Result<Option<MergeSchedule>, UsageError> {
        let method = self.method()?;
        let bounds = match (self.alpha_min, self.alpha_max) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (None, None) => None,
            _ => return Err(UsageError("--alpha-min and --alpha-max go together".into())),
        };
        if bounds.is_some() && !matches!(method, Method::D3tomT | Method::D3tomTRev) {
            return Err(UsageError(format!("{method} takes no schedule endpoints")));
        }
        schedule_for(method, self.alpha, bounds)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum CacheMode {
    #[default]
    Sum,
    Average,
}

impl From<CacheMode> for CacheMergeMode {
    fn from(m: CacheMode) -> Self {
        match m {
            CacheMode::Sum => CacheMergeMode::Sum,
            CacheMode::Average => CacheMergeMode::Average,
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct EngineArgs {
    /// Decode with the frozen prefix K/V cache.
    #[arg(long)]
    pub kv_cache: bool,
    /// How merged cache rows are combined.
    #[arg(long, value_enum, default_value_t = CacheMode::Sum)]
    pub cache_mode: CacheMode,
    /// Allow models wider than the toy engine limit.
    #[arg(long)]
    pub force: bool,
}

impl EngineArgs {
    fn check_size(&self, c: &ModelConfig) -> Result<(), UsageError> {
        if c.d_model > MAX_UNFORCED_D_MODEL && !self.force {
            return Err(UsageError(format!(
                "d_model {} is above {MAX_UNFORCED_D_MODEL}; pass --force to run it anyway",
                c.d_model
            )));
        }
        Ok(())
    }

    fn decode(&self, w: &Weights, p: &Prompt, schedule: Option<&MergeSchedule>) -> anyhow::Result<DecodeOutput> {
        if self.kv_cache {
            let opts = CachedDecodeOptions {
                mode: self.cache_mode.into(),
            };
            Ok(run_cached_decode(w, p, schedule, opts)?.0)
        } else {
            Ok(run_decode(w, p, schedule)?)
        }
    }
}

fn build_model(model: &ModelArgs, engine: &EngineArgs) -> anyhow::Result<(Weights, Prompt)> {
    let c = model.resolve()?;
    engine.check_size(&c)?;
    let w = init_weights(&c)?;
    let p = Prompt::synthesize(&c);
    Ok((w, p))
}

fn open_output<'a>(path: &Option<PathBuf>, stdout: &'a mut dyn Write) -> anyhow::Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(stdout),
    })
}

#[derive(Args, Clone, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Load weights from this file instead of seeding them (its config wins).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Write the weights used to this file.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
    /// Write per-step merge counts as CSV to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

/// Prints the final tokens and per-step merge counts on `out` and the wall
/// clock on stderr, so that stdout is reproducible.
pub fn decode(a: &DecodeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let schedule = a.schedule.schedule()?;
    let (w, p) = match &a.weights {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let w = Weights::read_from(BufReader::new(f))?;
            a.engine.check_size(&w.config)?;
            let p = Prompt::synthesize(&w.config);
            (w, p)
        }
        None => build_model(&a.model, &a.engine)?,
    };
    if let Some(path) = &a.save_weights {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut f = BufWriter::new(f);
        w.write_to(&mut f)?;
        f.flush()?;
    }
    let start = Instant::now();
    let result = a.engine.decode(&w, &p, schedule.as_ref())?;
    let elapsed = start.elapsed();

    let toks: Vec<String> = result.tokens.iter().map(u32::to_string).collect();
    writeln!(out, "tokens: {}", toks.join(" "))?;
    for st in &result.trace {
        match &st.merge {
            Some(m) => writeln!(
                out,
                "step {} t={} deciders={} alpha={} kept={} merged={}",
                st.step,
                st.t,
                m.n_deciders,
                sig9(m.alpha),
                m.kept.len(),
                m.merged
            )?,
            None => writeln!(out, "step {} t={} deciders={} kept=- merged=-", st.step, st.t, st.deciders.len())?,
        }
    }
    eprintln!("elapsed: {:.3} s", elapsed.as_secs_f64());
    if let Some(path) = &a.trace {
        write_step_trace(&result, path)?;
    }
    Ok(())
}

fn write_step_trace(result: &DecodeOutput, path: &PathBuf) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(["step", "t", "alpha", "n_deciders", "kept", "merged"])?;
    for st in &result.trace {
        let (alpha, kept, merged) = match &st.merge {
            Some(m) => (sig9(m.alpha), m.kept.len().to_string(), m.merged.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            st.step.to_string(),
            st.t.to_string(),
            alpha,
            st.deciders.len().to_string(),
            kept,
            merged,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma list of methods; an empty list prints the header only.
    #[arg(long, default_value = "baseline,d3tom,d3tom-t,d3tom-t-rev,fastv,pdrop,visionzip")]
    pub methods: String,
    /// Comma list of retention percentages of the visual tokens.
    #[arg(long, default_value = DEFAULT_RETAIN)]
    pub retain: String,
    /// Write the CSV here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

pub fn flops(a: &FlopsArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let p = a.model.cost_params()?;
    let methods = split_list(&a.methods)
        .into_iter()
        .map(parse_method)
        .collect::<Result<Vec<_>, _>>()?;
    let retain = parse_f64_list(&a.retain, "retain percentage")?;
    for &r in &retain {
        retain_to_alpha(r)?;
    }
    let mut w = csv::Writer::from_writer(open_output(&a.output, out)?);
    w.write_record(["method", "retain_pct", "alpha_or_R", "l_star_or_K", "flops_mac", "flops_rel"])?;
    for &m in &methods {
        for &r in &retain {
            let rep = cost_report(&p, m, r / 100.0).map_err(|e| usage(e.to_string()))?;
            w.write_record([
                m.name().to_string(),
                sig9(r),
                sig9(rep.alpha),
                rep.layer.map(|l| l.to_string()).unwrap_or_default(),
                rep.flops_abs.to_string(),
                sig9(rep.flops_rel * 100.0),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// d3tom, d3tom-t or d3tom-t-rev.
    #[arg(long, default_value = "d3tom")]
    pub method: String,
    /// Comma list of merge layers.
    #[arg(long, default_value = "0,1,2,3,4,5,6,7")]
    pub l_star: String,
    /// Comma list of (mean) merge ratios.
    #[arg(long, default_value = "0.5,0.667,0.75,0.833,0.9")]
    pub alpha: String,
    /// Also time one toy-engine decode per cell (median of --repeat).
    #[arg(long)]
    pub measure: bool,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

pub fn sweep(a: &SweepArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let config = a.model.resolve()?;
    let method = runtime_method(&a.method)?;
    if method == Method::Baseline {
        return Err(usage("sweep needs a merging method"));
    }
    let layers = parse_usize_list(&a.l_star, "merge layer")?;
    let alphas = parse_f64_list(&a.alpha, "merge ratio")?;
    if layers.is_empty() || alphas.is_empty() {
        return Err(usage("empty sweep grid"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= config.n_layers) {
        return Err(usage(format!("merge layer {l} >= n_layers {}", config.n_layers)));
    }
    if a.measure && a.repeat == 0 {
        return Err(usage("--repeat must be at least 1"));
    }
    let schedules = alphas
        .iter()
        .map(|&al| schedule_for(method, al, None).map(Option::unwrap))
        .collect::<Result<Vec<_>, _>>()?;
    let engine = if a.measure {
        a.engine.check_size(&config)?;
        Some((init_weights(&config)?, Prompt::synthesize(&config)))
    } else {
        None
    };

    let p = d3tom_core::CostParams::from_config(&config);
    let base = baseline_flops(&p);
    let mut w = csv::Writer::from_writer(open_output(&a.output, out)?);
    let mut header = vec!["l_star", "alpha", "flops_mac", "flops_rel"];
    if a.measure {
        header.push("time_ms");
    }
    w.write_record(&header)?;
    for &l in &layers {
        let pl = p.with_merge_layer(l as u64);
        for (&al, s) in alphas.iter().zip(&schedules) {
            let f = d3tom_flops(&pl, s)?;
            let rel = if base == 0 { 0.0 } else { f as f64 / base as f64 * 100.0 };
            let mut rec = vec![l.to_string(), sig9(al), f.to_string(), sig9(rel)];
            if let Some((weights, prompt)) = &engine {
                let mut wl = weights.clone();
                wl.config.merge_layer = l;
                let mut times = Vec::with_capacity(a.repeat);
                for _ in 0..a.repeat {
                    times.push(a.engine.decode(&wl, prompt, Some(s))?.elapsed.as_secs_f64() * 1e3);
                }
                rec.push(sig9(median_ms(times)));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma list of runtime methods; baseline is always measured.
    #[arg(long, default_value = "baseline,d3tom")]
    pub methods: String,
    /// Comma list of retention percentages.
    #[arg(long, default_value = "10")]
    pub retain: String,
    /// Timed repeats per cell (at least 3).
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    /// Untimed runs before each cell.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

struct Timing {
    median: f64,
    min: f64,
}

fn time_decode(
    engine: &EngineArgs,
    w: &Weights,
    p: &Prompt,
    s: Option<&MergeSchedule>,
    warmup: usize,
    repeat: usize,
) -> anyhow::Result<Timing> {
    for _ in 0..warmup {
        engine.decode(w, p, s)?;
    }
    let mut times = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let t = Instant::now();
        engine.decode(w, p, s)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Timing {
        median: median_ms(times),
        min,
    })
}

pub fn bench(a: &BenchArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if a.repeat < 3 {
        return Err(usage("--repeat must be at least 3"));
    }
    let methods = split_list(&a.methods)
        .into_iter()
        .map(runtime_method)
        .collect::<Result<Vec<_>, _>>()?;
    let retain = parse_f64_list(&a.retain, "retain percentage")?;
    let mut cells = Vec::new();
    for &m in methods.iter().filter(|&&m| m != Method::Baseline) {
        for &r in &retain {
            let s = schedule_for(m, retain_to_alpha(r)?, None)?;
            cells.push((m, r, s));
        }
    }
    let (w, p) = build_model(&a.model, &a.engine)?;
    let base = time_decode(&a.engine, &w, &p, None, a.warmup, a.repeat)?;
    info!("baseline median {:.1} ms", base.median);

    let mut csv = csv::Writer::from_writer(open_output(&a.output, out)?);
    csv.write_record(["method", "retain_pct", "time_ms_median", "time_ms_min", "time_rel"])?;
    if methods.contains(&Method::Baseline) {
        csv.write_record(["baseline", "100", &sig9(base.median), &sig9(base.min), "100"])?;
    }
    for (m, r, s) in &cells {
        let t = time_decode(&a.engine, &w, &p, s.as_ref(), a.warmup, a.repeat)?;
        info!("{m} at {r}% median {:.1} ms", t.median);
        csv.write_record([
            m.name().to_string(),
            sig9(*r),
            sig9(t.median),
            sig9(t.min),
            sig9(t.median / base.median * 100.0),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Allow models wider than the toy engine limit.
    #[arg(long)]
    pub force: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// One row per visual token per merging step.
pub fn trace(a: &TraceArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let Some(schedule) = a.schedule.schedule()? else {
        return Err(usage("trace needs a merging method; baseline never scores"));
    };
    let engine = EngineArgs {
        kv_cache: false,
        cache_mode: CacheMode::Sum,
        force: a.force,
    };
    let (w, p) = build_model(&a.model, &engine)?;
    let result = run_decode(&w, &p, Some(&schedule))?;
    let mut csv = csv::Writer::from_writer(open_output(&a.output, out)?);
    csv.write_record(["step", "visual_index", "score", "kept_flag", "step_argmax"])?;
    for st in &result.trace {
        let Some(m) = &st.merge else { continue };
        let argmax = m
            .scores
            .iter()
            .enumerate()
            .fold(0, |best, (i, &s)| if s > m.scores[best] { i } else { best });
        let mut kept = vec![false; m.scores.len()];
        for &k in &m.kept {
            kept[k] = true;
        }
        for (i, &s) in m.scores.iter().enumerate() {
            csv.write_record([
                st.step.to_string(),
                i.to_string(),
                sig9(s as f64),
                u8::from(kept[i]).to_string(),
                argmax.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}
