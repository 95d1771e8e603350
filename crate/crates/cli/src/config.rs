//! Layered run configuration: preset, then `key = value` file, then flags.

use std::fs;
use std::path::Path;

use clap::{Args, ValueEnum};
use d3tom_core::{CostParams, ModelConfig};

use crate::UsageError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    #[default]
    Toy,
    #[value(name = "lavida-8b")]
    Lavida8b,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            Preset::Lavida8b => ModelConfig::lavida_8b(),
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    /// Built-in parameter set the file and flags are layered on.
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// `key = value` file (`#` starts a comment).
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub visual_dim: Option<usize>,
    /// Visual token count |V|.
    #[arg(long)]
    pub visual: Option<usize>,
    /// Prompt token count |P|.
    #[arg(long)]
    pub prompt: Option<usize>,
    /// Output length |O|.
    #[arg(long)]
    pub output_len: Option<usize>,
    /// Denoising steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Merge layer l* (0-based); also the FastV pruning layer K.
    #[arg(long)]
    pub merge_layer: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

const KEYS: [&str; 13] = [
    "vocab_size",
    "d_model",
    "d_ff",
    "n_layers",
    "n_heads",
    "max_positions",
    "visual_dim",
    "n_visual",
    "n_prompt",
    "n_output",
    "n_steps",
    "merge_layer",
    "seed",
];

/// Parses `key = value` lines into (key, value) pairs, in file order.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, u64)>, UsageError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key = value", lineno + 1)))?;
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(UsageError(format!("config line {}: unknown key {key:?}", lineno + 1)));
        }
        let value = v
            .trim()
            .parse::<u64>()
            .map_err(|e| UsageError(format!("config line {}: {key}: {e}", lineno + 1)))?;
        out.push((key.to_string(), value));
    }
    Ok(out)
}

fn apply(c: &mut ModelConfig, key: &str, v: u64) {
    let u = v as usize;
    match key {
        "vocab_size" => c.vocab_size = u,
        "d_model" => c.d_model = u,
        "d_ff" => c.d_ff = u,
        "n_layers" => c.n_layers = u,
        "n_heads" => c.n_heads = u,
        "max_positions" => c.max_positions = u,
        "visual_dim" => c.visual_dim = u,
        "n_visual" => c.n_visual = u,
        "n_prompt" => c.n_prompt = u,
        "n_output" => c.n_output = u,
        "n_steps" => c.n_steps = u,
        "merge_layer" => c.merge_layer = u,
        "seed" => c.seed = v,
        _ => unreachable!("key validated by parser"),
    }
}

impl ModelArgs {
    pub fn with_preset(preset: Preset) -> Self {
        Self {
            preset,
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<ModelConfig, UsageError> {
        let mut c = self.preset.config();
        let mut max_positions_set = false;
        if let Some(path) = &self.config {
            for (k, v) in load_file(path)? {
                max_positions_set |= k == "max_positions";
                apply(&mut c, &k, v);
            }
        }
        let flags: [(&str, Option<u64>); 13] = [
            ("vocab_size", self.vocab_size.map(|v| v as u64)),
            ("d_model", self.d_model.map(|v| v as u64)),
            ("d_ff", self.d_ff.map(|v| v as u64)),
            ("n_layers", self.layers.map(|v| v as u64)),
            ("n_heads", self.heads.map(|v| v as u64)),
            ("max_positions", self.max_positions.map(|v| v as u64)),
            ("visual_dim", self.visual_dim.map(|v| v as u64)),
            ("n_visual", self.visual.map(|v| v as u64)),
            ("n_prompt", self.prompt.map(|v| v as u64)),
            ("n_output", self.output_len.map(|v| v as u64)),
            ("n_steps", self.steps.map(|v| v as u64)),
            ("merge_layer", self.merge_layer.map(|v| v as u64)),
            ("seed", self.seed),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                max_positions_set |= k == "max_positions";
                apply(&mut c, k, v);
            }
        }
        if !max_positions_set {
            c.max_positions = c.max_positions.max(c.seq_len());
        }
        c.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(c)
    }

    pub fn cost_params(&self) -> Result<CostParams, UsageError> {
        Ok(CostParams::from_config(&self.resolve()?))
    }
}

fn load_file(path: &Path) -> Result<Vec<(String, u64)>, UsageError> {
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    parse_config_text(&text)
}
