//! Seeded bidirectional transformer used as the decoding backbone.
//!
//! Pre-norm blocks: multi-head self-attention followed by a gated FFN
//! (`down(silu(x·W_gate) ⊙ x·W_up)`). Sinusoidal position codes are added to
//! the query/key inputs of every layer from each row's *original* index, so
//! rows can be dropped between layers without re-encoding the survivors.

use std::io::{Read, Write};

use crate::diffusion::SequenceState;
use crate::error::{Error, Result};
use crate::numkernel::{matmul, matmul_bt, rms_norm, silu, softmax_slice, Matrix};

const NORM_EPS: f32 = 1e-6;

/// Architecture, sequence and schedule parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    /// Width of the synthetic image features fed to the visual projector.
    pub visual_dim: usize,
    pub n_visual: usize,
    pub n_prompt: usize,
    pub n_output: usize,
    pub n_steps: usize,
    /// 0-based layer after whose attention sub-block merging happens.
    pub merge_layer: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        Self {
            vocab_size: 512,
            d_model: 256,
            d_ff: 768,
            n_layers: 8,
            n_heads: 4,
            max_positions: 2048,
            visual_dim: 64,
            n_visual: 1024,
            n_prompt: 64,
            n_output: 64,
            n_steps: 32,
            merge_layer: 3,
            seed: 42,
        }
    }

    /// LaViDa/LLaDA-8B sized parameters. Only meant for the cost model.
    pub fn lavida_8b() -> Self {
        Self {
            vocab_size: 126_464,
            d_model: 4096,
            d_ff: 12_288,
            n_layers: 32,
            n_heads: 32,
            max_positions: 4096,
            visual_dim: 1152,
            n_visual: 1000,
            n_prompt: 64,
            n_output: 64,
            n_steps: 32,
            merge_layer: 3,
            seed: 42,
        }
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.n_visual + self.n_prompt + self.n_output
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Row range of the visual segment in the full sequence.
    #[inline]
    pub fn visual_range(&self) -> std::ops::Range<usize> {
        0..self.n_visual
    }

    #[inline]
    pub fn output_offset(&self) -> usize {
        self.n_visual + self.n_prompt
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.merge_layer >= self.n_layers {
            return bad(format!(
                "merge_layer ({}) must be < n_layers ({})",
                self.merge_layer, self.n_layers
            ));
        }
        if self.n_steps == 0 {
            return bad("n_steps must be >= 1".into());
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.visual_dim == 0 {
            return bad("vocab_size, d_ff and visual_dim must be positive".into());
        }
        if self.n_output == 0 {
            return bad("n_output must be >= 1".into());
        }
        if self.vocab_size > u32::MAX as usize {
            return bad("vocab_size does not fit a u32 token id".into());
        }
        if self.seq_len() > self.max_positions {
            return bad(format!(
                "sequence length {} exceeds max_positions {}",
                self.seq_len(),
                self.max_positions
            ));
        }
        Ok(())
    }
}

/// SplitMix64 (Steele, Lea, Flood 2014).
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    pub fn next_uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_unit()
    }

    pub fn next_below(&mut self, n: u64) -> u64 {
        // Lemire-style multiply-shift; bias is irrelevant at these sizes.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Independent stream for `(seed, ordinal)`.
    pub fn keyed(seed: u64, ordinal: u64) -> Self {
        let mut k = SplitMix64::new(seed ^ ordinal.wrapping_mul(0xD1B5_4A32_D192_ED03));
        SplitMix64::new(k.next_u64())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    pub token_embedding: Matrix,
    /// Embedding row used for `[MASK]` output slots.
    pub mask_embedding: Matrix,
    pub visual_projector: Matrix,
    pub output_head: Matrix,
    /// Sinusoidal table, regenerated on load and never serialized.
    positions: Matrix,
}

const INPUT_STREAM_VISUAL: u64 = u64::MAX;
const INPUT_STREAM_PROMPT: u64 = u64::MAX - 1;

/// Shapes of every stored tensor, in declaration (and file) order.
fn tensor_shapes(c: &ModelConfig) -> Vec<(usize, usize)> {
    let (d, m) = (c.d_model, c.d_ff);
    let mut shapes = Vec::with_capacity(c.n_layers * 7 + 4);
    for _ in 0..c.n_layers {
        shapes.extend([(d, d), (d, d), (d, d), (d, d), (d, m), (d, m), (m, d)]);
    }
    shapes.extend([
        (c.vocab_size, d),
        (1, d),
        (c.visual_dim, d),
        (d, c.vocab_size),
    ]);
    shapes
}

fn sinusoidal_table(max_positions: usize, d: usize) -> Matrix {
    Matrix::from_fn(max_positions, d, |pos, i| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    })
}

impl Weights {
    fn from_tensors(config: ModelConfig, mut tensors: Vec<Matrix>) -> Self {
        let output_head = tensors.pop().expect("output head");
        let visual_projector = tensors.pop().expect("projector");
        let mask_embedding = tensors.pop().expect("mask embedding");
        let token_embedding = tensors.pop().expect("token embedding");
        let mut it = tensors.into_iter();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: it.next().expect("wq"),
                wk: it.next().expect("wk"),
                wv: it.next().expect("wv"),
                wo: it.next().expect("wo"),
                w_up: it.next().expect("w_up"),
                w_gate: it.next().expect("w_gate"),
                w_down: it.next().expect("w_down"),
            })
            .collect();
        let positions = sinusoidal_table(config.max_positions, config.d_model);
        Self {
            config,
            layers,
            token_embedding,
            mask_embedding,
            visual_projector,
            output_head,
            positions,
        }
    }

    /// All-zero weights. Attention in such a model is uniform.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = tensor_shapes(config)
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        Ok(Self::from_tensors(config.clone(), tensors))
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(self.layers.len() * 7 + 4);
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_gate, &l.w_down]);
        }
        out.extend([
            &self.token_embedding,
            &self.mask_embedding,
            &self.visual_projector,
            &self.output_head,
        ]);
        out
    }

    pub fn position_table(&self) -> &Matrix {
        &self.positions
    }

    /// Writes the `D3TM` v1 weight file.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"D3TM")?;
        w.write_all(&1u32.to_le_bytes())?;
        for v in config_words(&self.config) {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in self.tensors() {
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"D3TM" {
            return Err(Error::WeightFormat(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != 1 {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let mut words = [0u64; CONFIG_WORDS];
        for v in words.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = u64::from_le_bytes(b);
        }
        let config = config_from_words(&words);
        config.validate()?;
        let mut tensors = Vec::new();
        for (rows, cols) in tensor_shapes(&config) {
            let mut bytes = vec![0u8; rows * cols * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Matrix::new(rows, cols, data)?);
        }
        Ok(Self::from_tensors(config, tensors))
    }
}

const CONFIG_WORDS: usize = 13;

fn config_words(c: &ModelConfig) -> [u64; CONFIG_WORDS] {
    [
        c.vocab_size as u64,
        c.d_model as u64,
        c.d_ff as u64,
        c.n_layers as u64,
        c.n_heads as u64,
        c.max_positions as u64,
        c.visual_dim as u64,
        c.n_visual as u64,
        c.n_prompt as u64,
        c.n_output as u64,
        c.n_steps as u64,
        c.merge_layer as u64,
        c.seed,
    ]
}

fn config_from_words(w: &[u64; CONFIG_WORDS]) -> ModelConfig {
    ModelConfig {
        vocab_size: w[0] as usize,
        d_model: w[1] as usize,
        d_ff: w[2] as usize,
        n_layers: w[3] as usize,
        n_heads: w[4] as usize,
        max_positions: w[5] as usize,
        visual_dim: w[6] as usize,
        n_visual: w[7] as usize,
        n_prompt: w[8] as usize,
        n_output: w[9] as usize,
        n_steps: w[10] as usize,
        merge_layer: w[11] as usize,
        seed: w[12],
    }
}

/// Fills every tensor from its own SplitMix64 stream, uniform in ±1/√d.
pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let bound = 1.0 / (config.d_model as f32).sqrt();
    let tensors = tensor_shapes(config)
        .into_iter()
        .enumerate()
        .map(|(ordinal, (r, c))| {
            let mut rng = SplitMix64::keyed(config.seed, ordinal as u64);
            Matrix::from_fn(r, c, |_, _| rng.next_uniform(-bound, bound))
        })
        .collect();
    Ok(Weights::from_tensors(config.clone(), tensors))
}

/// The conditioning inputs: a synthetic image feature grid and prompt ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub visual_features: Matrix,
    pub prompt_ids: Vec<u32>,
}

impl Prompt {
    pub fn synthesize(config: &ModelConfig) -> Self {
        let mut rng = SplitMix64::keyed(config.seed, INPUT_STREAM_VISUAL);
        let visual_features =
            Matrix::from_fn(config.n_visual, config.visual_dim, |_, _| rng.next_uniform(-1.0, 1.0));
        let mut rng = SplitMix64::keyed(config.seed, INPUT_STREAM_PROMPT);
        let prompt_ids = (0..config.n_prompt)
            .map(|_| rng.next_below(config.vocab_size as u64) as u32)
            .collect();
        Self {
            visual_features,
            prompt_ids,
        }
    }
}

/// Result of one attention sub-block.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// Post-attention (post-residual) hidden states.
    pub hidden: Matrix,
    /// Head-averaged post-softmax attention, if requested.
    pub attn: Option<Matrix>,
}

/// Query/key/value projections for one layer.
pub struct Projections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Receives `(post-attention hidden, head-averaged attention)` at the merge
/// layer and returns the new hidden rows plus the indices (into the incoming
/// rows, strictly increasing) of the rows that survive.
pub type MergeHook<'a> = &'a mut dyn FnMut(&Matrix, &Matrix) -> Result<(Matrix, Vec<usize>)>;

impl Weights {
    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        let max = self.config.max_positions;
        match positions.iter().find(|&&p| p >= max) {
            Some(&position) => Err(Error::PositionOutOfRange { position, max }),
            None => Ok(()),
        }
    }

    /// Normalised input plus position codes, and plain normalised input.
    fn attention_inputs(&self, h: &Matrix, positions: &[usize]) -> Result<(Matrix, Matrix)> {
        if h.rows() != positions.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} hidden rows but {} positions",
                h.rows(),
                positions.len()
            )));
        }
        if h.cols() != self.config.d_model {
            return Err(Error::DimensionMismatch(format!(
                "hidden width {} != d_model {}",
                h.cols(),
                self.config.d_model
            )));
        }
        self.check_positions(positions)?;
        let x = rms_norm(h, NORM_EPS);
        let mut xp = x.clone();
        for (r, &p) in positions.iter().enumerate() {
            for (a, &b) in xp.row_mut(r).iter_mut().zip(self.positions.row(p)) {
                *a += b;
            }
        }
        Ok((xp, x))
    }

    pub fn project_qkv(&self, h: &Matrix, layer: usize, positions: &[usize]) -> Result<Projections> {
        let lw = self.layer(layer)?;
        let (xp, x) = self.attention_inputs(h, positions)?;
        Ok(Projections {
            q: matmul(&xp, &lw.wq)?,
            k: matmul(&xp, &lw.wk)?,
            v: matmul(&x, &lw.wv)?,
        })
    }

    fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers.get(layer).ok_or_else(|| {
            Error::InvalidInput(format!("layer {layer} >= n_layers {}", self.layers.len()))
        })
    }

    /// Multi-head attention of `q` rows over `k`/`v` rows. Returns the
    /// concatenated head contexts and, if asked, the head-averaged weights.
    pub fn attend(&self, q: &Matrix, k: &Matrix, v: &Matrix, want_attn: bool) -> Result<(Matrix, Option<Matrix>)> {
        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut ctx = Matrix::zeros(q.rows(), self.config.d_model);
        let mut avg = want_attn.then(|| Matrix::zeros(q.rows(), k.rows()));
        let inv_heads = 1.0 / heads as f32;
        for head in 0..heads {
            let qh = q.column_block(head * hd, hd);
            let kh = k.column_block(head * hd, hd);
            let vh = v.column_block(head * hd, hd);
            let mut p = matmul_bt(&qh, &kh)?;
            let cols = p.cols();
            for r in 0..p.rows() {
                softmax_slice(p.row_mut(r), scale);
            }
            if let Some(avg) = avg.as_mut() {
                for (a, &w) in avg.data_mut().iter_mut().zip(p.data()) {
                    *a += w * inv_heads;
                }
            }
            debug_assert_eq!(cols, vh.rows());
            let oh = matmul(&p, &vh)?;
            for r in 0..oh.rows() {
                ctx.row_mut(r)[head * hd..(head + 1) * hd].copy_from_slice(oh.row(r));
            }
        }
        Ok((ctx, avg))
    }

    /// `h + ctx · W_O`.
    pub fn attention_residual(&self, h: &Matrix, ctx: &Matrix, layer: usize) -> Result<Matrix> {
        let mut out = matmul(ctx, &self.layer(layer)?.wo)?;
        out.add_assign(h)?;
        Ok(out)
    }

    /// Pre-norm attention sub-block of `layer`.
    pub fn attention_block(&self, h: &Matrix, layer: usize, positions: &[usize], want_attn: bool) -> Result<AttentionOutput> {
        let p = self.project_qkv(h, layer, positions)?;
        let (ctx, attn) = self.attend(&p.q, &p.k, &p.v, want_attn)?;
        Ok(AttentionOutput {
            hidden: self.attention_residual(h, &ctx, layer)?,
            attn,
        })
    }

    /// Pre-norm gated FFN sub-block of `layer`.
    pub fn ffn_block(&self, h: &Matrix, layer: usize) -> Result<Matrix> {
        let lw = self.layer(layer)?;
        let x = rms_norm(h, NORM_EPS);
        let mut gate = matmul(&x, &lw.w_gate)?;
        let up = matmul(&x, &lw.w_up)?;
        for (g, &u) in gate.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        let mut out = matmul(&gate, &lw.w_down)?;
        out.add_assign(h)?;
        Ok(out)
    }

    /// One full layer; `positions` are the original indices of the rows.
    pub fn forward_layer(&self, h: &Matrix, layer: usize, positions: &[usize], want_attn: bool) -> Result<(Matrix, Option<Matrix>)> {
        let a = self.attention_block(h, layer, positions, want_attn)?;
        Ok((self.ffn_block(&a.hidden, layer)?, a.attn))
    }

    /// Embeds `Concat(V, P, X)` for the given state.
    pub fn embed(&self, prompt: &Prompt, state: &SequenceState) -> Result<Matrix> {
        let c = &self.config;
        if prompt.visual_features.rows() != c.n_visual || prompt.prompt_ids.len() != c.n_prompt {
            return Err(Error::DimensionMismatch("prompt does not match config".into()));
        }
        if state.output_tokens.len() != c.n_output {
            return Err(Error::DimensionMismatch("state does not match config".into()));
        }
        let visual = matmul(&prompt.visual_features, &self.visual_projector)?;
        let mut h = Matrix::zeros(c.seq_len(), c.d_model);
        for r in 0..c.n_visual {
            h.row_mut(r).copy_from_slice(visual.row(r));
        }
        for (i, &id) in prompt.prompt_ids.iter().enumerate() {
            h.row_mut(c.n_visual + i)
                .copy_from_slice(self.token_row(id)?);
        }
        for (i, tok) in state.output_tokens.iter().enumerate() {
            let row = match tok {
                Some(id) => self.token_row(*id)?,
                None => self.mask_embedding.row(0),
            };
            h.row_mut(c.output_offset() + i).copy_from_slice(row);
        }
        Ok(h)
    }

    pub(crate) fn token_row(&self, id: u32) -> Result<&[f32]> {
        if id as usize >= self.config.vocab_size {
            return Err(Error::InvalidInput(format!("token id {id} outside vocab")));
        }
        Ok(self.token_embedding.row(id as usize))
    }

    /// Final norm and output head.
    pub fn logits(&self, h: &Matrix) -> Result<Matrix> {
        matmul(&rms_norm(h, NORM_EPS), &self.output_head)
    }

    /// Full forward over the embedded state. The hook, if any, runs once
    /// between the attention and FFN sub-blocks of `merge_layer`. Returns
    /// logits for every output row.
    pub fn forward_full(&self, prompt: &Prompt, state: &SequenceState, hook: Option<MergeHook<'_>>) -> Result<Matrix> {
        let pass = self.forward_hidden(prompt, state, hook)?;
        self.logits(&pass.output_hidden(&self.config))
    }

    /// [`forward_full`](Self::forward_full) without the output head.
    pub fn forward_hidden(&self, prompt: &Prompt, state: &SequenceState, mut hook: Option<MergeHook<'_>>) -> Result<ForwardPass> {
        let mut h = self.embed(prompt, state)?;
        let mut positions = state.positions.clone();
        if positions.len() != h.rows() {
            return Err(Error::DimensionMismatch("state positions vs sequence length".into()));
        }
        let mut rows_per_layer = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            rows_per_layer.push(h.rows());
            let at_merge = layer == self.config.merge_layer && hook.is_some();
            let a = self.attention_block(&h, layer, &positions, at_merge)?;
            let mut hidden = a.hidden;
            if at_merge {
                let f = hook.take().expect("hook present");
                let attn = a.attn.expect("attention requested");
                let (merged, surviving) = f(&hidden, &attn)?;
                check_surviving(
                    &surviving,
                    hidden.rows(),
                    merged.rows(),
                    &positions,
                    self.config.output_offset(),
                    self.config.n_output,
                )?;
                positions = surviving.iter().map(|&i| positions[i]).collect();
                hidden = merged;
            }
            h = self.ffn_block(&hidden, layer)?;
        }
        Ok(ForwardPass {
            hidden: h,
            positions,
            rows_per_layer,
        })
    }
}

/// Final hidden states of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub hidden: Matrix,
    /// Original position of each surviving row.
    pub positions: Vec<usize>,
    /// Live row count entering each layer.
    pub rows_per_layer: Vec<usize>,
}

impl ForwardPass {
    pub fn output_hidden(&self, config: &ModelConfig) -> Matrix {
        self.hidden.select_rows(&output_rows(&self.positions, config.output_offset()))
    }
}

fn output_rows(positions: &[usize], output_offset: usize) -> Vec<usize> {
    positions
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= output_offset)
        .map(|(i, _)| i)
        .collect()
}

fn check_surviving(
    surviving: &[usize],
    incoming: usize,
    returned: usize,
    positions: &[usize],
    output_offset: usize,
    n_output: usize,
) -> Result<()> {
    if surviving.len() != returned {
        return Err(Error::Contract(format!(
            "merge hook returned {returned} rows but {} surviving indices",
            surviving.len()
        )));
    }
    if surviving.windows(2).any(|w| w[0] >= w[1]) || surviving.last().is_some_and(|&i| i >= incoming) {
        return Err(Error::Contract("surviving indices must be strictly increasing and in range".into()));
    }
    let outputs = surviving.iter().filter(|&&i| positions[i] >= output_offset).count();
    if outputs != n_output {
        return Err(Error::Contract("merge hook removed output rows".into()));
    }
    Ok(())
}
