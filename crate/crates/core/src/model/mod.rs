//! Small pre-norm decoder-only transformer.
//!
//! Each block computes `x + Attn(Norm1(x))` followed by `+ Mlp(Norm2(·))`,
//! with RMS normalization, causal multi-head attention, learned absolute
//! position embeddings and a GELU MLP. Linear layers have no bias. A "layer"
//! for importance scoring, quantization and pruning is one whole block.
//!
//! Checkpoints are tensor containers using the names
//! `blocks.{i}.{attn_q|attn_k|attn_v|attn_o|mlp_in|mlp_out|norm1|norm2}`,
//! `embed`, `pos_embed`, `head` and `final_norm`, with the config stored as
//! JSON under the metadata key `model_config`.

pub mod ops;
pub mod train;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::QuantPlan;
use crate::quant::{dequantize, read_quantized, write_quantized, WeightQuantizer};
use crate::rng::Rng;
use crate::tensor::{load_container, save_container, NamedTensorMap, Tensor};

pub const CONFIG_KEY: &str = "model_config";
pub const PLAN_KEY: &str = "quant_plan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            max_seq_len: 256,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be a small positive number".into()));
        }
        Ok(())
    }

    /// Parameters per block: four attention projections, two MLP matrices, two norms.
    pub fn block_parameter_count(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d * self.d_ff + 2 * d
    }

    /// Elements in the 2-D matrices of one block (what gets quantized).
    pub fn block_matrix_elements(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d * self.d_ff
    }

    /// Closed-form total: blocks, token and position embeddings, head, final norm.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        self.n_layers * self.block_parameter_count() + 2 * self.vocab_size * d + self.max_seq_len * d + d
    }
}

/// The 2-D weight matrices inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMatrix {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpIn,
    MlpOut,
}

impl BlockMatrix {
    pub const ALL: [BlockMatrix; 6] = [
        BlockMatrix::AttnQ,
        BlockMatrix::AttnK,
        BlockMatrix::AttnV,
        BlockMatrix::AttnO,
        BlockMatrix::MlpIn,
        BlockMatrix::MlpOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockMatrix::AttnQ => "attn_q",
            BlockMatrix::AttnK => "attn_k",
            BlockMatrix::AttnV => "attn_v",
            BlockMatrix::AttnO => "attn_o",
            BlockMatrix::MlpIn => "mlp_in",
            BlockMatrix::MlpOut => "mlp_out",
        }
    }

    /// `[out, in]`
    pub fn shape(self, c: &ModelConfig) -> [usize; 2] {
        match self {
            BlockMatrix::MlpIn => [c.d_ff, c.d_model],
            BlockMatrix::MlpOut => [c.d_model, c.d_ff],
            _ => [c.d_model, c.d_model],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_q: Vec<f32>,
    pub attn_k: Vec<f32>,
    pub attn_v: Vec<f32>,
    pub attn_o: Vec<f32>,
    pub mlp_in: Vec<f32>,
    pub mlp_out: Vec<f32>,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
}

impl Block {
    fn zeros(c: &ModelConfig) -> Self {
        let (d, f) = (c.d_model, c.d_ff);
        Block {
            attn_q: vec![0.0; d * d],
            attn_k: vec![0.0; d * d],
            attn_v: vec![0.0; d * d],
            attn_o: vec![0.0; d * d],
            mlp_in: vec![0.0; f * d],
            mlp_out: vec![0.0; d * f],
            norm1: vec![0.0; d],
            norm2: vec![0.0; d],
        }
    }

    pub fn matrix(&self, m: BlockMatrix) -> &[f32] {
        match m {
            BlockMatrix::AttnQ => &self.attn_q,
            BlockMatrix::AttnK => &self.attn_k,
            BlockMatrix::AttnV => &self.attn_v,
            BlockMatrix::AttnO => &self.attn_o,
            BlockMatrix::MlpIn => &self.mlp_in,
            BlockMatrix::MlpOut => &self.mlp_out,
        }
    }

    pub fn matrix_mut(&mut self, m: BlockMatrix) -> &mut Vec<f32> {
        match m {
            BlockMatrix::AttnQ => &mut self.attn_q,
            BlockMatrix::AttnK => &mut self.attn_k,
            BlockMatrix::AttnV => &mut self.attn_v,
            BlockMatrix::AttnO => &mut self.attn_o,
            BlockMatrix::MlpIn => &mut self.mlp_in,
            BlockMatrix::MlpOut => &mut self.mlp_out,
        }
    }

    fn params_mut(&mut self) -> [&mut Vec<f32>; 8] {
        [
            &mut self.attn_q,
            &mut self.attn_k,
            &mut self.attn_v,
            &mut self.attn_o,
            &mut self.mlp_in,
            &mut self.mlp_out,
            &mut self.norm1,
            &mut self.norm2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    pub embed: Vec<f32>,
    pub pos_embed: Vec<f32>,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f32>,
    pub head: Vec<f32>,
}

/// Residual stream entering and leaving one block, `[tokens, d_model]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub layer_index: usize,
    pub input_states: Tensor,
    pub output_states: Tensor,
}

impl TransformerModel {
    pub(crate) fn zeros(config: ModelConfig) -> Self {
        let (d, v) = (config.d_model, config.vocab_size);
        TransformerModel {
            embed: vec![0.0; v * d],
            pos_embed: vec![0.0; config.max_seq_len * d],
            blocks: (0..config.n_layers).map(|_| Block::zeros(&config)).collect(),
            final_norm: vec![0.0; d],
            head: vec![0.0; v * d],
            config,
        }
    }

    /// Random init from the in-repo RNG: matrices are N(0, 1/fan_in), the
    /// embeddings N(0, 1/d_model), norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut m = TransformerModel::zeros(config);
        let c = m.config.clone();
        let mut rng = Rng::new(seed);
        let mut fill = |buf: &mut [f32], fan_in: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            buf.iter_mut().for_each(|w| *w = (rng.next_normal() * std) as f32);
        };
        fill(&mut m.embed, c.d_model);
        fill(&mut m.pos_embed, c.d_model);
        for b in &mut m.blocks {
            for mat in BlockMatrix::ALL {
                fill(b.matrix_mut(mat), mat.shape(&c)[1]);
            }
            b.norm1.fill(1.0);
            b.norm2.fill(1.0);
        }
        m.final_norm.fill(1.0);
        fill(&mut m.head, c.d_model);
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All parameter buffers in a fixed order.
    pub(crate) fn params(&self) -> Vec<&Vec<f32>> {
        let mut out: Vec<&Vec<f32>> = vec![&self.embed, &self.pos_embed];
        for b in &self.blocks {
            out.extend([
                &b.attn_q, &b.attn_k, &b.attn_v, &b.attn_o, &b.mlp_in, &b.mlp_out, &b.norm1, &b.norm2,
            ]);
        }
        out.extend([&self.final_norm, &self.head]);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([&mut self.final_norm, &mut self.head]);
        out
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token {t} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn embed_tokens(&self, tokens: &[u32]) -> Vec<f32> {
        let d = self.config.d_model;
        let mut x = vec![0.0f32; tokens.len() * d];
        for (t, (&tok, xr)) in tokens.iter().zip(x.chunks_exact_mut(d)).enumerate() {
            let e = &self.embed[tok as usize * d..(tok as usize + 1) * d];
            let p = &self.pos_embed[t * d..(t + 1) * d];
            for ((xi, ei), pi) in xr.iter_mut().zip(e).zip(p) {
                *xi = ei + pi;
            }
        }
        x
    }

    pub(crate) fn run_block(&self, b: &Block, x: &mut [f32]) {
        let c = &self.config;
        let d = c.d_model;
        let (h, _) = ops::rmsnorm(x, &b.norm1, c.norm_eps);
        let q = ops::linear(&h, &b.attn_q, d, d);
        let k = ops::linear(&h, &b.attn_k, d, d);
        let v = ops::linear(&h, &b.attn_v, d, d);
        let att = ops::causal_attention_forward(&q, &k, &v, d, c.n_heads);
        let a = ops::linear(&att, &b.attn_o, d, d);
        x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);

        let (h2, _) = ops::rmsnorm(x, &b.norm2, c.norm_eps);
        let mut u = ops::linear(&h2, &b.mlp_in, d, c.d_ff);
        u.iter_mut().for_each(|v| *v = ops::gelu(*v));
        let m = ops::linear(&u, &b.mlp_out, c.d_ff, d);
        x.iter_mut().zip(&m).for_each(|(xi, mi)| *xi += mi);
    }

    /// Residual stream after the last block, plus optional per-block traces.
    fn hidden_states(&self, tokens: &[u32], capture: bool) -> Result<(Vec<f32>, Option<Vec<BlockTrace>>)> {
        self.check_tokens(tokens)?;
        let shape = vec![tokens.len(), self.config.d_model];
        let mut x = self.embed_tokens(tokens);
        let mut traces = capture.then(|| Vec::with_capacity(self.blocks.len()));
        for (i, b) in self.blocks.iter().enumerate() {
            let input = traces.as_ref().map(|_| x.clone());
            self.run_block(b, &mut x);
            if let (Some(tr), Some(input)) = (traces.as_mut(), input) {
                tr.push(BlockTrace {
                    layer_index: i,
                    input_states: Tensor::from_f32(shape.clone(), input)?,
                    output_states: Tensor::from_f32(shape.clone(), x.clone())?,
                });
            }
        }
        Ok((x, traces))
    }

    fn logits_from_hidden(&self, x: &[f32]) -> Vec<f32> {
        let c = &self.config;
        let (h, _) = ops::rmsnorm(x, &self.final_norm, c.norm_eps);
        ops::linear(&h, &self.head, c.d_model, c.vocab_size)
    }

    /// Logits `[tokens, vocab]` and, when `capture` is set, one trace per block.
    pub fn forward(&self, tokens: &[u32], capture: bool) -> Result<(Tensor, Option<Vec<BlockTrace>>)> {
        let (x, traces) = self.hidden_states(tokens, capture)?;
        let logits = self.logits_from_hidden(&x);
        Ok((Tensor::from_f32(vec![tokens.len(), self.config.vocab_size], logits)?, traces))
    }

    /// Per-block traces only, skipping the LM head.
    pub fn block_traces(&self, tokens: &[u32]) -> Result<Vec<BlockTrace>> {
        Ok(self.hidden_states(tokens, true)?.1.expect("capture requested"))
    }

    /// Summed next-token negative log-likelihood (nats) and position count.
    pub fn sequence_nll(&self, tokens: &[u32]) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            self.check_tokens(tokens)?;
            return Ok((0.0, 0));
        }
        let (x, _) = self.hidden_states(tokens, false)?;
        Ok(self.nll_from_hidden(&x, tokens))
    }

    /// Summed next-token NLL given the residual stream after the last block.
    pub(crate) fn nll_from_hidden(&self, x: &[f32], tokens: &[u32]) -> (f64, usize) {
        let logits = self.logits_from_hidden(x);
        let v = self.config.vocab_size;
        let mut total = 0.0f64;
        for (row, &target) in logits.chunks_exact(v).zip(&tokens[1..]) {
            total += log_sum_exp(row) - row[target as usize] as f64;
        }
        (total, tokens.len() - 1)
    }

    pub fn to_tensor_map(&self) -> NamedTensorMap {
        let c = &self.config;
        let (d, v) = (c.d_model, c.vocab_size);
        let t = |shape: Vec<usize>, data: &Vec<f32>| Tensor::from_f32(shape, data.clone()).expect("consistent shapes");
        let mut map = NamedTensorMap::new();
        map.insert("embed", t(vec![v, d], &self.embed));
        map.insert("pos_embed", t(vec![c.max_seq_len, d], &self.pos_embed));
        map.insert("final_norm", t(vec![d], &self.final_norm));
        map.insert("head", t(vec![v, d], &self.head));
        for (i, b) in self.blocks.iter().enumerate() {
            for m in BlockMatrix::ALL {
                map.insert(format!("blocks.{i}.{}", m.name()), t(m.shape(c).to_vec(), &b.matrix(m).to_vec()));
            }
            map.insert(format!("blocks.{i}.norm1"), t(vec![d], &b.norm1));
            map.insert(format!("blocks.{i}.norm2"), t(vec![d], &b.norm2));
        }
        map.metadata.insert(
            CONFIG_KEY.into(),
            serde_json::to_string(c).expect("config serializes"),
        );
        map
    }

    /// Rebuilds a model from a plain or quantized checkpoint. Quantized
    /// entries (`name.qweight` and friends) are dequantized to f32.
    pub fn from_tensor_map(map: &NamedTensorMap) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(
            map.metadata
                .get(CONFIG_KEY)
                .ok_or_else(|| Error::Format(format!("missing `{CONFIG_KEY}` metadata")))?,
        )
        .map_err(|e| Error::Format(format!("bad `{CONFIG_KEY}` metadata: {e}")))?;
        config.validate()?;
        let mut m = TransformerModel::zeros(config.clone());
        let c = &config;
        let (d, v) = (c.d_model, c.vocab_size);
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let tensor = match map.get(name) {
                Some(t) => t.clone(),
                None => match read_quantized(map, name) {
                    Some(q) => dequantize(&q?),
                    None => return Err(Error::Format(format!("checkpoint lacks tensor `{name}`"))),
                },
            };
            if tensor.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, config implies {shape:?}",
                    tensor.shape()
                )));
            }
            tensor.to_f32_vec()
        };
        m.embed = fetch("embed", &[v, d])?;
        m.pos_embed = fetch("pos_embed", &[c.max_seq_len, d])?;
        m.final_norm = fetch("final_norm", &[d])?;
        m.head = fetch("head", &[v, d])?;
        for (i, b) in m.blocks.iter_mut().enumerate() {
            for mat in BlockMatrix::ALL {
                *b.matrix_mut(mat) = fetch(&format!("blocks.{i}.{}", mat.name()), &mat.shape(c))?;
            }
            b.norm1 = fetch(&format!("blocks.{i}.norm1"), &[d])?;
            b.norm2 = fetch(&format!("blocks.{i}.norm2"), &[d])?;
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TransformerModel::from_tensor_map(&load_container(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_container(&self.to_tensor_map(), path)
    }
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&z| (z as f64 - m).exp()).sum();
    m + s.ln()
}

pub fn init_model(config: ModelConfig, seed: u64) -> Result<TransformerModel> {
    TransformerModel::init(config, seed)
}

fn check_plan(model: &TransformerModel, plan: &QuantPlan) -> Result<()> {
    let n = model.n_layers();
    if plan.bits_per_layer.len() != n {
        return Err(Error::PlanMismatch(format!(
            "plan covers {} layers, model has {n}",
            plan.bits_per_layer.len()
        )));
    }
    if let Some(f) = &plan.outlier_fraction_per_layer {
        if f.len() != n {
            return Err(Error::PlanMismatch(format!(
                "plan has {} outlier fractions for {n} layers",
                f.len()
            )));
        }
    }
    if let Some(&b) = plan.bits_per_layer.iter().find(|&&b| !matches!(b, 2 | 4 | 8 | 16)) {
        return Err(Error::PlanMismatch(format!("unsupported bit width {b}")));
    }
    if let Some(&p) = plan.pruned_layers.iter().find(|&&p| p >= n) {
        return Err(Error::PlanMismatch(format!("pruned layer {p} is out of range")));
    }
    Ok(())
}

/// Quantized form of every matrix of one block, or `None` at 16 bits.
fn quantize_block(
    model: &TransformerModel,
    layer: usize,
    bits: u8,
    outlier_fraction: f64,
    q: &dyn WeightQuantizer,
) -> Result<Option<Vec<crate::quant::QuantizedTensor>>> {
    if bits == 16 {
        return Ok(None);
    }
    let c = model.config();
    let b = &model.blocks[layer];
    BlockMatrix::ALL
        .par_iter()
        .map(|&m| {
            let t = Tensor::from_f32(m.shape(c).to_vec(), b.matrix(m).to_vec())?;
            q.quantize(&t, bits, outlier_fraction)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn layer_outlier_fraction(plan: &QuantPlan, layer: usize) -> f64 {
    plan.outlier_fraction_per_layer
        .as_ref()
        .map_or(0.0, |f| f[layer])
}

/// Block `layer` with every matrix replaced by `dequantize(quantize(w, bits))`.
pub(crate) fn fake_quant_block(
    model: &TransformerModel,
    layer: usize,
    bits: u8,
    outlier_fraction: f64,
    q: &dyn WeightQuantizer,
) -> Result<Block> {
    let mut b = model.blocks[layer].clone();
    if let Some(qs) = quantize_block(model, layer, bits, outlier_fraction, q)? {
        for (m, qt) in BlockMatrix::ALL.iter().zip(&qs) {
            *b.matrix_mut(*m) = dequantize(qt).to_f32_vec()?;
        }
    }
    Ok(b)
}

/// Replaces every matrix of block `i` with `dequantize(quantize(w, bits_i))`.
/// 16-bit layers, norms, embeddings and the head are left untouched. Pruned
/// layers in the plan are ignored here; see [`apply_plan`].
pub fn apply_fake_quant(
    model: &TransformerModel,
    plan: &QuantPlan,
    q: &dyn WeightQuantizer,
) -> Result<TransformerModel> {
    check_plan(model, plan)?;
    let mut out = model.clone();
    for (i, &bits) in plan.bits_per_layer.iter().enumerate() {
        out.blocks[i] = fake_quant_block(model, i, bits, layer_outlier_fraction(plan, i), q)?;
    }
    Ok(out)
}

/// Deletes the listed blocks and renumbers the rest in order.
pub fn prune_layers(model: &TransformerModel, remove: &[usize]) -> Result<TransformerModel> {
    let n = model.n_layers();
    if let Some(&i) = remove.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("cannot prune layer {i} of a {n}-layer model")));
    }
    let mut out = model.clone();
    out.blocks = model
        .blocks
        .iter()
        .enumerate()
        .filter(|(i, _)| !remove.contains(i))
        .map(|(_, b)| b.clone())
        .collect();
    if out.blocks.is_empty() {
        return Err(Error::invalid("pruning would remove every block"));
    }
    out.config.n_layers = out.blocks.len();
    Ok(out)
}

/// Fake-quantizes and then removes the plan's pruned layers.
pub fn apply_plan(model: &TransformerModel, plan: &QuantPlan, q: &dyn WeightQuantizer) -> Result<TransformerModel> {
    let quantized = apply_fake_quant(model, plan, q)?;
    prune_layers(&quantized, &plan.pruned_layers)
}

/// Builds the quantized checkpoint for `plan`: pruned blocks are dropped
/// and renumbered, sub-16-bit matrices are stored in packed form, everything
/// else verbatim. The plan itself is recorded under the `quant_plan` key.
pub fn export_quantized(
    model: &TransformerModel,
    plan: &QuantPlan,
    q: &dyn WeightQuantizer,
) -> Result<NamedTensorMap> {
    check_plan(model, plan)?;
    let kept: Vec<usize> = (0..model.n_layers())
        .filter(|i| !plan.pruned_layers.contains(i))
        .collect();
    let pruned = prune_layers(model, &plan.pruned_layers)?;
    let mut map = pruned.to_tensor_map();
    for (new_i, &old_i) in kept.iter().enumerate() {
        let bits = plan.bits_per_layer[old_i];
        if let Some(qs) = quantize_block(model, old_i, bits, layer_outlier_fraction(plan, old_i), q)? {
            for (m, qt) in BlockMatrix::ALL.iter().zip(&qs) {
                let name = format!("blocks.{new_i}.{}", m.name());
                map.tensors.remove(&name);
                write_quantized(&mut map, &name, qt)?;
            }
        }
    }
    map.metadata.insert(PLAN_KEY.into(), serde_json::to_string(plan)?);
    Ok(map)
}

/// `exp` of the mean next-token NLL over every position of every sequence.
/// Sequences are evaluated in parallel and reduced in input order.
pub fn perplexity(model: &TransformerModel, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("perplexity needs at least one sequence"));
    }
    let parts: Vec<(f64, usize)> = corpus
        .par_iter()
        .map(|s| model.sequence_nll(s))
        .collect::<Result<_>>()?;
    perplexity_from_parts(&parts)
}

/// `exp(sum nll / sum count)`, reducing per-sequence parts in order.
pub(crate) fn perplexity_from_parts(parts: &[(f64, usize)]) -> Result<f64> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for &(nll, n) in parts {
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("corpus has no next-token positions"));
    }
    let ppl = (total / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numeric(format!("perplexity is {ppl}")));
    }
    Ok(ppl)
}
