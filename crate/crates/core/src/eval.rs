//! Perplexity evaluation of plans, ordering sweeps and the
//! quantize-versus-prune comparison.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::model::{apply_plan, fake_quant_block, perplexity, perplexity_from_parts, Block, TransformerModel};
use crate::planner::{
    plan_memory, pruning_plan, resolve_order, sequential_top_order, two_level_plan, OrderingName, QuantPlan,
};
use crate::quant::WeightQuantizer;

/// Perplexity ratio treated as "keeping 90% of the high-bit quality".
pub const DEFAULT_RETENTION_FACTOR: f64 = 10.0 / 9.0;

/// `exp(-(ln ppl - ln baseline))`, clamped to at most 1.
pub fn retention(ppl: f64, baseline: f64) -> f64 {
    (-(ppl.ln() - baseline.ln())).exp().min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub ordering: String,
    pub avg_bits: f64,
    pub n_low_layers: usize,
}

impl From<&QuantPlan> for PlanSummary {
    fn from(p: &QuantPlan) -> Self {
        PlanSummary { ordering: p.ordering_name.to_string(), avg_bits: p.avg_bits, n_low_layers: p.n_low_layers() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plan: Option<PlanSummary>,
    pub perplexity: f64,
    pub baseline_perplexity: Option<f64>,
    pub retention: Option<f64>,
    pub n_tokens: usize,
    pub runtime_seconds: f64,
}

/// Perplexity of `model` on `batch`, optionally against a baseline value.
pub fn evaluate(
    model: &TransformerModel,
    plan: Option<&QuantPlan>,
    batch: &TokenBatch,
    baseline_perplexity: Option<f64>,
) -> Result<EvalReport> {
    let start = Instant::now();
    let ppl = perplexity(model, &batch.sequences)?;
    Ok(EvalReport {
        plan: plan.map(PlanSummary::from),
        perplexity: ppl,
        baseline_perplexity,
        retention: baseline_perplexity.map(|b| retention(ppl, b)),
        n_tokens: batch.n_tokens(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Bits per layer, pruned layers, outlier fraction bits.
type PlanKey = (Vec<u8>, Vec<usize>, Vec<u64>);

/// Evaluates plans, reusing the result for plans with identical layer
/// assignments.
pub struct PlanEvaluator<'a> {
    model: &'a TransformerModel,
    quantizer: &'a dyn WeightQuantizer,
    batch: &'a TokenBatch,
    cache: HashMap<PlanKey, f64>,
}

impl<'a> PlanEvaluator<'a> {
    pub fn new(model: &'a TransformerModel, quantizer: &'a dyn WeightQuantizer, batch: &'a TokenBatch) -> Self {
        PlanEvaluator { model, quantizer, batch, cache: HashMap::new() }
    }

    pub fn perplexity(&mut self, plan: &QuantPlan) -> Result<f64> {
        let fractions = plan
            .outlier_fraction_per_layer
            .as_ref()
            .map(|f| f.iter().map(|x| x.to_bits()).collect())
            .unwrap_or_default();
        let key = (plan.bits_per_layer.clone(), plan.pruned_layers.clone(), fractions);
        if let Some(&p) = self.cache.get(&key) {
            return Ok(p);
        }
        let ppl = perplexity(&apply_plan(self.model, plan, self.quantizer)?, &self.batch.sequences)?;
        self.cache.insert(key, ppl);
        Ok(ppl)
    }

    /// Evaluates every plain quantization plan in `plans` (no pruning, no
    /// outliers) in one pass that shares work between plans: plans are
    /// visited in lexicographic order of their bit vectors and the residual
    /// stream after each layer is kept, so only layers after the first
    /// difference from the previous plan are recomputed. Results are
    /// bitwise equal to evaluating each plan on its own.
    pub fn prefetch(&mut self, plans: &[QuantPlan]) -> Result<()> {
        let mut todo: Vec<Vec<u8>> = plans
            .iter()
            .filter(|p| p.pruned_layers.is_empty() && p.outlier_fraction_per_layer.is_none())
            .map(|p| p.bits_per_layer.clone())
            .filter(|b| !self.cache.contains_key(&(b.clone(), Vec::new(), Vec::new())))
            .collect();
        todo.sort();
        todo.dedup();
        if todo.is_empty() {
            return Ok(());
        }
        let n = self.model.n_layers();
        if let Some(b) = todo.iter().find(|b| b.len() != n) {
            return Err(Error::PlanMismatch(format!("plan covers {} layers, model has {n}", b.len())));
        }
        let seqs: Vec<&Vec<u32>> = self.batch.sequences.iter().filter(|s| s.len() >= 2).collect();
        for s in &self.batch.sequences {
            self.model.check_tokens(s)?;
        }
        if seqs.is_empty() {
            // defer to the ordinary path for its error
            return perplexity(self.model, &self.batch.sequences).map(|_| ());
        }
        let embedded: Vec<Vec<f32>> = seqs.par_iter().map(|s| self.model.embed_tokens(s)).collect();
        let mut blocks: HashMap<(usize, u8), Block> = HashMap::new();
        let mut states: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
        let mut prev: Option<&Vec<u8>> = None;
        for bits in &todo {
            let start = prev.map_or(0, |p| p.iter().zip(bits).take_while(|(a, b)| a == b).count());
            for layer in start..n {
                let block = match blocks.entry((layer, bits[layer])) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => e.insert(fake_quant_block(self.model, layer, bits[layer], 0.0, self.quantizer)?),
                };
                let block = &*block;
                let input = if layer == 0 { &embedded } else { &states[layer - 1] };
                let next: Vec<Vec<f32>> = input
                    .par_iter()
                    .map(|x| {
                        let mut x = x.clone();
                        self.model.run_block(block, &mut x);
                        x
                    })
                    .collect();
                states[layer] = next;
            }
            let parts: Vec<(f64, usize)> = states[n - 1]
                .par_iter()
                .zip(&seqs)
                .map(|(x, s)| self.model.nll_from_hidden(x, s))
                .collect();
            self.cache.insert((bits.clone(), Vec::new(), Vec::new()), perplexity_from_parts(&parts)?);
            prev = Some(bits);
        }
        Ok(())
    }

    pub fn evaluations(&self) -> usize {
        self.cache.len()
    }
}

/// One curve of a sweep. Random orderings are averaged over their seeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepOrdering {
    Fixed(OrderingName),
    Random { seeds: Vec<u64> },
}

impl SweepOrdering {
    pub fn label(&self) -> String {
        match self {
            SweepOrdering::Fixed(n) => n.to_string(),
            SweepOrdering::Random { .. } => "random".into(),
        }
    }

    fn names(&self) -> Vec<OrderingName> {
        match self {
            SweepOrdering::Fixed(n) => vec![*n],
            SweepOrdering::Random { seeds } => seeds.iter().map(|&s| OrderingName::Random(s)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub orderings: Vec<SweepOrdering>,
    pub high_bits: u8,
    pub low_bits: u8,
    pub retention_factor: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            orderings: vec![
                SweepOrdering::Fixed(OrderingName::Lim),
                SweepOrdering::Fixed(OrderingName::Zd),
                SweepOrdering::Fixed(OrderingName::ReverseLim),
                SweepOrdering::Random { seeds: vec![0, 1, 2] },
            ],
            high_bits: 4,
            low_bits: 2,
            retention_factor: DEFAULT_RETENTION_FACTOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ordering: String,
    pub n_low: usize,
    pub avg_bits: f64,
    pub idealized_bytes: f64,
    pub exact_bytes: u64,
    /// Mean over seeds for random orderings.
    pub perplexity: f64,
    /// Population standard deviation over seeds; zero for fixed orderings.
    pub stddev: f64,
    /// Sorted low-precision layers, one set per seed.
    pub low_layers: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub ordering: String,
    pub n_low: usize,
    pub avg_bits: f64,
    pub avg_bits_reduction: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub baseline_perplexity: f64,
    pub retention_factor: f64,
    pub retention_points: Vec<RetentionPoint>,
}

pub const SWEEP_CSV_HEADER: &str = "ordering,n_low,avg_bits,idealized_bytes,exact_bytes,perplexity,stddev";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.ordering, r.n_low, r.avg_bits, r.idealized_bytes, r.exact_bytes, r.perplexity, r.stddev
            );
        }
        out
    }

    pub fn curve(&self, ordering: &str) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.ordering == ordering).collect()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    // identical values (shared endpoints) must come back unchanged
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluates the two-level plan with `n_low` layers at low precision for
/// every ordering and every `n_low` in `0..=N`.
pub fn sweep(
    model: &TransformerModel,
    report: Option<&ImportanceReport>,
    batch: &TokenBatch,
    quantizer: &dyn WeightQuantizer,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    let n = model.n_layers();
    let config = model.config();
    let mut eval = PlanEvaluator::new(model, quantizer, batch);
    let mut curves = Vec::with_capacity(cfg.orderings.len());
    for ord in &cfg.orderings {
        let names = ord.names();
        if names.is_empty() {
            return Err(Error::invalid("random ordering needs at least one seed"));
        }
        let orders: Vec<Vec<usize>> = names
            .iter()
            .map(|&name| resolve_order(name, report, n))
            .collect::<Result<_>>()?;
        curves.push((ord, names, orders));
    }
    let mut all = Vec::new();
    for (_, names, orders) in &curves {
        for (&name, order) in names.iter().zip(orders) {
            for k in 0..=n {
                all.push(two_level_plan(order, name, k, cfg.high_bits, cfg.low_bits)?);
            }
        }
    }
    eval.prefetch(&all)?;

    let mut rows = Vec::new();
    for (ord, names, orders) in &curves {
        for n_low in 0..=n {
            let mut ppls = Vec::with_capacity(names.len());
            let mut low_layers = Vec::with_capacity(names.len());
            let mut first = None;
            for (&name, order) in names.iter().zip(orders.iter()) {
                let plan = two_level_plan(order, name, n - n_low, cfg.high_bits, cfg.low_bits)?;
                ppls.push(eval.perplexity(&plan)?);
                let mut low = order[n - n_low..].to_vec();
                low.sort_unstable();
                low_layers.push(low);
                first.get_or_insert(plan);
            }
            let plan = first.expect("at least one seed");
            let mem = plan_memory(&plan, config, quantizer)?;
            let (mean, std) = mean_std(&ppls);
            rows.push(SweepRow {
                ordering: ord.label(),
                n_low,
                avg_bits: plan.avg_bits,
                idealized_bytes: mem.idealized_bytes,
                exact_bytes: mem.exact_bytes,
                perplexity: mean,
                stddev: std,
                low_layers,
            });
        }
    }
    rows.sort_by(|a, b| a.ordering.cmp(&b.ordering).then(a.n_low.cmp(&b.n_low)));

    let order0 = (0..n).collect::<Vec<_>>();
    let baseline_plan = two_level_plan(&order0, OrderingName::Lim, n, cfg.high_bits, cfg.low_bits)?;
    let baseline = eval.perplexity(&baseline_plan)?;
    let limit = cfg.retention_factor * baseline;
    let mut labels: Vec<String> = rows.iter().map(|r| r.ordering.clone()).collect();
    labels.dedup();
    let retention_points = labels
        .iter()
        .filter_map(|label| {
            rows.iter()
                .filter(|r| &r.ordering == label && r.perplexity <= limit)
                .max_by_key(|r| r.n_low)
                .map(|r| RetentionPoint {
                    ordering: label.clone(),
                    n_low: r.n_low,
                    avg_bits: r.avg_bits,
                    avg_bits_reduction: cfg.high_bits as f64 - r.avg_bits,
                    perplexity: r.perplexity,
                })
        })
        .collect();
    Ok(SweepResult { rows, baseline_perplexity: baseline, retention_factor: cfg.retention_factor, retention_points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMethod {
    /// `2k` least important layers moved to the low bit width.
    Quantize,
    /// `k` least important layers removed.
    PruneImportance,
    /// `k` layers removed from the top of the stack.
    PruneTop,
}

impl CompareMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CompareMethod::Quantize => "quantize",
            CompareMethod::PruneImportance => "prune_importance",
            CompareMethod::PruneTop => "prune_top",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub increment: usize,
    pub method: CompareMethod,
    pub ordering: String,
    pub n_low: usize,
    pub n_pruned: usize,
    pub avg_bits: f64,
    pub idealized_bytes: f64,
    pub exact_bytes: u64,
    pub perplexity: f64,
}

pub const COMPARE_CSV_HEADER: &str =
    "increment,method,ordering,n_low,n_pruned,avg_bits,idealized_bytes,exact_bytes,perplexity";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.increment,
            r.method.as_str(),
            r.ordering,
            r.n_low,
            r.n_pruned,
            r.avg_bits,
            r.idealized_bytes,
            r.exact_bytes,
            r.perplexity
        );
    }
    out
}

/// The three plans of increment `k`: `2k` layers quantized down, `k` layers
/// pruned by importance, `k` layers pruned from the top.
pub fn compare_plans(
    order: &[usize],
    ordering_name: OrderingName,
    k: usize,
    high_bits: u8,
    low_bits: u8,
) -> Result<[(CompareMethod, QuantPlan); 3]> {
    let n = order.len();
    if high_bits != 2 * low_bits {
        return Err(Error::invalid(format!(
            "one pruned layer frees the memory of two quantized layers only when high bits are twice low bits, got {high_bits},{low_bits}"
        )));
    }
    if 2 * k > n {
        return Err(Error::invalid(format!("increment {k} needs {} layers, model has {n}", 2 * k)));
    }
    Ok([
        (CompareMethod::Quantize, two_level_plan(order, ordering_name, n - 2 * k, high_bits, low_bits)?),
        (CompareMethod::PruneImportance, pruning_plan(order, ordering_name, k, high_bits)?),
        (CompareMethod::PruneTop, pruning_plan(&sequential_top_order(n), OrderingName::SequentialTop, k, high_bits)?),
    ])
}

/// Runs every increment `k` in `0..=N/2`. Fails if the three plans of an
/// increment differ in idealized memory.
pub fn compare_prune(
    model: &TransformerModel,
    order: &[usize],
    ordering_name: OrderingName,
    batch: &TokenBatch,
    quantizer: &dyn WeightQuantizer,
    high_bits: u8,
    low_bits: u8,
) -> Result<Vec<CompareRow>> {
    let n = model.n_layers();
    let mut eval = PlanEvaluator::new(model, quantizer, batch);
    let mut rows = Vec::new();
    for k in 0..=n / 2 {
        // pruning every layer is not a model
        if k == n {
            break;
        }
        let plans = compare_plans(order, ordering_name, k, high_bits, low_bits)?;
        let mut ideal = None;
        for (method, plan) in plans {
            let mem = plan_memory(&plan, model.config(), quantizer)?;
            match ideal {
                None => ideal = Some(mem.idealized_bits),
                Some(bits) if bits != mem.idealized_bits => {
                    return Err(Error::Numeric(format!(
                        "increment {k}: {} uses {} idealized bits, expected {bits}",
                        method.as_str(),
                        mem.idealized_bits
                    )));
                }
                Some(_) => {}
            }
            rows.push(CompareRow {
                increment: k,
                method,
                ordering: plan.ordering_name.to_string(),
                n_low: plan.n_low_layers(),
                n_pruned: plan.pruned_layers.len(),
                avg_bits: plan.avg_bits,
                idealized_bytes: mem.idealized_bytes,
                exact_bytes: mem.exact_bytes,
                perplexity: eval.perplexity(&plan)?,
            });
        }
    }
    Ok(rows)
}
