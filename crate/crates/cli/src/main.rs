use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use layerquant::corpus::{build_batches, CorpusSpec, TokenBatch, DEFAULT_SEQ_LEN};
use layerquant::eval::{compare_csv, compare_prune, evaluate, sweep, SweepConfig, SweepOrdering, DEFAULT_RETENTION_FACTOR};
use layerquant::importance::{build_report, ImportanceReport, ScoreSelection, ZdOptions};
use layerquant::model::train::{train, TrainConfig};
use layerquant::model::{export_quantized, init_model, BlockMatrix, ModelConfig, TransformerModel, PLAN_KEY};
use layerquant::planner::{
    budget_plan, format_avg_bits, outlier_plan, plan_memory, pruning_plan, resolve_order, three_level_plan,
    two_level_plan, Budget, OrderingName, QuantPlan,
};
use layerquant::quant::{read_quantized, RtnQuantizer, DEFAULT_GROUP_SIZE};
use layerquant::tensor::{load_container, save_container};
use layerquant::Error;

#[derive(Parser)]
#[command(name = "layerquant", version, about = "Importance-driven layer-wise mixed-precision quantization")]
struct Cli {
    /// Worker threads; changes speed only, never results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for training and random orderings.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute LIM and/or ZD importance scores.
    Score(ScoreArgs),
    /// Build a per-layer bit plan from an importance report.
    Plan(PlanArgs),
    /// Write a quantized checkpoint for a plan.
    Quantize(QuantizeArgs),
    /// Perplexity of a checkpoint (float or quantized).
    Eval(EvalArgs),
    /// Two-level plans for every ordering and every number of low layers.
    Sweep(SweepArgs),
    /// Quantizing 2k layers down against pruning k layers.
    ComparePrune(CompareArgs),
    /// Train the small model used by the tests and examples.
    TrainToy(TrainArgs),
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// Directory of .txt files.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    max_docs: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    seq_len: usize,
    /// Defaults to seq-len.
    #[arg(long)]
    stride: Option<usize>,
    /// Keep whole sequences up to this many tokens.
    #[arg(long)]
    max_eval_tokens: Option<usize>,
}

impl CorpusArgs {
    fn load(&self) -> Result<Option<TokenBatch>, CliError> {
        let Some(dir) = &self.corpus else { return Ok(None) };
        let mut spec = CorpusSpec::from_dir(dir)?;
        spec.max_docs = self.max_docs;
        spec.seq_len = self.seq_len;
        spec.stride = self.stride.unwrap_or(self.seq_len);
        let mut batch = build_batches(&spec)?;
        if let Some(cap) = self.max_eval_tokens {
            batch.truncate_tokens(cap);
        }
        Ok(Some(batch))
    }

    fn require(&self) -> Result<TokenBatch, CliError> {
        self.load()?.ok_or_else(|| CliError::usage("--corpus is required"))
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Comma-separated subset of lim,zd.
    #[arg(long, default_value = "lim,zd", value_delimiter = ',')]
    scores: Vec<String>,
    /// Count |z| > 1 rather than z > 1.
    #[arg(long)]
    zd_two_sided: bool,
    /// Average ZD per matrix instead of pooling the block.
    #[arg(long)]
    zd_per_matrix: bool,
    /// JSON output file; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a layer,lim,zd CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["budget", "n_low", "three_level", "prune", "outlier"])))]
struct PlanArgs {
    #[arg(long)]
    report: PathBuf,
    /// Memory available for the decoder blocks, e.g. 20GB or 123456.
    #[arg(long, value_parser = parse_bytes)]
    budget: Option<u64>,
    /// Footprint with every layer at low bits; needs --m-higher, or --model to derive both.
    #[arg(long, value_parser = parse_bytes, requires = "budget")]
    m_lower: Option<u64>,
    #[arg(long, value_parser = parse_bytes, requires = "budget")]
    m_higher: Option<u64>,
    /// Model used to derive --m-lower/--m-higher from idealized sizes.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of layers at the lower bit width.
    #[arg(long)]
    n_low: Option<usize>,
    /// x layers at 8 bits, 2x at 2 bits, the rest at 4.
    #[arg(long)]
    three_level: Option<usize>,
    /// Number of layers to remove.
    #[arg(long)]
    prune: Option<usize>,
    /// Number of layers given the higher outlier fraction.
    #[arg(long)]
    outlier: Option<usize>,
    /// High,low bit widths.
    #[arg(long, default_value = "4,2", value_parser = parse_bit_pair)]
    bits: (u8, u8),
    /// Bit width of kept layers for pruning and outlier plans.
    #[arg(long, default_value_t = 4)]
    base_bits: u8,
    /// High,low outlier fractions.
    #[arg(long, default_value = "0.01,0.001", value_parser = parse_fraction_pair)]
    outlier_fractions: (f64, f64),
    /// lim, zd, reverse_lim, random(SEED) or sequential_top.
    #[arg(long, default_value = "lim")]
    ordering: String,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Checkpoint whose perplexity is the baseline for retention.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Importance report; computed from --calib-corpus (or --corpus) if omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    calib_corpus: Option<PathBuf>,
    #[arg(long, default_value = "lim,zd,reverse,random", value_delimiter = ',')]
    orderings: Vec<String>,
    #[arg(long, default_value = "4,2", value_parser = parse_bit_pair)]
    bits: (u8, u8),
    /// Random orderings, seeded from --seed upwards.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = DEFAULT_RETENTION_FACTOR)]
    retention_factor: f64,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,
    /// CSV output; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON with baseline and retention points.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    calib_corpus: Option<PathBuf>,
    #[arg(long, default_value = "lim")]
    ordering: String,
    /// 8,4 or 4,2.
    #[arg(long, default_value = "8,4", value_parser = parse_bit_pair)]
    bits: (u8, u8),
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 1200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f32,
    /// Print the loss every N steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Numeric(_)) { 3 } else { 2 };
        CliError { code, msg: e.to_string() }
    }
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let mult: u64 = match unit.to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "KB" => 1_000,
        "MB" => 1_000_000,
        "GB" => 1_000_000_000,
        other => return Err(format!("unknown unit `{other}`")),
    };
    if let Ok(n) = num.parse::<u64>() {
        return n.checked_mul(mult).ok_or_else(|| "size overflows".to_string());
    }
    let x: f64 = num.parse().map_err(|_| format!("cannot parse `{s}` as a byte count"))?;
    let v = x * mult as f64;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(format!("`{s}` is not a whole number of bytes"));
    }
    Ok(v as u64)
}

fn parse_bit_pair(s: &str) -> Result<(u8, u8), String> {
    let (a, b) = s.split_once(',').ok_or("expected HIGH,LOW")?;
    let p = |x: &str| x.trim().parse::<u8>().map_err(|e| format!("{x}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_fraction_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected HIGH,LOW")?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_ordering(s: &str, seed: u64) -> Result<OrderingName, CliError> {
    let name: OrderingName = s.parse()?;
    Ok(match name {
        OrderingName::Random(0) if s == "random" => OrderingName::Random(seed),
        n => n,
    })
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let s = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn read_report(path: &Path) -> Result<ImportanceReport, CliError> {
    let s = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(ImportanceReport::from_json(&s)?)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

/// Uses `--report` when given, otherwise scores the model on the calibration
/// corpus (falling back to the evaluation corpus).
fn report_for(
    model: &TransformerModel,
    report: Option<&Path>,
    calib: Option<&Path>,
    corpus: &CorpusArgs,
    eval_batch: &TokenBatch,
) -> Result<ImportanceReport, CliError> {
    if let Some(p) = report {
        return read_report(p);
    }
    let batch = match calib {
        Some(dir) => {
            let mut c = corpus.clone();
            c.corpus = Some(dir.to_path_buf());
            c.max_eval_tokens = None;
            c.require()?
        }
        None => eval_batch.clone(),
    };
    Ok(build_report(model, Some(&batch), ScoreSelection::default(), ZdOptions::default())?)
}

fn cmd_score(a: ScoreArgs) -> Result<(), CliError> {
    let mut which = ScoreSelection { lim: false, zd: false };
    for s in &a.scores {
        match s.trim() {
            "lim" => which.lim = true,
            "zd" => which.zd = true,
            other => return Err(CliError::usage(format!("unknown score `{other}`; expected lim or zd"))),
        }
    }
    let model = TransformerModel::load(&a.model)?;
    let batch = if which.lim {
        Some(a.corpus.load()?.ok_or_else(|| CliError::usage("LIM scores need --corpus"))?)
    } else {
        None
    };
    let opts = ZdOptions { two_sided: a.zd_two_sided, per_matrix: a.zd_per_matrix };
    let report = build_report(&model, batch.as_ref(), which, opts)?;
    if let Some(p) = &a.csv {
        write_output(Some(p), &report.to_csv())?;
    }
    write_output(a.out.as_deref(), &report.to_json()?)
}

fn cmd_plan(a: PlanArgs, seed: u64) -> Result<(), CliError> {
    let report = read_report(&a.report)?;
    let n = report.n_layers;
    let name = parse_ordering(&a.ordering, seed)?;
    let order = resolve_order(name, Some(&report), n)?;
    let (high, low) = a.bits;
    let plan = if let Some(avail) = a.budget {
        let (m_lower, m_higher) = match (a.m_lower, a.m_higher, &a.model) {
            (Some(l), Some(h), _) => (l, h),
            (None, None, Some(path)) => {
                let model = TransformerModel::load(path)?;
                let q = RtnQuantizer::new(a.group_size);
                let ident: Vec<usize> = (0..n).collect();
                let mem = |k| -> Result<u64, CliError> {
                    let p = two_level_plan(&ident, name, k, high, low)?;
                    Ok(plan_memory(&p, model.config(), &q)?.idealized_bits / 8)
                };
                (mem(0)?, mem(n)?)
            }
            _ => return Err(CliError::usage("--budget needs --m-lower and --m-higher, or --model")),
        };
        budget_plan(&order, name, &Budget { m_available: avail, m_lower, m_higher, n_layers: n }, high, low)?
    } else if let Some(k) = a.n_low {
        if k > n {
            return Err(CliError::usage(format!("--n-low {k} exceeds the {n} layers")));
        }
        two_level_plan(&order, name, n - k, high, low)?
    } else if let Some(x) = a.three_level {
        three_level_plan(&order, name, x)?
    } else if let Some(k) = a.prune {
        pruning_plan(&order, name, k, a.base_bits)?
    } else if let Some(k) = a.outlier {
        let (ph, pl) = a.outlier_fractions;
        outlier_plan(&order, name, k, ph, pl, a.base_bits)?
    } else {
        unreachable!("clap requires one planning mode")
    };
    let plan = plan.with_group_size(a.group_size);
    eprintln!(
        "avg bits {} ({} layers low, {} pruned)",
        format_avg_bits(plan.avg_bits),
        plan.n_low_layers(),
        plan.pruned_layers.len()
    );
    write_output(a.out.as_deref(), &to_json(&plan)?)
}

fn cmd_quantize(a: QuantizeArgs) -> Result<(), CliError> {
    let model = TransformerModel::load(&a.model)?;
    let plan: QuantPlan = read_json(&a.plan)?;
    let q = RtnQuantizer::new(plan.group_size);
    let map = export_quantized(&model, &plan, &q)?;
    let mem = plan_memory(&plan, model.config(), &q)?;
    // what the container actually holds for the block matrices
    let kept = plan.n_layers() - plan.pruned_layers.len();
    let mut stored = 0u64;
    for i in 0..kept {
        for m in BlockMatrix::ALL {
            let name = format!("blocks.{i}.{}", m.name());
            stored += match read_quantized(&map, &name) {
                Some(qt) => qt?.exact_bytes(),
                None => 2 * map.get(&name).map_or(0, |t| t.numel() as u64),
            };
        }
    }
    save_container(&map, &a.out)?;
    let summary = serde_json::json!({
        "idealized_bytes": mem.idealized_bytes,
        "exact_bytes": stored,
        "plan_exact_bytes": mem.exact_bytes,
        "avg_bits": plan.avg_bits,
    });
    write_output(None, &to_json(&summary)?)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let map = load_container(&a.model)?;
    let model = TransformerModel::from_tensor_map(&map)?;
    let plan: Option<QuantPlan> = map
        .metadata
        .get(PLAN_KEY)
        .map(|s| serde_json::from_str(s))
        .transpose()
        .map_err(Error::from)?;
    let batch = a.corpus.require()?;
    let baseline = match &a.baseline {
        Some(p) => Some(evaluate(&TransformerModel::load(p)?, None, &batch, None)?.perplexity),
        None => None,
    };
    let report = evaluate(&model, plan.as_ref(), &batch, baseline)?;
    write_output(a.out.as_deref(), &to_json(&report)?)
}

fn cmd_sweep(a: SweepArgs, seed: u64) -> Result<(), CliError> {
    let model = TransformerModel::load(&a.model)?;
    let batch = a.corpus.require()?;
    let mut orderings = Vec::new();
    for o in &a.orderings {
        orderings.push(match o.trim() {
            "random" => SweepOrdering::Random { seeds: (seed..seed + a.seeds).collect() },
            other => SweepOrdering::Fixed(other.parse()?),
        });
    }
    let needs_report = orderings
        .iter()
        .any(|o| matches!(o, SweepOrdering::Fixed(OrderingName::Lim | OrderingName::Zd | OrderingName::ReverseLim)));
    let report = if needs_report {
        Some(report_for(&model, a.report.as_deref(), a.calib_corpus.as_deref(), &a.corpus, &batch)?)
    } else {
        None
    };
    let cfg = SweepConfig { orderings, high_bits: a.bits.0, low_bits: a.bits.1, retention_factor: a.retention_factor };
    let q = RtnQuantizer::new(a.group_size);
    let res = sweep(&model, report.as_ref(), &batch, &q, &cfg)?;
    for p in &res.retention_points {
        eprintln!(
            "{}: {} layers at {} bits keep perplexity {:.4} within {:.4}x of {:.4} (avg bits {})",
            p.ordering,
            p.n_low,
            a.bits.1,
            p.perplexity,
            res.retention_factor,
            res.baseline_perplexity,
            format_avg_bits(p.avg_bits)
        );
    }
    if let Some(p) = &a.summary {
        let summary = serde_json::json!({
            "baseline_perplexity": res.baseline_perplexity,
            "retention_factor": res.retention_factor,
            "retention_points": res.retention_points,
        });
        write_output(Some(p), &to_json(&summary)?)?;
    }
    write_output(a.out.as_deref(), &res.to_csv())
}

fn cmd_compare(a: CompareArgs, seed: u64) -> Result<(), CliError> {
    let model = TransformerModel::load(&a.model)?;
    let batch = a.corpus.require()?;
    let name = parse_ordering(&a.ordering, seed)?;
    let report = match name {
        OrderingName::Lim | OrderingName::Zd | OrderingName::ReverseLim => {
            Some(report_for(&model, a.report.as_deref(), a.calib_corpus.as_deref(), &a.corpus, &batch)?)
        }
        _ => None,
    };
    let order = resolve_order(name, report.as_ref(), model.n_layers())?;
    let q = RtnQuantizer::new(a.group_size);
    let rows = compare_prune(&model, &order, name, &batch, &q, a.bits.0, a.bits.1)?;
    write_output(a.out.as_deref(), &compare_csv(&rows))
}

fn cmd_train(a: TrainArgs, seed: u64) -> Result<(), CliError> {
    let spec = CorpusSpec::from_dir(&a.corpus)?;
    if spec.paths.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let mut docs = Vec::new();
    for p in &spec.paths {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
        docs.push(layerquant::corpus::tokenize_bytes(&text));
    }
    let config = ModelConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        n_heads: a.heads,
        d_ff: a.d_ff,
        ..ModelConfig::default()
    };
    let mut model = init_model(config, seed)?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        learning_rate: a.lr,
        seed,
        ..TrainConfig::default()
    };
    let every = a.log_every.max(1);
    train(&mut model, &docs, &cfg, |step, loss| {
        if step % every == 0 || step + 1 == cfg.steps {
            eprintln!("step {step:5} loss {loss:.4}");
        }
    })?;
    model.save(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Plan(a) => cmd_plan(a, seed),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a, seed),
        Command::ComparePrune(a) => cmd_compare(a, seed),
        Command::TrainToy(a) => cmd_train(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
