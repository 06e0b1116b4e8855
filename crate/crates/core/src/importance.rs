//! Layer importance scores.
//!
//! LIM is the negative cosine similarity between the residual stream entering
//! and leaving a block, averaged over token positions. ZD is the fraction of
//! a block's weights with z-score above 1. Higher means more important for
//! both.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{BlockMatrix, BlockTrace, TransformerModel};

/// Vectors with a norm below this are skipped by LIM.
pub const MIN_NORM: f64 = 1e-12;

/// Running sum of per-position `-cos` values for one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LimAccumulator {
    pub sum: f64,
    pub count: u64,
}

impl LimAccumulator {
    /// Adds every position of `[T, d]` input/output state pairs.
    pub fn add_states(&mut self, input: &[f32], output: &[f32], d: usize) {
        for (x, y) in input.chunks_exact(d).zip(output.chunks_exact(d)) {
            let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
            for (&a, &b) in x.iter().zip(y) {
                let (a, b) = (a as f64, b as f64);
                xy += a * b;
                xx += a * a;
                yy += b * b;
            }
            let (nx, ny) = (xx.sqrt(), yy.sqrt());
            if nx < MIN_NORM || ny < MIN_NORM {
                continue;
            }
            self.sum += -(xy / (nx * ny)).clamp(-1.0, 1.0);
            self.count += 1;
        }
    }

    pub fn merge(&mut self, other: &LimAccumulator) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn value(&self, layer: usize) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::DegenerateActivations { layer });
        }
        Ok(self.sum / self.count as f64)
    }
}

fn accumulate_traces(acc: &mut [LimAccumulator], traces: &[BlockTrace]) -> Result<()> {
    for tr in traces {
        let slot = acc
            .get_mut(tr.layer_index)
            .ok_or_else(|| Error::invalid(format!("trace for unknown layer {}", tr.layer_index)))?;
        if tr.input_states.shape() != tr.output_states.shape() || tr.input_states.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "layer {} trace shapes {:?} and {:?} differ or are not 2-D",
                tr.layer_index,
                tr.input_states.shape(),
                tr.output_states.shape()
            )));
        }
        let d = tr.input_states.shape()[1];
        let (x, y) = (tr.input_states.to_f32_vec()?, tr.output_states.to_f32_vec()?);
        slot.add_states(&x, &y, d);
    }
    Ok(())
}

/// LIM per layer from already captured traces; `sequences[s]` holds one
/// trace per layer for sequence `s`.
pub fn lim_from_traces(n_layers: usize, sequences: &[Vec<BlockTrace>]) -> Result<Vec<f64>> {
    let mut acc = vec![LimAccumulator::default(); n_layers];
    for traces in sequences {
        accumulate_traces(&mut acc, traces)?;
    }
    acc.iter().enumerate().map(|(i, a)| a.value(i)).collect()
}

/// LIM per layer over every position of every sequence in `batch`.
/// Sequences run in parallel; accumulators are merged in sequence order.
pub fn lim_scores(model: &TransformerModel, batch: &TokenBatch) -> Result<Vec<f64>> {
    let n = model.n_layers();
    if batch.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let parts: Vec<Vec<LimAccumulator>> = batch
        .sequences
        .par_iter()
        .map(|s| {
            let mut acc = vec![LimAccumulator::default(); n];
            accumulate_traces(&mut acc, &model.block_traces(s)?)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![LimAccumulator::default(); n];
    for part in &parts {
        total.iter_mut().zip(part).for_each(|(t, p)| t.merge(p));
    }
    total.iter().enumerate().map(|(i, a)| a.value(i)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ZdOptions {
    /// Count `|z| > 1` instead of `z > 1`.
    pub two_sided: bool,
    /// Average the per-matrix ZD values instead of pooling the block.
    pub per_matrix: bool,
}

/// Fraction of `values` with z-score strictly above 1, using the population
/// standard deviation. Zero when the deviation is below 1e-20.
pub fn zd_of_values<I>(values: I, two_sided: bool) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let (mut n, mut sum) = (0usize, 0.0f64);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let var = values.clone().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    if sigma < 1e-20 {
        return 0.0;
    }
    let hits = values
        .filter(|&v| {
            let z = (v - mean) / sigma;
            if two_sided {
                z.abs() > 1.0
            } else {
                z > 1.0
            }
        })
        .count();
    hits as f64 / n as f64
}

/// ZD of one block's 2-D weight matrices.
pub fn zd_of_block(model: &TransformerModel, layer: usize, opts: ZdOptions) -> f64 {
    let b = &model.blocks[layer];
    let widen = |m: BlockMatrix| b.matrix(m).iter().map(|&x| x as f64);
    if opts.per_matrix {
        let per: Vec<f64> = BlockMatrix::ALL.iter().map(|&m| zd_of_values(widen(m), opts.two_sided)).collect();
        per.iter().sum::<f64>() / per.len() as f64
    } else {
        let pooled = BlockMatrix::ALL.iter().flat_map(move |&m| widen(m));
        zd_of_values(pooled, opts.two_sided)
    }
}

pub fn zd_scores(model: &TransformerModel, opts: ZdOptions) -> Vec<f64> {
    (0..model.n_layers())
        .into_par_iter()
        .map(|i| zd_of_block(model, i, opts))
        .collect()
}

/// Layer indices by descending score; equal scores keep the lower index first.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreSelection {
    pub lim: bool,
    pub zd: bool,
}

impl Default for ScoreSelection {
    fn default() -> Self {
        ScoreSelection { lim: true, zd: true }
    }
}

/// Scores that were not requested are left as empty arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub n_layers: usize,
    pub lim: Vec<f64>,
    pub zd: Vec<f64>,
    pub lim_order: Vec<usize>,
    pub zd_order: Vec<usize>,
    pub calibration_fingerprint: String,
}

impl ImportanceReport {
    pub fn from_scores(n_layers: usize, lim: Vec<f64>, zd: Vec<f64>, calibration_fingerprint: String) -> Self {
        ImportanceReport {
            n_layers,
            lim_order: descending_order(&lim),
            zd_order: descending_order(&zd),
            lim,
            zd,
            calibration_fingerprint,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: ImportanceReport = serde_json::from_str(s)?;
        for (name, v) in [("lim", &r.lim), ("zd", &r.zd)] {
            if !v.is_empty() && v.len() != r.n_layers {
                return Err(Error::invalid(format!("report has {} {name} scores for {} layers", v.len(), r.n_layers)));
            }
        }
        for (name, o) in [("lim_order", &r.lim_order), ("zd_order", &r.zd_order)] {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if !o.is_empty() && sorted != (0..r.n_layers).collect::<Vec<_>>() {
                return Err(Error::invalid(format!("{name} is not a permutation of the layers")));
            }
        }
        Ok(r)
    }

    /// Columns `layer,lim,zd`; missing scores are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,lim,zd\n");
        let cell = |v: &[f64], i: usize| v.get(i).map(|x| x.to_string()).unwrap_or_default();
        for i in 0..self.n_layers {
            let _ = writeln!(out, "{i},{},{}", cell(&self.lim, i), cell(&self.zd, i));
        }
        out
    }
}

/// Computes the selected scores. LIM needs a calibration batch; ZD does not.
pub fn build_report(
    model: &TransformerModel,
    batch: Option<&TokenBatch>,
    which: ScoreSelection,
    zd_opts: ZdOptions,
) -> Result<ImportanceReport> {
    let (lim, fingerprint) = if which.lim {
        let batch = batch.ok_or_else(|| Error::invalid("LIM scores need a calibration corpus"))?;
        (lim_scores(model, batch)?, batch.fingerprint.clone())
    } else {
        (Vec::new(), String::new())
    };
    let zd = if which.zd { zd_scores(model, zd_opts) } else { Vec::new() };
    Ok(ImportanceReport::from_scores(model.n_layers(), lim, zd, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn trace(layer: usize, d: usize, x: Vec<f32>, y: Vec<f32>) -> BlockTrace {
        let t = x.len() / d;
        BlockTrace {
            layer_index: layer,
            input_states: Tensor::from_f32(vec![t, d], x).unwrap(),
            output_states: Tensor::from_f32(vec![t, d], y).unwrap(),
        }
    }

    fn lim1(d: usize, x: Vec<f32>, y: Vec<f32>) -> f64 {
        lim_from_traces(1, &[vec![trace(0, d, x, y)]]).unwrap()[0]
    }

    #[test]
    fn lim_hand_values() {
        assert!((lim1(2, vec![1.0, 0.0], vec![1.0, 1.0]) + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((lim1(3, vec![1.0, -2.0, 0.5], vec![-1.0, 2.0, -0.5]) - 1.0).abs() < 1e-12);
        assert!(lim1(2, vec![1.0, 0.0], vec![0.0, 3.0]).abs() < 1e-12);
    }

    #[test]
    fn lim_skips_zero_vectors() {
        assert_eq!(lim1(2, vec![0.0, 0.0, 1.0, 0.0], vec![1.0, 1.0, 2.0, 0.0]), -1.0);
        let err = lim_from_traces(1, &[vec![trace(0, 2, vec![0.0, 0.0], vec![1.0, 0.0])]]);
        assert!(matches!(err, Err(Error::DegenerateActivations { layer: 0 })));
    }

    #[test]
    fn lim_identity_block() {
        let c = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, vocab_size: 256, max_seq_len: 32, norm_eps: 1e-5 };
        let mut m = TransformerModel::init(c, 1).unwrap();
        m.blocks[1].attn_o.iter_mut().for_each(|w| *w = 0.0);
        m.blocks[1].mlp_out.iter_mut().for_each(|w| *w = 0.0);
        let batch = TokenBatch { sequences: vec![(0..20).collect(), (50..70).collect()], fingerprint: "f".into() };
        let lim = lim_scores(&m, &batch).unwrap();
        assert!((lim[1] + 1.0).abs() < 1e-6);
        assert!(lim[0] > -1.0 + 1e-6);
        let r = build_report(&m, Some(&batch), ScoreSelection::default(), ZdOptions::default()).unwrap();
        assert_eq!(r.lim, lim);
        assert_eq!(r.calibration_fingerprint, "f");
        assert!(build_report(&m, None, ScoreSelection::default(), ZdOptions::default()).is_err());
        let zd_only = build_report(&m, None, ScoreSelection { lim: false, zd: true }, ZdOptions::default()).unwrap();
        assert!(zd_only.lim.is_empty() && zd_only.calibration_fingerprint.is_empty());
    }

    #[test]
    fn zd_hand_values() {
        let v = [0.0, 0.0, 0.0, 0.0, 10.0];
        assert_eq!(zd_of_values(v.iter().copied(), false), 0.2);
        assert_eq!(zd_of_values([3.0; 7].iter().copied(), false), 0.0);
        let sym = [-10.0, 0.0, 0.0, 0.0, 10.0];
        assert_eq!(zd_of_values(sym.iter().copied(), false), 0.2);
        assert_eq!(zd_of_values(sym.iter().copied(), true), 0.4);
    }

    #[test]
    fn orders() {
        assert_eq!(descending_order(&[0.9, 0.1, 0.5, 0.7]), vec![0, 3, 2, 1]);
        assert_eq!(descending_order(&[0.5, 0.5, 0.7]), vec![2, 0, 1]);
    }

    #[test]
    fn report_round_trip() {
        let r = ImportanceReport::from_scores(3, vec![0.1 + 0.2, -1.0 / 3.0, 1e-17], vec![0.15, 0.15, 0.2], "abc".into());
        let back = ImportanceReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(back.lim.iter().zip(&r.lim).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(r.to_csv().starts_with("layer,lim,zd\n0,"));
    }
}
