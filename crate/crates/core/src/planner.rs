//! Per-layer bit assignment from an importance ordering.
//!
//! An ordering is a permutation of layer indices from most to least
//! important. Plans put the tail of the ordering at the lower precision (or
//! remove it, for pruning plans). Memory is accounted two ways: idealized
//! (`elements * bits / 8`, no metadata) and exact (what the kernels emit).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::model::{BlockMatrix, ModelConfig};
use crate::quant::{WeightQuantizer, DEFAULT_GROUP_SIZE};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OrderingName {
    Lim,
    Zd,
    ReverseLim,
    Random(u64),
    /// Layers from the top of the stack are least important, except the last block.
    SequentialTop,
}

impl fmt::Display for OrderingName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderingName::Lim => f.write_str("lim"),
            OrderingName::Zd => f.write_str("zd"),
            OrderingName::ReverseLim => f.write_str("reverse_lim"),
            OrderingName::Random(seed) => write!(f, "random({seed})"),
            OrderingName::SequentialTop => f.write_str("sequential_top"),
        }
    }
}

impl FromStr for OrderingName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lim" => Ok(OrderingName::Lim),
            "zd" => Ok(OrderingName::Zd),
            "reverse_lim" | "reverse" => Ok(OrderingName::ReverseLim),
            "sequential_top" | "top" => Ok(OrderingName::SequentialTop),
            "random" => Ok(OrderingName::Random(0)),
            _ => s
                .strip_prefix("random(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|n| n.parse().ok())
                .map(OrderingName::Random)
                .ok_or_else(|| Error::invalid(format!("unknown ordering `{s}`"))),
        }
    }
}

impl Serialize for OrderingName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OrderingName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Memory figures in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub m_available: u64,
    pub m_lower: u64,
    pub m_higher: u64,
    pub n_layers: usize,
}

impl Budget {
    fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("budget needs at least one layer"));
        }
        if self.m_higher == self.m_lower {
            return Err(Error::DegenerateBudget(self.m_higher));
        }
        if self.m_higher < self.m_lower {
            return Err(Error::invalid(format!(
                "m_lower ({}) exceeds m_higher ({})",
                self.m_lower, self.m_higher
            )));
        }
        Ok(())
    }

    /// Memory with `n_higher` layers at high precision, interpolating
    /// linearly between the all-low and all-high footprints.
    pub fn interpolated_memory(&self, n_higher: usize) -> f64 {
        let span = (self.m_higher - self.m_lower) as f64;
        self.m_lower as f64 + n_higher as f64 / self.n_layers as f64 * span
    }

    /// Exact form of `interpolated_memory(n_higher) <= m_available`.
    pub fn fits(&self, n_higher: usize) -> bool {
        let n = self.n_layers as u128;
        let span = (self.m_higher - self.m_lower) as u128;
        self.m_lower as u128 * n + n_higher as u128 * span <= self.m_available as u128 * n
    }
}

/// `floor((M_available - M_lower) / (M_higher - M_lower) * N_layers)`, clamped
/// to `[0, N_layers]`. Evaluated in integer arithmetic.
pub fn n_higher_from_budget(b: &Budget) -> Result<usize> {
    b.validate()?;
    if b.m_available <= b.m_lower {
        return Ok(0);
    }
    let num = (b.m_available - b.m_lower) as u128 * b.n_layers as u128;
    let den = (b.m_higher - b.m_lower) as u128;
    Ok(((num / den) as usize).min(b.n_layers))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub ordering_name: OrderingName,
    pub bits_per_layer: Vec<u8>,
    pub pruned_layers: Vec<usize>,
    pub n_higher: usize,
    pub avg_bits: f64,
    pub outlier_fraction_per_layer: Option<Vec<f64>>,
    pub budget: Option<Budget>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
}

fn default_group_size() -> usize {
    DEFAULT_GROUP_SIZE
}

impl QuantPlan {
    pub fn n_layers(&self) -> usize {
        self.bits_per_layer.len()
    }

    /// Layers placed in the lower tier: not among the `n_higher` and not pruned.
    pub fn n_low_layers(&self) -> usize {
        self.n_layers().saturating_sub(self.n_higher + self.pruned_layers.len())
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    fn finish(
        ordering_name: OrderingName,
        bits_per_layer: Vec<u8>,
        pruned_layers: Vec<usize>,
        n_higher: usize,
    ) -> Self {
        let avg_bits = average_bits(&bits_per_layer, &pruned_layers);
        QuantPlan {
            ordering_name,
            bits_per_layer,
            pruned_layers,
            n_higher,
            avg_bits,
            outlier_fraction_per_layer: None,
            budget: None,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }
}

/// Mean bit width over the layers that are not pruned.
pub fn average_bits(bits: &[u8], pruned: &[usize]) -> f64 {
    let kept: Vec<f64> = bits
        .iter()
        .enumerate()
        .filter(|(i, _)| !pruned.contains(i))
        .map(|(_, &b)| b as f64)
        .collect();
    if kept.is_empty() {
        return 0.0;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Two-decimal display of an average bit width. Truncates rather than
/// rounds, which is how published tables print e.g. 3.6875 as 3.68.
pub fn format_avg_bits(avg: f64) -> String {
    format!("{:.2}", (avg * 100.0 + 1e-9).floor() / 100.0)
}

fn check_order(order: &[usize]) -> Result<()> {
    let mut seen = vec![false; order.len()];
    for &i in order {
        if i >= order.len() || seen[i] {
            return Err(Error::invalid(format!(
                "ordering {order:?} is not a permutation of 0..{}",
                order.len()
            )));
        }
        seen[i] = true;
    }
    if order.is_empty() {
        return Err(Error::invalid("ordering is empty"));
    }
    Ok(())
}

fn check_bits(b: u8) -> Result<()> {
    match b {
        2 | 4 | 8 | 16 => Ok(()),
        _ => Err(Error::invalid(format!("bit width {b} is not one of 2, 4, 8, 16"))),
    }
}

/// The `n_higher` most important layers at `high_bits`, the rest at `low_bits`.
pub fn two_level_plan(
    order: &[usize],
    ordering_name: OrderingName,
    n_higher: usize,
    high_bits: u8,
    low_bits: u8,
) -> Result<QuantPlan> {
    check_order(order)?;
    check_bits(high_bits)?;
    check_bits(low_bits)?;
    if high_bits <= low_bits {
        return Err(Error::invalid(format!(
            "high bits ({high_bits}) must exceed low bits ({low_bits})"
        )));
    }
    if n_higher > order.len() {
        return Err(Error::invalid(format!(
            "n_higher {n_higher} exceeds the {} layers",
            order.len()
        )));
    }
    let mut bits = vec![low_bits; order.len()];
    order[..n_higher].iter().for_each(|&i| bits[i] = high_bits);
    Ok(QuantPlan::finish(ordering_name, bits, Vec::new(), n_higher))
}

/// Budget-driven two-level plan; the budget is recorded in the plan.
pub fn budget_plan(
    order: &[usize],
    ordering_name: OrderingName,
    budget: &Budget,
    high_bits: u8,
    low_bits: u8,
) -> Result<QuantPlan> {
    if budget.n_layers != order.len() {
        return Err(Error::PlanMismatch(format!(
            "budget is for {} layers, ordering has {}",
            budget.n_layers,
            order.len()
        )));
    }
    let n_higher = n_higher_from_budget(budget)?;
    let mut plan = two_level_plan(order, ordering_name, n_higher, high_bits, low_bits)?;
    plan.budget = Some(*budget);
    Ok(plan)
}

/// Top `x` layers at 8 bits, bottom `2x` at 2 bits, the rest at 4.
pub fn three_level_plan(order: &[usize], ordering_name: OrderingName, x: usize) -> Result<QuantPlan> {
    check_order(order)?;
    let n = order.len();
    if 3 * x > n {
        return Err(Error::invalid(format!("three-level plan needs 3x <= N, got x={x}, N={n}")));
    }
    let mut bits = vec![4u8; n];
    order[..x].iter().for_each(|&i| bits[i] = 8);
    order[n - 2 * x..].iter().for_each(|&i| bits[i] = 2);
    Ok(QuantPlan::finish(ordering_name, bits, Vec::new(), n - 2 * x))
}

/// Removes the `k` least important layers; the rest stay at `base_bits`.
/// Pass [`sequential_top_order`] to prune from the top of the stack.
pub fn pruning_plan(order: &[usize], ordering_name: OrderingName, k: usize, base_bits: u8) -> Result<QuantPlan> {
    check_order(order)?;
    check_bits(base_bits)?;
    let n = order.len();
    if k >= n {
        return Err(Error::invalid(format!("cannot prune {k} of {n} layers")));
    }
    let mut pruned = order[n - k..].to_vec();
    pruned.sort_unstable();
    Ok(QuantPlan::finish(ordering_name, vec![base_bits; n], pruned, n - k))
}

/// The `n_high` most important layers keep `p_high` of their weights as
/// outliers, the rest `p_low`. All layers use `base_bits`.
pub fn outlier_plan(
    order: &[usize],
    ordering_name: OrderingName,
    n_high: usize,
    p_high: f64,
    p_low: f64,
    base_bits: u8,
) -> Result<QuantPlan> {
    check_order(order)?;
    check_bits(base_bits)?;
    if !(0.0 <= p_low && p_low <= p_high && p_high <= 1.0) {
        return Err(Error::invalid(format!(
            "outlier fractions must satisfy 0 <= p_low <= p_high <= 1, got {p_low}, {p_high}"
        )));
    }
    if n_high > order.len() {
        return Err(Error::invalid(format!("{n_high} exceeds the {} layers", order.len())));
    }
    let mut fractions = vec![p_low; order.len()];
    order[..n_high].iter().for_each(|&i| fractions[i] = p_high);
    let mut plan = QuantPlan::finish(ordering_name, vec![base_bits; order.len()], Vec::new(), n_high);
    plan.outlier_fraction_per_layer = Some(fractions);
    Ok(plan)
}

/// `[N-1, 0, 1, ..., N-2]`: the last block is kept as most important and the
/// remaining blocks count as less important the closer they are to the top.
pub fn sequential_top_order(n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    std::iter::once(n - 1).chain(0..n - 1).collect()
}

/// Resolves an ordering name to a permutation. LIM/ZD orderings need a
/// report carrying the matching scores.
pub fn resolve_order(name: OrderingName, report: Option<&ImportanceReport>, n_layers: usize) -> Result<Vec<usize>> {
    let from_report = |pick: fn(&ImportanceReport) -> &Vec<usize>, what: &str| -> Result<Vec<usize>> {
        let r = report.ok_or_else(|| Error::invalid(format!("ordering `{name}` needs an importance report")))?;
        let order = pick(r);
        if order.len() != n_layers {
            return Err(Error::PlanMismatch(format!(
                "report has {} {what} entries, expected {n_layers}",
                order.len()
            )));
        }
        Ok(order.clone())
    };
    match name {
        OrderingName::Lim => from_report(|r| &r.lim_order, "LIM"),
        OrderingName::Zd => from_report(|r| &r.zd_order, "ZD"),
        OrderingName::ReverseLim => {
            let mut o = from_report(|r| &r.lim_order, "LIM")?;
            o.reverse();
            Ok(o)
        }
        OrderingName::Random(seed) => Ok(Rng::new(seed).permutation(n_layers)),
        OrderingName::SequentialTop => Ok(sequential_top_order(n_layers)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanMemory {
    /// `sum(elements * bits)` over kept block matrices.
    pub idealized_bits: u64,
    pub idealized_bytes: f64,
    pub exact_bytes: u64,
}

/// Memory of the decoder blocks under `plan`. Embeddings, head and norm
/// vectors are outside the plan and not counted; pruned layers count zero.
pub fn plan_memory(plan: &QuantPlan, config: &ModelConfig, q: &dyn WeightQuantizer) -> Result<PlanMemory> {
    if plan.n_layers() != config.n_layers {
        return Err(Error::PlanMismatch(format!(
            "plan covers {} layers, model has {}",
            plan.n_layers(),
            config.n_layers
        )));
    }
    let (mut ideal, mut exact) = (0u64, 0u64);
    for (i, &bits) in plan.bits_per_layer.iter().enumerate() {
        if plan.pruned_layers.contains(&i) {
            continue;
        }
        let frac = plan.outlier_fraction_per_layer.as_ref().map_or(0.0, |f| f[i]);
        for m in BlockMatrix::ALL {
            let shape = m.shape(config);
            let n = (shape[0] * shape[1]) as u64;
            ideal += n * bits as u64;
            exact += if bits == 16 { 2 * n } else { q.exact_bytes(&shape, bits, frac) };
        }
    }
    Ok(PlanMemory {
        idealized_bits: ideal,
        idealized_bytes: ideal as f64 / 8.0,
        exact_bytes: exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::RtnQuantizer;
    use proptest::prelude::*;

    const GB: u64 = 1_000_000_000;

    fn ident(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn worked_budget_example() {
        let b = Budget { m_available: 20 * GB, m_lower: 17 * GB, m_higher: 34 * GB, n_layers: 32 };
        assert_eq!(n_higher_from_budget(&b).unwrap(), 5);
        assert_eq!(b.interpolated_memory(5), 19.65625 * GB as f64);
        assert!(b.fits(5) && !b.fits(6));
    }

    #[test]
    fn budget_clamps() {
        let b = Budget { m_available: 40, m_lower: 17, m_higher: 34, n_layers: 32 };
        assert_eq!(n_higher_from_budget(&b).unwrap(), 32);
        let b = Budget { m_available: 17, ..b };
        assert_eq!(n_higher_from_budget(&b).unwrap(), 0);
        let b = Budget { m_available: 3, ..b };
        assert_eq!(n_higher_from_budget(&b).unwrap(), 0);
        let b = Budget { m_higher: 17, ..b };
        assert!(matches!(n_higher_from_budget(&b), Err(Error::DegenerateBudget(_))));
    }

    #[test]
    fn fig1_split() {
        let p = two_level_plan(&ident(40), OrderingName::Lim, 30, 4, 2).unwrap();
        assert_eq!(p.avg_bits, 3.5);
        assert_eq!(p.n_low_layers(), 10);
    }

    #[test]
    fn table_rows() {
        let p = two_level_plan(&ident(32), OrderingName::Lim, 27, 4, 2).unwrap();
        assert_eq!(p.avg_bits, 3.6875);
        assert_eq!(format_avg_bits(p.avg_bits), "3.68");
        let all = two_level_plan(&ident(32), OrderingName::Lim, 32, 4, 2).unwrap();
        assert!(all.bits_per_layer.iter().all(|&b| b == 4));
        assert!(two_level_plan(&ident(4), OrderingName::Lim, 2, 2, 4).is_err());
        assert!(two_level_plan(&ident(4), OrderingName::Lim, 2, 4, 3).is_err());
        assert!(two_level_plan(&[0, 0, 1], OrderingName::Lim, 2, 4, 2).is_err());
    }

    #[test]
    fn three_level() {
        let p = three_level_plan(&ident(32), OrderingName::Lim, 10).unwrap();
        let count = |b| p.bits_per_layer.iter().filter(|&&x| x == b).count();
        assert_eq!((count(8), count(4), count(2)), (10, 2, 20));
        assert_eq!(p.avg_bits, 4.0);
        let zero = three_level_plan(&ident(32), OrderingName::Lim, 0).unwrap();
        assert!(zero.bits_per_layer.iter().all(|&b| b == 4));
        assert!(three_level_plan(&ident(32), OrderingName::Lim, 11).is_err());
    }

    #[test]
    fn sequential_top_pruning() {
        let order = sequential_top_order(32);
        let p = pruning_plan(&order, OrderingName::SequentialTop, 2, 8).unwrap();
        assert_eq!(p.pruned_layers, vec![29, 30]);
        assert_eq!(p.avg_bits, 8.0);
        let noop = pruning_plan(&order, OrderingName::SequentialTop, 0, 8).unwrap();
        assert!(noop.pruned_layers.is_empty());
        assert!(pruning_plan(&order, OrderingName::SequentialTop, 32, 8).is_err());
    }

    #[test]
    fn prune_one_equals_two_moved_down() {
        let c = ModelConfig { n_layers: 32, ..ModelConfig::default() };
        let q = RtnQuantizer::default();
        let moved = two_level_plan(&ident(32), OrderingName::Lim, 30, 8, 4).unwrap();
        let pruned = pruning_plan(&ident(32), OrderingName::Lim, 1, 8).unwrap();
        assert_eq!(
            plan_memory(&moved, &c, &q).unwrap().idealized_bits,
            plan_memory(&pruned, &c, &q).unwrap().idealized_bits
        );
    }

    #[test]
    fn outlier_layers() {
        let order: Vec<usize> = (0..32).rev().collect();
        let p = outlier_plan(&order, OrderingName::Lim, 6, 0.01, 0.001, 4).unwrap();
        let f = p.outlier_fraction_per_layer.as_ref().unwrap();
        assert_eq!(f.iter().filter(|&&x| x == 0.01).count(), 6);
        assert!(order[..6].iter().all(|&i| f[i] == 0.01));
        let low = outlier_plan(&order, OrderingName::Lim, 0, 0.01, 0.001, 4).unwrap();
        assert!(low.outlier_fraction_per_layer.unwrap().iter().all(|&x| x == 0.001));
        let high = outlier_plan(&order, OrderingName::Lim, 32, 0.01, 0.001, 4).unwrap();
        assert!(high.outlier_fraction_per_layer.unwrap().iter().all(|&x| x == 0.01));
        assert!(outlier_plan(&order, OrderingName::Lim, 3, 0.001, 0.01, 4).is_err());
    }

    #[test]
    fn memory_accounting() {
        let c = ModelConfig::default();
        let q = RtnQuantizer::default();
        let full = two_level_plan(&ident(12), OrderingName::Lim, 12, 16, 4).unwrap();
        let m = plan_memory(&full, &c, &q).unwrap();
        let params = (12 * c.block_matrix_elements()) as f64;
        assert_eq!(m.idealized_bytes, 2.0 * params);
        assert_eq!(m.exact_bytes as f64, 2.0 * params);

        // interpolation identity with budget numbers taken from the model
        let c32 = ModelConfig { n_layers: 32, ..c.clone() };
        let lower = plan_memory(&two_level_plan(&ident(32), OrderingName::Lim, 0, 4, 2).unwrap(), &c32, &q).unwrap();
        let higher = plan_memory(&two_level_plan(&ident(32), OrderingName::Lim, 32, 4, 2).unwrap(), &c32, &q).unwrap();
        let mixed = plan_memory(&two_level_plan(&ident(32), OrderingName::Lim, 5, 4, 2).unwrap(), &c32, &q).unwrap();
        let b = Budget { m_available: 0, m_lower: lower.idealized_bits, m_higher: higher.idealized_bits, n_layers: 32 };
        assert_eq!(mixed.idealized_bits as f64, b.interpolated_memory(5));

        let uniform = two_level_plan(&ident(12), OrderingName::Lim, 12, 4, 2).unwrap();
        let pruned = pruning_plan(&ident(12), OrderingName::Lim, 3, 4).unwrap();
        let (u, p) = (plan_memory(&uniform, &c, &q).unwrap(), plan_memory(&pruned, &c, &q).unwrap());
        assert_eq!(p.idealized_bits * 12, u.idealized_bits * 9);
    }

    #[test]
    fn ordering_names() {
        for name in ["lim", "zd", "reverse_lim", "random(17)", "sequential_top"] {
            assert_eq!(name.parse::<OrderingName>().unwrap().to_string(), name);
        }
        assert!("bogus".parse::<OrderingName>().is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let mut p = outlier_plan(&ident(4), OrderingName::Random(3), 1, 0.01, 0.001, 4).unwrap();
        p.budget = Some(Budget { m_available: 1, m_lower: 0, m_higher: 2, n_layers: 4 });
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"ordering_name\":\"random(3)\""));
        assert_eq!(serde_json::from_str::<QuantPlan>(&s).unwrap(), p);
    }

    proptest! {
        #[test]
        fn budget_safety_and_maximality(avail in 0u64..100_000, lower in 0u64..50_000, extra in 1u64..50_000, n in 1usize..80) {
            let b = Budget { m_available: avail, m_lower: lower, m_higher: lower + extra, n_layers: n };
            let k = n_higher_from_budget(&b).unwrap();
            prop_assert!(k <= n);
            if avail >= lower { prop_assert!(b.fits(k)); }
            if k < n && avail >= lower { prop_assert!(!b.fits(k + 1)); }
        }

        #[test]
        fn low_layers_are_the_ordering_tail(seed in any::<u64>(), n in 1usize..40, frac in 0.0f64..=1.0) {
            let order = crate::rng::Rng::new(seed).permutation(n);
            let n_higher = ((n as f64) * frac) as usize;
            let p = two_level_plan(&order, OrderingName::Random(seed), n_higher, 4, 2).unwrap();
            let mut low: Vec<usize> = (0..n).filter(|&i| p.bits_per_layer[i] == 2).collect();
            let mut tail = order[n_higher..].to_vec();
            low.sort_unstable();
            tail.sort_unstable();
            prop_assert_eq!(low, tail);
        }
    }
}
