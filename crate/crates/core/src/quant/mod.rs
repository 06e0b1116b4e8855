//! Round-to-nearest weight quantization.
//!
//! Three code layouts share one [`QuantizedTensor`] representation:
//!
//! * group-wise affine (2/4/8 bits): each run of `group_size` elements of the
//!   flattened tensor stores a float scale and a float shift (the group
//!   minimum), and `x ≈ code * scale + shift` with `code ∈ [0, 2^bits - 1]`;
//! * symmetric int8, per tensor or per channel: `x ≈ code * scale` with
//!   `code ∈ [-127, 127]`, stored offset by 128;
//! * outlier affine: group-wise affine where the largest-magnitude fraction of
//!   elements is kept aside as float16 values.
//!
//! Rounding is half away from zero (`f32::round`). A group whose values are
//! all equal gets `scale = 1` and all-zero codes so it reconstructs exactly.

mod container;
pub mod pack;

use std::fmt;
use std::str::FromStr;

use half::f16;
use rayon::prelude::*;

pub use container::{read_quantized, write_quantized};
pub use pack::{pack_codes, packed_len, unpack_codes};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GROUP_SIZE: usize = 128;

/// Bytes per stored outlier: u32 flat index + f16 value.
pub const OUTLIER_ENTRY_BYTES: u64 = 6;

/// Tensors below this size are quantized on the calling thread.
const PAR_MIN_GROUPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    GroupAffine,
    SymmetricPerTensor,
    SymmetricPerChannel,
    OutlierAffine,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::GroupAffine => "group_affine",
            Scheme::SymmetricPerTensor => "symmetric_per_tensor",
            Scheme::SymmetricPerChannel => "symmetric_per_channel",
            Scheme::OutlierAffine => "outlier_affine",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group_affine" => Ok(Scheme::GroupAffine),
            "symmetric_per_tensor" => Ok(Scheme::SymmetricPerTensor),
            "symmetric_per_channel" => Ok(Scheme::SymmetricPerChannel),
            "outlier_affine" => Ok(Scheme::OutlierAffine),
            other => Err(Error::invalid(format!("unknown quantization scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupAffineParams {
    bits: u8,
    group_size: usize,
}

impl GroupAffineParams {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        if !matches!(bits, 2 | 4 | 8) {
            return Err(Error::invalid(format!("group-affine bits must be 2, 4 or 8, got {bits}")));
        }
        if group_size == 0 {
            return Err(Error::invalid("group_size must be positive"));
        }
        Ok(GroupAffineParams { bits, group_size })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    fn max_code(&self) -> f32 {
        ((1u32 << self.bits) - 1) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerChannel(usize),
}

/// Symmetric int8 parameters; the width is always 8 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymmetricParams {
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    scheme: Scheme,
    bits: u8,
    /// Elements per group for affine schemes; for symmetric schemes the
    /// extent of one scale unit along the flattened tensor is implied by
    /// `channel_axis` instead and this is the total element count.
    group_size: usize,
    channel_axis: Option<usize>,
    packed: Vec<u8>,
    scales: Vec<f32>,
    shifts: Vec<f32>,
    outlier_idx: Vec<u32>,
    outlier_val: Vec<f16>,
}

/// Parts of a [`QuantizedTensor`], used to rebuild one from storage.
#[derive(Debug, Clone)]
pub struct QuantizedParts {
    pub shape: Vec<usize>,
    pub scheme: Scheme,
    pub bits: u8,
    pub group_size: usize,
    pub channel_axis: Option<usize>,
    pub packed: Vec<u8>,
    pub scales: Vec<f32>,
    pub shifts: Vec<f32>,
    pub outlier_idx: Vec<u32>,
    pub outlier_val: Vec<f16>,
}

impl QuantizedTensor {
    /// Validates every structural invariant before accepting the parts.
    pub fn from_parts(p: QuantizedParts) -> Result<Self> {
        let bad = |m: String| Err(Error::Format(m));
        if p.shape.is_empty() || p.shape.contains(&0) {
            return bad(format!("invalid quantized shape {:?}", p.shape));
        }
        let n: usize = p.shape.iter().product();
        if p.packed.len() != packed_len(n, p.bits) {
            return bad(format!(
                "packed payload is {} bytes, expected {} for {n} codes of {} bits",
                p.packed.len(),
                packed_len(n, p.bits),
                p.bits
            ));
        }
        // unpack validates the width
        unpack_codes(&p.packed, p.bits, n)?;
        let expected_groups = match p.scheme {
            Scheme::GroupAffine | Scheme::OutlierAffine => {
                if p.group_size == 0 {
                    return bad("group_size must be positive".into());
                }
                n.div_ceil(p.group_size)
            }
            Scheme::SymmetricPerTensor => 1,
            Scheme::SymmetricPerChannel => match p.channel_axis {
                Some(a) if a < p.shape.len() => p.shape[a],
                _ => return bad("per-channel tensor without a valid channel axis".into()),
            },
        };
        let symmetric = matches!(p.scheme, Scheme::SymmetricPerTensor | Scheme::SymmetricPerChannel);
        if symmetric && p.bits != 8 {
            return bad("symmetric schemes are 8-bit only".into());
        }
        let expected_shifts = if symmetric { 0 } else { expected_groups };
        if p.scales.len() != expected_groups || p.shifts.len() != expected_shifts {
            return bad(format!(
                "expected {expected_groups} scales and {expected_shifts} shifts, found {} and {}",
                p.scales.len(),
                p.shifts.len()
            ));
        }
        if p.outlier_idx.len() != p.outlier_val.len() {
            return bad("outlier index/value lengths differ".into());
        }
        if p.scheme != Scheme::OutlierAffine && !p.outlier_idx.is_empty() {
            return bad(format!("scheme {} cannot carry outliers", p.scheme));
        }
        if p.outlier_idx.windows(2).any(|w| w[0] >= w[1])
            || p.outlier_idx.last().is_some_and(|&i| i as usize >= n)
        {
            return bad("outlier indices must be strictly increasing and in range".into());
        }
        Ok(QuantizedTensor {
            shape: p.shape,
            scheme: p.scheme,
            bits: p.bits,
            group_size: p.group_size,
            channel_axis: p.channel_axis,
            packed: p.packed,
            scales: p.scales,
            shifts: p.shifts,
            outlier_idx: p.outlier_idx,
            outlier_val: p.outlier_val,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn channel_axis(&self) -> Option<usize> {
        self.channel_axis
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn shifts(&self) -> &[f32] {
        &self.shifts
    }

    pub fn outlier_indices(&self) -> &[u32] {
        &self.outlier_idx
    }

    pub fn outlier_values(&self) -> &[f16] {
        &self.outlier_val
    }

    /// Raw codes in flat order. Symmetric codes are returned offset by 128.
    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.packed, self.bits, self.numel()).expect("validated on construction")
    }

    /// Exact storage: packed codes, 4 bytes per scale and per shift, 6 per outlier.
    pub fn exact_bytes(&self) -> u64 {
        self.packed.len() as u64
            + 4 * (self.scales.len() + self.shifts.len()) as u64
            + OUTLIER_ENTRY_BYTES * self.outlier_idx.len() as u64
    }

    /// `n * bits`, the payload size ignoring all metadata.
    pub fn idealized_bits(&self) -> u64 {
        self.numel() as u64 * self.bits as u64
    }

    pub fn idealized_bytes(&self) -> f64 {
        self.idealized_bits() as f64 / 8.0
    }
}

/// Number of outliers kept for `fraction` of `n` elements: `ceil(fraction * n)`,
/// where products within 1e-9 of an integer count as that integer so that
/// e.g. 1% of 300 is 3 and not 4.
pub fn outlier_count(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() <= 1e-9 * n.max(1) as f64 {
        nearest
    } else {
        raw.ceil()
    };
    (k.max(0.0) as usize).min(n)
}

/// Exact byte count a group-affine (optionally outlier) tensor of `n`
/// elements would occupy. Agrees with [`QuantizedTensor::exact_bytes`].
pub fn group_affine_exact_bytes(n: usize, bits: u8, group_size: usize, n_outliers: usize) -> u64 {
    packed_len(n, bits) as u64 + 8 * n.div_ceil(group_size) as u64 + OUTLIER_ENTRY_BYTES * n_outliers as u64
}

fn finite_values(t: &Tensor) -> Result<Vec<f32>> {
    let v = t.to_f32_vec()?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite value {} at flat index {i}", v[i])));
    }
    Ok(v)
}

/// Affine statistics and codes for one group. `skip[i]` marks outliers,
/// which are excluded from min/max and receive code 0.
fn affine_group(xs: &[f32], skip: Option<&[bool]>, max_code: f32, codes: &mut [u8]) -> (f32, f32) {
    let kept = |i: usize| skip.is_none_or(|s| !s[i]);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if kept(i) {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    if lo > hi {
        // every element is an outlier
        codes.fill(0);
        return (1.0, 0.0);
    }
    if hi == lo {
        codes.fill(0);
        return (1.0, lo);
    }
    let scale = (hi - lo) / max_code;
    for (i, (c, &x)) in codes.iter_mut().zip(xs).enumerate() {
        *c = if kept(i) {
            ((x - lo) / scale).round().clamp(0.0, max_code) as u8
        } else {
            0
        };
    }
    (scale, lo)
}

fn group_affine_codes(
    xs: &[f32],
    p: GroupAffineParams,
    skip: Option<&[bool]>,
) -> (Vec<u8>, Vec<f32>, Vec<f32>) {
    let g = p.group_size;
    let max_code = p.max_code();
    let mut codes = vec![0u8; xs.len()];
    let run = |(gi, (cs, chunk)): (usize, (&mut [u8], &[f32]))| {
        let sk = skip.map(|s| &s[gi * g..gi * g + chunk.len()]);
        affine_group(chunk, sk, max_code, cs)
    };
    let stats: Vec<(f32, f32)> = if xs.len() / g >= PAR_MIN_GROUPS {
        codes
            .par_chunks_mut(g)
            .zip(xs.par_chunks(g))
            .enumerate()
            .map(run)
            .collect()
    } else {
        codes.chunks_mut(g).zip(xs.chunks(g)).enumerate().map(run).collect()
    };
    let (scales, shifts) = stats.into_iter().unzip();
    (codes, scales, shifts)
}

pub fn quantize_group_affine(t: &Tensor, p: GroupAffineParams) -> Result<QuantizedTensor> {
    let xs = finite_values(t)?;
    let (codes, scales, shifts) = group_affine_codes(&xs, p, None);
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        scheme: Scheme::GroupAffine,
        bits: p.bits,
        group_size: p.group_size,
        channel_axis: None,
        packed: pack_codes(&codes, p.bits)?,
        scales,
        shifts,
        outlier_idx: Vec::new(),
        outlier_val: Vec::new(),
    })
}

/// Group-affine quantization keeping the `ceil(fraction * n)` largest-|x|
/// elements (ties to the lower flat index) as float16 outliers.
pub fn quantize_outlier_affine(
    t: &Tensor,
    p: GroupAffineParams,
    outlier_fraction: f64,
) -> Result<QuantizedTensor> {
    if !(0.0..=1.0).contains(&outlier_fraction) {
        return Err(Error::invalid(format!(
            "outlier fraction must lie in [0, 1], got {outlier_fraction}"
        )));
    }
    let xs = finite_values(t)?;
    let n = xs.len();
    if n > u32::MAX as usize {
        return Err(Error::invalid("tensor too large for 32-bit outlier indices"));
    }
    let k = outlier_count(n, outlier_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[b].abs().total_cmp(&xs[a].abs()).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();

    let mut skip = vec![false; n];
    picked.iter().for_each(|&i| skip[i] = true);
    let (codes, scales, shifts) = group_affine_codes(&xs, p, Some(&skip));
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        scheme: Scheme::OutlierAffine,
        bits: p.bits,
        group_size: p.group_size,
        channel_axis: None,
        packed: pack_codes(&codes, p.bits)?,
        scales,
        shifts,
        outlier_val: picked.iter().map(|&i| f16::from_f32(xs[i])).collect(),
        outlier_idx: picked.into_iter().map(|i| i as u32).collect(),
    })
}

/// Maps a flat index to its channel along `axis` for a row-major shape.
fn channel_of(shape: &[usize], axis: usize) -> impl Fn(usize) -> usize {
    let stride: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    move |i| (i / stride) % extent
}

pub fn quantize_symmetric_int8(t: &Tensor, p: SymmetricParams) -> Result<QuantizedTensor> {
    let xs = finite_values(t)?;
    let shape = t.shape().to_vec();
    let (n_units, axis) = match p.granularity {
        Granularity::PerTensor => (1, None),
        Granularity::PerChannel(a) => {
            if a >= shape.len() {
                return Err(Error::invalid(format!(
                    "channel axis {a} is out of range for shape {shape:?}"
                )));
            }
            (shape[a], Some(a))
        }
    };
    let unit_of: Box<dyn Fn(usize) -> usize> = match axis {
        None => Box::new(|_| 0),
        Some(a) => Box::new(channel_of(&shape, a)),
    };
    let mut absmax = vec![0.0f32; n_units];
    for (i, &x) in xs.iter().enumerate() {
        let u = unit_of(i);
        absmax[u] = absmax[u].max(x.abs());
    }
    let scales: Vec<f32> = absmax
        .iter()
        .map(|&m| if m == 0.0 { 1.0 } else { m / 127.0 })
        .collect();
    let codes: Vec<u8> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| ((x / scales[unit_of(i)]).round().clamp(-127.0, 127.0) as i32 + 128) as u8)
        .collect();
    let n = xs.len();
    Ok(QuantizedTensor {
        shape,
        scheme: if axis.is_some() {
            Scheme::SymmetricPerChannel
        } else {
            Scheme::SymmetricPerTensor
        },
        bits: 8,
        group_size: n,
        channel_axis: axis,
        packed: codes,
        scales,
        shifts: Vec::new(),
        outlier_idx: Vec::new(),
        outlier_val: Vec::new(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let codes = q.codes();
    let mut out: Vec<f32> = match q.scheme {
        Scheme::GroupAffine | Scheme::OutlierAffine => codes
            .chunks(q.group_size)
            .zip(q.scales.iter().zip(&q.shifts))
            .flat_map(|(cs, (&s, &z))| cs.iter().map(move |&c| c as f32 * s + z))
            .collect(),
        Scheme::SymmetricPerTensor => {
            let s = q.scales[0];
            codes.iter().map(|&c| (c as i32 - 128) as f32 * s).collect()
        }
        Scheme::SymmetricPerChannel => {
            let unit = channel_of(&q.shape, q.channel_axis.expect("validated"));
            codes
                .iter()
                .enumerate()
                .map(|(i, &c)| (c as i32 - 128) as f32 * q.scales[unit(i)])
                .collect()
        }
    };
    for (&i, v) in q.outlier_idx.iter().zip(&q.outlier_val) {
        out[i as usize] = v.to_f32();
    }
    Tensor::from_f32(q.shape.clone(), out).expect("shape validated on construction")
}

/// Weight quantization backend used when applying a plan. `bits` is one of
/// 2, 4 or 8; 16-bit layers never reach the backend.
pub trait WeightQuantizer: Sync {
    fn name(&self) -> &str;

    fn quantize(&self, t: &Tensor, bits: u8, outlier_fraction: f64) -> Result<QuantizedTensor>;

    /// Exact bytes [`WeightQuantizer::quantize`] would produce for this shape.
    fn exact_bytes(&self, shape: &[usize], bits: u8, outlier_fraction: f64) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Int8Mode {
    GroupAffine,
    Symmetric(Granularity),
}

/// Round-to-nearest kernels: group-affine for every width, optionally
/// symmetric for int8.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtnQuantizer {
    pub group_size: usize,
    pub int8: Int8Mode,
}

impl RtnQuantizer {
    pub fn new(group_size: usize) -> Self {
        RtnQuantizer {
            group_size,
            int8: Int8Mode::GroupAffine,
        }
    }
}

impl Default for RtnQuantizer {
    fn default() -> Self {
        RtnQuantizer::new(DEFAULT_GROUP_SIZE)
    }
}

impl WeightQuantizer for RtnQuantizer {
    fn name(&self) -> &str {
        "rtn"
    }

    fn quantize(&self, t: &Tensor, bits: u8, outlier_fraction: f64) -> Result<QuantizedTensor> {
        if let (8, Int8Mode::Symmetric(granularity)) = (bits, self.int8) {
            if outlier_fraction > 0.0 {
                return Err(Error::invalid("symmetric int8 kernels do not support outliers"));
            }
            return quantize_symmetric_int8(t, SymmetricParams { granularity });
        }
        let p = GroupAffineParams::new(bits, self.group_size)?;
        if outlier_fraction > 0.0 {
            quantize_outlier_affine(t, p, outlier_fraction)
        } else {
            quantize_group_affine(t, p)
        }
    }

    fn exact_bytes(&self, shape: &[usize], bits: u8, outlier_fraction: f64) -> u64 {
        let n: usize = shape.iter().product();
        match (bits, self.int8) {
            (8, Int8Mode::Symmetric(Granularity::PerTensor)) => n as u64 + 4,
            (8, Int8Mode::Symmetric(Granularity::PerChannel(a))) => n as u64 + 4 * shape[a] as u64,
            _ => group_affine_exact_bytes(n, bits, self.group_size, outlier_count(n, outlier_fraction)),
        }
    }
}
