//! Storage of quantized tensors inside a [`NamedTensorMap`].
//!
//! A quantized tensor `T` becomes the auxiliary tensors `T.qweight` (packed
//! codes, U8), `T.scales` (F32), `T.shifts` (F32, absent for symmetric
//! schemes), `T.outlier_idx` (I32) and `T.outlier_val` (F16) when outliers
//! exist, plus metadata keys `T.bits`, `T.group_size`, `T.scheme`, `T.shape`
//! and, for per-channel tensors, `T.channel_axis`.

use half::f16;

use super::{QuantizedParts, QuantizedTensor, Scheme};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensorMap, Tensor, TensorData};

pub fn write_quantized(map: &mut NamedTensorMap, name: &str, q: &QuantizedTensor) -> Result<()> {
    map.insert(format!("{name}.qweight"), Tensor::from_u8(q.packed().to_vec())?);
    map.insert(
        format!("{name}.scales"),
        Tensor::from_f32(vec![q.scales().len()], q.scales().to_vec())?,
    );
    if !q.shifts().is_empty() {
        map.insert(
            format!("{name}.shifts"),
            Tensor::from_f32(vec![q.shifts().len()], q.shifts().to_vec())?,
        );
    }
    if !q.outlier_indices().is_empty() {
        let idx = q.outlier_indices().iter().map(|&i| i as i32).collect();
        map.insert(format!("{name}.outlier_idx"), Tensor::from_i32(idx)?);
        let vals = q.outlier_values().to_vec();
        map.insert(format!("{name}.outlier_val"), Tensor::from_f16(vec![vals.len()], vals)?);
    }
    let meta = &mut map.metadata;
    meta.insert(format!("{name}.bits"), q.bits().to_string());
    meta.insert(format!("{name}.group_size"), q.group_size().to_string());
    meta.insert(format!("{name}.scheme"), q.scheme().to_string());
    meta.insert(format!("{name}.shape"), serde_json::to_string(q.shape())?);
    if let Some(axis) = q.channel_axis() {
        meta.insert(format!("{name}.channel_axis"), axis.to_string());
    }
    Ok(())
}

/// Reads back the quantized tensor stored under `name`, or `None` when the
/// map has no `name.qweight` entry.
pub fn read_quantized(map: &NamedTensorMap, name: &str) -> Option<Result<QuantizedTensor>> {
    let packed = map.get(&format!("{name}.qweight"))?;
    Some(read_parts(map, name, packed))
}

fn read_parts(map: &NamedTensorMap, name: &str, packed: &Tensor) -> Result<QuantizedTensor> {
    let fmt_err = |what: &str| Error::Format(format!("quantized tensor `{name}`: {what}"));
    let meta = |key: &str| {
        map.metadata
            .get(&format!("{name}.{key}"))
            .ok_or_else(|| fmt_err(&format!("missing metadata `{name}.{key}`")))
    };
    let bits: u8 = meta("bits")?.parse().map_err(|_| fmt_err("bad bits"))?;
    let group_size: usize = meta("group_size")?.parse().map_err(|_| fmt_err("bad group_size"))?;
    let scheme: Scheme = meta("scheme")?.parse()?;
    let shape: Vec<usize> = serde_json::from_str(meta("shape")?).map_err(|_| fmt_err("bad shape"))?;
    let channel_axis = match map.metadata.get(&format!("{name}.channel_axis")) {
        Some(a) => Some(a.parse().map_err(|_| fmt_err("bad channel_axis"))?),
        None => None,
    };

    let TensorData::U8(packed) = packed.data() else {
        return Err(fmt_err("qweight must be U8"));
    };
    let floats = |key: &str| -> Result<Vec<f32>> {
        match map.get(&format!("{name}.{key}")) {
            None => Ok(Vec::new()),
            Some(t) => match t.data() {
                TensorData::F32(v) => Ok(v.clone()),
                _ => Err(fmt_err(&format!("{key} must be F32"))),
            },
        }
    };
    let outlier_idx = match map.get(&format!("{name}.outlier_idx")).map(Tensor::data) {
        None => Vec::new(),
        Some(TensorData::I32(v)) => v
            .iter()
            .map(|&i| u32::try_from(i).map_err(|_| fmt_err("negative outlier index")))
            .collect::<Result<_>>()?,
        Some(_) => return Err(fmt_err("outlier_idx must be I32")),
    };
    let outlier_val: Vec<f16> = match map.get(&format!("{name}.outlier_val")).map(Tensor::data) {
        None => Vec::new(),
        Some(TensorData::F16(v)) => v.clone(),
        Some(_) => return Err(fmt_err("outlier_val must be F16")),
    };
    QuantizedTensor::from_parts(QuantizedParts {
        shape,
        scheme,
        bits,
        group_size,
        channel_axis,
        packed: packed.clone(),
        scales: floats("scales")?,
        shifts: floats("shifts")?,
        outlier_idx,
        outlier_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{
        quantize_outlier_affine, quantize_symmetric_int8, GroupAffineParams, Granularity, SymmetricParams,
    };

    fn sample() -> Tensor {
        let v: Vec<f32> = (0..24).map(|i| ((i * 37) % 23) as f32 * 0.1 - 1.0).collect();
        Tensor::from_f32(vec![4, 6], v).unwrap()
    }

    #[test]
    fn outlier_tensor_survives_container() {
        let q = quantize_outlier_affine(&sample(), GroupAffineParams::new(2, 5).unwrap(), 0.1).unwrap();
        let mut m = NamedTensorMap::new();
        write_quantized(&mut m, "blocks.0.attn_q", &q).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = NamedTensorMap::from_bytes(&bytes).unwrap();
        let q2 = read_quantized(&back, "blocks.0.attn_q").unwrap().unwrap();
        assert_eq!(q, q2);
    }

    #[test]
    fn per_channel_survives_container() {
        let q = quantize_symmetric_int8(&sample(), SymmetricParams { granularity: Granularity::PerChannel(1) })
            .unwrap();
        let mut m = NamedTensorMap::new();
        write_quantized(&mut m, "w", &q).unwrap();
        assert!(m.get("w.shifts").is_none());
        let q2 = read_quantized(&m, "w").unwrap().unwrap();
        assert_eq!(q, q2);
        assert!(read_quantized(&m, "other").is_none());
    }
}
