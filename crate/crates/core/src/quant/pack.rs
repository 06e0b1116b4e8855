//! Bit packing for 2/4/8-bit codes: LSB-first within each byte, codes in flat
//! row-major order. Two-bit codes `[a, b, c, d]` land in one byte as
//! `a | b << 2 | c << 4 | d << 6`.

use crate::error::{Error, Result};

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        2 | 4 | 8 => Ok(()),
        _ => Err(Error::invalid(format!("unsupported code width {bits}"))),
    }
}

/// Packed length in bytes for `n` codes of `bits` width.
pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let limit = 1u16 << bits;
    if let Some((i, &c)) = codes.iter().enumerate().find(|(_, &c)| c as u16 >= limit) {
        return Err(Error::invalid(format!(
            "code {c} at index {i} does not fit in {bits} bits"
        )));
    }
    if bits == 8 {
        return Ok(codes.to_vec());
    }
    let per_byte = 8 / bits as usize;
    let out = codes
        .chunks(per_byte)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (j, &c)| acc | (c << (j * bits as usize)))
        })
        .collect();
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if bytes.len() != packed_len(n, bits) {
        return Err(Error::invalid(format!(
            "{} packed bytes cannot hold exactly {n} codes of {bits} bits",
            bytes.len()
        )));
    }
    if bits == 8 {
        return Ok(bytes.to_vec());
    }
    let per_byte = 8 / bits as usize;
    let mask = (1u8 << bits) - 1;
    let mut out = Vec::with_capacity(n);
    for &b in bytes {
        for j in 0..per_byte {
            out.push((b >> (j * bits as usize)) & mask);
        }
    }
    out.truncate(n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_bit_layout() {
        assert_eq!(pack_codes(&[0, 1, 2, 3], 2).unwrap(), vec![0xE4]);
        assert_eq!(unpack_codes(&[0xE4], 2, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn four_bit_layout() {
        assert_eq!(pack_codes(&[0x1, 0xF], 4).unwrap(), vec![0xF1]);
    }

    #[test]
    fn partial_trailing_byte() {
        let packed = pack_codes(&[3, 3, 3, 3, 1], 2).unwrap();
        assert_eq!(packed, vec![0xFF, 0x01]);
        assert_eq!(unpack_codes(&packed, 2, 5).unwrap(), vec![3, 3, 3, 3, 1]);
    }

    #[test]
    fn overflow_rejected() {
        assert!(pack_codes(&[4], 2).is_err());
        assert!(pack_codes(&[16], 4).is_err());
        assert!(pack_codes(&[1], 3).is_err());
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(unpack_codes(&[0, 0], 4, 5).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(bits in prop::sample::select(vec![2u8, 4, 8]), raw in prop::collection::vec(any::<u8>(), 0..300)) {
            let mask = ((1u16 << bits) - 1) as u8;
            let codes: Vec<u8> = raw.iter().map(|c| c & mask).collect();
            let packed = pack_codes(&codes, bits).unwrap();
            prop_assert_eq!(packed.len(), packed_len(codes.len(), bits));
            prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
        }
    }
}
