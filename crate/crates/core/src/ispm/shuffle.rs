//! Bit-plane transposition of quantized codes.
//!
//! Plane `j` holds bit `j` of every code, LSB plane first. Within a plane,
//! code `i` sits at bit `i % 8` of byte `i / 8`; the final partial byte is
//! zero-padded. Each plane is `ceil(n / 8)` bytes.

use super::quant::check_bits;
use super::IspmError;

pub fn plane_len(n: usize) -> usize {
    n.div_ceil(8)
}

pub fn bitshuffle(codes: &[u16], bits: u8) -> Result<Vec<u8>, IspmError> {
    check_bits(bits)?;
    let limit = 1u32 << bits;
    if let Some(index) = codes.iter().position(|&q| q as u32 >= limit) {
        return Err(IspmError::ValueOverflow { index, value: codes[index], bits });
    }
    let plane = plane_len(codes.len());
    let mut out = vec![0u8; plane * bits as usize];
    if plane == 0 {
        return Ok(out);
    }
    for (j, dst) in out.chunks_exact_mut(plane).enumerate() {
        for (byte, chunk) in dst.iter_mut().zip(codes.chunks(8)) {
            *byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, &q)| acc | ((((q >> j) & 1) as u8) << k));
        }
    }
    Ok(out)
}

pub fn bitunshuffle(planes: &[u8], bits: u8, n: usize) -> Result<Vec<u16>, IspmError> {
    check_bits(bits)?;
    let plane = plane_len(n);
    if planes.len() != plane * bits as usize {
        return Err(IspmError::CorruptPayload(format!(
            "{} bit-plane bytes for {n} values at {bits} bits, expected {}",
            planes.len(),
            plane * bits as usize
        )));
    }
    let pad_mask: u8 = match n % 8 {
        0 => 0,
        r => !((1u8 << r) - 1),
    };
    let mut codes = vec![0u16; n];
    if plane == 0 {
        return Ok(codes);
    }
    for (j, src) in planes.chunks_exact(plane).enumerate() {
        if plane > 0 && src[plane - 1] & pad_mask != 0 {
            return Err(IspmError::CorruptPayload("non-zero padding bits".into()));
        }
        for (chunk, &byte) in codes.chunks_mut(8).zip(src) {
            for (k, q) in chunk.iter_mut().enumerate() {
                *q |= (((byte >> k) & 1) as u16) << j;
            }
        }
    }
    Ok(codes)
}
