//! Input-specific linear quantization.
//!
//! Each tensor is quantized against its own min/max: with `L = 2^b - 1`
//! levels the multiplier is `2^s = L / (max - min)` and an element `d`
//! becomes `round_half_even((d - min) * 2^s)`. Only `min` and `s` travel
//! with the payload.

use super::IspmError;
use crate::tensor::Tensor;

pub const MAX_BITS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantHeader {
    pub val_min: f32,
    /// Base-2 log of the quantization multiplier.
    pub scale_exp: f64,
    /// Set when every element equals `val_min`; no codes are emitted.
    pub constant: bool,
}

impl QuantHeader {
    /// `max` as implied by the header for a `bits`-wide grid.
    pub fn val_max(&self, bits: u8) -> f64 {
        if self.constant {
            self.val_min as f64
        } else {
            self.val_min as f64 + levels(bits) * (-self.scale_exp).exp2()
        }
    }
}

pub(crate) fn levels(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64
}

pub(crate) fn check_bits(bits: u8) -> Result<(), IspmError> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(IspmError::InvalidBitwidth(bits))
    }
}

/// Worst-case absolute reconstruction error, excluding float rounding.
pub fn error_bound(min: f32, max: f32, bits: u8) -> f64 {
    0.5 * (max as f64 - min as f64) / levels(bits)
}

pub fn isquant(t: &Tensor, bits: u8) -> Result<(QuantHeader, Vec<u16>), IspmError> {
    check_bits(bits)?;
    if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(IspmError::NonFiniteInput { index });
    }
    let (min, max) = t.min_max();
    if min == max {
        let header = QuantHeader { val_min: min, scale_exp: 0.0, constant: true };
        return Ok((header, Vec::new()));
    }
    let top = levels(bits);
    let multiplier = top / (max as f64 - min as f64);
    let header = QuantHeader {
        val_min: min,
        scale_exp: multiplier.log2(),
        constant: false,
    };
    let base = min as f64;
    let codes = t
        .data()
        .iter()
        .map(|&d| ((d as f64 - base) * multiplier).round_ties_even().clamp(0.0, top) as u16)
        .collect();
    Ok((header, codes))
}

pub fn dequant(header: &QuantHeader, bits: u8, shape: &[usize], codes: &[u16]) -> Result<Tensor, IspmError> {
    check_bits(bits)?;
    let len: usize = shape.iter().product();
    if header.constant {
        if !codes.is_empty() {
            return Err(IspmError::HeaderMismatch(format!(
                "constant tensor carries {} codes",
                codes.len()
            )));
        }
        return Tensor::new(shape.to_vec(), vec![header.val_min; len])
            .map_err(|e| IspmError::HeaderMismatch(e.to_string()));
    }
    if codes.len() != len {
        return Err(IspmError::HeaderMismatch(format!(
            "shape {shape:?} needs {len} codes, found {}",
            codes.len()
        )));
    }
    if !header.scale_exp.is_finite() || !header.val_min.is_finite() {
        return Err(IspmError::HeaderMismatch("non-finite quantization header".into()));
    }
    let step = (-header.scale_exp).exp2();
    let base = header.val_min as f64;
    let data = codes.iter().map(|&q| (base + q as f64 * step) as f32).collect();
    Tensor::new(shape.to_vec(), data).map_err(|e| IspmError::HeaderMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(values: &[f32]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    /// Exhaustive nearest-code search with ties to the even code.
    fn oracle_codes(values: &[f32], bits: u8) -> Vec<u16> {
        let (min, max) = t(values).min_max();
        let step = (max as f64 - min as f64) / levels(bits);
        values
            .iter()
            .map(|&v| {
                let mut best = 0u32;
                let mut best_err = f64::INFINITY;
                for q in 0..(1u32 << bits) {
                    let err = (min as f64 + q as f64 * step - v as f64).abs();
                    if err < best_err - 1e-12 || ((err - best_err).abs() <= 1e-12 && q % 2 == 0) {
                        best = q;
                        best_err = err;
                    }
                }
                best as u16
            })
            .collect()
    }

    #[test]
    fn unit_grid_is_identity() {
        let (h, q) = isquant(&t(&[0.0, 1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(h.scale_exp, 0.0);
        assert_eq!(q, vec![0, 1, 2, 3]);
        let back = dequant(&h, 2, &[4], &q).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_tensor_emits_no_codes() {
        let (h, q) = isquant(&t(&[5.0; 6]), 8).unwrap();
        assert!(h.constant);
        assert!(q.is_empty());
        assert_eq!(h.val_min, 5.0);
        assert_eq!(dequant(&h, 8, &[2, 3], &q).unwrap().data(), &[5.0; 6]);
    }

    #[test]
    fn midpoint_rounds_half_to_even() {
        let values = [-1.0, 0.0, 1.0];
        let (h, q) = isquant(&t(&values), 4).unwrap();
        assert!((h.scale_exp.exp2() - 7.5).abs() < 1e-12);
        assert_eq!(q, vec![0, 8, 15]);
        assert_eq!(q, oracle_codes(&values, 4));
        let back = dequant(&h, 4, &[3], &q).unwrap();
        let mid_err = (back.data()[1] as f64 - 0.0).abs();
        assert!((mid_err - 8.0 / 7.5 + 1.0).abs() < 1e-6);
        assert!(mid_err <= 1.0 / 15.0 + 1e-7);
    }

    #[test]
    fn codes_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bits in 1..=8 {
            let values: Vec<f32> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
            let (_, q) = isquant(&t(&values), bits).unwrap();
            assert_eq!(q, oracle_codes(&values, bits), "bits={bits}");
        }
    }

    #[test]
    fn eight_bit_error_bound_on_uniform_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f32> = (0..1000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let src = t(&values);
        let (h, q) = isquant(&src, 8).unwrap();
        let back = dequant(&h, 8, &[1000], &q).unwrap();
        let (min, max) = src.min_max();
        let bound = error_bound(min, max, 8) + 1e-6;
        assert!(bound <= 6.0 / 255.0 / 2.0 + 1e-6);
        assert!((back.max_abs_diff(&src) as f64) <= bound);
    }

    #[test]
    fn implied_max_matches_source_max() {
        let (h, _) = isquant(&t(&[-2.5, 0.125, 7.75]), 5).unwrap();
        assert!((h.val_max(5) - 7.75).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            isquant(&t(&[1.0, f32::NAN]), 4),
            Err(IspmError::NonFiniteInput { index: 1 })
        ));
        assert!(matches!(isquant(&t(&[1.0]), 0), Err(IspmError::InvalidBitwidth(0))));
        assert!(matches!(isquant(&t(&[1.0]), 17), Err(IspmError::InvalidBitwidth(17))));
        let (h, q) = isquant(&t(&[0.0, 1.0]), 4).unwrap();
        assert!(matches!(dequant(&h, 4, &[3], &q), Err(IspmError::HeaderMismatch(_))));
    }
}
