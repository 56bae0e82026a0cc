//! Dense row-major `f32` tensors and their on-disk container.

use std::io::{self, Read, Write};

use thiserror::Error;

const FILE_MAGIC: &[u8; 4] = b"OLTN";
const FILE_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} has a zero or missing dimension")]
    EmptyShape(Vec<usize>),
    #[error("malformed tensor file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A dense n-dimensional array of 32-bit reals.
///
/// Feature maps are `[channels, height, width]` and vectors are `[len]`;
/// batch size is always one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::EmptyShape(shape));
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let len = shape.iter().product::<usize>();
        Self::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data viewed under another shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    /// Index of the largest element; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self, TensorError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(TensorError::Malformed(format!(
                "{} bytes is not a whole number of f32 values",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data)
    }

    /// Writes the tensor file container: `OLTN`, version, rank, u32 dims,
    /// then little-endian f32 data.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        w.write_all(FILE_MAGIC)?;
        w.write_all(&[FILE_VERSION, self.shape.len() as u8])?;
        for d in &self.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        w.write_all(&self.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 6 || &bytes[..4] != FILE_MAGIC {
            return Err(TensorError::Malformed("missing OLTN magic".into()));
        }
        if bytes[4] != FILE_VERSION {
            return Err(TensorError::Malformed(format!(
                "unsupported tensor file version {}",
                bytes[4]
            )));
        }
        let rank = bytes[5] as usize;
        let dims_end = 6 + rank * 4;
        if bytes.len() < dims_end {
            return Err(TensorError::Malformed("truncated shape".into()));
        }
        let shape: Vec<usize> = bytes[6..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let expected = shape.iter().product::<usize>() * 4;
        if bytes.len() - dims_end != expected {
            return Err(TensorError::Malformed(format!(
                "expected {expected} data bytes, found {}",
                bytes.len() - dims_end
            )));
        }
        Self::from_le_bytes(shape, &bytes[dims_end..])
    }
}
