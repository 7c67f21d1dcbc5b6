//! Latent codes and the code algebra shared by every pipeline: broadcasting a
//! single `W` code to all synthesis layers and splitting two `W+` codes at a
//! layer index.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five latent spaces of a style-based generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentSpace {
    Z,
    ZPlus,
    W,
    WPlus,
    V,
}

impl LatentSpace {
    /// Spaces that carry one row per synthesis layer.
    pub fn is_per_layer(self) -> bool {
        matches!(self, LatentSpace::ZPlus | LatentSpace::WPlus)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LatentSpace::Z => "Z",
            LatentSpace::ZPlus => "ZPlus",
            LatentSpace::W => "W",
            LatentSpace::WPlus => "WPlus",
            LatentSpace::V => "V",
        }
    }
}

impl fmt::Display for LatentSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LatentSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "z" => Ok(LatentSpace::Z),
            "zplus" | "z+" => Ok(LatentSpace::ZPlus),
            "w" => Ok(LatentSpace::W),
            "wplus" | "w+" => Ok(LatentSpace::WPlus),
            "v" => Ok(LatentSpace::V),
            other => Err(Error::InvalidParameter(format!("unknown latent space `{other}`"))),
        }
    }
}

/// A tagged point in one latent space.
///
/// Values are a rank-2 `f32` tensor: `1×d` for `Z`/`W`, `L×d` for the
/// per-layer spaces and `1×k` for `V`. Shape and finiteness are checked at
/// construction.
#[derive(Debug, Clone)]
pub struct LatentCode {
    space: LatentSpace,
    values: Tensor,
}

impl LatentCode {
    pub fn new(space: LatentSpace, values: Tensor) -> Result<Self> {
        let dims = values.dims().to_vec();
        if dims.len() != 2 {
            return Err(Error::InvalidCode(format!(
                "{space} code must be rank 2, got shape {dims:?}"
            )));
        }
        if !space.is_per_layer() && dims[0] != 1 {
            return Err(Error::InvalidCode(format!(
                "{space} code must have exactly one row, got {}",
                dims[0]
            )));
        }
        if dims[0] == 0 || dims[1] == 0 {
            return Err(Error::InvalidCode(format!("{space} code is empty")));
        }
        let values = values.to_dtype(DType::F32)?.contiguous()?;
        let flat = values.flatten_all()?.to_vec1::<f32>()?;
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCode(format!(
                "{space} code has a non-finite entry at flat index {i}"
            )));
        }
        Ok(Self { space, values })
    }

    pub fn from_vec(space: LatentSpace, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidCode(format!(
                "expected {} values for a {rows}x{cols} code, got {}",
                rows * cols,
                data.len()
            )));
        }
        Self::new(space, Tensor::from_vec(data, (rows, cols), &Device::Cpu)?)
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.values
            .flatten_all()
            .and_then(|t| t.to_vec1::<f32>())
            .expect("latent code is a contiguous f32 tensor")
    }

    pub fn row(&self, i: usize) -> Result<Vec<f32>> {
        if i >= self.rows() {
            return Err(Error::InvalidParameter(format!(
                "row {i} out of range for a {}-row code",
                self.rows()
            )));
        }
        Ok(self.values.get(i)?.to_vec1::<f32>()?)
    }

    /// Bitwise equality of space, shape and every value.
    pub fn bit_eq(&self, other: &LatentCode) -> bool {
        self.space == other.space
            && self.values.dims() == other.values.dims()
            && self
                .to_vec()
                .iter()
                .zip(other.to_vec())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Raw little-endian `f32` bytes, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.to_vec().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(space: LatentSpace, rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != rows * cols * 4 {
            return Err(Error::InvalidCode(format!(
                "expected {} bytes for a {rows}x{cols} f32 code, got {}",
                rows * cols * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_vec(space, rows, cols, data)
    }
}

/// Replicates a `W` code into every synthesis layer.
pub fn broadcast_w(code: &LatentCode, layer_count: usize) -> Result<LatentCode> {
    if code.space() != LatentSpace::W {
        return Err(Error::InvalidCode(format!(
            "broadcast expects a W code, got {}",
            code.space()
        )));
    }
    if layer_count == 0 {
        return Err(Error::InvalidParameter("layer count must be positive".into()));
    }
    let values = code.values().broadcast_as((layer_count, code.dim()))?.contiguous()?;
    LatentCode::new(LatentSpace::WPlus, values)
}

/// Rows `[0, k)` come from `content`, rows `[k, L)` from `tail`.
pub fn mix_codes(content: &LatentCode, tail: &LatentCode, k: usize) -> Result<LatentCode> {
    for (name, code) in [("content", content), ("tail", tail)] {
        if code.space() != LatentSpace::WPlus {
            return Err(Error::InvalidCode(format!(
                "{name} code must be WPlus, got {}",
                code.space()
            )));
        }
    }
    if content.values().dims() != tail.values().dims() {
        return Err(Error::InvalidCode(format!(
            "content shape {:?} differs from tail shape {:?}",
            content.values().dims(),
            tail.values().dims()
        )));
    }
    let layers = content.rows();
    if k > layers {
        return Err(Error::InvalidParameter(format!(
            "mix index {k} outside [0, {layers}]"
        )));
    }
    if k == 0 {
        return Ok(tail.clone());
    }
    if k == layers {
        return Ok(content.clone());
    }
    let head = content.values().narrow(0, 0, k)?;
    let rest = tail.values().narrow(0, k, layers - k)?;
    LatentCode::new(LatentSpace::WPlus, Tensor::cat(&[&head, &rest], 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wplus(rows: usize, cols: usize, offset: f32) -> LatentCode {
        let data = (0..rows * cols).map(|i| i as f32 + offset).collect();
        LatentCode::from_vec(LatentSpace::WPlus, rows, cols, data).unwrap()
    }

    #[test]
    fn rejects_multi_row_w_code() {
        let err = LatentCode::from_vec(LatentSpace::W, 2, 3, vec![0.0; 6]).unwrap_err();
        assert!(matches!(err, Error::InvalidCode(_)));
    }

    #[test]
    fn rejects_non_finite_entries() {
        let err = LatentCode::from_vec(LatentSpace::Z, 1, 2, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidCode(_)));
    }

    #[test]
    fn broadcast_rows_equal_source() {
        let w = LatentCode::from_vec(LatentSpace::W, 1, 4, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let plus = broadcast_w(&w, 18).unwrap();
        assert_eq!(plus.rows(), 18);
        for i in 0..18 {
            assert_eq!(plus.row(i).unwrap(), w.row(0).unwrap());
        }
    }

    #[test]
    fn mixing_endpoints() {
        let a = wplus(10, 3, 0.0);
        let b = wplus(10, 3, 100.0);
        assert!(mix_codes(&a, &b, 0).unwrap().bit_eq(&b));
        assert!(mix_codes(&a, &b, 10).unwrap().bit_eq(&a));
        assert!(matches!(mix_codes(&a, &b, 11), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn mixing_at_six_of_eighteen() {
        let a = wplus(18, 2, 0.0);
        let b = wplus(18, 2, 1000.0);
        let m = mix_codes(&a, &b, 6).unwrap();
        for i in 0..6 {
            assert_eq!(m.row(i).unwrap(), a.row(i).unwrap());
        }
        for i in 6..18 {
            assert_eq!(m.row(i).unwrap(), b.row(i).unwrap());
        }
    }

    #[test]
    fn byte_round_trip() {
        let a = wplus(3, 5, -7.5);
        let back = LatentCode::from_le_bytes(LatentSpace::WPlus, 3, 5, &a.to_le_bytes()).unwrap();
        assert!(a.bit_eq(&back));
    }
}
