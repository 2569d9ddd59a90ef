//! `VPT1` binary tensor files.
//!
//! Layout: magic `VPT1`, u8 dtype code (0 = f32, 1 = f64), u8 rank, `rank` little-endian
//! u32 extents, then the raw little-endian scalars in row-major order.

use std::fs;
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VPT1";

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * S::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Dtype and shape of an encoded tensor, without decoding the payload.
pub fn peek_header(bytes: &[u8]) -> Result<(DType, Vec<usize>)> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing VPT1 magic".into()));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated VPT1 header".into()));
    }
    let shape = (0..rank)
        .map(|i| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        })
        .collect();
    Ok((dtype, shape))
}

/// Decodes into `S`, converting from the stored dtype when they differ.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (dtype, shape) = peek_header(bytes)?;
    let header = 6 + 4 * shape.len();
    let numel: usize = shape.iter().product();
    let size = dtype.size();
    if bytes.len() != header + numel * size {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {} for shape {shape:?}",
            bytes.len() - header,
            numel * size
        )));
    }
    let payload = &bytes[header..];
    let data = payload
        .chunks_exact(size)
        .map(|c| match dtype {
            DType::F32 => S::from_f64(f32::read_le(c) as f64),
            DType::F64 => S::from_f64(f64::read_le(c)),
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn save<S: Scalar>(t: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"VPT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode::<f32>(b"VPT2\0\0").is_err());
        let mut b = encode(&Tensor::<f64>::zeros(&[3]));
        b.pop();
        assert!(decode::<f64>(&b).is_err());
        b.push(0);
        b[4] = 7;
        assert!(decode::<f64>(&b).is_err());
    }

    #[test]
    fn scalar_tensor() {
        let t = Tensor::<f64>::scalar(3.5);
        assert_eq!(decode::<f64>(&encode(&t)).unwrap(), t);
    }

    proptest! {
        #[test]
        fn round_trip_f64(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let t = crate::verify::random_tensor(&shape, seed, 10.0);
            let back: Tensor<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn round_trip_f32(values in prop::collection::vec(-1e6f32..1e6, 1..40)) {
            let t = Tensor::new(vec![values.len()], values).unwrap();
            let back: Tensor<f32> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
