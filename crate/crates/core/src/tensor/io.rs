//! Flat binary tensor records.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! rank: u32 | dims: u32 * rank | precision: u8 (0 = fp32, 1 = fp64) | scalars
//! ```
//!
//! Scalars are little-endian `f32` or `f64` according to the precision tag.

use std::io::{Read, Write};

use super::{Precision, Result, Shape, Tensor, TensorError};

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u32::try_from(t.rank()).map_err(|_| TensorError::Format("rank overflow".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dim {d} overflows u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[t.precision().tag()])?;
    match t.precision() {
        Precision::F32 => {
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Precision::F64 => {
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank == 0 {
        return Err(TensorError::Format("rank 0".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let shape = Shape::new(dims).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let precision = Precision::from_tag(tag[0])
        .ok_or_else(|| TensorError::Format(format!("unknown precision tag {}", tag[0])))?;
    let n = shape.numel();
    let mut data = Vec::with_capacity(n);
    match precision {
        Precision::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        Precision::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
    }
    Ok(Tensor {
        shape,
        data,
        precision,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl Tensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.rank() + self.byte_size());
        write_tensor(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
        read_tensor(&mut bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(bytes[12], 1);
        assert_eq!(&bytes[13..21], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 3 * 8);

        let h = t.with_precision(Precision::F32).to_bytes();
        assert_eq!(h[12], 0);
        assert_eq!(&h[13..17], &1.0f32.to_le_bytes());
        assert_eq!(h.len(), 13 + 3 * 4);
    }

    #[test]
    fn truncated_and_bad_tag_records_fail() {
        let bytes = Tensor::vector(vec![1.0, 2.0]).unwrap().to_bytes();
        assert!(Tensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(Tensor::from_bytes(&bad), Err(TensorError::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>(), f32_tag in any::<bool>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let mut t = Tensor::from_vec(dims, data).unwrap();
            if f32_tag {
                t = t.with_precision(Precision::F32);
            }
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
