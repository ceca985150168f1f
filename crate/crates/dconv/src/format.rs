//! CFT1 tensor files: the magic `CFT1`, a little-endian `u32` element code,
//! four little-endian `u64` extents, then the canonical (row-major) payload
//! in little-endian byte order.

use std::io::{Read, Write};
use std::path::Path;

use dconv_core::{Element, Tensor4};

use crate::error::{DconvError, Result};

pub const MAGIC: &[u8; 4] = b"CFT1";

/// Element types a tensor file can hold.
pub trait FileElement: Element {
    const CODE: u32;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! file_element {
    ($t:ty, $code:expr) => {
        impl FileElement for $t {
            const CODE: u32 = $code;
            const SIZE: usize = std::mem::size_of::<$t>();

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("caller passes SIZE bytes"))
            }
        }
    };
}

file_element!(f32, 0);
file_element!(f64, 1);
file_element!(i16, 2);
file_element!(i32, 3);

pub fn write_tensor<T: FileElement>(mut sink: impl Write, tensor: &Tensor4<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 + 4 + 32 + tensor.as_slice().len() * T::SIZE);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&T::CODE.to_le_bytes());
    for d in tensor.dims() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.as_slice() {
        v.write_le(&mut bytes);
    }
    sink.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor<T: FileElement>(mut source: impl Read) -> Result<Tensor4<T>> {
    let mut header = [0u8; 40];
    source.read_exact(&mut header).map_err(|_| DconvError::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(DconvError::Format("bad magic".into()));
    }
    let code = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if code != T::CODE {
        return Err(DconvError::Format(format!("element code {code}, expected {}", T::CODE)));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let raw = u64::from_le_bytes(header[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
        *d = usize::try_from(raw).map_err(|_| DconvError::Format("extent too large".into()))?;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(T::SIZE))
        .ok_or_else(|| DconvError::Format("payload size overflows".into()))?;
    let mut payload = Vec::new();
    source.take(count as u64 + 1).read_to_end(&mut payload)?;
    if payload.len() != count {
        return Err(DconvError::Format(format!("payload has {} bytes, expected {count}", payload.len())));
    }
    let data = payload.chunks_exact(T::SIZE).map(T::read_le).collect();
    Ok(Tensor4::from_vec(dims, data)?)
}

pub fn save_tensor<T: FileElement>(path: &Path, tensor: &Tensor4<T>) -> Result<()> {
    write_tensor(std::io::BufWriter::new(std::fs::File::create(path)?), tensor)
}

pub fn load_tensor<T: FileElement>(path: &Path) -> Result<Tensor4<T>> {
    read_tensor(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor4::from_vec([1, 1, 1, 2], vec![1i16, -2]).unwrap();
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &t).unwrap();
        assert_eq!(&bytes[..4], b"CFT1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[32..40], &2u64.to_le_bytes());
        assert_eq!(&bytes[40..], &[1, 0, 0xfe, 0xff]);
    }

    #[test]
    fn rejects_wrong_code_and_truncation() {
        let t = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &t).unwrap();
        assert!(matches!(read_tensor::<i32>(&bytes[..]), Err(DconvError::Format(_))));
        assert!(matches!(read_tensor::<f32>(&bytes[..bytes.len() - 1]), Err(DconvError::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_tensor::<f32>(&long[..]), Err(DconvError::Format(_))));
        assert_eq!(read_tensor::<f32>(&bytes[..]).unwrap(), t);
    }
}
