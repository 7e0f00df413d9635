//! `PTSR` tensor files.
//!
//! ```text
//! "PTSR" | version u8 = 1 | dtype u8 | rank u8 | 0u8 | rank x u32 dims | payload
//! ```
//! dtype codes: 0 f32, 1 i8, 2 i32, 3 f64. Everything little-endian.

use std::path::Path;

use super::bytes::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"PTSR";
pub const VERSION: u8 = 1;

fn encode_typed<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE.code(), t.shape().len() as u8, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Appends the encoding of `t` to `out`.
pub fn encode_tensor(t: &AnyTensor, out: &mut Vec<u8>) {
    match t {
        AnyTensor::F32(t) => encode_typed(t, out),
        AnyTensor::F64(t) => encode_typed(t, out),
        AnyTensor::I8(t) => encode_typed(t, out),
        AnyTensor::I32(t) => encode_typed(t, out),
    }
}

/// Header plus dims, in bytes, for a tensor of the given rank.
pub fn header_len(rank: usize) -> usize {
    8 + 4 * rank
}

fn decode_typed<T: Element>(r: &mut Reader, shape: Vec<usize>) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let size = T::DTYPE.size_of();
    let bytes = r.take(numel * size, "tensor payload")?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub(crate) fn decode_tensor(r: &mut Reader) -> Result<AnyTensor> {
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported tensor version {version}")));
    }
    let at = r.offset();
    let code = r.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(at, format!("unknown dtype code {code}")))?;
    let at = r.offset();
    let rank = r.u8("rank")? as usize;
    if rank == 0 {
        return Err(Error::format(at, "rank 0 tensors are not supported"));
    }
    let at = r.offset();
    if r.u8("pad")? != 0 {
        return Err(Error::format(at, "reserved pad byte must be 0"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for i in 0..rank {
        let at = r.offset();
        let d = r.u32("dims")? as u64;
        if d == 0 {
            return Err(Error::format(at, format!("dimension {i} is zero")));
        }
        numel = numel
            .checked_mul(d)
            .filter(|&n| n.checked_mul(dtype.size_of() as u64).is_some_and(|b| b <= isize::MAX as u64))
            .ok_or_else(|| Error::format(at, "dimension product overflows"))?;
        shape.push(d as usize);
    }
    let need = numel as usize * dtype.size_of();
    if r.remaining() < need {
        return r.fail(format!(
            "truncated payload: expected {need} bytes for shape {shape:?} {dtype:?}, {} available",
            r.remaining()
        ));
    }
    Ok(match dtype {
        DType::F32 => decode_typed::<f32>(r, shape)?.into(),
        DType::F64 => decode_typed::<f64>(r, shape)?.into(),
        DType::I8 => decode_typed::<i8>(r, shape)?.into(),
        DType::I32 => decode_typed::<i32>(r, shape)?.into(),
    })
}

/// Decodes exactly one tensor occupying all of `bytes`.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader::new(bytes);
    let t = decode_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn tensor_to_bytes(t: &AnyTensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    out
}

pub fn save_tensor(t: &AnyTensor, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &tensor_to_bytes(t))
}

/// Format errors are re-labelled with the file path.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    tensor_from_bytes(&read_file(path)?).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}
