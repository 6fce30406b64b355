//! Little-endian read/write helpers shared by the binary artifact
//! formats (XTRA, XIDX, XTSK).

use crate::error::{Error, Result};
use crate::numerics::Parameter;
use crate::Mat;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub offset: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, offset: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.buf.len() {
            return Err(Error::format(
                self.offset as u64,
                format!(
                    "truncated: wanted {n} bytes, {} remain",
                    self.buf.len() - self.offset
                ),
            ));
        }
        let s = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let at = self.offset;
        let len = self.u32()? as usize;
        String::from_utf8(self.bytes(len)?.to_vec())
            .map_err(|_| Error::format(at as u64, "string is not utf-8"))
    }
}

/// Append `u32 name_len, name, u32 rows, u32 cols, data` for one
/// parameter.
pub(crate) fn write_param(buf: &mut Vec<u8>, p: &Parameter<f32>) {
    let name = p.name.as_bytes();
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
    for v in p.value.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Read one parameter blob written by [`write_param`].
pub(crate) fn read_param(r: &mut Reader<'_>) -> Result<(String, Mat)> {
    let at = r.offset;
    let name = r.string()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f32()?);
    }
    let value = Mat::from_vec(rows, cols, data).map_err(|e| Error::format(at as u64, e.to_string()))?;
    Ok((name, value))
}

/// Fill named parameters from blobs, requiring an exact one-to-one
/// match between the blob names and the model's parameter names.
pub(crate) fn fill_params(
    r: &mut Reader<'_>,
    n_blobs: usize,
    params: &mut [&mut Parameter<f32>],
) -> Result<()> {
    let mut by_name: std::collections::BTreeMap<String, usize> = params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    for _ in 0..n_blobs {
        let at = r.offset;
        let (name, value) = read_param(r)?;
        let idx = by_name.remove(&name).ok_or_else(|| {
            Error::format(at as u64, format!("unknown or duplicate parameter {name}"))
        })?;
        if params[idx].shape() != value.shape() {
            return Err(Error::format(
                at as u64,
                format!("parameter {name} has unexpected shape {:?}", value.shape()),
            ));
        }
        params[idx].value = value;
    }
    if !by_name.is_empty() {
        let missing: Vec<String> = by_name.keys().cloned().collect();
        return Err(Error::format(
            r.offset as u64,
            format!("missing parameters: {}", missing.join(", ")),
        ));
    }
    Ok(())
}
