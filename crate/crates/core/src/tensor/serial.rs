//! `TNSR v1` tensor records: a text header line `TNSR v1 <rank> <d0> <d1> ...\n`
//! followed by the elements as little-endian IEEE-754 binary32.

use std::io::{self, BufRead, Write};

use super::{numel, Tensor};

pub const MAGIC: &str = "TNSR v1";

/// Writes one record and returns the number of bytes written.
pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor<f32>) -> io::Result<usize> {
    let mut header = format!("{MAGIC} {}", tensor.rank());
    for d in tensor.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    out.write_all(header.as_bytes())?;
    let mut body = Vec::with_capacity(tensor.len() * 4);
    for x in tensor.data() {
        body.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&body)?;
    Ok(header.len() + body.len())
}

pub fn to_bytes(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, tensor).expect("writing to memory");
    buf
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Reads one record from a buffered reader.
pub fn read_tensor<R: BufRead>(input: &mut R) -> io::Result<Tensor<f32>> {
    let mut header = Vec::new();
    input.read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(invalid("truncated TNSR header"));
    }
    let header = std::str::from_utf8(&header[..header.len() - 1])
        .map_err(|_| invalid("TNSR header is not UTF-8"))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| invalid(format!("bad magic in header {header:?}")))?;
    let fields: Vec<usize> = rest
        .split_whitespace()
        .map(|f| f.parse().map_err(|_| invalid(format!("bad header field {f:?}"))))
        .collect::<io::Result<_>>()?;
    let (&rank, dims) = fields
        .split_first()
        .ok_or_else(|| invalid("missing rank"))?;
    if dims.len() != rank {
        return Err(invalid(format!("rank {rank} but {} extents", dims.len())));
    }
    let n = numel(dims);
    let mut body = vec![0u8; n * 4];
    input.read_exact(&mut body)?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims.to_vec(), data).map_err(|e| invalid(e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> io::Result<Tensor<f32>> {
    read_tensor(&mut io::Cursor::new(bytes))
}
