//! Flat binary cache of preprocessed feature matrices.
//!
//! ```text
//! magic        8 bytes  "CTFTENSR"
//! version      u16
//! byte order   u16      0xFEFF as written
//! rows, cols   u64, u64
//! fingerprint  u32 length + UTF-8 (regime fingerprint and cache key)
//! data         rows * cols f32, row-major
//! labels       rows u32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ShapeBuilder};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 8] = b"CTFTENSR";
pub const TENSOR_VERSION: u16 = 1;
const BYTE_ORDER_MARK: u16 = 0xFEFF;
const FIXED_HEADER: usize = 8 + 2 + 2 + 8 + 8 + 4;
const MAX_FINGERPRINT: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub fingerprint: String,
    pub data: Array2<f32>,
    pub labels: Vec<u32>,
}

struct Header {
    rows: usize,
    cols: usize,
    fingerprint: String,
    /// Offset of the first data byte.
    data_start: usize,
}

impl Header {
    fn body_len(&self) -> Option<usize> {
        if self.rows.max(self.cols) > isize::MAX as usize / 4 {
            return None;
        }
        let cells = self.rows.checked_mul(self.cols)?.checked_mul(4)?;
        cells.checked_add(self.rows.checked_mul(4)?)
    }
}

fn bad<T>(m: impl Into<String>) -> Result<T, TensorError> {
    Err(TensorError::Format(m.into()))
}

fn parse_header(bytes: &[u8]) -> Result<Header, TensorError> {
    if bytes.len() < FIXED_HEADER {
        return bad("truncated header");
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return bad("bad magic");
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u16_at(8) != TENSOR_VERSION {
        return bad(format!("unsupported version {}", u16_at(8)));
    }
    match u16_at(10) {
        BYTE_ORDER_MARK => {}
        0xFFFE => return bad("big-endian tensor not supported"),
        other => return bad(format!("bad byte-order tag {other:#06x}")),
    }
    let rows = usize::try_from(u64_at(12)).or(bad("row count overflows"))?;
    let cols = usize::try_from(u64_at(20)).or(bad("column count overflows"))?;
    let fp_len = u32::from_le_bytes(bytes[28..32].try_into().expect("4 bytes")) as usize;
    if fp_len > MAX_FINGERPRINT {
        return bad("fingerprint too long");
    }
    let Some(fp) = bytes.get(FIXED_HEADER..FIXED_HEADER + fp_len) else {
        return bad("truncated fingerprint");
    };
    let fingerprint = std::str::from_utf8(fp)
        .or(bad("fingerprint is not UTF-8"))?
        .to_string();
    Ok(Header {
        rows,
        cols,
        fingerprint,
        data_start: FIXED_HEADER + fp_len,
    })
}

fn header_bytes(fingerprint: &str, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(FIXED_HEADER + fingerprint.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&BYTE_ORDER_MARK.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.extend_from_slice(&(fingerprint.len() as u32).to_le_bytes());
    out.extend_from_slice(fingerprint.as_bytes());
    out
}

pub fn write_tensor<W: Write>(
    mut w: W,
    fingerprint: &str,
    data: &Array2<f32>,
    labels: &[u32],
) -> Result<(), TensorError> {
    if labels.len() != data.nrows() {
        return bad(format!("{} labels for {} rows", labels.len(), data.nrows()));
    }
    if fingerprint.len() > MAX_FINGERPRINT {
        return bad("fingerprint too long");
    }
    w.write_all(&header_bytes(fingerprint, data.nrows(), data.ncols()))?;
    let mut row_buf = Vec::with_capacity(if data.nrows() == 0 {
        0
    } else {
        data.ncols() * 4
    });
    for row in data.rows() {
        row_buf.clear();
        row.iter()
            .for_each(|v| row_buf.extend_from_slice(&v.to_le_bytes()));
        w.write_all(&row_buf)?;
    }
    for l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Parse an in-memory tensor file; the matrix comes back row-major.
pub fn read_tensor(bytes: &[u8]) -> Result<TensorFile, TensorError> {
    let h = parse_header(bytes)?;
    match h.body_len() {
        Some(len) if h.data_start.checked_add(len) == Some(bytes.len()) => {}
        _ => return bad("dimensions do not match the file length"),
    }
    let cells = h.rows * h.cols;
    let body = &bytes[h.data_start..];
    let values: Vec<f32> = body[..cells * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let labels = body[cells * 4..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(TensorFile {
        fingerprint: h.fingerprint,
        data: Array2::from_shape_vec((h.rows, h.cols), values).expect("length checked"),
        labels,
    })
}

pub fn save_tensor(
    path: &Path,
    fingerprint: &str,
    data: &Array2<f32>,
    labels: &[u32],
) -> Result<(), TensorError> {
    let tmp = path.with_extension("partial");
    write_tensor(
        BufWriter::new(File::create(&tmp)?),
        fingerprint,
        data,
        labels,
    )?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Stream a tensor file from disk into a matrix with the requested
/// memory order, without holding the raw bytes.
pub fn load_tensor(path: &Path, column_major: bool) -> Result<TensorFile, TensorError> {
    let file_len = std::fs::metadata(path)?.len();
    let mut r = BufReader::new(File::open(path)?);
    let mut fixed = vec![0u8; FIXED_HEADER];
    r.read_exact(&mut fixed)?;
    let fp_len = u32::from_le_bytes(fixed[28..32].try_into().expect("4 bytes")) as usize;
    if fp_len > MAX_FINGERPRINT {
        return bad("fingerprint too long");
    }
    let mut head = fixed;
    head.resize(FIXED_HEADER + fp_len, 0);
    r.read_exact(&mut head[FIXED_HEADER..])?;
    let h = parse_header(&head)?;
    match h.body_len() {
        Some(len) if h.data_start.checked_add(len).map(|v| v as u64) == Some(file_len) => {}
        _ => return bad("dimensions do not match the file length"),
    }
    let mut data = Array2::<f32>::zeros((h.rows, h.cols).set_f(column_major));
    let mut row_buf = vec![0u8; if h.rows == 0 { 0 } else { h.cols * 4 }];
    for mut row in data.rows_mut() {
        r.read_exact(&mut row_buf)?;
        for (v, b) in row.iter_mut().zip(row_buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    let mut labels = vec![0u32; h.rows];
    let mut b = [0u8; 4];
    for l in &mut labels {
        r.read_exact(&mut b)?;
        *l = u32::from_le_bytes(b);
    }
    Ok(TensorFile {
        fingerprint: h.fingerprint,
        data,
        labels,
    })
}
