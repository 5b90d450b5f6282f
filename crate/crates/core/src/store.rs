//! Little-endian float32 weight records.
//!
//! A record is a 12-byte header `(id: u32, rows: u32, cols: u32)` followed by
//! `rows * cols` f32 values, row-major. A weight file is a concatenation of
//! records; the shadow cold store reads single rows straight out of it.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER_BYTES: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub id: u32,
    pub rows: u32,
    pub cols: u32,
}

impl RecordHeader {
    pub fn payload_bytes(&self) -> u64 {
        u64::from(self.rows) * u64::from(self.cols) * 4
    }

    fn encode(&self) -> [u8; 12] {
        let mut b = [0u8; 12];
        b[0..4].copy_from_slice(&self.id.to_le_bytes());
        b[4..8].copy_from_slice(&self.rows.to_le_bytes());
        b[8..12].copy_from_slice(&self.cols.to_le_bytes());
        b
    }

    fn decode(b: &[u8; 12]) -> Self {
        let word = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        Self {
            id: word(0),
            rows: word(4),
            cols: word(8),
        }
    }
}

/// Appends records to a file and remembers where each one starts.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
    offset: u64,
}

impl RecordWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
            offset: 0,
        })
    }

    /// Writes `t` (a matrix) under `id`; returns the record's byte offset.
    pub fn write(&mut self, id: u32, t: &Tensor) -> Result<u64> {
        let (rows, cols) = t.dims2("RecordWriter::write")?;
        let header = RecordHeader {
            id,
            rows: rows as u32,
            cols: cols as u32,
        };
        let at = self.offset;
        let mut buf = Vec::with_capacity(12 + t.byte_len());
        buf.extend_from_slice(&header.encode());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.offset += buf.len() as u64;
        Ok(at)
    }

    pub fn finish(mut self) -> Result<u64> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.offset)
    }
}

/// Handle to one record inside a weight file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub path: PathBuf,
    pub offset: u64,
    pub header: RecordHeader,
}

impl RecordRef {
    /// Opens the file and checks the header at `offset` matches `expect`.
    pub fn open(path: impl AsRef<Path>, offset: u64, expect: RecordHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let found = read_header(&mut f, &path, offset)?;
        if found != expect {
            return Err(Error::CorruptWeights {
                path,
                detail: format!("header at {offset} is {found:?}, expected {expect:?}"),
            });
        }
        Ok(Self {
            path,
            offset,
            header: expect,
        })
    }

    pub fn read_row(&self, row: usize) -> Result<Vec<f32>> {
        let mut rows = self.read_rows(&[row])?;
        Ok(rows.pop().expect("one row requested"))
    }

    /// Reads the listed rows; every call re-opens the file and re-checks the header.
    pub fn read_rows(&self, rows: &[usize]) -> Result<Vec<Vec<f32>>> {
        let mut f = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let found = read_header(&mut f, &self.path, self.offset)?;
        if found != self.header {
            return Err(Error::CorruptWeights {
                path: self.path.clone(),
                detail: format!("header changed to {found:?}"),
            });
        }
        let cols = self.header.cols as usize;
        let mut buf = vec![0u8; cols * 4];
        let mut out = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.header.rows as usize {
                return Err(Error::CorruptWeights {
                    path: self.path.clone(),
                    detail: format!("row {r} out of {}", self.header.rows),
                });
            }
            let at = self.offset + HEADER_BYTES + (r * cols * 4) as u64;
            f.seek(SeekFrom::Start(at)).map_err(|e| Error::io(&self.path, e))?;
            f.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
            out.push(
                buf.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
        }
        Ok(out)
    }

    pub fn read_all(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.header.rows as usize).collect();
        let rows = self.read_rows(&idx)?;
        Tensor::new(
            vec![self.header.rows as usize, self.header.cols as usize],
            rows.concat(),
        )
    }
}

fn read_header(f: &mut File, path: &Path, offset: u64) -> Result<RecordHeader> {
    let mut b = [0u8; 12];
    f.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(RecordHeader::decode(&b))
}

/// Walks every record header in a file.
pub fn scan_records(path: impl AsRef<Path>) -> Result<Vec<(u64, RecordHeader)>> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut out = Vec::new();
    let mut at = 0u64;
    while at < len {
        if at + HEADER_BYTES > len {
            return Err(Error::CorruptWeights {
                path: path.to_path_buf(),
                detail: format!("truncated header at {at}"),
            });
        }
        let h = read_header(&mut f, path, at)?;
        out.push((at, h));
        at += HEADER_BYTES + h.payload_bytes();
    }
    if at != len {
        return Err(Error::CorruptWeights {
            path: path.to_path_buf(),
            detail: "truncated payload".into(),
        });
    }
    Ok(out)
}
