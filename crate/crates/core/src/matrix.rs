//! Dense row-major `f32` matrix with the `TIVG` on-disk format.
//!
//! Layout: magic `TIVG`, version as u32 LE, row count as u64 LE, column
//! count as u32 LE, then `rows * cols` IEEE-754 f32 LE values row-major.
//! The format is deliberately trivial to parse from any language.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TIVG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read, path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, path, "magic")?;
        if magic != MAGIC {
            return Err(fail(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let mut buf4 = [0u8; 4];
        let mut buf8 = [0u8; 8];
        read_exact(r, &mut buf4, path, "version")?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        read_exact(r, &mut buf8, path, "row count")?;
        let rows = u64::from_le_bytes(buf8) as usize;
        read_exact(r, &mut buf4, path, "column count")?;
        let cols = u32::from_le_bytes(buf4) as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| fail("row/column counts overflow".into()))?;
        let mut data = Vec::with_capacity(count);
        let mut chunk = [0u8; 4];
        for i in 0..count {
            read_exact(r, &mut chunk, path, "value data")
                .map_err(|_| fail(format!("truncated at value {i} of {count}")))?;
            data.push(f32::from_le_bytes(chunk));
        }
        // Trailing bytes indicate a corrupt or mismatched file.
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => {}
            Ok(_) => return Err(fail("trailing bytes after matrix data".into())),
            Err(e) => return Err(Error::io(path, e)),
        }
        Matrix::new(rows, cols, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Matrix::read(&mut BufReader::new(file), path)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: format!("truncated {what}: {e}"),
    })
}
