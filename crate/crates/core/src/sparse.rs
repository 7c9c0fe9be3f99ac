//! Compressed sparse column storage for the packing matrix.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;

const MAGIC: &[u8; 4] = b"RLHB";
const VERSION: u32 = 1;

/// Column-major sparse matrix. Row indices are strictly increasing within
/// each column and explicit zeros are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseColumns {
    rows: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseColumns {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SparseColumns {
            rows,
            col_ptr: vec![0; cols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from per-column `(row, value)` lists in any order. Zeros are
    /// dropped; duplicate rows are summed.
    pub fn from_columns(rows: usize, columns: Vec<Vec<(usize, f64)>>) -> Self {
        let nnz = columns.iter().map(Vec::len).sum();
        let mut col_ptr = Vec::with_capacity(columns.len() + 1);
        let mut row_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        col_ptr.push(0);
        for mut col in columns {
            col.sort_by_key(|e| e.0);
            let start = row_idx.len();
            for (r, v) in col {
                assert!(r < rows, "row {r} out of range for {rows} rows");
                if row_idx.len() > start && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            // drop zeros, including any produced by summation
            let mut keep = start;
            for k in start..row_idx.len() {
                if values[k] != 0.0 {
                    row_idx[keep] = row_idx[k];
                    values[keep] = values[k];
                    keep += 1;
                }
            }
            row_idx.truncate(keep);
            values.truncate(keep);
            col_ptr.push(row_idx.len());
        }
        SparseColumns {
            rows,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let columns = (0..m.ncols())
            .map(|j| (0..m.nrows()).map(|i| (i, m[(i, j)])).collect())
            .collect();
        Self::from_columns(m.nrows(), columns)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row indices and values of column `j`.
    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.column(j);
        rows.binary_search(&i).map_or(0.0, |k| vals[k])
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols()).map(|j| self.column(j).1.iter().sum()).collect()
    }

    /// `H 1_S` for the column subset `S`.
    pub fn sum_columns(&self, subset: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for &j in subset {
            let (rows, vals) = self.column(j);
            for (&r, &v) in rows.iter().zip(vals) {
                out[r] += v;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols());
        for j in 0..self.cols() {
            let (rows, vals) = self.column(j);
            for (&r, &v) in rows.iter().zip(vals) {
                m[(r, j)] = v;
            }
        }
        m
    }

    /// Stacks blocks with equal column counts on top of each other.
    pub fn vstack(blocks: &[&SparseColumns]) -> Self {
        let cols = blocks.first().map_or(0, |b| b.cols());
        assert!(blocks.iter().all(|b| b.cols() == cols), "column counts differ");
        let rows = blocks.iter().map(|b| b.rows).sum();
        let nnz = blocks.iter().map(|b| b.nnz()).sum();
        let mut col_ptr = Vec::with_capacity(cols + 1);
        let mut row_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        col_ptr.push(0);
        for j in 0..cols {
            let mut offset = 0;
            for b in blocks {
                let (r, v) = b.column(j);
                row_idx.extend(r.iter().map(|r| r + offset));
                values.extend_from_slice(v);
                offset += b.rows;
            }
            col_ptr.push(row_idx.len());
        }
        SparseColumns {
            rows,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Writes `H` and `b` as a little-endian binary container: magic `RLHB`,
    /// `u32` version, `u64` rows, cols, nnz, then `col_ptr`, `row_idx` (`u64`),
    /// `values` and `b` (`f64`).
    pub fn write_with_rhs<W: Write>(&self, b: &[f64], mut w: W) -> io::Result<()> {
        assert_eq!(b.len(), self.rows);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [self.rows, self.cols(), self.nnz()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &v in self.col_ptr.iter().chain(&self.row_idx) {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &v in self.values.iter().chain(b) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    /// Reads a container written by [`SparseColumns::write_with_rhs`].
    pub fn read_with_rhs<R: Read>(mut r: R) -> io::Result<(Self, Vec<f64>)> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not an instance container"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != VERSION {
            return Err(bad("unsupported container version"));
        }
        let read_u64 = |r: &mut R| -> io::Result<usize> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("size overflow"))
        };
        let rows = read_u64(&mut r)?;
        let cols = read_u64(&mut r)?;
        let nnz = read_u64(&mut r)?;
        let col_ptr = (0..=cols).map(|_| read_u64(&mut r)).collect::<io::Result<Vec<_>>>()?;
        let row_idx = (0..nnz).map(|_| read_u64(&mut r)).collect::<io::Result<Vec<_>>>()?;
        let read_f64 = |r: &mut R| -> io::Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let values = (0..nnz).map(|_| read_f64(&mut r)).collect::<io::Result<Vec<_>>>()?;
        let b = (0..rows).map(|_| read_f64(&mut r)).collect::<io::Result<Vec<_>>>()?;
        if col_ptr.last() != Some(&nnz) || row_idx.iter().any(|&i| i >= rows) {
            return Err(bad("inconsistent container"));
        }
        Ok((
            SparseColumns {
                rows,
                col_ptr,
                row_idx,
                values,
            },
            b,
        ))
    }
}
