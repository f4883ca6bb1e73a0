//! The LST1 tensor file format plus typed containers built on it.
//!
//! One record is: the 8-byte magic `LSTENSR1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` dimensions, then the `f64` payload in
//! column-major order (first index fastest). A file may hold several
//! records back to back; the typed containers below use a small 1-D meta
//! record first to say what follows.
//!
//! Container layouts (`meta[0]` selects the kind):
//! - signal (`1`): meta `[1, n, t, r, k, 0]`, then `x (n×t)`, `f (n×t)`,
//!   `support (n)`, `h (n×r)`, `l (r×t)`.
//! - measurements (`2`): meta `[2, kind, n, t, m, 0]`, then `y (m×t)`,
//!   `noise_var (t)`, and the matrices — `(m×n)` once for the common
//!   ensemble, `(m×n×t)` stacked otherwise. Only uniform per-frame
//!   measurement counts are representable in this container.
//! - reconstruction (`3`): meta `[3, n, t, rank, outer_iters, has_factors]`,
//!   then `x_hat`, `f_hat`, `support_row (n)`, `convergence_trace`, and, if
//!   `has_factors` is 1, `g_hat (n×rank)` and `l_hat (rank×t)`.
//!
//! A bare single 3-D record is a hyperspectral cube (`rows × cols × bands`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::sensing::{EnsembleKind, MeasurementSet, SignalEnsemble};
use crate::turbo::Reconstruction;

const MAGIC: &[u8; 8] = b"LSTENSR1";
/// Sanity cap: refuse tensors above this element count (2^33 ≈ 64 GiB).
const MAX_ELEMENTS: u64 = 1 << 33;

/// An n-dimensional tensor with column-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_vector(v: &Array1<f64>) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let (rows, cols) = m.dim();
        let mut data = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                data.push(m[(r, c)]);
            }
        }
        Self {
            dims: vec![rows, cols],
            data,
        }
    }

    pub fn from_cube(c: &Array3<f64>) -> Self {
        let (d0, d1, d2) = c.dim();
        let mut data = Vec::with_capacity(d0 * d1 * d2);
        for k in 0..d2 {
            for j in 0..d1 {
                for i in 0..d0 {
                    data.push(c[(i, j, k)]);
                }
            }
        }
        Self {
            dims: vec![d0, d1, d2],
            data,
        }
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::invalid(format!(
                "expected a 1-D record, found rank {}",
                self.dims.len()
            )));
        }
        Ok(Array1::from_vec(self.data.clone()))
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::invalid(format!(
                "expected a 2-D record, found rank {}",
                self.dims.len()
            )));
        }
        let (rows, cols) = (self.dims[0], self.dims[1]);
        let mut m = Array2::zeros((rows, cols));
        for c in 0..cols {
            for r in 0..rows {
                m[(r, c)] = self.data[r + c * rows];
            }
        }
        Ok(m)
    }

    pub fn to_cube(&self) -> Result<Array3<f64>> {
        if self.dims.len() != 3 {
            return Err(Error::invalid(format!(
                "expected a 3-D record, found rank {}",
                self.dims.len()
            )));
        }
        let (d0, d1, d2) = (self.dims[0], self.dims[1], self.dims[2]);
        let mut c = Array3::zeros((d0, d1, d2));
        for k in 0..d2 {
            for j in 0..d1 {
                for i in 0..d0 {
                    c[(i, j, k)] = self.data[i + d0 * (j + d1 * k)];
                }
            }
        }
        Ok(c)
    }
}

fn write_record<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    let expected: usize = tensor.dims.iter().product();
    if expected != tensor.data.len() {
        return Err(Error::invalid("tensor payload does not match dimensions"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(tensor.dims.len() as u32).to_le_bytes())?;
    for &d in &tensor.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &tensor.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        offset,
        message: format!("truncated while reading {what}"),
    })
}

/// Reads one record starting at `offset`; returns the tensor and the offset
/// just past it. `None` when the stream is cleanly exhausted.
fn read_record<R: Read>(r: &mut R, offset: u64) -> Result<Option<(Tensor, u64)>> {
    let mut magic = [0u8; 8];
    match r.read(&mut magic)? {
        0 => return Ok(None),
        8 => {}
        n => {
            // Partial magic: fill the rest or fail as truncation.
            read_exact_at(r, &mut magic[n..], offset, "magic")?;
        }
    }
    if &magic != MAGIC {
        return Err(Error::Format {
            offset,
            message: format!("bad magic {:?}", &magic),
        });
    }
    let mut pos = offset + 8;
    let mut u32buf = [0u8; 4];
    read_exact_at(r, &mut u32buf, pos, "rank")?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    pos += 4;
    if rank == 0 || rank > 8 {
        return Err(Error::Format {
            offset: pos - 4,
            message: format!("unsupported tensor rank {rank}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for _ in 0..rank {
        read_exact_at(r, &mut u32buf, pos, "dimension")?;
        let d = u32::from_le_bytes(u32buf) as u64;
        pos += 4;
        count = count.checked_mul(d.max(1)).ok_or(Error::Format {
            offset: pos - 4,
            message: "dimension product overflow".into(),
        })?;
        dims.push(d as usize);
    }
    if count > MAX_ELEMENTS {
        return Err(Error::Format {
            offset: pos,
            message: format!("tensor with {count} elements exceeds the format cap"),
        });
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        read_exact_at(r, &mut f64buf, pos, "payload")?;
        data.push(f64::from_le_bytes(f64buf));
        pos += 8;
    }
    Ok(Some((Tensor { dims, data }, pos)))
}

/// Writes a sequence of records to one file.
pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tensors {
        write_record(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every record in the file.
pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    while let Some((t, next)) = read_record(&mut r, offset)? {
        out.push(t);
        offset = next;
    }
    Ok(out)
}

/// Writes a single-record file.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_tensors(path, std::slice::from_ref(tensor))
}

/// Reads a file that must hold exactly one record.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut all = read_tensors(path)?;
    match all.len() {
        1 => Ok(all.pop().unwrap()),
        n => Err(Error::invalid(format!("expected one tensor record, found {n}"))),
    }
}

fn meta_record(values: [u64; 6]) -> Tensor {
    Tensor {
        dims: vec![6],
        data: values.iter().map(|&v| v as f64).collect(),
    }
}

fn meta_values(t: &Tensor, expected_kind: u64, what: &str) -> Result<[u64; 6]> {
    let v = t.to_vector()?;
    if v.len() != 6 {
        return Err(Error::invalid(format!("{what}: malformed meta record")));
    }
    let mut out = [0u64; 6];
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() || x < 0.0 || x.fract() != 0.0 {
            return Err(Error::invalid(format!("{what}: malformed meta record")));
        }
        out[i] = x as u64;
    }
    if out[0] != expected_kind {
        return Err(Error::invalid(format!(
            "{what}: file holds container kind {}, expected {expected_kind}",
            out[0]
        )));
    }
    Ok(out)
}

pub fn save_signal(path: &Path, e: &SignalEnsemble) -> Result<()> {
    let (n, t) = e.x.dim();
    let r = e.h.ncols();
    let support = Array1::from_iter(e.support.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    write_tensors(
        path,
        &[
            meta_record([1, n as u64, t as u64, r as u64, e.sparsity as u64, 0]),
            Tensor::from_matrix(&e.x),
            Tensor::from_matrix(&e.f),
            Tensor::from_vector(&support),
            Tensor::from_matrix(&e.h),
            Tensor::from_matrix(&e.l),
        ],
    )
}

pub fn load_signal(path: &Path) -> Result<SignalEnsemble> {
    let records = read_tensors(path)?;
    if records.len() != 6 {
        return Err(Error::invalid(format!(
            "signal container needs 6 records, found {}",
            records.len()
        )));
    }
    let meta = meta_values(&records[0], 1, "load_signal")?;
    let x = records[1].to_matrix()?;
    let f = records[2].to_matrix()?;
    let support: Vec<bool> = records[3].to_vector()?.iter().map(|&v| v != 0.0).collect();
    let h = records[4].to_matrix()?;
    let l = records[5].to_matrix()?;
    if x.dim() != (meta[1] as usize, meta[2] as usize) || support.len() != meta[1] as usize {
        return Err(Error::invalid("load_signal: inconsistent record shapes"));
    }
    Ok(SignalEnsemble {
        x,
        support,
        h,
        l,
        f,
        sparsity: meta[4] as usize,
    })
}

pub fn save_measurements(path: &Path, meas: &MeasurementSet) -> Result<()> {
    meas.validate()?;
    let t = meas.frames();
    let n = meas.signal_dim();
    let m = meas.matrices[0].nrows();
    if meas.matrices.iter().any(|a| a.nrows() != m) {
        return Err(Error::invalid(
            "save_measurements: only uniform per-frame measurement counts are representable",
        ));
    }
    let mut y = Array2::zeros((m, t));
    for (j, obs) in meas.observations.iter().enumerate() {
        y.column_mut(j).assign(obs);
    }
    let mut records = vec![
        meta_record([
            2,
            u64::from(meas.kind.code()),
            n as u64,
            t as u64,
            m as u64,
            0,
        ]),
        Tensor::from_matrix(&y),
        Tensor::from_vector(&Array1::from_vec(meas.noise_var.clone())),
    ];
    if meas.kind == EnsembleKind::CommonGaussian {
        records.push(Tensor::from_matrix(&meas.matrices[0]));
    } else {
        let mut stack = Array3::zeros((m, n, t));
        for (j, a) in meas.matrices.iter().enumerate() {
            stack.slice_mut(ndarray::s![.., .., j]).assign(a);
        }
        records.push(Tensor::from_cube(&stack));
    }
    write_tensors(path, &records)
}

pub fn load_measurements(path: &Path) -> Result<MeasurementSet> {
    let records = read_tensors(path)?;
    if records.len() != 4 {
        return Err(Error::invalid(format!(
            "measurement container needs 4 records, found {}",
            records.len()
        )));
    }
    let meta = meta_values(&records[0], 2, "load_measurements")?;
    let kind = EnsembleKind::from_code(meta[1] as u32)?;
    let (n, t, m) = (meta[2] as usize, meta[3] as usize, meta[4] as usize);
    let y = records[1].to_matrix()?;
    let noise_var = records[2].to_vector()?.to_vec();
    if y.dim() != (m, t) || noise_var.len() != t {
        return Err(Error::invalid("load_measurements: inconsistent record shapes"));
    }
    let matrices: Vec<Array2<f64>> = if kind == EnsembleKind::CommonGaussian {
        let a = records[3].to_matrix()?;
        if a.dim() != (m, n) {
            return Err(Error::invalid("load_measurements: matrix shape mismatch"));
        }
        vec![a; t]
    } else {
        let stack = records[3].to_cube()?;
        if stack.dim() != (m, n, t) {
            return Err(Error::invalid("load_measurements: matrix stack shape mismatch"));
        }
        (0..t)
            .map(|j| stack.slice(ndarray::s![.., .., j]).to_owned())
            .collect()
    };
    let observations = (0..t).map(|j| y.column(j).to_owned()).collect();
    let meas = MeasurementSet {
        matrices,
        observations,
        noise_var,
        kind,
    };
    meas.validate()?;
    Ok(meas)
}

pub fn save_reconstruction(path: &Path, rec: &Reconstruction) -> Result<()> {
    let (n, t) = rec.x_hat.dim();
    let has_factors = rec.g_hat.is_some() && rec.l_hat.is_some();
    let mut records = vec![
        meta_record([
            3,
            n as u64,
            t as u64,
            rec.rank.unwrap_or(0) as u64,
            rec.outer_iters as u64,
            u64::from(has_factors),
        ]),
        Tensor::from_matrix(&rec.x_hat),
        Tensor::from_matrix(&rec.f_hat),
        Tensor::from_vector(&rec.support_row),
        Tensor::from_vector(&Array1::from_vec(rec.convergence_trace.clone())),
    ];
    if has_factors {
        records.push(Tensor::from_matrix(rec.g_hat.as_ref().unwrap()));
        records.push(Tensor::from_matrix(rec.l_hat.as_ref().unwrap()));
    }
    write_tensors(path, &records)
}

/// Loads the reconstruction container; hyperparameter traces are not
/// persisted, so that field comes back empty.
pub fn load_reconstruction(path: &Path) -> Result<Reconstruction> {
    let records = read_tensors(path)?;
    if records.len() < 5 {
        return Err(Error::invalid("reconstruction container needs at least 5 records"));
    }
    let meta = meta_values(&records[0], 3, "load_reconstruction")?;
    let has_factors = meta[5] == 1;
    if has_factors && records.len() != 7 {
        return Err(Error::invalid("reconstruction container with factors needs 7 records"));
    }
    let x_hat = records[1].to_matrix()?;
    let f_hat = records[2].to_matrix()?;
    let support_row = records[3].to_vector()?;
    let convergence_trace = records[4].to_vector()?.to_vec();
    let (g_hat, l_hat) = if has_factors {
        (Some(records[5].to_matrix()?), Some(records[6].to_matrix()?))
    } else {
        (None, None)
    };
    Ok(Reconstruction {
        x_hat,
        f_hat,
        g_hat,
        l_hat,
        rank: if meta[3] > 0 { Some(meta[3] as usize) } else { None },
        support_row,
        hyper_trace: Vec::new(),
        convergence_trace,
        outer_iters: meta[4] as usize,
    })
}

/// Loads a bare cube file (one 3-D record).
pub fn load_cube(path: &Path) -> Result<Array3<f64>> {
    read_tensor(path)?.to_cube()
}

/// Small-matrix CSV import: first line `rows,cols`, then one line per row.
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("csv: empty file"))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("csv: bad dimension header '{header}'")))?;
    if dims.len() != 2 {
        return Err(Error::invalid("csv: header must be 'rows,cols'"));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut m = Array2::zeros((rows, cols));
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("csv: missing row {r}")))?;
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("csv: bad value in row {r}")))?;
        if vals.len() != cols {
            return Err(Error::invalid(format!(
                "csv: row {r} has {} values, expected {cols}",
                vals.len()
            )));
        }
        for c in 0..cols {
            m[(r, c)] = vals[c];
        }
    }
    Ok(m)
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    let (rows, cols) = m.dim();
    out.push_str(&format!("{rows},{cols}\n"));
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| format!("{}", m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.lst1");
        let m = array![[1.5, -2.25], [0.0, f64::MIN_POSITIVE], [3.0, 1e300]];
        let t = Tensor::from_matrix(&m);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
        assert_eq!(back.to_matrix().unwrap(), m);
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.lst1");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        match read_tensors(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.lst1");
        let t = Tensor {
            dims: vec![4],
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match read_tensors(&path) {
            Err(Error::Format { offset, message }) => {
                assert!(offset > 0, "offset {offset}");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cube_roundtrip_preserves_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cube.lst1");
        let mut cube = Array3::zeros((2, 3, 4));
        for (i, v) in cube.iter_mut().enumerate() {
            *v = i as f64;
        }
        write_tensor(&path, &Tensor::from_cube(&cube)).unwrap();
        assert_eq!(load_cube(&path).unwrap(), cube);
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = array![[1.0, 2.5], [-3.0, 0.125]];
        write_matrix_csv(&path, &m).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), m);
    }
}
