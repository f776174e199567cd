//! CSV and binary file formats.

use std::io::{Read, Write};
use std::path::Path;

use cddpc_core::controller::ClosedLoopRun;
use cddpc_core::lq::LqBlocks;
use cddpc_core::predictor::Predictor;
use cddpc_core::traj::Trajectory;
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

fn format_err(path: &Path, msg: impl Into<String>) -> BenchError {
    BenchError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

/// Writes `t,u1..um,y1..yp` with `t` counting from 1.
pub fn write_trajectory<W: Write>(w: W, traj: &Trajectory) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend(header("u", traj.input_dim()));
    head.extend(header("y", traj.output_dim()));
    out.write_record(&head)?;
    for t in 0..traj.len() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(traj.inputs().column(t).iter().map(|v| v.to_string()));
        row.extend(traj.outputs().column(t).iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| BenchError::io("<trajectory>", e))?;
    Ok(())
}

/// Reads a trajectory CSV; channel counts come from the `u*` and `y*`
/// header columns.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path).map_err(|e| BenchError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let head = rdr.headers()?.clone();
    let mut u_cols = Vec::new();
    let mut y_cols = Vec::new();
    for (i, h) in head.iter().enumerate() {
        let h = h.trim();
        if h.starts_with('u') && h[1..].parse::<usize>().is_ok() {
            u_cols.push(i);
        } else if h.starts_with('y') && h[1..].parse::<usize>().is_ok() {
            y_cols.push(i);
        }
    }
    if u_cols.is_empty() || y_cols.is_empty() {
        return Err(format_err(path, "header needs u1.. and y1.. columns"));
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| format_err(path, format!("row {}: bad number in column {}", line + 2, i + 1)))
        };
        for &c in &u_cols {
            u.push(get(c)?);
        }
        for &c in &y_cols {
            y.push(get(c)?);
        }
        rows += 1;
    }
    let inputs = DMatrix::from_column_slice(u_cols.len(), rows, &u);
    let outputs = DMatrix::from_column_slice(y_cols.len(), rows, &y);
    Ok(Trajectory::new(inputs, outputs)?)
}

/// `K_p` and `K_f` side by side, one CSV row per predicted output.
pub fn write_predictor<W: Write>(w: W, pred: &Predictor) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head: Vec<String> = header("kp", pred.k_p.ncols()).collect();
    head.extend(header("kf", pred.k_f.ncols()));
    out.write_record(&head)?;
    for i in 0..pred.k_p.nrows() {
        let row: Vec<String> = pred
            .k_p
            .row(i)
            .iter()
            .chain(pred.k_f.row(i).iter())
            .map(|v| v.to_string())
            .collect();
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| BenchError::io("<predictor>", e))?;
    Ok(())
}

/// Per-step closed-loop record `t,u1..um,y1..yp,r1..rp,J_cum,qp_iters,qp_status`.
pub fn write_run<W: Write>(w: W, run: &ClosedLoopRun) -> Result<()> {
    let traj = &run.trajectory;
    let (m, p) = (traj.input_dim(), traj.output_dim());
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend(header("u", m));
    head.extend(header("y", p));
    head.extend(header("r", p));
    head.extend(["J_cum", "qp_iters", "qp_status"].map(String::from));
    out.write_record(&head)?;
    for t in 0..traj.len() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(traj.inputs().column(t).iter().map(|v| v.to_string()));
        row.extend(traj.outputs().column(t).iter().map(|v| v.to_string()));
        row.extend(run.references.column(t).iter().map(|v| v.to_string()));
        row.push(run.j_cum[t].to_string());
        row.push(run.steps[t].qp_iters.to_string());
        row.push(run.steps[t].qp_status.as_str().to_string());
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| BenchError::io("<run>", e))?;
    Ok(())
}

/// First 16 hex digits of SHA-256 over the little-endian bytes of the
/// inputs followed by the outputs (column-major).
pub fn dataset_hash(traj: &Trajectory) -> String {
    let mut h = Sha256::new();
    for v in traj.inputs().iter().chain(traj.outputs().iter()) {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

const BLOCKS_MAGIC: &[u8; 8] = b"CDDPCLQ1";

/// Block dimensions stored in a dump header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlocksHeader {
    pub input_dim: usize,
    pub output_dim: usize,
    pub past: usize,
    pub future: usize,
    pub columns: usize,
}

impl BlocksHeader {
    fn shapes(&self) -> [(usize, usize); 9] {
        let n1 = (self.input_dim + self.output_dim) * self.past;
        let n2 = self.input_dim * self.future;
        let n3 = self.output_dim * self.future;
        let c = self.columns;
        [
            (n1, n1),
            (n2, n1),
            (n2, n2),
            (n3, n1),
            (n3, n2),
            (n3, n3),
            (n1, c),
            (n2, c),
            (n3, c),
        ]
    }
}

/// Binary dump: the 8-byte magic `CDDPCLQ1`, then `m, p, L_p, L_f, M` as
/// little-endian `u64`, then `L11, L21, L22, L31, L32, L33, Q1, Q2, Q3`,
/// each row-major little-endian `f64`.
pub fn write_blocks<W: Write>(mut w: W, blocks: &LqBlocks) -> std::io::Result<()> {
    w.write_all(BLOCKS_MAGIC)?;
    for v in [
        blocks.input_dim,
        blocks.output_dim,
        blocks.horizons.past(),
        blocks.horizons.future(),
        blocks.columns(),
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for b in [
        &blocks.l11,
        &blocks.l21,
        &blocks.l22,
        &blocks.l31,
        &blocks.l32,
        &blocks.l33,
        &blocks.q1,
        &blocks.q2,
        &blocks.q3,
    ] {
        for i in 0..b.nrows() {
            for v in b.row(i).iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a dump written by [`write_blocks`] into its header and the nine
/// matrices in storage order.
pub fn read_blocks<R: Read>(mut r: R) -> std::io::Result<(BlocksHeader, Vec<DMatrix<f64>>)> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BLOCKS_MAGIC {
        return Err(bad("not an LQ block dump"));
    }
    let mut word = [0u8; 8];
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        r.read_exact(&mut word)?;
        *d = usize::try_from(u64::from_le_bytes(word)).map_err(|_| bad("dimension overflow"))?;
    }
    let head = BlocksHeader {
        input_dim: dims[0],
        output_dim: dims[1],
        past: dims[2],
        future: dims[3],
        columns: dims[4],
    };
    let mut mats = Vec::with_capacity(9);
    for (rows, cols) in head.shapes() {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        mats.push(DMatrix::from_row_slice(rows, cols, &data));
    }
    Ok((head, mats))
}
