//! CSV reading and writing plus the partial-output guard: files are tracked
//! as they are produced and removed again if the command fails before
//! committing.

use anyhow::{bail, Context, Result};
use nsgp::experiments::Dataset2d;
use std::cell::RefCell;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Removes all tracked files on drop unless the command committed.
pub struct OutputGuard {
    files: RefCell<Vec<PathBuf>>,
    committed: std::cell::Cell<bool>,
}

impl OutputGuard {
    pub fn new() -> Self {
        OutputGuard {
            files: RefCell::new(Vec::new()),
            committed: std::cell::Cell::new(false),
        }
    }

    pub fn track(&self, path: PathBuf) -> PathBuf {
        self.files.borrow_mut().push(path.clone());
        path
    }

    pub fn commit(&self) {
        self.committed.set(true);
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed.get() {
            for f in self.files.borrow().iter() {
                let _ = std::fs::remove_file(f);
            }
        }
    }
}

/// Writes a CSV with full-precision decimal text (shortest round-trip form).
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                write!(w, ",")?;
            }
            write!(w, "{v}")?;
            first = false;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

fn field(record: &csv::StringRecord, idx: usize, path: &Path, line: u64) -> Result<f64> {
    let raw = record
        .get(idx)
        .with_context(|| format!("{}: line {line}: missing column {idx}", path.display()))?;
    raw.parse::<f64>()
        .with_context(|| format!("{}: line {line}: bad number '{raw}'", path.display()))
}

/// Reads a 1-D data CSV with header `x,y`.
pub fn read_data_1d(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "x" || &headers[1] != "y" {
        bail!("{}: expected header 'x,y'", path.display());
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        x.push(field(&rec, 0, path, line)?);
        y.push(field(&rec, 1, path, line)?);
    }
    if x.len() < 2 {
        bail!("{}: need at least two observations", path.display());
    }
    Ok((x, y))
}

/// Reads a truth CSV with header `x,truth`, returning the truth values in
/// file order.
pub fn read_truth_1d(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "truth")
        .with_context(|| format!("{}: no 'truth' column", path.display()))?;
    let mut t = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        t.push(field(&rec, col, path, i as u64 + 2)?);
    }
    Ok(t)
}

/// Reads a 2-D data CSV with header `x1,x2,y,missing` into a complete-grid
/// data set. Cells are keyed by their coordinates; every grid cell must
/// appear exactly once.
pub fn read_data_2d(path: &Path) -> Result<Dataset2d> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    for (i, name) in ["x1", "x2", "y", "missing"].iter().enumerate() {
        if headers.get(i) != Some(*name) {
            bail!("{}: expected header 'x1,x2,y,missing'", path.display());
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        rows.push((
            field(&rec, 0, path, line)?,
            field(&rec, 1, path, line)?,
            field(&rec, 2, path, line)?,
            field(&rec, 3, path, line)? != 0.0,
        ));
    }
    if rows.is_empty() {
        bail!("{}: empty data file", path.display());
    }

    let mut x1: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mut x2: Vec<f64> = rows.iter().map(|r| r.1).collect();
    x1.sort_by(|a, b| a.total_cmp(b));
    x1.dedup();
    x2.sort_by(|a, b| a.total_cmp(b));
    x2.dedup();
    let (n1, n2) = (x1.len(), x2.len());
    if rows.len() != n1 * n2 {
        bail!(
            "{}: {} rows do not fill the {}x{} grid",
            path.display(),
            rows.len(),
            n1,
            n2
        );
    }
    let locate = |xs: &[f64], v: f64| xs.iter().position(|&x| x == v).unwrap();
    let mut y = vec![f64::NAN; n1 * n2];
    let mut missing = vec![false; n1 * n2];
    for (a, b, yv, miss) in rows {
        let c = locate(&x1, a) * n2 + locate(&x2, b);
        if !y[c].is_nan() {
            bail!("{}: duplicate cell ({a}, {b})", path.display());
        }
        y[c] = yv;
        missing[c] = miss;
    }
    Ok(Dataset2d {
        x1,
        x2,
        truth: Vec::new(),
        missing,
        y,
        noise_var: f64::NAN,
    })
}

/// Reads a 2-D truth CSV (`x1,x2,truth`) into grid scan order matching the
/// data set axes.
pub fn read_truth_2d(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    for (i, name) in ["x1", "x2", "truth"].iter().enumerate() {
        if headers.get(i) != Some(*name) {
            bail!("{}: expected header 'x1,x2,truth'", path.display());
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        rows.push((
            field(&rec, 0, path, line)?,
            field(&rec, 1, path, line)?,
            field(&rec, 2, path, line)?,
        ));
    }
    Ok(rows)
}

/// Reads one wide trace CSV (samples × coordinates).
pub fn read_trace_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = open_csv(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let mut row = Vec::with_capacity(headers.len());
        for j in 0..headers.len() {
            row.push(field(&rec, j, path, line)?);
        }
        rows.push(row);
    }
    Ok((headers, rows))
}
