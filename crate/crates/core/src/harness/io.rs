use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::ShuffledDataset;

use super::experiment::ResultLine;

/// Write a dataset as CSV with header `x0..x{d-1},y,z0..z{e-1},perm`. Row `k`
/// holds `D1` row `k` and `D2` row `k`; when the two sides differ in size the
/// shorter side's cells are left empty past its end.
pub fn write_dataset(path: &Path, data: &ShuffledDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (d, e) = (data.d(), data.e());
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    header.extend((0..e).map(|k| format!("z{k}")));
    header.push("perm".into());
    w.write_record(&header)?;
    let rows = data.n().max(data.m());
    let mut rec = Vec::with_capacity(header.len());
    for k in 0..rows {
        rec.clear();
        if k < data.n() {
            rec.extend((0..d).map(|c| data.x()[(k, c)].to_string()));
            rec.push(data.y()[k].to_string());
        } else {
            rec.extend(std::iter::repeat_n(String::new(), d + 1));
        }
        if k < data.m() {
            rec.extend((0..e).map(|c| data.z()[(k, c)].to_string()));
        } else {
            rec.extend(std::iter::repeat_n(String::new(), e));
        }
        rec.push(match data.true_perm() {
            Some(p) if k < data.n() => p[k].to_string(),
            _ => String::new(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_cell(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad {what} value {s:?}")))
}

/// Inverse of [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<ShuffledDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let y_col = header.iter().position(|h| h == "y").ok_or_else(|| Error::Parse("missing y column".into()))?;
    let perm_col = header.iter().position(|h| h == "perm").ok_or_else(|| Error::Parse("missing perm column".into()))?;
    let d = y_col;
    let e = perm_col - y_col - 1;
    for (k, h) in header.iter().enumerate() {
        let want = if k < d {
            format!("x{k}")
        } else if k > y_col && k < perm_col {
            format!("z{}", k - y_col - 1)
        } else {
            continue;
        };
        if *h != want {
            return Err(Error::Parse(format!("column {k} is {h:?}, expected {want:?}")));
        }
    }
    let (mut xs, mut ys, mut zs, mut perm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut has_perm = true;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse("ragged CSV row".into()));
        }
        if !rec[y_col].trim().is_empty() {
            for c in 0..d {
                xs.push(parse_cell(&rec[c], "x")?);
            }
            ys.push(parse_cell(&rec[y_col], "y")?);
            let p = rec[perm_col].trim();
            if p.is_empty() {
                has_perm = false;
            } else {
                perm.push(p.parse::<usize>().map_err(|_| Error::Parse(format!("bad perm value {p:?}")))?);
            }
        }
        if e > 0 && !rec[y_col + 1].trim().is_empty() {
            for c in 0..e {
                zs.push(parse_cell(&rec[y_col + 1 + c], "z")?);
            }
        }
    }
    let n = ys.len();
    let m = zs.len().checked_div(e).unwrap_or(n);
    let x = DMatrix::from_row_slice(n, d, &xs);
    let z = DMatrix::from_row_slice(m, e, &zs);
    ShuffledDataset::new(x, DVector::from_vec(ys), z, has_perm.then_some(perm))
}

pub fn write_results(path: &Path, lines: &[ResultLine]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultLine>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
