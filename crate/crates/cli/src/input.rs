use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use vcmi::estimators::PairedDataset;

use crate::error::{CliError, CliResult};

fn column_index(name: &str, prefix: char) -> Option<usize> {
    let rest = name.trim().strip_prefix(prefix)?;
    if rest.is_empty() || (rest.len() > 1 && rest.starts_with('0')) {
        return None;
    }
    rest.parse().ok()
}

/// Reads paired samples from CSV. The header names every column `x<i>` or
/// `y<j>`, with indices covering `0..d_X` and `0..d_Y` in any order.
pub fn read_paired_csv<R: Read>(reader: R) -> CliResult<PairedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| CliError::Input(format!("line 1: {e}")))?.clone();
    let mut x_cols = Vec::new();
    let mut y_cols = Vec::new();
    for (pos, name) in header.iter().enumerate() {
        if let Some(i) = column_index(name, 'x') {
            x_cols.push((i, pos));
        } else if let Some(j) = column_index(name, 'y') {
            y_cols.push((j, pos));
        } else {
            return Err(CliError::Input(format!("line 1: unexpected column {name:?}")));
        }
    }
    for (cols, block) in [(&mut x_cols, 'x'), (&mut y_cols, 'y')] {
        cols.sort_unstable();
        if cols.is_empty() {
            return Err(CliError::Input(format!("line 1: no {block} columns")));
        }
        if cols.iter().enumerate().any(|(k, &(i, _))| k != i) {
            return Err(CliError::Input(format!("line 1: {block} columns must be {block}0..{block}{}", cols.len() - 1)));
        }
    }
    let width = header.len();
    let (d_x, d_y) = (x_cols.len(), y_cols.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Input(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(CliError::Input(format!("line {line}: expected {width} fields, found {}", record.len())));
        }
        for (cols, out) in [(&x_cols, &mut xs), (&y_cols, &mut ys)] {
            for &(_, pos) in cols.iter() {
                let field = record[pos].trim();
                if field.is_empty() {
                    return Err(CliError::Input(format!("line {line}: missing value for {}", &header[pos])));
                }
                let v: f64 = field.parse().map_err(|_| {
                    CliError::Input(format!("line {line}: cannot parse {field:?} in column {}", &header[pos]))
                })?;
                if !v.is_finite() {
                    return Err(CliError::Input(format!("line {line}: non-finite value in column {}", &header[pos])));
                }
                out.push(v);
            }
        }
    }
    let n = xs.len() / d_x;
    if n == 0 {
        return Err(CliError::Input("no data rows".into()));
    }
    let x = Array2::from_shape_vec((n, d_x), xs).expect("row-major fill");
    let y = Array2::from_shape_vec((n, d_y), ys).expect("row-major fill");
    PairedDataset::new(x, y).map_err(|e| CliError::Input(e.to_string()))
}

pub fn load_paired_csv(path: &Path) -> CliResult<PairedDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    read_paired_csv(std::io::BufReader::new(file))
}
