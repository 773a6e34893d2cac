//! Plain-text matrix files: a header line `rows cols`, then one line of
//! space-separated decimals per row. Used for embeddings and attention maps.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub fn parse_matrix(text: &str, path: &Path) -> Result<Array2<f64>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(1, format!("bad header {header:?}: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(err(
            1,
            format!("header must be `rows cols`, got {header:?}"),
        ));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if seen == rows {
            return Err(err(lineno, format!("more than the declared {rows} rows")));
        }
        let before = data.len();
        for token in line.split_whitespace() {
            let v: f64 = token
                .parse()
                .map_err(|_| err(lineno, format!("not a number: {token:?}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value {token:?}")));
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(err(
                lineno,
                format!(
                    "row has {} values, declared width is {cols}",
                    data.len() - before
                ),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(err(
            text.lines().count(),
            format!("found {seen} rows, declared {rows}"),
        ));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("row-major data matches header"))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, path)
}

/// Formats with the shortest representation that round-trips exactly.
pub fn format_matrix(m: ArrayView2<'_, f64>) -> String {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: impl AsRef<Path>, m: ArrayView2<'_, f64>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_matrix(m)).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
