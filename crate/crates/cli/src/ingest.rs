//! CSV ingestion. Headers name coordinates `x1..xd`, optional regressors
//! `r1..rp` and the response `y`; columns may appear in any order.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use detgp::model::{Dataset, Location, ModelError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        source: csv::Error,
    },
    #[error("{path}: empty file, a header row is required")]
    Empty { path: PathBuf },
    #[error("{path}: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("{path}: line {line}, column {column}: cannot parse {value:?} as a number")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{path}: line {line}, column {column}: value is not finite")]
    NonFinite {
        path: PathBuf,
        line: u64,
        column: String,
    },
    #[error("{path}: line {line} has {found} fields, header has {expected}")]
    Width {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: lines {first} and {second} share a location")]
    DuplicateLocation { path: PathBuf, first: u64, second: u64 },
    #[error("{path}: {n} observations do not exceed the {p} regression columns")]
    TooFew { path: PathBuf, n: usize, p: usize },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Coord(usize),
    Regressor(usize),
    Response,
}

/// Column layout decoded from a header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// Field index of `x1..xd`.
    pub coords: Vec<usize>,
    /// Field index of `r1..rp`; empty means a constant regressor.
    pub regressors: Vec<usize>,
    pub response: Option<usize>,
}

fn parse_role(name: &str) -> Option<Role> {
    if name == "y" {
        return Some(Role::Response);
    }
    let mut chars = name.chars();
    let prefix = chars.next()?;
    let rest = chars.as_str();
    let k: usize = rest.parse().ok().filter(|&k| k >= 1)?;
    if rest.starts_with('0') || rest.starts_with('+') {
        return None;
    }
    match prefix {
        'x' => Some(Role::Coord(k)),
        'r' => Some(Role::Regressor(k)),
        _ => None,
    }
}

/// Requires `1..=max` to each occur exactly once.
fn ordered(found: Vec<(usize, usize)>, prefix: char) -> Result<Vec<usize>, String> {
    let mut slots = vec![None; found.len()];
    for (k, field) in found {
        match slots.get_mut(k - 1) {
            Some(slot @ None) => *slot = Some(field),
            Some(Some(_)) => return Err(format!("column {prefix}{k} appears twice")),
            None => return Err(format!("columns {prefix}1..{prefix}N must be numbered without gaps")),
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("filled")).collect())
}

impl Layout {
    pub fn from_header(header: &csv::StringRecord) -> Result<Self, String> {
        let mut coords = Vec::new();
        let mut regressors = Vec::new();
        let mut response = None;
        for (field, raw) in header.iter().enumerate() {
            let name = raw.trim();
            match parse_role(name) {
                Some(Role::Coord(k)) => coords.push((k, field)),
                Some(Role::Regressor(k)) => regressors.push((k, field)),
                Some(Role::Response) if response.is_none() => response = Some(field),
                Some(Role::Response) => return Err("column y appears twice".into()),
                None => return Err(format!("unrecognized column {name:?}; expected x1..xd, r1..rp, y")),
            }
        }
        if coords.is_empty() {
            return Err("no coordinate columns (x1, x2, ...)".into());
        }
        Ok(Self {
            coords: ordered(coords, 'x')?,
            regressors: ordered(regressors, 'r')?,
            response,
        })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// Parsed rows before they are assembled into a [`Dataset`].
#[derive(Debug, Clone)]
pub struct Table {
    pub layout: Layout,
    pub locations: Vec<Location>,
    /// Row-major regressor values; one row per location.
    pub regressors: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Source line of each row.
    pub lines: Vec<u64>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Design matrix; a constant column when the file named no regressors.
    pub fn design(&self) -> DMatrix<f64> {
        let p = self.layout.regressors.len();
        if p == 0 {
            return DMatrix::from_element(self.len(), 1, 1.0);
        }
        DMatrix::from_fn(self.len(), p, |i, j| self.regressors[i][j])
    }
}

pub fn read_table(path: &Path) -> Result<Table, IngestError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    parse_table(path, &text)
}

pub fn parse_table(path: &Path, text: &str) -> Result<Table, IngestError> {
    let path_buf = || path.to_path_buf();
    let csv_err = |source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    };
    if text.trim().is_empty() {
        return Err(IngestError::Empty { path: path_buf() });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_err)?.clone();
    let layout = Layout::from_header(&header).map_err(|reason| IngestError::Header {
        path: path_buf(),
        reason,
    })?;
    let mut table = Table {
        layout,
        locations: Vec::new(),
        regressors: Vec::new(),
        y: Vec::new(),
        lines: Vec::new(),
    };
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != header.len() {
            return Err(IngestError::Width {
                path: path_buf(),
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let number = |field: usize| -> Result<f64, IngestError> {
            let raw = record[field].trim();
            let column = header[field].trim().to_string();
            let v: f64 = raw.parse().map_err(|_| IngestError::Parse {
                path: path_buf(),
                line,
                column: column.clone(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(IngestError::NonFinite {
                    path: path_buf(),
                    line,
                    column,
                });
            }
            Ok(v)
        };
        let coords = table.layout.coords.iter().map(|&f| number(f)).collect::<Result<Vec<_>, _>>()?;
        let regs = table.layout.regressors.iter().map(|&f| number(f)).collect::<Result<Vec<_>, _>>()?;
        if let Some(f) = table.layout.response {
            table.y.push(number(f)?);
        }
        table.locations.push(Location::new(coords).map_err(|source| IngestError::Model {
            path: path_buf(),
            source,
        })?);
        table.regressors.push(regs);
        table.lines.push(line);
    }
    Ok(table)
}

/// Reads an observation file into a checked [`Dataset`].
pub fn ingest_csv(path: &Path) -> Result<Dataset, IngestError> {
    let table = read_table(path)?;
    into_dataset(path, table)
}

pub fn into_dataset(path: &Path, table: Table) -> Result<Dataset, IngestError> {
    if table.layout.response.is_none() {
        return Err(IngestError::Header {
            path: path.to_path_buf(),
            reason: "missing response column y".into(),
        });
    }
    let x = table.design();
    let (n, p) = (table.len(), x.ncols());
    if n <= p {
        return Err(IngestError::TooFew {
            path: path.to_path_buf(),
            n,
            p,
        });
    }
    Dataset::new(table.locations, DVector::from_vec(table.y), x).map_err(|source| match source {
        ModelError::DuplicateLocation(i, j) => IngestError::DuplicateLocation {
            path: path.to_path_buf(),
            first: table.lines[i],
            second: table.lines[j],
        },
        source => IngestError::Model {
            path: path.to_path_buf(),
            source,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset, IngestError> {
        let path = Path::new("mem.csv");
        into_dataset(path, parse_table(path, text)?)
    }

    #[test]
    fn constant_column_added() {
        let ds = parse("x1,y\n0,1\n0.5,2\n1,3\n").unwrap();
        assert_eq!((ds.n(), ds.p()), (3, 1));
        assert_eq!(ds.x()[(2, 0)], 1.0);
    }

    #[test]
    fn columns_in_any_order() {
        let ds = parse("y,r2,x2,r1,x1\n1,0.1,0,1,0\n2,0.2,1,1,0\n3,0.3,0,1,1\n4,0.5,1,1,1\n").unwrap();
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.locations()[1].coords, vec![0.0, 1.0]);
        assert_eq!(ds.x()[(3, 1)], 0.5);
    }

    #[test]
    fn duplicate_rows_reported_by_line() {
        let err = parse("x1,y\n0,1\n0.5,2\n0,3\n").unwrap_err();
        assert!(matches!(err, IngestError::DuplicateLocation { first: 2, second: 4, .. }), "{err}");
    }

    #[test]
    fn parse_error_has_line_and_column() {
        let err = parse("x1,y\n0,1\n0.5,abc\n").unwrap_err();
        assert!(matches!(err, IngestError::Parse { line: 3, ref column, .. } if column == "y"), "{err}");
    }

    #[test]
    fn rejects_nan_and_empty_and_small() {
        assert!(matches!(parse("x1,y\n0,NaN\n1,2\n"), Err(IngestError::NonFinite { .. })));
        assert!(matches!(parse(""), Err(IngestError::Empty { .. })));
        assert!(matches!(parse("x1,y\n0,1\n"), Err(IngestError::TooFew { n: 1, p: 1, .. })));
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(parse("s,y\n0,1\n1,2\n"), Err(IngestError::Header { .. })));
        assert!(matches!(parse("x1,x3,y\n0,0,1\n1,1,2\n"), Err(IngestError::Header { .. })));
        assert!(matches!(parse("x1\n0\n1\n"), Err(IngestError::Header { .. })));
        assert!(matches!(parse("x01,y\n0,1\n1,2\n"), Err(IngestError::Header { .. })));
    }
}
