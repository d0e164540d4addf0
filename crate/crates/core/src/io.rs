//! Plain-text readers and writers for matrices, embeddings, couplings,
//! edge lists and label files.
//!
//! Numbers are written in the shortest decimal form that parses back to the
//! identical `f64`. All writers replace the target atomically.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::smacof::Embedding;
use crate::transport::Coupling;

/// Entries below this are omitted from sparse coupling files.
pub const SPARSE_DROP_BELOW: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvFormat {
    pub delimiter: u8,
    pub header: bool,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self { delimiter: b',', header: false }
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: show(path), source }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: show(path), line, msg: msg.into() }
}

pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(path: &Path, line: u64, field: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| parse_err(path, line, format!("not a number: `{field}`")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value `{field}`")));
    }
    Ok(v)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| io_err(path, std::io::Error::other("path has no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    parse_err(path, line, err.to_string())
}

/// Dense numeric table. Rows must all have the same width.
pub fn read_matrix(path: &Path, fmt: CsvFormat) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(fmt.delimiter)
        .has_headers(fmt.header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path, io),
            other => parse_err(path, 0, format!("{other:?}")),
        })?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(path, line, format!("expected {w} fields, found {}", record.len())))
            }
            _ => {}
        }
        for field in record.iter() {
            values.push(parse_f64(path, line, field)?);
        }
        rows += 1;
    }
    let cols = width.ok_or_else(|| parse_err(path, 1, "no data rows"))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn matrix_bytes(m: &DMatrix<f64>, fmt: CsvFormat, header: Option<Vec<String>>, index: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().delimiter(fmt.delimiter).from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::NumericalFailure(format!("csv encoding failed: {e}"));
    if let Some(h) = header {
        w.write_record(&h).map_err(to_err)?;
    }
    for (i, row) in m.row_iter().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(m.ncols() + 1);
        if index {
            fields.push(i.to_string());
        }
        fields.extend(row.iter().map(|&v| format_f64(v)));
        w.write_record(&fields).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::NumericalFailure(format!("csv encoding failed: {e}")))
}

/// Header names `c0, c1, ...` are emitted when `fmt.header` is set.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, fmt: CsvFormat) -> Result<()> {
    let header = fmt.header.then(|| (0..m.ncols()).map(|c| format!("c{c}")).collect());
    write_atomic(path, &matrix_bytes(m, fmt, header, false)?)
}

/// Embedding CSV: header `index,z0,z1,...`, then one row per point.
pub fn write_embedding(path: &Path, z: &Embedding) -> Result<()> {
    let mut header = vec!["index".to_string()];
    header.extend((0..z.dim()).map(|c| format!("z{c}")));
    write_atomic(path, &matrix_bytes(z.as_matrix(), CsvFormat::default(), Some(header), true)?)
}

/// Accepts files written by [`write_embedding`] as well as bare numeric
/// tables without header or index column.
pub fn read_embedding(path: &Path) -> Result<Embedding> {
    let text = read_text(path)?;
    let first = text.lines().next().unwrap_or("");
    let indexed = first.split(',').next().map(str::trim) == Some("index");
    let m = read_matrix(path, CsvFormat { delimiter: b',', header: indexed })?;
    let m = if indexed {
        for (i, v) in m.column(0).iter().enumerate() {
            if *v != i as f64 {
                return Err(parse_err(path, i as u64 + 2, format!("index column reads {v}, expected {i}")));
            }
        }
        m.columns(1, m.ncols() - 1).into_owned()
    } else {
        m
    };
    Embedding::new(m)
}

/// Parsed edge list with the number of self-loops that were dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub node_count: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub self_loops_dropped: usize,
}

/// One edge per line as `i j [w]`, separated by whitespace or commas.
/// Lines starting with `#` and blank lines are skipped. Node count is one
/// past the largest index unless `min_nodes` is larger.
pub fn read_edge_list(path: &Path, min_nodes: usize) -> Result<EdgeList> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    let mut loops = 0;
    let mut max_node = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx as u64 + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> =
            content.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(path, line, format!("expected `i j [w]`, found {} fields", fields.len())));
        }
        let node = |f: &str| f.parse::<usize>().map_err(|_| parse_err(path, line, format!("not a node index: `{f}`")));
        let (i, j) = (node(fields[0])?, node(fields[1])?);
        let w = match fields.get(2) {
            Some(f) => parse_f64(path, line, f)?,
            None => 1.0,
        };
        if w <= 0.0 {
            return Err(parse_err(path, line, format!("edge weight must be positive, got {w}")));
        }
        max_node = max_node.max(Some(i.max(j)));
        if i == j {
            loops += 1;
            continue;
        }
        edges.push((i, j, w));
    }
    let node_count = max_node.map_or(0, |m| m + 1).max(min_nodes);
    Ok(EdgeList { node_count, edges, self_loops_dropped: loops })
}

/// Dense coupling as a plain CSV table, or sparse as `# shape n m` followed
/// by `i,j,p` triplets for entries of at least [`SPARSE_DROP_BELOW`].
pub fn write_coupling(path: &Path, p: &Coupling, sparse: bool) -> Result<()> {
    if !sparse {
        return write_matrix(path, p.as_matrix(), CsvFormat::default());
    }
    let (n, m) = p.shape();
    let mut out = format!("# shape {n} {m}\ni,j,p\n");
    let pm = p.as_matrix();
    for i in 0..n {
        for j in 0..m {
            let v = pm[(i, j)];
            if v >= SPARSE_DROP_BELOW {
                out.push_str(&format!("{i},{j},{}\n", format_f64(v)));
            }
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Reads either coupling layout written by [`write_coupling`].
pub fn read_coupling(path: &Path) -> Result<Coupling> {
    let text = read_text(path)?;
    let Some(shape_line) = text.lines().next().and_then(|l| l.strip_prefix("# shape")) else {
        return Coupling::new(read_matrix(path, CsvFormat::default())?, 0.0);
    };
    let dims: Vec<usize> = shape_line
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| parse_err(path, 1, format!("bad shape field `{s}`"))))
        .collect::<Result<_>>()?;
    let [n, m] = dims[..] else {
        return Err(parse_err(path, 1, "shape line needs two integers"));
    };
    let mut values = DMatrix::zeros(n, m);
    for (idx, raw) in text.lines().enumerate().skip(1) {
        let line = idx as u64 + 1;
        let content = raw.trim();
        if content.is_empty() || content == "i,j,p" {
            continue;
        }
        let fields: Vec<&str> = content.split(',').collect();
        let [fi, fj, fv] = fields[..] else {
            return Err(parse_err(path, line, "expected `i,j,p`"));
        };
        let index = |f: &str, bound: usize| {
            f.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v < bound)
                .ok_or_else(|| parse_err(path, line, format!("index `{f}` out of range")))
        };
        values[(index(fi, n)?, index(fj, m)?)] = parse_f64(path, line, fv)?;
    }
    Coupling::new(values, 0.0)
}

fn data_lines(text: &str) -> impl Iterator<Item = (u64, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i as u64 + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// One integer class per line; a non-numeric first line is a header.
pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (k, (line, content)) in data_lines(&text).enumerate() {
        let field = content.split(',').next_back().unwrap_or("").trim();
        match field.parse::<i64>() {
            Ok(v) => out.push(v),
            Err(_) if k == 0 => continue,
            Err(_) => return Err(parse_err(path, line, format!("not an integer label: `{field}`"))),
        }
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let mut out = String::from("label\n");
    for l in labels {
        out.push_str(&format!("{l}\n"));
    }
    write_atomic(path, out.as_bytes())
}

/// Pairs `i,j` (comma or whitespace separated), one per line; a
/// non-numeric first line is a header.
pub fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (k, (line, content)) in data_lines(&text).enumerate() {
        let fields: Vec<&str> =
            content.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        let parsed = match fields[..] {
            [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => out.push(p),
            None if k == 0 => continue,
            None => return Err(parse_err(path, line, format!("expected `i,j`, found `{content}`"))),
        }
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[(usize, usize)]) -> Result<()> {
    let mut out = String::from("i,j\n");
    for (i, j) in pairs {
        out.push_str(&format!("{i},{j}\n"));
    }
    write_atomic(path, out.as_bytes())
}
