//! Sparse count matrices: ingestion, preprocessing, transposition, tokens.
//!
//! A matrix is stored in coordinate form with strictly positive counts
//! (zeros are implicit), entries sorted by (row, col) and duplicate cells
//! summed at construction. All downstream samplers consume either the
//! rows-as-points view or the token expansion produced here.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One nonzero cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub count: u64,
}

/// Nonnegative integer matrix in coordinate form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCountMatrix {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
    row_labels: Option<Vec<String>>,
    col_labels: Option<Vec<String>>,
    total: u64,
}

/// Surviving original indices after `preprocess`, in output order.
///
/// When label merging applied, `rows` indexes the merged intermediate rather
/// than the raw input; `merged_rows` reports that.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessMap {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub merged_rows: bool,
}

impl SparseCountMatrix {
    /// Builds a matrix from (row, col, count) triplets. Duplicate cells are
    /// summed; zero counts are dropped.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, u64)>,
    ) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if n_rows > u32::MAX as usize || n_cols > u32::MAX as usize {
            return Err(Error::invalid("matrix dimension exceeds u32 range"));
        }
        let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for (row, col, count) in triplets {
            if row >= n_rows || col >= n_cols {
                return Err(Error::invalid(format!(
                    "entry ({row}, {col}) out of bounds for {n_rows}x{n_cols} matrix"
                )));
            }
            if count > 0 {
                *cells.entry((row, col)).or_insert(0) += count;
            }
        }
        let mut total = 0u64;
        let entries = cells
            .into_iter()
            .map(|((row, col), count)| {
                total += count;
                Entry { row, col, count }
            })
            .collect();
        Ok(Self {
            n_rows,
            n_cols,
            entries,
            row_labels: None,
            col_labels: None,
            total,
        })
    }

    pub fn with_row_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_rows {
            return Err(Error::invalid(format!(
                "{} row labels for {} rows",
                labels.len(),
                self.n_rows
            )));
        }
        self.row_labels = Some(labels);
        Ok(self)
    }

    pub fn with_col_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_cols {
            return Err(Error::invalid(format!(
                "{} column labels for {} columns",
                labels.len(),
                self.n_cols
            )));
        }
        self.col_labels = Some(labels);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Entries sorted by (row, col), all counts strictly positive.
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// N: sum of all counts.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn row_labels(&self) -> Option<&[String]> {
        self.row_labels.as_deref()
    }

    pub fn col_labels(&self) -> Option<&[String]> {
        self.col_labels.as_deref()
    }

    /// Per-row sparse count vectors; the DPMM's points view.
    pub fn rows_as_points(&self) -> Vec<Vec<(u32, u64)>> {
        let mut points = vec![Vec::new(); self.n_rows];
        for e in &self.entries {
            points[e.row].push((e.col as u32, e.count));
        }
        points
    }

    /// Reads the MatrixMarket coordinate subset
    /// `%%MatrixMarket matrix coordinate integer general`, 1-based indices.
    pub fn load_matrix_market(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();

        let (header_line, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        let words: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
        if words.len() != 5
            || words[0] != "%%matrixmarket"
            || words[1..] != ["matrix", "coordinate", "integer", "general"]
        {
            return Err(Error::parse(
                path,
                header_line + 1,
                "malformed header: expected '%%MatrixMarket matrix coordinate integer general'",
            ));
        }

        let mut size: Option<(usize, usize, usize)> = None;
        let mut triplets = Vec::new();
        let mut seen = 0usize;
        let mut last_line = header_line + 1;
        for (idx, line) in lines {
            let lineno = idx + 1;
            last_line = lineno;
            let line = line.trim();
            if line.is_empty() || line.starts_with('%') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match size {
                None => {
                    if fields.len() != 3 {
                        return Err(Error::parse(
                            path,
                            lineno,
                            "malformed size line: expected 'rows cols nnz'",
                        ));
                    }
                    let mut dims = [0usize; 3];
                    for (d, f) in dims.iter_mut().zip(&fields) {
                        *d = f.parse().map_err(|_| {
                            Error::parse(path, lineno, format!("non-integer value '{f}'"))
                        })?;
                    }
                    size = Some((dims[0], dims[1], dims[2]));
                }
                Some((n_rows, n_cols, nnz)) => {
                    if seen == nnz {
                        return Err(Error::parse(
                            path,
                            lineno,
                            format!("unexpected entry after the declared {nnz}"),
                        ));
                    }
                    if fields.len() != 3 {
                        return Err(Error::parse(
                            path,
                            lineno,
                            "malformed entry: expected 'row col count'",
                        ));
                    }
                    let mut vals = [0i64; 3];
                    for (v, f) in vals.iter_mut().zip(&fields) {
                        *v = f.parse().map_err(|_| {
                            Error::parse(path, lineno, format!("non-integer value '{f}'"))
                        })?;
                    }
                    let (i, j, v) = (vals[0], vals[1], vals[2]);
                    if i < 1 || i as usize > n_rows || j < 1 || j as usize > n_cols {
                        return Err(Error::parse(
                            path,
                            lineno,
                            format!("index out of bounds: ({i}, {j}) in {n_rows}x{n_cols}"),
                        ));
                    }
                    if v < 0 {
                        return Err(Error::parse(path, lineno, format!("negative count {v}")));
                    }
                    seen += 1;
                    if v > 0 {
                        triplets.push((i as usize - 1, j as usize - 1, v as u64));
                    }
                }
            }
        }
        let (n_rows, n_cols, nnz) =
            size.ok_or_else(|| Error::parse(path, last_line, "missing size line"))?;
        if seen != nnz {
            return Err(Error::parse(
                path,
                last_line,
                format!("expected {nnz} entries, found {seen}"),
            ));
        }
        Self::from_triplets(n_rows, n_cols, triplets)
    }

    pub fn save_matrix_market(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("%%MatrixMarket matrix coordinate integer general\n");
        let _ = writeln!(
            out,
            "{} {} {}",
            self.n_rows,
            self.n_cols,
            self.entries.len()
        );
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {}", e.row + 1, e.col + 1, e.count);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a rectangular dense CSV of nonnegative integers. With
    /// `has_labels`, the first row holds column labels (its first cell is the
    /// corner and is ignored) and the first column holds row labels.
    pub fn load_dense_csv(path: &Path, has_labels: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines: Vec<(usize, &str)> = text.lines().enumerate().collect();
        while matches!(lines.last(), Some((_, l)) if l.trim().is_empty()) {
            lines.pop();
        }
        if lines.is_empty() {
            return Err(Error::parse(path, 1, "empty file"));
        }

        let mut col_labels = None;
        let mut row_labels: Option<Vec<String>> = has_labels.then(Vec::new);
        if has_labels {
            let (idx, header) = lines.remove(0);
            let cells: Vec<&str> = header.split(',').collect();
            if cells.len() < 2 {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    "header row has no data columns",
                ));
            }
            col_labels = Some(cells[1..].iter().map(|c| c.trim().to_string()).collect());
            if lines.is_empty() {
                return Err(Error::parse(path, idx + 1, "no data rows after header"));
            }
        }

        let mut width: Option<usize> = None;
        let mut triplets = Vec::new();
        let mut n_rows = 0usize;
        for (r, (idx, line)) in lines.iter().enumerate() {
            let lineno = idx + 1;
            let mut cells: Vec<&str> = line.split(',').collect();
            if has_labels {
                let label = cells.remove(0);
                row_labels.as_mut().unwrap().push(label.trim().to_string());
            }
            match width {
                None => width = Some(cells.len()),
                Some(w) if w != cells.len() => {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("row {} has {} cells, expected {w}", r + 1, cells.len()),
                    ));
                }
                _ => {}
            }
            for (c, cell) in cells.iter().enumerate() {
                let v: i64 = cell.trim().parse().map_err(|_| {
                    Error::parse(
                        path,
                        lineno,
                        format!("non-integer cell at row {}, column {}", r + 1, c + 1),
                    )
                })?;
                if v < 0 {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("negative cell at row {}, column {}", r + 1, c + 1),
                    ));
                }
                if v > 0 {
                    triplets.push((r, c, v as u64));
                }
            }
            n_rows = r + 1;
        }

        let mut m = Self::from_triplets(n_rows, width.unwrap_or(0), triplets)?;
        if let Some(labels) = row_labels {
            m = m.with_row_labels(labels)?;
        }
        if let Some(labels) = col_labels {
            m = m.with_col_labels(labels)?;
        }
        Ok(m)
    }

    pub fn save_dense_csv(&self, path: &Path) -> Result<()> {
        let mut dense = vec![0u64; self.n_rows * self.n_cols];
        for e in &self.entries {
            dense[e.row * self.n_cols + e.col] = e.count;
        }
        let mut out = String::new();
        if let Some(cols) = &self.col_labels {
            out.push(',');
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        for r in 0..self.n_rows {
            if let Some(rows) = &self.row_labels {
                out.push_str(&rows[r]);
                out.push(',');
            }
            let row = &dense[r * self.n_cols..(r + 1) * self.n_cols];
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Removes all-zero rows and columns (compacting indices) and, when
    /// requested, first sums rows that share an identical label.
    pub fn preprocess(&self, merge_duplicate_labels: bool) -> Result<(Self, PreprocessMap)> {
        let mut work = self.clone();
        let merged = merge_duplicate_labels && self.row_labels.is_some();
        if merged {
            work = self.merge_labeled_rows();
        }

        let mut row_sum = vec![0u64; work.n_rows];
        let mut col_sum = vec![0u64; work.n_cols];
        for e in &work.entries {
            row_sum[e.row] += e.count;
            col_sum[e.col] += e.count;
        }
        let rows: Vec<usize> = (0..work.n_rows).filter(|&r| row_sum[r] > 0).collect();
        let cols: Vec<usize> = (0..work.n_cols).filter(|&c| col_sum[c] > 0).collect();
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::EmptyAfterPreprocessing);
        }
        let mut row_new = vec![usize::MAX; work.n_rows];
        for (new, &old) in rows.iter().enumerate() {
            row_new[old] = new;
        }
        let mut col_new = vec![usize::MAX; work.n_cols];
        for (new, &old) in cols.iter().enumerate() {
            col_new[old] = new;
        }

        let triplets = work
            .entries
            .iter()
            .map(|e| (row_new[e.row], col_new[e.col], e.count));
        let mut m = Self::from_triplets(rows.len(), cols.len(), triplets)?;
        if let Some(labels) = &work.row_labels {
            m = m.with_row_labels(rows.iter().map(|&r| labels[r].clone()).collect())?;
        }
        if let Some(labels) = &work.col_labels {
            m = m.with_col_labels(cols.iter().map(|&c| labels[c].clone()).collect())?;
        }
        Ok((
            m,
            PreprocessMap {
                rows,
                cols,
                merged_rows: merged,
            },
        ))
    }

    fn merge_labeled_rows(&self) -> Self {
        let labels = self.row_labels.as_ref().expect("caller checked labels");
        let mut group_of = Vec::with_capacity(self.n_rows);
        let mut group_labels: Vec<String> = Vec::new();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for label in labels {
            let g = *index.entry(label).or_insert_with(|| {
                group_labels.push(label.clone());
                group_labels.len() - 1
            });
            group_of.push(g);
        }
        let triplets = self
            .entries
            .iter()
            .map(|e| (group_of[e.row], e.col, e.count));
        let mut m = Self::from_triplets(group_labels.len(), self.n_cols, triplets)
            .expect("merged dims are valid")
            .with_row_labels(group_labels)
            .expect("one label per group");
        if let Some(cols) = &self.col_labels {
            m = m.with_col_labels(cols.clone()).expect("unchanged length");
        }
        m
    }

    /// Entry (r, c, v) becomes (c, r, v); labels swap roles.
    pub fn transpose(&self) -> Self {
        let mut entries: Vec<Entry> = self
            .entries
            .iter()
            .map(|e| Entry {
                row: e.col,
                col: e.row,
                count: e.count,
            })
            .collect();
        entries.sort_unstable_by_key(|e| (e.row, e.col));
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            entries,
            row_labels: self.col_labels.clone(),
            col_labels: self.row_labels.clone(),
            total: self.total,
        }
    }

    /// Expands counts into tokens: entry (r, c, v) yields v tokens at (r, c),
    /// grouped by row because entries are (row, col)-sorted. Topic labels
    /// start at 0.
    pub fn to_tokens(&self) -> Result<TokenTable> {
        if self.total == 0 {
            return Err(Error::EmptyMatrix);
        }
        let n = usize::try_from(self.total)
            .map_err(|_| Error::invalid("token count exceeds addressable memory"))?;
        let mut row_of = Vec::with_capacity(n);
        let mut col_of = Vec::with_capacity(n);
        for e in &self.entries {
            for _ in 0..e.count {
                row_of.push(e.row as u32);
                col_of.push(e.col as u32);
            }
        }
        Ok(TokenTable {
            zr: vec![0; row_of.len()],
            zc: vec![0; col_of.len()],
            row_of,
            col_of,
            n_rows: self.n_rows,
            n_cols: self.n_cols,
        })
    }
}

/// Token-level view of a matrix: one record per unit of count, carrying the
/// current (row-topic, column-topic) assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTable {
    pub row_of: Vec<u32>,
    pub col_of: Vec<u32>,
    pub zr: Vec<u32>,
    pub zc: Vec<u32>,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl TokenTable {
    pub fn len(&self) -> usize {
        self.row_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_of.is_empty()
    }

    /// Re-aggregates tokens by (row, col); inverse of
    /// [`SparseCountMatrix::to_tokens`] up to labels.
    pub fn re_aggregate(&self) -> Result<SparseCountMatrix> {
        let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for (&r, &c) in self.row_of.iter().zip(&self.col_of) {
            *cells.entry((r as usize, c as usize)).or_insert(0) += 1;
        }
        SparseCountMatrix::from_triplets(
            self.n_rows,
            self.n_cols,
            cells.into_iter().map(|((r, c), v)| (r, c, v)),
        )
    }
}
