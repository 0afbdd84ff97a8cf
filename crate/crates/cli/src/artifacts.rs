//! CSV tables with a provenance line.
//!
//! Every table starts with `# schema=<v> config_hash=<h> seed=<s> table=<name>`
//! followed by a column header. Floats are written in Rust's shortest
//! round-trip form, so equal values give equal bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fmwc::evalbench::experiments::ReportRow;

use crate::error::CliError;

pub const ARTIFACT_SCHEMA: u32 = 1;

pub const REPORT_COLUMNS: [&str; 7] = [
    "table",
    "method",
    "scoring",
    "metric",
    "value",
    "trajectories",
    "flops_ratio",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: impl ToString) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed: seed.to_string(),
        }
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_table(
    path: &Path,
    prov: &Provenance,
    table: &str,
    columns: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let mut out = String::new();
    writeln!(
        out,
        "# schema={ARTIFACT_SCHEMA} config_hash={} seed={} table={table}",
        prov.config_hash, prov.seed
    )
    .unwrap();
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_report(path: &Path, prov: &Provenance, table: &str, rows: &[ReportRow]) -> Result<(), CliError> {
    write_table(path, prov, table, &REPORT_COLUMNS, rows.iter().map(report_cells))
}

fn report_cells(r: &ReportRow) -> Vec<String> {
    vec![
        r.table.clone(),
        r.method.clone(),
        r.scoring.clone(),
        r.metric.clone(),
        num(r.value),
        r.trajectories.to_string(),
        r.flops_ratio.map(num).unwrap_or_default(),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedTable {
    pub path: PathBuf,
    pub schema: u32,
    pub prov: Provenance,
    pub table: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParsedTable {
    pub fn is_report(&self) -> bool {
        self.columns.iter().map(String::as_str).eq(REPORT_COLUMNS)
    }

    pub fn column(&self, name: &str) -> Result<usize, CliError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Corrupt(format!("{}: no column '{name}'", self.path.display())))
    }

    pub fn float(&self, row: usize, col: usize) -> Result<f64, CliError> {
        let cell = &self.rows[row][col];
        cell.parse()
            .map_err(|_| CliError::Corrupt(format!("{}: '{cell}' is not a number", self.path.display())))
    }

    pub fn report_rows(&self) -> Result<Vec<ReportRow>, CliError> {
        (0..self.rows.len())
            .map(|i| {
                let c = &self.rows[i];
                let trajectories = c[5]
                    .parse()
                    .map_err(|_| CliError::Corrupt(format!("{}: bad trajectory count", self.path.display())))?;
                let mut row = ReportRow::new(&c[0], &c[1], &c[2], &c[3], self.float(i, 4)?, trajectories);
                if !c[6].is_empty() {
                    row = row.with_flops_ratio(self.float(i, 6)?);
                }
                Ok(row)
            })
            .collect()
    }
}

/// `None` when the file does not start with a provenance line.
pub fn read_table(path: &Path) -> Result<Option<ParsedTable>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let Some(first) = lines.next().and_then(|l| l.strip_prefix("# ")) else {
        return Ok(None);
    };
    let field = |key: &str| {
        first
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .map(str::to_string)
    };
    let bad = |what: &str| CliError::Corrupt(format!("{}: {what}", path.display()));
    let schema = field("schema")
        .ok_or_else(|| bad("no schema in header"))?
        .parse()
        .map_err(|_| bad("unreadable schema"))?;
    let prov = Provenance {
        config_hash: field("config_hash").ok_or_else(|| bad("no config hash in header"))?,
        seed: field("seed").ok_or_else(|| bad("no seed in header"))?,
    };
    let table = field("table").ok_or_else(|| bad("no table name in header"))?;
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("no column header"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != columns.len() {
            return Err(bad(&format!(
                "row {} has {} cells, expected {}",
                i + 1,
                cells.len(),
                columns.len()
            )));
        }
        rows.push(cells);
    }
    Ok(Some(ParsedTable {
        path: path.to_path_buf(),
        schema,
        prov,
        table,
        columns,
        rows,
    }))
}
