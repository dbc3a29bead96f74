//! CSV emission: `#`-prefixed metadata lines, one header row, data rows.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct CsvDoc {
    comments: Vec<String>,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvDoc {
    pub fn new(columns: &[&str]) -> Self {
        CsvDoc {
            comments: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Adds one `# key=value ...` metadata line.
    pub fn comment(&mut self, line: impl Into<String>) {
        self.comments.push(line.into());
    }

    pub fn row(&mut self, cells: Vec<String>) {
        assert_eq!(
            cells.len(),
            self.columns.len(),
            "row width does not match the header"
        );
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(&join_csv(&self.columns));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&join_csv(row));
            out.push('\n');
        }
        out
    }

    /// Writes to the given path, or to stdout when none is given.
    pub fn write(&self, out: Option<&Path>) -> io::Result<()> {
        match out {
            Some(path) => {
                let mut w = BufWriter::new(File::create(path)?);
                w.write_all(self.render().as_bytes())?;
                w.flush()
            }
            None => io::stdout().write_all(self.render().as_bytes()),
        }
    }
}

fn join_csv(cells: &[String]) -> String {
    cells
        .iter()
        .map(|c| quote_if_needed(c))
        .collect::<Vec<_>>()
        .join(",")
}

/// Quotes a field only when it contains a delimiter, quote, or newline.
fn quote_if_needed(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}
