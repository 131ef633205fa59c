use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Column-aligned table rendered under a `[name]` heading.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn render(&self, out: &mut String) {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let _ = writeln!(out, "[{}]", self.name);
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row
                .iter()
                .zip(&width)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
    }
}

/// Plain-text report: ordered `key = value` lines followed by tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        for t in &self.tables {
            out.push('\n');
            t.render(&mut out);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// Parses the `key = value` block of a rendered report (tables are skipped).
    pub fn parse_entries(text: &str) -> Vec<(String, String)> {
        text.lines()
            .take_while(|l| !l.trim().is_empty())
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_entries_then_tables() {
        let mut r = Report::default();
        r.set("test_accuracy", "0.9");
        r.set("seeds", 5);
        r.set("test_accuracy", "0.95");
        let mut t = Table::new("ablation", &["variant", "mean"]);
        t.push(vec!["uniform".into(), "0.4".into()]);
        t.push(vec!["token_adaptive".into(), "0.93".into()]);
        r.tables.push(t);
        let text = r.render();
        assert_eq!(
            text,
            "test_accuracy = 0.95\nseeds = 5\n\n[ablation]\nvariant         mean\nuniform         0.4\ntoken_adaptive  0.93\n"
        );
        assert_eq!(
            Report::parse_entries(&text),
            vec![
                ("test_accuracy".to_string(), "0.95".to_string()),
                ("seeds".to_string(), "5".to_string())
            ]
        );
    }
}
