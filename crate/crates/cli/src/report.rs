//! Plain-text and CSV rendering of command results.

use std::fmt::Write;

enum Item {
    Line(String),
    Table {
        header: Vec<String>,
        rows: Vec<Vec<String>>,
    },
    Check {
        name: String,
        detail: String,
        pass: bool,
    },
}

#[derive(Default)]
pub struct Report {
    items: Vec<Item>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn line(&mut self, text: impl Into<String>) {
        self.items.push(Item::Line(text.into()));
    }

    pub fn table(&mut self, header: &[&str], rows: Vec<Vec<String>>) {
        self.items.push(Item::Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows,
        });
    }

    pub fn check(
        &mut self,
        name: impl Into<String>,
        detail: impl Into<String>,
        pass: bool,
    ) -> bool {
        self.items.push(Item::Check {
            name: name.into(),
            detail: detail.into(),
            pass,
        });
        pass
    }

    pub fn passed(&self) -> bool {
        self.items
            .iter()
            .all(|item| !matches!(item, Item::Check { pass: false, .. }))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            match item {
                Item::Line(text) => {
                    let _ = writeln!(out, "{text}");
                }
                Item::Table { header, rows } => render_table(&mut out, header, rows),
                Item::Check { name, detail, pass } => {
                    let status = if *pass { "PASS" } else { "FAIL" };
                    let _ = writeln!(out, "{status} {name}: {detail}");
                }
            }
        }
        out
    }

    /// Tables in order, then one `check,status,detail` table if any checks ran.
    pub fn csv(&self) -> String {
        let mut blocks = Vec::new();
        let mut checks = Vec::new();
        for item in &self.items {
            match item {
                Item::Line(_) => {}
                Item::Table { header, rows } => {
                    let mut block = csv_row(header);
                    for row in rows {
                        block.push_str(&csv_row(row));
                    }
                    blocks.push(block);
                }
                Item::Check { name, detail, pass } => {
                    let status = if *pass { "pass" } else { "fail" };
                    checks.push(vec![name.clone(), status.to_string(), detail.clone()]);
                }
            }
        }
        if !checks.is_empty() {
            let mut block = csv_row(&["check".into(), "status".into(), "detail".into()]);
            for row in &checks {
                block.push_str(&csv_row(row));
            }
            blocks.push(block);
        }
        blocks.join("\n")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_row(fields: &[String]) -> String {
    let mut line = fields
        .iter()
        .map(|f| csv_field(f))
        .collect::<Vec<_>>()
        .join(",");
    line.push('\n');
    line
}

fn render_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_row = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "{}", fmt_row(header));
    let rule: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
    let _ = writeln!(out, "{}", "-".repeat(rule));
    for row in rows {
        let _ = writeln!(out, "{}", fmt_row(row));
    }
}
