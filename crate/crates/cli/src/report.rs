//! Plain-text and TSV reports.

use std::fmt::Write as _;

use pipesim::fraction::{format_sig, Fraction};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub value: String,
    pub unit: String,
}

impl Cell {
    pub fn new(value: impl Into<String>, unit: impl Into<String>) -> Self {
        Cell { value: value.into(), unit: unit.into() }
    }

    /// A text cell with no unit (flags, messages).
    pub fn text(value: impl Into<String>) -> Self {
        Cell::new(value, "")
    }

    /// Three significant digits.
    pub fn fraction(value: &Fraction) -> Self {
        Cell::new(value.to_sig_string(3), "fraction")
    }

    pub fn percent(value: &Fraction) -> Self {
        Cell::new(format_sig(100.0 * value.to_f64(), 3), "%")
    }

    pub fn ratio(value: &Fraction) -> Self {
        Cell::new(value.to_sig_string(4), "x")
    }

    pub fn bytes(value: f64) -> Self {
        Cell::new(format!("{}", value.round() as u64), "B")
    }

    pub fn int(value: impl Into<u64>, unit: &str) -> Self {
        Cell::new(value.into().to_string(), unit)
    }

    /// Large magnitudes such as FLOP counts, in exponent notation.
    pub fn sci(value: f64, unit: &str) -> Self {
        Cell::new(format!("{value:.3e}"), unit)
    }

    pub fn pass_fail(ok: bool) -> Self {
        Cell::text(if ok { "PASS" } else { "FAIL" })
    }

    fn render(&self) -> String {
        if self.unit.is_empty() {
            self.value.clone()
        } else {
            format!("{} {}", self.value, self.unit)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub title: String,
    /// Column headings for multi-cell rows; empty for label/value sections.
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Section {
    pub fn new(title: impl Into<String>) -> Self {
        Section { title: title.into(), columns: Vec::new(), rows: Vec::new() }
    }

    pub fn with_columns(title: impl Into<String>, columns: &[&str]) -> Self {
        Section { columns: columns.iter().map(|c| c.to_string()).collect(), ..Section::new(title) }
    }

    pub fn row(&mut self, label: impl Into<String>, cell: Cell) -> &mut Self {
        self.rows.push(Row { label: label.into(), cells: vec![cell] });
        self
    }

    pub fn row_cells(&mut self, label: impl Into<String>, cells: Vec<Cell>) -> &mut Self {
        self.rows.push(Row { label: label.into(), cells });
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Report {
    pub sections: Vec<Section>,
}

impl Report {
    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.render_text(),
            Format::Tsv => self.render_tsv(),
        }
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, section) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "== {} ==", section.title);
            let mut lines: Vec<Vec<String>> = Vec::new();
            if !section.columns.is_empty() {
                lines.push(std::iter::once(String::new()).chain(section.columns.iter().cloned()).collect());
            }
            for row in &section.rows {
                lines.push(std::iter::once(row.label.clone()).chain(row.cells.iter().map(Cell::render)).collect());
            }
            let ncols = lines.iter().map(Vec::len).max().unwrap_or(0);
            let widths: Vec<usize> = (0..ncols)
                .map(|c| {
                    // A line's last field is never padded, so it does not widen the column.
                    lines.iter().filter(|l| c + 1 < l.len()).map(|l| l[c].chars().count()).max().unwrap_or(0)
                })
                .collect();
            for line in &lines {
                let mut text = String::new();
                for (c, field) in line.iter().enumerate() {
                    if c > 0 {
                        text.push_str("  ");
                    }
                    if c + 1 == line.len() {
                        text.push_str(field);
                    } else {
                        let _ = write!(text, "{field:<w$}", w = widths[c]);
                    }
                }
                out.push_str(text.trim_end());
                out.push('\n');
            }
        }
        out
    }

    /// `section, label, value, unit[, value, unit ...]`, one row per line.
    fn render_tsv(&self) -> String {
        let mut out = String::new();
        for section in &self.sections {
            for row in &section.rows {
                let mut fields = vec![section.title.clone(), row.label.clone()];
                for cell in &row.cells {
                    fields.push(cell.value.clone());
                    fields.push(cell.unit.clone());
                }
                out.push_str(&fields.join("\t"));
                out.push('\n');
            }
        }
        out
    }
}
