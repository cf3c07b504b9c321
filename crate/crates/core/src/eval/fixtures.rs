//! Embedded reference score tables.
//!
//! [`reported_scores`] parses the tables shipped in `reported_scores.txt`:
//! per-model result rows (a composite score plus the ASR/ACC numbers it was
//! computed from), layer- and head-level sweep grids, and cross-model
//! transfer grids. Unit tests here pin the composite-score arithmetic
//! against these numbers; integration suites read the same data through
//! this module.

use std::sync::OnceLock;

use crate::error::Result;
use crate::eval::{composite_score, SuiteScores};

/// One published result row: the composite score and its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportedRow {
    pub method: String,
    pub cs: f64,
    /// ASR per safety suite, in the file's suite order.
    pub asr: Vec<f64>,
    /// ACC per helpfulness suite, in the file's suite order.
    pub acc: Vec<f64>,
}

impl ReportedRow {
    /// The row's numbers keyed by suite name, ready for
    /// [`composite_score`].
    pub fn suite_scores(&self, safety: &[String], helpfulness: &[String]) -> SuiteScores {
        SuiteScores {
            asr: safety.iter().cloned().zip(self.asr.iter().copied()).collect(),
            acc: helpfulness
                .iter()
                .cloned()
                .zip(self.acc.iter().copied())
                .collect(),
            counts: Default::default(),
        }
    }
}

/// All rows reported for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub model: String,
    pub rows: Vec<ReportedRow>,
}

impl ScoreTable {
    pub fn row(&self, method: &str) -> Option<&ReportedRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn vanilla(&self) -> &ReportedRow {
        self.row("Vanilla").expect("every table has a Vanilla row")
    }
}

/// A layer x strength grid of composite scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportedGrid {
    /// Grid family, e.g. `layer-level` or `transfer-head`.
    pub name: String,
    pub model: String,
    pub strengths: Vec<f64>,
    /// `(layer, composite per strength)` in file order.
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl ReportedGrid {
    /// The grid's composite at exact coordinates.
    pub fn cs(&self, layer: usize, alpha: f64) -> Option<f64> {
        let col = self.strengths.iter().position(|&a| a == alpha)?;
        let (_, row) = self.rows.iter().find(|(l, _)| *l == layer)?;
        Some(row[col])
    }

    /// Argmax cell as `(layer, alpha, cs)`; ties keep the earlier row and
    /// column, matching the sweep argmax convention.
    pub fn best(&self) -> (usize, f64, f64) {
        let mut best: Option<(usize, f64, f64)> = None;
        for (layer, row) in &self.rows {
            for (col, &cs) in row.iter().enumerate() {
                if best.is_none_or(|(_, _, b)| cs > b) {
                    best = Some((*layer, self.strengths[col], cs));
                }
            }
        }
        best.expect("grids are non-empty")
    }
}

/// The full parsed fixture file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportedScores {
    pub lambda: f64,
    pub safety_suites: Vec<String>,
    pub helpfulness_suites: Vec<String>,
    pub tables: Vec<ScoreTable>,
    pub grids: Vec<ReportedGrid>,
}

impl ReportedScores {
    pub fn table(&self, model: &str) -> Option<&ScoreTable> {
        self.tables.iter().find(|t| t.model == model)
    }

    pub fn grid(&self, name: &str, model: &str) -> Option<&ReportedGrid> {
        self.grids
            .iter()
            .find(|g| g.name == name && g.model == model)
    }

    /// Recomputes a row's composite from its own six numbers against the
    /// table's vanilla row.
    pub fn recompute_row_cs(&self, table: &ScoreTable, row: &ReportedRow) -> Result<f64> {
        let vanilla = table
            .vanilla()
            .suite_scores(&self.safety_suites, &self.helpfulness_suites);
        let revised = row.suite_scores(&self.safety_suites, &self.helpfulness_suites);
        composite_score(&vanilla, &revised, self.lambda)
    }
}

/// The embedded reference tables, parsed once.
pub fn reported_scores() -> &'static ReportedScores {
    static SCORES: OnceLock<ReportedScores> = OnceLock::new();
    SCORES.get_or_init(|| {
        parse(include_str!("reported_scores.txt")).expect("embedded score table parses")
    })
}

enum Section {
    None,
    Scores(ScoreTable),
    Grid(ReportedGrid),
}

fn parse(text: &str) -> std::result::Result<ReportedScores, String> {
    let mut out = ReportedScores {
        lambda: f64::NAN,
        safety_suites: Vec::new(),
        helpfulness_suites: Vec::new(),
        tables: Vec::new(),
        grids: Vec::new(),
    };
    let mut section = Section::None;
    let close = |section: &mut Section, out: &mut ReportedScores| match std::mem::replace(
        section,
        Section::None,
    ) {
        Section::None => {}
        Section::Scores(t) => out.tables.push(t),
        Section::Grid(g) => out.grids.push(g),
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let fail = |msg: String| format!("line {}: {msg}", idx + 1);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            close(&mut section, &mut out);
            let (kind, rest) = header
                .split_once(' ')
                .ok_or_else(|| fail("section header needs a name".into()))?;
            section = match kind {
                "scores" => Section::Scores(ScoreTable {
                    model: rest.to_string(),
                    rows: Vec::new(),
                }),
                "grid" => {
                    let (name, model) = rest
                        .split_once(' ')
                        .ok_or_else(|| fail("grid header needs a family and model".into()))?;
                    Section::Grid(ReportedGrid {
                        name: name.to_string(),
                        model: model.to_string(),
                        strengths: Vec::new(),
                        rows: Vec::new(),
                    })
                }
                other => return Err(fail(format!("unknown section kind {other}"))),
            };
            continue;
        }
        match &mut section {
            Section::None => {
                let (key, rest) = line
                    .split_once(' ')
                    .ok_or_else(|| fail("preamble line needs a value".into()))?;
                match key {
                    "lambda" => {
                        out.lambda = rest
                            .trim()
                            .parse()
                            .map_err(|e| fail(format!("bad lambda: {e}")))?
                    }
                    "safety-suites" => {
                        out.safety_suites =
                            rest.split_whitespace().map(str::to_string).collect()
                    }
                    "helpfulness-suites" => {
                        out.helpfulness_suites =
                            rest.split_whitespace().map(str::to_string).collect()
                    }
                    other => return Err(fail(format!("unknown preamble key {other}"))),
                }
            }
            Section::Scores(table) => {
                let fields: Vec<&str> = line.split('|').map(str::trim).collect();
                if fields.len() != 4 {
                    return Err(fail(format!(
                        "score row needs 4 |-separated fields, got {}",
                        fields.len()
                    )));
                }
                let cs = fields[1]
                    .parse()
                    .map_err(|e| fail(format!("bad composite: {e}")))?;
                let asr = parse_floats(fields[2]).map_err(&fail)?;
                let acc = parse_floats(fields[3]).map_err(&fail)?;
                if asr.len() != out.safety_suites.len() || acc.len() != out.helpfulness_suites.len()
                {
                    return Err(fail("row width does not match the suite lists".into()));
                }
                table.rows.push(ReportedRow {
                    method: fields[0].to_string(),
                    cs,
                    asr,
                    acc,
                });
            }
            Section::Grid(grid) => {
                if let Some(rest) = line.strip_prefix("alpha ") {
                    grid.strengths = parse_floats(rest).map_err(&fail)?;
                    continue;
                }
                let (layer, rest) = line
                    .split_once('|')
                    .ok_or_else(|| fail("grid row needs `layer | scores`".into()))?;
                let layer = layer
                    .trim()
                    .parse()
                    .map_err(|e| fail(format!("bad layer: {e}")))?;
                let row = parse_floats(rest).map_err(&fail)?;
                if row.len() != grid.strengths.len() {
                    return Err(fail("grid row width does not match the alpha list".into()));
                }
                grid.rows.push((layer, row));
            }
        }
    }
    close(&mut section, &mut out);
    if !out.lambda.is_finite() || out.safety_suites.is_empty() || out.tables.is_empty() {
        return Err("fixture file is missing its preamble or tables".into());
    }
    Ok(out)
}

fn parse_floats(field: &str) -> std::result::Result<Vec<f64>, String> {
    field
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| format!("bad number `{s}`")))
        .collect()
}
