//! Fold-by-method CCC tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

/// One finished (method, fold) result.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportCell {
    pub method: String,
    pub fold: usize,
    pub valence: f64,
    pub arousal: f64,
}

/// Rows are (emotion, method); columns are the folds seen plus a mean over
/// the folds each row actually has.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub folds: Vec<usize>,
    pub rows: Vec<(String, String, Vec<Option<f64>>)>,
}

pub const MISSING: &str = "-";

impl ResultTable {
    pub fn new(cells: &[ReportCell]) -> Self {
        let folds: Vec<usize> = cells
            .iter()
            .map(|c| c.fold)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let methods: BTreeSet<&str> = cells.iter().map(|c| c.method.as_str()).collect();
        let mut by_key: BTreeMap<(&str, usize), &ReportCell> = BTreeMap::new();
        for c in cells {
            by_key.insert((c.method.as_str(), c.fold), c);
        }
        let mut rows = Vec::new();
        for emotion in ["valence", "arousal"] {
            for &m in &methods {
                let vals = folds
                    .iter()
                    .map(|&f| {
                        by_key
                            .get(&(m, f))
                            .map(|c| if emotion == "valence" { c.valence } else { c.arousal })
                    })
                    .collect();
                rows.push((emotion.to_string(), m.to_string(), vals));
            }
        }
        ResultTable { folds, rows }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["emotion".to_string(), "method".to_string()];
        h.extend(self.folds.iter().map(|f| format!("fold{f}")));
        h.push("mean".into());
        h
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let fmt = |v: Option<f64>| v.map_or(MISSING.to_string(), |x| format!("{x:.3}"));
        self.rows
            .iter()
            .map(|(e, m, vals)| {
                let present: Vec<f64> = vals.iter().flatten().copied().collect();
                let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
                let mut row = vec![e.clone(), m.clone()];
                row.extend(vals.iter().map(|&v| fmt(v)));
                row.push(fmt(mean));
                row
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record(self.header());
        for r in self.cells() {
            let _ = w.write_record(r);
        }
        String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
    }

    /// Space-aligned columns for terminals.
    pub fn to_text(&self) -> String {
        let mut all = vec![self.header()];
        all.extend(self.cells());
        let widths: Vec<usize> = (0..all[0].len())
            .map(|c| all.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for r in &all {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, w))| if i < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        s
    }
}
