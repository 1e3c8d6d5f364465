//! Presentation of the group-time effect table.
//!
//! Renders estimates with standard errors as a cohort-by-period grid: one
//! row per cohort, one column per calendar period, `estimate (se)` in each
//! populated cell, with significant cells (|estimate| > 1.96 se) marked.
//! Emitted both as CSV and as an aligned plain-text grid.

use std::collections::BTreeSet;

use crate::estimator::AttVector;
use crate::panel::Period;

/// Critical value of the two-sided 5% normal test.
const Z_05: f64 = 1.959963984540054;

fn cell_text(estimate: f64, se: Option<f64>) -> String {
    match se {
        Some(se) => {
            let star = if estimate.abs() > Z_05 * se { "*" } else { "" };
            format!("{estimate:.3}{star} ({se:.3})")
        }
        None => format!("{estimate:.3}"),
    }
}

fn grid(att: &AttVector, se: Option<&[f64]>) -> (Vec<Period>, Vec<Period>, Vec<Vec<String>>) {
    let gs: BTreeSet<Period> = att.index.pairs().iter().map(|&(g, _)| g).collect();
    let ts: BTreeSet<Period> = att.index.pairs().iter().map(|&(_, t)| t).collect();
    let gs: Vec<Period> = gs.into_iter().collect();
    let ts: Vec<Period> = ts.into_iter().collect();
    let cells = gs
        .iter()
        .map(|&g| {
            ts.iter()
                .map(|&t| match att.index.position(g, t) {
                    Some(k) => cell_text(att.values[k], se.map(|s| s[k])),
                    None => String::new(),
                })
                .collect()
        })
        .collect();
    (gs, ts, cells)
}

/// Writes the effect grid as CSV: one row per cohort, one column per period.
/// Cells read `estimate (se)` with `*` marking significance at the 5% level.
pub fn write_table_csv<W: std::io::Write>(
    att: &AttVector,
    se: Option<&[f64]>,
    writer: W,
) -> Result<(), std::io::Error> {
    let (gs, ts, cells) = grid(att, se);
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["cohort".to_string()];
    header.extend(ts.iter().map(|t| format!("t={t}")));
    wtr.write_record(&header)?;
    for (gi, &g) in gs.iter().enumerate() {
        let mut row = vec![format!("g={g}")];
        row.extend(cells[gi].iter().cloned());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Renders the effect grid as an aligned plain-text table.
pub fn render_table_text(att: &AttVector, se: Option<&[f64]>) -> String {
    let (gs, ts, cells) = grid(att, se);
    let mut columns: Vec<Vec<String>> = vec![gs.iter().map(|g| format!("g={g}")).collect()];
    for (ti, _) in ts.iter().enumerate() {
        columns.push(cells.iter().map(|row| row[ti].clone()).collect());
    }
    let mut headers = vec!["cohort".to_string()];
    headers.extend(ts.iter().map(|t| format!("t={t}")));
    let widths: Vec<usize> = columns
        .iter()
        .zip(headers.iter())
        .map(|(col, h)| col.iter().map(|c| c.len()).max().unwrap_or(0).max(h.len()))
        .collect();
    let mut out = String::new();
    let fmt_row = |fields: Vec<String>| -> String {
        fields
            .iter()
            .zip(widths.iter())
            .map(|(f, w)| format!("{f:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&fmt_row(headers));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for (gi, &g) in gs.iter().enumerate() {
        let mut fields = vec![format!("g={g}")];
        fields.extend(cells[gi].iter().cloned());
        out.push_str(&fmt_row(fields));
        out.push('\n');
    }
    out.push_str("* |estimate| > 1.96 se\n");
    out
}
