//! Error-versus-compression tradeoff tables.

use std::io::Write;

use serde::{Deserialize, Serialize};

pub const COLUMNS: [&str; 7] = [
    "combo",
    "budgets",
    "loss",
    "test_error",
    "rho_s",
    "rho_add",
    "rho_mult",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub combo: String,
    pub budgets: String,
    pub loss: f64,
    pub test_error: f64,
    pub rho_s: f64,
    pub rho_add: f64,
    pub rho_mult: f64,
}

/// Writes one row per run, sorted by storage ratio, largest first. The
/// header is written even when there are no rows.
pub fn write_tradeoff_table<W: Write>(mut rows: Vec<TradeoffRow>, out: W) -> csv::Result<()> {
    rows.sort_by(|a, b| b.rho_s.total_cmp(&a.rho_s));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(COLUMNS)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rho_s: f64) -> TradeoffRow {
        TradeoffRow {
            combo: "P".into(),
            budgets: format!("rho={rho_s}"),
            loss: 0.5,
            test_error: 0.1,
            rho_s,
            rho_add: 1.0,
            rho_mult: 1.0,
        }
    }

    fn render(rows: Vec<TradeoffRow>) -> String {
        let mut buf = Vec::new();
        write_tradeoff_table(rows, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(
            render(Vec::new()),
            "combo,budgets,loss,test_error,rho_s,rho_add,rho_mult\n"
        );
    }

    #[test]
    fn rows_sorted_by_storage_ratio() {
        let text = render(vec![row(2.0), row(9.5), row(4.0)]);
        let ratios: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(4).unwrap())
            .collect();
        assert_eq!(ratios, ["9.5", "4.0", "2.0"]);
    }
}
