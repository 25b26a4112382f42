//! Streams x policies comparison table.

use std::fmt::Write as _;

use super::run::MetricsRecord;
use crate::baselines::PolicyKind;

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    /// `clean` or `<kind>@<severity>`.
    pub stream: String,
    /// Mean mAP over seeds, one entry per column policy.
    pub maps: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub policies: Vec<PolicyKind>,
    pub rows: Vec<ComparisonRow>,
    /// Column means over rows; present only with more than one row.
    pub average: Option<Vec<Option<f64>>>,
    pub csv: String,
    pub text: String,
}

fn stream_label(r: &MetricsRecord) -> String {
    match r.severity {
        Some(s) => format!("{}@{s}", r.corruption),
        None => r.corruption.clone(),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn gain(map: Option<f64>, reference: Option<f64>) -> Option<f64> {
    match (map, reference) {
        (Some(m), Some(r)) if r > 0.0 => Some(m / r - 1.0),
        _ => None,
    }
}

/// Rows keep the order in which streams first appear in `records`; columns
/// follow the canonical policy order. When `source_only` is a column, every
/// policy also gets a relative-gain column (`map / source_only - 1`).
pub fn render_report(records: &[MetricsRecord]) -> Comparison {
    let policies: Vec<PolicyKind> =
        PolicyKind::ALL.into_iter().filter(|p| records.iter().any(|r| r.policy == *p)).collect();
    let mut streams: Vec<String> = Vec::new();
    for r in records {
        let label = stream_label(r);
        if !streams.contains(&label) {
            streams.push(label);
        }
    }
    let rows: Vec<ComparisonRow> = streams
        .into_iter()
        .map(|stream| {
            let maps = policies
                .iter()
                .map(|p| {
                    mean(records.iter().filter(|r| r.policy == *p && stream_label(r) == stream).filter_map(|r| r.map))
                })
                .collect();
            ComparisonRow { stream, maps }
        })
        .collect();
    let average = (rows.len() > 1)
        .then(|| (0..policies.len()).map(|c| mean(rows.iter().filter_map(|r| r.maps[c]))).collect::<Vec<_>>());

    let source = policies.iter().position(|p| *p == PolicyKind::SourceOnly);
    let gain_cols: Vec<usize> = match source {
        Some(_) => (0..policies.len()).collect(),
        None => Vec::new(),
    };

    let mut header = vec!["stream".to_string()];
    header.extend(policies.iter().map(|p| p.to_string()));
    header.extend(gain_cols.iter().map(|&c| format!("gain_{}", policies[c])));
    let line = |maps: &[Option<f64>]| -> Vec<Option<f64>> {
        let mut cells: Vec<Option<f64>> = maps.to_vec();
        cells.extend(gain_cols.iter().map(|&c| gain(maps[c], source.and_then(|s| maps[s]))));
        cells
    };
    let mut table: Vec<(String, Vec<Option<f64>>)> = rows.iter().map(|r| (r.stream.clone(), line(&r.maps))).collect();
    if let Some(avg) = &average {
        table.push(("average".to_string(), line(avg)));
    }

    let mut csv = header.join(",");
    csv.push('\n');
    for (label, cells) in &table {
        csv.push_str(label);
        for c in cells {
            write!(csv, ",{}", c.map(|v| format!("{v:.6}")).unwrap_or_default()).unwrap();
        }
        csv.push('\n');
    }

    let width = header.iter().map(String::len).max().unwrap_or(8).max(8);
    let first = table.iter().map(|(l, _)| l.len()).chain([6]).max().unwrap();
    let mut text = format!("{:<first$}", header[0]);
    for h in &header[1..] {
        write!(text, "  {h:>width$}").unwrap();
    }
    text.push('\n');
    for (i, (label, cells)) in table.iter().enumerate() {
        if average.is_some() && i + 1 == table.len() {
            text.push_str(&"-".repeat(first + (width + 2) * cells.len()));
            text.push('\n');
        }
        write!(text, "{label:<first$}").unwrap();
        for (c, v) in cells.iter().enumerate() {
            let cell = match v {
                None => "-".to_string(),
                Some(v) if c >= policies.len() => format!("{:+.1}%", v * 100.0),
                Some(v) => format!("{:.2}", v * 100.0),
            };
            write!(text, "  {cell:>width$}").unwrap();
        }
        text.push('\n');
    }
    Comparison { policies, rows, average, csv, text }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(policy: PolicyKind, corruption: &str, seed: u64, map: f64) -> MetricsRecord {
        MetricsRecord {
            policy,
            corruption: corruption.into(),
            severity: (corruption != "clean").then_some(3),
            seed,
            per_class_ap: vec![Some(map); 3],
            map: Some(map),
            num_images: 10,
            num_evaluated: 5,
            alpha: None,
            quintiles: Vec::new(),
            frozen_unchanged: true,
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn averages_seeds_and_computes_gains() {
        let records = vec![
            record(PolicyKind::Monotta, "fog", 0, 0.5),
            record(PolicyKind::SourceOnly, "fog", 0, 0.2),
            record(PolicyKind::Monotta, "fog", 1, 0.7),
            record(PolicyKind::SourceOnly, "fog", 1, 0.4),
        ];
        let c = render_report(&records);
        assert_eq!(c.policies, vec![PolicyKind::SourceOnly, PolicyKind::Monotta]);
        assert_eq!(c.rows.len(), 1);
        assert!(c.average.is_none());
        assert!((c.rows[0].maps[0].unwrap() - 0.3).abs() < 1e-12);
        assert!((c.rows[0].maps[1].unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(
            c.csv,
            "stream,source_only,monotta,gain_source_only,gain_monotta\nfog@3,0.300000,0.600000,0.000000,1.000000\n"
        );
        assert!(c.text.contains("+100.0%"));
        assert!(c.text.contains("+0.0%"));
    }

    #[test]
    fn average_row_only_with_several_streams() {
        let records = vec![record(PolicyKind::BnAdapt, "fog", 0, 0.5), record(PolicyKind::BnAdapt, "clean", 0, 0.9)];
        let c = render_report(&records);
        assert_eq!(c.rows.iter().map(|r| r.stream.as_str()).collect::<Vec<_>>(), vec!["fog@3", "clean"]);
        assert!((c.average.unwrap()[0].unwrap() - 0.7).abs() < 1e-12);
        assert!(c.csv.ends_with("average,0.700000\n"));
    }
}
