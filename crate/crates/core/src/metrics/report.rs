use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsError, RecallEntry, RecallReport};
use crate::imbalance::WeightScheme;
use crate::pipeline::{GridCell, LossLog, MaskMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRecall {
    pub scheme: WeightScheme,
    pub report: RecallReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeLoss {
    pub scheme: WeightScheme,
    pub loss_log: LossLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Report {
    /// Rows are groups, columns are schemes.
    Recall(Vec<SchemeRecall>),
    /// Rows are mask modes, columns are schemes, cells are min validation MAE.
    FinetuneMae(Vec<GridCell>),
    /// Long format: one row per (epoch, scheme).
    LossCurves(Vec<SchemeLoss>),
}

fn scheme_header(first: &[&str]) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain(WeightScheme::ALL.iter().map(|s| s.as_str().to_owned()))
        .collect()
}

/// Names in order of first appearance.
fn ordered<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn recall_csv(reports: &[SchemeRecall], out: &mut csv::Writer<Vec<u8>>) -> Result<(), MetricsError> {
    out.write_record(scheme_header(&["group", "frequency"]))?;
    let rows: Vec<String> = ordered(
        reports
            .iter()
            .flat_map(|r| r.report.per_group.iter().chain([&r.report.overall]))
            .map(|e| e.name.clone()),
    );
    // overall last, as the summary row
    let rows = rows
        .iter()
        .filter(|n| *n != "overall")
        .chain(rows.iter().filter(|n| *n == "overall"));
    for name in rows {
        let entries = |scheme: Option<WeightScheme>| -> Vec<&RecallEntry> {
            reports
                .iter()
                .filter(|r| scheme.map_or(true, |s| r.scheme == s))
                .flat_map(|r| r.report.per_group.iter().chain([&r.report.overall]))
                .filter(|e| &e.name == name)
                .collect()
        };
        let frequency = entries(None).first().map(|e| e.node_count).unwrap_or(0);
        let mut record = vec![name.clone(), frequency.to_string()];
        for scheme in WeightScheme::ALL {
            // several seeds of one scheme pool their tallies
            let (masked, correct) = entries(Some(scheme))
                .iter()
                .fold((0u64, 0u64), |(m, c), e| (m + e.masked_count, c + e.correct_count));
            record.push(fmt_opt((masked > 0).then(|| correct as f64 / masked as f64)));
        }
        out.write_record(record)?;
    }
    Ok(())
}

fn mae_csv(cells: &[GridCell], out: &mut csv::Writer<Vec<u8>>) -> Result<(), MetricsError> {
    out.write_record(scheme_header(&["mask_mode"]))?;
    let modes: Vec<MaskMode> = ordered(cells.iter().map(|c| c.mask_mode));
    for mode in modes {
        let mut record = vec![mode.label()];
        for scheme in WeightScheme::ALL {
            let values: Vec<f64> = cells
                .iter()
                .filter(|c| c.mask_mode == mode && c.scheme == scheme)
                .filter_map(|c| c.min_validation_mae)
                .collect();
            let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
            record.push(fmt_opt(mean));
        }
        out.write_record(record)?;
    }
    Ok(())
}

fn loss_csv(series: &[SchemeLoss], out: &mut csv::Writer<Vec<u8>>) -> Result<(), MetricsError> {
    out.write_record(["epoch", "scheme", "loss"])?;
    for s in series {
        for entry in s.loss_log.entries() {
            out.write_record([entry.epoch.to_string(), s.scheme.to_string(), entry.train_loss.to_string()])?;
        }
    }
    Ok(())
}

pub fn emit_report(report: &Report, path: impl AsRef<Path>, format: ReportFormat) -> Result<(), MetricsError> {
    let bytes = match format {
        ReportFormat::Json => {
            let mut json = serde_json::to_vec_pretty(report)?;
            json.push(b'\n');
            json
        }
        ReportFormat::Csv => {
            let mut out = csv::Writer::from_writer(Vec::new());
            match report {
                Report::Recall(r) => recall_csv(r, &mut out)?,
                Report::FinetuneMae(c) => mae_csv(c, &mut out)?,
                Report::LossCurves(s) => loss_csv(s, &mut out)?,
            }
            out.into_inner().map_err(|e| MetricsError::Io(e.into_error()))?
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<Report, MetricsError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
