use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the metrics file.
pub const METRICS_HEADER: [&str; 15] = [
    "step",
    "phase",
    "lambda",
    "t_q",
    "c_r",
    "loss",
    "distill_d",
    "potential_P",
    "val_acc",
    "mean_w_est",
    "mean_w_act",
    "max_w_act",
    "mean_a_est",
    "mean_a_act",
    "max_a_act",
];

/// One batch row (loss columns set) or one audit row (audit columns set).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: String,
    pub lambda: f64,
    pub t_q: f64,
    pub c_r: f64,
    pub loss: Option<f64>,
    pub distill_d: Option<f64>,
    #[serde(rename = "potential_P")]
    pub potential_p: Option<f64>,
    pub val_acc: Option<f64>,
    pub mean_w_est: Option<f64>,
    pub mean_w_act: Option<f64>,
    pub max_w_act: Option<u32>,
    pub mean_a_est: Option<f64>,
    pub mean_a_act: Option<f64>,
    pub max_a_act: Option<u32>,
}

impl MetricsRow {
    pub fn is_audit(&self) -> bool {
        self.val_acc.is_some()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            detail: format!("{}: {other:?}", path.display()),
        },
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)
            .map_err(|e| csv_err(Path::new("<metrics>"), e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(Path::new("<metrics>"), e))?;
    }
    w.into_inner()
        .map_err(|e| Error::Format {
            offset: 0,
            detail: e.to_string(),
        })
}

/// Writes (or appends to) a metrics CSV; the header is written once.
pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>, append: bool) -> Result<()> {
    let path = path.as_ref();
    let exists = append && path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    if rows.is_empty() && !exists {
        w.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{}: unexpected header {:?}", path.display(), header),
        });
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            phase: "constant".into(),
            lambda: 0.01,
            t_q: 0.01 * step as f64,
            c_r: 1.0,
            loss: Some(0.5),
            distill_d: Some(0.25),
            potential_p: Some(3.0),
            val_acc: None,
            mean_w_est: None,
            mean_w_act: None,
            max_w_act: None,
            mean_a_est: None,
            mean_a_act: None,
            max_a_act: None,
        }
    }

    #[test]
    fn header_and_empty_audit_fields() {
        let text = String::from_utf8(metrics_to_csv(&[batch_row(3)]).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "3,constant,0.01,0.03,1.0,0.5,0.25,3.0,,,,,,,");
    }

    #[test]
    fn file_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&[batch_row(0)], &p, false).unwrap();
        let mut audit = batch_row(1);
        audit.loss = None;
        audit.distill_d = None;
        audit.potential_p = None;
        audit.val_acc = Some(0.9);
        audit.max_w_act = Some(4);
        write_metrics_csv(&[audit.clone()], &p, true).unwrap();
        let rows = read_metrics_csv(&p).unwrap();
        assert_eq!(rows, vec![batch_row(0), audit]);
        assert!(rows[1].is_audit());
    }
}
