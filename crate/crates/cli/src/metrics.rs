//! File-backed metrics: a fixed-schema per-epoch CSV and a line-delimited
//! JSON event log. Summaries always re-read the CSV instead of trusting
//! in-memory state, so the written schema is exercised on every run.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "epoch,wall_s,train_loss,valid_acc,inst_per_s,mean_staleness";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub wall_s: f64,
    pub train_loss: f64,
    pub valid_acc: f64,
    pub inst_per_s: f64,
    pub mean_staleness: f64,
}

pub struct MetricsCsv {
    w: BufWriter<File>,
}

impl MetricsCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let file =
            File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{CSV_HEADER}")?;
        Ok(MetricsCsv { w })
    }

    pub fn write(&mut self, row: &EpochRow) -> Result<()> {
        writeln!(
            self.w,
            "{},{},{},{},{},{}",
            row.epoch, row.wall_s, row.train_loss, row.valid_acc, row.inst_per_s, row.mean_staleness
        )?;
        self.w.flush()?;
        Ok(())
    }
}

/// Reads a metrics CSV back, validating the schema.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRow>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == CSV_HEADER => {}
        Some(Ok(h)) => bail!("{}: unexpected header `{h}`", path.display()),
        _ => bail!("{}: empty metrics file", path.display()),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            bail!("{} line {}: expected 6 fields, got {}", path.display(), i + 2, fields.len());
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse::<f64>()
                .with_context(|| format!("{} line {} field {}", path.display(), i + 2, j + 1))
        };
        rows.push(EpochRow {
            epoch: fields[0]
                .parse()
                .with_context(|| format!("{} line {} field 1", path.display(), i + 2))?,
            wall_s: num(1)?,
            train_loss: num(2)?,
            valid_acc: num(3)?,
            inst_per_s: num(4)?,
            mean_staleness: num(5)?,
        });
    }
    Ok(rows)
}

pub struct EventLog {
    w: BufWriter<File>,
}

impl EventLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file =
            File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(EventLog {
            w: BufWriter::new(file),
        })
    }

    pub fn emit(&mut self, event: &str, data: serde_json::Value) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("event".into(), event.into());
        if let serde_json::Value::Object(m) = data {
            obj.extend(m);
        } else if !data.is_null() {
            obj.insert("data".into(), data);
        }
        serde_json::to_writer(&mut self.w, &serde_json::Value::Object(obj))?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }
}

/// Middle element of the sorted values; mean of the two middles when even.
pub fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            EpochRow {
                epoch: 1,
                wall_s: 0.5,
                train_loss: 2.25,
                valid_acc: 0.125,
                inst_per_s: 1000.0,
                mean_staleness: 0.75,
            },
            EpochRow {
                epoch: 2,
                wall_s: 0.25,
                train_loss: 1.5,
                valid_acc: 0.5,
                inst_per_s: 2000.0,
                mean_staleness: 0.0,
            },
        ];
        let mut csv = MetricsCsv::create(&path).unwrap();
        for r in &rows {
            csv.write(r).unwrap();
        }
        drop(csv);

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        std::fs::write(&path, "epoch,loss\n1,2\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }

    #[test]
    fn event_log_lines_parse_individually() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut log = EventLog::create(&path).unwrap();
        log.emit("run_start", serde_json::json!({"seed": 7})).unwrap();
        log.emit("epoch", serde_json::json!({"epoch": 1, "acc": 0.5})).unwrap();
        drop(log);

        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("event").is_some());
        }
    }

    #[test]
    fn median_of_even_and_odd_counts() {
        assert_eq!(median(&mut vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut vec![]), None);
    }
}
