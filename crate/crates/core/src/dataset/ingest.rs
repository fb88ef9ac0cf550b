use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// One implicit-feedback event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(DataError::Parameter(format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    /// 1-based line numbers of malformed rows.
    pub malformed_lines: Vec<usize>,
}

/// Read an interaction log. Malformed rows are skipped and counted; more
/// than half of the rows malformed is a format error.
pub fn ingest(path: &Path, format: Format) -> Result<IngestReport, DataError> {
    let file = File::open(path).map_err(|e| DataError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    let report = match format {
        Format::Csv => parse_csv(file, path)?,
        Format::Jsonl => parse_jsonl(BufReader::new(file), path)?,
    };
    let total = report.interactions.len() + report.malformed;
    if total > 0 && report.malformed * 2 > total {
        return Err(DataError::Format {
            path: path.display().to_string(),
            line: report.malformed_lines.first().copied(),
            message: format!("{} of {total} rows malformed", report.malformed),
        });
    }
    Ok(report)
}

pub fn parse_csv<R: Read>(reader: R, path: &Path) -> Result<IngestReport, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut report = IngestReport::default();
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => {
            return Err(DataError::Format { path: path.display().to_string(), line: Some(1), message: e.to_string() })
        }
    };
    if headers.is_empty() {
        return Ok(report);
    }
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::Format {
            path: path.display().to_string(),
            line: Some(1),
            message: format!("header lacks `{name}` column"),
        })
    };
    let (cu, ci, ct) = (col("user")?, col("item")?, col("timestamp")?);
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let parsed = rec.ok().and_then(|r| {
            let user = r.get(cu)?.to_string();
            let item = r.get(ci)?.to_string();
            let timestamp = r.get(ct)?.parse::<u64>().ok()?;
            (!user.is_empty() && !item.is_empty() && r.len() == headers.len())
                .then_some(Interaction { user, item, timestamp })
        });
        match parsed {
            Some(x) => report.interactions.push(x),
            None => {
                report.malformed += 1;
                report.malformed_lines.push(line);
            }
        }
    }
    Ok(report)
}

#[derive(Deserialize)]
struct JsonRow {
    user: serde_json::Value,
    item: serde_json::Value,
    timestamp: u64,
}

fn id_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) if !s.is_empty() => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub fn parse_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<IngestReport, DataError> {
    let mut report = IngestReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<JsonRow>(&line).ok().and_then(|r| {
            Some(Interaction { user: id_string(&r.user)?, item: id_string(&r.item)?, timestamp: r.timestamp })
        });
        match parsed {
            Some(x) => report.interactions.push(x),
            None => {
                report.malformed += 1;
                report.malformed_lines.push(line_no);
            }
        }
    }
    Ok(report)
}

/// Serialize interactions as CSV with the standard header.
pub fn write_csv<W: std::io::Write>(writer: W, rows: &[Interaction]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| DataError::Io { path: "<csv writer>".into(), reason: e.to_string() };
    w.write_record(["user", "item", "timestamp"]).map_err(io)?;
    for r in rows {
        w.write_record([r.user.as_str(), r.item.as_str(), &r.timestamp.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io { path: "<csv writer>".into(), reason: e.to_string() })?;
    Ok(())
}
