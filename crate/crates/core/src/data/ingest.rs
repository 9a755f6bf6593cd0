//! CSV/TSV interaction-log ingestion.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One row of the interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub domain_id: u16,
    /// Seconds or ordinal rank; defines a total order per user, ties broken
    /// by input order.
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestFormat {
    Csv,
    Tsv,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestStats {
    pub total_rows: usize,
    pub malformed: usize,
}

const HEADER: [&str; 4] = ["user_id", "item_id", "domain_id", "timestamp"];

/// Parse an interaction log. Malformed rows are skipped and tallied; more
/// than 1% malformed is treated as a format error.
pub fn ingest(path: &Path, format: IngestFormat) -> Result<(Vec<InteractionRecord>, IngestStats)> {
    let delimiter = match format {
        IngestFormat::Csv => b',',
        IngestFormat::Tsv => b'\t',
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(format!(
                "cannot read {}: {e}",
                path.display()
            ))),
            _ => Error::Format(e.to_string()),
        })?;

    // Column positions by header name, so column order does not matter.
    let mut cols = [usize::MAX; 4];
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::Format(e.to_string()))?;
        if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
            // Empty file: zero records, caller reports the warning.
            return Ok((Vec::new(), IngestStats::default()));
        }
        for (want, slot) in HEADER.iter().zip(cols.iter_mut()) {
            match headers.iter().position(|h| h.trim() == *want) {
                Some(p) => *slot = p,
                None => {
                    return Err(Error::Format(format!(
                        "missing column `{want}` in {}",
                        path.display()
                    )))
                }
            }
        }
    }

    let mut records = Vec::new();
    let mut stats = IngestStats::default();
    for row in reader.records() {
        stats.total_rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                stats.malformed += 1;
                continue;
            }
        };
        let field = |i: usize| row.get(cols[i]).map(str::trim);
        let parsed = (|| {
            let user = field(0)?.to_string();
            let item = field(1)?.to_string();
            let domain: u16 = field(2)?.parse().ok()?;
            let timestamp: i64 = field(3)?.parse().ok()?;
            if user.is_empty() || item.is_empty() {
                return None;
            }
            Some(InteractionRecord {
                user_id: user,
                item_id: item,
                domain_id: domain,
                timestamp,
            })
        })();
        match parsed {
            Some(rec) => records.push(rec),
            None => stats.malformed += 1,
        }
    }

    if stats.total_rows > 0 && stats.malformed * 100 > stats.total_rows {
        return Err(Error::Format(format!(
            "{} of {} rows malformed in {}",
            stats.malformed,
            stats.total_rows,
            path.display()
        )));
    }
    Ok((records, stats))
}

/// Write records with the canonical header. Output is byte-deterministic in
/// record order.
pub fn records_to_csv(records: &[InteractionRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "user_id,item_id,domain_id,timestamp")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.user_id, r.item_id, r.domain_id, r.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn well_formed_rows_parse() {
        let (_d, p) = write_tmp(
            "user_id,item_id,domain_id,timestamp\nu1,i1,0,10\nu1,i2,1,11\nu2,i1,0,5\nu2,i3,2,6\n",
        );
        let (records, stats) = ingest(&p, IngestFormat::Csv).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(stats.malformed, 0);
        assert_eq!(records[0].domain_id, 0);
        assert_eq!(records[3].timestamp, 6);
    }

    #[test]
    fn empty_file_yields_zero_records() {
        let (_d, p) = write_tmp("");
        let (records, stats) = ingest(&p, IngestFormat::Csv).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.total_rows, 0);
    }

    #[test]
    fn malformed_timestamp_is_skipped_and_counted() {
        let mut content = String::from("user_id,item_id,domain_id,timestamp\n");
        // keep malformed fraction under 1%
        for i in 0..200 {
            content.push_str(&format!("u{i},i{i},0,{i}\n"));
        }
        content.push_str("u9,i9,0,not-a-number\n");
        let (_d, p) = write_tmp(&content);
        let (records, stats) = ingest(&p, IngestFormat::Csv).unwrap();
        assert_eq!(records.len(), 200);
        assert_eq!(stats.malformed, 1);
    }

    #[test]
    fn too_many_malformed_rows_is_a_format_error() {
        let (_d, p) = write_tmp("user_id,item_id,domain_id,timestamp\nu1,i1,zero,1\nu2,i2,0,2\n");
        assert!(matches!(
            ingest(&p, IngestFormat::Csv),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            ingest(Path::new("/nonexistent/never.csv"), IngestFormat::Csv),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.tsv");
        std::fs::write(&p, "user_id\titem_id\tdomain_id\ttimestamp\nu1\ti1\t2\t42\n").unwrap();
        let (records, _) = ingest(&p, IngestFormat::Tsv).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].domain_id, 2);
    }
}
