//! Dataset files: UTF-8 JSONL, one function per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use multivul_core::corpus::FunctionRecord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    code: String,
    label: i64,
    comment: Option<String>,
    cwe: Option<Vec<String>>,
    project: Option<String>,
}

/// Parses one line; `line` is 1-based and used for the fallback id.
pub fn parse_record(text: &str, line: usize) -> std::result::Result<FunctionRecord, String> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if !(0..=1).contains(&raw.label) {
        return Err(format!("label {} is not 0 or 1", raw.label));
    }
    let record = FunctionRecord {
        id: raw.id.unwrap_or_else(|| format!("line-{line}")),
        code: raw.code,
        comment: raw.comment,
        label: raw.label as u8,
        cwe: raw.cwe,
        project: raw.project,
    };
    record.validate().map_err(|e| e.to_string())?;
    Ok(record)
}

/// Records in file order. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<FunctionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line, i + 1).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_jsonl(path: &Path, records: &[FunctionRecord]) -> Result<()> {
    write_jsonl(path, records)
}
