//! Versioned JSON-lines artifact files.
//!
//! Line 1 is a header object `{"schema", "version", "config_hash", "count"}`;
//! every following line is one record.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORDS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordsHeader {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
    pub count: usize,
}

pub fn encode_jsonl<T: Serialize>(schema: &str, config_hash: &str, items: &[T]) -> Result<Vec<u8>> {
    let header = RecordsHeader {
        schema: schema.to_string(),
        version: RECORDS_VERSION,
        config_hash: config_hash.to_string(),
        count: items.len(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, config_hash: &str, items: &[T]) -> Result<()> {
    let bytes = encode_jsonl(schema, config_hash, items)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a records file, checking schema name, version and, when given, the
/// config hash.
pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    schema: &str,
    expected_hash: Option<&str>,
) -> Result<(RecordsHeader, Vec<T>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty records file", path.display())))??;
    let header: RecordsHeader = serde_json::from_str(&first)?;
    if header.schema != schema {
        return Err(Error::Format(format!(
            "{}: schema {:?}, expected {schema:?}",
            path.display(),
            header.schema
        )));
    }
    if header.version != RECORDS_VERSION {
        return Err(Error::SchemaVersion {
            what: path.display().to_string(),
            found: header.version,
            expected: RECORDS_VERSION,
        });
    }
    if let Some(h) = expected_hash {
        if header.config_hash != h {
            return Err(Error::Provenance {
                path: path.to_path_buf(),
                found: header.config_hash.clone(),
                expected: h.to_string(),
            });
        }
    }
    let mut items = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if !line.is_empty() {
            items.push(serde_json::from_str(&line)?);
        }
    }
    if items.len() != header.count {
        return Err(Error::Format(format!(
            "{}: header declares {} records, found {}",
            path.display(),
            header.count,
            items.len()
        )));
    }
    Ok((header, items))
}

/// Structured JSON document with the same provenance fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
    pub body: T,
}

pub fn write_document<T: Serialize>(path: &Path, schema: &str, config_hash: &str, body: &T) -> Result<()> {
    let doc = Document {
        schema: schema.to_string(),
        version: RECORDS_VERSION,
        config_hash: config_hash.to_string(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_document<T: DeserializeOwned>(path: &Path, schema: &str, expected_hash: Option<&str>) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let doc: Document<T> = serde_json::from_slice(&fs::read(path)?)?;
    if doc.schema != schema {
        return Err(Error::Format(format!("{}: schema {:?}, expected {schema:?}", path.display(), doc.schema)));
    }
    if doc.version != RECORDS_VERSION {
        return Err(Error::SchemaVersion {
            what: path.display().to_string(),
            found: doc.version,
            expected: RECORDS_VERSION,
        });
    }
    if let Some(h) = expected_hash {
        if doc.config_hash != h {
            return Err(Error::Provenance {
                path: path.to_path_buf(),
                found: doc.config_hash,
                expected: h.to_string(),
            });
        }
    }
    Ok(doc.body)
}

/// CSV text with a leading `# config_hash=...` comment line.
pub fn with_provenance(config_hash: &str, csv: &str) -> String {
    format!("# config_hash={config_hash}\n{csv}")
}
