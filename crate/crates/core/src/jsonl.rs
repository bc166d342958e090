//! Line-delimited JSON files with a versioned header line.
//!
//! Every file starts with `{"schema": "<kind>", "schema_version": N}`; each
//! following non-blank line is one record. Records reject unknown fields.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: missing header line")]
    MissingHeader { path: PathBuf },
    #[error("{path}: expected schema `{expected}`, found `{found}`")]
    WrongSchema {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: schema_version {found} is newer than supported version {SCHEMA_VERSION}")]
    UnsupportedVersion { path: PathBuf, found: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub schema: String,
    pub schema_version: u32,
}

impl Header {
    pub fn new(schema: &str) -> Self {
        Self {
            schema: schema.to_owned(),
            schema_version: SCHEMA_VERSION,
        }
    }
}

/// Parses `text` (the contents of `path`) as a file of `schema` records.
pub fn parse_str<T: DeserializeOwned>(
    path: &Path,
    schema: &str,
    text: &str,
) -> Result<Vec<T>, JsonlError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((idx, first)) = lines.next() else {
        return Err(JsonlError::MissingHeader {
            path: path.to_owned(),
        });
    };
    let header: Header = serde_json::from_str(first).map_err(|e| JsonlError::Parse {
        path: path.to_owned(),
        line: idx + 1,
        message: format!("invalid header: {e}"),
    })?;
    if header.schema != schema {
        return Err(JsonlError::WrongSchema {
            path: path.to_owned(),
            expected: schema.to_owned(),
            found: header.schema,
        });
    }
    if header.schema_version > SCHEMA_VERSION {
        return Err(JsonlError::UnsupportedVersion {
            path: path.to_owned(),
            found: header.schema_version,
        });
    }
    lines
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| JsonlError::Parse {
                path: path.to_owned(),
                line: idx + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>, JsonlError> {
    let file = fs::File::open(path).map_err(|source| JsonlError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| JsonlError::Io {
            path: path.to_owned(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    parse_str(path, schema, &text)
}

/// Serializes records with a header; deterministic for identical input.
pub fn to_string<T: Serialize>(schema: &str, records: &[T]) -> String {
    let mut out = serde_json::to_string(&Header::new(schema)).expect("header serializes");
    out.push('\n');
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<(), JsonlError> {
    let io = |source| JsonlError::Io {
        path: path.to_owned(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(to_string(schema, records).as_bytes())
        .map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        a: u32,
    }

    #[test]
    fn header_and_records() {
        let text = to_string("rows", &[Row { a: 1 }, Row { a: 2 }]);
        let rows: Vec<Row> = parse_str(Path::new("x"), "rows", &text).unwrap();
        assert_eq!(rows, vec![Row { a: 1 }, Row { a: 2 }]);
    }

    #[test]
    fn rejects_unknown_fields_with_line() {
        let text = "{\"schema\":\"rows\",\"schema_version\":1}\n{\"a\":1}\n{\"a\":2,\"b\":3}\n";
        let err = parse_str::<Row>(Path::new("x"), "rows", text).unwrap_err();
        assert!(matches!(err, JsonlError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_future_version_and_wrong_schema() {
        let text = "{\"schema\":\"rows\",\"schema_version\":9}\n";
        assert!(matches!(
            parse_str::<Row>(Path::new("x"), "rows", text),
            Err(JsonlError::UnsupportedVersion { found: 9, .. })
        ));
        let text = "{\"schema\":\"other\",\"schema_version\":1}\n";
        assert!(matches!(
            parse_str::<Row>(Path::new("x"), "rows", text),
            Err(JsonlError::WrongSchema { .. })
        ));
        assert!(matches!(
            parse_str::<Row>(Path::new("x"), "rows", ""),
            Err(JsonlError::MissingHeader { .. })
        ));
    }
}
