//! Fitness tables: a JSON object mapping gene strings to scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mcupatch_core::search::TableProxy;

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
}

pub fn parse_table(text: &str) -> serde_json::Result<TableProxy> {
    let table: BTreeMap<String, f64> = serde_json::from_str(text)?;
    Ok(TableProxy { table })
}

pub fn load_table(path: &Path) -> Result<TableProxy, TableError> {
    let text = fs::read_to_string(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_table(&text).map_err(|source| TableError::Json {
        path: path.to_path_buf(),
        source,
    })
}
