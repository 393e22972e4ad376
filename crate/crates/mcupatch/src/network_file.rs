//! Network description files.
//!
//! ```json
//! {"name": "mbv2", "input_resolution": 224, "input_channels": 3, "bytes_per_element": 1,
//!  "blocks": [{"kind": "stem", "expansion": 1, "kernel": 3, "stride": 2, "out_channels": 32}]}
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mcupatch_core::net::BUILTIN_NETWORKS;
use mcupatch_core::{builtin_network, BlockKind, BlockSpec, NetworkSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub name: String,
    pub input_resolution: u32,
    pub input_channels: u32,
    pub bytes_per_element: u32,
    pub blocks: Vec<BlockFile>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockFile {
    pub kind: String,
    pub expansion: u32,
    pub kernel: u32,
    pub stride: u32,
    pub out_channels: u32,
}

impl From<&NetworkSpec> for NetworkFile {
    fn from(net: &NetworkSpec) -> Self {
        NetworkFile {
            name: net.name.clone(),
            input_resolution: net.input_resolution,
            input_channels: net.input_channels,
            bytes_per_element: net.bytes_per_element,
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockFile {
                    kind: b.kind.name().to_string(),
                    expansion: b.expansion,
                    kernel: b.kernel,
                    stride: b.stride,
                    out_channels: b.out_channels,
                })
                .collect(),
        }
    }
}

impl NetworkFile {
    pub fn into_spec(self) -> Result<NetworkSpec, ParseError> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.into_iter().enumerate() {
            let kind = BlockKind::from_name(&b.kind).ok_or_else(|| ParseError::Field {
                field: format!("blocks[{i}].kind"),
                message: format!("unknown block kind `{}` (expected stem, ir or head)", b.kind),
            })?;
            blocks.push(BlockSpec {
                kind,
                expansion: b.expansion,
                kernel: b.kernel,
                stride: b.stride,
                out_channels: b.out_channels,
            });
        }
        let net = NetworkSpec {
            name: self.name,
            input_resolution: self.input_resolution,
            input_channels: self.input_channels,
            bytes_per_element: self.bytes_per_element,
            blocks,
        };
        net.lower().map_err(|e| match e {
            mcupatch_core::Error::InvalidField { field, reason } => ParseError::Field { field, message: reason },
            other => ParseError::Invalid(other),
        })?;
        Ok(net)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error(transparent)]
    Invalid(mcupatch_core::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: ParseError },
    #[error("`{0}` is neither a bundled network ({list}) nor a readable file", list = BUILTIN_NETWORKS.join(", "))]
    NotFound(String),
}

pub fn parse_network(text: &str) -> Result<NetworkSpec, ParseError> {
    let file: NetworkFile = serde_json::from_str(text).map_err(|e| ParseError::Syntax {
        line: e.line(),
        column: e.column(),
        message: strip_position(&e.to_string()),
    })?;
    file.into_spec()
}

/// serde_json appends " at line L column C"; the position is reported separately.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Canonical form: pretty-printed with a trailing newline.
pub fn network_to_json(net: &NetworkSpec) -> String {
    let mut s = serde_json::to_string_pretty(&NetworkFile::from(net)).expect("network serializes");
    s.push('\n');
    s
}

pub fn load_network(path: &Path) -> Result<NetworkSpec, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_network(&text).map_err(|source| LoadError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_network(path: &Path, net: &NetworkSpec) -> io::Result<()> {
    fs::write(path, network_to_json(net))
}

/// A bundled network name, or a path to a network file.
pub fn resolve_network(source: &str) -> Result<NetworkSpec, LoadError> {
    if let Ok(net) = builtin_network(source) {
        return Ok(net);
    }
    let path = Path::new(source);
    if path.exists() {
        load_network(path)
    } else {
        Err(LoadError::NotFound(source.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_names_field() {
        let text = r#"{"name":"x","input_resolution":32,"input_channels":3,"bytes_per_element":1,
            "blocks":[{"kind":"pool","expansion":1,"kernel":3,"stride":2,"out_channels":8}]}"#;
        let err = parse_network(text).unwrap_err().to_string();
        assert!(err.starts_with("blocks[0].kind"), "{err}");
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_network("{\n  \"name\": \"x\",\n  oops\n}").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { line: 3, .. }), "{err}");
    }

    #[test]
    fn missing_field() {
        let text = r#"{"name":"x","input_resolution":32,"input_channels":3,"bytes_per_element":1,
            "blocks":[{"kind":"stem","expansion":1,"stride":2,"out_channels":8}]}"#;
        let err = parse_network(text).unwrap_err().to_string();
        assert!(err.contains("missing field `kernel`"), "{err}");
    }
}
