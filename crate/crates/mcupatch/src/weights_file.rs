//! Weight files: a flat little-endian blob plus a JSON manifest next to it
//! (`weights.bin` and `weights.bin.json`).
//!
//! Per layer the blob holds the kernel (element type) followed by the bias
//! (accumulator type: `f32` for float weights, `i32` for int8 weights).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mcupatch_core::exec::{Element, LayerWeights, WeightSet};
use mcupatch_core::{LayerChain, LayerKind};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub element: String,
    pub layers: Vec<ManifestLayer>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub layer: usize,
    pub kind: String,
    /// Byte offset of the kernel.
    pub offset: u64,
    /// `[out, k, k, in]` dense, `[channels, k, k]` depthwise, empty otherwise.
    pub dims: Vec<u32>,
    pub bias_offset: u64,
    pub bias_len: u64,
    pub shift: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum WeightFileError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("weight file: {0}")]
    Layout(String),
    #[error(transparent)]
    Shape(#[from] mcupatch_core::Error),
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn dims(chain: &LayerChain, i: usize) -> Vec<u32> {
    let l = &chain.layers[i];
    match l.kind {
        LayerKind::Conv2d | LayerKind::Pointwise => vec![l.output.channels, l.kernel, l.kernel, l.input.channels],
        LayerKind::DepthwiseConv2d => vec![l.output.channels, l.kernel, l.kernel],
        LayerKind::ResidualAdd | LayerKind::GlobalAvgPool => Vec::new(),
    }
}

/// Serializes `weights` into a blob and its manifest.
pub fn encode<E: Element>(chain: &LayerChain, weights: &WeightSet<E>) -> (Vec<u8>, Manifest) {
    let mut blob = Vec::new();
    let mut layers = Vec::new();
    for (i, w) in weights.layers.iter().enumerate() {
        let offset = blob.len() as u64;
        for x in &w.kernel {
            E::to_le_bytes(*x, &mut blob);
        }
        let bias_offset = blob.len() as u64;
        for b in &w.bias {
            E::acc_to_le_bytes(*b, &mut blob);
        }
        layers.push(ManifestLayer {
            layer: i,
            kind: chain.layers[i].kind.name().to_string(),
            offset,
            dims: dims(chain, i),
            bias_offset,
            bias_len: w.bias.len() as u64,
            shift: w.shift,
        });
    }
    (
        blob,
        Manifest {
            element: E::NAME.to_string(),
            layers,
        },
    )
}

pub fn decode<E: Element>(chain: &LayerChain, blob: &[u8], manifest: &Manifest) -> Result<WeightSet<E>, WeightFileError> {
    if manifest.element != E::NAME {
        return Err(WeightFileError::Layout(format!(
            "element type is {}, expected {}",
            manifest.element,
            E::NAME
        )));
    }
    if manifest.layers.len() != chain.len() {
        return Err(WeightFileError::Layout(format!(
            "manifest lists {} layers, network has {}",
            manifest.layers.len(),
            chain.len()
        )));
    }
    let slice = |start: u64, len: u64, what: &str, layer: usize| {
        let end = start.checked_add(len).filter(|e| *e <= blob.len() as u64);
        end.map(|e| &blob[start as usize..e as usize]).ok_or_else(|| {
            WeightFileError::Layout(format!("layer {layer}: {what} runs past the end of the blob"))
        })
    };
    let mut layers = Vec::with_capacity(chain.len());
    for (i, m) in manifest.layers.iter().enumerate() {
        if m.layer != i || m.dims != dims(chain, i) {
            return Err(WeightFileError::Layout(format!(
                "layer {i}: manifest entry {} with dims {:?} does not match {:?}",
                m.layer,
                m.dims,
                dims(chain, i)
            )));
        }
        let count: u64 = if m.dims.is_empty() { 0 } else { m.dims.iter().map(|d| *d as u64).product() };
        let kernel = slice(m.offset, count * E::SIZE as u64, "kernel", i)?
            .chunks_exact(E::SIZE)
            .map(E::from_le_bytes)
            .collect();
        let bias = slice(m.bias_offset, m.bias_len * E::ACC_SIZE as u64, "bias", i)?
            .chunks_exact(E::ACC_SIZE)
            .map(E::acc_from_le_bytes)
            .collect();
        layers.push(LayerWeights {
            kernel,
            bias,
            shift: m.shift,
        });
    }
    let set = WeightSet { layers };
    set.validate(chain)?;
    Ok(set)
}

pub fn save_weights<E: Element>(path: &Path, chain: &LayerChain, weights: &WeightSet<E>) -> Result<(), WeightFileError> {
    let (blob, manifest) = encode(chain, weights);
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| WeightFileError::Io { path: p, source }
    };
    fs::write(path, blob).map_err(io_err(path))?;
    let mpath = manifest_path(path);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&mpath, text).map_err(io_err(&mpath))
}

pub fn load_weights<E: Element>(path: &Path, chain: &LayerChain) -> Result<WeightSet<E>, WeightFileError> {
    let blob = fs::read(path).map_err(|source| WeightFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|source| WeightFileError::Io {
        path: mpath.clone(),
        source,
    })?;
    let manifest = serde_json::from_str(&text).map_err(|source| WeightFileError::Manifest { path: mpath, source })?;
    decode(chain, &blob, &manifest)
}
