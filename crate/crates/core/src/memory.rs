//! Analytic activation-memory profiling.
//!
//! A layer needs its input and output activations resident at once. Weights
//! are streamed from flash and never charged. Accounting rules:
//!
//! * A residual source tensor stays resident from its producer until the add
//!   that consumes it. Layers in between are charged for it unless it is
//!   already their input (shared buffers are counted once).
//! * The conv feeding a residual add accumulates into the held source buffer,
//!   so it is charged `input + source` and the add costs only that buffer.
//! * A depthwise conv whose input dies with it runs in place and is charged
//!   `max(input, output)`.
//!
//! The same rules are used per patch by [`crate::schedule`] and are followed
//! literally by the executor's memory trace in [`crate::exec`].

use alloc::vec::Vec;

use crate::net::{LayerChain, LayerKind};

/// Memory charged while one layer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMemory {
    pub layer: usize,
    pub block: usize,
    pub kind: LayerKind,
    pub input_bytes: u64,
    pub output_bytes: u64,
    /// Residual bytes held alongside the input and output.
    pub residual_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryProfile {
    pub layers: Vec<LayerMemory>,
    pub block_peaks: Vec<u64>,
    pub peak_bytes: u64,
    pub peak_layer: usize,
}

impl MemoryProfile {
    pub fn peak_block(&self) -> usize {
        self.layers[self.peak_layer].block
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockMemory {
    pub block: usize,
    pub peak_bytes: u64,
    /// Block peak divided by the global peak.
    pub ratio: f64,
}

/// Tensor whose buffer holds tensor `t`. Outputs of fused residual adds live
/// in the buffer of their skip operand.
pub(crate) fn buffer_owner(chain: &LayerChain, mut t: usize) -> usize {
    while t > 0 {
        let add = t - 1;
        let layer = &chain.layers[add];
        match layer.skip {
            Some(skip) if layer.kind == LayerKind::ResidualAdd && add > 0 && chain.fused_add(add - 1) == Some(skip) => {
                t = skip
            }
            _ => break,
        }
    }
    t
}

/// Whether layer `i` runs in place over its input buffer.
pub(crate) fn in_place(chain: &LayerChain, i: usize) -> bool {
    chain.layers[i].kind == LayerKind::DepthwiseConv2d && chain.last_use(i) == Some(i)
}

/// Charges layer `i` given the byte size of every tensor buffer.
///
/// With `writes_output == false` the layer writes into a buffer accounted
/// for by the caller (the full stage output in patch mode), so its output is
/// not charged here.
pub(crate) fn charge_layer(
    chain: &LayerChain,
    i: usize,
    bytes: &dyn Fn(usize) -> u64,
    writes_output: bool,
) -> LayerMemory {
    let layer = &chain.layers[i];
    let input = bytes(buffer_owner(chain, i));
    let output = bytes(buffer_owner(chain, i + 1));
    let fused_skip = chain.fused_add(i);
    let own_skip = if layer.kind == LayerKind::ResidualAdd {
        layer.skip
    } else {
        None
    };

    // Residual sources held across this layer, other than its own operands.
    let mut held = 0;
    for (a, add) in chain.layers.iter().enumerate() {
        let Some(t) = add.skip else { continue };
        if t < i && i < a && Some(t) != fused_skip {
            held += bytes(buffer_owner(chain, t));
        }
    }

    let (residual, own) = match (fused_skip, own_skip) {
        (Some(t), _) => {
            let skip = bytes(buffer_owner(chain, t));
            (skip, input + skip)
        }
        (None, Some(t)) if i > 0 && chain.fused_add(i - 1) == Some(t) => {
            // The add already happened inside the previous layer.
            (0, input)
        }
        (None, Some(t)) => {
            let skip = bytes(buffer_owner(chain, t));
            let out = if writes_output { output } else { 0 };
            (skip, input + skip + out)
        }
        (None, None) => {
            let out = if writes_output { output } else { 0 };
            if in_place(chain, i) && writes_output {
                (0, input.max(output))
            } else {
                (0, input + out)
            }
        }
    };

    LayerMemory {
        layer: i,
        block: layer.block,
        kind: layer.kind,
        input_bytes: input,
        output_bytes: output,
        residual_bytes: residual + held,
        total_bytes: own + held,
    }
}

/// Profiles whole-tensor (layer-by-layer) execution.
pub fn analytic_memory(chain: &LayerChain) -> MemoryProfile {
    let bytes = |t: usize| chain.tensor(t).byte_size();
    let layers: Vec<_> = (0..chain.len())
        .map(|i| charge_layer(chain, i, &bytes, true))
        .collect();
    let block_peaks = chain
        .blocks
        .iter()
        .map(|r| layers[r.clone()].iter().map(|l| l.total_bytes).max().unwrap_or(0))
        .collect();
    let (peak_layer, peak_bytes) = layers
        .iter()
        .enumerate()
        .fold((0, 0), |best, (i, l)| if l.total_bytes > best.1 { (i, l.total_bytes) } else { best });
    MemoryProfile {
        layers,
        block_peaks,
        peak_bytes,
        peak_layer,
    }
}

/// Peak memory of every block relative to the global peak.
pub fn block_memory_report(chain: &LayerChain) -> Vec<BlockMemory> {
    let profile = analytic_memory(chain);
    profile
        .block_peaks
        .iter()
        .enumerate()
        .map(|(block, &peak_bytes)| BlockMemory {
            block,
            peak_bytes,
            ratio: peak_bytes as f64 / profile.peak_bytes as f64,
        })
        .collect()
}

/// Per-layer peak over layers `range` only.
pub(crate) fn range_peak(profile: &MemoryProfile, range: core::ops::Range<usize>) -> u64 {
    profile.layers[range].iter().map(|l| l.total_bytes).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{mobilenet_v2, Activation, BlockSpec, ChainBuilder, NetworkSpec, TensorShape};

    #[test]
    fn first_conv_memory() {
        let chain = mobilenet_v2().lower().unwrap();
        let stem = analytic_memory(&chain).layers[0];
        assert_eq!(stem.total_bytes, 3 * 224 * 224 + 32 * 112 * 112);
        assert_eq!(stem.total_bytes, 551_936);
    }

    #[test]
    fn tiny_pointwise() {
        let mut b = ChainBuilder::new(TensorShape::square(1, 8, 1).unwrap());
        b.pointwise(8, Activation::Linear).unwrap();
        let p = analytic_memory(&b.finish());
        assert_eq!(p.peak_bytes, 16);
    }

    #[test]
    fn mbv2_peak_is_first_expand_of_third_block() {
        let chain = mobilenet_v2().lower().unwrap();
        let p = analytic_memory(&chain);
        assert_eq!(p.peak_bytes, 16 * 112 * 112 + 96 * 112 * 112);
        assert_eq!(p.peak_block(), 2);
        assert_eq!(p.peak_bytes / 1024, 1372);
    }

    #[test]
    fn residual_rules() {
        // 16-channel residual block at 8x8: expand, dw, project(+add), add.
        let net = NetworkSpec {
            name: "r".into(),
            input_resolution: 16,
            input_channels: 3,
            bytes_per_element: 1,
            blocks: vec![BlockSpec::stem(3, 16), BlockSpec::ir(6, 3, 1, 16)],
        };
        let p = analytic_memory(&net.lower().unwrap());
        let x = 8 * 8 * 16u64;
        let m = 8 * 8 * 96u64;
        let totals: Vec<_> = p.layers.iter().map(|l| l.total_bytes).collect();
        // expand: input is the residual source, counted once
        // dw: in place, plus held source
        // project: input + source buffer it accumulates into
        // add: just the accumulated buffer
        assert_eq!(&totals[1..], &[x + m, m + x, m + x, x]);
    }

    #[test]
    fn block_report_single_block() {
        let mut b = ChainBuilder::new(TensorShape::square(4, 4, 1).unwrap());
        b.conv(3, 1, 4, Activation::Relu6).unwrap();
        let rows = block_memory_report(&b.finish());
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].ratio, 1.0);
    }

    #[test]
    fn mbv2_first_blocks_dominate() {
        let chain = mobilenet_v2().lower().unwrap();
        let rows = block_memory_report(&chain);
        let peak_block = rows.iter().max_by_key(|r| r.peak_bytes).unwrap().block;
        assert!(peak_block < 5);
        let rest = rows[5..].iter().map(|r| r.peak_bytes).max().unwrap();
        let top = rows[peak_block].peak_bytes;
        assert!(top as f64 >= 7.0 * rest as f64, "{top} vs {rest}");
    }
}
