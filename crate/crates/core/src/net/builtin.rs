use alloc::string::String;
use alloc::vec::Vec;

use super::{BlockSpec, NetworkSpec};
use crate::error::{Error, Result};

pub const BUILTIN_NETWORKS: &[&str] = &["mbv2", "mbv2-rd"];

pub fn builtin_network(name: &str) -> Result<NetworkSpec> {
    match name {
        "mbv2" => Ok(mobilenet_v2()),
        "mbv2-rd" => Ok(mobilenet_v2_rd()),
        other => Err(Error::UnknownNetwork(String::from(other))),
    }
}

fn network(name: &str, blocks: Vec<BlockSpec>) -> NetworkSpec {
    NetworkSpec {
        name: String::from(name),
        input_resolution: 224,
        input_channels: 3,
        bytes_per_element: 1,
        blocks,
    }
}

/// Pushes `(expansion, channels, repeats, first stride)` stages, all with
/// kernel `k`.
fn stages(blocks: &mut Vec<BlockSpec>, table: &[(u32, u32, u32, u32, u32)]) {
    for &(e, c, n, s, k) in table {
        for i in 0..n {
            blocks.push(BlockSpec::ir(e, k, if i == 0 { s } else { 1 }, c));
        }
    }
}

/// MobileNetV2 1.0x at 224x224, int8.
pub fn mobilenet_v2() -> NetworkSpec {
    let mut blocks = alloc::vec![BlockSpec::stem(3, 32)];
    stages(
        &mut blocks,
        &[
            (1, 16, 1, 1, 3),
            (6, 24, 2, 2, 3),
            (6, 32, 3, 2, 3),
            (6, 64, 4, 2, 3),
            (6, 96, 3, 1, 3),
            (6, 160, 3, 2, 3),
            (6, 320, 1, 1, 3),
        ],
    );
    blocks.push(BlockSpec::head(1280));
    network("mbv2", blocks)
}

/// MobileNetV2 with its receptive field moved out of the first four blocks
/// (stem through the first 32-channel block, stride 8).
///
/// Channel widths follow MobileNetV2. Choices made here:
/// * patch stage: the 16-channel block uses a 1x1 depthwise kernel and the
///   24-channel stage keeps a single block, giving a 15-pixel receptive
///   field (63-pixel input patches for 7-pixel output tiles);
/// * per-layer stage: one extra 32-channel block, 5x5 kernels in the 64/96
///   stages and 7x7 kernels from the 160 stage on.
pub fn mobilenet_v2_rd() -> NetworkSpec {
    let mut blocks = alloc::vec![BlockSpec::stem(3, 32)];
    stages(
        &mut blocks,
        &[
            (1, 16, 1, 1, 1),
            (6, 24, 1, 2, 3),
            (6, 32, 4, 2, 3),
            (6, 64, 4, 2, 5),
            (6, 96, 3, 1, 5),
            (6, 160, 3, 2, 7),
            (6, 320, 1, 1, 7),
        ],
    );
    blocks.push(BlockSpec::head(1280));
    network("mbv2-rd", blocks)
}

/// Number of leading blocks that [`mobilenet_v2_rd`] runs patch by patch.
pub const MBV2_RD_PATCH_BLOCKS: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BlockKind, LayerKind};

    #[test]
    fn mbv2_first_conv() {
        let chain = builtin_network("mbv2").unwrap().lower().unwrap();
        let stem = &chain.layers[0];
        assert_eq!(stem.kind, LayerKind::Conv2d);
        assert_eq!((stem.kernel, stem.stride), (3, 2));
        assert_eq!((stem.input.channels, stem.output.channels), (3, 32));
    }

    #[test]
    fn rd_kernels_small_early_large_late() {
        let net = builtin_network("mbv2-rd").unwrap();
        assert!(net.blocks[..MBV2_RD_PATCH_BLOCKS].iter().all(|b| b.kernel <= 3));
        assert!(net.blocks[MBV2_RD_PATCH_BLOCKS..]
            .iter()
            .any(|b| b.kind == BlockKind::InvertedResidual && b.kernel == 7));
        net.lower().unwrap();
    }

    #[test]
    fn unknown_name() {
        assert_eq!(
            builtin_network("unknown-net"),
            Err(Error::UnknownNetwork("unknown-net".into()))
        );
    }
}
