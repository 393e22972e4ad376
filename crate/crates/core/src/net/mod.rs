//! Network descriptions and their lowering to primitive layers.
//!
//! A [`NetworkSpec`] is a block-level description (stem, inverted-residual
//! blocks, head). [`NetworkSpec::lower`] turns it into a [`LayerChain`]: a
//! flat sequence of primitive layers with every tensor shape resolved.
//!
//! Tensors in a chain are numbered: tensor `0` is the chain input and tensor
//! `i + 1` is the output of layer `i`, so layer `i` always consumes tensor `i`.
//! A residual add additionally consumes its `skip` tensor.

mod builtin;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

pub use builtin::{
    builtin_network, mobilenet_v2, mobilenet_v2_rd, BUILTIN_NETWORKS, MBV2_RD_PATCH_BLOCKS,
};

use crate::error::{Error, Result};

/// Activation tensor shape (height x width x channels) plus element width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub bytes_per_element: u32,
}

impl TensorShape {
    pub fn new(height: u32, width: u32, channels: u32, bytes_per_element: u32) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "tensor {height}x{width}x{channels} has an empty dimension"
            )));
        }
        if !matches!(bytes_per_element, 1 | 4) {
            return Err(Error::field(
                "bytes_per_element",
                format!("must be 1 or 4, got {bytes_per_element}"),
            ));
        }
        Ok(TensorShape {
            height,
            width,
            channels,
            bytes_per_element,
        })
    }

    pub fn square(side: u32, channels: u32, bytes_per_element: u32) -> Result<Self> {
        Self::new(side, side, channels, bytes_per_element)
    }

    pub fn pixels(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    pub fn elements(&self) -> u64 {
        self.pixels() * self.channels as u64
    }

    pub fn byte_size(&self) -> u64 {
        self.elements() * self.bytes_per_element as u64
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    Pointwise,
    ResidualAdd,
    GlobalAvgPool,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv",
            LayerKind::DepthwiseConv2d => "dwconv",
            LayerKind::Pointwise => "pwconv",
            LayerKind::ResidualAdd => "add",
            LayerKind::GlobalAvgPool => "pool",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::Pointwise
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu6,
}

/// A primitive layer with resolved shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub kind: LayerKind,
    pub kernel: u32,
    pub stride: u32,
    pub padding: u32,
    pub input: TensorShape,
    pub output: TensorShape,
    pub activation: Activation,
    /// Index of the block this layer was lowered from.
    pub block: usize,
    /// For [`LayerKind::ResidualAdd`], the tensor added to the main input.
    pub skip: Option<usize>,
}

impl Layer {
    /// Multiply-accumulates needed per output pixel.
    pub fn macs_per_pixel(&self) -> u64 {
        let k2 = (self.kernel as u64).pow(2);
        match self.kind {
            LayerKind::Conv2d | LayerKind::Pointwise => {
                k2 * self.input.channels as u64 * self.output.channels as u64
            }
            LayerKind::DepthwiseConv2d => k2 * self.output.channels as u64,
            LayerKind::ResidualAdd | LayerKind::GlobalAvgPool => 0,
        }
    }

    pub fn macs(&self) -> u64 {
        self.macs_per_pixel() * self.output.pixels()
    }

    /// Input channels seen by one output channel.
    pub fn group_in_channels(&self) -> u32 {
        match self.kind {
            LayerKind::DepthwiseConv2d => 1,
            _ => self.input.channels,
        }
    }

    /// Kernel weights (not counting biases).
    pub fn weight_count(&self) -> u64 {
        if !self.kind.is_conv() {
            return 0;
        }
        (self.kernel as u64).pow(2) * self.group_in_channels() as u64 * self.output.channels as u64
    }

    pub fn bias_count(&self) -> u64 {
        if self.kind.is_conv() {
            self.output.channels as u64
        } else {
            0
        }
    }
}

/// A lowered network: primitive layers plus the block each came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerChain {
    pub input: TensorShape,
    pub layers: Vec<Layer>,
    /// `blocks[b]` is the layer range lowered from block `b`.
    pub blocks: Vec<Range<usize>>,
}

impl LayerChain {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output(&self) -> TensorShape {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    /// Shape of tensor `t` (0 = chain input, `i + 1` = output of layer `i`).
    pub fn tensor(&self, t: usize) -> TensorShape {
        if t == 0 {
            self.input
        } else {
            self.layers[t - 1].output
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.layers.len() + 1
    }

    /// Number of layers that are not residual adds.
    pub fn compute_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind != LayerKind::ResidualAdd)
            .count()
    }

    /// Layer index one past the end of the first `n` blocks.
    pub fn stage_end(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.blocks.len() {
            return Err(Error::InvalidStage {
                n,
                blocks: self.blocks.len(),
            });
        }
        Ok(self.blocks[n - 1].end)
    }

    /// The add layer consuming `t` as its skip operand, if any.
    pub fn skip_consumer(&self, t: usize) -> Option<usize> {
        self.layers.iter().position(|l| l.skip == Some(t))
    }

    /// Index of the last layer that reads tensor `t`; `None` for the chain output.
    pub fn last_use(&self, t: usize) -> Option<usize> {
        let direct = (t < self.layers.len()).then_some(t);
        match (direct, self.skip_consumer(t)) {
            (Some(d), Some(a)) => Some(d.max(a)),
            (d, a) => d.or(a),
        }
    }

    /// The skip tensor that conv layer `i` accumulates into, when `i` is
    /// immediately followed by the residual add it feeds. The result of `i`
    /// then overwrites the skip buffer in place and the add itself is free.
    pub fn fused_add(&self, i: usize) -> Option<usize> {
        match self.layers.get(i + 1) {
            Some(next)
                if next.kind == LayerKind::ResidualAdd
                    && self.layers[i].kind.is_conv()
                    && next.skip != Some(i) =>
            {
                next.skip
            }
            _ => None,
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(Layer::macs).sum()
    }

    /// Weight storage (kernels plus biases) at the chain's element width.
    pub fn weight_bytes(&self) -> u64 {
        let bpe = self.input.bytes_per_element as u64;
        self.layers
            .iter()
            .map(|l| (l.weight_count() + l.bias_count()) * bpe)
            .sum()
    }
}

/// Incremental construction of a [`LayerChain`] with shape inference.
///
/// Used by [`NetworkSpec::lower`] and directly by tests that need chains
/// which do not correspond to any block structure.
#[derive(Clone, Debug)]
pub struct ChainBuilder {
    chain: LayerChain,
    block: usize,
    block_start: usize,
}

impl ChainBuilder {
    pub fn new(input: TensorShape) -> Self {
        ChainBuilder {
            chain: LayerChain {
                input,
                layers: Vec::new(),
                blocks: Vec::new(),
            },
            block: 0,
            block_start: 0,
        }
    }

    /// Id of the tensor the next layer will consume.
    pub fn current_tensor(&self) -> usize {
        self.chain.layers.len()
    }

    pub fn current_shape(&self) -> TensorShape {
        self.chain.output()
    }

    fn push_conv(
        &mut self,
        kind: LayerKind,
        kernel: u32,
        stride: u32,
        out_channels: u32,
        activation: Activation,
    ) -> Result<&mut Self> {
        if !matches!(kernel, 1 | 3 | 5 | 7) {
            return Err(Error::Shape(format!("kernel {kernel} not in {{1, 3, 5, 7}}")));
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::Shape(format!("stride {stride} not in {{1, 2}}")));
        }
        let input = self.current_shape();
        let padding = kernel / 2;
        if input.height + 2 * padding < kernel || input.width + 2 * padding < kernel {
            return Err(Error::Shape(format!(
                "input {input} smaller than kernel {kernel}"
            )));
        }
        let output = TensorShape::new(
            input.height.div_ceil(stride),
            input.width.div_ceil(stride),
            out_channels,
            input.bytes_per_element,
        )?;
        self.chain.layers.push(Layer {
            kind,
            kernel,
            stride,
            padding,
            input,
            output,
            activation,
            block: self.block,
            skip: None,
        });
        Ok(self)
    }

    pub fn conv(
        &mut self,
        kernel: u32,
        stride: u32,
        out_channels: u32,
        activation: Activation,
    ) -> Result<&mut Self> {
        self.push_conv(LayerKind::Conv2d, kernel, stride, out_channels, activation)
    }

    pub fn depthwise(&mut self, kernel: u32, stride: u32, activation: Activation) -> Result<&mut Self> {
        let c = self.current_shape().channels;
        self.push_conv(LayerKind::DepthwiseConv2d, kernel, stride, c, activation)
    }

    pub fn pointwise(&mut self, out_channels: u32, activation: Activation) -> Result<&mut Self> {
        self.push_conv(LayerKind::Pointwise, 1, 1, out_channels, activation)
    }

    /// Adds tensor `skip` to the current tensor. Shapes must match.
    pub fn residual_add(&mut self, skip: usize) -> Result<&mut Self> {
        let input = self.current_shape();
        if skip >= self.current_tensor() {
            return Err(Error::Shape(format!("skip tensor {skip} does not exist yet")));
        }
        let other = self.chain.tensor(skip);
        if other != input {
            return Err(Error::Shape(format!(
                "residual operands differ: {input} vs {other}"
            )));
        }
        if self.chain.layers.iter().any(|l| l.skip == Some(skip)) {
            return Err(Error::Shape(format!("tensor {skip} already used as a skip")));
        }
        self.chain.layers.push(Layer {
            kind: LayerKind::ResidualAdd,
            kernel: 1,
            stride: 1,
            padding: 0,
            input,
            output: input,
            activation: Activation::Linear,
            block: self.block,
            skip: Some(skip),
        });
        Ok(self)
    }

    pub fn global_pool(&mut self) -> Result<&mut Self> {
        let input = self.current_shape();
        let output = TensorShape::new(1, 1, input.channels, input.bytes_per_element)?;
        self.chain.layers.push(Layer {
            kind: LayerKind::GlobalAvgPool,
            kernel: 1,
            stride: 1,
            padding: 0,
            input,
            output,
            activation: Activation::Linear,
            block: self.block,
            skip: None,
        });
        Ok(self)
    }

    /// Closes the current block. Empty blocks are not recorded.
    pub fn end_block(&mut self) -> &mut Self {
        let end = self.chain.layers.len();
        if end > self.block_start {
            self.chain.blocks.push(self.block_start..end);
            self.block += 1;
            self.block_start = end;
        }
        self
    }

    pub fn finish(mut self) -> LayerChain {
        self.end_block();
        self.chain
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Stem,
    InvertedResidual,
    Head,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Stem => "stem",
            BlockKind::InvertedResidual => "ir",
            BlockKind::Head => "head",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "stem" => Some(BlockKind::Stem),
            "ir" => Some(BlockKind::InvertedResidual),
            "head" => Some(BlockKind::Head),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub expansion: u32,
    pub kernel: u32,
    pub stride: u32,
    pub out_channels: u32,
}

impl BlockSpec {
    pub fn stem(kernel: u32, out_channels: u32) -> Self {
        BlockSpec {
            kind: BlockKind::Stem,
            expansion: 1,
            kernel,
            stride: 2,
            out_channels,
        }
    }

    pub fn ir(expansion: u32, kernel: u32, stride: u32, out_channels: u32) -> Self {
        BlockSpec {
            kind: BlockKind::InvertedResidual,
            expansion,
            kernel,
            stride,
            out_channels,
        }
    }

    pub fn head(out_channels: u32) -> Self {
        BlockSpec {
            kind: BlockKind::Head,
            expansion: 1,
            kernel: 1,
            stride: 1,
            out_channels,
        }
    }

    /// Whether the block carries an identity shortcut given its input channels.
    pub fn has_residual(&self, in_channels: u32) -> bool {
        self.kind == BlockKind::InvertedResidual && self.stride == 1 && in_channels == self.out_channels
    }
}

/// Block-level architecture with square input resolution.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub name: String,
    pub input_resolution: u32,
    pub input_channels: u32,
    pub bytes_per_element: u32,
    pub blocks: Vec<BlockSpec>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::field("name", "must not be empty"));
        }
        if self.input_resolution == 0 {
            return Err(Error::field("input_resolution", "must be at least 1"));
        }
        if self.input_channels == 0 {
            return Err(Error::field("input_channels", "must be at least 1"));
        }
        if !matches!(self.bytes_per_element, 1 | 4) {
            return Err(Error::field("bytes_per_element", "must be 1 or 4"));
        }
        if self.blocks.is_empty() {
            return Err(Error::field("blocks", "must contain at least one block"));
        }
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter().enumerate() {
            let at = |f: &str| format!("blocks[{i}].{f}");
            if b.kernel % 2 == 0 {
                return Err(Error::field(at("kernel"), "kernel must be odd"));
            }
            if !matches!(b.kernel, 1 | 3 | 5 | 7) {
                return Err(Error::field(at("kernel"), "kernel must be one of 1, 3, 5, 7"));
            }
            if !matches!(b.stride, 1 | 2) {
                return Err(Error::field(at("stride"), "stride must be 1 or 2"));
            }
            if b.out_channels == 0 {
                return Err(Error::field(at("out_channels"), "must be at least 1"));
            }
            match b.kind {
                BlockKind::Stem => {
                    if i != 0 {
                        return Err(Error::field(at("kind"), "stem must be the first block"));
                    }
                    if b.stride != 2 {
                        return Err(Error::field(at("stride"), "stem stride must be 2"));
                    }
                    if b.expansion != 1 {
                        return Err(Error::field(at("expansion"), "stem expansion must be 1"));
                    }
                }
                BlockKind::InvertedResidual => {
                    if !matches!(b.expansion, 1 | 3 | 4 | 6) {
                        return Err(Error::field(at("expansion"), "expansion must be one of 1, 3, 4, 6"));
                    }
                }
                BlockKind::Head => {
                    if i != last {
                        return Err(Error::field(at("kind"), "head must be the last block"));
                    }
                    if b.kernel != 1 || b.stride != 1 || b.expansion != 1 {
                        return Err(Error::field(
                            at("kind"),
                            "head must have kernel 1, stride 1 and expansion 1",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn with_resolution(&self, resolution: u32) -> NetworkSpec {
        NetworkSpec {
            input_resolution: resolution,
            ..self.clone()
        }
    }

    pub fn input_shape(&self) -> Result<TensorShape> {
        TensorShape::square(self.input_resolution, self.input_channels, self.bytes_per_element)
    }

    /// Lowers blocks to primitive layers with "same" padding everywhere.
    pub fn lower(&self) -> Result<LayerChain> {
        self.validate()?;
        let mut b = ChainBuilder::new(self.input_shape()?);
        for block in &self.blocks {
            match block.kind {
                BlockKind::Stem => {
                    b.conv(block.kernel, block.stride, block.out_channels, Activation::Relu6)?;
                }
                BlockKind::InvertedResidual => {
                    let source = b.current_tensor();
                    let in_c = b.current_shape().channels;
                    if block.expansion != 1 {
                        b.pointwise(in_c * block.expansion, Activation::Relu6)?;
                    }
                    b.depthwise(block.kernel, block.stride, Activation::Relu6)?;
                    b.pointwise(block.out_channels, Activation::Linear)?;
                    if block.has_residual(in_c) {
                        b.residual_add(source)?;
                    }
                }
                BlockKind::Head => {
                    b.pointwise(block.out_channels, Activation::Relu6)?;
                    b.global_pool()?;
                }
            }
            b.end_block();
        }
        Ok(b.finish())
    }

    /// Input channels of every block, in order.
    pub fn block_input_channels(&self) -> Vec<u32> {
        let mut c = self.input_channels;
        self.blocks
            .iter()
            .map(|b| {
                let input = c;
                c = b.out_channels;
                input
            })
            .collect()
    }
}

/// Scales a channel count by `width_pct / 100`, rounding to the nearest
/// multiple of 8 (ties up) with a floor of 8.
pub fn scale_channels(channels: u32, width_pct: u32) -> u32 {
    let scaled = channels as u64 * width_pct as u64;
    let rounded = (scaled + 400) / 800 * 8;
    rounded.max(8) as u32
}
