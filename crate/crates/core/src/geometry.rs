//! Receptive-field calculus and patch/halo geometry.
//!
//! The stage output (tensor at the end of the first `n` blocks) is split into
//! `p x p` non-overlapping tiles. Walking the layers backwards maps every tile
//! to the region of each intermediate tensor it depends on; those regions
//! overlap between neighbouring tiles (the halo), which is where patch-based
//! execution spends extra MACs.
//!
//! Because inputs, kernels and tilings are square, a patch region is always
//! the product of one row span and one column span taken from the same
//! per-axis list, so the geometry is stored per axis.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::net::{Layer, LayerChain, LayerKind};

/// Half-open interval `[start, end)` of pixel coordinates. May extend past
/// tensor bounds when describing unclipped regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: i64,
    pub end: i64,
}

impl Span {
    pub fn new(start: i64, end: i64) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> u64 {
        (self.end - self.start).max(0) as u64
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, x: i64) -> bool {
        self.start <= x && x < self.end
    }

    pub fn contains_span(&self, other: Span) -> bool {
        other.is_empty() || (self.start <= other.start && other.end <= self.end)
    }

    /// Smallest span covering both.
    pub fn hull(&self, other: Span) -> Span {
        Span::new(self.start.min(other.start), self.end.max(other.end))
    }

    pub fn clip(&self, size: u32) -> Span {
        Span::new(self.start.max(0), self.end.min(size as i64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub rows: Span,
    pub cols: Span,
}

impl Rect {
    pub fn new(rows: Span, cols: Span) -> Self {
        Rect { rows, cols }
    }

    pub fn area(&self) -> u64 {
        self.rows.len() * self.cols.len()
    }
}

/// Receptive field side length and cumulative stride ("jump").
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub size: u64,
    pub jump: u64,
}

/// Forward recurrence `rf += (k - 1) * jump; jump *= s` over `layers`.
pub fn receptive_field(layers: &[Layer]) -> ReceptiveField {
    layers.iter().fold(ReceptiveField { size: 1, jump: 1 }, |rf, l| ReceptiveField {
        size: rf.size + (l.kernel as u64 - 1) * rf.jump,
        jump: rf.jump * l.stride as u64,
    })
}

/// Input span read by output span `out` of `layer`, not clipped. A global
/// pool reads its whole input.
pub fn backward_span(layer: &Layer, out: Span) -> Span {
    if out.is_empty() {
        return out;
    }
    if layer.kind == LayerKind::GlobalAvgPool {
        return Span::new(0, layer.input.height as i64);
    }
    let s = layer.stride as i64;
    let pad = layer.padding as i64;
    let k = layer.kernel as i64;
    Span::new(out.start * s - pad, (out.end - 1) * s - pad + k)
}

/// Input rectangle that `out` (on the output of the last layer) depends on,
/// clipped to the input of every layer on the way back.
pub fn backward_region(layers: &[Layer], out: Rect) -> Rect {
    layers.iter().rev().fold(out, |r, l| {
        Rect::new(
            backward_span(l, r.rows).clip(l.input.height),
            backward_span(l, r.cols).clip(l.input.width),
        )
    })
}

/// Splits `size` into `p` contiguous tiles; the first `size % p` tiles get
/// one extra pixel.
pub fn tile_spans(size: u32, p: u32) -> Vec<Span> {
    let base = (size / p) as i64;
    let extra = (size % p) as i64;
    let mut start = 0;
    (0..p as i64)
        .map(|i| {
            let len = base + i64::from(i < extra);
            let span = Span::new(start, start + len);
            start += len;
            span
        })
        .collect()
}

/// How per-patch regions are treated at the image border.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BorderMode {
    /// Every patch computes its full, unclipped region; positions outside the
    /// tensor are padding that is computed and then zeroed. All interior and
    /// border patches therefore cost the same, which is how fixed-size patch
    /// kernels run on device.
    #[default]
    Uniform,
    /// Regions are clipped to tensor bounds at every layer.
    Clipped,
}

/// Tiling of a stage output and the regions every patch touches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub p: u32,
    pub n: usize,
    /// Layers `0..stage_end` run patch by patch.
    pub stage_end: usize,
    pub mode: BorderMode,
    /// Tiles of the stage output along one axis.
    pub tiles: Vec<Span>,
    /// `unclipped[t][k]`: span of tensor `t` needed by tile `k`.
    unclipped: Vec<Vec<Span>>,
    /// Same, clipped to tensor bounds at every step.
    clipped: Vec<Vec<Span>>,
    /// Side length of every tensor in the stage.
    extents: Vec<u32>,
}

fn propagate(chain: &LayerChain, stage_end: usize, tiles: &[Span], clip: bool) -> Vec<Vec<Span>> {
    let mut spans: Vec<Vec<Option<Span>>> = vec![vec![None; tiles.len()]; stage_end + 1];
    for (k, tile) in tiles.iter().enumerate() {
        spans[stage_end][k] = Some(*tile);
    }
    let merge = |slot: &mut Option<Span>, s: Span| {
        *slot = Some(slot.map_or(s, |old| old.hull(s)));
    };
    for i in (0..stage_end).rev() {
        let layer = &chain.layers[i];
        for k in 0..tiles.len() {
            let out = spans[i + 1][k].expect("every stage tensor feeds the stage output");
            let mut need = backward_span(layer, out);
            if clip {
                need = need.clip(layer.input.height);
            }
            merge(&mut spans[i][k], need);
            if layer.kind == LayerKind::ResidualAdd {
                let skip = layer.skip.expect("add has a skip operand");
                merge(&mut spans[skip][k], out);
            }
        }
    }
    spans
        .into_iter()
        .map(|row| row.into_iter().map(|s| s.expect("region computed")).collect())
        .collect()
}

impl PatchGeometry {
    /// Geometry for running the first `n` blocks of `chain` as `p x p`
    /// patches. With `p == 1` the single patch is the whole tensor and the
    /// border mode is forced to [`BorderMode::Clipped`].
    pub fn new(chain: &LayerChain, n: usize, p: u32, mode: BorderMode) -> Result<Self> {
        let stage_end = chain.stage_end(n)?;
        let out = chain.tensor(stage_end);
        if p == 0 {
            return Err(Error::InvalidPlan(format!("p must be at least 1")));
        }
        if p > out.height {
            return Err(Error::InvalidPlan(format!(
                "{p}x{p} patches do not fit a {}x{} stage output",
                out.height, out.width
            )));
        }
        let mode = if p == 1 { BorderMode::Clipped } else { mode };
        let tiles = tile_spans(out.height, p);
        let unclipped = propagate(chain, stage_end, &tiles, false);
        let clipped = propagate(chain, stage_end, &tiles, true);
        let extents = (0..=stage_end).map(|t| chain.tensor(t).height).collect();
        Ok(PatchGeometry {
            p,
            n,
            stage_end,
            mode,
            tiles,
            unclipped,
            clipped,
            extents,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.tiles.len() * self.tiles.len()
    }

    /// Span of tensor `t` used by tile `k`, under the geometry's border mode.
    pub fn span(&self, t: usize, k: usize) -> Span {
        match self.mode {
            BorderMode::Uniform => self.unclipped[t][k],
            BorderMode::Clipped => self.clipped[t][k],
        }
    }

    pub fn clipped_span(&self, t: usize, k: usize) -> Span {
        self.clipped[t][k]
    }

    pub fn unclipped_span(&self, t: usize, k: usize) -> Span {
        self.unclipped[t][k]
    }

    /// Region of tensor `t` for patch `(row, col)` under the border mode.
    pub fn region(&self, t: usize, row: usize, col: usize) -> Rect {
        Rect::new(self.span(t, row), self.span(t, col))
    }

    /// Side of tensor `t`.
    pub fn extent(&self, t: usize) -> u32 {
        self.extents[t]
    }

    /// Clipped input-image rectangles, patches in row-major order.
    pub fn input_regions(&self) -> Vec<Rect> {
        let k = self.tiles.len();
        (0..k * k)
            .map(|i| Rect::new(self.clipped[0][i / k], self.clipped[0][i % k]))
            .collect()
    }

    /// Largest unclipped input-patch side (an interior patch when tiles are even).
    pub fn input_patch_side(&self) -> u64 {
        self.unclipped[0].iter().map(Span::len).max().unwrap_or(0)
    }

    /// Input side covered by the largest tile from striding alone, without halo.
    pub fn stride_tile_side(&self, chain: &LayerChain) -> u64 {
        let jump = receptive_field(&chain.layers[..self.stage_end]).jump;
        self.tiles.iter().map(Span::len).max().unwrap_or(0) * jump
    }

    /// Input pixels read by more than one patch, counted with multiplicity
    /// (sum of clipped patch areas minus the area they cover).
    pub fn halo_overhead_pixels(&self) -> u64 {
        let spans = &self.clipped[0];
        let sum: u64 = spans.iter().map(Span::len).sum();
        let mut sorted = spans.clone();
        sorted.sort_by_key(|s| s.start);
        let mut covered = 0;
        let mut reach = i64::MIN;
        for s in sorted {
            let from = s.start.max(reach);
            if s.end > from {
                covered += (s.end - from) as u64;
            }
            reach = reach.max(s.end);
        }
        sum * sum - covered * covered
    }

    /// Sum over tiles of the span lengths of tensor `t` under the border mode.
    pub(crate) fn axis_total(&self, t: usize) -> u64 {
        (0..self.tiles.len()).map(|k| self.span(t, k).len()).sum()
    }
}

/// MAC totals for layer-wise and patch-wise execution of one plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub stage_layer: u64,
    pub stage_patch: u64,
    pub total_layer: u64,
    pub total_patch: u64,
}

impl MacReport {
    pub fn overhead_stage(&self) -> f64 {
        ratio_minus_one(self.stage_patch, self.stage_layer)
    }

    pub fn overhead_overall(&self) -> f64 {
        ratio_minus_one(self.total_patch, self.total_layer)
    }
}

fn ratio_minus_one(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64 - 1.0
    }
}

/// Total MACs of layer-by-layer execution.
pub fn layer_macs(chain: &LayerChain) -> u64 {
    chain.total_macs()
}

/// MACs spent by the patch stage, summed over all `p * p` patches.
pub fn patch_macs(chain: &LayerChain, geometry: &PatchGeometry) -> u64 {
    (0..geometry.stage_end)
        .map(|i| {
            let side = geometry.axis_total(i + 1);
            chain.layers[i].macs_per_pixel() * side * side
        })
        .sum()
}

pub fn mac_report(chain: &LayerChain, geometry: &PatchGeometry) -> MacReport {
    let stage_layer: u64 = chain.layers[..geometry.stage_end].iter().map(Layer::macs).sum();
    let stage_patch = patch_macs(chain, geometry);
    let total_layer = layer_macs(chain);
    MacReport {
        stage_layer,
        stage_patch,
        total_layer,
        total_patch: total_layer - stage_layer + stage_patch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{mobilenet_v2, mobilenet_v2_rd, Activation, ChainBuilder, TensorShape, MBV2_RD_PATCH_BLOCKS};

    fn chain(ops: &[(u32, u32)], side: u32) -> LayerChain {
        let mut b = ChainBuilder::new(TensorShape::square(side, 2, 1).unwrap());
        for &(k, s) in ops {
            b.conv(k, s, 2, Activation::Linear).unwrap();
        }
        b.finish()
    }

    #[test]
    fn rf_recurrence() {
        assert_eq!(
            receptive_field(&chain(&[(3, 1)], 8).layers),
            ReceptiveField { size: 3, jump: 1 }
        );
        assert_eq!(
            receptive_field(&chain(&[(3, 1), (3, 2)], 8).layers),
            ReceptiveField { size: 5, jump: 2 }
        );
    }

    #[test]
    fn mbv2_five_blocks() {
        let c = mobilenet_v2().lower().unwrap();
        let end = c.stage_end(5).unwrap();
        let rf = receptive_field(&c.layers[..end]);
        assert_eq!(rf, ReceptiveField { size: 27, jump: 8 });
        // A 7-pixel output tile (28 / 4) reads 6 * 8 + 27 = 75 input pixels.
        let tile = Rect::new(Span::new(7, 14), Span::new(7, 14));
        let r = backward_region(&c.layers[..end], tile);
        assert_eq!((r.rows.len(), r.cols.len()), (75, 75));
    }

    #[test]
    fn identity_and_same_conv() {
        let id = chain(&[(1, 1), (1, 1)], 10);
        let rect = Rect::new(Span::new(2, 5), Span::new(3, 4));
        assert_eq!(backward_region(&id.layers, rect), rect);
        let c = chain(&[(3, 1)], 10);
        let r = backward_region(&c.layers, Rect::new(Span::new(4, 5), Span::new(4, 5)));
        assert_eq!(r, Rect::new(Span::new(3, 6), Span::new(3, 6)));
        let r = backward_region(&c.layers, Rect::new(Span::new(0, 1), Span::new(9, 10)));
        assert_eq!(r, Rect::new(Span::new(0, 2), Span::new(8, 10)));
    }

    #[test]
    fn tiles_partition() {
        let t = tile_spans(14, 4);
        let lens: Vec<_> = t.iter().map(Span::len).collect();
        assert_eq!(lens, [4, 4, 3, 3]);
        assert_eq!(t.last().unwrap().end, 14);
        assert_eq!(tile_spans(28, 4).iter().map(Span::len).collect::<Vec<_>>(), [7; 4]);
    }

    #[test]
    fn mbv2_patch_sizes() {
        let c = mobilenet_v2().lower().unwrap();
        let g = PatchGeometry::new(&c, 5, 4, BorderMode::Uniform).unwrap();
        assert_eq!(g.input_patch_side(), 75);
        assert_eq!(g.stride_tile_side(&c), 56);
        // Border patches are clipped, interior ones keep the full halo.
        let regions = g.input_regions();
        assert_eq!(regions.len(), 16);
        assert_eq!(regions[5].rows.len(), 75);
        assert_eq!(regions[0].rows, Span::new(0, 62));
        let rd = mobilenet_v2_rd().lower().unwrap();
        let g = PatchGeometry::new(&rd, MBV2_RD_PATCH_BLOCKS, 4, BorderMode::Uniform).unwrap();
        assert_eq!(g.input_patch_side(), 63);
    }

    #[test]
    fn one_pixel_macs() {
        let mut b = ChainBuilder::new(TensorShape::square(1, 1, 1).unwrap());
        b.pointwise(1, Activation::Linear).unwrap();
        assert_eq!(layer_macs(&b.finish()), 1);
    }

    #[test]
    fn p1_has_no_overhead() {
        let c = mobilenet_v2().lower().unwrap();
        for n in 1..10 {
            let g = PatchGeometry::new(&c, n, 1, BorderMode::Uniform).unwrap();
            let m = mac_report(&c, &g);
            assert_eq!(m.stage_patch, m.stage_layer);
            assert_eq!(g.halo_overhead_pixels(), 0);
        }
    }

    #[test]
    fn invalid_patch_counts() {
        let c = chain(&[(3, 2)], 6);
        assert!(matches!(PatchGeometry::new(&c, 1, 4, BorderMode::Uniform), Err(Error::InvalidPlan(_))));
        assert!(matches!(PatchGeometry::new(&c, 1, 0, BorderMode::Uniform), Err(Error::InvalidPlan(_))));
        assert!(matches!(PatchGeometry::new(&c, 2, 1, BorderMode::Uniform), Err(Error::InvalidStage { .. })));
    }

    #[test]
    fn halo_pixels_simple() {
        // 8 px, k3 s1, 2 tiles: spans [0,5) and [3,8) overlap by 2 columns.
        let c = chain(&[(3, 1)], 8);
        let g = PatchGeometry::new(&c, 1, 2, BorderMode::Clipped).unwrap();
        assert_eq!(g.halo_overhead_pixels(), 10 * 10 - 8 * 8);
    }
}
