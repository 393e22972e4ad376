//! Reference executor for layer-wise and patch-wise inference.
//!
//! Both modes go through one schedule driver that also keeps the live-buffer
//! ledger, so [`peak_memory_trace`] measures exactly the buffer lifetimes the
//! numeric runs use. The rules it follows are the analytic ones from
//! [`crate::memory`]: buffers are created on first write and freed after
//! their last read, a depthwise conv whose input dies with it resizes that
//! buffer in place, and a conv feeding a residual add accumulates into the
//! held residual buffer.

mod element;
mod kernel;
mod tensor;
mod trace;
mod weights;

use alloc::format;
use alloc::vec::Vec;

pub use element::{Element, ACT_FRAC, RELU6_Q};
pub use tensor::Tensor;
pub use trace::MemoryTracker;
pub use weights::{fan_in, LayerWeights, WeightSet};

use kernel::Seams;
use tensor::Window;

use crate::error::{Error, Result};
use crate::geometry::{receptive_field, Rect, Span};
use crate::memory::{buffer_owner, in_place};
use crate::net::{LayerChain, LayerKind};
use crate::schedule::PatchPlan;

/// Tracker id of the full stage-output buffer while patches run.
const STAGE_BUFFER: u64 = u64::MAX;

trait Backend {
    type Buf: Clone;
    fn input(&mut self, rect: Rect) -> Self::Buf;
    fn layer(&mut self, i: usize, input: &Self::Buf, skip: Option<&Self::Buf>, out: Rect) -> Self::Buf;
    fn stage_buffer(&mut self, t: usize) -> Self::Buf;
    fn blit(&mut self, dst: &mut Self::Buf, src: &Self::Buf);
}

/// Schedule-only backend for memory traces.
struct Dry;

impl Backend for Dry {
    type Buf = ();
    fn input(&mut self, _: Rect) {}
    fn layer(&mut self, _: usize, _: &(), _: Option<&()>, _: Rect) {}
    fn stage_buffer(&mut self, _: usize) {}
    fn blit(&mut self, _: &mut (), _: &()) {}
}

struct Numeric<'a, E: Element> {
    chain: &'a LayerChain,
    weights: &'a WeightSet<E>,
    input: &'a Tensor<E>,
    seams: Seams,
}

impl<E: Element> Backend for Numeric<'_, E> {
    type Buf = Window<E>;

    fn input(&mut self, rect: Rect) -> Window<E> {
        Window::from_tensor(self.input, rect)
    }

    fn layer(&mut self, i: usize, input: &Window<E>, skip: Option<&Window<E>>, out: Rect) -> Window<E> {
        kernel::compute(&self.chain.layers[i], &self.weights.layers[i], input, skip, out, self.seams)
    }

    fn stage_buffer(&mut self, t: usize) -> Window<E> {
        let shape = self.chain.tensor(t);
        Window::zeros(full_rect(self.chain, t), shape.channels)
    }

    fn blit(&mut self, dst: &mut Window<E>, src: &Window<E>) {
        dst.blit(src);
    }
}

fn full_rect(chain: &LayerChain, t: usize) -> Rect {
    let s = chain.tensor(t);
    Rect::new(Span::new(0, s.height as i64), Span::new(0, s.width as i64))
}

fn window_bytes(chain: &LayerChain, t: usize, rect: Rect) -> u64 {
    let s = chain.tensor(t);
    rect.area() * s.channels as u64 * s.bytes_per_element as u64
}

/// Runs layers `start..end` with tensor `t` held in a window `rect(t)`.
/// Tensor `start` must already be in `bufs` and live in the tracker.
#[allow(clippy::too_many_arguments)]
fn run_segment<B: Backend>(
    chain: &LayerChain,
    start: usize,
    end: usize,
    rect: &dyn Fn(usize) -> Rect,
    mut stage: Option<&mut B::Buf>,
    backend: &mut B,
    tracker: &mut MemoryTracker,
    bufs: &mut [Option<B::Buf>],
    capture: Option<usize>,
) -> Option<B::Buf> {
    let bytes = |t: usize| window_bytes(chain, t, rect(t));
    let mut captured = None;
    for i in start..end {
        let layer = &chain.layers[i];
        let into_stage = stage.is_some() && i + 1 == end;
        let out = {
            let input = bufs[i].as_ref().expect("layer input computed");
            let skip = layer.skip.map(|t| bufs[t].as_ref().expect("skip computed"));
            backend.layer(i, input, skip, rect(i + 1))
        };

        let after_fused = layer.kind == LayerKind::ResidualAdd
            && i > 0
            && chain.fused_add(i - 1).is_some()
            && chain.fused_add(i - 1) == layer.skip;
        if into_stage || chain.fused_add(i).is_some() || after_fused {
            // Written into a buffer that is already live.
            tracker.observe();
        } else if in_place(chain, i) {
            let key = buffer_owner(chain, i) as u64;
            let out_bytes = bytes(i + 1);
            tracker.resize(key, bytes(buffer_owner(chain, i)).max(out_bytes));
            tracker.observe();
            tracker.resize(key, out_bytes);
            tracker.rekey(key, (i + 1) as u64);
        } else {
            tracker.alloc((i + 1) as u64, bytes(i + 1));
            tracker.observe();
        }

        if capture == Some(i + 1) {
            captured = Some(out.clone());
        }
        if into_stage {
            backend.blit(stage.as_deref_mut().expect("stage buffer"), &out);
        } else {
            bufs[i + 1] = Some(out);
        }

        // Free every tensor that is no longer read.
        // The stage output lives in the stage buffer, not in a tensor slot.
        let alive = |u: usize| {
            if u == i + 1 {
                !into_stage
            } else {
                chain.last_use(u).is_some_and(|l| l > i)
            }
        };
        let mut keep = Vec::new();
        for u in start..=i + 1 {
            if alive(u) {
                keep.push(buffer_owner(chain, u) as u64);
            } else {
                bufs[u] = None;
            }
        }
        let dead: Vec<u64> = tracker
            .live_ids()
            .filter(|id| *id != STAGE_BUFFER && !keep.contains(id))
            .collect();
        for id in dead {
            tracker.free(id);
        }
    }
    captured
}

/// Per-patch windows of the patch stage.
struct StagePlan<'a> {
    end: usize,
    tiles: usize,
    rect: &'a dyn Fn(usize, usize, usize) -> Rect,
}

struct Outcome<B: Backend> {
    output: B::Buf,
    captured: Option<B::Buf>,
    peak: u64,
}

fn drive<B: Backend>(chain: &LayerChain, stage: Option<StagePlan>, backend: &mut B, capture: Option<usize>) -> Outcome<B> {
    let mut tracker = MemoryTracker::new();
    let mut bufs: Vec<Option<B::Buf>> = (0..chain.tensor_count()).map(|_| None).collect();
    let full = |t: usize| full_rect(chain, t);
    let mut captured = None;
    let start = match stage {
        None => {
            bufs[0] = Some(backend.input(full(0)));
            tracker.alloc(0, window_bytes(chain, 0, full(0)));
            0
        }
        Some(plan) => {
            let end = plan.end;
            let mut out = backend.stage_buffer(end);
            tracker.alloc(STAGE_BUFFER, window_bytes(chain, end, full(end)));
            tracker.observe();
            for row in 0..plan.tiles {
                for col in 0..plan.tiles {
                    let rect = |t: usize| (plan.rect)(t, row, col);
                    let mut patch: Vec<Option<B::Buf>> = (0..=end).map(|_| None).collect();
                    patch[0] = Some(backend.input(rect(0)));
                    tracker.alloc(0, window_bytes(chain, 0, rect(0)));
                    run_segment(chain, 0, end, &rect, Some(&mut out), backend, &mut tracker, &mut patch, None);
                    debug_assert_eq!(tracker.live_ids().collect::<Vec<_>>(), [STAGE_BUFFER]);
                }
            }
            if capture == Some(end) {
                captured = Some(out.clone());
            }
            tracker.rekey(STAGE_BUFFER, buffer_owner(chain, end) as u64);
            bufs[end] = Some(out);
            end
        }
    };
    if let Some(c) = run_segment(chain, start, chain.len(), &full, None, backend, &mut tracker, &mut bufs, capture) {
        captured = Some(c);
    }
    if capture == Some(0) && start == 0 {
        captured = bufs[0].clone().or(captured);
    }
    let output = bufs[chain.len()].take().expect("chain output computed");
    Outcome {
        output,
        captured,
        peak: tracker.peak(),
    }
}

fn check_inputs<E: Element>(chain: &LayerChain, weights: &WeightSet<E>, input: &Tensor<E>) -> Result<()> {
    if input.shape != chain.input {
        return Err(Error::ShapeMismatch(format!(
            "input is {} ({} B/elem), chain expects {} ({} B/elem)",
            input.shape, input.shape.bytes_per_element, chain.input, chain.input.bytes_per_element
        )));
    }
    if input.data.len() as u64 != input.shape.elements() {
        return Err(Error::ShapeMismatch(format!("input data length {}", input.data.len())));
    }
    weights.validate(chain)
}

fn check_plan(chain: &LayerChain, plan: &PatchPlan) -> Result<()> {
    let g = &plan.geometry;
    let matches = chain.stage_end(plan.n).ok() == Some(g.stage_end)
        && g.p == plan.p
        && (0..=g.stage_end).all(|t| g.extent(t) == chain.tensor(t).height);
    if matches {
        Ok(())
    } else {
        Err(Error::InvalidPlan(format!(
            "plan (p = {}, n = {}) was not built for this chain",
            plan.p, plan.n
        )))
    }
}

/// Whole-tensor execution, layer by layer.
pub fn run_layerwise<E: Element>(chain: &LayerChain, weights: &WeightSet<E>, input: &Tensor<E>) -> Result<Tensor<E>> {
    run_layerwise_traced(chain, weights, input).map(|(t, _)| t)
}

/// [`run_layerwise`] plus the measured peak of live activation bytes.
pub fn run_layerwise_traced<E: Element>(
    chain: &LayerChain,
    weights: &WeightSet<E>,
    input: &Tensor<E>,
) -> Result<(Tensor<E>, u64)> {
    check_inputs(chain, weights, input)?;
    let mut backend = Numeric {
        chain,
        weights,
        input,
        seams: Seams::Forbidden,
    };
    let out = drive(chain, None, &mut backend, None);
    Ok((out.output.into_tensor(chain.output()), out.peak))
}

/// Runs the plan's patch stage patch by patch, then the rest layer by layer.
/// The result is bit-identical to [`run_layerwise`].
pub fn run_patchwise<E: Element>(
    chain: &LayerChain,
    weights: &WeightSet<E>,
    input: &Tensor<E>,
    plan: &PatchPlan,
) -> Result<Tensor<E>> {
    run_patchwise_traced(chain, weights, input, plan).map(|(t, _)| t)
}

pub fn run_patchwise_traced<E: Element>(
    chain: &LayerChain,
    weights: &WeightSet<E>,
    input: &Tensor<E>,
    plan: &PatchPlan,
) -> Result<(Tensor<E>, u64)> {
    check_inputs(chain, weights, input)?;
    check_plan(chain, plan)?;
    let mut backend = Numeric {
        chain,
        weights,
        input,
        seams: Seams::Forbidden,
    };
    let out = drive(chain, patch_stage(plan).as_ref().map(|s| s.as_plan()), &mut backend, None);
    Ok((out.output.into_tensor(chain.output()), out.peak))
}

/// Owned closure data behind a [`StagePlan`].
struct PatchStage<'a> {
    plan: &'a PatchPlan,
    rect: alloc::boxed::Box<dyn Fn(usize, usize, usize) -> Rect + 'a>,
}

impl PatchStage<'_> {
    fn as_plan(&self) -> StagePlan<'_> {
        StagePlan {
            end: self.plan.geometry.stage_end,
            tiles: self.plan.geometry.tiles.len(),
            rect: &*self.rect,
        }
    }
}

fn patch_stage(plan: &PatchPlan) -> Option<PatchStage<'_>> {
    if plan.p == 1 {
        return None;
    }
    let g = &plan.geometry;
    Some(PatchStage {
        plan,
        rect: alloc::boxed::Box::new(move |t, row, col| g.region(t, row, col)),
    })
}

/// Live-buffer high-water mark of executing `chain` layer by layer (`None`)
/// or under `plan`.
pub fn peak_memory_trace(chain: &LayerChain, plan: Option<&PatchPlan>) -> u64 {
    let stage = plan.and_then(patch_stage);
    drive(chain, stage.as_ref().map(|s| s.as_plan()), &mut Dry, None).peak
}

/// Comparison of non-overlapping patch execution against the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceReport {
    /// Over the stage output.
    pub max_abs_diff: f64,
    pub differing_fraction: f64,
    pub differing_elements: u64,
    /// Largest distance, in stage-output pixels, from a differing element to
    /// the nearest tile seam. `None` when nothing differs.
    pub max_seam_distance: Option<u32>,
    /// Over the final network output.
    pub output_max_abs_diff: f64,
    pub output_differing_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonOverlapRun<E> {
    pub output: Tensor<E>,
    pub stage_output: Tensor<E>,
    pub report: DivergenceReport,
}

/// Per-axis windows of non-overlapping execution: each tile scaled back
/// through the strides only, so neighbouring patches share nothing.
fn nonoverlap_spans(chain: &LayerChain, end: usize, tiles: &[Span]) -> Vec<Vec<Span>> {
    let jump_end = receptive_field(&chain.layers[..end]).jump as i64;
    (0..=end)
        .map(|t| {
            let ratio = jump_end / receptive_field(&chain.layers[..t]).jump as i64;
            let extent = chain.tensor(t).height as i64;
            tiles
                .iter()
                .enumerate()
                .map(|(k, tile)| {
                    let stop = if k + 1 == tiles.len() { extent } else { (tile.end * ratio).min(extent) };
                    Span::new((tile.start * ratio).min(extent), stop)
                })
                .collect()
        })
        .collect()
}

fn diff_stats<E: Element>(a: &[E], b: &[E]) -> (f64, u64) {
    let mut max = 0.0f64;
    let mut count = 0;
    for (x, y) in a.iter().zip(b) {
        if x != y {
            count += 1;
            let d = E::to_f64(*x) - E::to_f64(*y);
            max = max.max(if d < 0.0 { -d } else { d });
        }
    }
    (max, count)
}

fn seam_distance(tiles: &[Span], v: i64) -> i64 {
    tiles[1..]
        .iter()
        .map(|t| if v >= t.start { v - t.start } else { t.start - 1 - v })
        .min()
        .unwrap_or(i64::MAX)
}

/// Runs the first `n` blocks as `p x p` patches that see only their own
/// tile (zero padding at the seams, no halo) and measures how far the result
/// drifts from layer-wise execution.
pub fn run_patchwise_nonoverlap<E: Element>(
    chain: &LayerChain,
    weights: &WeightSet<E>,
    input: &Tensor<E>,
    p: u32,
    n: usize,
) -> Result<NonOverlapRun<E>> {
    check_inputs(chain, weights, input)?;
    let geometry = crate::geometry::PatchGeometry::new(chain, n, p, Default::default())?;
    let end = geometry.stage_end;
    let spans = nonoverlap_spans(chain, end, &geometry.tiles);
    let rect = |t: usize, row: usize, col: usize| Rect::new(spans[t][row], spans[t][col]);
    let mut backend = Numeric {
        chain,
        weights,
        input,
        seams: Seams::Zero,
    };
    let patched = drive(
        chain,
        Some(StagePlan {
            end,
            tiles: geometry.tiles.len(),
            rect: &rect,
        }),
        &mut backend,
        Some(end),
    );
    backend.seams = Seams::Forbidden;
    let reference = drive(chain, None, &mut backend, Some(end));

    let stage_shape = chain.tensor(end);
    let stage = patched.captured.expect("stage captured").into_tensor(stage_shape);
    let ref_stage = reference.captured.expect("stage captured").into_tensor(stage_shape);
    let output = patched.output.into_tensor(chain.output());
    let ref_output = reference.output.into_tensor(chain.output());

    let (max_abs_diff, differing_elements) = diff_stats(&stage.data, &ref_stage.data);
    let (output_max_abs_diff, out_diff) = diff_stats(&output.data, &ref_output.data);
    let c = stage_shape.channels as usize;
    let w = stage_shape.width as usize;
    let max_seam_distance = stage
        .data
        .iter()
        .zip(&ref_stage.data)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(idx, _)| {
            let px = idx / c;
            let (y, x) = ((px / w) as i64, (px % w) as i64);
            seam_distance(&geometry.tiles, y).min(seam_distance(&geometry.tiles, x)) as u32
        })
        .max();
    let report = DivergenceReport {
        max_abs_diff,
        differing_fraction: differing_elements as f64 / stage.data.len() as f64,
        differing_elements,
        max_seam_distance,
        output_max_abs_diff,
        output_differing_fraction: out_diff as f64 / output.data.len() as f64,
    };
    Ok(NonOverlapRun {
        output,
        stage_output: stage,
        report,
    })
}
