//! Patch-based inference plans: memory, MACs, `(p, n)` sweeps and search.
//!
//! In patch mode the first `n` blocks run once per patch. The full stage
//! output buffer is allocated up front and every patch writes its tile into
//! it; the input image is decoded patch by patch and never held whole. The
//! remaining blocks then run layer by layer.

mod redistribute;

use alloc::vec::Vec;
use core::ops::RangeInclusive;

pub use redistribute::{redistribute, Redistribution};

use crate::error::{Error, Result};
use crate::geometry::{mac_report, BorderMode, PatchGeometry};
use crate::memory::{analytic_memory, charge_layer, range_peak};
use crate::net::{BlockKind, LayerChain, NetworkSpec};

/// Patch counts per side considered by [`best_schedule`].
pub const P_CHOICES: RangeInclusive<u32> = 1..=4;

/// Resource limits a schedule must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryConstraint {
    /// Activation SRAM, bytes.
    pub sram_limit: u64,
    /// Weight storage, bytes.
    pub flash_limit: Option<u64>,
    /// Patch-mode MACs.
    pub macs_limit: Option<u64>,
}

impl MemoryConstraint {
    pub fn sram(sram_limit: u64) -> Self {
        MemoryConstraint {
            sram_limit,
            flash_limit: None,
            macs_limit: None,
        }
    }

    /// No limits at all.
    pub fn unbounded() -> Self {
        Self::sram(u64::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sram_limit == 0 {
            return Err(Error::field("sram_limit", "must be positive"));
        }
        if self.flash_limit == Some(0) {
            return Err(Error::field("flash_limit", "must be positive"));
        }
        if self.macs_limit == Some(0) {
            return Err(Error::field("macs_limit", "must be positive"));
        }
        Ok(())
    }

    pub fn admits(&self, plan: &PatchPlan, weight_bytes: u64) -> bool {
        plan.overall_peak_bytes <= self.sram_limit
            && self.flash_limit.map_or(true, |f| weight_bytes <= f)
            && self.macs_limit.map_or(true, |m| plan.macs_patch_mode <= m)
    }
}

/// A complete patch-based schedule and its cost.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    pub p: u32,
    pub n: usize,
    pub geometry: PatchGeometry,
    pub patch_stage_peak_bytes: u64,
    /// `max(patch_stage_peak_bytes, per-layer peak after the stage)`.
    pub overall_peak_bytes: u64,
    pub layer_mode_peak_bytes: u64,
    pub macs_layer_mode: u64,
    pub macs_patch_mode: u64,
    pub macs_stage_layer_mode: u64,
    pub macs_stage_patch_mode: u64,
    pub overhead_overall: f64,
    pub overhead_patch_stage: f64,
}

impl PatchPlan {
    pub fn stage_end(&self) -> usize {
        self.geometry.stage_end
    }
}

/// Peak bytes of the patch stage: the full stage output buffer plus the
/// largest per-patch working set of any layer in the stage.
///
/// With `p == 1` the plan is plain layer-by-layer execution and the result is
/// the per-layer peak over the stage.
pub fn patch_peak_memory(chain: &LayerChain, geometry: &PatchGeometry) -> u64 {
    let end = geometry.stage_end;
    if geometry.p == 1 {
        return range_peak(&analytic_memory(chain), 0..end);
    }
    let out_buffer = chain.tensor(end).byte_size();
    let k = geometry.tiles.len();
    let mut peak = 0;
    for row in 0..k {
        for col in 0..k {
            let bytes = |t: usize| {
                let shape = chain.tensor(t);
                geometry.region(t, row, col).area()
                    * shape.channels as u64
                    * shape.bytes_per_element as u64
            };
            for i in 0..end {
                let m = charge_layer(chain, i, &bytes, i + 1 != end);
                peak = peak.max(m.total_bytes);
            }
        }
    }
    out_buffer + peak
}

/// Builds the plan running the first `n` blocks as `p x p` patches.
pub fn plan(chain: &LayerChain, n: usize, p: u32, mode: BorderMode) -> Result<PatchPlan> {
    let geometry = PatchGeometry::new(chain, n, p, mode)?;
    let profile = analytic_memory(chain);
    let patch_stage_peak_bytes = patch_peak_memory(chain, &geometry);
    let rest = range_peak(&profile, geometry.stage_end..chain.len());
    let macs = mac_report(chain, &geometry);
    Ok(PatchPlan {
        p,
        n,
        patch_stage_peak_bytes,
        overall_peak_bytes: patch_stage_peak_bytes.max(rest),
        layer_mode_peak_bytes: profile.peak_bytes,
        macs_layer_mode: macs.total_layer,
        macs_patch_mode: macs.total_patch,
        macs_stage_layer_mode: macs.stage_layer,
        macs_stage_patch_mode: macs.stage_patch,
        overhead_overall: macs.overhead_overall(),
        overhead_patch_stage: macs.overhead_stage(),
        geometry,
    })
}

/// Every valid plan for `p` in `p_range` and `n` in `n_range`, sorted by
/// `(p, n)`. Pairs without a valid geometry (too many patches for the stage
/// output, `n` past the last block) are skipped.
pub fn sweep(
    chain: &LayerChain,
    p_range: RangeInclusive<u32>,
    n_range: RangeInclusive<usize>,
    mode: BorderMode,
) -> Vec<PatchPlan> {
    let mut plans = Vec::new();
    for p in p_range {
        for n in n_range.clone() {
            if let Ok(plan) = plan(chain, n, p, mode) {
                plans.push(plan);
            }
        }
    }
    plans
}

/// Largest useful `n`: every block except a trailing head.
pub fn max_patch_blocks(net: &NetworkSpec) -> usize {
    let head = net.blocks.last().is_some_and(|b| b.kind == BlockKind::Head);
    (net.blocks.len() - usize::from(head)).max(1)
}

/// Cheapest feasible plan over `p` in [`P_CHOICES`] and `n` up to
/// [`max_patch_blocks`].
///
/// Ties on patch-mode MACs go to smaller `p`, then smaller `n`. Every `n`
/// gives the same plan when `p == 1`, so that case is evaluated once, as
/// `n = 1`.
pub fn best_schedule(net: &NetworkSpec, constraint: &MemoryConstraint, mode: BorderMode) -> Result<PatchPlan> {
    constraint.validate()?;
    let chain = net.lower()?;
    let weights = chain.weight_bytes();
    let n_max = max_patch_blocks(net);
    let mut best: Option<PatchPlan> = None;
    for p in P_CHOICES {
        let ns = if p == 1 { 1..=1 } else { 1..=n_max };
        for n in ns {
            let Ok(candidate) = plan(&chain, n, p, mode) else { continue };
            if !constraint.admits(&candidate, weights) {
                continue;
            }
            if best.as_ref().map_or(true, |b| candidate.macs_patch_mode < b.macs_patch_mode) {
                best = Some(candidate);
            }
        }
    }
    best.ok_or(Error::Infeasible)
}
