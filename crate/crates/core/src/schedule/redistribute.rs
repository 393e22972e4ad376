//! Moving receptive field out of the patch stage and into later blocks.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::receptive_field;
use crate::net::{BlockKind, BlockSpec, LayerChain, NetworkSpec};

/// Largest kernel later blocks may grow to.
const MAX_KERNEL: u32 = 7;
/// Deepest a stage may become by adding blocks.
const MAX_STAGE_DEPTH: usize = 4;
/// Allowed relative change of total MACs.
const MAC_BUDGET: f64 = 0.10;

/// Result of [`redistribute`].
#[derive(Clone, Debug, PartialEq)]
pub struct Redistribution {
    pub network: NetworkSpec,
    /// Blocks in the new patch stage (removed blocks shrink it).
    pub patch_blocks: usize,
    pub original_stage_rf: u64,
    pub stage_rf: u64,
    pub original_rf: u64,
    pub rf: u64,
    pub original_macs: u64,
    pub macs: u64,
}

struct Eval {
    stage_rf: u64,
    rf: u64,
    macs: u64,
}

fn evaluate(net: &NetworkSpec, n: usize) -> Result<Eval> {
    let chain = net.lower()?;
    let end = chain.stage_end(n)?;
    Ok(Eval {
        stage_rf: receptive_field(&chain.layers[..end]).size,
        rf: total_rf(&chain),
        macs: chain.total_macs(),
    })
}

fn total_rf(chain: &LayerChain) -> u64 {
    receptive_field(&chain.layers).size
}

/// Maximal runs of consecutive inverted-residual blocks with equal width.
fn stages(net: &NetworkSpec) -> Vec<core::ops::Range<usize>> {
    let mut runs: Vec<core::ops::Range<usize>> = Vec::new();
    for (i, b) in net.blocks.iter().enumerate() {
        if b.kind != BlockKind::InvertedResidual {
            continue;
        }
        match runs.last_mut() {
            Some(r) if r.end == i && net.blocks[r.start].out_channels == b.out_channels => r.end = i + 1,
            _ => runs.push(i..i + 1),
        }
    }
    runs
}

fn stage_depth(runs: &[core::ops::Range<usize>], block: usize) -> usize {
    runs.iter().find(|r| r.contains(&block)).map_or(1, |r| r.len())
}

/// Stride product in front of every block.
fn jumps(net: &NetworkSpec) -> Vec<u64> {
    let mut jump = 1;
    net.blocks
        .iter()
        .map(|b| {
            let j = jump;
            jump *= b.stride as u64;
            j
        })
        .collect()
}

enum Shrink {
    Remove(usize),
    Kernel(usize, u32),
}

/// Next patch-stage move: the one removing the most receptive field,
/// earliest block first.
fn next_shrink(net: &NetworkSpec, n: usize) -> Option<Shrink> {
    let runs = stages(net);
    let jumps = jumps(net);
    let in_c = net.block_input_channels();
    let mut best: Option<(u64, Shrink)> = None;
    let mut offer = |gain: u64, m: Shrink| {
        if gain > 0 && best.as_ref().map_or(true, |(g, _)| gain > *g) {
            best = Some((gain, m));
        }
    };
    for i in 0..n {
        let b = &net.blocks[i];
        let unit = jumps[i];
        match b.kind {
            BlockKind::InvertedResidual if b.stride == 1 => {
                if b.has_residual(in_c[i]) && stage_depth(&runs, i) > 1 {
                    offer((b.kernel as u64 - 1) * unit, Shrink::Remove(i));
                }
                if b.kernel > 1 {
                    offer(2 * unit, Shrink::Kernel(i, b.kernel - 2));
                }
            }
            BlockKind::InvertedResidual | BlockKind::Stem if b.kernel > 3 => {
                offer(2 * unit, Shrink::Kernel(i, b.kernel - 2));
            }
            _ => {}
        }
    }
    best.map(|(_, m)| m)
}

/// Later-stage candidates: grow one kernel by 2, or deepen one stage by a
/// stride-1 copy of its last block.
fn grow_moves(net: &NetworkSpec, n: usize) -> Vec<NetworkSpec> {
    let mut moves = Vec::new();
    for i in n..net.blocks.len() {
        let b = net.blocks[i];
        if b.kind == BlockKind::InvertedResidual && b.kernel < MAX_KERNEL {
            let mut m = net.clone();
            m.blocks[i].kernel = b.kernel + 2;
            moves.push(m);
        }
    }
    for run in stages(net) {
        if run.end > n && run.len() < MAX_STAGE_DEPTH {
            let mut m = net.clone();
            let copy = BlockSpec {
                stride: 1,
                ..net.blocks[run.end - 1]
            };
            m.blocks.insert(run.end, copy);
            moves.push(m);
        }
    }
    moves
}

/// Shrinks the receptive field of the first `n` blocks as far as the greedy
/// moves allow, then grows later blocks until the whole network's receptive
/// field is back to at least `(1 - rf_tolerance)` of the original, keeping
/// total MACs within 10% of the original.
///
/// Patch-stage moves, largest receptive-field reduction first: drop a
/// stride-1 residual block from a stage deeper than one, shrink a stride-1
/// kernel by 2 (down to 1), shrink a strided kernel by 2 (down to 3).
/// Compensation picks, at each step, the move with the best receptive-field
/// gain per added MAC.
pub fn redistribute(net: &NetworkSpec, n: usize, rf_tolerance: f64) -> Result<Redistribution> {
    if !(rf_tolerance >= 0.0) {
        return Err(Error::field("rf_tolerance", "must be a non-negative number"));
    }
    let original = evaluate(net, n)?;
    let mut spec = net.clone();
    let mut n_new = n;
    while let Some(m) = next_shrink(&spec, n_new) {
        match m {
            Shrink::Remove(i) => {
                spec.blocks.remove(i);
                n_new -= 1;
            }
            Shrink::Kernel(i, k) => spec.blocks[i].kernel = k,
        }
    }

    let lo = original.macs as f64 * (1.0 - MAC_BUDGET);
    let hi = original.macs as f64 * (1.0 + MAC_BUDGET);
    let target = (1.0 - rf_tolerance) * original.rf as f64;
    let mut cur = evaluate(&spec, n_new)?;

    while (cur.rf as f64) < target || (cur.macs as f64) < lo {
        let need_rf = (cur.rf as f64) < target;
        let mut best: Option<(f64, NetworkSpec, Eval)> = None;
        for m in grow_moves(&spec, n_new) {
            let e = evaluate(&m, n_new)?;
            if e.macs as f64 > hi || e.macs <= cur.macs {
                continue;
            }
            let gain = e.rf.saturating_sub(cur.rf) as f64;
            if need_rf && gain == 0.0 {
                continue;
            }
            let score = if need_rf {
                gain / (e.macs - cur.macs) as f64
            } else {
                // Only MACs are short: prefer the move adding the most.
                e.macs as f64
            };
            if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                best = Some((score, m, e));
            }
        }
        let Some((_, m, e)) = best else {
            return Err(Error::CannotCompensate(format!(
                "receptive field {} (target {target:.0}) and {} MACs (budget {lo:.0}..{hi:.0}) with no move left",
                cur.rf, cur.macs
            )));
        };
        spec = m;
        cur = e;
    }
    if cur.macs as f64 > hi {
        return Err(Error::CannotCompensate(format!(
            "{} MACs exceed the budget of {hi:.0}",
            cur.macs
        )));
    }

    Ok(Redistribution {
        network: spec,
        patch_blocks: n_new,
        original_stage_rf: original.stage_rf,
        stage_rf: cur.stage_rf,
        original_rf: original.rf,
        rf: cur.rf,
        original_macs: original.macs,
        macs: cur.macs,
    })
}
