//! CSV and JSON reports.

use std::io::Write;

use mcupatch_core::memory::{BlockMemory, MemoryProfile};
use mcupatch_core::schedule::PatchPlan;
use mcupatch_core::search::{Candidate, EvolutionConfig, EvolutionResult, GenerationStats, SearchSpace};
use mcupatch_core::{kib, NetworkSpec};
use serde::Serialize;

use crate::network_file::NetworkFile;

/// kB with one decimal.
pub fn kb1(bytes: u64) -> f64 {
    (kib(bytes) * 10.0).round() / 10.0
}

fn pct2(ratio: f64) -> f64 {
    (ratio * 10_000.0).round() / 100.0
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Serialize)]
pub struct LayerRow {
    pub layer_idx: usize,
    pub block_idx: usize,
    pub kind: &'static str,
    pub in_bytes: u64,
    pub out_bytes: u64,
    pub residual_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct BlockRow {
    pub block_idx: usize,
    pub peak_bytes: u64,
    pub peak_kb: f64,
    pub ratio: f64,
}

pub fn layer_rows(profile: &MemoryProfile) -> Vec<LayerRow> {
    profile
        .layers
        .iter()
        .map(|l| LayerRow {
            layer_idx: l.layer,
            block_idx: l.block,
            kind: l.kind.name(),
            in_bytes: l.input_bytes,
            out_bytes: l.output_bytes,
            residual_bytes: l.residual_bytes,
            total_bytes: l.total_bytes,
        })
        .collect()
}

pub fn block_rows(blocks: &[BlockMemory]) -> Vec<BlockRow> {
    blocks
        .iter()
        .map(|b| BlockRow {
            block_idx: b.block,
            peak_bytes: b.peak_bytes,
            peak_kb: kb1(b.peak_bytes),
            ratio: (b.ratio * 10_000.0).round() / 10_000.0,
        })
        .collect()
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ProfileReport {
    pub network: String,
    pub resolution: u32,
    pub peak_bytes: u64,
    pub peak_kb: f64,
    pub peak_layer: usize,
    pub peak_block: usize,
    pub layers: Vec<LayerRow>,
    pub blocks: Vec<BlockRow>,
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub p: u32,
    pub n: usize,
    pub patch_peak_kb: f64,
    pub overall_peak_kb: f64,
    pub layer_peak_kb: f64,
    pub macs_layer: u64,
    pub macs_patch: u64,
    pub overhead_stage_pct: f64,
    pub overhead_overall_pct: f64,
}

impl From<&PatchPlan> for SweepRow {
    fn from(p: &PatchPlan) -> Self {
        SweepRow {
            p: p.p,
            n: p.n,
            patch_peak_kb: kb1(p.patch_stage_peak_bytes),
            overall_peak_kb: kb1(p.overall_peak_bytes),
            layer_peak_kb: kb1(p.layer_mode_peak_bytes),
            macs_layer: p.macs_layer_mode,
            macs_patch: p.macs_patch_mode,
            overhead_stage_pct: pct2(p.overhead_patch_stage),
            overhead_overall_pct: pct2(p.overhead_overall),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PlanReport {
    pub network: String,
    pub resolution: u32,
    pub p: u32,
    pub n: usize,
    pub border_mode: &'static str,
    pub input_patch_side: u64,
    pub patch_stage_peak_bytes: u64,
    pub patch_stage_peak_kb: f64,
    pub overall_peak_bytes: u64,
    pub overall_peak_kb: f64,
    pub layer_mode_peak_bytes: u64,
    pub layer_mode_peak_kb: f64,
    pub macs_layer_mode: u64,
    pub macs_patch_mode: u64,
    pub macs_stage_layer_mode: u64,
    pub macs_stage_patch_mode: u64,
    pub overhead_patch_stage_pct: f64,
    pub overhead_overall_pct: f64,
}

pub fn border_mode_name(mode: mcupatch_core::geometry::BorderMode) -> &'static str {
    match mode {
        mcupatch_core::geometry::BorderMode::Uniform => "uniform",
        mcupatch_core::geometry::BorderMode::Clipped => "clipped",
    }
}

impl PlanReport {
    pub fn new(net: &NetworkSpec, p: &PatchPlan) -> Self {
        PlanReport {
            network: net.name.clone(),
            resolution: net.input_resolution,
            p: p.p,
            n: p.n,
            border_mode: border_mode_name(p.geometry.mode),
            input_patch_side: p.geometry.input_patch_side(),
            patch_stage_peak_bytes: p.patch_stage_peak_bytes,
            patch_stage_peak_kb: kb1(p.patch_stage_peak_bytes),
            overall_peak_bytes: p.overall_peak_bytes,
            overall_peak_kb: kb1(p.overall_peak_bytes),
            layer_mode_peak_bytes: p.layer_mode_peak_bytes,
            layer_mode_peak_kb: kb1(p.layer_mode_peak_bytes),
            macs_layer_mode: p.macs_layer_mode,
            macs_patch_mode: p.macs_patch_mode,
            macs_stage_layer_mode: p.macs_stage_layer_mode,
            macs_stage_patch_mode: p.macs_stage_patch_mode,
            overhead_patch_stage_pct: pct2(p.overhead_patch_stage),
            overhead_overall_pct: pct2(p.overhead_overall),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GenesReport {
    pub key: String,
    pub kernels: Vec<u32>,
    pub expansions: Vec<u32>,
    pub depths: Vec<u32>,
    pub widths: Vec<u32>,
    pub resolution: u32,
}

#[derive(Debug, Serialize)]
pub struct BestReport {
    pub genes: GenesReport,
    pub fitness: Option<f64>,
    pub network: NetworkFile,
    pub plan: Option<PlanReport>,
}

#[derive(Debug, Serialize)]
pub struct HistoryRow {
    pub generation: usize,
    pub best_fitness: Option<f64>,
    pub mean_fitness: Option<f64>,
    pub feasible: usize,
}

impl From<&GenerationStats> for HistoryRow {
    fn from(g: &GenerationStats) -> Self {
        HistoryRow {
            generation: g.generation,
            best_fitness: finite(g.best_fitness),
            mean_fitness: finite(g.mean_fitness),
            feasible: g.feasible,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ConfigReport {
    pub population: usize,
    pub survivors: usize,
    pub crossover_offspring: usize,
    pub mutation_offspring: usize,
    pub mutation_rate: f64,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct SearchReport {
    pub proxy: String,
    pub sram_limit_bytes: u64,
    pub flash_limit_bytes: Option<u64>,
    pub config: ConfigReport,
    pub evaluations: usize,
    pub best: BestReport,
    pub history: Vec<HistoryRow>,
}

impl SearchReport {
    pub fn new(
        space: &SearchSpace,
        config: &EvolutionConfig,
        proxy: &str,
        sram_limit_bytes: u64,
        flash_limit_bytes: Option<u64>,
        result: &EvolutionResult,
    ) -> Self {
        let best: &Candidate = &result.best;
        let net = mcupatch_core::search::materialize(space, &best.genes).expect("reported genes materialize");
        SearchReport {
            proxy: proxy.to_string(),
            sram_limit_bytes,
            flash_limit_bytes,
            config: ConfigReport {
                population: config.population,
                survivors: config.survivors,
                crossover_offspring: config.crossover_offspring,
                mutation_offspring: config.mutation_offspring,
                mutation_rate: config.mutation_rate,
                iterations: config.iterations,
                seed: config.seed,
            },
            evaluations: result.evaluations,
            best: BestReport {
                genes: GenesReport {
                    key: best.genes.to_string(),
                    kernels: best.genes.kernels.clone(),
                    expansions: best.genes.expansions.clone(),
                    depths: best.genes.depths.clone(),
                    widths: best.genes.widths.clone(),
                    resolution: best.genes.resolution,
                },
                fitness: finite(best.fitness),
                plan: best.schedule.as_ref().map(|p| PlanReport::new(&net, p)),
                network: NetworkFile::from(&net),
            },
            history: result.history.iter().map(HistoryRow::from).collect(),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}
