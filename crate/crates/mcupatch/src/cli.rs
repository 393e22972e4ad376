//! The `mcupatch` command line.
//!
//! Machine-readable output goes to `--out` (or stdout); human summaries go to
//! stderr. Exit codes: 0 success, 1 verification mismatch, 2 input error,
//! 3 infeasible or cannot compensate.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mcupatch_core::exec::{
    peak_memory_trace, run_layerwise_traced, run_patchwise_nonoverlap, run_patchwise_traced, Element, Tensor,
    WeightSet,
};
use mcupatch_core::geometry::{receptive_field, BorderMode};
use mcupatch_core::memory::{analytic_memory, block_memory_report};
use mcupatch_core::schedule::{best_schedule, max_patch_blocks, plan, redistribute, sweep, MemoryConstraint, PatchPlan};
use mcupatch_core::search::{evolve, EvolutionConfig, FitnessProxy, MacsProxy, SearchSpace};
use mcupatch_core::{kib, NetworkSpec, KIB};

use crate::fitness_table::load_table;
use crate::network_file::{network_to_json, resolve_network};
use crate::report::{self, kb1, PlanReport, ProfileReport, SearchReport, SweepRow};
use crate::weights_file::load_weights;

#[derive(Debug, Parser)]
#[command(name = "mcupatch", version, about = "Patch-based CNN inference planner and verifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer activation memory of layer-by-layer execution.
    Profile(ProfileArgs),
    /// Cheapest (p, n) schedule that fits the memory limits.
    Plan(PlanArgs),
    /// Every (p, n) plan in a range.
    Sweep(SweepArgs),
    /// Move receptive field out of the patch stage.
    Redistribute(RedistributeArgs),
    /// Evolutionary architecture and schedule search.
    Search(SearchArgs),
    /// Check patch-wise execution against layer-wise execution.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct NetArgs {
    /// Bundled network name (mbv2, mbv2-rd) or path to a network JSON file.
    #[arg(long)]
    pub net: String,
    /// Input resolution override.
    #[arg(long)]
    pub res: Option<u32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Border {
    Uniform,
    Clipped,
}

impl From<Border> for BorderMode {
    fn from(b: Border) -> Self {
        match b {
            Border::Uniform => BorderMode::Uniform,
            Border::Clipped => BorderMode::Clipped,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// SRAM limit in kB (1 kB = 1024 B).
    #[arg(long)]
    pub sram_kb: f64,
    /// Weight storage limit in kB.
    #[arg(long)]
    pub flash_kb: Option<f64>,
    /// Border handling when counting patch MACs.
    #[arg(long, value_enum, default_value = "uniform")]
    pub mode: Border,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = 4)]
    pub p_max: u32,
    #[arg(long, default_value_t = 10)]
    pub n_max: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    pub mode: Border,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RedistributeArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Blocks in the patch stage.
    #[arg(long)]
    pub n: usize,
    /// Allowed relative loss of whole-network receptive field.
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    /// Patches per side used for the overhead table.
    #[arg(long, default_value_t = 4)]
    pub p: u32,
    /// Where to write the new network JSON (stdout otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub sram_kb: f64,
    #[arg(long)]
    pub flash_kb: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `macs`, or `table:<path>` for a JSON map from gene string to fitness.
    #[arg(long, default_value = "macs")]
    pub proxy: String,
    /// Population 40, 8 survivors, 10 iterations instead of 100/20/30.
    #[arg(long)]
    pub quick: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VerifyMode {
    /// Overlapping patches with halos; must be bit-exact.
    Overlap,
    /// Patches without halos; reports the divergence.
    Nonoverlap,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = 4)]
    pub p: u32,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Seed for generated weights and input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "overlap")]
    pub mode: VerifyMode,
    /// Weight file (with its `.json` manifest) instead of generated weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

/// Verification found a difference.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Mismatch(String);

/// Input problems that are not core errors.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(String);

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<Mismatch>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mcupatch_core::Error>() {
            return match e {
                mcupatch_core::Error::Infeasible
                | mcupatch_core::Error::CannotCompensate(_)
                | mcupatch_core::Error::SeedingExhausted { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            // Infeasible and cannot-compensate errors already name themselves.
            let label = match code {
                1 => "mismatch: ",
                3 => "",
                _ => "error: ",
            };
            let _ = writeln!(err, "{label}{e:#}");
            code
        }
    }
}

fn load_net(args: &NetArgs) -> Result<NetworkSpec> {
    let mut net = resolve_network(&args.net).map_err(|e| InputError(e.to_string()))?;
    if let Some(r) = args.res {
        net = net.with_resolution(r);
        net.validate()?;
    }
    Ok(net)
}

fn kb_to_bytes(kb: f64, flag: &str) -> Result<u64> {
    if !(kb > 0.0) || !kb.is_finite() {
        return Err(InputError(format!("--{flag} must be a positive number of kB")).into());
    }
    Ok((kb * KIB as f64).round().max(1.0) as u64)
}

fn emit(out: &mut dyn Write, path: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => out.write_all(bytes)?,
    }
    Ok(())
}

fn csv_bytes<T: serde::Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    report::write_csv(&mut buf, rows)?;
    Ok(buf)
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Profile(a) => profile(a, out, err),
        Command::Plan(a) => plan_cmd(a, out, err),
        Command::Sweep(a) => sweep_cmd(a, out, err),
        Command::Redistribute(a) => redistribute_cmd(a, out, err),
        Command::Search(a) => search_cmd(a, out, err),
        Command::Verify(a) => verify_cmd(a, out, err),
    }
}

fn profile(a: ProfileArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let net = load_net(&a.net)?;
    let chain = net.lower()?;
    let profile = analytic_memory(&chain);
    let blocks = block_memory_report(&chain);
    let bytes = match a.format {
        Format::Csv => csv_bytes(&report::layer_rows(&profile))?,
        Format::Json => report::to_json(&ProfileReport {
            network: net.name.clone(),
            resolution: net.input_resolution,
            peak_bytes: profile.peak_bytes,
            peak_kb: kb1(profile.peak_bytes),
            peak_layer: profile.peak_layer,
            peak_block: profile.peak_block(),
            layers: report::layer_rows(&profile),
            blocks: report::block_rows(&blocks),
        })
        .into_bytes(),
    };
    emit(out, &a.out, &bytes)?;
    writeln!(
        err,
        "{} r={}: peak {:.1} kB ({} B) at layer {} (block {})",
        net.name,
        net.input_resolution,
        kib(profile.peak_bytes),
        profile.peak_bytes,
        profile.peak_layer,
        profile.peak_block()
    )?;
    Ok(())
}

fn constraint(sram_kb: f64, flash_kb: Option<f64>) -> Result<MemoryConstraint> {
    Ok(MemoryConstraint {
        sram_limit: kb_to_bytes(sram_kb, "sram-kb")?,
        flash_limit: flash_kb.map(|f| kb_to_bytes(f, "flash-kb")).transpose()?,
        macs_limit: None,
    })
}

fn plan_summary(p: &PatchPlan) -> String {
    format!(
        "p={} n={}: peak {:.1} kB (layer-wise {:.1} kB), MACs {} (+{:.1}% overall, +{:.1}% patch stage)",
        p.p,
        p.n,
        kib(p.overall_peak_bytes),
        kib(p.layer_mode_peak_bytes),
        p.macs_patch_mode,
        p.overhead_overall * 100.0,
        p.overhead_patch_stage * 100.0
    )
}

fn plan_cmd(a: PlanArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let net = load_net(&a.net)?;
    let c = constraint(a.sram_kb, a.flash_kb)?;
    let best = best_schedule(&net, &c, a.mode.into())?;
    emit(out, &a.out, report::to_json(&PlanReport::new(&net, &best)).as_bytes())?;
    writeln!(err, "{} r={}: {}", net.name, net.input_resolution, plan_summary(&best))?;
    Ok(())
}

fn sweep_cmd(a: SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let net = load_net(&a.net)?;
    if a.p_max == 0 || a.n_max == 0 {
        return Err(InputError("--p-max and --n-max must be at least 1".into()).into());
    }
    let chain = net.lower()?;
    let plans = sweep(&chain, 1..=a.p_max, 1..=a.n_max, a.mode.into());
    let rows: Vec<SweepRow> = plans.iter().map(SweepRow::from).collect();
    let bytes = match a.format {
        Format::Csv => csv_bytes(&rows)?,
        Format::Json => report::to_json(&rows).into_bytes(),
    };
    emit(out, &a.out, &bytes)?;
    if let Some(best) = plans.iter().min_by_key(|p| (p.overall_peak_bytes, p.p, p.n)) {
        writeln!(err, "{} rows; lowest peak at {}", plans.len(), plan_summary(best))?;
    }
    Ok(())
}

fn redistribute_cmd(a: RedistributeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let net = load_net(&a.net)?;
    if a.n == 0 || a.n > net.blocks.len() {
        return Err(mcupatch_core::Error::InvalidStage {
            n: a.n,
            blocks: net.blocks.len(),
        }
        .into());
    }
    let r = redistribute(&net, a.n, a.tol)?;
    let mut new = r.network.clone();
    let unchanged = new.blocks == net.blocks;
    if !unchanged {
        new.name = format!("{}-rd", net.name);
    }
    emit(out, &a.out, network_to_json(&new).as_bytes())?;

    let before = plan(&net.lower()?, a.n, a.p, BorderMode::Uniform)?;
    let new_chain = new.lower()?;
    let after = plan(&new_chain, r.patch_blocks, a.p, BorderMode::Uniform)?;
    writeln!(
        err,
        "{:<14} {:>2} {:>10} {:>8} {:>8} {:>12} {:>14} {:>16} {:>9}",
        "", "n", "patch side", "stage rf", "total rf", "MACs", "stage overhead", "overall overhead", "peak kB"
    )?;
    for (label, p, stage_rf, rf) in [
        ("original", &before, r.original_stage_rf, r.original_rf),
        ("redistributed", &after, r.stage_rf, r.rf),
    ] {
        writeln!(
            err,
            "{:<14} {:>2} {:>10} {:>8} {:>8} {:>12} {:>13.1}% {:>15.1}% {:>9.1}",
            label,
            p.n,
            p.geometry.input_patch_side(),
            stage_rf,
            rf,
            p.macs_patch_mode,
            p.overhead_patch_stage * 100.0,
            p.overhead_overall * 100.0,
            kib(p.overall_peak_bytes)
        )?;
    }
    debug_assert_eq!(receptive_field(&new_chain.layers).size, r.rf);
    if unchanged {
        writeln!(err, "no-op: nothing to shrink in the patch stage, network unchanged")?;
    }
    Ok(())
}

fn search_cmd(a: SearchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let c = constraint(a.sram_kb, a.flash_kb)?;
    let table;
    let proxy: &dyn FitnessProxy = if a.proxy == "macs" {
        &MacsProxy
    } else if let Some(path) = a.proxy.strip_prefix("table:") {
        table = load_table(path.as_ref()).map_err(|e| InputError(e.to_string()))?;
        &table
    } else {
        return Err(InputError(format!("unknown proxy `{}` (expected macs or table:<path>)", a.proxy)).into());
    };
    let space = SearchSpace::default();
    let config = if a.quick {
        EvolutionConfig::reduced(a.seed)
    } else {
        EvolutionConfig {
            seed: a.seed,
            ..EvolutionConfig::default()
        }
    };
    let result = evolve(&space, &c, &config, proxy)?;
    let rep = SearchReport::new(&space, &config, &a.proxy, c.sram_limit, c.flash_limit, &result);
    emit(out, &a.out, report::to_json(&rep).as_bytes())?;
    writeln!(
        err,
        "best {} fitness {} after {} evaluations",
        rep.best.genes.key,
        rep.best.fitness.map_or("-inf".to_string(), |f| f.to_string()),
        result.evaluations
    )?;
    if let Some(p) = &result.best.schedule {
        writeln!(err, "schedule {}", plan_summary(p))?;
    }
    Ok(())
}

fn verify_cmd(a: VerifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let net = load_net(&a.net)?;
    let chain = net.lower()?;
    if a.n == 0 || a.n > max_patch_blocks(&net) {
        return Err(mcupatch_core::Error::InvalidStage {
            n: a.n,
            blocks: chain.blocks.len(),
        }
        .into());
    }
    match net.bytes_per_element {
        4 => verify_typed::<f32>(&a, &net, out, err),
        _ => verify_typed::<i8>(&a, &net, out, err),
    }
}

fn verify_typed<E: Element>(a: &VerifyArgs, net: &NetworkSpec, out: &mut dyn Write, _err: &mut dyn Write) -> Result<()> {
    let chain = net.lower()?;
    let weights: WeightSet<E> = match &a.weights {
        Some(path) => load_weights(path, &chain).map_err(|e| InputError(e.to_string()))?,
        None => WeightSet::generate(&chain, a.seed),
    };
    let input = Tensor::<E>::random(chain.input, a.seed.wrapping_add(1));
    writeln!(
        out,
        "{} r={} p={} n={} ({})",
        net.name,
        net.input_resolution,
        a.p,
        a.n,
        E::NAME
    )?;
    match a.mode {
        VerifyMode::Overlap => {
            let plan = plan(&chain, a.n, a.p, BorderMode::Uniform)?;
            let (reference, layer_peak) = run_layerwise_traced(&chain, &weights, &input)?;
            let (patched, patch_peak) = run_patchwise_traced(&chain, &weights, &input, &plan)?;
            writeln!(
                out,
                "layer-wise peak {:.1} kB measured, {:.1} kB analytic",
                kib(layer_peak),
                kib(plan.layer_mode_peak_bytes)
            )?;
            writeln!(
                out,
                "patch-wise peak {:.1} kB measured, {:.1} kB analytic",
                kib(patch_peak),
                kib(plan.overall_peak_bytes)
            )?;
            if patch_peak != plan.overall_peak_bytes || peak_memory_trace(&chain, Some(&plan)) != patch_peak {
                return Err(Mismatch(format!(
                    "measured peak {patch_peak} B differs from analytic {} B",
                    plan.overall_peak_bytes
                ))
                .into());
            }
            if patched.data != reference.data {
                let differing = patched.data.iter().zip(&reference.data).filter(|(x, y)| x != y).count();
                writeln!(out, "MISMATCH")?;
                return Err(Mismatch(format!("{differing} output elements differ")).into());
            }
            writeln!(out, "BIT-EXACT")?;
        }
        VerifyMode::Nonoverlap => {
            let run = run_patchwise_nonoverlap(&chain, &weights, &input, a.p, a.n)?;
            let r = &run.report;
            writeln!(
                out,
                "stage output: {} of {} elements differ ({:.2}%), max abs diff {}",
                r.differing_elements,
                run.stage_output.data.len(),
                r.differing_fraction * 100.0,
                r.max_abs_diff
            )?;
            match r.max_seam_distance {
                Some(d) => writeln!(out, "differences lie within {d} px of a seam")?,
                None => writeln!(out, "no divergence")?,
            }
            writeln!(
                out,
                "network output: {:.2}% of elements differ, max abs diff {}",
                r.output_differing_fraction * 100.0,
                r.output_max_abs_diff
            )?;
            writeln!(out, "{}", if r.differing_elements > 0 { "DIVERGENT" } else { "NO-DIVERGENCE" })?;
        }
    }
    Ok(())
}

