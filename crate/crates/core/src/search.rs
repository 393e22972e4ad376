//! Joint architecture and schedule search.
//!
//! Candidates are drawn from a MobileNetV2-style template: a stem, a fixed
//! 16-channel block, six searchable stages and a head. Every candidate is
//! scheduled with [`best_schedule`]; only feasible ones get a finite fitness.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BorderMode;
use crate::net::{scale_channels, BlockSpec, NetworkSpec};
use crate::schedule::{best_schedule, MemoryConstraint, PatchPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageTemplate {
    pub channels: u32,
    pub stride: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    pub kernel_choices: Vec<u32>,
    pub expansion_choices: Vec<u32>,
    pub depth_choices: Vec<u32>,
    /// Width multipliers in percent.
    pub width_choices: Vec<u32>,
    pub resolution_choices: Vec<u32>,
    pub stem_channels: u32,
    pub first_block_channels: u32,
    pub stages: Vec<StageTemplate>,
    pub head_channels: u32,
    pub input_channels: u32,
    pub bytes_per_element: u32,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let stage = |channels, stride| StageTemplate { channels, stride };
        SearchSpace {
            kernel_choices: vec![3, 5, 7],
            expansion_choices: vec![3, 4, 6],
            depth_choices: vec![2, 3, 4],
            width_choices: vec![50, 75, 100],
            resolution_choices: vec![96, 128, 160, 192, 224, 256],
            stem_channels: 32,
            first_block_channels: 16,
            stages: vec![
                stage(24, 2),
                stage(40, 2),
                stage(80, 2),
                stage(96, 1),
                stage(192, 2),
                stage(320, 1),
            ],
            head_channels: 1280,
            input_channels: 3,
            bytes_per_element: 1,
        }
    }
}

impl SearchSpace {
    pub fn max_depth(&self) -> usize {
        self.depth_choices.iter().copied().max().unwrap_or(0) as usize
    }

    /// Block slots of the searchable stages (`stages * max_depth`).
    pub fn slots(&self) -> usize {
        self.stages.len() * self.max_depth()
    }

    /// Width genes: stem, first block, every slot, head.
    pub fn width_genes(&self) -> usize {
        self.slots() + 3
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("kernel_choices", &self.kernel_choices),
            ("expansion_choices", &self.expansion_choices),
            ("depth_choices", &self.depth_choices),
            ("width_choices", &self.width_choices),
            ("resolution_choices", &self.resolution_choices),
        ];
        for (name, list) in lists {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::field(name, "must be non-empty and positive"));
            }
        }
        if self.stages.is_empty() {
            return Err(Error::field("stages", "must not be empty"));
        }
        Ok(())
    }
}

/// One point of the search space. Genes of slots beyond a stage's depth are
/// kept but inactive.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genes {
    pub kernels: Vec<u32>,
    pub expansions: Vec<u32>,
    pub depths: Vec<u32>,
    pub widths: Vec<u32>,
    pub resolution: u32,
}

fn join(out: &mut String, tag: char, values: &[u32]) {
    out.push(tag);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
}

impl fmt::Display for Genes {
    /// Canonical key, e.g. `k3,5,.../e6,.../d2,.../w100,.../r224`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        join(&mut s, 'k', &self.kernels);
        s.push('/');
        join(&mut s, 'e', &self.expansions);
        s.push('/');
        join(&mut s, 'd', &self.depths);
        s.push('/');
        join(&mut s, 'w', &self.widths);
        let _ = write!(s, "/r{}", self.resolution);
        f.write_str(&s)
    }
}

fn pick<R: Rng>(rng: &mut R, choices: &[u32]) -> u32 {
    *choices.choose(rng).expect("choices are non-empty")
}

/// Uniform, independent choice for every gene.
pub fn sample<R: Rng>(space: &SearchSpace, rng: &mut R) -> Genes {
    let slots = space.slots();
    Genes {
        kernels: (0..slots).map(|_| pick(rng, &space.kernel_choices)).collect(),
        expansions: (0..slots).map(|_| pick(rng, &space.expansion_choices)).collect(),
        depths: (0..space.stages.len()).map(|_| pick(rng, &space.depth_choices)).collect(),
        widths: (0..space.width_genes()).map(|_| pick(rng, &space.width_choices)).collect(),
        resolution: pick(rng, &space.resolution_choices),
    }
}

/// Builds the network a gene set describes.
pub fn materialize(space: &SearchSpace, genes: &Genes) -> Result<NetworkSpec> {
    let slots = space.slots();
    if genes.kernels.len() != slots
        || genes.expansions.len() != slots
        || genes.depths.len() != space.stages.len()
        || genes.widths.len() != space.width_genes()
    {
        return Err(Error::field("genes", "gene vector lengths do not match the search space"));
    }
    let w = &genes.widths;
    let d = space.max_depth();
    let mut blocks = vec![
        BlockSpec::stem(3, scale_channels(space.stem_channels, w[0])),
        BlockSpec::ir(1, 3, 1, scale_channels(space.first_block_channels, w[1])),
    ];
    for (s, stage) in space.stages.iter().enumerate() {
        let depth = genes.depths[s] as usize;
        if depth == 0 || depth > d {
            return Err(Error::field(format!("genes.depths[{s}]"), "out of range"));
        }
        for j in 0..depth {
            let slot = s * d + j;
            blocks.push(BlockSpec::ir(
                genes.expansions[slot],
                genes.kernels[slot],
                if j == 0 { stage.stride } else { 1 },
                scale_channels(stage.channels, w[2 + slot]),
            ));
        }
    }
    blocks.push(BlockSpec::head(scale_channels(space.head_channels, w[slots + 2])));
    let net = NetworkSpec {
        name: String::from("candidate"),
        input_resolution: genes.resolution,
        input_channels: space.input_channels,
        bytes_per_element: space.bytes_per_element,
        blocks,
    };
    net.validate()?;
    Ok(net)
}

/// Scores a feasible candidate. Must be a pure function of its arguments.
pub trait FitnessProxy {
    fn fitness(&self, genes: &Genes, net: &NetworkSpec, plan: &PatchPlan) -> f64;
}

/// Capacity proxy: total (layer-wise) MACs of the network.
#[derive(Clone, Copy, Debug, Default)]
pub struct MacsProxy;

impl FitnessProxy for MacsProxy {
    fn fitness(&self, _: &Genes, _: &NetworkSpec, plan: &PatchPlan) -> f64 {
        plan.macs_layer_mode as f64
    }
}

/// Looks fitness up by the canonical gene string; missing keys score `-inf`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TableProxy {
    pub table: BTreeMap<String, f64>,
}

impl FitnessProxy for TableProxy {
    fn fitness(&self, genes: &Genes, _: &NetworkSpec, _: &PatchPlan) -> f64 {
        let key = format!("{genes}");
        self.table.get(&key).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub genes: Genes,
    pub schedule: Option<PatchPlan>,
    pub fitness: f64,
    pub feasible: bool,
}

/// Materializes and schedules `genes`. An unschedulable candidate is
/// returned with `feasible == false` and fitness `-inf`.
pub fn evaluate(
    space: &SearchSpace,
    genes: &Genes,
    constraint: &MemoryConstraint,
    proxy: &dyn FitnessProxy,
) -> Result<Candidate> {
    let net = materialize(space, genes)?;
    match best_schedule(&net, constraint, BorderMode::default()) {
        Ok(plan) => Ok(Candidate {
            genes: genes.clone(),
            fitness: proxy.fitness(genes, &net, &plan),
            schedule: Some(plan),
            feasible: true,
        }),
        Err(Error::Infeasible) => Ok(Candidate {
            genes: genes.clone(),
            schedule: None,
            fitness: f64::NEG_INFINITY,
            feasible: false,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionConfig {
    pub population: usize,
    pub survivors: usize,
    pub crossover_offspring: usize,
    pub mutation_offspring: usize,
    pub mutation_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Random draws allowed while filling generation 0 with feasible candidates.
    pub seeding_attempts: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 100,
            survivors: 20,
            crossover_offspring: 50,
            mutation_offspring: 50,
            mutation_rate: 0.1,
            iterations: 30,
            seed: 0,
            seeding_attempts: 10_000,
        }
    }
}

impl EvolutionConfig {
    /// Smaller setting with the same proportions, for quick runs.
    pub fn reduced(seed: u64) -> Self {
        EvolutionConfig {
            population: 40,
            survivors: 8,
            crossover_offspring: 20,
            mutation_offspring: 20,
            iterations: 10,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::field("population", "must be positive"));
        }
        if self.survivors == 0 || self.survivors > self.population {
            return Err(Error::field("survivors", "must be between 1 and the population size"));
        }
        if self.crossover_offspring + self.mutation_offspring != self.population {
            return Err(Error::field(
                "crossover_offspring",
                "crossover and mutation offspring must add up to the population size",
            ));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::field("mutation_rate", "must be within [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationStats {
    pub generation: usize,
    /// Best fitness among the survivors carried in plus the new candidates.
    pub best_fitness: f64,
    /// Mean fitness over the generation's feasible candidates.
    pub mean_fitness: f64,
    pub feasible: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionResult {
    pub best: Candidate,
    pub history: Vec<GenerationStats>,
    pub evaluations: usize,
}

fn crossover<R: Rng>(a: &Genes, b: &Genes, rng: &mut R) -> Genes {
    let mix = |x: &[u32], y: &[u32], rng: &mut R| -> Vec<u32> {
        x.iter().zip(y).map(|(p, q)| if rng.gen_bool(0.5) { *p } else { *q }).collect()
    };
    Genes {
        kernels: mix(&a.kernels, &b.kernels, rng),
        expansions: mix(&a.expansions, &b.expansions, rng),
        depths: mix(&a.depths, &b.depths, rng),
        widths: mix(&a.widths, &b.widths, rng),
        resolution: if rng.gen_bool(0.5) { a.resolution } else { b.resolution },
    }
}

fn mutate<R: Rng>(space: &SearchSpace, g: &Genes, rate: f64, rng: &mut R) -> Genes {
    let redraw = |xs: &[u32], choices: &[u32], rng: &mut R| -> Vec<u32> {
        xs.iter()
            .map(|x| if rng.gen_bool(rate) { pick(rng, choices) } else { *x })
            .collect()
    };
    Genes {
        kernels: redraw(&g.kernels, &space.kernel_choices, rng),
        expansions: redraw(&g.expansions, &space.expansion_choices, rng),
        depths: redraw(&g.depths, &space.depth_choices, rng),
        widths: redraw(&g.widths, &space.width_choices, rng),
        resolution: if rng.gen_bool(rate) {
            pick(rng, &space.resolution_choices)
        } else {
            g.resolution
        },
    }
}

/// Descending by fitness; the sort is stable so equal candidates keep order.
fn rank(pool: &mut [Candidate]) {
    pool.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
}

fn stats(generation: usize, pool: &[Candidate], fresh: &[Candidate]) -> GenerationStats {
    let feasible: Vec<f64> = fresh.iter().filter(|c| c.feasible).map(|c| c.fitness).collect();
    let mean = if feasible.is_empty() {
        f64::NEG_INFINITY
    } else {
        feasible.iter().sum::<f64>() / feasible.len() as f64
    };
    GenerationStats {
        generation,
        best_fitness: pool.iter().map(|c| c.fitness).fold(f64::NEG_INFINITY, f64::max),
        mean_fitness: mean,
        feasible: feasible.len(),
    }
}

/// Evolutionary search. Generation 0 holds only feasible random candidates;
/// each later generation is ranked together with the previous survivors, the
/// top `survivors` are kept, and `crossover_offspring + mutation_offspring`
/// new candidates are bred from them.
pub fn evolve(
    space: &SearchSpace,
    constraint: &MemoryConstraint,
    config: &EvolutionConfig,
    proxy: &dyn FitnessProxy,
) -> Result<EvolutionResult> {
    space.validate()?;
    config.validate()?;
    constraint.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut evaluations = 0;

    let mut population = Vec::with_capacity(config.population);
    let mut attempts = 0;
    while population.len() < config.population {
        if attempts == config.seeding_attempts {
            return Err(Error::SeedingExhausted {
                attempts,
                found: population.len(),
            });
        }
        attempts += 1;
        let c = evaluate(space, &sample(space, &mut rng), constraint, proxy)?;
        evaluations += 1;
        if c.feasible {
            population.push(c);
        }
    }

    let mut history = vec![stats(0, &population, &population)];
    let mut survivors: Vec<Candidate> = Vec::new();
    for generation in 1..=config.iterations {
        let mut pool = core::mem::take(&mut survivors);
        pool.extend(population.drain(..));
        rank(&mut pool);
        pool.truncate(config.survivors);
        survivors = pool;

        let mut offspring = Vec::with_capacity(config.population);
        for _ in 0..config.crossover_offspring {
            let a = &survivors[rng.gen_range(0..survivors.len())];
            let b = &survivors[rng.gen_range(0..survivors.len())];
            offspring.push(crossover(&a.genes, &b.genes, &mut rng));
        }
        for _ in 0..config.mutation_offspring {
            let a = &survivors[rng.gen_range(0..survivors.len())];
            offspring.push(mutate(space, &a.genes, config.mutation_rate, &mut rng));
        }
        population = offspring
            .iter()
            .map(|g| evaluate(space, g, constraint, proxy))
            .collect::<Result<_>>()?;
        evaluations += population.len();

        let mut both: Vec<Candidate> = survivors.clone();
        both.extend(population.iter().cloned());
        history.push(stats(generation, &both, &population));
    }

    let mut everything = survivors;
    everything.extend(population);
    rank(&mut everything);
    let best = everything.into_iter().next().expect("population is non-empty");
    Ok(EvolutionResult {
        best,
        history,
        evaluations,
    })
}
