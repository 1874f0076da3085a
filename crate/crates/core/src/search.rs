//! Evolutionary subnet search: budget-filtered perplexity fitness, elitist
//! selection, and three offspring kinds per generation (mild mutants,
//! two-parent crossovers, and heavy mutants that restart exploration).
//!
//! Every offspring owns a counter-derived random stream keyed by
//! (run seed, generation, offspring index), so results are independent of
//! worker count and evaluation order.

use crate::error::{Error, Result};
use crate::genome::{
    crossover, mutate_genome, validate, Genome, GenomeMeta, MutationParams, SearchSpace,
    SelectionMask,
};
use crate::model::{
    full_block_param_count, param_count, perplexity, CountScope, ModelConfig, ModelWeights,
};
use crate::util::derive_rng_indexed;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One member of the population.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub genome: Genome,
    /// Masked-model perplexity; None until evaluated or when rejected.
    pub fitness: Option<f64>,
    /// True when the budget filter excluded this candidate unevaluated.
    pub rejected: bool,
    /// Blocks-only retained parameters.
    pub param_count: u64,
    pub generation: usize,
}

/// Search hyperparameters. The three probability pairs follow the
/// exploration schedule: `p_m0`/`p_s0` drive initialization and the heavy
/// offspring, `p_m`/`p_s` the mild ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub elites: usize,
    pub mutation_offspring: usize,
    pub crossover_offspring: usize,
    pub generations: usize,
    pub p_d: f64,
    pub p_s: f64,
    pub p_m: f64,
    pub p_s0: f64,
    pub p_m0: f64,
    pub alpha: f64,
    pub eta: usize,
    pub eval_sequences: usize,
    pub eval_seq_len: usize,
    pub seed: u64,
    pub space: SearchSpace,
}

impl SearchConfig {
    /// Default schedule: population 100, 10 elites, 50 mild + 30 crossover +
    /// 20 heavy offspring, 50 generations.
    pub fn toy_default(space: SearchSpace, seed: u64) -> Self {
        SearchConfig {
            population: 100,
            elites: 10,
            mutation_offspring: 50,
            crossover_offspring: 30,
            generations: 50,
            p_d: 0.1,
            p_s: 0.1,
            p_m: 0.3,
            p_s0: 0.3,
            p_m0: 0.6,
            alpha: 0.8,
            eta: 1000,
            eval_sequences: 8,
            eval_seq_len: 32,
            seed,
            space,
        }
    }

    pub fn mild_params(&self) -> MutationParams {
        MutationParams {
            p_d: self.p_d,
            p_s: self.p_s,
            p_m: self.p_m,
            alpha: self.alpha,
            eta: self.eta,
        }
    }

    pub fn heavy_params(&self) -> MutationParams {
        MutationParams {
            p_d: 0.0,
            p_s: self.p_s0,
            p_m: self.p_m0,
            alpha: self.alpha,
            eta: self.eta,
        }
    }
}

/// Inclusive blocks-only parameter window for the budget filter.
pub fn budget_window(config: &ModelConfig, space: &SearchSpace) -> (u64, u64) {
    let full = full_block_param_count(config) as f64;
    let lo = ((space.target_ratio - space.budget_tol) * full).ceil().max(0.0) as u64;
    let hi = ((space.target_ratio + space.budget_tol) * full).floor() as u64;
    (lo, hi)
}

/// Budget-filter then score: candidates outside the window are marked
/// rejected and never reach the model.
pub fn evaluate_candidate(
    candidate: &mut Candidate,
    weights: &ModelWeights,
    config: &ModelConfig,
    space: &SearchSpace,
    eval_set: &[Vec<u32>],
) -> Result<()> {
    candidate.param_count = param_count(config, &candidate.genome, CountScope::BlocksOnly);
    let (lo, hi) = budget_window(config, space);
    if candidate.param_count < lo || candidate.param_count > hi {
        candidate.rejected = true;
        candidate.fitness = None;
        return Ok(());
    }
    candidate.rejected = false;
    if candidate.fitness.is_none() {
        candidate.fitness = Some(perplexity(weights, config, eval_set, Some(&candidate.genome))?);
    }
    Ok(())
}

/// Selection order: fitness ascending, then fewer parameters, then the
/// structural fingerprint. Total and deterministic.
fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    match (a.fitness, b.fitness) {
        (Some(fa), Some(fb)) => {
            fa.total_cmp(&fb).then(a.param_count.cmp(&b.param_count)).then_with(|| {
                a.genome.structural_fingerprint().cmp(&b.genome.structural_fingerprint())
            })
        }
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    }
}

/// One generation's log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub best_fitness: f64,
    pub median_fitness: f64,
    pub best_param_count: u64,
    pub best_fingerprint: String,
    pub evaluated: usize,
    pub rejected: usize,
    pub elite_fingerprints: Vec<String>,
}

/// Whole-run log, one line per generation (JSONL on disk).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchLog {
    pub generations: Vec<GenerationLog>,
}

impl SearchLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.generations {
            out.push_str(&serde_json::to_string(g).expect("log line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<SearchLog> {
        let mut generations = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            generations.push(serde_json::from_str(line)?);
        }
        Ok(SearchLog { generations })
    }

    pub fn best_curve(&self) -> Vec<f64> {
        self.generations.iter().map(|g| g.best_fitness).collect()
    }
}

/// Final state of a search run.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub elites: Vec<Candidate>,
    pub log: SearchLog,
    /// Fitness of the starting genome on the same evaluation set (None if it
    /// fell outside the budget window).
    pub start_fitness: Option<f64>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn log_generation(generation: usize, pool: &[Candidate], elites: &[Candidate]) -> GenerationLog {
    let best = &elites[0];
    let mut fits: Vec<f64> = pool.iter().filter_map(|c| c.fitness).collect();
    fits.sort_by(|a, b| a.total_cmp(b));
    GenerationLog {
        generation,
        best_fitness: best.fitness.expect("elites are evaluated"),
        median_fitness: median(&fits),
        best_param_count: best.param_count,
        best_fingerprint: best.genome.structural_fingerprint(),
        evaluated: pool.iter().filter(|c| !c.rejected).count(),
        rejected: pool.iter().filter(|c| c.rejected).count(),
        elite_fingerprints: elites.iter().map(|c| c.genome.structural_fingerprint()).collect(),
    }
}

fn evaluate_all(
    mut batch: Vec<Candidate>,
    weights: &ModelWeights,
    config: &ModelConfig,
    space: &SearchSpace,
    eval_set: &[Vec<u32>],
) -> Result<Vec<Candidate>> {
    batch
        .par_iter_mut()
        .map(|c| evaluate_candidate(c, weights, config, space, eval_set))
        .collect::<Result<Vec<()>>>()?;
    Ok(batch)
}

fn select_elites(pool: &[Candidate], k: usize) -> Result<Vec<Candidate>> {
    let mut alive: Vec<&Candidate> = pool.iter().filter(|c| c.fitness.is_some()).collect();
    if alive.is_empty() {
        return Err(Error::NoSatisfyingCandidate);
    }
    alive.sort_by(|a, b| candidate_order(a, b));
    Ok(alive.into_iter().take(k).cloned().collect())
}

/// Produce the next generation's offspring from the current elites.
/// Offspring index order: mild mutants, crossovers, heavy mutants.
fn make_offspring(
    elites: &[Candidate],
    config: &SearchConfig,
    unit: usize,
    generation: usize,
) -> Vec<Candidate> {
    let n = config.population;
    let n_mut = config.mutation_offspring.min(n);
    let n_cross = config.crossover_offspring.min(n - n_mut);
    let mild = config.mild_params();
    let heavy = config.heavy_params();
    (0..n)
        .map(|ix| {
            let mut rng =
                derive_rng_indexed(config.seed, "offspring", &[generation as u64, ix as u64]);
            let mut genome = if ix < n_mut {
                let parent = &elites[rng.gen_range(0..elites.len())];
                mutate_genome(&parent.genome, &mild, &config.space, unit, &mut rng)
            } else if ix < n_mut + n_cross && elites.len() >= 2 {
                let a = rng.gen_range(0..elites.len());
                let mut b = rng.gen_range(0..elites.len() - 1);
                if b >= a {
                    b += 1;
                }
                crossover(&elites[a].genome, &elites[b].genome, &config.space, &mut rng)
                    .expect("elites share one config")
            } else {
                let parent = &elites[rng.gen_range(0..elites.len())];
                mutate_genome(&parent.genome, &heavy, &config.space, unit, &mut rng)
            };
            let lineage = if ix < n_mut {
                "mutation"
            } else if ix < n_mut + n_cross && elites.len() >= 2 {
                "crossover"
            } else {
                "heavy-mutation"
            };
            genome.meta = GenomeMeta {
                seed: config.seed,
                lineage: format!("gen{generation}.{lineage}"),
                init_ratio: genome.meta.init_ratio,
            };
            Candidate { genome, fitness: None, rejected: false, param_count: 0, generation }
        })
        .collect()
}

/// Run the full search from a starting genome. Elites always survive into
/// the next selection pool, so the best fitness never worsens.
pub fn run_search(
    weights: &ModelWeights,
    config: &ModelConfig,
    start: &Genome,
    eval_set: &[Vec<u32>],
    search: &SearchConfig,
) -> Result<SearchOutcome> {
    assert!(search.elites >= 1 && search.population >= search.elites);
    let unit = if config.rotary() { 2 } else { 1 };
    let issues = validate(start, config, &search.space);
    if !issues.is_empty() {
        return Err(Error::InvalidGenome(issues.join("; ")));
    }

    // generation 0: the start genome plus heavy mutants of it
    let heavy = search.heavy_params();
    let mut gen0: Vec<Candidate> = Vec::with_capacity(search.population);
    gen0.push(Candidate {
        genome: start.clone(),
        fitness: None,
        rejected: false,
        param_count: 0,
        generation: 0,
    });
    for ix in 1..search.population {
        let mut rng = derive_rng_indexed(search.seed, "offspring", &[0, ix as u64]);
        let mut genome = mutate_genome(start, &heavy, &search.space, unit, &mut rng);
        genome.meta = GenomeMeta {
            seed: search.seed,
            lineage: "gen0.heavy-mutation".to_string(),
            init_ratio: genome.meta.init_ratio,
        };
        gen0.push(Candidate {
            genome,
            fitness: None,
            rejected: false,
            param_count: 0,
            generation: 0,
        });
    }
    let pool = evaluate_all(gen0, weights, config, &search.space, eval_set)?;
    let start_fitness = pool[0].fitness;
    let mut elites = select_elites(&pool, search.elites)?;
    let mut log = SearchLog::default();
    log.generations.push(log_generation(0, &pool, &elites));

    for generation in 1..=search.generations {
        let offspring = make_offspring(&elites, search, unit, generation);
        let mut pool = evaluate_all(offspring, weights, config, &search.space, eval_set)?;
        pool.extend(elites.iter().cloned());
        elites = select_elites(&pool, search.elites)?;
        log.generations.push(log_generation(generation, &pool, &elites));
    }
    Ok(SearchOutcome { best: elites[0].clone(), elites, log, start_fitness })
}

/// Ablation start point: random masks at the same snapped target ratio the
/// importance-guided initializer would use, with no scores involved.
pub fn random_genome(config: &ModelConfig, space: &SearchSpace, seed: u64) -> Genome {
    let unit = if config.rotary() { 2 } else { 1 };
    let mut rng = derive_rng_indexed(seed, "random-init", &[]);
    let gamma_attn = SearchSpace::snap(&space.head_ratio_grid, space.target_ratio);
    let gamma_mlp = SearchSpace::snap(&space.mlp_ratio_grid, space.target_ratio);
    let head_units = config.head_dim / unit;
    let keep_heads = ((gamma_attn * head_units as f64).ceil() as usize).clamp(1, head_units);
    let keep_mlp = ((gamma_mlp * config.d_mlp as f64).ceil() as usize).clamp(1, config.d_mlp);
    let blocks = (0..config.depth)
        .map(|_| {
            let head_masks = (0..config.n_heads)
                .map(|_| {
                    let units = sample(&mut rng, head_units, keep_heads).into_vec();
                    let mut bits = vec![false; config.head_dim];
                    for u in units {
                        for b in bits.iter_mut().skip(u * unit).take(unit) {
                            *b = true;
                        }
                    }
                    SelectionMask::from_bits(bits)
                })
                .collect();
            let kept = sample(&mut rng, config.d_mlp, keep_mlp).into_vec();
            crate::genome::BlockGenome {
                kept: true,
                head_masks,
                mlp_mask: SelectionMask::from_kept_indices(config.d_mlp, &kept),
                head_ratios: vec![gamma_attn; config.n_heads],
                mlp_ratio: gamma_mlp,
            }
        })
        .collect();
    Genome {
        blocks,
        config_fingerprint: config.fingerprint(),
        meta: GenomeMeta {
            seed,
            lineage: "random-init".to_string(),
            init_ratio: Some(space.target_ratio),
        },
    }
}
