//! FLOPS-constrained evolutionary search over supernet paths.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::supernet::{sample_path, Path};
use crate::arch::CellChoice;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Upper bound on counted MACs for every candidate.
    pub flops_budget: u64,
    pub population_size: usize,
    pub max_iterations: usize,
    /// Hard cap on fitness evaluations.
    pub total_samples: usize,
    pub topk_retained: usize,
    /// Per-cell resampling probability for mutation children.
    pub mutation_prob: f64,
    /// Fraction of each generation produced by crossover; the rest by mutation.
    pub crossover_rate: f64,
    pub seed: u64,
    pub last_layer_independent: bool,
    /// Threads used for fitness evaluation. Candidates are generated before they
    /// are evaluated, so results do not depend on this value.
    pub workers: usize,
}

impl SearchConfig {
    pub fn with_budget(flops_budget: u64) -> Self {
        Self {
            flops_budget,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.population_size > 0
            && self.topk_retained > 0
            && self.population_size <= self.total_samples
            && self.topk_retained <= self.population_size
            && (0.0..=1.0).contains(&self.mutation_prob)
            && (0.0..=1.0).contains(&self.crossover_rate)
            && self.workers > 0;
        if !ok {
            return Err(Error::Contract(format!("inconsistent search config {self:?}")));
        }
        Ok(())
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            flops_budget: u64::MAX,
            population_size: 50,
            max_iterations: 20,
            total_samples: 1000,
            topk_retained: 10,
            mutation_prob: 0.1,
            crossover_rate: 0.5,
            seed: 0,
            last_layer_independent: true,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub path: Path,
    pub flops: u64,
    pub fitness: f64,
    /// Generation in which the candidate was evaluated (0 = initial population).
    pub iteration: usize,
}

/// Fitness descending, then cheaper first, then path order.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.flops.cmp(&b.flops))
        .then_with(|| a.path.cmp(&b.path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub config: SearchConfig,
    /// Every evaluated candidate, in evaluation order.
    pub archive: Vec<Candidate>,
    /// Best candidates overall, ranked.
    pub top: Vec<Candidate>,
    /// Best archived fitness after each generation.
    pub best_history: Vec<f64>,
    pub iterations: usize,
}

struct Generator<'a, F> {
    cells: usize,
    cfg: &'a SearchConfig,
    flops: &'a F,
    rng: ChaCha8Rng,
    seen: HashSet<Path>,
}

const RETRIES: usize = 10;
const FRESH_ATTEMPTS: usize = 1000;

impl<F: Fn(&Path) -> Result<u64>> Generator<'_, F> {
    /// Repairs `p` and returns its cost if it is new and within budget.
    fn admit(&mut self, mut p: Path) -> Result<Option<(Path, u64)>> {
        if self.cfg.last_layer_independent {
            p.repair_last_layer();
        }
        if self.seen.contains(&p) {
            return Ok(None);
        }
        let f = (self.flops)(&p)?;
        if f > self.cfg.flops_budget {
            return Ok(None);
        }
        self.seen.insert(p.clone());
        Ok(Some((p, f)))
    }

    fn fresh(&mut self) -> Result<Option<(Path, u64)>> {
        for _ in 0..FRESH_ATTEMPTS {
            let p = sample_path(self.cells, &mut self.rng);
            if let Some(c) = self.admit(p)? {
                return Ok(Some(c));
            }
        }
        Ok(None)
    }

    fn mutate(&mut self, parent: &Path) -> Path {
        let mut p = parent.clone();
        for c in &mut p.0 {
            if self.rng.random_bool(self.cfg.mutation_prob) {
                *c = CellChoice::ALL[self.rng.random_range(0..3)];
            }
        }
        p
    }

    fn crossover(&mut self, a: &Path, b: &Path) -> Path {
        if self.cells < 2 {
            return a.clone();
        }
        let cut = self.rng.random_range(1..self.cells);
        Path(a.0[..cut].iter().chain(&b.0[cut..]).copied().collect())
    }

    /// A child from `make`, retried a few times, then a fresh sample.
    fn child(&mut self, mut make: impl FnMut(&mut Self) -> Path) -> Result<Option<(Path, u64)>> {
        for _ in 0..RETRIES {
            let p = make(self);
            if let Some(c) = self.admit(p)? {
                return Ok(Some(c));
            }
        }
        self.fresh()
    }
}

fn evaluate(
    batch: Vec<(Path, u64)>,
    iteration: usize,
    workers: usize,
    fitness: &(impl Fn(&Path) -> Result<f64> + Sync),
) -> Result<Vec<Candidate>> {
    let scores: Vec<Result<f64>> = if workers <= 1 || batch.len() < 2 {
        batch.iter().map(|(p, _)| fitness(p)).collect()
    } else {
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|(p, _)| fitness(p)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("fitness worker panicked"))
                .collect()
        })
    };
    batch
        .into_iter()
        .zip(scores)
        .map(|((path, flops), fit)| {
            let fitness = fit?;
            if !fitness.is_finite() {
                return Err(Error::NonFiniteFitness { path: path.to_string() });
            }
            Ok(Candidate {
                path,
                flops,
                fitness,
                iteration,
            })
        })
        .collect()
}

/// Evolutionary search over paths of `cells` cells.
///
/// `flops` prices a path; `fitness` scores it (higher is better). Every
/// candidate is repaired (if configured), deduplicated against the archive, and
/// kept only if within budget.
pub fn evolutionary_search(
    cells: usize,
    cfg: &SearchConfig,
    flops: impl Fn(&Path) -> Result<u64>,
    fitness: impl Fn(&Path) -> Result<f64> + Sync,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let minimum = flops(&Path::uniform(CellChoice::Identity, cells))?;
    if minimum > cfg.flops_budget {
        return Err(Error::InfeasibleBudget {
            budget: cfg.flops_budget,
            minimum,
        });
    }
    let mut gen = Generator {
        cells,
        cfg,
        flops: &flops,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        seen: HashSet::new(),
    };

    let mut initial = Vec::new();
    while initial.len() < cfg.population_size {
        match gen.fresh()? {
            Some(c) => initial.push(c),
            None => break,
        }
    }
    if initial.is_empty() {
        initial.extend(gen.admit(Path::uniform(CellChoice::Identity, cells))?);
    }
    let mut archive = evaluate(initial, 0, cfg.workers, &fitness)?;
    let mut population = archive.clone();
    population.sort_by(rank_order);
    let mut best_history = vec![population[0].fitness];
    let mut iterations = 1;

    while iterations < cfg.max_iterations && archive.len() < cfg.total_samples {
        let parents: Vec<Path> = population
            .iter()
            .take(cfg.topk_retained)
            .map(|c| c.path.clone())
            .collect();
        let want = cfg.population_size.min(cfg.total_samples - archive.len());
        let n_cross = (want as f64 * cfg.crossover_rate).round() as usize;
        let mut children = Vec::with_capacity(want);
        for i in 0..want {
            let made = if i < n_cross {
                gen.child(|g| {
                    let a = &parents[g.rng.random_range(0..parents.len())];
                    let b = &parents[g.rng.random_range(0..parents.len())];
                    g.crossover(a, b)
                })?
            } else {
                gen.child(|g| {
                    let a = &parents[g.rng.random_range(0..parents.len())];
                    g.mutate(a)
                })?
            };
            match made {
                Some(c) => children.push(c),
                None => break,
            }
        }
        if children.is_empty() {
            break;
        }
        let evaluated = evaluate(children, iterations, cfg.workers, &fitness)?;
        archive.extend(evaluated.iter().cloned());
        population.extend(evaluated);
        population.sort_by(rank_order);
        population.truncate(cfg.population_size);
        best_history.push(population[0].fitness);
        iterations += 1;
    }

    let mut top = archive.clone();
    top.sort_by(rank_order);
    top.truncate(cfg.topk_retained);
    Ok(SearchOutcome {
        config: *cfg,
        archive,
        top,
        best_history,
        iterations,
    })
}

/// Scores every path of `cells` cells (after the same repair) and ranks those within budget.
pub fn exhaustive_search(
    cells: usize,
    flops_budget: u64,
    last_layer_independent: bool,
    flops: impl Fn(&Path) -> Result<u64>,
    fitness: impl Fn(&Path) -> Result<f64>,
) -> Result<Vec<Candidate>> {
    let total = 3usize.pow(cells as u32);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for code in 0..total {
        let mut rest = code;
        let mut p = Path(
            (0..cells)
                .map(|_| {
                    let c = CellChoice::ALL[rest % 3];
                    rest /= 3;
                    c
                })
                .collect(),
        );
        if last_layer_independent {
            p.repair_last_layer();
        }
        if !seen.insert(p.clone()) {
            continue;
        }
        let f = flops(&p)?;
        if f > flops_budget {
            continue;
        }
        let fitness = fitness(&p)?;
        out.push(Candidate {
            path: p,
            flops: f,
            fitness,
            iteration: 0,
        });
    }
    out.sort_by(rank_order);
    Ok(out)
}
