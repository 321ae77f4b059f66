//! Steady-state genetic search for per-layer precision vectors under an
//! average bit-width budget.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fuse::is_fused;
use crate::graph::ModelGraph;
use crate::precision::{Precision, PrecisionConfig};
use crate::quant::model::{
    calibrate_activations, quantize_model_with_scales, ActivationScales, CalibrationMethod,
};
use crate::tensor::Tensor;

/// Largest layer count the exhaustive oracle accepts.
pub const ORACLE_MAX_LAYERS: usize = 8;

/// Rejection attempts per random individual before falling back to repair.
const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Population size `N`.
    pub population: usize,
    /// Mutation probability `p_m`.
    pub mutation_rate: f64,
    /// Tournament sample size `C`.
    pub tournament: usize,
    /// Average bit-width budget `B`.
    pub budget: f64,
    /// Offspring insertion limit `G`.
    pub generations: usize,
    pub seed: u64,
    /// Number of calibration samples used by the fitness, `L`.
    pub fitness_samples: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 16,
            mutation_rate: 0.2,
            tournament: 4,
            budget: 8.0,
            generations: 300,
            seed: 0,
            fitness_samples: 8,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("SearchConfig", msg));
        if self.tournament < 2 || self.tournament > self.population {
            return bad(format!(
                "tournament size {} must satisfy 2 <= C <= N = {}",
                self.tournament, self.population
            ));
        }
        if !(self.mutation_rate > 0.0 && self.mutation_rate <= 1.0) {
            return bad(format!("mutation rate {} must be in (0, 1]", self.mutation_rate));
        }
        if !(4.0..=16.0).contains(&self.budget) {
            return bad(format!("budget {} must be in [4, 16]", self.budget));
        }
        if self.fitness_samples == 0 {
            return bad("fitness sample size must be positive".into());
        }
        Ok(())
    }

    /// Stagnation limit: 20% of the insertion budget, at least one.
    pub fn patience(&self) -> usize {
        (self.generations / 5).max(1)
    }
}

/// `-(1/L) * sum_i ||q_i - r_i||^2` over two `[L, D]` descriptor batches.
pub fn descriptor_fitness(q: &Tensor, r: &Tensor) -> Result<f64> {
    if q.shape() != r.shape() || q.shape().len() != 2 {
        return Err(Error::invalid(
            "fitness",
            format!("descriptor batches {:?} and {:?} differ", q.shape(), r.shape()),
        ));
    }
    let l = q.shape()[0];
    if l == 0 {
        return Err(Error::invalid("fitness", "empty sample"));
    }
    let sq: f64 = q
        .as_f32()?
        .iter()
        .zip(r.as_f32()?)
        .map(|(a, b)| {
            let d = f64::from(*a) - f64::from(*b);
            d * d
        })
        .sum();
    Ok(-sq / l as f64)
}

/// Evaluates precision vectors against the f32 model on a fixed sample.
/// Activation scales are calibrated once from f32 statistics and results
/// are memoized per configuration.
pub struct FitnessEvaluator<'a> {
    model: &'a ModelGraph,
    sample: Tensor,
    reference: Tensor,
    scales: ActivationScales,
    method: CalibrationMethod,
    layers: usize,
    cache: Mutex<HashMap<PrecisionConfig, f64>>,
}

impl<'a> FitnessEvaluator<'a> {
    /// `calib` (`[L, C, H, W]`) is used both for activation statistics and as
    /// the fitness sample.
    pub fn new(model: &'a ModelGraph, calib: &Tensor, method: CalibrationMethod) -> Result<Self> {
        Self::with_sample(model, calib, calib, method)
    }

    /// Separate calibration batch and fitness sample.
    pub fn with_sample(
        model: &'a ModelGraph,
        calib: &Tensor,
        sample: &Tensor,
        method: CalibrationMethod,
    ) -> Result<Self> {
        if !is_fused(model) {
            return Err(Error::invalid("fitness", "model must be fused"));
        }
        if sample.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::invalid("fitness", "empty sample"));
        }
        let scales = calibrate_activations(model, calib, method)?;
        let reference = model.forward(sample)?;
        Ok(FitnessEvaluator {
            model,
            sample: sample.clone(),
            reference,
            scales,
            method,
            layers: model.quantizable_layers().len(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Number of quantizable layers `T`.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn model(&self) -> &ModelGraph {
        self.model
    }

    /// Distinct configurations evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.cache.lock().expect("fitness cache poisoned").len()
    }

    pub fn evaluate(&self, config: &PrecisionConfig) -> Result<f64> {
        if let Some(&f) = self.cache.lock().expect("fitness cache poisoned").get(config) {
            return Ok(f);
        }
        let qm = quantize_model_with_scales(self.model, config, Some(&self.scales), self.method)?;
        let f = descriptor_fitness(&qm.forward(&self.sample)?, &self.reference)?;
        self.cache
            .lock()
            .expect("fitness cache poisoned")
            .insert(config.clone(), f);
        Ok(f)
    }

    /// Evaluates several configurations concurrently.
    pub fn evaluate_many(&self, configs: &[PrecisionConfig]) -> Result<Vec<f64>> {
        configs.par_iter().map(|c| self.evaluate(c)).collect()
    }
}

/// Per-layer sensitivity `sigma_i >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile(pub Vec<f64>);

impl SensitivityProfile {
    pub fn uniform(layers: usize) -> Self {
        SensitivityProfile(vec![0.0; layers])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `sigma_i = -fitness(all-16 except layer i at 4 bits)`.
pub fn sensitivity_profile(eval: &FitnessEvaluator<'_>) -> Result<SensitivityProfile> {
    let t = eval.layers();
    let configs: Vec<PrecisionConfig> = (0..t)
        .map(|i| {
            let mut c = PrecisionConfig::uniform(Precision::Fp16, t);
            c.0[i] = Precision::Int4;
            c
        })
        .collect();
    let f = eval.evaluate_many(&configs)?;
    Ok(SensitivityProfile(f.into_iter().map(|v| (-v).max(0.0)).collect()))
}

/// Lowers the least sensitive layer above 4 bits by one step until the mean
/// bit-width fits the budget. Ties go to the later layer.
pub fn repair(config: &mut PrecisionConfig, profile: &SensitivityProfile, budget: f64) {
    while !config.satisfies(budget) {
        let mut pick: Option<usize> = None;
        for (i, p) in config.0.iter().enumerate() {
            if p.lower().is_none() {
                continue;
            }
            let s = profile.0.get(i).copied().unwrap_or(0.0);
            match pick {
                Some(j) if profile.0.get(j).copied().unwrap_or(0.0) < s => {}
                _ => pick = Some(i),
            }
        }
        match pick {
            Some(i) => config.0[i] = config.0[i].lower().expect("above 4 bits"),
            None => return,
        }
    }
}

/// Sensitivity-tilted categorical weights over 4, 8 and 16 bits.
pub fn mutation_weights(sigma: f64) -> [f64; 3] {
    let logits = Precision::ALL.map(|p| sigma * (f64::from(p.bits()) - 4.0) / 12.0);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

pub fn mutate<R: Rng + ?Sized>(
    config: &PrecisionConfig,
    mutation_rate: f64,
    profile: &SensitivityProfile,
    budget: f64,
    rng: &mut R,
) -> PrecisionConfig {
    let mut out = config.clone();
    if out.is_empty() || rng.random::<f64>() >= mutation_rate {
        return out;
    }
    let i = rng.random_range(0..out.len());
    let w = mutation_weights(profile.0.get(i).copied().unwrap_or(0.0));
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut choice = Precision::ALL[2];
    for (p, wi) in Precision::ALL.iter().zip(w) {
        acc += wi;
        if u < acc {
            choice = *p;
            break;
        }
    }
    out.0[i] = choice;
    repair(&mut out, profile, budget);
    out
}

/// `x1[..k] ++ x2[k..]`.
pub fn crossover_at(x1: &PrecisionConfig, x2: &PrecisionConfig, k: usize) -> Result<PrecisionConfig> {
    if x1.len() != x2.len() {
        return Err(Error::ShapeMismatch {
            op: "crossover",
            dim: "parent length",
            expected: x1.len(),
            actual: x2.len(),
        });
    }
    let k = k.min(x1.len());
    Ok(PrecisionConfig(
        x1.0[..k].iter().chain(&x2.0[k..]).copied().collect(),
    ))
}

/// Single-point crossover with the cut drawn uniformly from `[1, T-1]`;
/// with one layer the child is `x1`.
pub fn crossover<R: Rng + ?Sized>(
    x1: &PrecisionConfig,
    x2: &PrecisionConfig,
    rng: &mut R,
) -> Result<PrecisionConfig> {
    let t = x1.len();
    let k = if t < 2 { t } else { rng.random_range(1..t) };
    crossover_at(x1, x2, k)
}

/// Largest precision whose bit-width does not exceed the budget.
pub fn anchor_precision(budget: f64) -> Precision {
    Precision::ALL
        .iter()
        .rev()
        .copied()
        .find(|p| f64::from(p.bits()) <= budget)
        .unwrap_or(Precision::Int4)
}

fn random_feasible<R: Rng + ?Sized>(
    t: usize,
    budget: f64,
    profile: &SensitivityProfile,
    rng: &mut R,
) -> PrecisionConfig {
    let draw = |rng: &mut R| {
        PrecisionConfig((0..t).map(|_| Precision::ALL[rng.random_range(0..3)]).collect())
    };
    for _ in 0..MAX_REJECTIONS {
        let c = draw(rng);
        if c.satisfies(budget) {
            return c;
        }
    }
    let mut c = draw(rng);
    repair(&mut c, profile, budget);
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: PrecisionConfig,
    pub best_fitness: f64,
    /// Best-so-far fitness after initialization and after every step.
    pub trace: Vec<f64>,
    /// Every candidate whose fitness was requested, in order.
    pub evaluated: Vec<(PrecisionConfig, f64)>,
    /// Population size observed after every step.
    pub population_sizes: Vec<usize>,
    pub insertions: usize,
    pub profile: SensitivityProfile,
}

/// Builds an evaluator on the first `fitness_samples` calibration inputs and
/// runs the search.
pub fn run_search(model: &ModelGraph, calib: &Tensor, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let n = calib.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("run_search", "empty calibration sample"));
    }
    let l = cfg.fitness_samples.min(n);
    let per: usize = calib.shape()[1..].iter().product();
    let mut shape = calib.shape().to_vec();
    shape[0] = l;
    let sample = Tensor::from_f32(&shape, calib.as_f32()?[..l * per].to_vec())?;
    let eval = FitnessEvaluator::with_sample(model, calib, &sample, CalibrationMethod::MaxAbs)?;
    run_search_with(&eval, cfg)
}

/// Steady-state GA: each step samples `C` individuals, breeds the two
/// fittest, removes the tournament's worst from the population and inserts
/// the mutated offspring.
pub fn run_search_with(eval: &FitnessEvaluator<'_>, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let t = eval.layers();
    if t == 0 {
        return Err(Error::invalid("run_search", "model has no quantizable layers"));
    }
    let profile = sensitivity_profile(eval)?;
    let mut evaluated = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut population = vec![PrecisionConfig::uniform(anchor_precision(cfg.budget), t)];
    while population.len() < cfg.population {
        population.push(random_feasible(t, cfg.budget, &profile, &mut rng));
    }
    let mut fitness = eval.evaluate_many(&population)?;
    evaluated.extend(population.iter().cloned().zip(fitness.iter().copied()));

    let (mut best, mut best_fitness) = (population[0].clone(), fitness[0]);
    for (c, &f) in population.iter().zip(&fitness) {
        if f > best_fitness {
            best = c.clone();
            best_fitness = f;
        }
    }
    let mut trace = vec![best_fitness];
    let mut population_sizes = Vec::new();
    let mut stagnant = 0;
    let mut insertions = 0;

    for step in 0..cfg.generations {
        let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
        srng.set_stream(step as u64 + 1);
        let mut tour: Vec<usize> = sample(&mut srng, population.len(), cfg.tournament).into_vec();
        // Fittest first; equal fitness keeps the lower index first.
        tour.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
        let (p1, p2, worst) = (tour[0], tour[1], tour[tour.len() - 1]);

        let mut child = crossover(&population[p1], &population[p2], &mut srng)?;
        repair(&mut child, &profile, cfg.budget);
        let child = mutate(&child, cfg.mutation_rate, &profile, cfg.budget, &mut srng);
        let f = eval.evaluate(&child)?;
        evaluated.push((child.clone(), f));

        population[worst] = child.clone();
        fitness[worst] = f;
        insertions += 1;
        population_sizes.push(population.len());

        if f > best_fitness {
            best = child;
            best_fitness = f;
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        trace.push(best_fitness);
        if stagnant >= cfg.patience() {
            break;
        }
    }
    Ok(SearchResult {
        best,
        best_fitness,
        trace,
        evaluated,
        population_sizes,
        insertions,
        profile,
    })
}

/// All configurations over `{4, 8, 16}` of length `t` with mean bit-width at
/// most `budget`, in lexicographic order.
pub fn enumerate_feasible(t: usize, budget: f64) -> Result<Vec<PrecisionConfig>> {
    if t > ORACLE_MAX_LAYERS {
        return Err(Error::invalid(
            "exhaustive_oracle",
            format!("{t} layers exceeds the limit of {ORACLE_MAX_LAYERS}"),
        ));
    }
    let total = 3usize.pow(t as u32);
    Ok((0..total)
        .map(|mut code| {
            let mut v = vec![Precision::Int4; t];
            for slot in v.iter_mut().rev() {
                *slot = Precision::ALL[code % 3];
                code /= 3;
            }
            PrecisionConfig(v)
        })
        .filter(|c| c.satisfies(budget))
        .collect())
}

/// Best feasible configuration by brute force. Ties prefer the lower mean
/// bit-width, then the lexicographically smaller vector.
pub fn exhaustive_oracle(eval: &FitnessEvaluator<'_>, budget: f64) -> Result<(PrecisionConfig, f64)> {
    let configs = enumerate_feasible(eval.layers(), budget)?;
    if configs.is_empty() {
        return Err(Error::invalid("exhaustive_oracle", "no feasible configuration"));
    }
    let f = eval.evaluate_many(&configs)?;
    let mut best = 0;
    for i in 1..configs.len() {
        let better = f[i] > f[best]
            || (f[i] == f[best]
                && (configs[i].total_bits(), &configs[i]) < (configs[best].total_bits(), &configs[best]));
        if better {
            best = i;
        }
    }
    Ok((configs[best].clone(), f[best]))
}
