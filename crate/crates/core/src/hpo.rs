//! Hyperparameter search over a discrete grid: exhaustive enumeration,
//! Gaussian-process Bayesian optimisation with expected improvement, and a
//! coarse-then-refine combination of the two.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::training::{train, LabeledSample, TrainConfig};

pub const DEFAULT_INIT: usize = 8;
pub const DEFAULT_HPO_EPOCHS: usize = 10;
pub const LENGTH_SCALE: f64 = 0.5;
pub const SIGNAL_VARIANCE: f64 = 1.0;
pub const NOISE: f64 = 1e-4;

/// Candidate values per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: Vec<f64>,
    pub batch: Vec<usize>,
    pub dim: Vec<usize>,
    pub heads: Vec<usize>,
}

impl SearchSpace {
    pub fn table1() -> Self {
        Self {
            lr: vec![0.0005, 0.001, 0.005],
            batch: vec![128, 256, 384, 512],
            dim: vec![64, 128, 256],
            heads: vec![4, 8, 12],
        }
    }

    /// `table1` or a path to a JSON space.
    pub fn from_arg(arg: &str) -> Result<Self> {
        if arg == "table1" {
            return Ok(Self::table1());
        }
        let space: Self = serde_json::from_reader(File::open(arg)?)?;
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_empty()
            || self.batch.is_empty()
            || self.dim.is_empty()
            || self.heads.is_empty()
        {
            return Err(Error::Config(
                "every search axis needs at least one value".into(),
            ));
        }
        if self.lr.iter().any(|&v| !(v > 0.0 && v.is_finite()))
            || self.batch.contains(&0)
            || self.dim.contains(&0)
            || self.heads.contains(&0)
        {
            return Err(Error::Config("search values must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lr.len() * self.batch.len() * self.dim.len() * self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every point in lexicographic axis order (lr slowest, heads fastest).
    pub fn grid(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.len());
        for &lr in &self.lr {
            for &batch in &self.batch {
                for &dim in &self.dim {
                    for &heads in &self.heads {
                        out.push(Point {
                            lr,
                            batch,
                            dim,
                            heads,
                        });
                    }
                }
            }
        }
        out
    }

    /// Coordinates in `[0, 1]` per axis, learning rate on a log scale.
    pub fn normalize(&self, p: &Point) -> [f64; 4] {
        fn unit(v: f64, vals: impl Iterator<Item = f64> + Clone) -> f64 {
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.0
            }
        }
        [
            unit(p.lr.ln(), self.lr.iter().map(|v| v.ln())),
            unit(p.batch as f64, self.batch.iter().map(|&v| v as f64)),
            unit(p.dim as f64, self.dim.iter().map(|&v| v as f64)),
            unit(p.heads as f64, self.heads.iter().map(|&v| v as f64)),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub lr: f64,
    pub batch: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Point {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            dim: self.dim,
            heads: self.heads,
            ..base.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// Evaluation order, from 0.
    pub trial: usize,
    pub point: Point,
    /// Validation loss; `None` for failed trials.
    pub val_loss: Option<f64>,
    pub status: TrialStatus,
    pub seconds: f64,
}

pub const LEDGER_HEADER: &str = "trial,lr,batch,dim,heads,val_loss,status,seconds\n";

impl Trial {
    pub fn ledger_line(&self) -> String {
        let status = match self.status {
            TrialStatus::Done => "done",
            TrialStatus::Failed => "failed",
        };
        format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            self.trial,
            self.point.lr,
            self.point.batch,
            self.point.dim,
            self.point.heads,
            self.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            status,
            self.seconds
        )
    }
}

type Objective<'a> = Box<dyn FnMut(&Point) -> Result<f64> + 'a>;

/// Runs an objective, records each outcome as a [`Trial`] and optionally
/// appends it to a CSV ledger as soon as it finishes.
pub struct Evaluator<'a> {
    objective: Objective<'a>,
    trials: Vec<Trial>,
    ledger: Option<File>,
}

impl<'a> Evaluator<'a> {
    pub fn new(objective: impl FnMut(&Point) -> Result<f64> + 'a) -> Self {
        Self {
            objective: Box::new(objective),
            trials: Vec::new(),
            ledger: None,
        }
    }

    /// Appends to `path`, writing the header if the file is new or empty.
    pub fn with_ledger(mut self, path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            file.write_all(LEDGER_HEADER.as_bytes())?;
        }
        self.ledger = Some(file);
        Ok(self)
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn into_trials(self) -> Vec<Trial> {
        self.trials
    }

    fn evaluated(&self, p: &Point) -> bool {
        self.trials.iter().any(|t| t.point == *p)
    }

    /// Failures, including non-finite losses, become failed trials.
    pub fn evaluate(&mut self, p: Point) -> Result<&Trial> {
        let start = Instant::now();
        let outcome = (self.objective)(&p);
        let val_loss = match outcome {
            Ok(v) if v.is_finite() => Some(v),
            Ok(v) => {
                log::warn!("trial {:?} returned non-finite loss {v}", p);
                None
            }
            Err(e) => {
                log::warn!("trial {:?} failed: {e}", p);
                None
            }
        };
        let trial = Trial {
            trial: self.trials.len(),
            point: p,
            val_loss,
            status: if val_loss.is_some() {
                TrialStatus::Done
            } else {
                TrialStatus::Failed
            },
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = &mut self.ledger {
            f.write_all(trial.ledger_line().as_bytes())?;
            f.flush()?;
        }
        self.trials.push(trial);
        Ok(self.trials.last().expect("just pushed"))
    }
}

/// Evaluates grid points in lexicographic order, at most `budget` of them.
pub fn grid_search(
    space: &SearchSpace,
    budget: Option<usize>,
    eval: &mut Evaluator<'_>,
) -> Result<()> {
    space.validate()?;
    for p in space.grid().into_iter().take(budget.unwrap_or(usize::MAX)) {
        eval.evaluate(p)?;
    }
    Ok(())
}

/// Gaussian process on normalised points with fixed RBF hyperparameters.
/// Targets are standardised before fitting.
pub struct Surrogate {
    x: Vec<[f64; 4]>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    mean: f64,
    scale: f64,
}

fn kernel(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    SIGNAL_VARIANCE * (-d2 / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
}

impl Surrogate {
    pub fn fit(x: Vec<[f64; 4]>, y: &[f64]) -> Result<Self> {
        if x.len() < 2 || x.len() != y.len() {
            return Err(Error::Input(format!(
                "surrogate needs at least two observations, got {} points and {} values",
                x.len(),
                y.len()
            )));
        }
        let n = y.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(&x[i], &x[j]) + if i == j { NOISE } else { 0.0 }
        });
        let chol = k.cholesky().ok_or_else(|| {
            Error::Numeric("surrogate kernel matrix is not positive definite".into())
        })?;
        let target = DVector::from_iterator(n, y.iter().map(|v| (v - mean) / scale));
        let alpha = chol.solve(&target);
        Ok(Self {
            x,
            chol,
            alpha,
            mean,
            scale,
        })
    }

    /// Posterior mean and standard deviation in objective units.
    pub fn predict(&self, p: &[f64; 4]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| kernel(xi, p)));
        let mu = k.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&k)
            .expect("cholesky factor is invertible");
        let var = (SIGNAL_VARIANCE - v.dot(&v)).max(0.0);
        (self.mean + self.scale * mu, self.scale * var.sqrt())
    }
}

/// Expected improvement of a minimisation objective below `best`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    if sigma <= 0.0 {
        return (best - mu).max(0.0);
    }
    let z = (best - mu) / sigma;
    let n = Normal::standard();
    ((best - mu) * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

fn done_points(space: &SearchSpace, trials: &[Trial]) -> (Vec<[f64; 4]>, Vec<f64>) {
    trials
        .iter()
        .filter_map(|t| t.val_loss.map(|v| (space.normalize(&t.point), v)))
        .unzip()
}

/// Bayesian refinement: `n_iter` rounds of fitting the surrogate on every
/// finished trial so far and evaluating the unevaluated grid point of
/// highest expected improvement (ties go to the earlier grid point). With
/// fewer than two finished trials the round falls back to a seeded random
/// unevaluated point. Stops early once the grid is exhausted.
pub fn refine(
    space: &SearchSpace,
    n_iter: usize,
    seed: u64,
    eval: &mut Evaluator<'_>,
) -> Result<()> {
    let grid = space.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4250_4f50);
    for _ in 0..n_iter {
        let open: Vec<&Point> = grid.iter().filter(|p| !eval.evaluated(p)).collect();
        if open.is_empty() {
            log::info!("grid exhausted after {} trials", eval.trials().len());
            break;
        }
        let (x, y) = done_points(space, eval.trials());
        let next = if y.len() < 2 {
            *open[index::sample(&mut rng, open.len(), 1).index(0)]
        } else {
            let gp = Surrogate::fit(x, &y)?;
            let best = y.iter().copied().fold(f64::INFINITY, f64::min);
            let mut choice = (f64::NEG_INFINITY, *open[0]);
            for p in open {
                let (mu, sigma) = gp.predict(&space.normalize(p));
                let ei = expected_improvement(mu, sigma, best);
                if ei > choice.0 {
                    choice = (ei, *p);
                }
            }
            choice.1
        };
        eval.evaluate(next)?;
    }
    Ok(())
}

/// `n_init` distinct seeded-random grid points followed by [`refine`].
pub fn bayes_opt(
    space: &SearchSpace,
    n_init: usize,
    n_iter: usize,
    seed: u64,
    eval: &mut Evaluator<'_>,
) -> Result<()> {
    space.validate()?;
    if n_init == 0 {
        return Err(Error::Config(
            "Bayesian search needs at least one initial point".into(),
        ));
    }
    let grid = space.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_init = n_init.min(grid.len());
    for i in index::sample(&mut rng, grid.len(), n_init) {
        eval.evaluate(grid[i])?;
    }
    refine(space, n_iter, seed, eval)
}

/// Coarse grid over learning rate × embedding dimension at the first batch
/// size and head count, then Bayesian refinement over the full grid until
/// `budget` trials have run.
pub fn combined(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    eval: &mut Evaluator<'_>,
) -> Result<()> {
    space.validate()?;
    let coarse = SearchSpace {
        batch: vec![space.batch[0]],
        heads: vec![space.heads[0]],
        ..space.clone()
    };
    grid_search(&coarse, Some(budget), eval)?;
    let left = budget.saturating_sub(eval.trials().len());
    refine(space, left, seed, eval)
}

/// The finished trial of lowest validation loss; ties go to the earlier.
pub fn select_best(trials: &[Trial]) -> Result<&Trial> {
    let mut best: Option<&Trial> = None;
    for t in trials {
        if let Some(v) = t.val_loss {
            if best.is_none_or(|b| v < b.val_loss.expect("done trial")) {
                best = Some(t);
            }
        }
    }
    best.ok_or_else(|| Error::Runtime("no hyperparameter trial finished".into()))
}

/// Objective training `base` with a point's values for `epochs` epochs and
/// returning the best validation loss.
pub fn training_objective<'a>(
    graph: &'a HeteroGraph,
    train_set: &'a [LabeledSample],
    validation: &'a [LabeledSample],
    base: &'a TrainConfig,
    epochs: usize,
) -> impl FnMut(&Point) -> Result<f64> + 'a {
    move |p| {
        let cfg = TrainConfig {
            epochs,
            ..p.apply(base)
        };
        let run = train(graph, train_set, validation, &cfg)?;
        run.snapshot
            .val_loss
            .ok_or_else(|| Error::Runtime("training ran no epochs".into()))
    }
}
