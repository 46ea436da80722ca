//! Quantile-regression training, evaluation against ground truth, and
//! replication studies.
//!
//! `train` fits a dense network with a quantile head by minibatch Adam on the
//! empirical pinball (or quantile-Huber) risk, with early stopping on a held
//! out validation set: when the validation risk has not improved for
//! `patience` epochs the loop stops and the parameters from the best epoch
//! are restored. `evaluate` scores a predictor against the model's closed
//! form quantiles on a fresh test draw. `replicate` fans independent
//! (data, init) seeds over a (model x method) grid, in parallel, and
//! aggregates per-level error statistics.
//!
//! Everything is a deterministic function of the seeds: summaries are
//! bit-identical across runs and thread counts. Wall-clock fields are the
//! one exception and carry no reproducibility claim.

use std::time::Instant;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::heads::{self, HeadKind, QuantileFan, QuantileLevels};
use crate::losses::{self, LossSpec};
use crate::nn::{AdamState, DenseNet};
use crate::rng::{self, derive_seed, Domain};
use crate::simdata::{Dataset, SimModel};

const SALT_TRAIN_DATA: u64 = 1;
const SALT_VAL_DATA: u64 = 2;
const SALT_INIT: u64 = 3;
const SALT_TEST: u64 = 4;

/// Everything `train` needs besides the data source. `hidden` empty means
/// the per-input-dimension default (three layers of 128 for univariate
/// inputs, 256 for multivariate).
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub levels: QuantileLevels,
    pub hidden: Vec<usize>,
    pub loss: LossSpec,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults from the experimental protocol: batch 128, up to 1000
    /// epochs, patience 50, Adam at lr 0.001 with betas (0.9, 0.99).
    pub fn new(head: HeadKind, k: usize) -> Result<Self> {
        Ok(TrainConfig {
            head,
            levels: QuantileLevels::uniform(k)?,
            hidden: Vec::new(),
            loss: LossSpec::check(),
            batch_size: 128,
            max_epochs: 1000,
            patience: 50,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            seed: 0,
        })
    }

    pub fn hidden_for(input_dim: usize) -> Vec<usize> {
        if input_dim <= 1 {
            vec![128, 128, 128]
        } else {
            vec![256, 256, 256]
        }
    }

    /// The hidden layout a fit will actually use: `hidden` when set,
    /// otherwise the protocol default for `input_dim`.
    pub fn effective_hidden(&self, input_dim: usize) -> Vec<usize> {
        if self.hidden.is_empty() {
            Self::hidden_for(input_dim)
        } else {
            self.hidden.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("need at least one epoch".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("zero-width hidden layer".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A trained network plus the head that interprets its raw output.
#[derive(Debug, Clone)]
pub struct Predictor {
    net: DenseNet,
    head: HeadKind,
    levels: QuantileLevels,
}

impl Predictor {
    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<QuantileFan> {
        let xv = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let mut fans = self.predict_batch(xv)?;
        Ok(fans.pop().expect("one row in, one fan out"))
    }

    /// One `QuantileFan` per input row.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<QuantileFan>> {
        let raw = self.net.predict(x)?;
        raw.rows()
            .into_iter()
            .map(|r| heads::forward(self.head, r.to_vec()))
            .collect()
    }
}

/// Combined per-run report. `train` fills the loss curves and leaves the
/// error table empty; `evaluate` fills the error table and leaves the curves
/// empty; replication runs merge both halves.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct EvalReport {
    /// Mean |f_hat_k(X) - Q(X, tau_k)| over the test draw, one entry per level.
    pub per_level_l1: Vec<f64>,
    /// Mean (f_hat_k(X) - Q(X, tau_k))^2 over the test draw, per level.
    pub per_level_l2sq: Vec<f64>,
    /// Fraction of test points with any adjacent f_hat_{k+1} < f_hat_k.
    pub crossing_fraction: f64,
    pub test_size: usize,
    /// Mean training risk of each epoch, in epoch order.
    pub train_curve: Vec<f64>,
    /// Full validation risk after each epoch.
    pub val_curve: Vec<f64>,
    /// Epoch whose parameters the predictor carries.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Wall-clock seconds; excluded from any determinism claim.
    pub train_wall_secs: f64,
    pub eval_wall_secs: f64,
}

impl EvalReport {
    /// Combines a fit report (curves, epochs, train wall time) with a
    /// ground-truth evaluation of the same predictor.
    pub fn merge(fit: EvalReport, eval: EvalReport) -> EvalReport {
        EvalReport {
            per_level_l1: eval.per_level_l1,
            per_level_l2sq: eval.per_level_l2sq,
            crossing_fraction: eval.crossing_fraction,
            test_size: eval.test_size,
            eval_wall_secs: eval.eval_wall_secs,
            ..fit
        }
    }
}

/// Fits on a fresh size-n draw from `model` with an independent n/4
/// validation draw, both derived from `config.seed`.
pub fn train(model: SimModel, n: usize, config: &TrainConfig) -> Result<(Predictor, EvalReport)> {
    if n < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 training rows, got {n}")));
    }
    let train_data = Dataset::sample(model, n, derive_seed(config.seed, SALT_TRAIN_DATA, 0))?;
    let val_data = Dataset::sample(model, (n / 4).max(1), derive_seed(config.seed, SALT_VAL_DATA, 0))?;
    train_on(
        train_data.x.view(),
        &train_data.y,
        val_data.x.view(),
        &val_data.y,
        config,
    )
}

/// Fits on caller-supplied data. Exposed so synthetic corpora (constant
/// targets, adversarial cases) can drive the same loop the simulation
/// pipeline uses.
pub fn train_on(
    x: ArrayView2<f64>,
    y: &[f64],
    x_val: ArrayView2<f64>,
    y_val: &[f64],
    config: &TrainConfig,
) -> Result<(Predictor, EvalReport)> {
    config.validate()?;
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} input rows but {} targets", y.len())));
    }
    if x_val.nrows() == 0 || y_val.len() != x_val.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} validation rows but {} validation targets",
            x_val.nrows(),
            y_val.len()
        )));
    }
    let start = Instant::now();
    let k = config.levels.len();
    let d = x.ncols();
    let mut dims = vec![d];
    dims.extend(config.effective_hidden(d));
    dims.push(config.head.raw_len(k));

    let mut net = DenseNet::init(&dims, derive_seed(config.seed, SALT_INIT, 0))?;
    let mut adam = AdamState::new(&net, config.lr, config.beta1, config.beta2)?;
    let batch = config.batch_size.min(n);

    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_net = net.clone();
    let mut stale = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.max_epochs {
        let mut shuffle_rng = rng::substream(config.seed, Domain::Shuffle, epoch as u64);
        indices.shuffle(&mut shuffle_rng);

        let mut epoch_risk = 0.0;
        for chunk in indices.chunks(batch) {
            let xb = gather_rows(x, chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let (raw, cache) = net.forward(xb.view())?;
            let fans = rows_to_fans(config.head, &raw)?;
            let (risk, dl_df) = losses::empirical_risk(&config.levels, &fans, &yb, &config.loss)?;
            if !risk.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_risk += risk * chunk.len() as f64;
            let mut dl_draw = Array2::zeros((chunk.len(), dims[dims.len() - 1]));
            for (i, fan) in fans.iter().enumerate() {
                let dr = heads::backward(fan, &dl_df[i])?;
                dl_draw.row_mut(i).assign(&ArrayView1::from(&dr[..]));
            }
            let grads = net.backward(&cache, dl_draw.view())?;
            adam.step(&mut net, &grads)?;
        }
        train_curve.push(epoch_risk / n as f64);

        let val_risk = risk_of(&net, config, x_val, y_val)?;
        if !val_risk.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        val_curve.push(val_risk);

        if val_risk < best {
            best = val_risk;
            best_epoch = epoch;
            best_net = net.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let report = EvalReport {
        epochs_run: train_curve.len(),
        best_epoch,
        train_curve,
        val_curve,
        train_wall_secs: start.elapsed().as_secs_f64(),
        ..EvalReport::default()
    };
    let predictor = Predictor { net: best_net, head: config.head, levels: config.levels.clone() };
    Ok((predictor, report))
}

fn gather_rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

fn rows_to_fans(head: HeadKind, raw: &Array2<f64>) -> Result<Vec<QuantileFan>> {
    raw.rows().into_iter().map(|r| heads::forward(head, r.to_vec())).collect()
}

fn risk_of(
    net: &DenseNet,
    config: &TrainConfig,
    x: ArrayView2<f64>,
    y: &[f64],
) -> Result<f64> {
    let raw = net.predict(x)?;
    let fans = rows_to_fans(config.head, &raw)?;
    let (risk, _) = losses::empirical_risk(&config.levels, &fans, y, &config.loss)?;
    Ok(risk)
}

/// Scores a predictor against the model's exact quantiles on a fresh test
/// draw of `test_size` covariate points from the given seed.
pub fn evaluate(
    predictor: &Predictor,
    model: SimModel,
    test_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    if predictor.input_dim() != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "predictor takes {} inputs, model {model} has {}",
            predictor.input_dim(),
            model.input_dim()
        )));
    }
    let start = Instant::now();
    let k = predictor.levels.len();
    let noise = model.noise();
    let noise_q: Vec<f64> =
        predictor.levels.as_slice().iter().map(|&t| noise.quantile(t)).collect::<Result<_>>()?;

    let data = Dataset::sample(model, test_size, seed)?;
    let mut abs_sum = vec![0.0f64; k];
    let mut sq_sum = vec![0.0f64; k];
    let mut crossed = 0usize;
    let mut xs = vec![0.0; model.input_dim()];
    for chunk_start in (0..test_size).step_by(4096) {
        let chunk_end = (chunk_start + 4096).min(test_size);
        let xc = data.x.slice(ndarray::s![chunk_start..chunk_end, ..]);
        let fans = predictor.predict_batch(xc)?;
        for (row, fan) in xc.rows().into_iter().zip(&fans) {
            for (dst, &v) in xs.iter_mut().zip(row.iter()) {
                *dst = v;
            }
            let (m, s) = model.location_scale(&xs)?;
            if fan.crossings() > 0 {
                crossed += 1;
            }
            for (i, &f) in fan.quantiles().iter().enumerate() {
                let err = f - (m + s * noise_q[i]);
                abs_sum[i] += err.abs();
                sq_sum[i] += err * err;
            }
        }
    }
    let t = test_size as f64;
    Ok(EvalReport {
        per_level_l1: abs_sum.into_iter().map(|v| v / t).collect(),
        per_level_l2sq: sq_sum.into_iter().map(|v| v / t).collect(),
        crossing_fraction: crossed as f64 / t,
        test_size,
        eval_wall_secs: start.elapsed().as_secs_f64(),
        ..EvalReport::default()
    })
}

/// One completed replication run, ready for a JSON-lines log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunRecord {
    pub model: SimModel,
    pub method: HeadKind,
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub report: EvalReport,
}

/// A run that errored; excluded from summary statistics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunFailure {
    pub model: SimModel,
    pub method: HeadKind,
    pub rep: usize,
    pub error: String,
}

/// One row of the summary table: error statistics for a
/// (model, method, level) triple across completed replications.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SummaryRow {
    pub model: SimModel,
    pub method: HeadKind,
    pub n: usize,
    pub tau: f64,
    pub l1_mean: f64,
    pub l1_std: f64,
    pub l2sq_mean: f64,
    pub l2sq_std: f64,
    pub crossing_fraction_mean: f64,
    pub runs_completed: usize,
}

#[derive(Debug, Clone)]
pub struct ReplicationSummary {
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
}

impl ReplicationSummary {
    /// Deterministic CSV of the summary rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "model,method,n,tau,l1_mean,l1_std,l2sq_mean,l2sq_std,crossing_fraction_mean,runs_completed\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.model,
                r.method,
                r.n,
                r.tau,
                r.l1_mean,
                r.l1_std,
                r.l2sq_mean,
                r.l2sq_std,
                r.crossing_fraction_mean,
                r.runs_completed
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateOptions {
    /// Test points per run for the ground-truth comparison.
    pub test_size: usize,
    /// Thread count for the run fan-out; None uses the global pool.
    pub workers: Option<usize>,
}

impl Default for ReplicateOptions {
    fn default() -> Self {
        ReplicateOptions { test_size: 100_000, workers: None }
    }
}

/// Runs `reps` independent train+evaluate runs for every (model, method)
/// cell. Each run's seed derives from (base_seed, cell, rep), so results do
/// not depend on scheduling; failures are collected, not fatal.
pub fn replicate(
    models: &[SimModel],
    methods: &[HeadKind],
    n: usize,
    reps: usize,
    base_seed: u64,
    template: &TrainConfig,
    opts: &ReplicateOptions,
) -> Result<ReplicationSummary> {
    if models.is_empty() || methods.is_empty() {
        return Err(Error::InvalidArgument("need at least one model and one method".into()));
    }
    if reps == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    if opts.test_size == 0 {
        return Err(Error::InvalidArgument("test size must be at least 1".into()));
    }
    template.validate()?;

    let cells: Vec<(SimModel, HeadKind)> = models
        .iter()
        .flat_map(|&m| methods.iter().map(move |&h| (m, h)))
        .collect();
    let jobs: Vec<(usize, usize)> =
        (0..cells.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();

    let run_job = |&(cell, rep): &(usize, usize)| {
        let (model, method) = cells[cell];
        let run_seed = derive_seed(base_seed, cell as u64, rep as u64);
        let mut config = template.clone();
        config.head = method;
        config.seed = run_seed;
        if config.hidden.is_empty() {
            config.hidden = TrainConfig::hidden_for(model.input_dim());
        }
        let outcome = train(model, n, &config).and_then(|(predictor, fit)| {
            let eval =
                evaluate(&predictor, model, opts.test_size, derive_seed(run_seed, SALT_TEST, 0))?;
            Ok(RunRecord {
                model,
                method,
                n,
                rep,
                seed: run_seed,
                config,
                report: EvalReport::merge(fit, eval),
            })
        });
        (cell, rep, outcome)
    };

    let mut results: Vec<(usize, usize, Result<RunRecord>)> = match opts.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build().map_err(
                |e| Error::InvalidArgument(format!("cannot build worker pool: {e}")),
            )?;
            pool.install(|| jobs.par_iter().map(run_job).collect())
        }
        None => jobs.par_iter().map(run_job).collect(),
    };
    results.sort_by_key(|&(cell, rep, _)| (cell, rep));

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); cells.len()];
    for (cell, rep, outcome) in results {
        match outcome {
            Ok(rec) => {
                by_cell[cell].push(runs.len());
                runs.push(rec);
            }
            Err(e) => {
                let (model, method) = cells[cell];
                failures.push(RunFailure { model, method, rep, error: e.to_string() });
            }
        }
    }

    let k = template.levels.len();
    let mut rows = Vec::with_capacity(cells.len() * k);
    for (cell, &(model, method)) in cells.iter().enumerate() {
        let members = &by_cell[cell];
        let completed = members.len();
        for level in 0..k {
            let l1: Vec<f64> = members.iter().map(|&i| runs[i].report.per_level_l1[level]).collect();
            let l2: Vec<f64> =
                members.iter().map(|&i| runs[i].report.per_level_l2sq[level]).collect();
            let cross: Vec<f64> =
                members.iter().map(|&i| runs[i].report.crossing_fraction).collect();
            let (l1_mean, l1_std) = mean_std(&l1);
            let (l2sq_mean, l2sq_std) = mean_std(&l2);
            let (crossing_fraction_mean, _) = mean_std(&cross);
            rows.push(SummaryRow {
                model,
                method,
                n,
                tau: template.levels[level],
                l1_mean,
                l1_std,
                l2sq_mean,
                l2sq_std,
                crossing_fraction_mean,
                runs_completed: completed,
            });
        }
    }
    Ok(ReplicationSummary { rows, runs, failures })
}

/// Mean and population standard deviation; (NaN, NaN) for an empty slice.
fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
