//! Python bindings for the quantile-network toolkit: the monotone head
//! transforms, the pointwise losses, the simulation models with their true
//! quantile curves, and a small `QuantileModel` wrapper around the trainer.
//!
//! Build as `nqnet_py` (cdylib); `python/smoke_test.py` exercises the
//! surface end to end.

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nqnet_core::heads::{self, HeadKind, QuantileLevels};
use nqnet_core::losses::{self, LossSpec};
use nqnet_core::simdata::{self, Dataset, SimModel};
use nqnet_core::trainer::{self, EvalReport, Predictor, TrainConfig};
use nqnet_core::{drl, Error};

fn py_err(e: Error) -> PyErr {
    match &e {
        Error::InvalidArgument(_) | Error::ShapeMismatch(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_matrix(x: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let rows = x.len();
    if rows == 0 {
        return Err(PyValueError::new_err("need at least one input row"));
    }
    let cols = x[0].len();
    let mut flat = Vec::with_capacity(rows * cols);
    for (idx, row) in x.iter().enumerate() {
        if row.len() != cols {
            return Err(PyValueError::new_err(format!(
                "row {idx} has {} entries, row 0 has {cols}",
                row.len()
            )));
        }
        flat.extend_from_slice(row);
    }
    Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| PyValueError::new_err(format!("building input matrix: {e}")))
}

/// ELU(x) + 1: the strictly positive gap activation of the monotone head.
#[pyfunction]
fn elu_plus_one(x: f64) -> f64 {
    heads::elu_plus_one(x)
}

/// Monotone quantile construction from an anchor `v` and gap
/// pre-activations `g`: mean equals `v`, adjacent gaps equal ELU(g)+1.
#[pyfunction]
fn nq_quantiles(v: f64, g: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(heads::nq_forward(v, &g).map_err(py_err)?.quantiles().to_vec())
}

/// Applies any head (`nq`, `nq_relu`, `dqr`, `dqr_star`, `ncqrdqn`) to a raw
/// network output vector and returns the K quantiles.
#[pyfunction]
fn head_quantiles(head: &str, raw: Vec<f64>) -> PyResult<Vec<f64>> {
    let kind = HeadKind::parse(head).map_err(py_err)?;
    Ok(heads::forward(kind, raw).map_err(py_err)?.quantiles().to_vec())
}

/// Check (pinball) loss rho_tau(u).
#[pyfunction]
fn check_loss(tau: f64, u: f64) -> PyResult<f64> {
    losses::check_loss(tau, u).map_err(py_err)
}

/// Quantile Huber loss with zone width `kappa`.
#[pyfunction]
fn qhuber_loss(tau: f64, u: f64, kappa: f64) -> PyResult<f64> {
    losses::qhuber_loss(tau, u, kappa).map_err(py_err)
}

/// Standard normal quantile function.
#[pyfunction]
fn std_normal_quantile(p: f64) -> PyResult<f64> {
    simdata::std_normal_quantile(p).map_err(py_err)
}

/// Student-t quantile function with 2 degrees of freedom (closed form).
#[pyfunction]
fn student_t2_quantile(p: f64) -> PyResult<f64> {
    simdata::student_t2_quantile(p).map_err(py_err)
}

/// The uniform level grid k/(K+1), k = 1..K.
#[pyfunction]
fn uniform_levels(k: usize) -> PyResult<Vec<f64>> {
    Ok(QuantileLevels::uniform(k).map_err(py_err)?.as_slice().to_vec())
}

/// True conditional quantile Q(x, tau) of a simulation model.
#[pyfunction]
fn true_quantile(model: &str, x: Vec<f64>, tau: f64) -> PyResult<f64> {
    SimModel::parse(model).map_err(py_err)?.true_quantile(&x, tau).map_err(py_err)
}

/// Draws a seeded dataset and returns (X rows, y).
#[pyfunction]
fn sample_dataset(model: &str, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let kind = SimModel::parse(model).map_err(py_err)?;
    let data = Dataset::sample(kind, n, seed).map_err(py_err)?;
    let x = data.x.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok((x, data.y))
}

/// Mean of K quantiles: the value estimate a greedy policy maximizes.
#[pyfunction]
fn k_quantile_mean(quantiles: Vec<f64>) -> PyResult<f64> {
    drl::k_quantile_mean(&quantiles).map_err(py_err)
}

/// A quantile-regression network: configure, fit on rows, predict fans.
#[pyclass]
struct QuantileModel {
    config: TrainConfig,
    predictor: Option<Predictor>,
    report: Option<EvalReport>,
}

impl QuantileModel {
    fn fitted(&self) -> PyResult<&Predictor> {
        self.predictor.as_ref().ok_or_else(|| PyRuntimeError::new_err("call fit() first"))
    }
}

#[pymethods]
impl QuantileModel {
    #[new]
    #[pyo3(signature = (method="nq", k=19, hidden=None, seed=0, loss="check", kappa=1.0,
                        batch_size=128, max_epochs=1000, patience=50, lr=1e-3))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        method: &str,
        k: usize,
        hidden: Option<Vec<usize>>,
        seed: u64,
        loss: &str,
        kappa: f64,
        batch_size: usize,
        max_epochs: usize,
        patience: usize,
        lr: f64,
    ) -> PyResult<Self> {
        let head = HeadKind::parse(method).map_err(py_err)?;
        let mut config = TrainConfig::new(head, k).map_err(py_err)?;
        config.hidden = hidden.unwrap_or_default();
        config.loss = LossSpec::parse(loss, kappa).map_err(py_err)?;
        config.batch_size = batch_size;
        config.max_epochs = max_epochs;
        config.patience = patience;
        config.lr = lr;
        config.seed = seed;
        config.validate().map_err(py_err)?;
        Ok(QuantileModel { config, predictor: None, report: None })
    }

    /// Fits on (x, y). Without an explicit validation set the trailing
    /// quarter of the rows is held out for early stopping. Returns the
    /// number of epochs run.
    #[pyo3(signature = (x, y, x_val=None, y_val=None))]
    fn fit(
        &mut self,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        x_val: Option<Vec<Vec<f64>>>,
        y_val: Option<Vec<f64>>,
    ) -> PyResult<usize> {
        if x.len() != y.len() {
            return Err(PyValueError::new_err(format!(
                "{} input rows but {} targets",
                x.len(),
                y.len()
            )));
        }
        let (report, predictor) = match (x_val, y_val) {
            (Some(xv), Some(yv)) => {
                let xm = to_matrix(x)?;
                let vm = to_matrix(xv)?;
                let (p, r) =
                    trainer::train_on(xm.view(), &y, vm.view(), &yv, &self.config).map_err(py_err)?;
                (r, p)
            }
            (None, None) => {
                let n = x.len();
                let n_val = (n / 4).max(1);
                let split = n - n_val;
                if split == 0 {
                    return Err(PyValueError::new_err("too few rows to split off validation"));
                }
                let xm = to_matrix(x)?;
                let (p, r) = trainer::train_on(
                    xm.slice(ndarray::s![..split, ..]),
                    &y[..split],
                    xm.slice(ndarray::s![split.., ..]),
                    &y[split..],
                    &self.config,
                )
                .map_err(py_err)?;
                (r, p)
            }
            _ => {
                return Err(PyValueError::new_err(
                    "provide both x_val and y_val, or neither",
                ))
            }
        };
        let epochs = report.epochs_run;
        self.report = Some(report);
        self.predictor = Some(predictor);
        Ok(epochs)
    }

    /// Per-row quantile predictions, one list of K values per input row.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let predictor = self.fitted()?;
        let xm = to_matrix(x)?;
        let fans = predictor.predict_batch(xm.view()).map_err(py_err)?;
        Ok(fans.into_iter().map(|f| f.quantiles().to_vec()).collect())
    }

    /// The quantile levels the model predicts.
    fn levels(&self) -> Vec<f64> {
        self.config.levels.as_slice().to_vec()
    }

    /// (train_curve, val_curve, best_epoch) of the last fit.
    fn history(&self) -> PyResult<(Vec<f64>, Vec<f64>, usize)> {
        let report =
            self.report.as_ref().ok_or_else(|| PyRuntimeError::new_err("call fit() first"))?;
        Ok((report.train_curve.clone(), report.val_curve.clone(), report.best_epoch))
    }

    /// Compares predictions with a simulation model's true quantiles on a
    /// fresh seeded draw; returns (per_level_l1, per_level_l2sq,
    /// crossing_fraction).
    fn evaluate(
        &self,
        model: &str,
        test_size: usize,
        seed: u64,
    ) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
        let predictor = self.fitted()?;
        let kind = SimModel::parse(model).map_err(py_err)?;
        let report = trainer::evaluate(predictor, kind, test_size, seed).map_err(py_err)?;
        Ok((report.per_level_l1, report.per_level_l2sq, report.crossing_fraction))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // The binding macros keep every function callable as plain Rust, so the
    // conversion layer is testable without an embedded interpreter; the
    // Python-facing behavior is covered by python/smoke_test.py.
    #[test]
    fn bound_functions_round_trip() {
        assert_eq!(elu_plus_one(0.0), 1.0);
        let q = nq_quantiles(0.5, vec![0.3, -0.7, 0.1]).unwrap();
        assert_eq!(q.len(), 3);
        assert!(q[0] < q[1] && q[1] < q[2]);
        assert!((q.iter().sum::<f64>() / 3.0 - 0.5).abs() < 1e-12);
        assert_eq!(head_quantiles("dqr", vec![2.0, 1.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(uniform_levels(3).unwrap(), vec![0.25, 0.5, 0.75]);
        assert_eq!(k_quantile_mean(vec![1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert!(check_loss(1.5, 0.0).is_err());
    }

    #[test]
    fn model_fits_and_predicts_ordered_fans() {
        let (x, y) = sample_dataset("wave", 64, 3).unwrap();
        let mut model =
            QuantileModel::new("nq", 3, Some(vec![8]), 1, "check", 1.0, 32, 4, 4, 1e-3).unwrap();
        assert_eq!(model.levels(), vec![0.25, 0.5, 0.75]);
        let epochs = model.fit(x, y, None, None).unwrap();
        assert!((1..=4).contains(&epochs));
        let preds = model.predict(vec![vec![0.2], vec![0.8]]).unwrap();
        for fan in &preds {
            assert!(fan[0] < fan[1] && fan[1] < fan[2]);
        }
        let (l1, l2, crossing) = model.evaluate("wave", 200, 9).unwrap();
        assert_eq!(l1.len(), 3);
        assert_eq!(l2.len(), 3);
        assert_eq!(crossing, 0.0);
        let (train_curve, val_curve, best) = model.history().unwrap();
        assert_eq!(train_curve.len(), epochs);
        assert_eq!(val_curve.len(), epochs);
        assert!(best < epochs);
    }

    #[test]
    fn conversion_rejects_ragged_or_empty_input() {
        assert!(to_matrix(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(to_matrix(vec![]).is_err());
        let mut model =
            QuantileModel::new("nq", 2, Some(vec![4]), 0, "check", 1.0, 16, 2, 2, 1e-3).unwrap();
        assert!(model.predict(vec![vec![0.0]]).is_err(), "predict before fit");
        assert!(model
            .fit(vec![vec![0.0]], vec![1.0, 2.0], None, None)
            .is_err(), "row/target mismatch");
        assert!(QuantileModel::new("bogus", 2, None, 0, "check", 1.0, 16, 2, 2, 1e-3).is_err());
    }
}

#[pymodule]
fn nqnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(elu_plus_one, m)?)?;
    m.add_function(wrap_pyfunction!(nq_quantiles, m)?)?;
    m.add_function(wrap_pyfunction!(head_quantiles, m)?)?;
    m.add_function(wrap_pyfunction!(check_loss, m)?)?;
    m.add_function(wrap_pyfunction!(qhuber_loss, m)?)?;
    m.add_function(wrap_pyfunction!(std_normal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(student_t2_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_levels, m)?)?;
    m.add_function(wrap_pyfunction!(true_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(sample_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(k_quantile_mean, m)?)?;
    m.add_class::<QuantileModel>()?;
    Ok(())
}
