//! Python bindings: datasets, training, TreeSHAP, downscaling, the
//! synthetic city generator and the full pipeline run.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mobipop_core::explain::{expected_value, tree_shap};
use mobipop_core::features::{self, feature_count as core_feature_count};
use mobipop_core::gbtree::{self, gain_importance, TrainConfig};
use mobipop_core::grid_geo::{parse_city_geojson, DEFAULT_ID_KEY};
use mobipop_core::pipeline::{self, ModelKind, RunConfig};
use mobipop_core::popgrid::{downscale_population, Period};
use mobipop_core::raster::CoarseRaster;
use mobipop_core::synth::{self, SynthConfig, SynthTruth};
use mobipop_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn period(name: &str) -> PyResult<Period> {
    match name {
        "night" => Ok(Period::Night),
        "day" => Ok(Period::Day),
        _ => Err(PyValueError::new_err(format!("unknown period {name:?}"))),
    }
}

/// Tiles x features with a target column.
#[pyclass(name = "Dataset", module = "mobipop")]
struct PyDataset {
    inner: features::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        features::Dataset::read_csv(&path)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        features::Dataset::parse_csv(text)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.features.column_names()
    }

    #[getter]
    fn tile_ids(&self) -> Vec<u64> {
        self.inner.features.tile_ids.iter().map(|t| t.0).collect()
    }

    #[getter]
    fn target(&self) -> Vec<f64> {
        self.inner.target.clone()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_rows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.features.row(i).to_vec())
    }

    /// Row indices of the seeded train/test/validation partition.
    #[pyo3(signature = (seed=1, fractions=(0.4, 0.4, 0.2)))]
    fn split(
        &self,
        seed: u64,
        fractions: (f64, f64, f64),
    ) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let s = features::split_dataset(&self.inner, [fractions.0, fractions.1, fractions.2], seed)
            .map_err(py_err)?;
        Ok((s.train, s.test, s.validation))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(rows={}, features={})",
            self.inner.n_rows(),
            self.inner.features.n_cols()
        )
    }
}

/// Gradient-boosted regression trees on ln(1 + population).
#[pyclass(name = "Ensemble", module = "mobipop")]
struct PyEnsemble {
    inner: gbtree::Ensemble,
}

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        gbtree::Ensemble::from_json(text)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.trees.len()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    #[getter]
    fn base_score(&self) -> f64 {
        self.inner.base_score
    }

    /// Population estimate for one feature row.
    fn predict(&self, row: Vec<f64>) -> PyResult<f64> {
        self.inner.predict(&row).map_err(py_err)
    }

    fn predict_dataset(&self, ds: &PyDataset) -> PyResult<Vec<f64>> {
        let fm = &ds.inner.features;
        (0..fm.n_rows())
            .map(|r| self.inner.predict(fm.row(r)).map_err(py_err))
            .collect()
    }

    /// (feature name, total gain, cumulative share), by decreasing gain.
    fn gain_importance(&self) -> Vec<(String, f64, f64)> {
        gain_importance(&self.inner)
            .into_iter()
            .map(|g| (g.name, g.gain, g.cumulative_share))
            .collect()
    }

    /// (base value, per-row SHAP values) in log-population space. Rows
    /// default to all rows of the dataset.
    #[pyo3(signature = (ds, rows=None))]
    fn shap(&self, ds: &PyDataset, rows: Option<Vec<usize>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
        let rows = rows.unwrap_or_else(|| (0..ds.inner.n_rows()).collect());
        if let Some(r) = rows.iter().find(|&&r| r >= ds.inner.n_rows()) {
            return Err(PyValueError::new_err(format!("row {r} out of range")));
        }
        let sm = tree_shap(&self.inner, &ds.inner.features, &rows).map_err(py_err)?;
        let phi = (0..sm.n_rows()).map(|i| sm.row(i).to_vec()).collect();
        Ok((expected_value(&self.inner), phi))
    }

    fn __repr__(&self) -> String {
        format!(
            "Ensemble(trees={}, features={})",
            self.inner.trees.len(),
            self.inner.n_features()
        )
    }
}

/// Trains on the training rows of the seeded split with early stopping on
/// the test rows. `config` is a JSON object of training settings. Returns
/// the ensemble and the evaluation report as JSON.
#[pyfunction]
#[pyo3(signature = (ds, config=None, split_seed=1))]
fn train(ds: &PyDataset, config: Option<&str>, split_seed: u64) -> PyResult<(PyEnsemble, String)> {
    let cfg: TrainConfig = parse_json(config)?;
    cfg.validate().map_err(py_err)?;
    let split = features::split_dataset(&ds.inner, features::DEFAULT_FRACTIONS, split_seed)
        .map_err(py_err)?;
    let (inner, eval) = gbtree::train(&ds.inner, &split, &cfg).map_err(py_err)?;
    let eval = serde_json::to_string(&eval).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((PyEnsemble { inner }, eval))
}

/// A generated city with its ground truth.
#[pyclass(name = "SynthCity", module = "mobipop")]
struct PySynthCity {
    grid: mobipop_core::grid_geo::CityGrid,
    truth: SynthTruth,
}

#[pymethods]
impl PySynthCity {
    #[getter]
    fn tile_ids(&self) -> Vec<u64> {
        self.truth.tile_ids.iter().map(|t| t.0).collect()
    }

    #[getter]
    fn night(&self) -> Vec<f64> {
        self.truth.night.clone()
    }

    #[getter]
    fn day(&self) -> Vec<f64> {
        self.truth.day.clone()
    }

    #[getter]
    fn services(&self) -> Vec<String> {
        self.truth.services.clone()
    }

    /// Zone per tile: "center", "ring" or "neutral".
    #[getter]
    fn zones(&self) -> Vec<String> {
        self.truth
            .zones
            .iter()
            .map(|z| {
                serde_json::to_value(z)
                    .unwrap()
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    }

    fn informative_day_keys(&self) -> Vec<String> {
        self.truth
            .informative_day_keys()
            .iter()
            .map(|k| k.name())
            .collect()
    }

    /// Writes the GeoJSON grid, rasters, truth and traffic files; returns
    /// the number of traffic files.
    #[pyo3(signature = (out, gzip=false))]
    fn write(&self, out: PathBuf, gzip: bool) -> PyResult<usize> {
        synth::write_city(&self.truth, &self.grid, &out, gzip).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (config=None))]
fn gen_city(config: Option<&str>) -> PyResult<PySynthCity> {
    let cfg: SynthConfig = parse_json(config)?;
    let (grid, truth) = synth::gen_city(&cfg).map_err(py_err)?;
    Ok(PySynthCity { grid, truth })
}

/// Downscales an ESRI ASCII raster onto a GeoJSON tile grid. Returns
/// (tile ids, persons per tile).
#[pyfunction]
#[pyo3(signature = (raster, grid, period="night", conserve_mass=false, id_key=DEFAULT_ID_KEY))]
fn downscale(
    raster: PathBuf,
    grid: PathBuf,
    period: &str,
    conserve_mass: bool,
    id_key: &str,
) -> PyResult<(Vec<u64>, Vec<f64>)> {
    let p = self::period(period)?;
    let r = CoarseRaster::read(&raster).map_err(py_err)?;
    let bytes = std::fs::read(&grid).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let g = parse_city_geojson(&bytes, "city", id_key).map_err(py_err)?;
    let (pv, _) = downscale_population(&r, &g, p, conserve_mass).map_err(py_err)?;
    Ok((pv.tile_ids.iter().map(|t| t.0).collect(), pv.values))
}

#[pyfunction]
fn feature_count(
    n_services: usize,
    n_day_types: usize,
    n_directions: usize,
    n_slots: usize,
) -> usize {
    core_feature_count(n_services, n_day_types, n_directions, n_slots)
}

/// Percentage change from night to day, rounded to one decimal.
#[pyfunction]
fn percent_change(night: f64, day: f64) -> PyResult<f64> {
    pipeline::percent_change(night, day).map_err(py_err)
}

#[pyfunction]
fn rmsle(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    gbtree::rmsle(&pred, &truth).map_err(py_err)
}

/// Runs the whole pipeline from a JSON config file. Returns one report
/// per model as JSON.
#[pyfunction]
fn run_all(config: PathBuf) -> PyResult<Vec<String>> {
    let (cfg, base) = RunConfig::load(&config).map_err(py_err)?;
    let summary = pipeline::run_all(&cfg, &base).map_err(py_err)?;
    summary
        .reports
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| PyRuntimeError::new_err(e.to_string())))
        .collect()
}

#[pyfunction]
fn model_kinds() -> Vec<&'static str> {
    ModelKind::ALL.iter().map(|k| k.name()).collect()
}

#[pymodule]
fn mobipop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PySynthCity>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gen_city, m)?)?;
    m.add_function(wrap_pyfunction!(downscale, m)?)?;
    m.add_function(wrap_pyfunction!(feature_count, m)?)?;
    m.add_function(wrap_pyfunction!(percent_change, m)?)?;
    m.add_function(wrap_pyfunction!(rmsle, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add_function(wrap_pyfunction!(model_kinds, m)?)?;
    Ok(())
}
