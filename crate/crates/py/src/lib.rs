//! Python bindings for the `mpsuq` library.
//!
//! Grids cross the boundary as flat row-major lists with explicit
//! dimensions. Enumerations are passed as their CLI spellings
//! (`"class-mean"`, `"std"`, `"max-of-directed"`, ...).

use std::path::PathBuf;

use mpsuq::calibration::{self, BinAccumulator, ReliabilityTable};
use mpsuq::cli::{CliError, ErrorKind};
use mpsuq::ensemble::{self, EnsembleOutput, StdReduction};
use mpsuq::gridmaps::{self, ArrayData, Dtype, LabelMask, Measure, NpyArray, ProbabilityMap, UncertaintyMap};
use mpsuq::schedule::{self, ScheduleParams};
use mpsuq::segmetrics::{self, EvalConfig, Hd95Mode};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;

fn to_py(e: impl Into<CliError>) -> PyErr {
    let e = e.into();
    match e.kind {
        ErrorKind::Io => PyOSError::new_err(e.message),
        ErrorKind::Numeric => PyArithmeticError::new_err(e.message),
        ErrorKind::Usage | ErrorKind::Validation => PyValueError::new_err(e.message),
    }
}

fn parse_reduction(s: &str) -> PyResult<StdReduction> {
    match s {
        "class-mean" => Ok(StdReduction::ClassMean),
        "class-max" => Ok(StdReduction::ClassMax),
        "predicted-class" => Ok(StdReduction::PredictedClass),
        other => Err(PyValueError::new_err(format!("unknown std reduction '{other}'"))),
    }
}

fn parse_measure(s: &str) -> PyResult<Measure> {
    Measure::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown measure '{s}'")))
}

fn parse_hd95_mode(s: &str) -> PyResult<Hd95Mode> {
    match s {
        "pooled" => Ok(Hd95Mode::Pooled),
        "max-of-directed" => Ok(Hd95Mode::MaxOfDirected),
        other => Err(PyValueError::new_err(format!("unknown hd95 mode '{other}'"))),
    }
}

fn parse_dtype(s: &str) -> PyResult<Dtype> {
    [Dtype::F32, Dtype::F64, Dtype::U8]
        .into_iter()
        .find(|d| d.descr() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unsupported dtype '{s}'")))
}

/// Cyclic learning-rate schedule.
#[pyclass(name = "ScheduleParams", frozen)]
struct PySchedule(ScheduleParams);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (lr_max=0.1, lr_min=0.01, gamma=0.8, power=0.9, cycle_len=60, num_cycles=3))]
    fn new(lr_max: f64, lr_min: f64, gamma: f64, power: f64, cycle_len: usize, num_cycles: usize) -> PyResult<Self> {
        ScheduleParams::new(lr_max, lr_min, gamma, power, cycle_len, num_cycles)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn lr_max(&self) -> f64 {
        self.0.lr_max
    }

    #[getter]
    fn lr_min(&self) -> f64 {
        self.0.lr_min
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    #[getter]
    fn power(&self) -> f64 {
        self.0.power
    }

    #[getter]
    fn cycle_len(&self) -> usize {
        self.0.cycle_len
    }

    #[getter]
    fn num_cycles(&self) -> usize {
        self.0.num_cycles
    }

    fn total_epochs(&self) -> usize {
        self.0.total_epochs()
    }

    /// Learning rate at a global 1-based epoch.
    fn lr_at(&self, epoch: usize) -> PyResult<f64> {
        schedule::lr_at(&self.0, epoch).map_err(to_py)
    }

    /// `(epoch, cycle, t_c, lr)` for every epoch.
    fn rows(&self) -> Vec<(usize, usize, usize, f64)> {
        schedule::schedule_rows(&self.0)
            .into_iter()
            .map(|r| (r.epoch, r.cycle, r.t_c, r.lr))
            .collect()
    }

    fn csv(&self) -> String {
        schedule::emit_schedule_csv(&self.0)
    }

    /// Epochs whose weights join the ensemble.
    #[pyo3(signature = (window=20, stride=4))]
    fn sampling_plan(&self, window: usize, stride: usize) -> PyResult<Vec<usize>> {
        schedule::sampling_plan(&self.0, window, stride)
            .map(|p| p.epochs)
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let p = &self.0;
        format!(
            "ScheduleParams(lr_max={}, lr_min={}, gamma={}, power={}, cycle_len={}, num_cycles={})",
            p.lr_max, p.lr_min, p.gamma, p.power, p.cycle_len, p.num_cycles
        )
    }
}

/// `H × W × C` per-pixel class probabilities.
#[pyclass(name = "ProbabilityMap", frozen)]
struct PyProbabilityMap(ProbabilityMap);

#[pymethods]
impl PyProbabilityMap {
    #[new]
    fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> PyResult<Self> {
        ProbabilityMap::new(height, width, num_classes, data)
            .map(Self)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ProbabilityMap::load(path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("ProbabilityMap({}x{}x{})", self.0.height(), self.0.width(), self.0.num_classes())
    }
}

/// `H × W` class labels.
#[pyclass(name = "LabelMask", frozen)]
struct PyLabelMask(LabelMask);

#[pymethods]
impl PyLabelMask {
    #[new]
    fn new(height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        LabelMask::new(height, width, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        LabelMask::load(path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn data<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        PyList::new(py, self.0.data())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("LabelMask({}x{})", self.0.height(), self.0.width())
    }
}

/// Per-pixel scalar uncertainty, raw or normalized to `[0, 1]`.
#[pyclass(name = "UncertaintyMap", frozen)]
struct PyUncertaintyMap(UncertaintyMap);

#[pymethods]
impl PyUncertaintyMap {
    #[new]
    #[pyo3(signature = (height, width, measure, data, normalized=true, num_classes=3))]
    fn new(
        height: usize,
        width: usize,
        measure: &str,
        data: Vec<f64>,
        normalized: bool,
        num_classes: usize,
    ) -> PyResult<Self> {
        UncertaintyMap::new(height, width, parse_measure(measure)?, normalized, num_classes, data)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn measure(&self) -> &'static str {
        self.0.measure().name()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.0.is_normalized()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __repr__(&self) -> String {
        let kind = if self.0.is_normalized() { "normalized" } else { "raw" };
        format!("UncertaintyMap({}, {kind}, {}x{})", self.0.measure(), self.0.height(), self.0.width())
    }
}

/// Mean map, predicted mask and both uncertainty measures of one image.
#[pyclass(name = "EnsembleOutput", frozen)]
struct PyEnsembleOutput(EnsembleOutput);

#[pymethods]
impl PyEnsembleOutput {
    #[getter]
    fn mean(&self) -> PyProbabilityMap {
        PyProbabilityMap(self.0.mean.clone())
    }

    #[getter]
    fn mask(&self) -> PyLabelMask {
        PyLabelMask(self.0.mask.clone())
    }

    #[getter]
    fn member_count(&self) -> usize {
        self.0.member_count
    }

    #[pyo3(signature = (measure, normalized=true))]
    fn uncertainty(&self, measure: &str, normalized: bool) -> PyResult<PyUncertaintyMap> {
        Ok(PyUncertaintyMap(self.0.uncertainty(parse_measure(measure)?, normalized).clone()))
    }
}

fn owned_members(members: &[PyRef<'_, PyProbabilityMap>]) -> Vec<ProbabilityMap> {
    members.iter().map(|m| m.0.clone()).collect()
}

#[pyfunction(name = "ensemble")]
#[pyo3(signature = (members, std_reduction="class-mean"))]
fn run_ensemble(members: Vec<PyRef<'_, PyProbabilityMap>>, std_reduction: &str) -> PyResult<PyEnsembleOutput> {
    let reduction = parse_reduction(std_reduction)?;
    EnsembleOutput::from_members(&owned_members(&members), reduction)
        .map(PyEnsembleOutput)
        .map_err(to_py)
}

#[pyfunction]
fn ensemble_mean(members: Vec<PyRef<'_, PyProbabilityMap>>) -> PyResult<PyProbabilityMap> {
    ensemble::ensemble_mean(&owned_members(&members))
        .map(PyProbabilityMap)
        .map_err(to_py)
}

/// Raw per-pixel std across members.
#[pyfunction]
#[pyo3(signature = (members, std_reduction="class-mean"))]
fn std_map(members: Vec<PyRef<'_, PyProbabilityMap>>, std_reduction: &str) -> PyResult<PyUncertaintyMap> {
    let reduction = parse_reduction(std_reduction)?;
    ensemble::std_map_with(&owned_members(&members), reduction)
        .map(PyUncertaintyMap)
        .map_err(to_py)
}

/// Raw predictive entropy of a mean map, in nats.
#[pyfunction]
fn entropy_map(mean: &PyProbabilityMap) -> PyUncertaintyMap {
    PyUncertaintyMap(ensemble::entropy_map(&mean.0))
}

#[pyfunction]
fn predict_mask(mean: &PyProbabilityMap) -> PyLabelMask {
    PyLabelMask(ensemble::predict_mask(&mean.0))
}

#[pyfunction]
fn dice(pred: &PyLabelMask, gt: &PyLabelMask, class: u8) -> PyResult<f64> {
    segmetrics::dice(&pred.0, &gt.0, class).map_err(to_py)
}

#[pyfunction]
fn iou(pred: &PyLabelMask, gt: &PyLabelMask, class: u8) -> PyResult<f64> {
    segmetrics::iou(&pred.0, &gt.0, class).map_err(to_py)
}

/// `None` when either mask lacks the class.
#[pyfunction]
#[pyo3(signature = (pred, gt, class, mode="pooled"))]
fn hd95(pred: &PyLabelMask, gt: &PyLabelMask, class: u8, mode: &str) -> PyResult<Option<f64>> {
    segmetrics::hd95_with(&pred.0, &gt.0, class, parse_hd95_mode(mode)?).map_err(to_py)
}

/// `(overall, per-class recall, mPA)`.
#[pyfunction]
fn pixel_accuracy(
    pred: &PyLabelMask,
    gt: &PyLabelMask,
    num_classes: usize,
) -> PyResult<(f64, Vec<Option<f64>>, f64)> {
    let pa = segmetrics::pixel_accuracy(&pred.0, &gt.0, num_classes).map_err(to_py)?;
    Ok((pa.overall, pa.recall, pa.mpa))
}

/// Squared distance of every pixel to the nearest `True` entry.
#[pyfunction]
fn edt_squared(height: usize, width: usize, foreground: Vec<bool>) -> PyResult<Vec<u64>> {
    segmetrics::edt_squared(height, width, &foreground)
        .map(|d| d.data)
        .map_err(to_py)
}

/// Boundary pixels of a class as `(row, col)`, row-major.
#[pyfunction]
fn boundary(mask: &PyLabelMask, class: u8) -> Vec<(usize, usize)> {
    segmetrics::boundary(&mask.0, class)
}

/// Metrics of every prediction under `pred_dir` as a JSON document.
#[pyfunction]
#[pyo3(signature = (pred_dir, gt_dir, classes=vec![1, 2], num_classes=3, hd95_mode="pooled"))]
fn evaluate(
    pred_dir: PathBuf,
    gt_dir: PathBuf,
    classes: Vec<u8>,
    num_classes: usize,
    hd95_mode: &str,
) -> PyResult<String> {
    let config = EvalConfig {
        classes,
        num_classes,
        hd95_mode: parse_hd95_mode(hd95_mode)?,
    };
    segmetrics::evaluate(&pred_dir, &gt_dir, &config)
        .and_then(|r| r.to_json())
        .map_err(to_py)
}

type BinRow = (f64, f64, Option<f64>, Option<f64>, u64);

/// Per-bin statistics of one measure.
#[pyclass(name = "ReliabilityTable", frozen)]
struct PyReliabilityTable(ReliabilityTable);

#[pymethods]
impl PyReliabilityTable {
    #[staticmethod]
    fn from_csv(text: &str, measure: &str) -> PyResult<Self> {
        calibration::parse_reliability_csv(text, parse_measure(measure)?)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn measure(&self) -> &'static str {
        self.0.measure.name()
    }

    /// `(low, high, mean_uncertainty, error_rate, count)` per bin.
    fn bins(&self) -> Vec<BinRow> {
        self.0
            .bins
            .iter()
            .map(|b| (b.low, b.high, b.mean_uncertainty, b.error_rate, b.count))
            .collect()
    }

    fn total_pixels(&self) -> u64 {
        self.0.total_pixels()
    }

    fn uce(&self) -> PyResult<f64> {
        calibration::uce(&self.0).map_err(to_py)
    }

    fn csv(&self) -> String {
        calibration::reliability_csv(&self.0)
    }

    fn __repr__(&self) -> String {
        format!("ReliabilityTable({}, {} bins)", self.0.measure, self.0.bins.len())
    }
}

/// Streams pixels into uncertainty bins.
#[pyclass(name = "BinAccumulator")]
struct PyBinAccumulator(BinAccumulator);

#[pymethods]
impl PyBinAccumulator {
    #[new]
    #[pyo3(signature = (measure, bins=calibration::DEFAULT_BINS))]
    fn new(measure: &str, bins: usize) -> PyResult<Self> {
        BinAccumulator::new(parse_measure(measure)?, bins)
            .map(Self)
            .map_err(to_py)
    }

    #[getter]
    fn bins(&self) -> usize {
        self.0.bins()
    }

    #[getter]
    fn measure(&self) -> &'static str {
        self.0.measure().name()
    }

    fn bin_of(&self, u: f64) -> usize {
        self.0.bin_of(u)
    }

    /// One normalized uncertainty value and whether the pixel is wrong.
    fn add_pixel(&mut self, u: f64, error: bool) -> PyResult<()> {
        if !(0.0..=1.0).contains(&u) {
            return Err(PyValueError::new_err(format!("uncertainty {u} outside [0, 1]")));
        }
        self.0.add_pixel(u, error);
        Ok(())
    }

    /// Adds a normalized map; errors are where `pred` and `gt` disagree.
    fn add(&mut self, u: &PyUncertaintyMap, pred: &PyLabelMask, gt: &PyLabelMask) -> PyResult<()> {
        let errors = calibration::error_map(&pred.0, &gt.0).map_err(to_py)?;
        self.0.add(&u.0, &errors).map_err(to_py)
    }

    fn merge(&mut self, other: &Self) -> PyResult<()> {
        self.0.merge(&other.0).map_err(to_py)
    }

    fn table(&self) -> PyReliabilityTable {
        PyReliabilityTable(self.0.table())
    }
}

/// Reliability tables (std, then entropy) for an inference directory.
#[pyfunction]
#[pyo3(signature = (infer_dir, gt_dir, bins=calibration::DEFAULT_BINS))]
fn calibrate(infer_dir: PathBuf, gt_dir: PathBuf, bins: usize) -> PyResult<Vec<PyReliabilityTable>> {
    calibration::calibrate_dir(&infer_dir, &gt_dir, bins)
        .map(|ts| ts.into_iter().map(PyReliabilityTable).collect())
        .map_err(to_py)
}

/// `(shape, dtype, values)`; values are widened to float.
#[pyfunction]
fn load_npy(path: PathBuf) -> PyResult<(Vec<usize>, &'static str, Vec<f64>)> {
    let array = gridmaps::load_array(path).map_err(to_py)?;
    Ok((array.shape().to_vec(), array.dtype().descr(), array.data().to_f64()))
}

#[pyfunction]
#[pyo3(signature = (path, shape, data, dtype="<f4"))]
fn save_npy(path: PathBuf, shape: Vec<usize>, data: Vec<f64>, dtype: &str) -> PyResult<()> {
    let payload = match parse_dtype(dtype)? {
        Dtype::F32 => ArrayData::F32(data.iter().map(|&v| v as f32).collect()),
        Dtype::F64 => ArrayData::F64(data),
        Dtype::U8 => ArrayData::U8(
            data.iter()
                .map(|&v| u8::try_from(v as i64).ok().filter(|b| f64::from(*b) == v))
                .collect::<Option<_>>()
                .ok_or_else(|| PyValueError::new_err("u1 arrays need integer values in 0..=255"))?,
        ),
    };
    let array = NpyArray::new(shape, payload).map_err(to_py)?;
    gridmaps::save_array(path, &array).map_err(to_py)
}

#[pymodule]
fn _mpsuq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyProbabilityMap>()?;
    m.add_class::<PyLabelMask>()?;
    m.add_class::<PyUncertaintyMap>()?;
    m.add_class::<PyEnsembleOutput>()?;
    m.add_class::<PyReliabilityTable>()?;
    m.add_class::<PyBinAccumulator>()?;
    m.add_function(wrap_pyfunction!(run_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_mean, m)?)?;
    m.add_function(wrap_pyfunction!(std_map, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_map, m)?)?;
    m.add_function(wrap_pyfunction!(predict_mask, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(edt_squared, m)?)?;
    m.add_function(wrap_pyfunction!(boundary, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(load_npy, m)?)?;
    m.add_function(wrap_pyfunction!(save_npy, m)?)?;
    Ok(())
}
