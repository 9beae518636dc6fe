//! Python module `hotspot`: simulation, calibration and frame-by-frame monitoring.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use hotspot_core::decomp::PenaltyConfig;
use hotspot_core::frame::{read_stream as core_read_stream, write_stream, Frame};
use hotspot_core::monitor::{self as mon, CalibrationProfile, GridSpec, MonitorOptions, Target};
use hotspot_core::simulate::{self as sim, ReplicationPlan, SimConfig};
use hotspot_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidParameter { .. } | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn template(width: usize, height: usize, frames: usize, duration: usize) -> SimConfig {
    let mut cfg = SimConfig {
        width,
        height,
        frames,
        ..SimConfig::default()
    };
    let margin = 10f64.min((width.min(height) as f64 - 1.0) / 4.0);
    cfg.lhz.waypoints = sim::raster_path(width, height, margin, 12.0);
    cfg.hotspot.onset = 0;
    cfg.hotspot.duration = duration.min(frames);
    cfg
}

/// Writes `locations` replications per size plus `manifest.csv` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed, sizes=vec![4, 9, 20, 45, 80], locations=1, width=126, height=136, frames=200, onset_min=30, onset_max=50, duration=100))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    out_dir: PathBuf,
    seed: u64,
    sizes: Vec<usize>,
    locations: usize,
    width: usize,
    height: usize,
    frames: usize,
    onset_min: usize,
    onset_max: usize,
    duration: usize,
) -> PyResult<String> {
    let plan = ReplicationPlan {
        sizes,
        locations,
        master_seed: seed,
        onset_min,
        onset_max,
    };
    sim::run_replications(&template(width, height, frames, duration), &plan, &out_dir)
        .map_err(py_err)?;
    Ok(out_dir.join("manifest.csv").display().to_string())
}

/// Writes `count` hot-spot-free streams into `out_dir` and returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, count, seed, width=126, height=136, frames=200))]
fn in_control(
    out_dir: PathBuf,
    count: usize,
    seed: u64,
    width: usize,
    height: usize,
    frames: usize,
) -> PyResult<Vec<String>> {
    std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let cfg = template(width, height, frames, 1);
    let streams = sim::in_control_streams(&cfg, count, seed).map_err(py_err)?;
    let mut paths = Vec::with_capacity(count);
    for (i, s) in streams.iter().enumerate() {
        let p = out_dir.join(format!("ic_{i:03}.stvf"));
        write_stream(s, &p).map_err(py_err)?;
        paths.push(p.display().to_string());
    }
    Ok(paths)
}

/// `(width, height, frames, pixels)` of a stream file; pixels are frame-major bytes.
#[pyfunction]
fn read_stream<'py>(
    py: Python<'py>,
    path: PathBuf,
) -> PyResult<(usize, usize, usize, Bound<'py, PyBytes>)> {
    let s = core_read_stream(&path).map_err(py_err)?;
    Ok((
        s.width,
        s.height,
        s.frame_count,
        PyBytes::new(py, &s.pixels),
    ))
}

#[pyfunction]
fn precision_recall_f1(detected: Vec<usize>, truth: Vec<usize>) -> (f64, f64, f64) {
    hotspot_core::metrics::precision_recall_f1(&detected, &truth)
}

#[pyfunction]
fn hotspot_intensity(t_rel: f64, tau: f64, h: f64) -> f64 {
    sim::hotspot_intensity(t_rel, tau, h)
}

/// Calibrated background, tuning grid and control limit.
#[pyclass(module = "hotspot")]
struct Profile {
    inner: CalibrationProfile,
}

#[pymethods]
impl Profile {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Profile {
            inner: mon::read_profile(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        mon::write_profile(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn control_limit(&self) -> f64 {
        self.inner.control_limit
    }

    #[getter]
    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    /// `(γ₁, γ₂, γ₃)` of every retained grid cell.
    #[getter]
    fn cells(&self) -> Vec<(f64, f64, f64)> {
        self.inner
            .grid
            .cells
            .iter()
            .map(|c| (c.gamma1, c.gamma2, c.gamma3))
            .collect()
    }

    fn __repr__(&self) -> String {
        let (w, h) = self.inner.dims();
        format!(
            "Profile({w}x{h}, cells={}, limit={:.4e})",
            self.inner.grid.cells.len(),
            self.inner.control_limit
        )
    }
}

/// Phase I on in-control stream files with the frame-rate solver.
#[pyfunction]
#[pyo3(signature = (ic_paths, target_fpr=0.01, lambda_=0.3, lambda0=1.0))]
fn calibrate(
    ic_paths: Vec<PathBuf>,
    target_fpr: f64,
    lambda_: f64,
    lambda0: f64,
) -> PyResult<Profile> {
    let streams = ic_paths
        .iter()
        .map(core_read_stream)
        .collect::<hotspot_core::Result<Vec<_>>>()
        .map_err(py_err)?;
    let spec = GridSpec {
        lambda: lambda_,
        lambda0,
        ..GridSpec::default()
    };
    let out = mon::phase1_calibrate(
        &streams,
        &spec,
        Target::Fpr(target_fpr),
        &PenaltyConfig::realtime(),
        None,
    )
    .map_err(py_err)?;
    Ok(Profile { inner: out.profile })
}

/// Runs a whole stream file; returns `alarm_frame`, `statistic` and the localized `mask`
/// (flat pixel indices, empty without an alarm).
#[pyfunction]
#[pyo3(signature = (profile, path, localize_from=0, halt_on_first_alarm=false))]
fn monitor_stream<'py>(
    py: Python<'py>,
    profile: &Profile,
    path: PathBuf,
    localize_from: usize,
    halt_on_first_alarm: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let stream = core_read_stream(&path).map_err(py_err)?;
    let opts = MonitorOptions {
        halt_on_first_alarm,
        localize_from,
    };
    let report = mon::monitor_stream(&stream, &profile.inner, opts).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("alarm_frame", report.alarm_frame)?;
    d.set_item("statistic", report.statistic_trace)?;
    d.set_item("mask", report.mask.map(|m| m.support()).unwrap_or_default())?;
    d.set_item("frame_millis", report.frame_millis)?;
    Ok(d)
}

/// Frame-by-frame monitor.
#[pyclass(module = "hotspot", unsendable)]
struct Monitor {
    inner: mon::Monitor,
}

#[pymethods]
impl Monitor {
    #[new]
    fn new(profile: &Profile) -> PyResult<Self> {
        Ok(Monitor {
            inner: mon::Monitor::new(profile.inner.clone()).map_err(py_err)?,
        })
    }

    /// Consumes one frame of `width * height` bytes; returns `(statistic, alarm)`.
    fn process(&mut self, frame: &[u8]) -> PyResult<(f64, bool)> {
        let (w, h) = self.inner.profile().dims();
        if frame.len() != w * h {
            return Err(PyValueError::new_err(format!(
                "frame has {} bytes, expected {}",
                frame.len(),
                w * h
            )));
        }
        let v = self
            .inner
            .process(&Frame::from_bytes(w, h, frame))
            .map_err(py_err)?;
        Ok((v.value, v.alarm))
    }

    /// Pixel indices of the hot-spot behind the last frame's alarm.
    fn localize(&self) -> PyResult<Vec<usize>> {
        Ok(self.inner.localize().map_err(py_err)?.support())
    }
}

#[pymodule]
fn hotspot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(in_control, m)?)?;
    m.add_function(wrap_pyfunction!(read_stream, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(monitor_stream, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall_f1, m)?)?;
    m.add_function(wrap_pyfunction!(hotspot_intensity, m)?)?;
    m.add_class::<Profile>()?;
    m.add_class::<Monitor>()?;
    Ok(())
}
