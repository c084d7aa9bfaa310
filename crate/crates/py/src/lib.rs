//! Python bindings: overlay construction and validation, the slot oracle,
//! churn repair, the closed-form delay models and the network simulator.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use snap_core::delay::{opst_delay, sbt_avg_exact_pow2, sbt_delay, DelayModel};
use snap_core::membership::{handle_departure, join_backbone};
use snap_core::netsim::{run_hybrid_sim, ScenarioConfig};
use snap_core::overlay::{self as ov, depth_for, peers, LevelPolicy, OverlayDoc, PeerId};
use snap_core::schedule::{simulate_slots, table_sizes};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn policy(name: &str) -> PyResult<LevelPolicy> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| err(format!("unknown policy {name:?}; use auto, single-level, greedy or low-levels")))
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A multi-snowball-tree overlay.
#[pyclass(frozen, module = "snap_py")]
struct Overlay {
    inner: ov::MultiSbtOverlay,
}

#[pymethods]
impl Overlay {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn period(&self) -> usize {
        self.inner.period()
    }

    fn peers(&self) -> Vec<u32> {
        self.inner.peer_order().into_iter().map(|p| p.0).collect()
    }

    /// Levels of tree `i`, root first.
    fn tree_levels(&self, i: usize) -> PyResult<Vec<Vec<u32>>> {
        if i >= self.inner.period() {
            return Err(err(format!("tree {i} out of range (P = {})", self.inner.period())));
        }
        Ok(self
            .inner
            .tree(i)
            .levels
            .iter()
            .map(|l| l.iter().map(|p| p.0).collect())
            .collect())
    }

    /// Validator failures; empty when the overlay is sound.
    fn validate(&self) -> Vec<String> {
        match ov::validate_prop2(&self.inner) {
            Ok(()) => Vec::new(),
            Err(r) => r.failures.iter().map(|f| f.to_string()).collect(),
        }
    }

    fn iset_sizes(&self) -> PyResult<Vec<usize>> {
        (0..self.inner.period())
            .map(|a| ov::iset(&self.inner, a).map(|s| s.members.len()).map_err(err))
            .collect()
    }

    fn table_max(&self) -> usize {
        table_sizes(&self.inner).iter().map(|t| t.distinct).max().unwrap_or(0)
    }

    /// Slot oracle over `chunks` chunks: rows `(chunk, peer, emit_slot, recv_slot)`
    /// plus the largest lag and violation count.
    fn simulate_slots<'py>(&self, py: Python<'py>, chunks: u64) -> PyResult<Bound<'py, PyDict>> {
        let run = simulate_slots(&self.inner, chunks).map_err(err)?;
        let rows: Vec<(u64, u32, u64, u64)> = run
            .traces
            .iter()
            .flat_map(|t| t.delivery.iter().map(move |(p, s)| (t.chunk, p.0, t.emit_slot, *s)))
            .collect();
        let d = PyDict::new(py);
        d.set_item("max_lag", run.max_lag())?;
        d.set_item("violations", run.violations.len())?;
        d.set_item("optimal", run.is_optimal(self.inner.depth()))?;
        d.set_item("deliveries", rows)?;
        Ok(d)
    }

    /// Overlay after `peer` leaves and the repair plan is applied.
    fn depart(&self, peer: u32) -> PyResult<Overlay> {
        let plan = handle_departure(&self.inner, PeerId(peer)).map_err(err)?;
        Ok(Overlay {
            inner: plan.apply(&self.inner).map_err(err)?,
        })
    }

    #[pyo3(signature = (peer, policy_name = "auto"))]
    fn join(&self, peer: u32, policy_name: &str) -> PyResult<Overlay> {
        let (o, _) = join_backbone(&self.inner, PeerId(peer), &policy(policy_name)?).map_err(err)?;
        Ok(Overlay { inner: o })
    }

    fn to_json(&self) -> String {
        OverlayDoc::from_overlay(&self.inner).to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Overlay> {
        let doc = OverlayDoc::from_json(text).map_err(err)?;
        Ok(Overlay {
            inner: doc.to_overlay().map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Overlay(n={}, depth={}, period={})", self.inner.n(), self.inner.depth(), self.inner.period())
    }
}

/// Overlay over peers `0..n`.
#[pyfunction]
#[pyo3(signature = (n, policy_name = "auto"))]
fn build_overlay(n: u32, policy_name: &str) -> PyResult<Overlay> {
    Ok(Overlay {
        inner: ov::build_overlay(&peers(0..n), &policy(policy_name)?).map_err(err)?,
    })
}

/// Closed-form max and average delays of OPST and the snowball tree.
#[pyfunction]
fn analytic<'py>(py: Python<'py>, n: usize, d: f64, t: f64) -> PyResult<Bound<'py, PyDict>> {
    if n < 2 {
        return Err(err("n must be at least 2"));
    }
    let m = DelayModel::new(d, t).map_err(err)?;
    let (omax, oavg) = opst_delay(n, m);
    let (smax, savg) = sbt_delay(n, m);
    let out = PyDict::new(py);
    out.set_item("opst_max", omax)?;
    out.set_item("opst_avg", oavg)?;
    out.set_item("sbt_max", smax)?;
    out.set_item("sbt_avg", savg)?;
    if n.is_power_of_two() {
        out.set_item("sbt_avg_exact", sbt_avg_exact_pow2(depth_for(n), m))?;
    }
    Ok(out)
}

/// The desk-scale hybrid scenario as JSON.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn default_scenario(seed: u64) -> String {
    serde_json::to_string_pretty(&ScenarioConfig::hybrid_default(seed)).expect("serializes")
}

/// Churn-free scenario with uniform link delay `d` and chunk time `t`, as JSON.
#[pyfunction]
fn calibration_scenario(n: usize, d: f64, t: f64, chunks: u64) -> String {
    serde_json::to_string_pretty(&ScenarioConfig::calibration(n, d, t, chunks)).expect("serializes")
}

fn run(config: &str) -> PyResult<(ScenarioConfig, snap_core::netsim::MetricsReport)> {
    let cfg = ScenarioConfig::from_json(config).map_err(err)?;
    let r = run_hybrid_sim(&cfg).map_err(err)?;
    Ok((cfg, r))
}

/// Runs a scenario given as JSON and returns its summary as a dict.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, r) = py.detach(|| run(config))?;
    json_to_py(py, &serde_json::to_string(&r.summary(&cfg)).expect("serializes"))
}

/// Runs a scenario and returns the long-format metrics CSV.
#[pyfunction]
fn metrics_csv(py: Python<'_>, config: &str) -> PyResult<String> {
    let (_, r) = py.detach(|| run(config))?;
    let mut buf = Vec::new();
    r.write_csv(None, &mut buf).map_err(err)?;
    String::from_utf8(buf).map_err(err)
}

#[pymodule]
fn snap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Overlay>()?;
    m.add_function(wrap_pyfunction!(build_overlay, m)?)?;
    m.add_function(wrap_pyfunction!(analytic, m)?)?;
    m.add_function(wrap_pyfunction!(default_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_csv, m)?)?;
    Ok(())
}
