//! Python bindings: identifier and frame codecs, the bit-cost model, and the
//! relay and stress experiments.
//!
//! ```python
//! import fastlane
//! raw = fastlane.encode_can_id(6, 0x4B00, 0xDA, 0x80)
//! report = fastlane.run_relay(payload=1785, cts=128, fastlane=True)
//! ```

use std::net::IpAddr;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fastlane_core::aacl::{AaclObject, AaclPayload};
use fastlane_core::can;
use fastlane_core::fastlane as fl;
use fastlane_core::harness::{self, RelayConfig, StressConfig};
use fastlane_core::transport::TimingProfile;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// 29-bit J1939 identifier.
#[pyclass(frozen, eq, hash, from_py_object, module = "fastlane")]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct CanId {
    inner: can::CanId,
}

#[pymethods]
impl CanId {
    #[new]
    #[pyo3(signature = (priority, pgn, destination=0xFF, source=0xFE))]
    fn new(priority: u8, pgn: u32, destination: u8, source: u8) -> PyResult<Self> {
        can::CanId::new(priority, pgn, destination, source).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn from_raw(raw: u32) -> PyResult<Self> {
        can::CanId::from_raw(raw).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn raw(&self) -> u32 {
        self.inner.raw()
    }

    #[getter]
    fn priority(&self) -> u8 {
        self.inner.priority()
    }

    #[getter]
    fn pgn(&self) -> u32 {
        self.inner.pgn()
    }

    #[getter]
    fn destination(&self) -> u8 {
        self.inner.destination_address()
    }

    #[getter]
    fn source(&self) -> u8 {
        self.inner.source_address()
    }

    fn is_broadcast(&self) -> bool {
        self.inner.is_broadcast()
    }

    fn __repr__(&self) -> String {
        format!("CanId(0x{})", self.inner)
    }
}

/// Extended data frame with up to 8 bytes.
#[pyclass(frozen, eq, from_py_object, module = "fastlane")]
#[derive(Clone, Copy, PartialEq, Eq)]
struct CanFrame {
    inner: can::CanFrame,
}

#[pymethods]
impl CanFrame {
    #[new]
    fn new(id: CanId, data: &[u8]) -> PyResult<Self> {
        can::CanFrame::new(id.inner, data).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn id(&self) -> CanId {
        CanId { inner: self.inner.id() }
    }

    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.data())
    }

    /// Stuffed bits on the wire including the fixed tail.
    fn bit_cost(&self) -> u32 {
        can::frame_bit_cost(&self.inner)
    }

    /// The 15-byte datagram image.
    fn to_fastlane<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &fl::encode_fastlane(&self.inner))
    }

    #[staticmethod]
    fn from_fastlane(image: &[u8]) -> PyResult<Self> {
        fl::decode_fastlane(image).map(|inner| Self { inner }).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("CanFrame({:?})", self.inner)
    }
}

#[pyfunction]
fn encode_can_id(priority: u8, pgn: u32, destination: u8, source: u8) -> PyResult<u32> {
    can::encode_can_id(priority, pgn, destination, source).map_err(value_err)
}

/// Returns `(priority, pgn, destination, source)`.
#[pyfunction]
fn decode_can_id(raw: u32) -> PyResult<(u8, u32, u8, u8)> {
    let id = can::decode_can_id(raw).map_err(value_err)?;
    Ok((id.priority(), id.pgn(), id.destination_address(), id.source_address()))
}

#[pyfunction]
fn is_broadcast(raw: u32) -> PyResult<bool> {
    Ok(can::decode_can_id(raw).map_err(value_err)?.is_broadcast())
}

#[pyfunction]
fn frame_bit_cost(raw: u32, data: &[u8]) -> PyResult<u32> {
    let id = can::CanId::from_raw(raw).map_err(value_err)?;
    Ok(can::frame_bit_cost(&can::CanFrame::new(id, data).map_err(value_err)?))
}

#[pyfunction]
fn encode_fastlane<'py>(py: Python<'py>, raw: u32, data: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let id = can::CanId::from_raw(raw).map_err(value_err)?;
    let frame = can::CanFrame::new(id, data).map_err(value_err)?;
    Ok(PyBytes::new(py, &fl::encode_fastlane(&frame)))
}

/// Returns `(raw_id, data)`.
#[pyfunction]
fn decode_fastlane<'py>(py: Python<'py>, image: &[u8]) -> PyResult<(u32, Bound<'py, PyBytes>)> {
    let frame = fl::decode_fastlane(image).map_err(value_err)?;
    Ok((frame.id().raw(), PyBytes::new(py, frame.data())))
}

/// Encodes `[(address, port), ...]` into an AACL payload.
#[pyfunction]
fn encode_aacl<'py>(py: Python<'py>, endpoints: Vec<(String, u16)>) -> PyResult<Bound<'py, PyBytes>> {
    let objects = endpoints
        .into_iter()
        .map(|(addr, port)| {
            let ip: IpAddr = addr.parse().map_err(value_err)?;
            Ok(match ip {
                IpAddr::V4(address) => AaclObject::Ipv4 { address, port },
                IpAddr::V6(address) => AaclObject::Ipv6 { address, port },
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let payload = AaclPayload::new(objects).map_err(value_err)?;
    Ok(PyBytes::new(py, &payload.encode().map_err(value_err)?))
}

/// Decodes an AACL payload into `[(address, port), ...]`.
#[pyfunction]
fn decode_aacl(data: &[u8]) -> PyResult<Vec<(String, u16)>> {
    let payload = AaclPayload::decode(data).map_err(value_err)?;
    Ok(payload.endpoints().iter().map(|e| (e.address().to_string(), e.port())).collect())
}

fn profile(name: &str) -> PyResult<TimingProfile> {
    match name {
        "standard" => Ok(TimingProfile::Standard),
        "accelerated" => Ok(TimingProfile::Accelerated),
        other => Err(PyValueError::new_err(format!("unknown profile {other:?}"))),
    }
}

fn to_dict<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Runs the three-node relay and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (payload=1785, cts=128, fastlane=true, rounds=1, seed=1, latency_us=50, profile_name="standard"))]
#[allow(clippy::too_many_arguments)]
fn run_relay<'py>(
    py: Python<'py>,
    payload: usize,
    cts: u8,
    fastlane: bool,
    rounds: u32,
    seed: u64,
    latency_us: u64,
    profile_name: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let config = RelayConfig {
        payload_size: payload,
        cts_packet_count: cts,
        fastlane,
        rounds,
        seed,
        latency_us,
        profile: profile(profile_name)?,
        ..Default::default()
    };
    let report = py.detach(|| harness::run_relay(&config));
    to_dict(py, &report)
}

/// Runs the two-node stress test and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (per_tick=10, fastlane=true, duration_ms=10_000, grace_ms=500, seed=1, rx_buffer=1 << 20))]
fn run_stress<'py>(
    py: Python<'py>,
    per_tick: u32,
    fastlane: bool,
    duration_ms: u64,
    grace_ms: u64,
    seed: u64,
    rx_buffer: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let config = StressConfig {
        frames_per_tick: per_tick,
        duration_ms,
        grace_ms,
        fastlane,
        seed,
        rx_buffer_bytes: rx_buffer,
        ..Default::default()
    };
    let report = py.detach(|| harness::run_stress(&config));
    to_dict(py, &report)
}

#[pymodule]
fn fastlane(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<CanId>()?;
    m.add_class::<CanFrame>()?;
    m.add_function(wrap_pyfunction!(encode_can_id, m)?)?;
    m.add_function(wrap_pyfunction!(decode_can_id, m)?)?;
    m.add_function(wrap_pyfunction!(is_broadcast, m)?)?;
    m.add_function(wrap_pyfunction!(frame_bit_cost, m)?)?;
    m.add_function(wrap_pyfunction!(encode_fastlane, m)?)?;
    m.add_function(wrap_pyfunction!(decode_fastlane, m)?)?;
    m.add_function(wrap_pyfunction!(encode_aacl, m)?)?;
    m.add_function(wrap_pyfunction!(decode_aacl, m)?)?;
    m.add_function(wrap_pyfunction!(run_relay, m)?)?;
    m.add_function(wrap_pyfunction!(run_stress, m)?)?;
    Ok(())
}
