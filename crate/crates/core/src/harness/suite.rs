//! The full experiment matrix, read from a versioned TOML file.
//!
//! ```toml
//! schema_version = 1
//! seed = 1
//! rounds = 5
//!
//! [[relay]]
//! payload = 1785
//! cts = 128
//!
//! [[stress]]
//! per_tick = 450
//! fastlane = true
//! expect = "fail"
//! ```
//!
//! Top-level keys `latency_us`, `rx_buffer_bytes`, `profile`,
//! `duration_ms` and `grace_ms` are optional. A relay entry without
//! `fastlane` runs both modes and is reported as a pair.

use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::relay::{run_relay, RelayConfig, RelayReport};
use super::report::{emit_report, Format, RelayPair, Report};
use super::stress::{run_stress, StressConfig, StressReport};
use crate::transport::TimingProfile;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    #[default]
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayEntry {
    pub payload: usize,
    pub cts: u8,
    #[serde(default)]
    pub fastlane: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressEntry {
    pub per_tick: u32,
    pub fastlane: bool,
    #[serde(default)]
    pub expect: Expect,
}

fn default_seed() -> u64 {
    1
}
fn default_rounds() -> u32 {
    5
}
fn default_latency() -> u64 {
    50
}
fn default_rx_buffer() -> usize {
    1 << 20
}
fn default_duration() -> u64 {
    10_000
}
fn default_grace() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_latency")]
    pub latency_us: u64,
    #[serde(default = "default_rx_buffer")]
    pub rx_buffer_bytes: usize,
    #[serde(default)]
    pub profile: TimingProfile,
    #[serde(default = "default_duration")]
    pub duration_ms: u64,
    #[serde(default = "default_grace")]
    pub grace_ms: u64,
    #[serde(default)]
    pub relay: Vec<RelayEntry>,
    #[serde(default)]
    pub stress: Vec<StressEntry>,
}

impl Default for SuiteConfig {
    /// Both experiment matrices with the default network parameters.
    fn default() -> Self {
        let relay = [(8, 16), (1000, 16), (1000, 128), (1785, 16), (1785, 128), (5000, 16), (5000, 128), (50_000, 128), (1 << 20, 16), (1 << 20, 128)]
            .into_iter()
            .map(|(payload, cts)| RelayEntry { payload, cts, fastlane: None })
            .collect();
        let mut stress = vec![StressEntry { per_tick: 1, fastlane: false, expect: Expect::Pass }];
        stress.extend([1, 5, 10, 20, 50, 100, 200, 400].map(|per_tick| StressEntry { per_tick, fastlane: true, expect: Expect::Pass }));
        stress.push(StressEntry { per_tick: 450, fastlane: true, expect: Expect::Fail });
        Self {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            rounds: default_rounds(),
            latency_us: default_latency(),
            rx_buffer_bytes: default_rx_buffer(),
            profile: TimingProfile::Standard,
            duration_ms: default_duration(),
            grace_ms: default_grace(),
            relay,
            stress,
        }
    }
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid suite configuration: {0}")]
    Config(String),
}

impl SuiteConfig {
    pub fn from_toml(text: &str) -> Result<Self, SuiteError> {
        let config: Self = toml::from_str(text).map_err(|e| SuiteError::Config(e.to_string()))?;
        if config.schema_version != SCHEMA_VERSION {
            let line = text.lines().position(|l| l.trim_start().starts_with("schema_version")).map_or(1, |i| i + 1);
            return Err(SuiteError::Config(format!(
                "line {line}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn load(path: &str) -> Result<Self, SuiteError> {
        let text = std::fs::read_to_string(path).map_err(|source| SuiteError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    fn relay_config(&self, entry: &RelayEntry, fastlane: bool) -> RelayConfig {
        RelayConfig {
            payload_size: entry.payload,
            cts_packet_count: entry.cts,
            fastlane,
            rounds: self.rounds,
            seed: self.seed,
            latency_us: self.latency_us,
            rx_buffer_bytes: self.rx_buffer_bytes,
            profile: self.profile,
        }
    }

    fn stress_config(&self, entry: &StressEntry) -> StressConfig {
        StressConfig {
            frames_per_tick: entry.per_tick,
            duration_ms: self.duration_ms,
            grace_ms: self.grace_ms,
            fastlane: entry.fastlane,
            seed: self.seed,
            latency_us: self.latency_us,
            rx_buffer_bytes: self.rx_buffer_bytes,
            profile: self.profile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub report: Report,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl SuiteReport {
    pub fn render(&self, format: Format) -> String {
        let mut out = emit_report(&self.report, format);
        match format {
            Format::Table => {
                out.push('\n');
                for c in &self.checks {
                    writeln!(out, "{} {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail).unwrap();
                }
                writeln!(out, "suite {}", if self.pass { "PASS" } else { "FAIL" }).unwrap();
            }
            Format::Records => {
                #[derive(Serialize)]
                struct Summary<'a> {
                    kind: &'static str,
                    seed: u64,
                    checks: &'a [Check],
                    pass: bool,
                }
                let s = Summary { kind: "summary", seed: self.report.seed, checks: &self.checks, pass: self.pass };
                out.push_str(&serde_json::to_string(&s).expect("serializable"));
                out.push('\n');
            }
        }
        out
    }
}

fn check(checks: &mut Vec<Check>, name: String, pass: bool, detail: String) {
    checks.push(Check { name, pass, detail });
}

/// Bounds applied to a relay pair. Load bands are defined for 1785-byte
/// payloads, speedup floors for payloads of at least 1000 bytes.
fn relay_checks(checks: &mut Vec<Check>, pair: &RelayPair) {
    let size = pair.can.config.payload_size;
    let cts = pair.can.config.cts_packet_count;
    let tag = format!("relay {size}B cts={cts}");
    for r in [&pair.can, &pair.fastlane] {
        let mode = if r.config.fastlane { "fastlane" } else { "can" };
        check(
            checks,
            format!("{tag} {mode} integrity"),
            r.pass,
            format!("{} rounds, {} errors, {} bytes verified{}", r.rounds_completed, r.data_errors, r.verified_bytes,
                r.failure.as_ref().map(|f| format!(", {f}")).unwrap_or_default()),
        );
        if let (Some(seen), Some(expected)) = (r.windows_per_hop, r.expected_windows_per_hop) {
            check(checks, format!("{tag} {mode} windows"), seen == expected, format!("{seen} windows, expected {expected}"));
        }
    }
    check(
        checks,
        format!("{tag} fastlane data on CAN"),
        pair.fastlane.can_data_frames == 0,
        format!("{} frames, {:.2}% load", pair.fastlane.can_data_frames, pair.fastlane.can_data_load_percent),
    );
    if size == 1785 {
        let (lo, hi) = if cts >= 128 { (60.0, 85.0) } else { (25.0, 45.0) };
        let load = pair.can.can_bus_load_percent;
        check(checks, format!("{tag} can bus load"), (lo..=hi).contains(&load), format!("{load:.1}% in [{lo}, {hi}]"));
    }
    if size >= 1000 {
        let floor = if cts >= 128 { 4.0 } else { 2.0 };
        let s = pair.speedup();
        check(checks, format!("{tag} speedup"), s >= floor, format!("{s:.2}x >= {floor}x"));
    }
}

fn stress_checks(checks: &mut Vec<Check>, report: &StressReport, expect: Expect) {
    let mode = if report.config.fastlane { "fastlane" } else { "can" };
    let tag = format!("stress {} msg/s {mode}", report.rate);
    let outcome = if report.pass { Expect::Pass } else { Expect::Fail };
    check(
        checks,
        format!("{tag} outcome"),
        outcome == expect,
        format!("{:?}, expected {:?}, loss {:.3}%", outcome, expect, report.loss_percent).to_lowercase(),
    );
    if !report.config.fastlane && report.config.frames_per_tick == 1 {
        let load = report.can_bus_load_percent;
        check(checks, format!("{tag} bus load"), (load - 21.6).abs() <= 1.0, format!("{load:.2}% vs 21.6 +/- 1.0"));
    }
}

pub fn run_suite(config: &SuiteConfig) -> SuiteReport {
    let mut relay_jobs = Vec::new();
    for entry in &config.relay {
        match entry.fastlane {
            None => {
                relay_jobs.push(config.relay_config(entry, false));
                relay_jobs.push(config.relay_config(entry, true));
            }
            Some(fl) => relay_jobs.push(config.relay_config(entry, fl)),
        }
    }
    let stress_jobs: Vec<StressConfig> = config.stress.iter().map(|e| config.stress_config(e)).collect();
    let (relay_results, stress_results): (Vec<RelayReport>, Vec<StressReport>) =
        rayon::join(|| relay_jobs.par_iter().map(run_relay).collect(), || stress_jobs.par_iter().map(run_stress).collect());

    let mut report = Report { seed: config.seed, ..Default::default() };
    let mut results = relay_results.into_iter();
    for entry in &config.relay {
        if entry.fastlane.is_none() {
            let can = results.next().expect("one result per job");
            let fastlane = results.next().expect("one result per job");
            report.relay.push(RelayPair { can, fastlane });
        } else {
            report.relay_single.push(results.next().expect("one result per job"));
        }
    }
    report.stress = stress_results;

    let mut checks = Vec::new();
    for pair in &report.relay {
        relay_checks(&mut checks, pair);
    }
    for r in &report.relay_single {
        check(&mut checks, format!("relay {}B cts={} integrity", r.config.payload_size, r.config.cts_packet_count), r.pass,
            format!("{} errors", r.data_errors));
    }
    for (r, e) in report.stress.iter().zip(&config.stress) {
        stress_checks(&mut checks, r, e.expect);
    }
    let pass = checks.iter().all(|c| c.pass);
    SuiteReport { report, checks, pass }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = SuiteConfig::from_toml("schema_version = 1\n").unwrap();
        assert_eq!(c.rounds, 5);
        assert_eq!(c.rx_buffer_bytes, 1 << 20);
        assert!(c.relay.is_empty());
    }

    #[test]
    fn wrong_schema_is_rejected_with_line() {
        let err = SuiteConfig::from_toml("seed = 3\nschema_version = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = SuiteConfig::from_toml("schema_version = 1\n[[relay]]\npayload = \n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(SuiteConfig::from_toml("schema_version = 1\nrate = 5\n").is_err());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = SuiteConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(SuiteConfig::from_toml(&text).unwrap(), c);
    }
}
