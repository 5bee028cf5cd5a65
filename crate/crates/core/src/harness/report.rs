//! Table and JSON-lines rendering.
//!
//! Records format: one JSON object per line. Relay lines carry
//! `"kind": "relay"` plus the [`RelayReport`] fields; stress lines carry
//! `"kind": "stress"` plus the [`StressReport`] fields. Suite runs add a
//! final `"kind": "summary"` line.

use std::fmt::Write;

use serde::Serialize;

use super::relay::RelayReport;
use super::stress::StressReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Table,
    Records,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Self::Table),
            "records" => Ok(Self::Records),
            other => Err(format!("unknown format {other:?}, expected table or records")),
        }
    }
}

/// A CAN-only run and its FastLane counterpart for the same payload.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelayPair {
    pub can: RelayReport,
    pub fastlane: RelayReport,
}

impl RelayPair {
    pub fn speedup(&self) -> f64 {
        if self.fastlane.ms_per_round > 0.0 {
            self.can.ms_per_round / self.fastlane.ms_per_round
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub relay: Vec<RelayPair>,
    /// Relay runs without a counterpart.
    pub relay_single: Vec<RelayReport>,
    pub stress: Vec<StressReport>,
}

fn payload_label(size: usize, cts: u8) -> String {
    let size = match size {
        8 => return "8B single frame".into(),
        s if s >= 1 << 20 && s % (1 << 20) == 0 => format!("{}MB", s >> 20),
        s if s >= 1000 && s % 1000 == 0 => format!("{}KB", s / 1000),
        s => format!("{s}B"),
    };
    format!("{size} (CTS={cts})")
}

fn ms(v: f64) -> String {
    if v >= 100_000.0 {
        format!("{:.0}k", v / 1000.0)
    } else {
        format!("{v:.0}")
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn render_table(report: &Report) -> String {
    let mut out = String::new();
    writeln!(out, "seed {}", report.seed).unwrap();
    if !report.relay.is_empty() || !report.relay_single.is_empty() || report.stress.is_empty() {
        writeln!(
            out,
            "{:<20} | {:>10} | {:>10} | {:>8} | {:>8} | {:>8} | {:>6} | {}",
            "Payload (CTS)", "CAN ms/rnd", "FL ms/rnd", "Speedup", "CAN bus%", "FL data%", "Errors", "Result"
        )
        .unwrap();
        for p in &report.relay {
            writeln!(
                out,
                "{:<20} | {:>10} | {:>10} | {:>7.1}x | {:>8.1} | {:>8.1} | {:>6} | {}",
                payload_label(p.can.config.payload_size, p.can.config.cts_packet_count),
                ms(p.can.ms_per_round),
                ms(p.fastlane.ms_per_round),
                p.speedup(),
                p.can.can_bus_load_percent,
                p.fastlane.can_data_load_percent,
                p.can.data_errors + p.fastlane.data_errors,
                verdict(p.can.pass && p.fastlane.pass),
            )
            .unwrap();
        }
        for r in &report.relay_single {
            let (can, fl) = if r.config.fastlane { ("-".into(), ms(r.ms_per_round)) } else { (ms(r.ms_per_round), "-".into()) };
            writeln!(
                out,
                "{:<20} | {:>10} | {:>10} | {:>8} | {:>8.1} | {:>8} | {:>6} | {}",
                payload_label(r.config.payload_size, r.config.cts_packet_count),
                can,
                fl,
                "-",
                r.can_bus_load_percent,
                if r.config.fastlane { format!("{:.1}", r.can_data_load_percent) } else { "-".into() },
                r.data_errors,
                verdict(r.pass),
            )
            .unwrap();
        }
    }
    if !report.stress.is_empty() {
        if !report.relay.is_empty() || !report.relay_single.is_empty() {
            out.push('\n');
        }
        writeln!(
            out,
            "{:>8} | {:>8} | {:<8} | {:>8} | {:>8} | {:>6} | {:>10} | {:>8} | {}",
            "Rate", "Per tick", "Mode", "Sent", "Rcvd", "Loss", "Equiv. CAN", "CAN bus%", "Result"
        )
        .unwrap();
        for s in &report.stress {
            let sent = s.a_to_b.sent.min(s.b_to_a.sent);
            let rcvd = s.a_to_b.received.min(s.b_to_a.received);
            writeln!(
                out,
                "{:>8} | {:>8} | {:<8} | {:>8} | {:>8} | {:>5.2}% | {:>9.1}% | {:>8.1} | {}",
                s.rate,
                s.config.frames_per_tick,
                if s.config.fastlane { "FastLane" } else { "CAN" },
                sent,
                rcvd,
                s.loss_percent,
                s.equivalent_can_load_percent,
                s.can_bus_load_percent,
                verdict(s.pass),
            )
            .unwrap();
        }
    }
    out
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    kind: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

fn line<T: Serialize>(out: &mut String, kind: &'static str, body: &T) {
    out.push_str(&serde_json::to_string(&Tagged { kind, body }).expect("reports serialize"));
    out.push('\n');
}

pub fn render_records(report: &Report) -> String {
    let mut out = String::new();
    for p in &report.relay {
        line(&mut out, "relay", &p.can);
        line(&mut out, "relay", &p.fastlane);
    }
    for r in &report.relay_single {
        line(&mut out, "relay", r);
    }
    for s in &report.stress {
        line(&mut out, "stress", s);
    }
    out
}

pub fn emit_report(report: &Report, format: Format) -> String {
    match format {
        Format::Table => render_table(report),
        Format::Records => render_records(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_has_header() {
        let text = emit_report(&Report::default(), Format::Table);
        assert!(text.contains("Payload (CTS)"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn empty_records_are_empty() {
        assert!(emit_report(&Report::default(), Format::Records).is_empty());
    }

    #[test]
    fn labels() {
        assert_eq!(payload_label(8, 16), "8B single frame");
        assert_eq!(payload_label(1785, 128), "1785B (CTS=128)");
        assert_eq!(payload_label(5000, 16), "5KB (CTS=16)");
        assert_eq!(payload_label(1 << 20, 128), "1MB (CTS=128)");
    }
}
