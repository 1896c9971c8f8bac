//! Analytic throughput model for the propagation workload.
//!
//! Per propagation step the dominant matrix work is the larger of the
//! recurrent-cell side (2·N·H² multiply-adds across N node states) and the
//! per-edge-type propagation side (E·H²/C, since each of the C edge types owns
//! an H×H matrix applied to its E/C edges). A multiply-add counts as two
//! floating-point operations, and the backward pass costs three forwards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputModel {
    /// Hidden dimension H.
    pub hidden: f64,
    /// Mean nodes per graph N.
    pub nodes: f64,
    /// Mean edges per graph E.
    pub edges: f64,
    /// Edge-type count C.
    pub edge_types: f64,
    /// Propagation steps per sample.
    pub steps: f64,
    /// Device peak floating-point throughput, FLOP/s.
    pub device_flops: f64,
    /// Achieved fraction of peak.
    #[serde(default = "default_overhead")]
    pub overhead: f64,
    /// Wire width of one scalar.
    #[serde(default = "default_bits_per_scalar")]
    pub bits_per_scalar: f64,
}

fn default_overhead() -> f64 {
    0.5
}

fn default_bits_per_scalar() -> f64 {
    32.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Forward FLOPs per propagation step.
    pub fwdop: f64,
    /// Backward FLOPs per propagation step.
    pub bwdop: f64,
    pub samples_per_s: f64,
    pub bandwidth_bits_per_s: f64,
}

#[derive(Debug, Error)]
#[error("{field} must be positive and finite, got {value}")]
pub struct EstimateError {
    pub field: &'static str,
    pub value: f64,
}

pub fn estimate(m: &ThroughputModel) -> Result<Estimate, EstimateError> {
    for (field, value) in [
        ("hidden", m.hidden),
        ("nodes", m.nodes),
        ("edges", m.edges),
        ("edge_types", m.edge_types),
        ("steps", m.steps),
        ("device_flops", m.device_flops),
        ("overhead", m.overhead),
        ("bits_per_scalar", m.bits_per_scalar),
    ] {
        if !(value.is_finite() && value > 0.0) {
            return Err(EstimateError { field, value });
        }
    }

    let h2 = m.hidden * m.hidden;
    let fwdop = 2.0 * (2.0 * m.nodes * h2).max(m.edges * h2 / m.edge_types);
    let bwdop = 3.0 * fwdop;
    let samples_per_s = m.overhead * m.device_flops / ((fwdop + bwdop) * m.steps);
    let bandwidth_bits_per_s = m.bits_per_scalar * samples_per_s * m.nodes.max(m.edges) * m.hidden;
    Ok(Estimate {
        fwdop,
        bwdop,
        samples_per_s,
        bandwidth_bits_per_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_model() -> ThroughputModel {
        ThroughputModel {
            hidden: 200.0,
            nodes: 30.0,
            edges: 30.0,
            edge_types: 4.0,
            steps: 4.0,
            device_flops: 1e12,
            overhead: 0.5,
            bits_per_scalar: 32.0,
        }
    }

    #[test]
    fn reference_workload_to_two_significant_figures() {
        let e = estimate(&reference_model()).unwrap();
        assert_eq!(format!("{:.1e}", e.samples_per_s), "6.5e3");
        assert_eq!(format!("{:.1e}", e.bandwidth_bits_per_s), "1.2e9");
    }

    #[test]
    fn tiny_workload_op_counts() {
        let m = ThroughputModel {
            hidden: 1.0,
            nodes: 1.0,
            edges: 8.0,
            edge_types: 4.0,
            ..reference_model()
        };
        let e = estimate(&m).unwrap();
        assert_eq!(e.fwdop, 4.0);
        assert_eq!(e.bwdop, 12.0);
    }

    #[test]
    fn estimate_is_pure() {
        let m = reference_model();
        let a = estimate(&m).unwrap();
        let b = estimate(&m).unwrap();
        assert_eq!(a.samples_per_s.to_bits(), b.samples_per_s.to_bits());
        assert_eq!(
            a.bandwidth_bits_per_s.to_bits(),
            b.bandwidth_bits_per_s.to_bits()
        );
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let mut m = reference_model();
        m.edge_types = 0.0;
        assert!(estimate(&m).is_err());
        m.edge_types = 4.0;
        m.device_flops = f64::INFINITY;
        assert!(estimate(&m).is_err());
    }

    #[test]
    fn defaults_fill_overhead_and_wire_width() {
        let m: ThroughputModel = serde_json::from_str(
            r#"{"hidden":200,"nodes":30,"edges":30,"edge_types":4,"steps":4,"device_flops":1e12}"#,
        )
        .unwrap();
        assert_eq!(m.overhead, 0.5);
        assert_eq!(m.bits_per_scalar, 32.0);
    }
}
