//! Analytic weight-memory and compute accounting.
//!
//! Memory is charged per stored weight (3/2/1 bits naively, `log2(levels)`
//! bits with entropy coding). Compute is reported as MACs, MAC×bit
//! (`MACs · b_w`) and BOPs (`MACs · b_a · b_w`), where `b_w` is the entropy
//! weight bitwidth unless naive bitwidths are requested and `b_a` is the
//! bitwidth of the layer's input activations. One Mb is `10^6` bits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::topology::{topology, BottleneckKind, LayerKind, LayerSpec, ModelConfig, Topology, WeightPrecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitMode {
    Naive,
    Entropy,
}

impl std::str::FromStr for BitMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(BitMode::Naive),
            "entropy" => Ok(BitMode::Entropy),
            other => Err(crate::Error::Config(format!("unknown bit mode `{other}`"))),
        }
    }
}

fn weight_bitwidth(w: WeightPrecision, mode: BitMode) -> f64 {
    match mode {
        BitMode::Naive => w.bits() as f64,
        BitMode::Entropy => w.entropy_bits(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub weight_bits: f64,
    pub macs: u64,
    /// Weight bitwidth used by the compute metrics.
    pub b_w: f64,
    /// Input activation bitwidth.
    pub b_a: u8,
    pub mac_bit: f64,
    pub bops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub memory_mode: BitMode,
    pub compute_mode: BitMode,
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_weight_bits: f64,
    pub total_macs: u64,
    pub total_mac_bit: f64,
    pub total_bops: f64,
}

/// Rounds half-up to three decimals, the precision of the reference tables.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0 + 0.5).floor() / 1000.0
}

/// Stored bits of one layer; fixed projections are regenerated, not stored.
pub fn layer_memory_bits(layer: &LayerSpec, mode: BitMode) -> f64 {
    match (layer.weight, layer.kind) {
        (_, LayerKind::Rademacher { .. }) => 0.0,
        (Some(w), _) => layer.param_count() as f64 * weight_bitwidth(w, mode),
        (None, _) => 0.0,
    }
}

/// Per-layer weight memory in bits.
pub fn memory_bits(topology: &Topology, mode: BitMode) -> Vec<(String, f64)> {
    topology
        .weighted()
        .map(|l| (l.name.clone(), layer_memory_bits(l, mode)))
        .collect()
}

/// Per-layer multiply-accumulates.
pub fn mac_count(topology: &Topology) -> Vec<(String, u64)> {
    topology.weighted().map(|l| (l.name.clone(), l.macs())).collect()
}

fn compute_width(layer: &LayerSpec, mode: BitMode) -> f64 {
    // Fixed ±1 projections compute like binary layers.
    layer.weight.map_or(1.0, |w| weight_bitwidth(w, mode))
}

/// Per-layer `MACs · b_w`.
pub fn mac_bit(topology: &Topology, mode: BitMode) -> Vec<(String, f64)> {
    topology
        .weighted()
        .map(|l| (l.name.clone(), l.macs() as f64 * compute_width(l, mode)))
        .collect()
}

/// Per-layer `MACs · b_a · b_w`.
pub fn bops(topology: &Topology, mode: BitMode) -> Vec<(String, f64)> {
    topology
        .weighted()
        .map(|l| {
            (
                l.name.clone(),
                l.macs() as f64 * l.input_bits as f64 * compute_width(l, mode),
            )
        })
        .collect()
}

pub fn cost_report(config: &ModelConfig, memory_mode: BitMode, compute_mode: BitMode) -> Result<CostReport> {
    let topo = topology(config)?;
    let rows: Vec<LayerCost> = topo
        .weighted()
        .map(|l| {
            let b_w = compute_width(l, compute_mode);
            let macs = l.macs();
            LayerCost {
                name: l.name.clone(),
                params: match l.kind {
                    LayerKind::Rademacher { .. } => 0,
                    _ => l.param_count(),
                },
                weight_bits: layer_memory_bits(l, memory_mode),
                macs,
                b_w,
                b_a: l.input_bits,
                mac_bit: macs as f64 * b_w,
                bops: macs as f64 * b_w * l.input_bits as f64,
            }
        })
        .collect();
    Ok(CostReport {
        memory_mode,
        compute_mode,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_weight_bits: rows.iter().map(|r| r.weight_bits).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_mac_bit: rows.iter().map(|r| r.mac_bit).sum(),
        total_bops: rows.iter().map(|r| r.bops).sum(),
        rows,
    })
}

impl CostReport {
    pub fn memory_mb(&self) -> f64 {
        self.total_weight_bits / 1e6
    }

    pub fn mac_bit_g(&self) -> f64 {
        self.total_mac_bit / 1e9
    }

    pub fn bops_g(&self) -> f64 {
        self.total_bops / 1e9
    }

    /// Aligned text table with a totals line.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>14} {:>12} {:>6} {:>4} {:>16} {:>16}",
            "layer", "params", "weight_bits", "macs", "b_w", "b_a", "mac_x_bit", "bops"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>10} {:>14.1} {:>12} {:>6.3} {:>4} {:>16.1} {:>16.1}",
                r.name, r.params, r.weight_bits, r.macs, r.b_w, r.b_a, r.mac_bit, r.bops
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>14.1} {:>12} {:>6} {:>4} {:>16.1} {:>16.1}",
            "total", self.total_params, self.total_weight_bits, self.total_macs, "", "", self.total_mac_bit, self.total_bops
        );
        let _ = writeln!(out, "memory (Mb, {:?}): {:.3}", self.memory_mode, round3(self.memory_mb()));
        let _ = writeln!(out, "MACxbit (x10^9): {:.3}", round3(self.mac_bit_g()));
        let _ = writeln!(out, "BOPs (x10^9): {:.3}", round3(self.bops_g()));
        out
    }

    /// One JSON record per layer followed by a totals record.
    pub fn render_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            let mut v = serde_json::to_value(r)?;
            v["record"] = "layer".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        let totals = serde_json::json!({
            "record": "total",
            "memory_mode": self.memory_mode,
            "compute_mode": self.compute_mode,
            "params": self.total_params,
            "weight_bits": self.total_weight_bits,
            "macs": self.total_macs,
            "mac_bit": self.total_mac_bit,
            "bops": self.total_bops,
            "memory_mb": round3(self.memory_mb()),
            "mac_bit_g": round3(self.mac_bit_g()),
            "bops_g": round3(self.bops_g()),
        });
        out.push_str(&serde_json::to_string(&totals)?);
        out.push('\n');
        Ok(out)
    }
}

/// Naive weight memory of the bottleneck layers alone, in bits.
pub fn bottleneck_bits(f: usize, kind: BottleneckKind) -> Result<f64> {
    let config = ModelConfig {
        bottleneck: kind,
        ..ModelConfig::full(f)
    };
    let topo = topology(&config)?;
    Ok(topo
        .weighted()
        .filter(|l| l.name.starts_with("bottleneck"))
        .map(|l| layer_memory_bits(l, BitMode::Naive))
        .sum())
}

/// Naive weight memory of everything but the bottleneck, in bits.
pub fn without_bottleneck_bits(f: usize) -> Result<f64> {
    let topo = topology(&ModelConfig::full(f))?;
    Ok(topo
        .weighted()
        .filter(|l| !l.name.starts_with("bottleneck"))
        .map(|l| layer_memory_bits(l, BitMode::Naive))
        .sum())
}

pub const APPENDIX_SCALES: [usize; 3] = [32, 64, 128];

/// The bottleneck memory comparison: rows are model scales, columns the
/// trunk without bottleneck and the three bottleneck designs (Mb).
pub fn bottleneck_table() -> Result<Vec<(usize, [f64; 4])>> {
    APPENDIX_SCALES
        .iter()
        .map(|&f| {
            Ok((
                f,
                [
                    round3(without_bottleneck_bits(f)? / 1e6),
                    round3(bottleneck_bits(f, BottleneckKind::Lfc)? / 1e6),
                    round3(bottleneck_bits(f, BottleneckKind::Rcs)? / 1e6),
                    round3(bottleneck_bits(f, BottleneckKind::Dwconv)? / 1e6),
                ],
            ))
        })
        .collect()
}

pub fn render_bottleneck_table() -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "Bottleneck weight memory (Mb, naive encoding)");
    let _ = writeln!(
        out,
        "{:<6} {:>18} {:>10} {:>10} {:>10}",
        "F", "without_bottleneck", "LFC", "RCS+FC", "DWConv+FC"
    );
    for (f, cells) in bottleneck_table()? {
        let _ = writeln!(
            out,
            "{:<6} {:>18.3} {:>10.3} {:>10.3} {:>10.3}",
            f, cells[0], cells[1], cells[2], cells[3]
        );
    }
    Ok(out)
}

/// Memory, MAC×bit and BOPs of the mixed and binary encoders at `f`.
pub fn render_processor_table(f: usize) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "Encoder + classifier cost at F = {f}");
    let _ = writeln!(out, "{:<22} {:>10} {:>10}", "metric", "mixed", "binary");
    let mixed = cost_report(&ModelConfig::full(f), BitMode::Naive, BitMode::Entropy)?;
    let binary = cost_report(
        &ModelConfig {
            precision: crate::topology::Precision::Binary,
            ..ModelConfig::full(f)
        },
        BitMode::Naive,
        BitMode::Entropy,
    )?;
    for (label, a, b) in [
        ("memory (Mb)", mixed.memory_mb(), binary.memory_mb()),
        ("MACxbit (x10^9)", mixed.mac_bit_g(), binary.mac_bit_g()),
        ("BOPs (x10^9)", mixed.bops_g(), binary.bops_g()),
    ] {
        let _ = writeln!(out, "{:<22} {:>10.3} {:>10.3}", label, round3(a), round3(b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Precision;

    fn mixed(f: usize) -> CostReport {
        cost_report(&ModelConfig::full(f), BitMode::Naive, BitMode::Entropy).unwrap()
    }

    fn binary(f: usize) -> CostReport {
        cost_report(
            &ModelConfig {
                precision: Precision::Binary,
                ..ModelConfig::full(f)
            },
            BitMode::Naive,
            BitMode::Entropy,
        )
        .unwrap()
    }

    #[test]
    fn per_layer_macs() {
        let r = mixed(64);
        let macs = |n: &str| r.rows.iter().find(|row| row.name == n).unwrap().macs;
        assert_eq!(macs("conv1"), 32 * 32 * 3 * 3 * 3 * 64);
        assert_eq!(macs("conv1"), 1_769_472);
        assert_eq!(macs("gconv"), 8 * 8 * 9 * 64 * 256);
        assert_eq!(macs("gconv"), 9_437_184);
        assert_eq!(macs("classifier"), 2_560);
    }

    #[test]
    fn totals_are_row_sums_and_naive_dominates() {
        for f in [8, 32, 64] {
            let naive = mixed(f);
            let entropy = cost_report(&ModelConfig::full(f), BitMode::Entropy, BitMode::Entropy).unwrap();
            assert_eq!(naive.total_macs, naive.rows.iter().map(|r| r.macs).sum::<u64>());
            assert!(naive.total_weight_bits >= entropy.total_weight_bits);
        }
    }

    #[test]
    fn reference_processor_cells() {
        assert_eq!(mixed(64).total_weight_bits, 1_072_704.0);
        assert_eq!(binary(64).total_weight_bits, 774_336.0);
        assert_eq!(round3(mixed(64).memory_mb()), 1.073);
        assert_eq!(round3(binary(64).memory_mb()), 0.774);
        assert_eq!(round3(mixed(64).mac_bit_g()), 0.210);
        assert_eq!(round3(binary(64).mac_bit_g()), 0.125);
        assert_eq!(round3(mixed(64).bops_g()), 0.287);
        assert_eq!(round3(binary(64).bops_g()), 0.137);
    }

    #[test]
    fn binary_layers_have_equal_metrics() {
        let r = binary(64);
        let gc = r.rows.iter().find(|row| row.name == "gconv").unwrap();
        assert_eq!(gc.mac_bit, gc.macs as f64);
        assert_eq!(gc.bops, gc.macs as f64);
    }

    #[test]
    fn bottleneck_memory_cells() {
        let table = bottleneck_table().unwrap();
        let expect = [
            (32, [0.253, 0.262, 0.016, 0.018]),
            (64, [1.003, 1.049, 0.066, 0.070]),
            (128, [3.997, 4.194, 0.262, 0.270]),
        ];
        for ((f, cells), (ef, ecells)) in table.iter().zip(expect) {
            assert_eq!(*f, ef);
            assert_eq!(*cells, ecells, "F = {f}");
        }
    }

    #[test]
    fn trunk_scales_quadratically() {
        let a = without_bottleneck_bits(64).unwrap();
        let b = without_bottleneck_bits(128).unwrap();
        // 243F² + 121F: the ratio tends to 4 from below.
        assert_eq!(a, 243.0 * 64.0 * 64.0 + 121.0 * 64.0);
        assert!(b / a > 3.98 && b / a < 4.0);
        let dw = |f: usize| {
            let t = topology(&ModelConfig::full(f)).unwrap();
            t.layers.iter().find(|l| l.name == "bottleneck.dw").unwrap().param_count()
        };
        assert_eq!(dw(128), 2 * dw(64));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round3(0.2874), 0.287);
        assert_eq!(round3(0.2099), 0.210);
        assert_eq!(round3(1.0725), 1.073);
    }
}
