//! First-order latency model for fetching offloaded experts over a host link.
//!
//! Fetching an expert moves `raw_bytes / ratio` over the link and then
//! decompresses `raw_bytes` of output; with overlap the two stages pipeline
//! and the slower one dominates, otherwise they add.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertId, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferParams {
    /// Host-to-device link, bytes/s.
    pub pcie_bandwidth: f64,
    /// Device memory, bytes/s.
    pub gpu_mem_bandwidth: f64,
    /// Decompressed output produced per second.
    pub decompress_throughput: f64,
    pub overlap: bool,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            pcie_bandwidth: 32e9,
            gpu_mem_bandwidth: 300e9,
            decompress_throughput: 300e9,
            overlap: true,
        }
    }
}

impl TransferParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pcie_bandwidth", self.pcie_bandwidth),
            ("gpu_mem_bandwidth", self.gpu_mem_bandwidth),
            ("decompress_throughput", self.decompress_throughput),
        ] {
            if !(v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn transfer_time(bytes: f64, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::Domain(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if !(bytes >= 0.0) {
        return Err(Error::Domain(format!("byte count must be non-negative, got {bytes}")));
    }
    Ok(bytes / bandwidth)
}

pub fn fetch_latency(raw_bytes: f64, ratio: f64, params: &TransferParams) -> Result<f64> {
    params.validate()?;
    if !(ratio >= 1.0) {
        return Err(Error::Domain(format!("compression ratio must be at least 1, got {ratio}")));
    }
    let transfer = transfer_time(raw_bytes / ratio, params.pcie_bandwidth)?;
    let decompress = raw_bytes / params.decompress_throughput;
    Ok(if params.overlap {
        transfer.max(decompress)
    } else {
        transfer + decompress
    })
}

/// Smallest decompression throughput at which compressed fetching is no
/// slower than sending raw bytes: `B` with overlap, `B·r/(r-1)` without.
/// Infinite when `ratio ≤ 1`.
pub fn break_even_throughput(ratio: f64, params: &TransferParams) -> f64 {
    if ratio <= 1.0 {
        f64::INFINITY
    } else if params.overlap {
        params.pcie_bandwidth
    } else {
        params.pcie_bandwidth * ratio / (ratio - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertFetch {
    pub expert: ExpertId,
    pub raw_bytes: f64,
    pub ratio: f64,
    pub t_uncompressed: f64,
    pub t_compressed: f64,
    pub speedup: f64,
    pub break_even_throughput: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerFetch {
    pub layer: usize,
    pub t_uncompressed: f64,
    pub t_compressed: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub params: TransferParams,
    pub experts: Vec<ExpertFetch>,
    pub layers: Vec<LayerFetch>,
}

/// Raw size of one routed expert as f64 values.
pub fn expert_bytes(config: &ModelConfig) -> f64 {
    (2 * config.d_model * config.d_ff * 8) as f64
}

/// Fetch latencies per expert and per layer. An expert whose measured ratio
/// is at most 1 is shipped raw, so its compressed time equals its raw time.
pub fn speedup_report(
    config: &ModelConfig,
    ratios: &[(ExpertId, f64)],
    params: &TransferParams,
) -> Result<SpeedupReport> {
    params.validate()?;
    let raw = expert_bytes(config);
    let experts = ratios
        .iter()
        .map(|&(expert, ratio)| {
            expert.check(config)?;
            if !(ratio > 0.0) {
                return Err(Error::Domain(format!("ratio for {expert} must be positive")));
            }
            let t_uncompressed = transfer_time(raw, params.pcie_bandwidth)?;
            let t_compressed = if ratio <= 1.0 {
                t_uncompressed
            } else {
                fetch_latency(raw, ratio, params)?
            };
            Ok(ExpertFetch {
                expert,
                raw_bytes: raw,
                ratio,
                t_uncompressed,
                t_compressed,
                speedup: t_uncompressed / t_compressed,
                break_even_throughput: break_even_throughput(ratio, params),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = (0..config.num_layers)
        .filter_map(|layer| {
            let rows: Vec<&ExpertFetch> = experts.iter().filter(|e| e.expert.layer == layer).collect();
            if rows.is_empty() {
                return None;
            }
            let t_uncompressed: f64 = rows.iter().map(|e| e.t_uncompressed).sum();
            let t_compressed: f64 = rows.iter().map(|e| e.t_compressed).sum();
            Some(LayerFetch {
                layer,
                t_uncompressed,
                t_compressed,
                speedup: t_uncompressed / t_compressed,
            })
        })
        .collect();
    Ok(SpeedupReport {
        params: *params,
        experts,
        layers,
    })
}

impl SpeedupReport {
    /// `expert,raw_bytes,ratio,t_uncompressed,t_compressed,speedup`, one row
    /// per expert in input order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("expert,raw_bytes,ratio,t_uncompressed,t_compressed,speedup\n");
        for e in &self.experts {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.expert, e.raw_bytes, e.ratio, e.t_uncompressed, e.t_compressed, e.speedup
            )
            .expect("writing to a String");
        }
        out
    }
}
