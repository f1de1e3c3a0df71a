//! Closed-form FLOP and traffic model of non-causal attention: L2 traffic,
//! DRAM traffic when K/V stay cache resident ("ideal") and when they are
//! refetched once per wave of concurrent blocks ("realistic").
//!
//! All byte counts are exact `u128` integers.

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, SimConfig};
use crate::tracegen::Fa3Workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub b: u64,
    pub l: u64,
    pub s: u64,
    pub h_kv: u64,
    pub g: u64,
    pub d: u64,
    pub t_m: u64,
    /// Bytes per element.
    pub p: u64,
}

impl WorkloadParams {
    pub fn check(&self) -> Result<(), ConfigError> {
        let dims = [("B", self.b), ("L", self.l), ("S", self.s), ("H_KV", self.h_kv), ("G", self.g), ("D", self.d), ("T_M", self.t_m)];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("`{name}` must be positive")));
        }
        if ![1, 2, 4].contains(&self.p) {
            return Err(ConfigError::Invalid(format!("P must be 1, 2 or 4, got {}", self.p)));
        }
        Ok(())
    }

    pub fn h_q(&self) -> u128 {
        u128::from(self.h_kv) * u128::from(self.g)
    }

    pub fn q_tiles(&self) -> u128 {
        u128::from(self.l.div_ceil(self.t_m))
    }
}

impl From<&Fa3Workload> for WorkloadParams {
    fn from(w: &Fa3Workload) -> Self {
        Self { b: w.b, l: w.l, s: w.s, h_kv: w.h_kv, g: w.g, d: w.d, t_m: w.t_m, p: w.p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareParams {
    pub n_sm: u64,
    /// Resident blocks per SM.
    pub o_limit: u64,
    /// Capacity usable for keeping one K and one V head resident.
    pub l2_effective_bytes: u64,
}

impl HardwareParams {
    /// Partitioned parts duplicate lines across partitions, so only half
    /// of the physical capacity is usable.
    pub fn partitioned(n_sm: u64, o_limit: u64, l2_physical_bytes: u64) -> Self {
        Self { n_sm, o_limit, l2_effective_bytes: l2_physical_bytes / 2 }
    }

    /// Derived from a simulator config. Capacity is halved only when the
    /// L2 is partitioned and cross-partition duplication is modelled.
    pub fn from_sim_config(cfg: &SimConfig) -> Self {
        let duplicated = cfg.l2_partitions > 1 && cfg.remotecopy_enabled;
        let l2_effective_bytes = if duplicated { cfg.l2_total_bytes / 2 } else { cfg.l2_total_bytes };
        Self { n_sm: u64::from(cfg.num_sms), o_limit: u64::from(cfg.o_limit), l2_effective_bytes }
    }

    pub fn concurrency(&self) -> u128 {
        u128::from(self.n_sm) * u128::from(self.o_limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Ideal,
    Realistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub flops: u128,
    pub l2_bytes: u128,
    pub dram_ideal_bytes: u128,
    pub dram_real_bytes: u128,
    pub regime: Regime,
    /// `dram_ideal_bytes` or `dram_real_bytes` according to `regime`.
    pub dram_bytes: u128,
    /// Whether the ideal regime was imposed rather than selected.
    pub forced_ideal: bool,
    pub waves: u128,
    pub traffic_ratio: f64,
    /// Long-sequence limit of the ratio: the number of concurrent blocks.
    pub traffic_ratio_limit: f64,
    pub arithmetic_intensity_l2: f64,
    /// `2·T_M / P`.
    pub arithmetic_intensity_approx: f64,
}

pub fn flops_total(w: &WorkloadParams) -> u128 {
    4 * u128::from(w.b) * w.h_q() * u128::from(w.l) * u128::from(w.s) * u128::from(w.d)
}

/// Q read and O write once per block, K and V read once per query tile.
pub fn l2_traffic(w: &WorkloadParams) -> u128 {
    let (b, l, s, d, p) = (u128::from(w.b), u128::from(w.l), u128::from(w.s), u128::from(w.d), u128::from(w.p));
    p * b * w.h_q() * d * (2 * l + w.q_tiles() * 2 * s)
}

/// Every tensor crosses DRAM exactly once.
pub fn dram_ideal(w: &WorkloadParams) -> u128 {
    let (b, l, s, d, p) = (u128::from(w.b), u128::from(w.l), u128::from(w.s), u128::from(w.d), u128::from(w.p));
    p * b * d * (2 * w.h_q() * l + 2 * u128::from(w.h_kv) * s)
}

/// One K head and one V head fit in the effective L2 (strictly).
pub fn ideal_condition(w: &WorkloadParams, hw: &HardwareParams) -> bool {
    u128::from(hw.l2_effective_bytes) > 2 * u128::from(w.p) * u128::from(w.s) * u128::from(w.d)
}

/// Passes over the blocks sharing one KV head at full concurrency.
pub fn waves_per_group(w: &WorkloadParams, hw: &HardwareParams) -> u128 {
    let blocks = u128::from(w.g) * w.q_tiles();
    blocks.div_ceil(hw.concurrency()).max(1)
}

pub fn dram_real(w: &WorkloadParams, hw: &HardwareParams) -> u128 {
    let (b, l, s, d, p) = (u128::from(w.b), u128::from(w.l), u128::from(w.s), u128::from(w.d), u128::from(w.p));
    let q_o = 2 * p * b * w.h_q() * l * d;
    let kv = 2 * p * b * u128::from(w.h_kv) * s * d;
    q_o + kv * waves_per_group(w, hw)
}

pub fn traffic_ratio(w: &WorkloadParams, hw: &HardwareParams) -> f64 {
    l2_traffic(w) as f64 / dram_real(w, hw) as f64
}

/// FLOPs per byte of L2 traffic.
pub fn arithmetic_intensity(w: &WorkloadParams) -> f64 {
    flops_total(w) as f64 / l2_traffic(w) as f64
}

pub fn arithmetic_intensity_approx(w: &WorkloadParams) -> f64 {
    2.0 * w.t_m as f64 / w.p as f64
}

pub fn regime_select(w: &WorkloadParams, hw: &HardwareParams) -> TrafficReport {
    report(w, hw, false)
}

/// Report under the ideal-cache assumption regardless of capacity, the
/// way cache-oblivious roofline tools estimate DRAM traffic.
pub fn force_ideal(w: &WorkloadParams, hw: &HardwareParams) -> TrafficReport {
    report(w, hw, true)
}

fn report(w: &WorkloadParams, hw: &HardwareParams, forced: bool) -> TrafficReport {
    let regime = if forced || ideal_condition(w, hw) { Regime::Ideal } else { Regime::Realistic };
    let dram_ideal_bytes = dram_ideal(w);
    let dram_real_bytes = dram_real(w, hw);
    TrafficReport {
        flops: flops_total(w),
        l2_bytes: l2_traffic(w),
        dram_ideal_bytes,
        dram_real_bytes,
        regime,
        dram_bytes: match regime {
            Regime::Ideal => dram_ideal_bytes,
            Regime::Realistic => dram_real_bytes,
        },
        forced_ideal: forced,
        waves: waves_per_group(w, hw),
        traffic_ratio: traffic_ratio(w, hw),
        traffic_ratio_limit: hw.concurrency() as f64,
        arithmetic_intensity_l2: arithmetic_intensity(w),
        arithmetic_intensity_approx: arithmetic_intensity_approx(w),
    }
}
