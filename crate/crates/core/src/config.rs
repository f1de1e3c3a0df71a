//! Hardware configuration and the flat `key = value` config format shared
//! by hardware and workload files.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required field `{0}`")]
    Missing(String),
    #[error("field `{key}`: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

/// Parses flat `key = value` text. `#` starts a comment; blank lines are
/// ignored; `key value` (whitespace separated) is also accepted.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => match line.split_once(char::is_whitespace) {
                Some((k, v)) => (k.trim(), v.trim()),
                None => ("", ""),
            },
        };
        if key.is_empty() || value.is_empty() || key.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax { line: idx + 1, text: raw.to_string() });
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError::Duplicate { line: idx + 1, key: key.to_string() });
        }
    }
    Ok(out)
}

/// Parses a decimal, `0x` hex, or `KiB`/`MiB`/`GiB`-suffixed integer.
pub fn parse_int(s: &str) -> Option<u64> {
    let s = s.trim().replace('_', "");
    for (suffix, mult) in [("KiB", 1u64 << 10), ("MiB", 1 << 20), ("GiB", 1 << 30)] {
        if let Some(num) = s.strip_suffix(suffix) {
            return parse_int(num)?.checked_mul(mult);
        }
    }
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

pub(crate) fn take<T: FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, ConfigError> {
    match map.remove(key) {
        None => Ok(None),
        Some(value) => value
            .parse()
            .map(Some)
            .map_err(|_| ConfigError::Value { key: key.to_string(), value }),
    }
}

pub(crate) fn take_int(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<u64>, ConfigError> {
    match map.remove(key) {
        None => Ok(None),
        Some(value) => parse_int(&value)
            .map(Some)
            .ok_or(ConfigError::Value { key: key.to_string(), value }),
    }
}

pub(crate) fn take_bool(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<bool>, ConfigError> {
    match map.remove(key) {
        None => Ok(None),
        Some(value) => match value.to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => Ok(Some(true)),
            "0" | "false" | "no" | "off" => Ok(Some(false)),
            _ => Err(ConfigError::Value { key: key.to_string(), value }),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceHash {
    /// `(line ^ (line >> 5)) mod slices`
    Xor,
    /// `line mod slices`
    Naive,
}

/// Every hardware parameter of the simulated machine plus the ablation
/// switches. Defaults describe an H800-class part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub clock_mhz: f64,
    pub num_sms: u32,
    /// Resident CTAs per SM.
    pub o_limit: u32,
    pub issue_width: u32,

    pub line_size: u64,
    pub l2_total_bytes: u64,
    pub l2_slices: u32,
    pub l2_ways: u32,
    /// Number of L2 partitions; SMs and slices are split evenly among them.
    pub l2_partitions: u32,
    pub l2_near_latency: u64,
    pub l2_far_latency: u64,
    pub l2_req_q: u32,
    pub l2_resp_q: u32,
    pub llc_mshr_per_slice: u32,
    pub slice_hash: SliceHash,
    pub lrc_enabled: bool,

    pub remotecopy_enabled: bool,
    pub remotecopy_p_max: f64,
    /// Fraction of slice capacity above which shadow insertion kicks in.
    pub remotecopy_occupancy_threshold: f64,

    pub dram_channels: u32,
    pub dram_latency_cycles: u64,
    pub dram_bytes_per_cycle_per_channel: u64,

    pub tma_lines_per_cycle: u32,
    pub tma_max_inflight_lines: u32,
    pub tma_common_launch_cycles: u64,
    pub tma_tensormap_setup_cycles: u64,
    /// Replaces the setup decomposition with one fixed cost per op.
    pub tma_flat_setup: Option<u64>,
    pub tma_dedup: bool,

    pub wgmma_issue_buffer: u32,
    pub wgmma_min_latency: u64,

    pub deadlock_threshold: u64,
    pub record_gantt: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            clock_mhz: 1830.0,
            num_sms: 132,
            o_limit: 1,
            issue_width: 1,
            line_size: 128,
            l2_total_bytes: 50 << 20,
            l2_slices: 80,
            l2_ways: 16,
            l2_partitions: 2,
            l2_near_latency: 258,
            l2_far_latency: 414,
            l2_req_q: 32,
            l2_resp_q: 128,
            llc_mshr_per_slice: 256,
            slice_hash: SliceHash::Xor,
            lrc_enabled: true,
            remotecopy_enabled: true,
            remotecopy_p_max: 0.5,
            remotecopy_occupancy_threshold: 0.5,
            dram_channels: 80,
            dram_latency_cycles: 350,
            dram_bytes_per_cycle_per_channel: 22,
            tma_lines_per_cycle: 2,
            tma_max_inflight_lines: 64,
            tma_common_launch_cycles: 40,
            tma_tensormap_setup_cycles: 130,
            tma_flat_setup: None,
            tma_dedup: true,
            wgmma_issue_buffer: 16,
            wgmma_min_latency: 8,
            deadlock_threshold: 100_000,
            record_gantt: true,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Builds a config from `key = value` text; unspecified keys keep
    /// their defaults.
    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut map = parse_kv(text)?;
        let mut c = SimConfig::default();
        macro_rules! int {
            ($($field:ident),*) => {$(
                if let Some(v) = take_int(&mut map, stringify!($field))? {
                    c.$field = v.try_into().map_err(|_| ConfigError::Value {
                        key: stringify!($field).into(),
                        value: v.to_string(),
                    })?;
                }
            )*};
        }
        macro_rules! float {
            ($($field:ident),*) => {$(
                if let Some(v) = take::<f64>(&mut map, stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        macro_rules! flag {
            ($($field:ident),*) => {$(
                if let Some(v) = take_bool(&mut map, stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        int!(
            num_sms, o_limit, issue_width, line_size, l2_total_bytes, l2_slices, l2_ways,
            l2_partitions, l2_near_latency, l2_far_latency, l2_req_q, l2_resp_q,
            llc_mshr_per_slice, dram_channels, dram_latency_cycles,
            dram_bytes_per_cycle_per_channel, tma_lines_per_cycle, tma_max_inflight_lines,
            tma_common_launch_cycles, tma_tensormap_setup_cycles, wgmma_issue_buffer,
            wgmma_min_latency, deadlock_threshold, seed
        );
        float!(clock_mhz, remotecopy_p_max, remotecopy_occupancy_threshold);
        flag!(lrc_enabled, remotecopy_enabled, tma_dedup, record_gantt);
        if let Some(v) = take_int(&mut map, "tma_flat_setup")? {
            c.tma_flat_setup = Some(v);
        }
        if let Some(v) = map.remove("slice_hash") {
            c.slice_hash = match v.as_str() {
                "xor" => SliceHash::Xor,
                "naive" => SliceHash::Naive,
                _ => return Err(ConfigError::Value { key: "slice_hash".into(), value: v }),
            };
        }
        if let Some(key) = map.into_keys().next() {
            return Err(ConfigError::UnknownKey(key));
        }
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let counts = [
            ("num_sms", u64::from(self.num_sms)),
            ("o_limit", u64::from(self.o_limit)),
            ("issue_width", u64::from(self.issue_width)),
            ("line_size", self.line_size),
            ("l2_total_bytes", self.l2_total_bytes),
            ("l2_slices", u64::from(self.l2_slices)),
            ("l2_ways", u64::from(self.l2_ways)),
            ("l2_partitions", u64::from(self.l2_partitions)),
            ("l2_req_q", u64::from(self.l2_req_q)),
            ("l2_resp_q", u64::from(self.l2_resp_q)),
            ("llc_mshr_per_slice", u64::from(self.llc_mshr_per_slice)),
            ("dram_channels", u64::from(self.dram_channels)),
            ("dram_bytes_per_cycle_per_channel", self.dram_bytes_per_cycle_per_channel),
            ("tma_lines_per_cycle", u64::from(self.tma_lines_per_cycle)),
            ("tma_max_inflight_lines", u64::from(self.tma_max_inflight_lines)),
            ("wgmma_issue_buffer", u64::from(self.wgmma_issue_buffer)),
            ("deadlock_threshold", self.deadlock_threshold),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("`{name}` must be positive")));
        }
        if !(self.clock_mhz > 0.0) {
            return Err(ConfigError::Invalid("`clock_mhz` must be positive".into()));
        }
        if !self.l2_total_bytes.is_multiple_of(u64::from(self.l2_slices)) {
            return Err(ConfigError::Invalid(format!(
                "l2_total_bytes {} is not divisible by l2_slices {}",
                self.l2_total_bytes, self.l2_slices
            )));
        }
        if self.l2_sets_per_slice() == 0 {
            return Err(ConfigError::Invalid(format!(
                "a slice of {} bytes holds fewer than l2_ways={} lines",
                self.l2_total_bytes / u64::from(self.l2_slices),
                self.l2_ways
            )));
        }
        if self.l2_partitions > self.l2_slices || self.l2_partitions > self.num_sms {
            return Err(ConfigError::Invalid("more L2 partitions than slices or SMs".into()));
        }
        if !self.l2_slices.is_multiple_of(self.l2_partitions) {
            return Err(ConfigError::Invalid("l2_slices must split evenly across l2_partitions".into()));
        }
        if !(0.0..=1.0).contains(&self.remotecopy_p_max)
            || !(0.0..=1.0).contains(&self.remotecopy_occupancy_threshold)
        {
            return Err(ConfigError::Invalid("RemoteCopy knobs must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Sets per slice; capacity beyond a whole number of sets is dropped.
    pub fn l2_sets_per_slice(&self) -> u64 {
        self.l2_total_bytes / u64::from(self.l2_slices) / self.line_size / u64::from(self.l2_ways)
    }

    /// Cycles the TMA spends before generating addresses for an op.
    pub fn tma_setup_cycles(&self, uses_descriptor: bool) -> u64 {
        match self.tma_flat_setup {
            Some(flat) => flat,
            None if uses_descriptor => self.tma_common_launch_cycles + self.tma_tensormap_setup_cycles,
            None => self.tma_common_launch_cycles,
        }
    }

    pub fn sm_partition(&self, sm: u32) -> u32 {
        (u64::from(sm) * u64::from(self.l2_partitions) / u64::from(self.num_sms)) as u32
    }

    pub fn slice_partition(&self, slice: u32) -> u32 {
        (u64::from(slice) * u64::from(self.l2_partitions) / u64::from(self.l2_slices)) as u32
    }

    pub fn cycles_to_us(&self, cycles: u64) -> f64 {
        cycles as f64 / self.clock_mhz
    }
}
