//! Simulator configuration and the derived per-cycle quantities.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Which transfer-splitting scheme the IO engines use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FragmentationMode {
    /// Whole requests hold the bus for their entire length.
    None,
    /// The kernel-side wrapper issues one request per fragment.
    Software,
    /// The engine splits requests internally.
    Hardware,
}

impl FragmentationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FragmentationMode::None => "none",
            FragmentationMode::Software => "software",
            FragmentationMode::Hardware => "hardware",
        }
    }
}

impl std::str::FromStr for FragmentationMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "off" => Ok(FragmentationMode::None),
            "software" | "sw" => Ok(FragmentationMode::Software),
            "hardware" | "hw" => Ok(FragmentationMode::Hardware),
            other => Err(ConfigError::Invalid(format!(
                "unknown fragmentation mode `{other}` (expected none, software or hardware)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PuSchedulerKind {
    Wlbvt,
    Rr,
}

impl PuSchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PuSchedulerKind::Wlbvt => "wlbvt",
            PuSchedulerKind::Rr => "rr",
        }
    }
}

impl std::str::FromStr for PuSchedulerKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wlbvt" => Ok(PuSchedulerKind::Wlbvt),
            "rr" => Ok(PuSchedulerKind::Rr),
            other => Err(ConfigError::Invalid(format!("unknown PU scheduler `{other}` (expected wlbvt or rr)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoArbiterKind {
    /// Deficit-weighted round robin over the engine inputs.
    Wrr,
    /// Oldest eligible head first.
    Fifo,
}

/// Scaling constant used by the weight-limited PU cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PuLimitScale {
    /// Total number of PUs.
    Pus,
    /// Number of FMQs, active or not.
    Fmqs,
    /// Number of FMQs with a non-empty FIFO.
    ActiveFmqs,
}

/// Fragment size: a byte count or `"off"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FragmentSizeRepr", into = "FragmentSizeRepr")]
pub enum FragmentSize {
    Off,
    Bytes(u32),
}

impl FragmentSize {
    pub fn bytes(self) -> Option<u32> {
        match self {
            FragmentSize::Off => None,
            FragmentSize::Bytes(b) => Some(b),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FragmentSizeRepr {
    Bytes(u32),
    Word(String),
}

impl TryFrom<FragmentSizeRepr> for FragmentSize {
    type Error = String;

    fn try_from(value: FragmentSizeRepr) -> Result<Self, Self::Error> {
        match value {
            FragmentSizeRepr::Bytes(0) => Ok(FragmentSize::Off),
            FragmentSizeRepr::Bytes(b) => Ok(FragmentSize::Bytes(b)),
            FragmentSizeRepr::Word(w) if w == "off" => Ok(FragmentSize::Off),
            FragmentSizeRepr::Word(w) => match w.parse::<u32>() {
                Ok(b) => FragmentSize::try_from(FragmentSizeRepr::Bytes(b)),
                Err(_) => Err(format!("fragment_size must be a byte count or \"off\", got `{w}`")),
            },
        }
    }
}

impl From<FragmentSize> for FragmentSizeRepr {
    fn from(value: FragmentSize) -> Self {
        match value {
            FragmentSize::Off => FragmentSizeRepr::Word("off".to_string()),
            FragmentSize::Bytes(b) => FragmentSizeRepr::Bytes(b),
        }
    }
}

/// Inclusive `[min, max]` range, sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: u64,
    pub max: u64,
}

impl Range {
    pub const fn new(min: u64, max: u64) -> Self {
        Range { min, max }
    }

    pub const fn fixed(v: u64) -> Self {
        Range { min: v, max: v }
    }

    pub fn mean(&self) -> f64 {
        (self.min + self.max) as f64 / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_clusters: u32,
    pub pus_per_cluster: u32,
    /// Hz.
    pub clock_freq: f64,
    /// bits/s.
    pub ingress_bandwidth: f64,
    /// bits/s.
    pub egress_bandwidth: f64,
    /// bits/s.
    pub interconnect_bandwidth: f64,
    /// Cycles before the first byte of a cluster-local or L2 transfer.
    pub local_dma_latency: Range,
    /// Nanoseconds before the first byte of a host transfer.
    pub host_dma_latency: Range,
    pub sched_decision_latency: u32,
    pub fragmentation_mode: FragmentationMode,
    pub fragment_size: FragmentSize,
    pub pu_scheduler: PuSchedulerKind,
    pub io_arbiter: IoArbiterKind,
    pub pu_limit_scale: PuLimitScale,
    pub l2_packet_buffer: u64,
    pub l2_kernel_buffer: u64,
    /// Outstanding IO commands per cluster.
    pub cluster_fifo_depth: u32,
    /// Kernel cycles spent issuing each fragment in software mode.
    pub software_reissue_cost: u32,
    /// Extra bus cycles per grant (command/response overhead).
    pub io_grant_overhead: u32,
    /// Size of one event record written to the host.
    pub event_record_size: u32,
    pub seed: u64,
    pub max_cycles: u64,
    pub sample_interval: u64,
    /// Count cycles where a PU idles while the scheduler could have used it.
    pub check_work_conservation: bool,
}

pub const MIB: u64 = 1 << 20;

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_clusters: 4,
            pus_per_cluster: 8,
            clock_freq: 1e9,
            ingress_bandwidth: 400e9,
            egress_bandwidth: 400e9,
            interconnect_bandwidth: 512e9,
            local_dma_latency: Range::new(10, 30),
            host_dma_latency: Range::new(50, 100),
            sched_decision_latency: 5,
            fragmentation_mode: FragmentationMode::Hardware,
            fragment_size: FragmentSize::Bytes(512),
            pu_scheduler: PuSchedulerKind::Wlbvt,
            io_arbiter: IoArbiterKind::Wrr,
            pu_limit_scale: PuLimitScale::Pus,
            l2_packet_buffer: 4 * MIB,
            l2_kernel_buffer: 4 * MIB,
            cluster_fifo_depth: 64,
            software_reissue_cost: 20,
            io_grant_overhead: 0,
            event_record_size: 32,
            seed: 0,
            max_cycles: 2_000_000,
            sample_interval: 1000,
            check_work_conservation: true,
        }
    }
}

/// Bytes per cycle held as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteRate {
    pub num: u64,
    pub den: u64,
}

impl ByteRate {
    fn from_bandwidth(bits_per_sec: f64, clock_freq: f64) -> ByteRate {
        let num = bits_per_sec.round() as u64;
        let den = (clock_freq * 8.0).round() as u64;
        let g = num_integer::gcd(num, den).max(1);
        ByteRate { num: num / g, den: den / g }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Cycles to move `bytes`, rounded up.
    pub fn cycles_for(&self, bytes: u64) -> u64 {
        (bytes as u128 * self.den as u128).div_ceil(self.num as u128) as u64
    }
}

/// Quantities derived once from a validated [`SimConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Derived {
    pub num_pus: usize,
    pub ingress: ByteRate,
    pub egress: ByteRate,
    pub interconnect: ByteRate,
    /// Integer bus width used for packet copies.
    pub interconnect_width: u64,
    pub host_latency_cycles: Range,
    pub fragment_bytes: Option<u32>,
}

impl SimConfig {
    pub fn num_pus(&self) -> usize {
        self.num_clusters as usize * self.pus_per_cluster as usize
    }

    pub fn validate(&self) -> Result<Derived, ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.num_clusters == 0 || self.pus_per_cluster == 0 {
            return bad("num_clusters x pus_per_cluster must be at least 1".into());
        }
        if !(self.clock_freq.is_finite() && self.clock_freq >= 1.0) {
            return bad(format!("clock_freq must be positive, got {}", self.clock_freq));
        }
        for (name, bw) in [
            ("ingress_bandwidth", self.ingress_bandwidth),
            ("egress_bandwidth", self.egress_bandwidth),
            ("interconnect_bandwidth", self.interconnect_bandwidth),
        ] {
            if !(bw.is_finite() && bw > 0.0) {
                return bad(format!("{name} must be positive, got {bw}"));
            }
        }
        let ingress = ByteRate::from_bandwidth(self.ingress_bandwidth, self.clock_freq);
        if ingress.num < ingress.den {
            return bad(format!("ingress bytes/cycle must be >= 1, got {:.4}", ingress.as_f64()));
        }
        let egress = ByteRate::from_bandwidth(self.egress_bandwidth, self.clock_freq);
        let interconnect = ByteRate::from_bandwidth(self.interconnect_bandwidth, self.clock_freq);
        let interconnect_width = interconnect.num / interconnect.den;
        if interconnect_width == 0 {
            return bad("interconnect width must be at least one byte per cycle".into());
        }
        for (name, r) in [("local_dma_latency", self.local_dma_latency), ("host_dma_latency", self.host_dma_latency)] {
            if r.min > r.max {
                return bad(format!("{name}: min {} exceeds max {}", r.min, r.max));
            }
        }
        let fragment_bytes = match (self.fragmentation_mode, self.fragment_size) {
            (FragmentationMode::None, _) => None,
            (_, FragmentSize::Off) => {
                return bad(format!("fragmentation_mode {} requires a fragment_size", self.fragmentation_mode.as_str()))
            }
            (_, FragmentSize::Bytes(b)) => Some(b),
        };
        if let FragmentSize::Bytes(b) = self.fragment_size {
            if (b as u64) < interconnect_width {
                return bad(format!("fragment_size {b} is smaller than the interconnect width {interconnect_width}"));
            }
        }
        if self.sample_interval == 0 {
            return bad("sample_interval must be at least 1".into());
        }
        if self.cluster_fifo_depth == 0 {
            return bad("cluster_fifo_depth must be at least 1".into());
        }
        if self.event_record_size == 0 {
            return bad("event_record_size must be at least 1".into());
        }
        let ns_to_cycles = |ns: u64| (ns as f64 * self.clock_freq / 1e9).round() as u64;
        Ok(Derived {
            num_pus: self.num_pus(),
            ingress,
            egress,
            interconnect,
            interconnect_width,
            host_latency_cycles: Range::new(
                ns_to_cycles(self.host_dma_latency.min),
                ns_to_cycles(self.host_dma_latency.max),
            ),
            fragment_bytes,
        })
    }
}
