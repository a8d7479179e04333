//! Deterministic trace generation, the scenario schema and the preset
//! catalog.

use std::fmt::Write as _;
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::config::ByteRate;
use crate::error::ScenarioError;
use crate::flows::{MatchRule, Proto, SloPolicy, HEADER_SIZE};
use crate::kernels::{builtin, builtin_names, IoKind, IoSize, IoStep, KernelModel, L2Sync};

pub const MIN_PACKET: u32 = 64;
pub const MAX_PACKET: u32 = 9000;
/// Packet count standing in for "until stop_cycle".
pub const UNBOUNDED: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeDist {
    Fixed {
        bytes: u32,
    },
    /// Lognormal in bytes, clipped to `[min, max]`.
    Lognormal {
        mu: f64,
        sigma: f64,
        min: u32,
        max: u32,
    },
    Uniform {
        min: u32,
        max: u32,
    },
    /// Cycles through the listed sizes.
    Sweep {
        sizes: Vec<u32>,
    },
}

impl SizeDist {
    pub fn default_lognormal() -> Self {
        SizeDist::Lognormal { mu: 512f64.ln(), sigma: 0.8, min: 64, max: 4096 }
    }

    fn bounds(&self) -> (u32, u32) {
        match self {
            SizeDist::Fixed { bytes } => (*bytes, *bytes),
            SizeDist::Lognormal { min, max, .. } | SizeDist::Uniform { min, max } => (*min, *max),
            SizeDist::Sweep { sizes } => {
                (sizes.iter().copied().min().unwrap_or(0), sizes.iter().copied().max().unwrap_or(0))
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            SizeDist::Fixed { bytes } => *bytes as f64,
            SizeDist::Uniform { min, max } => (*min as f64 + *max as f64) / 2.0,
            SizeDist::Sweep { sizes } => sizes.iter().map(|&s| s as f64).sum::<f64>() / sizes.len().max(1) as f64,
            SizeDist::Lognormal { mu, sigma, min, max } => {
                (mu + sigma * sigma / 2.0).exp().clamp(*min as f64, *max as f64)
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        if let SizeDist::Sweep { sizes } = self {
            if sizes.is_empty() {
                return Err("sweep needs at least one size".into());
            }
        }
        if let SizeDist::Lognormal { sigma, .. } = self {
            if !(sigma.is_finite() && *sigma >= 0.0) {
                return Err(format!("lognormal sigma must be finite and >= 0, got {sigma}"));
            }
        }
        let (lo, hi) = self.bounds();
        if lo > hi {
            return Err(format!("size range [{lo}, {hi}] is empty"));
        }
        if lo < MIN_PACKET || hi > MAX_PACKET {
            return Err(format!("packet sizes must lie in [{MIN_PACKET}, {MAX_PACKET}], got [{lo}, {hi}]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    /// Fraction of the ingress link; `jitter` spreads each arrival
    /// uniformly within its slot.
    Share {
        share: f64,
        #[serde(default)]
        jitter: bool,
    },
    Interarrival {
        cycles: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Volume {
    Packets(u64),
    Bytes(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Tenant,
    Victim,
    Congestor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Tenant => "tenant",
            Role::Victim => "victim",
            Role::Congestor => "congestor",
        }
    }
}

/// A builtin kernel by name, or a full inline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSpec {
    Builtin(String),
    Custom(KernelModel),
}

impl KernelSpec {
    pub fn resolve(&self) -> Result<KernelModel, ScenarioError> {
        let model = match self {
            KernelSpec::Builtin(name) => builtin(name).ok_or_else(|| ScenarioError::UnknownKernel(name.clone()))?,
            KernelSpec::Custom(m) => m.clone(),
        };
        model.validate().map_err(ScenarioError::Invalid)?;
        Ok(model)
    }
}

fn default_memory() -> u64 {
    64 << 10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub name: String,
    #[serde(default)]
    pub role: Role,
    /// Defaults to a per-flow UDP three-tuple.
    #[serde(default)]
    pub rule: Option<MatchRule>,
    #[serde(default)]
    pub slo: SloPolicy,
    pub kernel: KernelSpec,
    #[serde(default = "default_memory")]
    pub requested_memory: u64,
    pub sizes: SizeDist,
    pub arrival: Arrival,
    pub volume: Volume,
    #[serde(default)]
    pub start_cycle: u64,
    #[serde(default)]
    pub stop_cycle: Option<u64>,
}

impl FlowSpec {
    pub fn new(name: &str, role: Role, kernel: KernelSpec, sizes: SizeDist, share: f64, volume: Volume) -> Self {
        FlowSpec {
            name: name.to_string(),
            role,
            rule: None,
            slo: SloPolicy::default(),
            kernel,
            requested_memory: default_memory(),
            sizes,
            arrival: Arrival::Share { share, jitter: false },
            volume,
            start_cycle: 0,
            stop_cycle: None,
        }
    }

    /// The match rule, defaulting to UDP 10.0.(idx/250).(idx%250+1):4242.
    pub fn match_rule(&self, idx: usize) -> MatchRule {
        self.rule.unwrap_or(MatchRule::ThreeTuple {
            dst_ip: Ipv4Addr::new(10, 0, (idx / 250) as u8, (idx % 250 + 1) as u8),
            dst_port: 4242,
            proto: Proto::Udp,
        })
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| ScenarioError::Invalid(format!("flow `{}`: {m}", self.name));
        self.sizes.validate().map_err(bad)?;
        match self.arrival {
            Arrival::Share { share, .. } if !(share > 0.0 && share <= 1.0) => {
                return Err(ScenarioError::InfeasibleShares(format!(
                    "flow `{}` share {share} outside (0, 1]",
                    self.name
                )))
            }
            Arrival::Interarrival { cycles: 0 } => return Err(bad("interarrival must be >= 1 cycle".into())),
            _ => {}
        }
        if let Some(stop) = self.stop_cycle {
            if stop < self.start_cycle {
                return Err(bad(format!("stop_cycle {stop} precedes start_cycle {}", self.start_cycle)));
            }
        }
        Ok(())
    }

    /// Long-run fraction of the ingress link this flow asks for.
    fn link_share(&self, ingress: ByteRate) -> f64 {
        match self.arrival {
            Arrival::Share { share, .. } => share,
            Arrival::Interarrival { cycles } => self.sizes.mean() / cycles as f64 / ingress.as_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Interval used for steady-state occupancy statistics.
    #[serde(default)]
    pub steady_window: Option<[u64; 2]>,
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
}

impl Scenario {
    pub fn empty(name: &str) -> Self {
        Scenario { name: name.to_string(), description: String::new(), steady_window: None, flows: Vec::new() }
    }

    /// Checks flow parameters, rule overlap and that concurrently active
    /// flows do not oversubscribe the link.
    pub fn validate(&self, ingress: ByteRate) -> Result<(), ScenarioError> {
        for f in &self.flows {
            f.validate()?;
            f.kernel.resolve()?;
        }
        for (i, a) in self.flows.iter().enumerate() {
            for (j, b) in self.flows.iter().enumerate().skip(i + 1) {
                if a.match_rule(i).overlaps(&b.match_rule(j)) {
                    return Err(ScenarioError::Invalid(format!(
                        "flows `{}` and `{}` have overlapping match rules",
                        a.name, b.name
                    )));
                }
            }
        }
        let active_at = |t: u64, f: &FlowSpec| f.start_cycle <= t && f.stop_cycle.is_none_or(|s| t < s);
        for probe in &self.flows {
            let t = probe.start_cycle;
            let total: f64 = self.flows.iter().filter(|f| active_at(t, f)).map(|f| f.link_share(ingress)).sum();
            if total > 1.0 + 1e-9 {
                return Err(ScenarioError::InfeasibleShares(format!(
                    "flows active at cycle {t} request {total:.3} of the ingress link"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TraceRecord {
    pub arrival_cycle: u64,
    pub flow: usize,
    pub total_size: u32,
}

fn flow_rng(seed: u64, flow: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(flow as u64);
    rng
}

/// Arrival-ordered packets for one flow.
pub fn generate_trace(
    spec: &FlowSpec,
    flow: usize,
    ingress: ByteRate,
    seed: u64,
) -> Result<Vec<TraceRecord>, ScenarioError> {
    spec.validate()?;
    let mut rng = flow_rng(seed, flow);
    let lognormal = match spec.sizes {
        SizeDist::Lognormal { mu, sigma, .. } => {
            Some(LogNormal::new(mu, sigma).map_err(|e| ScenarioError::Invalid(e.to_string()))?)
        }
        _ => None,
    };
    let (limit_packets, limit_bytes) = match spec.volume {
        Volume::Packets(n) => (n, u64::MAX),
        Volume::Bytes(b) => (u64::MAX, b),
    };
    let mut out = Vec::new();
    let mut sent_bytes: u64 = 0;
    let mut prev: Option<u64> = None;
    let share_ppm = match spec.arrival {
        Arrival::Share { share, .. } => (share * 1e6).round().max(1.0) as u128,
        Arrival::Interarrival { .. } => 0,
    };
    while (out.len() as u64) < limit_packets && sent_bytes < limit_bytes {
        let size = match &spec.sizes {
            SizeDist::Fixed { bytes } => *bytes,
            SizeDist::Uniform { min, max } => rng.random_range(*min..=*max),
            SizeDist::Sweep { sizes } => sizes[out.len() % sizes.len()],
            SizeDist::Lognormal { min, max, .. } => {
                let x: f64 = lognormal.as_ref().expect("lognormal built").sample(&mut rng);
                (x.round() as u64).clamp(*min as u64, *max as u64) as u32
            }
        };
        let mut arrival = match spec.arrival {
            Arrival::Share { jitter, .. } => {
                let slot = |bytes: u64| {
                    (bytes as u128 * ingress.den as u128 * 1_000_000 / (ingress.num as u128 * share_ppm)) as u64
                };
                let base = slot(sent_bytes);
                let offset = if jitter {
                    let width = slot(sent_bytes + size as u64) - base;
                    if width > 0 {
                        rng.random_range(0..width)
                    } else {
                        0
                    }
                } else {
                    0
                };
                spec.start_cycle + base + offset
            }
            Arrival::Interarrival { cycles } => spec.start_cycle + out.len() as u64 * cycles,
        };
        if let Some(p) = prev {
            arrival = arrival.max(p + 1);
        }
        if spec.stop_cycle.is_some_and(|s| arrival >= s) {
            break;
        }
        out.push(TraceRecord { arrival_cycle: arrival, flow, total_size: size });
        sent_bytes += size as u64;
        prev = Some(arrival);
    }
    Ok(out)
}

/// Merged trace of every flow, ordered by arrival cycle then flow index.
pub fn build_trace(scenario: &Scenario, ingress: ByteRate, seed: u64) -> Result<Vec<TraceRecord>, ScenarioError> {
    let mut all = Vec::new();
    for (i, f) in scenario.flows.iter().enumerate() {
        all.extend(generate_trace(f, i, ingress, seed)?);
    }
    all.sort_by_key(|r| (r.arrival_cycle, r.flow));
    Ok(all)
}

pub const TRACE_MAGIC: &str = "# osmosim-trace v1";
const TRACE_HEADER: &str = "arrival_cycle,flow_id,total_size_bytes";

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut s = format!("{TRACE_MAGIC}\n{TRACE_HEADER}\n");
    for r in records {
        writeln!(s, "{},{},{}", r.arrival_cycle, r.flow, r.total_size).expect("write to String");
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, ScenarioError> {
    let err = |line: usize, msg: &str| ScenarioError::Trace { line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == TRACE_MAGIC => {}
        _ => return Err(err(1, "missing `# osmosim-trace v1` version line")),
    }
    match lines.next() {
        Some((_, l)) if l.trim() == TRACE_HEADER => {}
        _ => return Err(err(2, "missing column header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(err(i + 1, "expected 3 fields"));
        }
        let num = |s: &str| s.trim().parse::<u64>().map_err(|e| err(i + 1, &e.to_string()));
        let rec = TraceRecord {
            arrival_cycle: num(fields[0])?,
            flow: num(fields[1])? as usize,
            total_size: num(fields[2])? as u32,
        };
        if rec.total_size <= HEADER_SIZE {
            return Err(err(i + 1, "packet smaller than its header"));
        }
        if out.last().is_some_and(|p: &TraceRecord| (p.arrival_cycle, p.flow) > (rec.arrival_cycle, rec.flow)) {
            return Err(err(i + 1, "records out of order"));
        }
        out.push(rec);
    }
    Ok(out)
}

const PRESET_FAMILIES: [&str; 4] = ["pu-contention", "hol-blocking", "compute-mix", "io-mix"];

/// Congestor sizes swept by the HoL preset.
pub const HOL_SIZES: [u32; 7] = [64, 128, 256, 512, 1024, 2048, 4096];
/// Packet sizes swept by the standalone presets.
pub const STANDALONE_SIZES: [u32; 4] = [64, 256, 1024, 4096];

/// Every preset name, in catalog order.
pub fn preset_names() -> Vec<String> {
    let mut names: Vec<String> = PRESET_FAMILIES.iter().map(|s| s.to_string()).collect();
    names.extend(builtin_names().iter().map(|k| format!("standalone-{k}")));
    names
}

/// Sends the payload to `fanout` destinations; all but the last send are
/// non-blocking.
fn egress_kernel(name: &str, fixed_cost: u64, fanout: usize) -> KernelModel {
    let io_program = (0..fanout).map(|i| IoStep::new(IoKind::EgressSend, IoSize::Payload, i + 1 == fanout)).collect();
    KernelModel {
        name: name.into(),
        fixed_cost,
        per_byte_cost: 0,
        io_program,
        l2_sync: L2Sync::None,
        l2_sync_cost: 0,
        kernel_binary_size: 4096,
    }
}

fn with_fifo(mut f: FlowSpec, capacity: u32) -> FlowSpec {
    f.slo.fmq_fifo_capacity = capacity;
    f
}

fn pu_contention() -> Scenario {
    let spin = |name: &str, cost: u64| KernelSpec::Custom(KernelModel::spin(name, cost, 0));
    let mut victim = FlowSpec::new(
        "victim",
        Role::Victim,
        spin("spin_victim", 500),
        SizeDist::Fixed { bytes: 64 },
        0.5,
        Volume::Packets(UNBOUNDED),
    );
    victim.stop_cycle = Some(60_000);
    let mut congestor = FlowSpec::new(
        "congestor",
        Role::Congestor,
        spin("spin_congestor", 1000),
        SizeDist::Fixed { bytes: 64 },
        0.5,
        Volume::Packets(UNBOUNDED),
    );
    congestor.stop_cycle = Some(120_000);
    Scenario {
        name: "pu-contention".into(),
        description: "Two spin kernels, the congestor costing twice as much per packet, equal shares".into(),
        steady_window: Some([10_000, 50_000]),
        flows: vec![victim, congestor],
    }
}

/// Cycles covered by the victim's 200 packets at a 0.01 share of 50 B/cycle.
const HOL_SPAN: u64 = 25_600;

fn hol_blocking(congestor_size: u32) -> Scenario {
    let victim = FlowSpec::new(
        "victim",
        Role::Victim,
        KernelSpec::Custom(egress_kernel("egress_echo", 10, 1)),
        SizeDist::Fixed { bytes: 64 },
        0.01,
        Volume::Packets(200),
    );
    let mut congestor = FlowSpec::new(
        "congestor",
        Role::Congestor,
        KernelSpec::Custom(egress_kernel("egress_fanout", 10, 2)),
        SizeDist::Fixed { bytes: congestor_size },
        0.99,
        Volume::Packets(UNBOUNDED),
    );
    congestor.stop_cycle = Some(2 * HOL_SPAN);
    Scenario {
        name: format!("hol-blocking-{congestor_size}"),
        description: format!("64 B victim egress messages against {congestor_size} B congestor messages"),
        steady_window: None,
        flows: vec![with_fifo(victim, 4096), with_fifo(congestor, 4096)],
    }
}

/// One victim kernel paired with its congestor in a mixed workload.
struct Pairing {
    victim_kernel: &'static str,
    congestor_kernel: KernelSpec,
    victim_size: SizeDist,
    congestor_size: SizeDist,
    victim_packets: u64,
    congestor_packets: u64,
}

/// Congestors start at cycle 0; victims join at cycle 5000. `shares` is
/// (victim, congestor).
fn mix(name: &str, description: &str, pairs: [Pairing; 2], shares: (f64, f64)) -> Scenario {
    let mut flows = Vec::new();
    for p in &pairs {
        let c = FlowSpec::new(
            &format!("{}_congestor", p.victim_kernel),
            Role::Congestor,
            p.congestor_kernel.clone(),
            p.congestor_size.clone(),
            shares.1,
            Volume::Packets(p.congestor_packets),
        );
        flows.push(with_fifo(c, 8192));
    }
    for p in &pairs {
        let mut v = FlowSpec::new(
            &format!("{}_victim", p.victim_kernel),
            Role::Victim,
            KernelSpec::Builtin(p.victim_kernel.into()),
            p.victim_size.clone(),
            shares.0,
            Volume::Packets(p.victim_packets),
        );
        v.start_cycle = 5_000;
        flows.push(with_fifo(v, 8192));
    }
    Scenario { name: name.into(), description: description.into(), steady_window: None, flows }
}

fn small_sizes() -> SizeDist {
    SizeDist::Uniform { min: 64, max: 128 }
}

fn large_sizes() -> SizeDist {
    SizeDist::Uniform { min: 3072, max: 4096 }
}

fn compute_mix() -> Scenario {
    mix(
        "compute-mix",
        "Reduce and Histogram victims and congestors",
        [
            Pairing {
                victim_kernel: "reduce",
                congestor_kernel: KernelSpec::Builtin("reduce".into()),
                victim_size: SizeDist::Fixed { bytes: 64 },
                congestor_size: SizeDist::Fixed { bytes: 4096 },
                victim_packets: 500,
                congestor_packets: 100,
            },
            Pairing {
                victim_kernel: "histogram",
                congestor_kernel: KernelSpec::Builtin("histogram".into()),
                victim_size: small_sizes(),
                congestor_size: large_sizes(),
                victim_packets: 500,
                congestor_packets: 300,
            },
        ],
        (0.25, 0.25),
    )
}

/// Storage-style kernel that streams two payload-sized host transfers, the
/// first overlapped with the second.
fn pipelined_io(name: &str, kind: IoKind) -> KernelModel {
    let mut model = builtin(if kind == IoKind::DmaReadHost { "io_read" } else { "io_write" }).expect("builtin");
    model.name = name.into();
    model.io_program = vec![IoStep::new(kind, IoSize::Payload, false), IoStep::new(kind, IoSize::Payload, true)];
    model
}

fn io_mix() -> Scenario {
    let pair = |victim_kernel, congestor: KernelModel| Pairing {
        victim_kernel,
        congestor_kernel: KernelSpec::Custom(congestor),
        victim_size: small_sizes(),
        congestor_size: large_sizes(),
        victim_packets: 500,
        congestor_packets: 400,
    };
    mix(
        "io-mix",
        "IO read and IO write victims and congestors",
        [
            pair("io_read", pipelined_io("io_read_pipelined", IoKind::DmaReadHost)),
            pair("io_write", pipelined_io("io_write_pipelined", IoKind::DmaWriteHost)),
        ],
        (0.15, 0.35),
    )
}

fn standalone(kernel: &str, size: u32) -> Scenario {
    let f = FlowSpec::new(
        kernel,
        Role::Tenant,
        KernelSpec::Builtin(kernel.into()),
        SizeDist::Fixed { bytes: size },
        1.0,
        Volume::Packets(500),
    );
    Scenario {
        name: format!("standalone-{kernel}-{size}"),
        description: format!("{kernel} alone at {size} B"),
        steady_window: None,
        flows: vec![with_fifo(f, 1024)],
    }
}

/// Expands a preset name into its scenarios; sweeps yield several.
pub fn preset(name: &str) -> Result<Vec<Scenario>, ScenarioError> {
    let unknown = || ScenarioError::UnknownPreset(name.to_string());
    Ok(match name {
        "pu-contention" => vec![pu_contention()],
        "hol-blocking" => HOL_SIZES.iter().map(|&s| hol_blocking(s)).collect(),
        "compute-mix" => vec![compute_mix()],
        "io-mix" => vec![io_mix()],
        _ => {
            let kernel = name.strip_prefix("standalone-").ok_or_else(unknown)?;
            if !builtin_names().contains(&kernel) {
                return Err(unknown());
            }
            STANDALONE_SIZES.iter().map(|&s| standalone(kernel, s)).collect()
        }
    })
}
