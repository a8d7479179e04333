//! Parametric kernel cost models and the run-to-completion kernel instance
//! state machine.

use serde::{Deserialize, Serialize};

use crate::config::FragmentationMode;
use crate::flows::{MemorySpace, HEADER_SIZE};
use crate::io::fragment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoKind {
    DmaReadHost,
    DmaWriteHost,
    DmaReadL2,
    DmaWriteL2,
    EgressSend,
}

impl IoKind {
    pub fn space(self) -> Option<MemorySpace> {
        match self {
            IoKind::DmaReadHost | IoKind::DmaWriteHost => Some(MemorySpace::Host),
            IoKind::DmaReadL2 | IoKind::DmaWriteL2 => Some(MemorySpace::L2Local),
            IoKind::EgressSend => None,
        }
    }

    pub fn is_egress(self) -> bool {
        self == IoKind::EgressSend
    }

    pub fn is_host(self) -> bool {
        matches!(self, IoKind::DmaReadHost | IoKind::DmaWriteHost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoSize {
    /// Substituted with the packet payload length.
    Payload,
    Bytes(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoStep {
    pub kind: IoKind,
    pub size: IoSize,
    pub blocking: bool,
    /// Offset into the ECTX segment (L2) or the first allowed host range.
    #[serde(default)]
    pub offset: u64,
}

impl IoStep {
    pub fn new(kind: IoKind, size: IoSize, blocking: bool) -> Self {
        IoStep { kind, size, blocking, offset: 0 }
    }

    pub fn len(&self, payload: u32) -> u32 {
        match self.size {
            IoSize::Payload => payload.max(1),
            IoSize::Bytes(b) => b.max(1),
        }
    }
}

/// Where a kernel synchronises with L2 (atomics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Sync {
    None,
    PerPacket,
    /// One sync per started chunk of this many payload bytes.
    PerChunk(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelModel {
    pub name: String,
    pub fixed_cost: u64,
    /// Cycles per payload byte.
    #[serde(default)]
    pub per_byte_cost: u64,
    #[serde(default)]
    pub io_program: Vec<IoStep>,
    #[serde(default = "no_sync")]
    pub l2_sync: L2Sync,
    #[serde(default)]
    pub l2_sync_cost: u64,
    #[serde(default = "default_binary_size")]
    pub kernel_binary_size: u64,
}

fn no_sync() -> L2Sync {
    L2Sync::None
}

fn default_binary_size() -> u64 {
    4096
}

impl KernelModel {
    /// Fully parametric compute-only kernel.
    pub fn spin(name: &str, fixed_cost: u64, per_byte_cost: u64) -> Self {
        KernelModel {
            name: name.to_string(),
            fixed_cost,
            per_byte_cost,
            io_program: Vec::new(),
            l2_sync: L2Sync::None,
            l2_sync_cost: 0,
            kernel_binary_size: default_binary_size(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fixed_cost == 0 {
            return Err(format!("kernel `{}`: fixed_cost must be >= 1", self.name));
        }
        if let L2Sync::PerChunk(0) = self.l2_sync {
            return Err(format!("kernel `{}`: l2 sync chunk must be >= 1", self.name));
        }
        Ok(())
    }

    fn sync_points(&self, payload: u32) -> u64 {
        match self.l2_sync {
            L2Sync::None => 0,
            L2Sync::PerPacket => 1,
            L2Sync::PerChunk(c) => payload.div_ceil(c) as u64,
        }
    }

    /// Compute-phase cycles for one packet.
    pub fn compute_cycles(&self, payload: u32) -> u64 {
        self.fixed_cost + self.per_byte_cost * payload as u64 + self.sync_points(payload) * self.l2_sync_cost
    }

    pub fn is_io_bound(&self) -> bool {
        !self.io_program.is_empty()
    }
}

const BUILTIN_NAMES: [&str; 7] = ["aggregate", "reduce", "histogram", "io_read", "io_write", "filter", "spin"];

/// Names of the builtin catalog, in catalog order.
pub fn builtin_names() -> &'static [&'static str] {
    &BUILTIN_NAMES
}

pub fn builtin(name: &str) -> Option<KernelModel> {
    let compute = |name: &str, per_byte: u64, sync: L2Sync| KernelModel {
        name: name.to_string(),
        fixed_cost: 20,
        per_byte_cost: per_byte,
        io_program: Vec::new(),
        l2_sync: sync,
        l2_sync_cost: 10,
        kernel_binary_size: default_binary_size(),
    };
    let io = |name: &str, fixed: u64, steps: Vec<IoStep>| KernelModel {
        name: name.to_string(),
        fixed_cost: fixed,
        per_byte_cost: 0,
        io_program: steps,
        l2_sync: L2Sync::None,
        l2_sync_cost: 0,
        kernel_binary_size: default_binary_size(),
    };
    let model = match name {
        "aggregate" => compute("aggregate", 1, L2Sync::PerPacket),
        "reduce" => compute("reduce", 2, L2Sync::PerPacket),
        "histogram" => compute("histogram", 3, L2Sync::PerChunk(64)),
        "io_read" => io("io_read", 30, vec![IoStep::new(IoKind::DmaReadHost, IoSize::Payload, true)]),
        "io_write" => io("io_write", 30, vec![IoStep::new(IoKind::DmaWriteHost, IoSize::Payload, true)]),
        "filter" => io(
            "filter",
            60,
            vec![
                IoStep::new(IoKind::DmaReadL2, IoSize::Bytes(64), true),
                IoStep::new(IoKind::DmaWriteHost, IoSize::Payload, true),
            ],
        ),
        "spin" => KernelModel::spin("spin", 100, 0),
        _ => return None,
    };
    Some(model)
}

/// The seven builtin kernel models.
pub fn builtin_kernels() -> Vec<KernelModel> {
    BUILTIN_NAMES.iter().map(|n| builtin(n).expect("catalog name")).collect()
}

/// A fully resolved IO command for one (sub)request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoCommand {
    pub kind: IoKind,
    pub len: u32,
    pub addr: u64,
    pub blocking: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Op {
    /// L2 to L1 packet copy overlapped with the scheduling decision.
    Load(u64),
    Compute(u64),
    /// Spend `left` cycles, then submit. `check` carries the range to validate
    /// before the first fragment of a step.
    Issue {
        group: usize,
        cmd: IoCommand,
        left: u64,
        check: Option<(MemorySpace, u64, u64)>,
    },
    Wait(usize),
    WaitAll,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct IoGroup {
    pending: u32,
    started: Option<u64>,
}

/// Program inputs that depend on the packet, the ECTX and the config.
#[derive(Debug, Clone, Copy)]
pub struct ProgramParams {
    pub load_cycles: u64,
    pub payload: u32,
    pub fragmentation: FragmentationMode,
    pub fragment_bytes: Option<u32>,
    pub reissue_cost: u32,
    pub l2_base: u64,
    pub host_base: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueFull;

#[derive(Debug, Clone, Copy)]
pub struct IssueCtx {
    pub kernel_id: u64,
    pub flow: usize,
    pub pu: usize,
    pub group: usize,
}

/// What a running kernel needs from the rest of the device.
pub trait KernelEnv {
    fn now(&self) -> u64;
    /// Range check; a false return terminates the kernel.
    fn check_access(&mut self, ctx: IssueCtx, space: MemorySpace, addr: u64, len: u64) -> bool;
    fn submit(&mut self, ctx: IssueCtx, cmd: IoCommand) -> Result<(), QueueFull>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CycleLimit,
    IllegalAccess { addr: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Running,
    Done,
    Terminated(Termination),
}

/// One packet's kernel execution on one PU.
#[derive(Debug, Clone)]
pub struct KernelInstance {
    pub id: u64,
    pub flow: usize,
    pub pu: usize,
    pub packet: u64,
    pub dispatch_cycle: u64,
    /// Cycles spent on the PU, including the packet load.
    pub resident_cycles: u64,
    /// Cycles counted by the watchdog (everything after the load).
    pub kernel_cycles: u64,
    cycle_limit: Option<u64>,
    ops: Vec<Op>,
    pc: usize,
    groups: Vec<IoGroup>,
}

impl KernelInstance {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u64,
        flow: usize,
        pu: usize,
        packet: u64,
        dispatch_cycle: u64,
        model: &KernelModel,
        params: &ProgramParams,
        cycle_limit: Option<u64>,
    ) -> Self {
        let mut ops = Vec::new();
        if params.load_cycles > 0 {
            ops.push(Op::Load(params.load_cycles));
        }
        let compute = model.compute_cycles(params.payload);
        if compute > 0 {
            ops.push(Op::Compute(compute));
        }
        let mut groups = Vec::with_capacity(model.io_program.len());
        for (group, step) in model.io_program.iter().enumerate() {
            let len = step.len(params.payload);
            let base = match step.kind.space() {
                Some(MemorySpace::Host) => params.host_base,
                Some(MemorySpace::L2Local) => params.l2_base,
                None => 0,
            };
            let addr = base + step.offset;
            let check = step.kind.space().map(|s| (s, addr, len as u64));
            let (pieces, cost) = match (params.fragmentation, params.fragment_bytes) {
                (FragmentationMode::Software, Some(f)) => (fragment(len, Some(f)), params.reissue_cost.max(1) as u64),
                _ => (vec![len], 1),
            };
            let mut offset = 0u64;
            for (i, piece) in pieces.iter().enumerate() {
                ops.push(Op::Issue {
                    group,
                    cmd: IoCommand { kind: step.kind, len: *piece, addr: addr + offset, blocking: step.blocking },
                    left: cost,
                    check: if i == 0 { check } else { None },
                });
                offset += *piece as u64;
            }
            groups.push(IoGroup { pending: pieces.len() as u32, started: None });
            if step.blocking {
                ops.push(Op::Wait(group));
            }
        }
        if !groups.is_empty() {
            ops.push(Op::WaitAll);
        }
        KernelInstance {
            id,
            flow,
            pu,
            packet,
            dispatch_cycle,
            resident_cycles: 0,
            kernel_cycles: 0,
            cycle_limit,
            ops,
            pc: 0,
            groups,
        }
    }

    pub fn is_loading(&self) -> bool {
        matches!(self.ops.get(self.pc), Some(Op::Load(_)))
    }

    pub fn is_blocked(&self) -> bool {
        matches!(self.ops.get(self.pc), Some(Op::Wait(_) | Op::WaitAll))
    }

    /// Advances one PU cycle.
    pub fn advance(&mut self, env: &mut impl KernelEnv) -> Progress {
        self.resident_cycles += 1;
        let Some(op) = self.ops.get_mut(self.pc) else {
            return Progress::Done;
        };
        let mut executing = true;
        match op {
            Op::Load(left) => {
                executing = false;
                *left -= 1;
                if *left == 0 {
                    self.pc += 1;
                }
            }
            Op::Compute(left) => {
                *left -= 1;
                if *left == 0 {
                    self.pc += 1;
                }
            }
            Op::Issue { group, cmd, left, check } => {
                *left = left.saturating_sub(1);
                if *left == 0 {
                    let ctx = IssueCtx { kernel_id: self.id, flow: self.flow, pu: self.pu, group: *group };
                    if let Some((space, addr, len)) = check.take() {
                        if !env.check_access(ctx, space, addr, len) {
                            self.kernel_cycles += 1;
                            return Progress::Terminated(Termination::IllegalAccess { addr });
                        }
                    }
                    // a full command FIFO stalls the issue; retried next cycle
                    if env.submit(ctx, *cmd).is_ok() {
                        let g = *group;
                        self.groups[g].started.get_or_insert(env.now());
                        self.pc += 1;
                    }
                }
            }
            Op::Wait(_) | Op::WaitAll => {}
        }
        if executing {
            self.kernel_cycles += 1;
        }
        if self.settle() {
            return Progress::Done;
        }
        match self.cycle_limit {
            Some(limit) if self.kernel_cycles >= limit => Progress::Terminated(Termination::CycleLimit),
            _ => Progress::Running,
        }
    }

    /// Skips satisfied waits; true once the whole program has finished.
    pub fn settle(&mut self) -> bool {
        while let Some(op) = self.ops.get(self.pc) {
            let satisfied = match op {
                Op::Wait(g) => self.groups[*g].pending == 0,
                Op::WaitAll => self.groups.iter().all(|g| g.pending == 0),
                _ => false,
            };
            if !satisfied {
                break;
            }
            self.pc += 1;
        }
        self.pc == self.ops.len()
    }

    /// Records completion of one (sub)request. Returns the group's start
    /// cycle once its last piece has completed.
    pub fn io_completed(&mut self, group: usize) -> Option<u64> {
        let g = &mut self.groups[group];
        g.pending -= 1;
        if g.pending == 0 {
            g.started
        } else {
            None
        }
    }
}

/// Cycles spent loading a packet before the kernel body runs.
pub fn load_cycles(total_size: u32, bus_width: u64, local_latency: u64, sched_latency: u32) -> u64 {
    let copy = (total_size as u64).div_ceil(bus_width) + local_latency;
    copy.max(sched_latency as u64)
}

/// Uncontended per-packet PU time estimate: load, compute and IO (each
/// step's latency plus bus time).
pub fn service_cycles(
    model: &KernelModel,
    total_size: u32,
    bus_width: u64,
    egress_bytes_per_cycle: f64,
    local_latency: f64,
    host_latency: f64,
    sched_latency: u32,
) -> f64 {
    let payload = total_size.saturating_sub(HEADER_SIZE);
    let load = ((total_size as u64).div_ceil(bus_width) as f64 + local_latency).max(sched_latency as f64);
    let mut io = 0.0;
    for step in &model.io_program {
        let len = step.len(payload) as f64;
        let (lat, bw) = match step.kind {
            IoKind::EgressSend => (local_latency, egress_bytes_per_cycle),
            k if k.is_host() => (host_latency, bus_width as f64),
            _ => (local_latency, bus_width as f64),
        };
        io += 1.0 + lat + (len / bw).ceil();
    }
    load + model.compute_cycles(payload) as f64 + io
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct MockEnv {
        now: u64,
        submitted: Vec<(IssueCtx, IoCommand)>,
        deny: bool,
        full: u32,
    }

    impl KernelEnv for MockEnv {
        fn now(&self) -> u64 {
            self.now
        }
        fn check_access(&mut self, _: IssueCtx, _: MemorySpace, _: u64, _: u64) -> bool {
            !self.deny
        }
        fn submit(&mut self, ctx: IssueCtx, cmd: IoCommand) -> Result<(), QueueFull> {
            if self.full > 0 {
                self.full -= 1;
                return Err(QueueFull);
            }
            self.submitted.push((ctx, cmd));
            Ok(())
        }
    }

    fn params(load: u64, payload: u32) -> ProgramParams {
        ProgramParams {
            load_cycles: load,
            payload,
            fragmentation: FragmentationMode::Hardware,
            fragment_bytes: Some(512),
            reissue_cost: 20,
            l2_base: 0,
            host_base: 0,
        }
    }

    fn run(inst: &mut KernelInstance, env: &mut MockEnv, max: u64) -> (Progress, u64) {
        for c in 1..=max {
            let p = inst.advance(env);
            env.now += 1;
            if p != Progress::Running {
                return (p, c);
            }
        }
        (Progress::Running, max)
    }

    #[test]
    fn spin_per_byte_cost() {
        let k = KernelModel::spin("s", 1, 2);
        // fixed_cost must be >= 1; a zero fixed cost adds nothing here
        assert_eq!(k.compute_cycles(64) - k.fixed_cost, 128);
    }

    #[test]
    fn pure_compute_runs_to_done() {
        let k = KernelModel::spin("s", 100, 0);
        let mut inst = KernelInstance::new(0, 0, 0, 0, 0, &k, &params(11, 36), None);
        let mut env = MockEnv::default();
        assert_eq!(run(&mut inst, &mut env, 1000), (Progress::Done, 111));
        assert_eq!(inst.kernel_cycles, 100);
        assert_eq!(inst.resident_cycles, 111);
    }

    #[test]
    fn watchdog_terminates_at_limit() {
        let k = KernelModel::spin("s", 2000, 0);
        let mut inst = KernelInstance::new(0, 0, 0, 0, 0, &k, &params(11, 36), Some(1000));
        let mut env = MockEnv::default();
        let (p, _) = run(&mut inst, &mut env, 5000);
        assert_eq!(p, Progress::Terminated(Termination::CycleLimit));
        assert_eq!(inst.kernel_cycles, 1000);
    }

    #[test]
    fn kernel_finishing_on_limit_is_done() {
        let k = KernelModel::spin("s", 1000, 0);
        let mut inst = KernelInstance::new(0, 0, 0, 0, 0, &k, &params(11, 36), Some(1000));
        let mut env = MockEnv::default();
        assert_eq!(run(&mut inst, &mut env, 5000).0, Progress::Done);
    }

    #[test]
    fn blocking_write_waits_for_completion() {
        let k = builtin("io_write").unwrap();
        let mut inst = KernelInstance::new(0, 0, 0, 0, 0, &k, &params(11, 100), None);
        let mut env = MockEnv::default();
        // load 11 + compute 30 + issue 1
        assert_eq!(run(&mut inst, &mut env, 42), (Progress::Running, 42));
        assert_eq!(env.submitted.len(), 1);
        assert_eq!(env.submitted[0].1.len, 100);
        assert!(inst.is_blocked());
        for _ in 0..50 {
            assert_eq!(inst.advance(&mut env), Progress::Running);
        }
        assert_eq!(inst.io_completed(0), Some(41));
        assert!(inst.settle());
    }

    #[test]
    fn software_fragmentation_issues_pieces_with_cost() {
        let k = builtin("io_write").unwrap();
        let mut p = params(1, 1000);
        p.fragmentation = FragmentationMode::Software;
        let mut inst = KernelInstance::new(0, 0, 0, 0, 0, &k, &p, None);
        let mut env = MockEnv::default();
        run(&mut inst, &mut env, 1 + 30 + 40);
        let lens: Vec<u32> = env.submitted.iter().map(|(_, c)| c.len).collect();
        assert_eq!(lens, vec![512, 488]);
        assert_eq!(env.submitted[1].1.addr, 512);
        assert_eq!(inst.io_completed(0), None);
        assert_eq!(inst.io_completed(0), Some(1 + 30 + 19));
    }

    #[test]
    fn queue_full_stalls_issue() {
        let k = builtin("io_write").unwrap();
        let mut inst = KernelInstance::new(0, 0, 0, 0, 0, &k, &params(1, 100), None);
        let mut env = MockEnv { full: 3, ..MockEnv::default() };
        run(&mut inst, &mut env, 1 + 30 + 1);
        assert!(env.submitted.is_empty());
        run(&mut inst, &mut env, 3);
        assert_eq!(env.submitted.len(), 1);
    }

    #[test]
    fn illegal_access_terminates() {
        let k = builtin("io_write").unwrap();
        let mut inst = KernelInstance::new(0, 0, 0, 0, 0, &k, &params(1, 100), None);
        let mut env = MockEnv { deny: true, ..MockEnv::default() };
        let (p, _) = run(&mut inst, &mut env, 100);
        assert_eq!(p, Progress::Terminated(Termination::IllegalAccess { addr: 0 }));
        assert!(env.submitted.is_empty());
    }

    #[test]
    fn reduce_cost_is_affine_in_payload() {
        let k = builtin("reduce").unwrap();
        let c = |p| k.compute_cycles(p) as i64;
        assert_eq!(c(4096) - c(2048), c(2048) - c(1024) + (c(2048) - c(1024)));
        assert_eq!(c(4096) - c(2048), 2 * (c(3072) - c(2048)));
    }

    #[test]
    fn catalog_has_seven_models() {
        let names: Vec<String> = builtin_kernels().into_iter().map(|k| k.name).collect();
        assert_eq!(names, BUILTIN_NAMES);
        assert!(builtin("nope").is_none());
        for k in builtin_kernels() {
            k.validate().unwrap();
        }
    }

    #[test]
    fn load_overlaps_scheduling_decision() {
        assert_eq!(load_cycles(64, 64, 10, 5), 11);
        assert_eq!(load_cycles(64, 64, 0, 5), 5);
        assert_eq!(load_cycles(4096, 64, 30, 5), 94);
    }
}
