//! Flow-side data model: packets, match rules, SLO policies, execution
//! contexts, flow management queues, memory segments and event queues.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::error::EctxError;
use crate::kernels::KernelModel;
use crate::matching::MatchTable;

/// IPv4 + UDP header bytes counted in every packet's wire size.
pub const HEADER_SIZE: u32 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Udp,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowTuple {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: Proto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub id: u64,
    pub tuple: FlowTuple,
    pub total_size: u32,
    pub arrival_cycle: u64,
}

impl Packet {
    pub fn payload_size(&self) -> u32 {
        self.total_size - HEADER_SIZE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchRule {
    ThreeTuple { dst_ip: Ipv4Addr, dst_port: u16, proto: Proto },
    FiveTuple { tuple: FlowTuple },
}

impl MatchRule {
    pub fn matches(&self, t: &FlowTuple) -> bool {
        match self {
            MatchRule::ThreeTuple { dst_ip, dst_port, proto } => {
                t.dst_ip == *dst_ip && t.dst_port == *dst_port && t.proto == *proto
            }
            MatchRule::FiveTuple { tuple } => tuple == t,
        }
    }

    fn three(&self) -> (Ipv4Addr, u16, Proto) {
        match *self {
            MatchRule::ThreeTuple { dst_ip, dst_port, proto } => (dst_ip, dst_port, proto),
            MatchRule::FiveTuple { tuple } => (tuple.dst_ip, tuple.dst_port, tuple.proto),
        }
    }

    /// True if some packet could match both rules.
    pub fn overlaps(&self, other: &MatchRule) -> bool {
        match (self, other) {
            (MatchRule::FiveTuple { tuple: a }, MatchRule::FiveTuple { tuple: b }) => a == b,
            _ => self.three() == other.three(),
        }
    }

    /// A tuple this rule accepts; used to stamp generated packets.
    pub fn representative_tuple(&self) -> FlowTuple {
        match *self {
            MatchRule::ThreeTuple { dst_ip, dst_port, proto } => {
                FlowTuple { src_ip: Ipv4Addr::new(192, 168, 0, 1), dst_ip, src_port: 40000, dst_port, proto }
            }
            MatchRule::FiveTuple { tuple } => tuple,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddrRange {
    pub base: u64,
    pub len: u64,
}

impl AddrRange {
    pub fn contains(&self, addr: u64, len: u64) -> bool {
        match addr.checked_add(len) {
            Some(end) => addr >= self.base && end <= self.base.saturating_add(self.len),
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SloPolicy {
    pub compute_priority: u16,
    pub dma_priority: u16,
    pub egress_priority: u16,
    /// `None` means unlimited.
    pub kernel_cycle_limit: Option<u64>,
    pub fmq_fifo_capacity: u32,
    pub memory_quota: u64,
    pub allowed_host_ranges: Vec<AddrRange>,
}

impl Default for SloPolicy {
    fn default() -> Self {
        SloPolicy {
            compute_priority: 1,
            dma_priority: 1,
            egress_priority: 1,
            kernel_cycle_limit: None,
            fmq_fifo_capacity: 256,
            memory_quota: crate::config::MIB,
            allowed_host_ranges: vec![AddrRange { base: 0, len: 1 << 40 }],
        }
    }
}

impl SloPolicy {
    /// Same priority for compute, DMA and egress.
    pub fn with_priority(prio: u16) -> Self {
        SloPolicy { compute_priority: prio, dma_priority: prio, egress_priority: prio, ..SloPolicy::default() }
    }

    pub fn validate(&self) -> Result<(), EctxError> {
        if self.compute_priority == 0 || self.dma_priority == 0 || self.egress_priority == 0 {
            return Err(EctxError::InvalidSlo("priorities must be >= 1".into()));
        }
        if self.fmq_fifo_capacity == 0 {
            return Err(EctxError::InvalidSlo("fmq_fifo_capacity must be >= 1".into()));
        }
        if self.kernel_cycle_limit == Some(0) {
            return Err(EctxError::InvalidSlo("kernel_cycle_limit must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    CycleLimitExceeded { kernel_id: u64 },
    IllegalMemoryAccess { kernel_id: u64, address: u64 },
    AllocationError { requested: u64 },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::CycleLimitExceeded { .. } => "cycle_limit_exceeded",
            EventKind::IllegalMemoryAccess { .. } => "illegal_memory_access",
            EventKind::AllocationError { .. } => "allocation_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub cycle: u64,
    pub kind: EventKind,
    /// Cycle at which the record reached host memory.
    pub delivered_cycle: Option<u64>,
}

/// Per-ECTX event log with a host-side read cursor.
#[derive(Debug, Clone, Default)]
pub struct EventQueue {
    events: Vec<Event>,
    read_cursor: usize,
}

impl EventQueue {
    /// Appends an event; returns its index.
    pub fn push(&mut self, cycle: u64, kind: EventKind) -> usize {
        if let Some(last) = self.events.last() {
            assert!(last.cycle <= cycle, "event queue must stay in cycle order");
        }
        self.events.push(Event { cycle, kind, delivered_cycle: None });
        self.events.len() - 1
    }

    pub fn mark_delivered(&mut self, idx: usize, cycle: u64) {
        self.events[idx].delivered_cycle = Some(cycle);
    }

    /// Host-side read of the next unread event.
    pub fn poll(&mut self) -> Option<&Event> {
        let ev = self.events.get(self.read_cursor)?;
        self.read_cursor += 1;
        Some(ev)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Flow management queue: a FIFO of packet descriptors plus the
/// scheduling counters used by the PU scheduler.
#[derive(Debug, Clone)]
pub struct Fmq {
    pub fifo: VecDeque<u64>,
    pub capacity: u32,
    pub prio: u16,
    pub cur_pu_occup: u32,
    pub total_pu_occup: u64,
    pub bvt: u64,
    pub congestion_marks: u64,
    pub drops: u64,
}

impl Fmq {
    pub fn new(prio: u16, capacity: u32) -> Self {
        Fmq {
            fifo: VecDeque::new(),
            capacity,
            prio,
            cur_pu_occup: 0,
            total_pu_occup: 0,
            bvt: 0,
            congestion_marks: 0,
            drops: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    /// Non-empty FIFO or kernels in flight.
    pub fn is_active(&self) -> bool {
        !self.fifo.is_empty() || self.cur_pu_occup > 0
    }

    /// Throughput as the exact pair `(total_pu_occup, bvt)`; `(0, 1)` before any activity.
    pub fn tput(&self) -> (u64, u64) {
        if self.bvt == 0 {
            (0, 1)
        } else {
            (self.total_pu_occup, self.bvt)
        }
    }

    pub fn tput_f64(&self) -> f64 {
        let (n, d) = self.tput();
        n as f64 / d as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub base: u64,
    pub len: u64,
}

/// First-fit static allocator over the L2 kernel buffer; no compaction.
#[derive(Debug, Clone)]
pub struct SegmentAllocator {
    capacity: u64,
    /// Sorted by base.
    used: Vec<Segment>,
}

impl SegmentAllocator {
    pub fn new(capacity: u64) -> Self {
        SegmentAllocator { capacity, used: Vec::new() }
    }

    pub fn allocated(&self) -> u64 {
        self.used.iter().map(|s| s.len).sum()
    }

    pub fn available(&self) -> u64 {
        self.capacity - self.allocated()
    }

    pub fn allocate(&mut self, len: u64) -> Option<Segment> {
        let mut cursor = 0u64;
        let mut slot = None;
        for (i, s) in self.used.iter().enumerate() {
            if s.base - cursor >= len {
                slot = Some((i, cursor));
                break;
            }
            cursor = s.base + s.len;
        }
        let (idx, base) = match slot {
            Some(x) => x,
            None if self.capacity - cursor >= len => (self.used.len(), cursor),
            None => return None,
        };
        let seg = Segment { base, len };
        self.used.insert(idx, seg);
        Some(seg)
    }

    pub fn free(&mut self, seg: Segment) {
        self.used.retain(|s| *s != seg);
    }

    pub fn segments(&self) -> &[Segment] {
        &self.used
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorySpace {
    L2Local,
    Host,
}

/// Flow execution context.
#[derive(Debug, Clone)]
pub struct Ectx {
    pub id: usize,
    pub match_rule: MatchRule,
    pub slo: SloPolicy,
    pub kernel: KernelModel,
    pub l2_segment: Segment,
    pub events: EventQueue,
    pub fmq_id: usize,
}

impl Ectx {
    /// Range check against the ECTX segment or its host windows.
    pub fn access_allowed(&self, space: MemorySpace, addr: u64, len: u64) -> bool {
        match space {
            MemorySpace::L2Local => {
                AddrRange { base: self.l2_segment.base, len: self.l2_segment.len }.contains(addr, len)
            }
            MemorySpace::Host => self.slo.allowed_host_ranges.iter().any(|r| r.contains(addr, len)),
        }
    }
}

/// Host-side control plane: owns ECTXs, their FMQs, the static L2 allocator
/// and the match table.
#[derive(Debug, Clone)]
pub struct ControlPlane {
    pub ectxs: Vec<Ectx>,
    pub fmqs: Vec<Fmq>,
    pub allocator: SegmentAllocator,
    pub match_table: MatchTable,
}

impl ControlPlane {
    pub fn new(l2_kernel_buffer: u64) -> Self {
        ControlPlane {
            ectxs: Vec::new(),
            fmqs: Vec::new(),
            allocator: SegmentAllocator::new(l2_kernel_buffer),
            match_table: MatchTable::default(),
        }
    }

    pub fn create_ectx(
        &mut self,
        rule: MatchRule,
        slo: SloPolicy,
        kernel: KernelModel,
        requested_memory: u64,
    ) -> Result<usize, EctxError> {
        slo.validate()?;
        if let Some(existing) = self.ectxs.iter().find(|e| e.match_rule.overlaps(&rule)) {
            return Err(EctxError::RuleConflict { existing: existing.id });
        }
        if kernel.kernel_binary_size > requested_memory {
            return Err(EctxError::BinaryTooLarge { binary: kernel.kernel_binary_size, requested: requested_memory });
        }
        if requested_memory > slo.memory_quota {
            return Err(EctxError::QuotaExceeded { requested: requested_memory, quota: slo.memory_quota });
        }
        let segment = self
            .allocator
            .allocate(requested_memory)
            .ok_or(EctxError::Allocation { requested: requested_memory, available: self.allocator.available() })?;
        let id = self.ectxs.len();
        let fmq_id = self.fmqs.len();
        self.fmqs.push(Fmq::new(slo.compute_priority, slo.fmq_fifo_capacity));
        self.match_table.insert(rule, fmq_id).expect("overlap already checked against active ECTXs");
        self.ectxs.push(Ectx {
            id,
            match_rule: rule,
            slo,
            kernel,
            l2_segment: segment,
            events: EventQueue::default(),
            fmq_id,
        });
        Ok(id)
    }

    /// Checks an access; on violation records an `illegal_memory_access`
    /// event and returns false. The caller terminates the kernel.
    pub fn check_memory_access(
        &mut self,
        ectx: usize,
        space: MemorySpace,
        addr: u64,
        len: u64,
        kernel_id: u64,
        cycle: u64,
    ) -> bool {
        let e = &mut self.ectxs[ectx];
        if e.access_allowed(space, addr, len) {
            true
        } else {
            e.events.push(cycle, EventKind::IllegalMemoryAccess { kernel_id, address: addr });
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MIB;
    use crate::kernels::builtin;

    fn rule(last: u8, port: u16) -> MatchRule {
        MatchRule::ThreeTuple { dst_ip: Ipv4Addr::new(10, 0, 0, last), dst_port: port, proto: Proto::Udp }
    }

    fn slo_with_quota(q: u64) -> SloPolicy {
        SloPolicy { memory_quota: q, ..SloPolicy::default() }
    }

    #[test]
    fn first_ectx_gets_segment_at_base_zero() {
        let mut cp = ControlPlane::new(4 * MIB);
        let id = cp.create_ectx(rule(1, 1), slo_with_quota(MIB), builtin("reduce").unwrap(), MIB).unwrap();
        assert_eq!(cp.ectxs[id].l2_segment, Segment { base: 0, len: MIB });
        assert_eq!(cp.ectxs[id].fmq_id, 0);
    }

    #[test]
    fn fifth_mebibyte_fails_allocation() {
        let mut cp = ControlPlane::new(4 * MIB);
        for i in 0..4 {
            cp.create_ectx(rule(i + 1, 1), slo_with_quota(MIB), builtin("reduce").unwrap(), MIB).unwrap();
        }
        assert_eq!(cp.allocator.allocated(), 4 * MIB);
        let err = cp.create_ectx(rule(9, 1), slo_with_quota(MIB), builtin("reduce").unwrap(), MIB).unwrap_err();
        assert!(matches!(err, EctxError::Allocation { requested, available: 0 } if requested == MIB));
    }

    #[test]
    fn identical_three_tuples_conflict() {
        let mut cp = ControlPlane::new(4 * MIB);
        cp.create_ectx(rule(1, 4242), SloPolicy::default(), builtin("reduce").unwrap(), 64 << 10).unwrap();
        let err =
            cp.create_ectx(rule(1, 4242), SloPolicy::default(), builtin("reduce").unwrap(), 64 << 10).unwrap_err();
        assert_eq!(err, EctxError::RuleConflict { existing: 0 });
    }

    #[test]
    fn five_tuple_inside_three_tuple_conflicts() {
        let three = rule(1, 4242);
        let five = MatchRule::FiveTuple { tuple: three.representative_tuple() };
        assert!(three.overlaps(&five));
        let other = MatchRule::FiveTuple { tuple: FlowTuple { src_port: 1, ..three.representative_tuple() } };
        assert!(five.overlaps(&five));
        assert!(!five.overlaps(&other));
    }

    #[test]
    fn binary_larger_than_request_is_rejected() {
        let mut cp = ControlPlane::new(4 * MIB);
        let k = builtin("reduce").unwrap();
        let err = cp.create_ectx(rule(1, 1), SloPolicy::default(), k.clone(), k.kernel_binary_size - 1);
        assert!(matches!(err, Err(EctxError::BinaryTooLarge { .. })));
    }

    #[test]
    fn allocator_is_first_fit_and_disjoint() {
        let mut a = SegmentAllocator::new(100);
        let s1 = a.allocate(30).unwrap();
        let s2 = a.allocate(30).unwrap();
        let s3 = a.allocate(30).unwrap();
        assert_eq!((s1.base, s2.base, s3.base), (0, 30, 60));
        a.free(s2);
        assert_eq!(a.allocate(20).unwrap().base, 30);
        assert!(a.allocate(20).is_none());
        assert_eq!(a.allocate(10).unwrap().base, 50);
    }

    fn ectx_fixture() -> ControlPlane {
        let mut cp = ControlPlane::new(4 * MIB);
        cp.create_ectx(rule(1, 1), SloPolicy::default(), builtin("reduce").unwrap(), 64 << 10).unwrap();
        let slo = SloPolicy {
            allowed_host_ranges: vec![AddrRange { base: 0x1000, len: 0x100 }, AddrRange { base: 0x8000, len: 0x1000 }],
            ..SloPolicy::default()
        };
        cp.create_ectx(rule(2, 1), slo, builtin("reduce").unwrap(), 64 << 10).unwrap();
        cp
    }

    #[test]
    fn access_spanning_full_segment_is_ok() {
        let mut cp = ectx_fixture();
        let seg = cp.ectxs[1].l2_segment;
        assert!(cp.check_memory_access(1, MemorySpace::L2Local, seg.base, seg.len, 0, 0));
        assert!(cp.ectxs[1].events.is_empty());
    }

    #[test]
    fn access_one_byte_past_segment_is_violation() {
        let mut cp = ectx_fixture();
        let seg = cp.ectxs[1].l2_segment;
        assert!(!cp.check_memory_access(1, MemorySpace::L2Local, seg.base, seg.len + 1, 7, 3));
        assert_eq!(cp.ectxs[1].events.len(), 1);
        assert_eq!(
            cp.ectxs[1].events.events()[0].kind,
            EventKind::IllegalMemoryAccess { kernel_id: 7, address: seg.base }
        );
    }

    #[test]
    fn host_write_in_second_range_is_ok() {
        let mut cp = ectx_fixture();
        assert!(cp.check_memory_access(1, MemorySpace::Host, 0x8800, 0x100, 0, 0));
        assert!(!cp.check_memory_access(1, MemorySpace::Host, 0x2000, 1, 0, 0));
    }

    #[test]
    fn event_queue_poll_advances_cursor() {
        let mut q = EventQueue::default();
        q.push(1, EventKind::AllocationError { requested: 5 });
        q.push(4, EventKind::CycleLimitExceeded { kernel_id: 2 });
        assert_eq!(q.poll().unwrap().cycle, 1);
        assert_eq!(q.poll().unwrap().cycle, 4);
        assert!(q.poll().is_none());
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn fmq_tput_is_zero_before_activity() {
        let f = Fmq::new(1, 4);
        assert_eq!(f.tput(), (0, 1));
        assert!(!f.is_active());
    }
}
