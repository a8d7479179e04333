//! Shared interconnect model: the DMA and egress engines, per-cluster
//! command FIFOs, deficit-weighted round-robin arbitration and transfer
//! fragmentation.

use std::collections::VecDeque;

use crate::config::{ByteRate, FragmentationMode, IoArbiterKind};
use crate::kernels::IoKind;

/// Splits `total` bytes into `frag`-sized chunks with a smaller tail.
/// `None` keeps the transfer whole.
pub fn fragment(total: u32, frag: Option<u32>) -> Vec<u32> {
    match frag {
        Some(f) if f > 0 && total > f => {
            let mut out = vec![f; (total / f) as usize];
            if !total.is_multiple_of(f) {
                out.push(total % f);
            }
            out
        }
        _ => vec![total],
    }
}

/// Who is told when a request completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Kernel {
        kernel_id: u64,
        pu: usize,
        group: usize,
    },
    /// Event record for an ECTX event queue entry.
    Event {
        ectx: usize,
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoRequest {
    pub id: u64,
    pub owner: Owner,
    pub flow: usize,
    pub kind: IoKind,
    pub total_len: u32,
    pub remaining_len: u32,
    pub priority: u16,
    pub cluster: usize,
    pub submit_cycle: u64,
    /// First cycle the engine may move bytes (submit plus access latency).
    pub eligible_cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub id: u64,
    pub owner: Owner,
    pub flow: usize,
    pub kind: IoKind,
    pub total_len: u32,
    pub cluster: usize,
    pub submit_cycle: u64,
    /// Cycle in which the last byte moved.
    pub cycle: u64,
}

#[derive(Debug, Clone)]
struct Transfer {
    input: Input,
    bytes: u32,
    cycles_left: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Input {
    Event,
    Queue(usize),
}

/// How requests are mapped onto arbiter inputs and how much one grant moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One FIFO per issuing cluster; a grant moves a whole request.
    WholeRequest,
    /// One queue per tenant; a grant moves at most one fragment.
    Fragment(u32),
}

impl Granularity {
    pub fn for_mode(mode: FragmentationMode, fragment_bytes: Option<u32>) -> Self {
        match (mode, fragment_bytes) {
            (FragmentationMode::None, _) | (_, None) => Granularity::WholeRequest,
            (_, Some(f)) => Granularity::Fragment(f),
        }
    }
}

/// Weighted round-robin over a set of FIFO inputs, plus a strict priority
/// event input. Fragment grants are charged in bytes (deficit form); whole
/// request grants are charged one unit each, so every visit to a cluster
/// FIFO grants up to `weight` requests regardless of their size.
#[derive(Debug, Clone)]
pub struct IoEngine {
    rate: ByteRate,
    grant_overhead: u64,
    granularity: Granularity,
    arbiter: IoArbiterKind,
    quantum: u64,
    /// Tenant priorities, indexed by flow.
    tenant_prio: Vec<u16>,
    queues: Vec<VecDeque<IoRequest>>,
    events: VecDeque<IoRequest>,
    deficit: Vec<u64>,
    credited: Vec<bool>,
    cursor: usize,
    current: Option<Transfer>,
    pub busy_cycles: u64,
    /// Bytes moved per flow.
    pub bytes_by_flow: Vec<u64>,
    pub event_bytes: u64,
}

impl IoEngine {
    /// `inputs` is the cluster count in whole-request mode and the tenant
    /// count otherwise.
    pub fn new(
        rate: ByteRate,
        grant_overhead: u32,
        granularity: Granularity,
        arbiter: IoArbiterKind,
        num_clusters: usize,
        tenant_prio: Vec<u16>,
    ) -> Self {
        let inputs = match granularity {
            Granularity::WholeRequest => num_clusters,
            Granularity::Fragment(_) => tenant_prio.len(),
        };
        let quantum = match granularity {
            Granularity::WholeRequest => 1,
            Granularity::Fragment(f) => f as u64,
        };
        IoEngine {
            rate,
            grant_overhead: grant_overhead as u64,
            granularity,
            arbiter,
            quantum,
            bytes_by_flow: vec![0; tenant_prio.len()],
            tenant_prio,
            queues: vec![VecDeque::new(); inputs],
            events: VecDeque::new(),
            deficit: vec![0; inputs],
            credited: vec![false; inputs],
            cursor: 0,
            current: None,
            busy_cycles: 0,
            event_bytes: 0,
        }
    }

    pub fn enqueue(&mut self, req: IoRequest) {
        if let Owner::Event { .. } = req.owner {
            self.events.push_back(req);
            return;
        }
        let input = match self.granularity {
            Granularity::WholeRequest => req.cluster,
            Granularity::Fragment(_) => req.flow,
        };
        self.queues[input].push_back(req);
    }

    pub fn pending(&self) -> usize {
        self.events.len() + self.queues.iter().map(VecDeque::len).sum::<usize>()
    }

    pub fn is_busy(&self) -> bool {
        self.current.is_some()
    }

    /// True if some queued request may start moving bytes at `now`.
    pub fn has_eligible(&self, now: u64) -> bool {
        let ok = |q: &VecDeque<IoRequest>| q.front().is_some_and(|r| r.eligible_cycle <= now);
        ok(&self.events) || self.queues.iter().any(ok)
    }

    fn queue(&self, input: Input) -> &VecDeque<IoRequest> {
        match input {
            Input::Event => &self.events,
            Input::Queue(i) => &self.queues[i],
        }
    }

    fn queue_mut(&mut self, input: Input) -> &mut VecDeque<IoRequest> {
        match input {
            Input::Event => &mut self.events,
            Input::Queue(i) => &mut self.queues[i],
        }
    }

    fn piece(&self, req: &IoRequest) -> u32 {
        match self.granularity {
            Granularity::WholeRequest => req.remaining_len,
            Granularity::Fragment(f) => req.remaining_len.min(f),
        }
    }

    /// Deficit charged for a grant: one unit per request when whole
    /// requests are granted, bytes otherwise.
    fn cost(&self, req: &IoRequest) -> u64 {
        match self.granularity {
            Granularity::WholeRequest => 1,
            Granularity::Fragment(_) => self.piece(req) as u64,
        }
    }

    fn weight(&self, input: usize) -> u64 {
        let head = self.queues[input].front();
        let prio = match (self.granularity, head) {
            (Granularity::WholeRequest, Some(r)) => r.priority,
            (Granularity::Fragment(_), _) => self.tenant_prio[input],
            (Granularity::WholeRequest, None) => 1,
        };
        prio.max(1) as u64
    }

    fn select(&mut self, now: u64) -> Option<Input> {
        if self.events.front().is_some_and(|r| r.eligible_cycle <= now) {
            return Some(Input::Event);
        }
        let eligible = |q: &VecDeque<IoRequest>| q.front().is_some_and(|r| r.eligible_cycle <= now);
        if !self.queues.iter().any(eligible) {
            return None;
        }
        let n = self.queues.len();
        if self.arbiter == IoArbiterKind::Fifo {
            return (0..n)
                .filter(|&i| eligible(&self.queues[i]))
                .min_by_key(|&i| {
                    let r = self.queues[i].front().expect("eligible head");
                    (r.submit_cycle, r.id)
                })
                .map(Input::Queue);
        }
        loop {
            let i = self.cursor;
            match self.queues[i].front() {
                Some(head) if head.eligible_cycle <= now => {
                    let need = self.cost(head);
                    if !self.credited[i] {
                        self.deficit[i] += self.quantum * self.weight(i);
                        self.credited[i] = true;
                    }
                    if self.deficit[i] >= need {
                        self.deficit[i] -= need;
                        return Some(Input::Queue(i));
                    }
                }
                Some(_) => {}
                None => self.deficit[i] = 0,
            }
            self.credited[i] = false;
            self.cursor = (i + 1) % n;
        }
    }

    /// Advances the engine by one cycle; returns requests whose last byte
    /// moved during this cycle.
    pub fn arbitrate_cycle(&mut self, now: u64) -> Vec<Completion> {
        if self.current.is_none() {
            if let Some(input) = self.select(now) {
                let head = self.queue(input).front().expect("selected input has a head");
                let bytes = self.piece(head);
                let cycles = self.rate.cycles_for(bytes as u64) + self.grant_overhead;
                self.current = Some(Transfer { input, bytes, cycles_left: cycles.max(1) });
            }
        }
        let Some(t) = self.current.as_mut() else {
            return Vec::new();
        };
        self.busy_cycles += 1;
        t.cycles_left -= 1;
        if t.cycles_left > 0 {
            return Vec::new();
        }
        let Transfer { input, bytes, .. } = self.current.take().expect("transfer in flight");
        let q = self.queue_mut(input);
        let head = q.front_mut().expect("transfer head still queued");
        head.remaining_len -= bytes;
        let (flow, done) = (head.flow, head.remaining_len == 0);
        match input {
            Input::Event => self.event_bytes += bytes as u64,
            Input::Queue(_) => self.bytes_by_flow[flow] += bytes as u64,
        }
        if !done {
            return Vec::new();
        }
        let r = self.queue_mut(input).pop_front().expect("completed head");
        vec![Completion {
            id: r.id,
            owner: r.owner,
            flow: r.flow,
            kind: r.kind,
            total_len: r.total_len,
            cluster: r.cluster,
            submit_cycle: r.submit_cycle,
            cycle: now,
        }]
    }
}
