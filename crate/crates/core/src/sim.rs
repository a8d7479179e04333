//! The cycle-stepped device model.
//!
//! Every cycle runs the same seven phases in order: ingress and matching,
//! scheduler accounting, PU allocation, kernel execution, IO arbitration,
//! unblocking of finished transfers and metric sampling. A packet whose last
//! byte arrives in cycle `t` is schedulable in cycle `t`.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Derived, Range, SimConfig};
use crate::error::SimError;
use crate::flows::{ControlPlane, EventKind, FlowTuple, MemorySpace, HEADER_SIZE};
use crate::io::{Completion, Granularity, IoEngine, IoRequest, Owner};
use crate::kernels::{
    load_cycles, IoCommand, IssueCtx, KernelEnv, KernelInstance, ProgramParams, Progress, QueueFull, Termination,
};
use crate::matching::{admit, Admission};
use crate::metrics::{summarize, FlowLog, RunLog, Sample, SimReport};
use crate::scheduler::{update_tput, PuScheduler};
use crate::traffic::{build_trace, Scenario, TraceRecord};

/// Simulated time in cycles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Clock {
    now: u64,
}

impl Clock {
    pub fn now(&self) -> u64 {
        self.now
    }

    fn tick(&mut self) {
        self.now += 1;
    }
}

#[derive(Debug, Clone, Copy)]
struct PacketState {
    flow: usize,
    size: u32,
}

fn sample(rng: &mut ChaCha8Rng, r: Range) -> u64 {
    if r.min == r.max {
        r.min
    } else {
        rng.random_range(r.min..=r.max)
    }
}

struct Env<'a> {
    now: u64,
    ectx: usize,
    cluster: usize,
    dma_prio: u16,
    egress_prio: u16,
    cp: &'a mut ControlPlane,
    dma: &'a mut IoEngine,
    egress: &'a mut IoEngine,
    outstanding: &'a mut [u32],
    depth: u32,
    rng: &'a mut ChaCha8Rng,
    local: Range,
    host: Range,
    next_req: &'a mut u64,
}

impl KernelEnv for Env<'_> {
    fn now(&self) -> u64 {
        self.now
    }

    fn check_access(&mut self, ctx: IssueCtx, space: MemorySpace, addr: u64, len: u64) -> bool {
        self.cp.check_memory_access(self.ectx, space, addr, len, ctx.kernel_id, self.now)
    }

    fn submit(&mut self, ctx: IssueCtx, cmd: IoCommand) -> Result<(), QueueFull> {
        if self.outstanding[self.cluster] >= self.depth {
            return Err(QueueFull);
        }
        let latency = sample(self.rng, if cmd.kind.is_host() { self.host } else { self.local });
        let req = IoRequest {
            id: *self.next_req,
            owner: Owner::Kernel { kernel_id: ctx.kernel_id, pu: ctx.pu, group: ctx.group },
            flow: ctx.flow,
            kind: cmd.kind,
            total_len: cmd.len,
            remaining_len: cmd.len,
            priority: if cmd.kind.is_egress() { self.egress_prio } else { self.dma_prio },
            cluster: self.cluster,
            submit_cycle: self.now,
            eligible_cycle: self.now + latency,
        };
        *self.next_req += 1;
        self.outstanding[self.cluster] += 1;
        if cmd.kind.is_egress() {
            self.egress.enqueue(req);
        } else {
            self.dma.enqueue(req);
        }
        Ok(())
    }
}

pub struct Simulator {
    cfg: SimConfig,
    derived: Derived,
    clock: Clock,
    cp: ControlPlane,
    tuples: Vec<FlowTuple>,
    trace: Vec<TraceRecord>,
    next_record: usize,
    /// Records on the wire, head being serialized.
    wire: VecDeque<usize>,
    /// Remaining wire bytes of the head packet, in units of `1 / ingress.den` bytes.
    head_units: u128,
    packets: Vec<PacketState>,
    l2_packet_used: u64,
    scheduler: PuScheduler,
    pus: Vec<Option<KernelInstance>>,
    retiring: Vec<usize>,
    dma: IoEngine,
    egress: IoEngine,
    outstanding: Vec<u32>,
    rng: ChaCha8Rng,
    next_kernel: u64,
    next_req: u64,
    log: RunLog,
    window: Sample,
    window_start: u64,
    io_bytes_mark: Vec<u64>,
}

impl Simulator {
    /// Builds ECTXs for every flow and pre-generates the trace.
    pub fn new(cfg: &SimConfig, scenario: &Scenario) -> Result<Self, SimError> {
        let derived = cfg.validate()?;
        scenario.validate(derived.ingress)?;
        let trace = build_trace(scenario, derived.ingress, cfg.seed)?;
        Self::with_trace(cfg, scenario, trace)
    }

    /// Like [`Simulator::new`] with an externally supplied trace.
    pub fn with_trace(cfg: &SimConfig, scenario: &Scenario, trace: Vec<TraceRecord>) -> Result<Self, SimError> {
        let derived = cfg.validate()?;
        scenario.validate(derived.ingress)?;
        if let Some(r) = trace.iter().find(|r| r.flow >= scenario.flows.len()) {
            return Err(crate::error::ScenarioError::Invalid(format!(
                "trace references flow {} but the scenario has {}",
                r.flow,
                scenario.flows.len()
            ))
            .into());
        }
        let mut cp = ControlPlane::new(cfg.l2_kernel_buffer);
        let mut tuples = Vec::new();
        let mut flow_logs = Vec::new();
        for (i, f) in scenario.flows.iter().enumerate() {
            let rule = f.match_rule(i);
            let kernel = f.kernel.resolve()?;
            cp.create_ectx(rule, f.slo.clone(), kernel, f.requested_memory)?;
            tuples.push(rule.representative_tuple());
            flow_logs.push(FlowLog {
                name: f.name.clone(),
                role: f.role,
                prio: f.slo.compute_priority,
                ..FlowLog::default()
            });
        }
        let n = scenario.flows.len();
        let granularity = Granularity::for_mode(cfg.fragmentation_mode, derived.fragment_bytes);
        let dma_prio: Vec<u16> = scenario.flows.iter().map(|f| f.slo.dma_priority).collect();
        let egress_prio: Vec<u16> = scenario.flows.iter().map(|f| f.slo.egress_priority).collect();
        let clusters = cfg.num_clusters as usize;
        let num_pus = derived.num_pus;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        Ok(Simulator {
            dma: IoEngine::new(
                derived.interconnect,
                cfg.io_grant_overhead,
                granularity,
                cfg.io_arbiter,
                clusters,
                dma_prio,
            ),
            egress: IoEngine::new(
                derived.egress,
                cfg.io_grant_overhead,
                granularity,
                cfg.io_arbiter,
                clusters,
                egress_prio,
            ),
            scheduler: PuScheduler::new(cfg.pu_scheduler, cfg.pu_limit_scale, num_pus),
            cfg: cfg.clone(),
            derived,
            clock: Clock::default(),
            cp,
            tuples,
            packets: trace.iter().map(|r| PacketState { flow: r.flow, size: r.total_size }).collect(),
            trace,
            next_record: 0,
            wire: VecDeque::new(),
            head_units: 0,
            l2_packet_used: 0,
            pus: vec![None; num_pus],
            retiring: Vec::new(),
            outstanding: vec![0; clusters],
            rng,
            next_kernel: 0,
            next_req: 0,
            log: RunLog {
                scenario: scenario.name.clone(),
                steady_window: scenario.steady_window,
                num_pus,
                flows: flow_logs,
                ..RunLog::default()
            },
            window: Sample::default(),
            window_start: 0,
            io_bytes_mark: vec![0; n],
        })
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn control_plane(&self) -> &ControlPlane {
        &self.cp
    }

    pub fn busy_pus(&self) -> usize {
        self.pus.iter().filter(|p| p.is_some()).count()
    }

    /// Nothing left to arrive, queue, run or transfer.
    pub fn is_drained(&self) -> bool {
        self.next_record == self.trace.len()
            && self.wire.is_empty()
            && self.cp.fmqs.iter().all(|f| f.is_empty())
            && self.pus.iter().all(Option::is_none)
            && self.dma.pending() == 0
            && self.egress.pending() == 0
    }

    fn ingress(&mut self, now: u64) {
        while let Some(r) = self.trace.get(self.next_record) {
            if r.arrival_cycle > now {
                break;
            }
            let flow = r.flow;
            if self.log.flows[flow].first_arrival.is_none() {
                self.log.flows[flow].first_arrival = Some(r.arrival_cycle);
            }
            self.wire.push_back(self.next_record);
            self.next_record += 1;
        }
        let rate = self.derived.ingress;
        let mut budget = rate.num as u128;
        while let Some(&idx) = self.wire.front() {
            if self.head_units == 0 {
                self.head_units = self.packets[idx].size as u128 * rate.den as u128;
            }
            let take = budget.min(self.head_units);
            self.head_units -= take;
            budget -= take;
            if self.head_units > 0 {
                break;
            }
            self.wire.pop_front();
            self.classify(idx as u64);
        }
    }

    fn classify(&mut self, desc: u64) {
        let PacketState { flow, size } = self.packets[desc as usize];
        let Some(fmq_id) = self.cp.match_table.classify(&self.tuples[flow]) else {
            self.log.unmatched += 1;
            return;
        };
        let log = &mut self.log.flows[flow];
        log.packets_in += 1;
        let fmq = &mut self.cp.fmqs[fmq_id];
        if self.l2_packet_used + size as u64 > self.cfg.l2_packet_buffer {
            fmq.drops += 1;
            fmq.congestion_marks += 1;
            log.dropped += 1;
            return;
        }
        match admit(fmq, desc) {
            Admission::Admitted => self.l2_packet_used += size as u64,
            Admission::Dropped => log.dropped += 1,
        }
    }

    fn schedule(&mut self, now: u64) {
        for pu in self.retiring.drain(..) {
            let inst = self.pus[pu].take().expect("retiring PU holds a kernel");
            let fmq = &mut self.cp.fmqs[self.cp.ectxs[inst.flow].fmq_id];
            fmq.cur_pu_occup -= 1;
        }
        let mut idle = 0;
        for pu in 0..self.pus.len() {
            if self.pus[pu].is_some() {
                continue;
            }
            let Some((fmq_id, desc)) = self.scheduler.dispatch(&mut self.cp.fmqs) else {
                idle += 1;
                continue;
            };
            let PacketState { flow, size } = self.packets[desc as usize];
            debug_assert_eq!(self.cp.ectxs[flow].fmq_id, fmq_id);
            let ectx = &self.cp.ectxs[flow];
            let local = sample(&mut self.rng, self.cfg.local_dma_latency);
            let params = ProgramParams {
                load_cycles: load_cycles(size, self.derived.interconnect_width, local, self.cfg.sched_decision_latency),
                payload: size - HEADER_SIZE,
                fragmentation: self.cfg.fragmentation_mode,
                fragment_bytes: self.derived.fragment_bytes,
                reissue_cost: self.cfg.software_reissue_cost,
                l2_base: ectx.l2_segment.base,
                host_base: ectx.slo.allowed_host_ranges.first().map_or(0, |r| r.base),
            };
            let inst = KernelInstance::new(
                self.next_kernel,
                flow,
                pu,
                desc,
                now,
                &ectx.kernel,
                &params,
                ectx.slo.kernel_cycle_limit,
            );
            self.next_kernel += 1;
            self.pus[pu] = Some(inst);
        }
        if idle > 0 && self.cfg.check_work_conservation && !self.scheduler.idle_is_justified(&self.cp.fmqs) {
            self.log.work_conservation_violations += 1;
        }
    }

    fn execute(&mut self, now: u64) {
        let per_cluster = self.cfg.pus_per_cluster as usize;
        let mut finished = Vec::new();
        for (pu, slot) in self.pus.iter_mut().enumerate() {
            let Some(inst) = slot.as_mut() else { continue };
            if self.retiring.contains(&pu) {
                continue;
            }
            let slo = &self.cp.ectxs[inst.flow].slo;
            let mut env = Env {
                now,
                ectx: inst.flow,
                cluster: pu / per_cluster,
                dma_prio: slo.dma_priority,
                egress_prio: slo.egress_priority,
                dma: &mut self.dma,
                egress: &mut self.egress,
                outstanding: &mut self.outstanding,
                depth: self.cfg.cluster_fifo_depth,
                rng: &mut self.rng,
                local: self.cfg.local_dma_latency,
                host: self.derived.host_latency_cycles,
                next_req: &mut self.next_req,
                cp: &mut self.cp,
            };
            match inst.advance(&mut env) {
                Progress::Running => {}
                Progress::Done => finished.push((pu, None)),
                Progress::Terminated(t) => finished.push((pu, Some(t))),
            }
        }
        for (pu, term) in finished {
            self.finish(pu, now, term);
        }
    }

    /// Records the end of the kernel on `pu`; the PU is released at the
    /// start of the next scheduling phase.
    fn finish(&mut self, pu: usize, now: u64, term: Option<Termination>) {
        let inst = self.pus[pu].as_ref().expect("finishing PU holds a kernel");
        let (kernel_id, packet, dispatched) = (inst.id, inst.packet, inst.dispatch_cycle);
        let PacketState { flow, size } = self.packets[packet as usize];
        let done = now + 1;
        let log = &mut self.log.flows[flow];
        match term {
            None => {
                log.processed += 1;
                log.bytes_processed += size as u64;
                log.kernel_times.push(done - dispatched);
                log.last_completion = Some(done);
            }
            Some(t) => {
                log.terminated += 1;
                log.last_completion = Some(done);
                if t == Termination::CycleLimit {
                    self.cp.ectxs[flow].events.push(now, EventKind::CycleLimitExceeded { kernel_id });
                }
                let index = self.cp.ectxs[flow].events.len() - 1;
                self.deliver_event(flow, index, now);
            }
        }
        self.l2_packet_used -= size as u64;
        self.retiring.push(pu);
    }

    fn deliver_event(&mut self, ectx: usize, index: usize, now: u64) {
        let latency = sample(&mut self.rng, self.derived.host_latency_cycles);
        let len = self.cfg.event_record_size;
        self.dma.enqueue(IoRequest {
            id: self.next_req,
            owner: Owner::Event { ectx, index },
            flow: ectx,
            kind: crate::kernels::IoKind::DmaWriteHost,
            total_len: len,
            remaining_len: len,
            priority: u16::MAX,
            cluster: 0,
            submit_cycle: now,
            eligible_cycle: now + latency,
        });
        self.next_req += 1;
        self.log.events += 1;
    }

    fn complete_io(&mut self, c: Completion, now: u64) {
        match c.owner {
            Owner::Event { ectx, index } => self.cp.ectxs[ectx].events.mark_delivered(index, now + 1),
            Owner::Kernel { kernel_id, pu, group } => {
                self.outstanding[c.cluster] -= 1;
                let log = &mut self.log.flows[c.flow];
                if c.kind.is_egress() {
                    log.egress_bytes += c.total_len as u64;
                } else {
                    log.dma_bytes += c.total_len as u64;
                }
                if self.retiring.contains(&pu) {
                    return;
                }
                let Some(inst) = self.pus[pu].as_mut().filter(|i| i.id == kernel_id) else {
                    return;
                };
                if let Some(start) = inst.io_completed(group) {
                    log.io_latencies.push(now + 1 - start);
                }
                if inst.settle() {
                    self.finish(pu, now, None);
                }
            }
        }
    }

    fn sample(&mut self, now: u64) {
        let n = self.cp.fmqs.len();
        if self.window.occupancy_sum.len() != n {
            self.window.occupancy_sum = vec![0; n];
            self.window.active_window = vec![false; n];
        }
        let steady = self.log.steady_window.is_some_and(|[a, b]| now >= a && now < b);
        for (i, f) in self.cp.fmqs.iter().enumerate() {
            let occ = f.cur_pu_occup as u64;
            self.window.occupancy_sum[i] += occ;
            self.window.active_window[i] |= f.is_active();
            self.log.flows[i].occupancy_cycles += occ;
            if steady {
                self.log.flows[i].steady_occupancy_cycles += occ;
            }
        }
        self.log.pu_busy_cycles += self.pus.iter().filter(|p| p.is_some()).count() as u64;
        let end = now + 1;
        if end.is_multiple_of(self.cfg.sample_interval) {
            self.flush_window(end);
        }
    }

    fn flush_window(&mut self, end: u64) {
        if end <= self.window_start {
            return;
        }
        let n = self.cp.fmqs.len();
        let mut s = std::mem::take(&mut self.window);
        if s.occupancy_sum.len() != n {
            s.occupancy_sum = vec![0; n];
            s.active_window = vec![false; n];
        }
        s.cycle = end;
        s.window_len = end - self.window_start;
        s.occupancy = self.cp.fmqs.iter().map(|f| f.cur_pu_occup).collect();
        s.active_now = self.cp.fmqs.iter().map(|f| f.is_active()).collect();
        s.io_bytes = (0..n)
            .map(|i| {
                let total = self.dma.bytes_by_flow[i] + self.egress.bytes_by_flow[i];
                let delta = total - self.io_bytes_mark[i];
                self.io_bytes_mark[i] = total;
                delta
            })
            .collect();
        self.check_packet_conservation();
        self.log.samples.push(s);
        self.window_start = end;
    }

    fn check_packet_conservation(&mut self) {
        for (i, f) in self.log.flows.iter().enumerate() {
            let queued = self.cp.fmqs[i].fifo.len() as u64;
            let running = self.cp.fmqs[i].cur_pu_occup as u64;
            let retired_pending =
                self.retiring.iter().filter(|&&pu| self.pus[pu].as_ref().is_some_and(|k| k.flow == i)).count() as u64;
            let in_flight = queued + running - retired_pending;
            if f.packets_in != f.processed + f.terminated + f.dropped + in_flight {
                self.log.packet_conservation_violations += 1;
            }
        }
    }

    /// Advances exactly one cycle.
    pub fn step(&mut self) {
        let now = self.clock.now();
        self.ingress(now);
        update_tput(&mut self.cp.fmqs);
        self.schedule(now);
        self.execute(now);
        let mut done = self.dma.arbitrate_cycle(now);
        done.extend(self.egress.arbitrate_cycle(now));
        for c in done {
            self.complete_io(c, now);
        }
        self.sample(now);
        self.clock.tick();
    }

    /// Steps until drained or `max_cycles`, then aggregates the report.
    pub fn run_to_end(mut self) -> SimReport {
        while self.clock.now() < self.cfg.max_cycles && !self.is_drained() {
            self.step();
        }
        self.finish_log()
    }

    pub fn finish_log(mut self) -> SimReport {
        let now = self.clock.now();
        self.flush_window(now);
        self.log.cycles = now;
        self.log.dma_busy_cycles = self.dma.busy_cycles;
        self.log.egress_busy_cycles = self.egress.busy_cycles;
        summarize(&self.log)
    }

    /// Raw log so far, for tests and tools.
    pub fn log(&self) -> &RunLog {
        &self.log
    }
}

/// Runs `scenario` under `cfg` to completion.
pub fn run(cfg: &SimConfig, scenario: &Scenario) -> Result<SimReport, SimError> {
    Ok(Simulator::new(cfg, scenario)?.run_to_end())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelModel;
    use crate::traffic::{FlowSpec, KernelSpec, Role, SizeDist, Volume};

    fn cfg(pus: u32) -> SimConfig {
        SimConfig {
            num_clusters: 1,
            pus_per_cluster: pus,
            local_dma_latency: Range::new(10, 10),
            ..SimConfig::default()
        }
    }

    fn spin_scenario(cost: u64, limit: Option<u64>) -> Scenario {
        let mut f = FlowSpec::new(
            "t",
            Role::Tenant,
            KernelSpec::Custom(KernelModel::spin("spin", cost, 0)),
            SizeDist::Fixed { bytes: 64 },
            0.5,
            Volume::Packets(1),
        );
        f.slo.kernel_cycle_limit = limit;
        Scenario { flows: vec![f], ..Scenario::empty("unit") }
    }

    fn packets(arrivals: &[u64]) -> Vec<TraceRecord> {
        arrivals.iter().map(|&a| TraceRecord { arrival_cycle: a, flow: 0, total_size: 64 }).collect()
    }

    #[test]
    fn single_packet_timeline() {
        // 64 B at 50 B/cycle lands in cycle 1 and is dispatched the same cycle;
        // 11 load cycles (one bus beat plus 10 local latency) then 100 compute
        // cycles end in cycle 111. The PU is handed back in cycle 112.
        let sim = Simulator::with_trace(&cfg(1), &spin_scenario(100, None), packets(&[0])).unwrap();
        let r = sim.run_to_end();
        let f = &r.flows[0];
        assert_eq!(f.processed, 1);
        assert_eq!(f.kernel_time.unwrap().p50, 111);
        assert_eq!(f.fct, Some(112));
        assert_eq!(r.cycles, 113);
    }

    #[test]
    fn freed_pu_is_reused_next_cycle() {
        let sim = Simulator::with_trace(&cfg(1), &spin_scenario(100, None), packets(&[0, 0])).unwrap();
        let r = sim.run_to_end();
        let f = &r.flows[0];
        assert_eq!(f.processed, 2);
        assert_eq!((f.kernel_time.unwrap().min, f.kernel_time.unwrap().max), (111, 111));
        assert_eq!(f.fct, Some(223));
    }

    #[test]
    fn dispatch_sees_packets_classified_in_the_same_cycle() {
        let mut sim = Simulator::with_trace(&cfg(2), &spin_scenario(100, None), packets(&[0])).unwrap();
        sim.step();
        assert_eq!(sim.busy_pus(), 0);
        sim.step();
        assert_eq!(sim.busy_pus(), 1);
        assert_eq!(sim.control_plane().fmqs[0].cur_pu_occup, 1);
        assert_eq!(sim.control_plane().fmqs[0].bvt, 1);
    }

    #[test]
    fn cycle_limit_terminates_and_reports() {
        let sim = Simulator::with_trace(&cfg(1), &spin_scenario(1000, Some(50)), packets(&[0])).unwrap();
        let r = sim.run_to_end();
        let f = &r.flows[0];
        assert_eq!((f.processed, f.terminated), (0, 1));
        assert_eq!(r.events, 1);
        assert_eq!(r.packet_conservation_violations, 0);
    }

    #[test]
    fn empty_scenario_finishes_immediately() {
        let r = run(&SimConfig::default(), &Scenario::empty("nothing")).unwrap();
        assert_eq!(r.cycles, 0);
        assert!(r.flows.is_empty());
        assert_eq!(r.fairness, None);
    }

    #[test]
    fn trace_must_reference_known_flows() {
        let bad = vec![TraceRecord { arrival_cycle: 0, flow: 3, total_size: 64 }];
        assert!(Simulator::with_trace(&cfg(1), &spin_scenario(10, None), bad).is_err());
    }
}
